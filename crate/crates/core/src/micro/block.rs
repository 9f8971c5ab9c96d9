use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::SegmentReduce;
use crate::{ParamStore, Tape, Tensor, Var};

use super::attention::attention_param_shapes;
use super::{
    activation_apply, attention_coefficients, Aggregator, AttentionKind, BlockOp, Candidates,
    NUM_SUB_BLOCKS,
};

pub const WEIGHT_GROUP: &str = "w";

/// How parameter names are laid out under a block prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamLayout {
    /// Every candidate owns its parameters: `transform/x{m}/..`, `attention/{kind}/h{H}/..`.
    Supernet,
    /// A single operator per sub-block: `transform/..`, `attention/..`.
    Standalone,
}

fn transform_names(prefix: &str, layout: ParamLayout, expansion: usize) -> (String, String) {
    match layout {
        ParamLayout::Supernet => (
            format!("{prefix}/transform/x{expansion}/w1"),
            format!("{prefix}/transform/x{expansion}/w2"),
        ),
        ParamLayout::Standalone => (
            format!("{prefix}/transform/w1"),
            format!("{prefix}/transform/w2"),
        ),
    }
}

fn attention_names(
    prefix: &str,
    layout: ParamLayout,
    kind: AttentionKind,
    heads: usize,
    head: usize,
    dh: usize,
) -> Vec<String> {
    attention_param_shapes(kind, dh)
        .into_iter()
        .map(|(name, _)| match layout {
            ParamLayout::Supernet => {
                format!("{prefix}/attention/{kind}/h{heads}/head{head}/{name}")
            }
            ParamLayout::Standalone => format!("{prefix}/attention/head{head}/{name}"),
        })
        .collect()
}

/// Parameter names read by one operator choice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpParamNames {
    pub w1: String,
    pub w2: String,
    /// Attention parameters per head.
    pub heads: Vec<Vec<String>>,
}

impl OpParamNames {
    pub fn new(prefix: &str, layout: ParamLayout, op: &BlockOp, output_dim: usize) -> Self {
        let (w1, w2) = transform_names(prefix, layout, op.expansion);
        let dh = output_dim / op.heads;
        let heads = (0..op.heads)
            .map(|h| attention_names(prefix, layout, op.attention, op.heads, h, dh))
            .collect();
        Self { w1, w2, heads }
    }
}

/// Uniform Glorot initialization for a `[fan_in, fan_out]` matrix.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("glorot shape")
}

/// Registers the weights of every candidate in `candidates` under `prefix`.
/// Standalone layouts expect single-element candidate lists.
pub fn register_block_params(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    layout: ParamLayout,
    input_dim: usize,
    output_dim: usize,
    candidates: &Candidates,
) -> Result<()> {
    if layout == ParamLayout::Standalone && candidates.lengths() != [1; NUM_SUB_BLOCKS] {
        return Err(Error::Invalid(
            "standalone block takes exactly one operator per sub-block".into(),
        ));
    }
    for &m in &candidates.expansions {
        let (w1, w2) = transform_names(prefix, layout, m);
        let hidden = m * input_dim;
        store.insert(&w1, glorot(rng, input_dim, hidden), true, WEIGHT_GROUP);
        store.insert(&w2, glorot(rng, hidden, output_dim), true, WEIGHT_GROUP);
    }
    for &kind in &candidates.attentions {
        for &heads in &candidates.heads {
            if !output_dim.is_multiple_of(heads) {
                return Err(Error::Config(format!(
                    "output dim {output_dim} not divisible by {heads} heads"
                )));
            }
            let dh = output_dim / heads;
            for h in 0..heads {
                let names = attention_names(prefix, layout, kind, heads, h, dh);
                for (name, (_, [r, c])) in names.iter().zip(attention_param_shapes(kind, dh)) {
                    store.insert(name, glorot(rng, r, c), true, WEIGHT_GROUP);
                }
            }
        }
    }
    Ok(())
}

/// Probability multipliers applied to each sub-block output, in
/// [`super::SubBlock::ALL`] order.
#[derive(Clone, Copy, Debug)]
pub struct SubBlockScales(pub [Var; NUM_SUB_BLOCKS]);

/// One graph block under a fixed operator choice.
///
/// With `scales`, each sub-block output is multiplied by the probability of
/// its selected candidate so the loss is differentiable in those
/// probabilities; without, the factors are exactly one.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    tape: &mut Tape,
    graph: &Graph,
    x: Var,
    op: &BlockOp,
    names: &OpParamNames,
    store: &ParamStore,
    scales: Option<&SubBlockScales>,
) -> Result<Var> {
    let n = graph.num_nodes();
    if tape.value(x).rows() != n {
        return Err(Error::Invalid(format!(
            "block input has {} rows for {n} nodes",
            tape.value(x).rows()
        )));
    }
    let scale = |tape: &mut Tape, v: Var, k: usize| -> Result<Var> {
        match scales {
            Some(s) => Ok(tape.mul(v, s.0[k])?),
            None => Ok(v),
        }
    };
    let w1 = tape.param(store, &names.w1)?;
    let w2 = tape.param(store, &names.w2)?;
    let hidden = tape.matmul(x, w1)?;
    let hidden = tape.relu(hidden);
    let m = tape.matmul(hidden, w2)?;
    let m = scale(tape, m, 0)?;

    let d_out = tape.value(m).cols();
    if names.heads.len() != op.heads || !d_out.is_multiple_of(op.heads) {
        return Err(Error::Invalid(format!(
            "output dim {d_out} cannot hold {} heads",
            op.heads
        )));
    }
    let dh = d_out / op.heads;
    let reduce = match op.aggregate {
        Aggregator::Sum => SegmentReduce::Sum,
        Aggregator::Mean => SegmentReduce::Mean,
        Aggregator::Max => SegmentReduce::Max,
    };
    let mut outs = Vec::with_capacity(op.heads);
    for (h, head_names) in names.heads.iter().enumerate() {
        let mh = if op.heads == 1 {
            m
        } else {
            tape.slice_cols(m, h * dh, (h + 1) * dh)?
        };
        let params = head_names
            .iter()
            .map(|p| tape.param(store, p))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let a = attention_coefficients(tape, op.attention, mh, graph, &params)?;
        let a = scale(tape, a, 1)?;
        let src = tape.gather_rows(mh, graph.edge_src().clone())?;
        let msgs = tape.mul(a, src)?;
        let agg = tape.segment(msgs, graph.edge_dst().clone(), n, reduce)?;
        let agg = scale(tape, agg, 3)?;
        outs.push(tape.add(agg, mh)?);
    }
    let combined = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    let combined = scale(tape, combined, 2)?;
    let out = activation_apply(tape, op.activation, combined);
    scale(tape, out, 4)
}

impl Candidates {
    /// Candidate lists holding exactly `op`.
    pub fn single(op: &BlockOp) -> Self {
        Self {
            expansions: vec![op.expansion],
            attentions: vec![op.attention],
            heads: vec![op.heads],
            aggregators: vec![op.aggregate],
            activations: vec![op.activation],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DatasetSpec, Labels, TaskKind};
    use crate::micro::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        let spec = DatasetSpec {
            task: TaskKind::Single,
            num_classes: 2,
            feature_dim: 1,
        };
        Graph::build(
            spec,
            Tensor::zeros(&[n, 1]),
            edges,
            Labels::Single(vec![0; n]),
            None,
        )
        .unwrap()
    }

    fn identity_op(
        attention: AttentionKind,
        aggregate: Aggregator,
        activation: Activation,
    ) -> BlockOp {
        BlockOp {
            expansion: 1,
            attention,
            heads: 1,
            aggregate,
            activation,
        }
    }

    fn identity_store(op: &BlockOp, d: usize) -> (ParamStore, OpParamNames) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        register_block_params(
            &mut store,
            &mut rng,
            "b",
            ParamLayout::Standalone,
            d,
            d,
            &Candidates::single(op),
        )
        .unwrap();
        let names = OpParamNames::new("b", ParamLayout::Standalone, op, d);
        store.get_mut(&names.w1).unwrap().value = Tensor::eye(d);
        store.get_mut(&names.w2).unwrap().value = Tensor::eye(d);
        (store, names)
    }

    #[test]
    fn transform_identity_and_zero() {
        let op = identity_op(AttentionKind::Const, Aggregator::Sum, Activation::None);
        let (store, names) = identity_store(&op, 2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.5, 2.0]).unwrap());
        let w1 = tape.param(&store, &names.w1).unwrap();
        let w2 = tape.param(&store, &names.w2).unwrap();
        let h = tape.matmul(x, w1).unwrap();
        let h = tape.relu(h);
        let y = tape.matmul(h, w2).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 2.0]);
    }

    #[test]
    fn transform_two_by_two_by_hand() {
        // rows-as-nodes convention: F(x) = relu(x W1) W2
        let w1 = [[1.0, -2.0], [0.5, 1.0]];
        let w2 = [[2.0, 0.0], [1.0, -1.0]];
        let x: [f64; 2] = [1.0, 3.0];
        let pre: [f64; 2] = [
            x[0] * w1[0][0] + x[1] * w1[1][0],
            x[0] * w1[0][1] + x[1] * w1[1][1],
        ];
        let h = [pre[0].max(0.0), pre[1].max(0.0)];
        let want = [
            h[0] * w2[0][0] + h[1] * w2[1][0],
            h[0] * w2[0][1] + h[1] * w2[1][1],
        ];
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::row_vector(x.to_vec()));
        let w1v = tape.constant(Tensor::from_rows(&[w1[0].to_vec(), w1[1].to_vec()]).unwrap());
        let w2v = tape.constant(Tensor::from_rows(&[w2[0].to_vec(), w2[1].to_vec()]).unwrap());
        let a = tape.matmul(xv, w1v).unwrap();
        let a = tape.relu(a);
        let y = tape.matmul(a, w2v).unwrap();
        assert_eq!(tape.value(y).data(), &want);
        assert_eq!(want, [6.0, -1.0]);
    }

    #[test]
    fn two_node_const_sum_by_hand() {
        let g = graph(2, &[(0, 1)]);
        let op = identity_op(AttentionKind::Const, Aggregator::Sum, Activation::None);
        let (store, names) = identity_store(&op, 2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::eye(2));
        let y = block_forward(&mut tape, &g, x, &op, &names, &store, None).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn zero_input_zero_output() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        for &attention in AttentionKind::ALL {
            for &aggregate in Aggregator::ALL {
                let op = BlockOp {
                    expansion: 2,
                    attention,
                    heads: 2,
                    aggregate,
                    activation: Activation::None,
                };
                let mut store = ParamStore::new();
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                register_block_params(
                    &mut store,
                    &mut rng,
                    "b",
                    ParamLayout::Standalone,
                    3,
                    4,
                    &Candidates::single(&op),
                )
                .unwrap();
                let names = OpParamNames::new("b", ParamLayout::Standalone, &op, 4);
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::zeros(&[4, 3]));
                let y = block_forward(&mut tape, &g, x, &op, &names, &store, None).unwrap();
                assert!(
                    tape.value(y).data().iter().all(|&v| v == 0.0),
                    "{attention} {aggregate}"
                );
            }
        }
    }

    #[test]
    fn unit_scales_change_nothing() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let op = BlockOp {
            expansion: 2,
            attention: AttentionKind::Gat,
            heads: 2,
            aggregate: Aggregator::Mean,
            activation: Activation::Elu,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        register_block_params(
            &mut store,
            &mut rng,
            "b",
            ParamLayout::Standalone,
            2,
            4,
            &Candidates::single(&op),
        )
        .unwrap();
        let names = OpParamNames::new("b", ParamLayout::Standalone, &op, 4);
        let x = Tensor::matrix(3, 2, vec![0.1, -0.4, 1.0, 0.3, -0.2, 0.8]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let plain = block_forward(&mut tape, &g, xv, &op, &names, &store, None).unwrap();
        let one = tape.input(Tensor::scalar(1.0));
        let scales = SubBlockScales([one; NUM_SUB_BLOCKS]);
        let scaled = block_forward(&mut tape, &g, xv, &op, &names, &store, Some(&scales)).unwrap();
        assert_eq!(tape.value(plain), tape.value(scaled));
    }

    #[test]
    fn sum_and_mean_agree_with_single_in_neighbor() {
        // node 2 is isolated: its only in-neighbor is itself
        let g = graph(3, &[(0, 1)]);
        let x = Tensor::matrix(3, 2, vec![0.1, -0.4, 1.0, 0.3, -0.2, 0.8]).unwrap();
        let mut rows = Vec::new();
        for aggregate in [Aggregator::Sum, Aggregator::Mean] {
            let op = identity_op(AttentionKind::Gat, aggregate, Activation::Tanh);
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            register_block_params(
                &mut store,
                &mut rng,
                "b",
                ParamLayout::Standalone,
                2,
                2,
                &Candidates::single(&op),
            )
            .unwrap();
            let names = OpParamNames::new("b", ParamLayout::Standalone, &op, 2);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = block_forward(&mut tape, &g, xv, &op, &names, &store, None).unwrap();
            rows.push(tape.value(y).row(2).to_vec());
        }
        assert_eq!(rows[0], rows[1]);
    }
}
