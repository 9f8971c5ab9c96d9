//! Finite-difference verification of every differentiable path: tape
//! primitives, each attention / aggregator / activation combination inside a
//! block, routing with frozen Gumbel draws, the controller and the losses.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::controller::{add_noise, extract_indices, Controller};
use crate::error::{Error, Result};
use crate::graph::{DatasetSpec, Graph, Labels, TaskKind};
use crate::micro::{
    block_forward, register_block_params, Activation, Aggregator, AttentionKind, BlockOp,
    Candidates, OpParamNames, ParamLayout, SubBlockScales,
};
use crate::router::{GateMode, GumbelDraw, Router, THETA_NAME};
use crate::search::compute_loss;
use crate::tensor::{finite_difference_check, finite_difference_check_params, Unary};
use crate::{ParamStore, Tape, Tensor, Var};

/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

const NODES: usize = 6;
const IN_DIM: usize = 3;
const OUT_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRecord {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradcheckRecord {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape")
}

/// Seeded 6-node graph with a ring, two chords and one isolated-ish node.
pub fn check_graph() -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = DatasetSpec {
        task: TaskKind::Single,
        num_classes: 3,
        feature_dim: IN_DIM,
    };
    let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (0, 2), (1, 3)];
    Graph::build(
        spec,
        uniform(&mut rng, &[NODES, IN_DIM], -1.0, 1.0),
        &edges,
        Labels::Single(vec![0, 1, 2, 0, 1, 2]),
        None,
    )
    .expect("valid check graph")
}

fn names_of(store: &ParamStore) -> Vec<String> {
    store.names().map(str::to_string).collect()
}

/// `sum(out * R)` for a fixed random `R`.
fn project(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    Ok(tape.sum(prod))
}

fn block_case(op: BlockOp, seed: u64, with_scales: bool) -> Result<f64> {
    let graph = check_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    register_block_params(
        &mut store,
        &mut rng,
        "b",
        ParamLayout::Standalone,
        IN_DIM,
        OUT_DIM,
        &Candidates::single(&op),
    )?;
    store.insert(
        "x",
        uniform(&mut rng, &[NODES, IN_DIM], -1.0, 1.0),
        true,
        "input",
    );
    if with_scales {
        for k in 0..5 {
            store.insert(
                &format!("scale/{k}"),
                uniform(&mut rng, &[1, 1], 0.2, 0.9),
                true,
                "input",
            );
        }
    }
    let names = OpParamNames::new("b", ParamLayout::Standalone, &op, OUT_DIM);
    let r = uniform(&mut rng, &[NODES, OUT_DIM], -1.0, 1.0);
    let f = |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
        let x = tape.param(s, "x")?;
        let scales = if with_scales {
            let mut v = [x; 5];
            for (k, slot) in v.iter_mut().enumerate() {
                *slot = tape.param(s, &format!("scale/{k}"))?;
            }
            Some(SubBlockScales(v))
        } else {
            None
        };
        let out = block_forward(tape, &graph, x, &op, &names, s, scales.as_ref())?;
        project(tape, out, &r)
    };
    finite_difference_check_params(&store, &names_of(&store), f)
}

fn combos() -> Vec<(String, BlockOp)> {
    let mut out = Vec::new();
    let mut k = 0;
    for &attention in AttentionKind::ALL {
        for &aggregate in Aggregator::ALL {
            for &activation in Activation::ALL {
                let op = BlockOp {
                    expansion: [1, 2][k % 2],
                    attention,
                    heads: [1, 2][(k / 2) % 2],
                    aggregate,
                    activation,
                };
                out.push((format!("{attention}/{aggregate}/{activation}"), op));
                k += 1;
            }
        }
    }
    out
}

fn unary_cases() -> Vec<(&'static str, Unary<f64>)> {
    vec![
        ("neg", Unary::Neg),
        ("scale", Unary::Scale(-1.7)),
        ("exp", Unary::Exp),
        ("tanh", Unary::Tanh),
        ("sigmoid", Unary::Sigmoid),
        ("relu", Unary::Relu),
        ("leaky_relu", Unary::LeakyRelu(0.01)),
        ("relu6", Unary::Relu6),
        ("elu", Unary::Elu),
        ("softplus", Unary::Softplus),
    ]
}

type PrimitiveFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Each primitive feeds `sum(op(x) * R)`; inputs are `[6, 4]` unless noted.
fn primitive_cases() -> Vec<(String, Tensor, PrimitiveFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let graph = Arc::new(check_graph());
    let mut cases: Vec<(String, Tensor, PrimitiveFn)> = Vec::new();

    // values kept away from the kinks at 0 and 6
    let mut spread = uniform(&mut rng, &[NODES, 4], 0.1, 7.9);
    for (k, v) in spread.data_mut().iter_mut().enumerate() {
        if k % 2 == 0 {
            *v = -*v;
        }
        if (v.abs() - 6.0).abs() < 0.1 {
            *v += 0.3;
        }
    }
    let r = uniform(&mut rng, &[NODES, 4], -1.0, 1.0);
    for (name, u) in unary_cases() {
        let r = r.clone();
        let x = if name == "exp" {
            spread.map(|v| v / 4.0)
        } else {
            spread.clone()
        };
        cases.push((
            name.to_string(),
            x,
            Box::new(move |t, x| {
                let y = t.unary(x, u);
                project(t, y, &r)
            }),
        ));
    }
    let pos = uniform(&mut rng, &[NODES, 4], 0.5, 2.0);
    let rr = r.clone();
    cases.push((
        "log".into(),
        pos.clone(),
        Box::new(move |t, x| {
            let y = t.log(x);
            project(t, y, &rr)
        }),
    ));
    let x = uniform(&mut rng, &[NODES, 4], -1.0, 1.0);

    let w = uniform(&mut rng, &[4, 3], -1.0, 1.0);
    let r3 = uniform(&mut rng, &[NODES, 3], -1.0, 1.0);
    cases.push((
        "matmul".into(),
        x.clone(),
        Box::new(move |t, x| {
            let wv = t.constant(w.clone());
            let a = t.matmul(x, wv)?;
            project(t, a, &r3)
        }),
    ));
    let lhs = uniform(&mut rng, &[NODES, 4], -1.0, 1.0);
    let w = uniform(&mut rng, &[4, 3], -1.0, 1.0);
    let r3 = uniform(&mut rng, &[NODES, 3], -1.0, 1.0);
    cases.push((
        "matmul_rhs".into(),
        w,
        Box::new(move |t, w| {
            let l = t.constant(lhs.clone());
            let a = t.matmul(l, w)?;
            project(t, a, &r3)
        }),
    ));
    let other = uniform(&mut rng, &[NODES, 4], 0.5, 1.5);
    let col = uniform(&mut rng, &[NODES, 1], 0.5, 1.5);
    for op in [
        "add",
        "sub",
        "mul",
        "div",
        "div_by",
        "mul_col",
        "mul_scalar",
    ] {
        let (rr, other, col) = (r.clone(), other.clone(), col.clone());
        let input = if op == "div_by" {
            pos.clone()
        } else {
            x.clone()
        };
        cases.push((
            op.to_string(),
            input,
            Box::new(move |t, x| {
                let o = t.constant(other.clone());
                let y = match op {
                    "add" => t.add(x, o)?,
                    "sub" => t.sub(o, x)?,
                    "mul" => t.mul(x, x)?,
                    "div" => t.div(x, o)?,
                    "div_by" => t.div(o, x)?,
                    "mul_col" => {
                        let c = t.constant(col.clone());
                        t.mul(c, x)?
                    }
                    _ => {
                        let s = t.sum(x);
                        t.mul(o, s)?
                    }
                };
                project(t, y, &rr)
            }),
        ));
    }
    let rr = r.clone();
    cases.push((
        "softmax_rows".into(),
        x.clone(),
        Box::new(move |t, x| {
            let y = t.softmax_rows(x);
            project(t, y, &rr)
        }),
    ));
    let rr = r.clone();
    cases.push((
        "log_softmax_rows".into(),
        x.clone(),
        Box::new(move |t, x| {
            let y = t.log_softmax_rows(x);
            project(t, y, &rr)
        }),
    ));
    let rr = r.clone();
    cases.push((
        "concat_slice".into(),
        x.clone(),
        Box::new(move |t, x| {
            let a = t.slice_cols(x, 0, 1)?;
            let b = t.slice_cols(x, 1, 4)?;
            let y = t.concat_cols(&[b, a])?;
            project(t, y, &rr)
        }),
    ));
    let g = graph.clone();
    let re = uniform(&mut rng, &[graph.num_edges(), 4], -1.0, 1.0);
    cases.push((
        "gather_rows".into(),
        x.clone(),
        Box::new(move |t, x| {
            let y = t.gather_rows(x, g.edge_src().clone())?;
            project(t, y, &re)
        }),
    ));
    for (name, reduce) in [
        ("segment_sum", crate::tensor::SegmentReduce::Sum),
        ("segment_mean", crate::tensor::SegmentReduce::Mean),
        ("segment_max", crate::tensor::SegmentReduce::Max),
    ] {
        let (g, rr) = (graph.clone(), r.clone());
        let ev = uniform(&mut rng, &[graph.num_edges(), 4], -1.0, 1.0);
        cases.push((
            name.into(),
            ev,
            Box::new(move |t, e| {
                let y = t.segment(e, g.edge_dst().clone(), g.num_nodes(), reduce)?;
                project(t, y, &rr)
            }),
        ));
    }
    let g = graph.clone();
    let ev = uniform(&mut rng, &[graph.num_edges(), 2], -1.0, 1.0);
    let re = uniform(&mut rng, &[graph.num_edges(), 2], -1.0, 1.0);
    cases.push((
        "segment_softmax".into(),
        ev,
        Box::new(move |t, e| {
            let y = t.segment_softmax(e, g.edge_dst().clone(), g.num_nodes())?;
            project(t, y, &re)
        }),
    ));
    let row = uniform(&mut rng, &[1, 4], -1.0, 1.0);
    let rr = r.clone();
    cases.push((
        "broadcast_rows".into(),
        row,
        Box::new(move |t, x| {
            let y = t.broadcast_rows(x, NODES)?;
            project(t, y, &rr)
        }),
    ));
    let rc = uniform(&mut rng, &[NODES, 1], -1.0, 1.0);
    cases.push((
        "row_sum_mean".into(),
        x,
        Box::new(move |t, x| {
            let y = t.row_sum(x);
            let a = project(t, y, &rc)?;
            let m = t.mean(x);
            Ok(t.add(a, m)?)
        }),
    ));
    cases
}

fn route_case() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let router = Router::new(vec![IN_DIM, OUT_DIM, OUT_DIM], vec![OUT_DIM; 3])?;
    let mut store = ParamStore::new();
    router.register(&mut store, &mut rng);
    store.get_mut(THETA_NAME).expect("theta").value = uniform(&mut rng, &[3, 3], -1.5, 1.5);
    store.insert(
        "i0",
        uniform(&mut rng, &[NODES, IN_DIM], -1.0, 1.0),
        true,
        "input",
    );
    for k in 1..3 {
        store.insert(
            &format!("i{k}"),
            uniform(&mut rng, &[NODES, OUT_DIM], -1.0, 1.0),
            true,
            "input",
        );
    }
    for k in 0..3 {
        store.insert(
            &format!("o{k}"),
            uniform(&mut rng, &[NODES, OUT_DIM], -1.0, 1.0),
            true,
            "input",
        );
    }
    let draw = GumbelDraw::sample(3, &mut rng);
    let rs: Vec<Tensor> = (0..3)
        .map(|_| uniform(&mut rng, &[NODES, OUT_DIM], -1.0, 1.0))
        .collect();
    let f = |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
        let inputs = (0..3)
            .map(|k| tape.param(s, &format!("i{k}")))
            .collect::<Result<Vec<_>, _>>()?;
        let outs = (0..3)
            .map(|k| tape.param(s, &format!("o{k}")))
            .collect::<Result<Vec<_>, _>>()?;
        let gates = router.gates(
            tape,
            s,
            &GateMode::Sampled {
                tau: 0.7,
                draw: &draw,
            },
        )?;
        let routed = router.route(tape, s, &inputs, &outs, &gates)?;
        let mut total = project(tape, routed[0], &rs[0])?;
        for k in 1..3 {
            let p = project(tape, routed[k], &rs[k])?;
            total = tape.add(total, p)?;
        }
        Ok(total)
    };
    finite_difference_check_params(&store, &names_of(&store), f)
}

fn controller_case() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let controller = Controller::with_prior_dim(vec![[2, 3, 2, 3, 4], [2, 3, 2, 3, 4]], 8)?;
    let mut store = ParamStore::new();
    controller.register(&mut store, &mut rng);
    // larger prior so the MLP is off its ReLU kinks by a wide margin
    store
        .get_mut(Controller::prior_name())
        .expect("prior")
        .value = uniform(&mut rng, &[1, 8], -1.0, 1.0);
    let p_bar = controller.probabilities(&store)?;
    let (p, noise) = add_noise(&p_bar, 0.4, &mut rng);
    let index = extract_indices(&p);
    let weights: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
        let p_bar = controller.forward(tape, s)?;
        let p = p_bar.add_noise(tape, 0.4, &noise)?;
        let sel = p.select(tape, &index)?;
        let mut total = tape.scalar(0.0);
        for (v, &w) in sel.iter().flatten().zip(&weights) {
            let l = tape.log(*v);
            let l = tape.scale(l, w);
            total = tape.add(total, l)?;
        }
        // also the full vectors, not only the selected entries
        let kl = tape.log(p_bar.layers[1][4]);
        let kl = tape.sum(kl);
        Ok(tape.add(total, kl)?)
    };
    finite_difference_check_params(&store, &names_of(&store), f)
}

fn loss_case(multi: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(if multi { 41 } else { 43 });
    let logits = uniform(&mut rng, &[NODES, 3], -2.0, 2.0);
    let labels = if multi {
        Labels::Multi(
            (0..NODES)
                .map(|i| vec![(i % 2) as u8, (i % 3 == 0) as u8, 1])
                .collect(),
        )
    } else {
        Labels::Single(vec![0, 2, 1, 1, 0, 2])
    };
    let mask = [true, false, true, true, false, true];
    finite_difference_check(
        |t: &mut Tape, x| compute_loss(t, x, &labels, &mask),
        &logits,
    )
}

fn supernet_case() -> Result<f64> {
    use crate::search::network::{NetworkShape, Supernet};
    let graph = check_graph();
    let candidates = Candidates {
        expansions: vec![1, 2],
        heads: vec![1, 2],
        ..Candidates::default()
    };
    let shape = NetworkShape::new(graph.spec(), vec![OUT_DIM, OUT_DIM])?;
    let net = Supernet::new(shape, &candidates, 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut store = net.init(&mut rng)?;
    store.get_mut(THETA_NAME).expect("theta").value = uniform(&mut rng, &[2, 2], -1.0, 1.0);
    let index = vec![[1, 2, 1, 0, 4], [0, 6, 0, 1, 2]];
    let p_bar = net.controller.probabilities(&store)?;
    let (_, noise) = add_noise(&p_bar, 0.5, &mut rng);
    let draw = GumbelDraw::sample(2, &mut rng);
    let mask = [true, true, false, true, true, false];
    let f = |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
        let p = net.controller.forward(tape, s)?;
        let p = p.add_noise(tape, 0.5, &noise)?;
        let scales: Vec<_> = p
            .select(tape, &index)?
            .into_iter()
            .map(SubBlockScales)
            .collect();
        let logits = net.forward(
            tape,
            s,
            &graph,
            &index,
            Some(&scales),
            &GateMode::Sampled {
                tau: 0.8,
                draw: &draw,
            },
        )?;
        compute_loss(tape, logits, graph.labels(), &mask)
    };
    // only parameters on the selected path carry gradient
    let mut tape = Tape::new();
    let out = f(&mut tape, &store)?;
    let used: BTreeSet<String> = tape.backward(out)?.names().map(str::to_string).collect();
    finite_difference_check_params(&store, &used.into_iter().collect::<Vec<_>>(), f)
}

/// Names of every check, in execution order.
pub fn gradcheck_names() -> Vec<String> {
    let mut names: Vec<String> = primitive_cases().into_iter().map(|(n, _, _)| n).collect();
    names.extend(combos().into_iter().map(|(n, _)| n));
    names.extend(
        [
            "block",
            "route",
            "controller",
            "loss/single",
            "loss/multi",
            "supernet",
        ]
        .map(String::from),
    );
    names
}

fn selected(target: &str, name: &str) -> bool {
    target == "all" || target == name || name.split('/').any(|part| part == target)
}

/// Runs every check whose name equals `target`, contains it as a
/// `/`-separated component, or all of them for `"all"`.
pub fn run_gradcheck(target: &str) -> Result<Vec<GradcheckRecord>> {
    let mut out = Vec::new();
    let mut push = |name: String, err: Result<f64>| -> Result<()> {
        out.push(GradcheckRecord {
            name,
            max_rel_error: err?,
        });
        Ok(())
    };
    for (name, x, f) in primitive_cases() {
        if selected(target, &name) {
            let err = finite_difference_check(|t: &mut Tape, v| f(t, v), &x);
            push(name, err)?;
        }
    }
    for (k, (name, op)) in combos().into_iter().enumerate() {
        if selected(target, &name) {
            push(name, block_case(op, 100 + k as u64, false))?;
        }
    }
    if selected(target, "block") {
        let op = BlockOp {
            expansion: 2,
            attention: AttentionKind::GeneLinear,
            heads: 4,
            aggregate: Aggregator::Mean,
            activation: Activation::Elu,
        };
        push("block".into(), block_case(op, 7, true))?;
    }
    if selected(target, "route") {
        push("route".into(), route_case())?;
    }
    if selected(target, "controller") {
        push("controller".into(), controller_case())?;
    }
    if selected(target, "loss/single") {
        push("loss/single".into(), loss_case(false))?;
    }
    if selected(target, "loss/multi") {
        push("loss/multi".into(), loss_case(true))?;
    }
    if selected(target, "supernet") {
        push("supernet".into(), supernet_case())?;
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "gradcheck: no check named `{target}`"
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_every_combination() {
        let names = gradcheck_names();
        assert_eq!(combos().len(), 7 * 3 * 8);
        assert!(names.contains(&"sym_gat/max/relu6".to_string()));
        assert!(run_gradcheck("no_such_op").is_err());
    }

    #[test]
    fn subsets_pass() {
        for target in ["matmul", "segment_max", "route", "controller", "loss/multi"] {
            for r in run_gradcheck(target).unwrap() {
                assert!(r.passed(), "{} {}", r.name, r.max_rel_error);
            }
        }
        let gat = run_gradcheck("gat").unwrap();
        assert_eq!(gat.len(), 24);
        assert!(gat.iter().all(GradcheckRecord::passed));
    }
}
