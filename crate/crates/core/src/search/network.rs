//! The weight-sharing supernet used during search and the standalone
//! network built from a genotype.

use std::collections::BTreeSet;

use rand::Rng;

use crate::controller::Controller;
use crate::error::{Error, Result};
use crate::graph::{DatasetSpec, Graph};
use crate::micro::{
    block_forward, glorot, register_block_params, BlockOp, BlockSpace, Candidates, OpParamNames,
    ParamLayout, SubBlockScales, NUM_SUB_BLOCKS, WEIGHT_GROUP,
};
use crate::router::{GateMode, Router};
use crate::{ParamStore, Tape, Tensor, Var};

use super::Genotype;

pub const CLASSIFIER_W: &str = "classifier/w";
pub const CLASSIFIER_B: &str = "classifier/b";

/// Widths of a block stack followed by a linear classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkShape {
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl NetworkShape {
    pub fn new(spec: DatasetSpec, hidden: Vec<usize>) -> Result<Self> {
        if hidden.is_empty()
            || hidden.contains(&0)
            || spec.num_classes == 0
            || spec.feature_dim == 0
        {
            return Err(Error::Invalid(format!(
                "network shape: hidden {hidden:?}, spec {spec:?}"
            )));
        }
        Ok(Self {
            feature_dim: spec.feature_dim,
            hidden,
            num_classes: spec.num_classes,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len()
    }

    /// Width of the input of each block.
    pub fn input_dims(&self) -> Vec<usize> {
        std::iter::once(self.feature_dim)
            .chain(self.hidden[..self.hidden.len() - 1].iter().copied())
            .collect()
    }

    pub fn router(&self) -> Router {
        Router::new(self.input_dims(), self.hidden.clone()).expect("non-empty stack")
    }

    fn check_graph(&self, graph: &Graph) -> Result<()> {
        let spec = graph.spec();
        if spec.feature_dim != self.feature_dim || spec.num_classes != self.num_classes {
            return Err(Error::Invalid(format!(
                "network expects {} features and {} classes, graph has {} and {}",
                self.feature_dim, self.num_classes, spec.feature_dim, spec.num_classes
            )));
        }
        Ok(())
    }
}

pub fn layer_prefix(layer: usize) -> String {
    format!("layer{layer}")
}

fn register_classifier(store: &mut ParamStore, rng: &mut impl Rng, shape: &NetworkShape) {
    let last = *shape.hidden.last().expect("non-empty stack");
    store.insert(
        CLASSIFIER_W,
        glorot(rng, last, shape.num_classes),
        true,
        WEIGHT_GROUP,
    );
    store.insert(
        CLASSIFIER_B,
        Tensor::zeros(&[1, shape.num_classes]),
        true,
        WEIGHT_GROUP,
    );
}

/// Marks every weight of the listed blocks as fixed.
pub fn freeze_blocks(store: &mut ParamStore, blocks: &[usize]) {
    for &b in blocks {
        store.set_trainable_prefix(&format!("{}/", layer_prefix(b)), false);
    }
}

/// Block stack with routing, then `logits = O_last W + b`.
fn stack_forward(
    tape: &mut Tape,
    store: &ParamStore,
    graph: &Graph,
    shape: &NetworkShape,
    blocks: &[(BlockOp, OpParamNames)],
    scales: Option<&[SubBlockScales]>,
    gates: &GateMode<'_>,
) -> Result<Var> {
    shape.check_graph(graph)?;
    let router = shape.router();
    let gates = router.gates(tape, store, gates)?;
    let x = tape.constant(graph.features().clone());
    let mut inputs = vec![x];
    for (j, (op, names)) in blocks.iter().enumerate() {
        let s = scales.map(|s| &s[j]);
        let raw = block_forward(tape, graph, inputs[j], op, names, store, s)?;
        let out = router.route_output(tape, store, j, &inputs, raw, &gates)?;
        inputs.push(out);
    }
    let w = tape.param(store, CLASSIFIER_W)?;
    let b = tape.param(store, CLASSIFIER_B)?;
    let last = *inputs.last().expect("at least the input");
    let lin = tape.matmul(last, w)?;
    let bias = tape.broadcast_rows(b, graph.num_nodes())?;
    Ok(tape.add(lin, bias)?)
}

/// Every candidate operator of every block, the router and the controller.
#[derive(Clone, Debug)]
pub struct Supernet {
    pub shape: NetworkShape,
    pub spaces: Vec<BlockSpace>,
    pub controller: Controller,
}

impl Supernet {
    pub fn new(
        shape: NetworkShape,
        candidates: &Candidates,
        controller_dim: usize,
    ) -> Result<Self> {
        let spaces = shape
            .input_dims()
            .into_iter()
            .zip(&shape.hidden)
            .enumerate()
            .map(|(l, (i, &o))| BlockSpace::new(l, i, o, candidates.clone()))
            .collect::<Result<Vec<_>>>()?;
        let controller = Controller::with_prior_dim(
            vec![candidates.lengths(); shape.num_layers()],
            controller_dim,
        )?;
        Ok(Self {
            shape,
            spaces,
            controller,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.spaces.len()
    }

    /// Fresh parameters: block candidates, shortcuts and priors, classifier,
    /// controller, drawn in that order from `rng`.
    pub fn init(&self, rng: &mut impl Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for s in &self.spaces {
            register_block_params(
                &mut store,
                rng,
                &s.prefix(),
                ParamLayout::Supernet,
                s.input_dim,
                s.output_dim,
                &s.candidates,
            )?;
        }
        self.shape.router().register(&mut store, rng);
        register_classifier(&mut store, rng, &self.shape);
        self.controller.register(&mut store, rng);
        Ok(store)
    }

    pub fn ops(&self, index: &[[usize; NUM_SUB_BLOCKS]]) -> Result<Vec<BlockOp>> {
        if index.len() != self.num_layers() {
            return Err(Error::Invalid(format!(
                "{} selections for {} layers",
                index.len(),
                self.num_layers()
            )));
        }
        self.spaces
            .iter()
            .zip(index)
            .map(|(s, idx)| s.candidates.op_at(idx))
            .collect()
    }

    fn blocks(&self, index: &[[usize; NUM_SUB_BLOCKS]]) -> Result<Vec<(BlockOp, OpParamNames)>> {
        Ok(self
            .ops(index)?
            .into_iter()
            .zip(&self.spaces)
            .map(|(op, s)| {
                let names =
                    OpParamNames::new(&s.prefix(), ParamLayout::Supernet, &op, s.output_dim);
                (op, names)
            })
            .collect())
    }

    /// Logits of the single path picked by `index`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &Graph,
        index: &[[usize; NUM_SUB_BLOCKS]],
        scales: Option<&[SubBlockScales]>,
        gates: &GateMode<'_>,
    ) -> Result<Var> {
        if let Some(s) = scales {
            if s.len() != self.num_layers() {
                return Err(Error::Invalid(
                    "one set of sub-block scales per layer".into(),
                ));
            }
        }
        let blocks = self.blocks(index)?;
        stack_forward(tape, store, graph, &self.shape, &blocks, scales, gates)
    }

    /// The standalone network of a selection, with the supernet's weights
    /// for exactly the chosen candidates and shortcuts.
    pub fn extract(
        &self,
        store: &ParamStore,
        index: &[[usize; NUM_SUB_BLOCKS]],
        routing: &BTreeSet<(usize, usize)>,
    ) -> Result<(StandaloneNet, ParamStore)> {
        let net = StandaloneNet::new(self.shape.clone(), self.ops(index)?, routing.clone())?;
        let mut out = ParamStore::new();
        let copy = |out: &mut ParamStore, from: &str, to: &str| -> Result<()> {
            let p = store
                .get(from)
                .ok_or_else(|| Error::Invalid(format!("missing parameter {from}")))?;
            out.insert(to, p.value.clone(), p.trainable, &p.group);
            Ok(())
        };
        for ((op, names), s) in self.blocks(index)?.iter().zip(&self.spaces) {
            let local = OpParamNames::new(&s.prefix(), ParamLayout::Standalone, op, s.output_dim);
            copy(&mut out, &names.w1, &local.w1)?;
            copy(&mut out, &names.w2, &local.w2)?;
            for (a, b) in names
                .heads
                .iter()
                .flatten()
                .zip(local.heads.iter().flatten())
            {
                copy(&mut out, a, b)?;
            }
        }
        for &(i, j) in routing {
            let name = Router::shortcut_name(i, j);
            copy(&mut out, &name, &name)?;
        }
        copy(&mut out, CLASSIFIER_W, CLASSIFIER_W)?;
        copy(&mut out, CLASSIFIER_B, CLASSIFIER_B)?;
        Ok((net, out))
    }
}

/// A fixed architecture: one operator per block and binary shortcuts.
#[derive(Clone, Debug, PartialEq)]
pub struct StandaloneNet {
    pub shape: NetworkShape,
    pub ops: Vec<BlockOp>,
    pub routing: BTreeSet<(usize, usize)>,
}

impl StandaloneNet {
    pub fn new(
        shape: NetworkShape,
        ops: Vec<BlockOp>,
        routing: BTreeSet<(usize, usize)>,
    ) -> Result<Self> {
        if ops.len() != shape.num_layers() {
            return Err(Error::Invalid(format!(
                "{} operators for {} layers",
                ops.len(),
                shape.num_layers()
            )));
        }
        for (k, (op, &h)) in ops.iter().zip(&shape.hidden).enumerate() {
            if h % op.heads != 0 {
                return Err(Error::Invalid(format!(
                    "layer {k}: width {h} does not split into {} heads",
                    op.heads
                )));
            }
        }
        shape.router().check_pairs(&routing)?;
        Ok(Self {
            shape,
            ops,
            routing,
        })
    }

    pub fn from_genotype(genotype: &Genotype, spec: DatasetSpec) -> Result<Self> {
        genotype.validate()?;
        let shape = NetworkShape::new(spec, genotype.hidden_sizes.clone())?;
        Self::new(shape, genotype.layers.clone(), genotype.routing_set())
    }

    pub fn init(&self, rng: &mut impl Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (l, (op, i)) in self.ops.iter().zip(self.shape.input_dims()).enumerate() {
            register_block_params(
                &mut store,
                rng,
                &layer_prefix(l),
                ParamLayout::Standalone,
                i,
                self.shape.hidden[l],
                &Candidates::single(op),
            )?;
        }
        self.shape
            .router()
            .register_shortcuts(&mut store, rng, self.routing.iter().copied());
        register_classifier(&mut store, rng, &self.shape);
        Ok(store)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, graph: &Graph) -> Result<Var> {
        let blocks: Vec<_> = self
            .ops
            .iter()
            .enumerate()
            .map(|(l, op)| {
                let names = OpParamNames::new(
                    &layer_prefix(l),
                    ParamLayout::Standalone,
                    op,
                    self.shape.hidden[l],
                );
                (*op, names)
            })
            .collect();
        stack_forward(
            tape,
            store,
            graph,
            &self.shape,
            &blocks,
            None,
            &GateMode::Binary(&self.routing),
        )
    }

    /// Logits as plain values.
    pub fn predict(&self, store: &ParamStore, graph: &Graph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, graph)?;
        Ok(tape.value(out).clone())
    }
}
