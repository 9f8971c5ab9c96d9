//! The graph block search space: candidate operators per sub-block and
//! single-path selection.
//!
//! A block computes, per attention head,
//! `h_i = act(AGG_{j in N(i)}(a_ij * F(x_j)) + F(x_i))` with
//! `F(x) = W2 relu(W1 x)`, and concatenates the heads.

mod activation;
mod attention;
mod block;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use activation::activation_apply;
pub use attention::{attention_coefficients, raw_attention, ATTENTION_LEAKY_SLOPE};
pub use block::{
    block_forward, glorot, register_block_params, OpParamNames, ParamLayout, SubBlockScales,
    WEIGHT_GROUP,
};

use crate::error::{Error, Result};

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $s)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $s),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($name::$variant),)+
                    other => Err(Error::Invalid(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

named_enum!(
    /// Attention mechanisms producing the per-edge message weight `a_ij`.
    AttentionKind {
        Const => "const",
        Gcn => "gcn",
        Gat => "gat",
        SymGat => "sym_gat",
        Cos => "cos",
        Linear => "linear",
        GeneLinear => "gene_linear",
    }
);

named_enum!(Aggregator {
    Sum => "sum",
    Mean => "mean",
    Max => "max",
});

named_enum!(Activation {
    None => "none",
    Sigmoid => "sigmoid",
    Tanh => "tanh",
    Softplus => "softplus",
    Relu => "relu",
    LeakyRelu => "leaky_relu",
    Relu6 => "relu6",
    Elu => "elu",
});

named_enum!(
    /// The searchable sub-blocks of a graph block, in controller order.
    SubBlock {
        Expansion => "expansion",
        Attention => "attention",
        Heads => "heads",
        Aggregate => "aggregate",
        Activation => "activation",
    }
);

pub const NUM_SUB_BLOCKS: usize = 5;

impl AttentionKind {
    /// Kinds whose raw coefficients are softmax-normalized over each
    /// in-neighborhood.
    pub fn is_normalized(self) -> bool {
        !matches!(self, AttentionKind::Const | AttentionKind::Gcn)
    }
}

/// Candidate lists shared by every block of a search.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidates {
    pub expansions: Vec<usize>,
    pub attentions: Vec<AttentionKind>,
    pub heads: Vec<usize>,
    pub aggregators: Vec<Aggregator>,
    pub activations: Vec<Activation>,
}

impl Default for Candidates {
    fn default() -> Self {
        Self {
            expansions: vec![1, 2, 4, 8],
            attentions: AttentionKind::ALL.to_vec(),
            heads: vec![1, 2, 4, 8, 16],
            aggregators: Aggregator::ALL.to_vec(),
            activations: Activation::ALL.to_vec(),
        }
    }
}

impl Candidates {
    pub fn len(&self, kind: SubBlock) -> usize {
        match kind {
            SubBlock::Expansion => self.expansions.len(),
            SubBlock::Attention => self.attentions.len(),
            SubBlock::Heads => self.heads.len(),
            SubBlock::Aggregate => self.aggregators.len(),
            SubBlock::Activation => self.activations.len(),
        }
    }

    /// Candidate counts in [`SubBlock::ALL`] order.
    pub fn lengths(&self) -> [usize; NUM_SUB_BLOCKS] {
        let mut out = [0; NUM_SUB_BLOCKS];
        for (o, &k) in out.iter_mut().zip(SubBlock::ALL) {
            *o = self.len(k);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for &k in SubBlock::ALL {
            if self.len(k) == 0 {
                return Err(Error::Config(format!("empty candidate list for {k}")));
            }
        }
        if self.expansions.contains(&0) || self.heads.contains(&0) {
            return Err(Error::Config(
                "expansion multipliers and head counts must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Resolves one index per sub-block into a concrete operator choice.
    pub fn op_at(&self, idx: &[usize; NUM_SUB_BLOCKS]) -> Result<BlockOp> {
        let get = |k: SubBlock| -> Result<usize> {
            let i = idx[k as usize];
            if i >= self.len(k) {
                return Err(Error::Invalid(format!("{k} index {i} out of range")));
            }
            Ok(i)
        };
        Ok(BlockOp {
            expansion: self.expansions[get(SubBlock::Expansion)?],
            attention: self.attentions[get(SubBlock::Attention)?],
            heads: self.heads[get(SubBlock::Heads)?],
            aggregate: self.aggregators[get(SubBlock::Aggregate)?],
            activation: self.activations[get(SubBlock::Activation)?],
        })
    }

    /// Inverse of [`Candidates::op_at`].
    pub fn index_of(&self, op: &BlockOp) -> Option<[usize; NUM_SUB_BLOCKS]> {
        Some([
            self.expansions.iter().position(|&e| e == op.expansion)?,
            self.attentions.iter().position(|&a| a == op.attention)?,
            self.heads.iter().position(|&h| h == op.heads)?,
            self.aggregators.iter().position(|&a| a == op.aggregate)?,
            self.activations.iter().position(|&a| a == op.activation)?,
        ])
    }
}

/// One concrete operator per sub-block; a layer of a genotype.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockOp {
    pub expansion: usize,
    pub attention: AttentionKind,
    pub heads: usize,
    pub aggregate: Aggregator,
    pub activation: Activation,
}

/// Search space of block `layer`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpace {
    pub layer: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub candidates: Candidates,
}

impl BlockSpace {
    pub fn new(
        layer: usize,
        input_dim: usize,
        output_dim: usize,
        candidates: Candidates,
    ) -> Result<Self> {
        candidates.validate()?;
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::Config(format!("layer {layer}: zero dimension")));
        }
        if let Some(h) = candidates.heads.iter().find(|&&h| !output_dim.is_multiple_of(h)) {
            return Err(Error::Config(format!(
                "layer {layer}: output dim {output_dim} not divisible by {h} heads"
            )));
        }
        Ok(Self {
            layer,
            input_dim,
            output_dim,
            candidates,
        })
    }

    pub fn prefix(&self) -> String {
        format!("layer{}", self.layer)
    }
}

/// Chosen candidate of one sub-block and its probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionEntry {
    pub index: usize,
    pub value: f64,
}

/// Argmax over a probability vector, ties to the lowest index.
pub fn select_operator(probs: &[f64]) -> Result<SelectionEntry> {
    if probs.is_empty() {
        return Err(Error::Invalid(
            "select_operator: empty probability vector".into(),
        ));
    }
    let index = crate::tensor::argmax(probs);
    Ok(SelectionEntry {
        index,
        value: probs[index],
    })
}

/// Chosen candidate index per sub-block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Selection(pub [usize; NUM_SUB_BLOCKS]);

impl Selection {
    pub fn from_probabilities(per_kind: &[Vec<f64>]) -> Result<Self> {
        if per_kind.len() != NUM_SUB_BLOCKS {
            return Err(Error::Invalid(format!(
                "selection: {} probability vectors, expected {NUM_SUB_BLOCKS}",
                per_kind.len()
            )));
        }
        let mut idx = [0; NUM_SUB_BLOCKS];
        for (slot, p) in idx.iter_mut().zip(per_kind) {
            *slot = select_operator(p)?.index;
        }
        Ok(Self(idx))
    }
}
