use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micro::{BlockOp, Candidates};

/// A discrete architecture: one operator per sub-block and layer, the kept
/// shortcuts and the block widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub layers: Vec<BlockOp>,
    pub routing: Vec<[usize; 2]>,
    pub hidden_sizes: Vec<usize>,
    pub seed: u64,
}

impl Genotype {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn routing_set(&self) -> BTreeSet<(usize, usize)> {
        self.routing.iter().map(|&[i, j]| (i, j)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.layers.len();
        if l == 0 {
            return Err(Error::Invalid("genotype has no layers".into()));
        }
        if self.hidden_sizes.len() != l {
            return Err(Error::Invalid(format!(
                "genotype: {} hidden sizes for {l} layers",
                self.hidden_sizes.len()
            )));
        }
        let all = Candidates::default();
        for (k, (op, &h)) in self.layers.iter().zip(&self.hidden_sizes).enumerate() {
            if all.index_of(op).is_none() {
                return Err(Error::Invalid(format!(
                    "layers[{k}]: operator outside the search space"
                )));
            }
            if h == 0 || h % op.heads != 0 {
                return Err(Error::Invalid(format!(
                    "layers[{k}]: width {h} does not split into {} heads",
                    op.heads
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for &[i, j] in &self.routing {
            if i > j || j >= l {
                return Err(Error::Invalid(format!(
                    "routing ({i}, {j}) is not a forward pair of {l} layers"
                )));
            }
            if !seen.insert((i, j)) {
                return Err(Error::Invalid(format!("routing ({i}, {j}) listed twice")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}
