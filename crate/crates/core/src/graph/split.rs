use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Graph, Masks};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Seeded Fisher-Yates permutation of the nodes; the first `floor(train * n)`
/// go to train, the next `floor(val * n)` to val and the remainder to test.
pub fn random_split(graph: Graph, ratios: SplitRatios, seed: u64) -> Result<Graph> {
    let n = graph.num_nodes();
    if n < 5 {
        return Err(Error::Graph(format!(
            "random_split: {n} nodes, need at least 5"
        )));
    }
    let total = ratios.train + ratios.val + ratios.test;
    if (total - 1.0).abs() > 1e-9
        || [ratios.train, ratios.val, ratios.test]
            .iter()
            .any(|r| *r < 0.0)
    {
        return Err(Error::Graph(format!(
            "random_split: ratios {ratios:?} do not sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // The epsilon keeps exact products such as 0.6 * 5 from flooring down.
    let n_train = (ratios.train * n as f64 + 1e-9).floor() as usize;
    let n_val = ((ratios.val * n as f64 + 1e-9).floor() as usize).min(n - n_train);
    let mut masks = Masks::empty(n);
    for (rank, &node) in order.iter().enumerate() {
        if rank < n_train {
            masks.train[node] = true;
        } else if rank < n_train + n_val {
            masks.val[node] = true;
        } else {
            masks.test[node] = true;
        }
    }
    graph.with_masks(masks)
}
