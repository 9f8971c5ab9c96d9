use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::Graph;

use super::dual::{dual_search, MetricsLog, SearchOutcome};
use super::SearchConfig;

/// Every per-width search plus the winner.
#[derive(Clone, Debug)]
pub struct GridResult {
    /// In grid order.
    pub runs: Vec<SearchOutcome>,
    pub best: usize,
}

impl GridResult {
    pub fn best(&self) -> &SearchOutcome {
        &self.runs[self.best]
    }

    /// All logs concatenated in grid order.
    pub fn merged_log(&self) -> MetricsLog {
        MetricsLog {
            records: self
                .runs
                .iter()
                .flat_map(|r| r.log.records.iter().cloned())
                .collect(),
        }
    }
}

/// Searches every width of the grid, each with its own derived seed, and
/// keeps the best final validation metric; ties go to the smaller width.
/// `threads > 1` runs widths concurrently with identical results.
pub fn grid_search_hidden(
    config: &SearchConfig,
    graph: &Graph,
    threads: usize,
) -> Result<GridResult> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> = config.hidden_grid.iter().copied().enumerate().collect();
    let run = |&(pos, h): &(usize, usize)| dual_search(config, graph, h, config.seed_for(pos));
    let runs = if threads > 1 && jobs.len() > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        jobs.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    let mut best = 0;
    for (k, r) in runs.iter().enumerate() {
        let (v, b) = (r.val_metric(), runs[best].val_metric());
        if v > b || (v == b && r.hidden < runs[best].hidden) {
            best = k;
        }
    }
    Ok(GridResult { runs, best })
}
