//! Training a derived genotype from scratch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Split};
use crate::micro::WEIGHT_GROUP;
use crate::{Adam, ParamStore, Tape};

use super::loss::{compute_loss, evaluate};
use super::network::{freeze_blocks, StandaloneNet};
use super::{Genotype, RetrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainReport {
    pub train_metric: f64,
    pub val_metric: f64,
    pub test_metric: f64,
    /// Epoch whose weights are reported.
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// A trained standalone network.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub net: StandaloneNet,
    pub store: ParamStore,
    pub optimizer_steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitMetrics {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

pub fn evaluate_splits(
    net: &StandaloneNet,
    store: &ParamStore,
    graph: &Graph,
) -> Result<SplitMetrics> {
    let logits = net.predict(store, graph)?;
    let m = |s: Split| evaluate(&logits, graph.labels(), graph.masks().get(s));
    Ok(SplitMetrics {
        train: m(Split::Train)?,
        val: m(Split::Val)?,
        test: m(Split::Test)?,
    })
}

/// Fresh initialization from `seed`, Adam on the training loss, early
/// stopping on the validation metric; metrics are those of the best
/// validation epoch.
pub fn retrain_genotype(
    genotype: &Genotype,
    graph: &Graph,
    config: &RetrainConfig,
    frozen_blocks: &[usize],
    seed: u64,
) -> Result<(TrainedModel, RetrainReport)> {
    config.validate()?;
    if graph.masks().is_empty() {
        return Err(Error::Invalid(
            "retraining needs train/val/test masks".into(),
        ));
    }
    let net = StandaloneNet::from_genotype(genotype, graph.spec())?;
    if let Some(b) = frozen_blocks.iter().find(|&&b| b >= net.ops.len()) {
        return Err(Error::Config(format!(
            "frozen block {b} >= {} layers",
            net.ops.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = net.init(&mut rng)?;
    freeze_blocks(&mut store, frozen_blocks);
    let mut opt = Adam::for_group(config.optim, WEIGHT_GROUP);
    let masks = graph.masks();

    let mut best: Option<(f64, usize, ParamStore, u64)> = None;
    let mut epochs_run = 0;
    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let logits = net.forward(&mut tape, &store, graph)?;
        // metrics of the weights before this epoch's update
        let val = evaluate(tape.value(logits), graph.labels(), masks.get(Split::Val))?;
        if best.as_ref().is_none_or(|b| val > b.0) {
            best = Some((val, epoch, store.clone(), opt.steps()));
        }
        let since_best = epoch - best.as_ref().map_or(epoch, |b| b.1);
        if since_best >= config.patience {
            break;
        }
        let loss = compute_loss(&mut tape, logits, graph.labels(), masks.get(Split::Train))?;
        if !tape.value(loss).is_finite() {
            return Err(Error::NonFinite {
                epoch,
                tensor: "retrain loss".into(),
            });
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut store, &grads);
        epochs_run = epoch + 1;
    }
    let (_, best_epoch, store, optimizer_steps) = best.expect("at least one epoch");
    let m = evaluate_splits(&net, &store, graph)?;
    let report = RetrainReport {
        train_metric: m.train,
        val_metric: m.val,
        test_metric: m.test,
        best_epoch,
        epochs_run,
    };
    Ok((
        TrainedModel {
            net,
            store,
            optimizer_steps,
        },
        report,
    ))
}
