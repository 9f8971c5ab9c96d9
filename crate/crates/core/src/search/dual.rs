//! Alternating weight / architecture optimization.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{add_noise_with, extract_indices, NoiseDraw, MICRO_GROUP};
use crate::error::{Error, Result};
use crate::graph::{Graph, Split};
use crate::micro::{SubBlockScales, NUM_SUB_BLOCKS, WEIGHT_GROUP};
use crate::router::{
    derive_binary_routing, gate_expectations, GateMode, GumbelDraw, MACRO_GROUP, THETA_NAME,
};
use crate::{Adam, Gradients, ParamStore, Tape, Tensor};

use super::loss::{compute_loss, evaluate};
use super::network::{freeze_blocks, NetworkShape, Supernet};
use super::{Genotype, SearchConfig};

/// One line of the search log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub hidden: usize,
    pub epoch: usize,
    pub tau: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
    pub index: Vec<[usize; NUM_SUB_BLOCKS]>,
    /// `sigmoid(theta)` on forward pairs, zero below the diagonal.
    pub gates: Vec<Vec<f64>>,
}

/// Append-only per-epoch records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, r: EpochRecord) {
        self.records.push(r);
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { records })
    }
}

/// Optimizer update counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateCounts {
    pub w: usize,
    pub a_micro: usize,
    pub a_macro: usize,
}

/// What a finished search hands back.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub hidden: usize,
    pub seed: u64,
    pub genotype: Genotype,
    pub log: MetricsLog,
    pub store: ParamStore,
    pub optimizer_steps: BTreeMap<String, u64>,
    pub counts: UpdateCounts,
}

impl SearchOutcome {
    /// Validation metric of the final epoch.
    pub fn val_metric(&self) -> f64 {
        self.log.last().map_or(f64::NEG_INFINITY, |r| r.val_metric)
    }
}

/// Per-epoch decisions shared by the weight and architecture steps.
#[derive(Clone, Debug)]
pub struct EpochPlan {
    pub epoch: usize,
    pub tau: f64,
    pub noise: NoiseDraw,
    pub index: Vec<[usize; NUM_SUB_BLOCKS]>,
}

fn check_finite(epoch: usize, name: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            epoch,
            tensor: name.to_string(),
        })
    }
}

fn check_grads(epoch: usize, grads: &Gradients) -> Result<()> {
    for (name, g) in grads.iter() {
        check_finite(epoch, &format!("gradient of {name}"), g)?;
    }
    Ok(())
}

/// A search in progress; [`SearchRun::run_epoch`] performs one full
/// iteration, the finer steps are public for inspection.
pub struct SearchRun<'g> {
    config: SearchConfig,
    graph: &'g Graph,
    hidden: usize,
    seed: u64,
    net: Supernet,
    store: ParamStore,
    rng: ChaCha8Rng,
    w_opt: Adam,
    micro_opt: Adam,
    macro_opt: Adam,
    epoch: usize,
    log: MetricsLog,
    counts: UpdateCounts,
}

impl<'g> SearchRun<'g> {
    pub fn new(config: &SearchConfig, graph: &'g Graph, hidden: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if graph.masks().is_empty() {
            return Err(Error::Invalid("search needs train/val/test masks".into()));
        }
        let shape = NetworkShape::new(graph.spec(), vec![hidden; config.num_layers])?;
        let net = Supernet::new(shape, &config.candidates, config.controller_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = net.init(&mut rng)?;
        freeze_blocks(&mut store, &config.frozen_blocks);
        if !config.router {
            store.get_mut(THETA_NAME).expect("registered").trainable = false;
        }
        Ok(Self {
            w_opt: Adam::for_group(config.w_optim, WEIGHT_GROUP),
            micro_opt: Adam::for_group(config.a_optim, MICRO_GROUP),
            macro_opt: Adam::for_group(config.a_optim, MACRO_GROUP),
            config: config.clone(),
            graph,
            hidden,
            seed,
            net,
            store,
            rng,
            epoch: 0,
            log: MetricsLog::default(),
            counts: UpdateCounts::default(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn counts(&self) -> UpdateCounts {
        self.counts
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn supernet(&self) -> &Supernet {
        &self.net
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn sample_gates(&mut self) -> Option<GumbelDraw> {
        self.config
            .router
            .then(|| GumbelDraw::sample(self.net.num_layers(), &mut self.rng))
    }

    /// Temperature, exploration noise and the selected operators.
    pub fn begin_epoch(&mut self) -> Result<EpochPlan> {
        let e = self.epoch;
        let tau = self.config.schedule.tau(e, self.config.max_iter);
        let p_bar = self.net.controller.probabilities(&self.store)?;
        let noise = NoiseDraw::sample(&p_bar, &mut self.rng);
        let p = add_noise_with(&p_bar, tau, &noise);
        for v in p.iter() {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    epoch: e,
                    tensor: "operator probabilities".into(),
                });
            }
        }
        let index = extract_indices(&p);
        Ok(EpochPlan {
            epoch: e,
            tau,
            noise,
            index,
        })
    }

    /// One weight update on the training loss; returns that loss.
    pub fn weight_step(&mut self, plan: &EpochPlan) -> Result<f64> {
        let draw = self.sample_gates();
        let mode = match &draw {
            Some(d) => GateMode::Sampled {
                tau: plan.tau,
                draw: d,
            },
            None => GateMode::Off,
        };
        let mut tape = Tape::new();
        let logits =
            self.net
                .forward(&mut tape, &self.store, self.graph, &plan.index, None, &mode)?;
        let loss = compute_loss(
            &mut tape,
            logits,
            self.graph.labels(),
            self.graph.masks().get(Split::Train),
        )?;
        let value = tape.value(loss).item()?;
        check_finite(plan.epoch, "train loss", tape.value(loss))?;
        let grads = tape.backward(loss)?;
        check_grads(plan.epoch, &grads)?;
        self.w_opt.step(&mut self.store, &grads);
        self.counts.w += 1;
        Ok(value)
    }

    /// One controller update and one routing-prior update from a single
    /// validation backward pass; returns the validation loss.
    pub fn arch_step(&mut self, plan: &EpochPlan) -> Result<f64> {
        let draw = self.sample_gates();
        let mode = match &draw {
            Some(d) => GateMode::Sampled {
                tau: plan.tau,
                draw: d,
            },
            None => GateMode::Off,
        };
        let mut tape = Tape::new();
        let p_bar = self.net.controller.forward(&mut tape, &self.store)?;
        let p = p_bar.add_noise(&mut tape, plan.tau, &plan.noise)?;
        let selected = p.select(&mut tape, &plan.index)?;
        let scales: Vec<SubBlockScales> = selected.into_iter().map(SubBlockScales).collect();
        let logits = self.net.forward(
            &mut tape,
            &self.store,
            self.graph,
            &plan.index,
            Some(&scales),
            &mode,
        )?;
        let loss = compute_loss(
            &mut tape,
            logits,
            self.graph.labels(),
            self.graph.masks().get(Split::Val),
        )?;
        let value = tape.value(loss).item()?;
        check_finite(plan.epoch, "validation loss", tape.value(loss))?;
        let grads = tape.backward(loss)?;
        check_grads(plan.epoch, &grads)?;
        self.micro_opt.step(&mut self.store, &grads);
        self.counts.a_micro += 1;
        if self.config.router {
            self.macro_opt.step(&mut self.store, &grads);
            self.counts.a_macro += 1;
        }
        Ok(value)
    }

    /// Validation metric of the current path with noise-free gates.
    pub fn evaluate_path(&self, index: &[[usize; NUM_SUB_BLOCKS]], tau: f64) -> Result<f64> {
        let mode = if self.config.router {
            GateMode::Deterministic { tau }
        } else {
            GateMode::Off
        };
        let mut tape = Tape::new();
        let logits = self
            .net
            .forward(&mut tape, &self.store, self.graph, index, None, &mode)?;
        evaluate(
            tape.value(logits),
            self.graph.labels(),
            self.graph.masks().get(Split::Val),
        )
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let plan = self.begin_epoch()?;
        let mut train_loss = f64::NAN;
        for _ in 0..self.config.train_step {
            train_loss = self.weight_step(&plan)?;
        }
        let val_loss = self.arch_step(&plan)?;
        let val_metric = self.evaluate_path(&plan.index, plan.tau)?;
        let theta = self.store.value(THETA_NAME).expect("registered");
        let record = EpochRecord {
            hidden: self.hidden,
            epoch: plan.epoch,
            tau: plan.tau,
            train_loss,
            val_loss,
            val_metric,
            index: plan.index.clone(),
            gates: gate_expectations(theta),
        };
        log::debug!(
            "h={} epoch {} tau {:.4} train {:.4} val {:.4} metric {:.4}",
            self.hidden,
            plan.epoch,
            plan.tau,
            train_loss,
            val_loss,
            val_metric
        );
        self.log.push(record);
        self.epoch += 1;
        Ok(())
    }

    /// The discrete architecture implied by the current parameters:
    /// noise-free argmax per sub-block and `theta > 0` shortcuts.
    pub fn derive(&self) -> Result<Genotype> {
        let p_bar = self.net.controller.probabilities(&self.store)?;
        let index = extract_indices(&p_bar);
        let layers = self.net.ops(&index)?;
        let routing = if self.config.router {
            derive_binary_routing(self.store.value(THETA_NAME).expect("registered"))
                .into_iter()
                .map(|(i, j)| [i, j])
                .collect()
        } else {
            Vec::new()
        };
        Ok(Genotype {
            layers,
            routing,
            hidden_sizes: self.net.shape.hidden.clone(),
            seed: self.seed,
        })
    }

    pub fn run(mut self) -> Result<SearchOutcome> {
        while self.epoch < self.config.max_iter {
            self.run_epoch()?;
        }
        let genotype = self.derive()?;
        let optimizer_steps = BTreeMap::from([
            (WEIGHT_GROUP.to_string(), self.w_opt.steps()),
            (MICRO_GROUP.to_string(), self.micro_opt.steps()),
            (MACRO_GROUP.to_string(), self.macro_opt.steps()),
        ]);
        Ok(SearchOutcome {
            hidden: self.hidden,
            seed: self.seed,
            genotype,
            log: self.log,
            store: self.store,
            optimizer_steps,
            counts: self.counts,
        })
    }
}

/// Full search at one hidden width.
pub fn dual_search(
    config: &SearchConfig,
    graph: &Graph,
    hidden: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    SearchRun::new(config, graph, hidden, seed)?.run()
}
