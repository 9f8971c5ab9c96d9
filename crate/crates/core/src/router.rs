//! Macro routing: trainable log-priors `theta` over an upper-triangular set
//! of shortcuts, Gumbel-sigmoid gates, and the temperature schedule.
//!
//! Entry `(i, j)` with `i <= j` gates a linear map of block input `I_i`
//! into block output `O_j`: `O_j = O'_j + sum_i gate_ij * g_ij(I_i)`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micro::{glorot, WEIGHT_GROUP};
use crate::tensor::sigmoid;
use crate::{ParamStore, Tape, Tensor, Var};

pub const MACRO_GROUP: &str = "a_macro";
pub const THETA_NAME: &str = "router/theta";
pub const TAU_MIN: f64 = 1e-3;

fn clamp_tau(tau: f64) -> f64 {
    if tau < TAU_MIN || tau.is_nan() {
        log::warn!("temperature {tau} below floor, clamped to {TAU_MIN}");
        TAU_MIN
    } else {
        tau
    }
}

/// A standard Gumbel draw `-ln(-ln u)` with `u` uniform on `(0, 1)`.
pub fn gumbel_noise(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

/// `sigmoid((theta + g) / tau)` for a given Gumbel draw `g`.
pub fn gumbel_sigmoid_with(theta: f64, g: f64, tau: f64) -> f64 {
    sigmoid((theta + g) / clamp_tau(tau))
}

pub fn gumbel_sigmoid(theta: f64, tau: f64, rng: &mut impl Rng) -> f64 {
    gumbel_sigmoid_with(theta, gumbel_noise(rng), tau)
}

/// Keeps `(i, j)` iff `theta_ij > 0`, i.e. the noise-free gate at unit
/// temperature exceeds one half.
pub fn derive_binary_routing(theta: &Tensor) -> Vec<(usize, usize)> {
    let l = theta.rows();
    let mut out = Vec::new();
    for i in 0..l {
        for j in i..theta.cols() {
            if theta.get(i, j) > 0.0 {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Exp,
    CosineExp,
}

/// Temperature schedule. `e_m` of `None` means "the run's epoch count".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TempSchedule {
    pub kind: ScheduleKind,
    pub alpha: f64,
    pub e_s: usize,
    pub e_m: Option<usize>,
    pub e_cos: usize,
    pub e_exp: usize,
    /// Cosine frequency; defaults to `pi / (2 (e_exp - e_cos))`.
    pub omega: Option<f64>,
    pub tau_min: f64,
}

impl Default for TempSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Exp,
            alpha: 1.0,
            e_s: 80,
            e_m: None,
            e_cos: 100,
            e_exp: 300,
            omega: None,
            tau_min: TAU_MIN,
        }
    }
}

impl TempSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_min <= 1.0) {
            return Err(Error::Config(format!(
                "schedule: tau_min {} outside (0, 1]",
                self.tau_min
            )));
        }
        if self.e_m == Some(0) {
            return Err(Error::Config("schedule: e_m must be positive".into()));
        }
        if self.kind == ScheduleKind::CosineExp && self.e_exp <= self.e_cos {
            return Err(Error::Config("schedule: e_exp must exceed e_cos".into()));
        }
        Ok(())
    }

    pub fn omega(&self) -> f64 {
        self.omega.unwrap_or_else(|| {
            std::f64::consts::PI / (2.0 * (self.e_exp.saturating_sub(self.e_cos).max(1)) as f64)
        })
    }

    /// Temperature at epoch `e`, clamped to `[tau_min, 1]`.
    pub fn tau(&self, e: usize, max_epochs: usize) -> f64 {
        let e_m = self.e_m.unwrap_or(max_epochs).max(1) as f64;
        let rate = self.alpha / e_m;
        let raw = match self.kind {
            ScheduleKind::Exp => {
                if e < self.e_s {
                    1.0
                } else {
                    (-rate * (e - self.e_s) as f64).exp()
                }
            }
            ScheduleKind::CosineExp => {
                if e < self.e_cos {
                    1.0
                } else if e < self.e_exp {
                    (self.omega() * (e - self.e_cos) as f64).cos()
                } else {
                    // Jumps back to 1 at e_exp; kept as defined.
                    (-rate * (e - self.e_exp) as f64).exp()
                }
            }
        };
        raw.clamp(self.tau_min, 1.0)
    }
}

pub fn temp_anneal(e: usize, schedule: &TempSchedule, max_epochs: usize) -> f64 {
    schedule.tau(e, max_epochs)
}

/// Frozen Gumbel draws for every `(i, j)`, row-major `[L, L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelDraw(pub Tensor);

impl GumbelDraw {
    pub fn sample(l: usize, rng: &mut impl Rng) -> Self {
        let data = (0..l * l).map(|_| gumbel_noise(rng)).collect();
        Self(Tensor::matrix(l, l, data).expect("square draw"))
    }

    pub fn zeros(l: usize) -> Self {
        Self(Tensor::zeros(&[l, l]))
    }
}

/// How gate values are produced for one forward pass.
#[derive(Clone, Debug)]
pub enum GateMode<'a> {
    /// No shortcuts at all.
    Off,
    /// `sigmoid((theta + g) / tau)` for the given draw.
    Sampled { tau: f64, draw: &'a GumbelDraw },
    /// `sigmoid(theta / tau)`.
    Deterministic { tau: f64 },
    /// Constant unit gates on the listed pairs.
    Binary(&'a BTreeSet<(usize, usize)>),
}

/// Gate handles of the active `(i, j)` pairs, each `[1, 1]`.
#[derive(Clone, Debug, Default)]
pub struct Gates {
    entries: BTreeMap<(usize, usize), Var>,
}

impl Gates {
    pub fn get(&self, i: usize, j: usize) -> Option<Var> {
        self.entries.get(&(i, j)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Gate values as an `[L, L]` matrix; inactive entries are zero.
    pub fn values(&self, tape: &Tape, l: usize) -> Tensor {
        let mut t = Tensor::zeros(&[l, l]);
        for (&(i, j), &v) in &self.entries {
            t.data_mut()[i * l + j] = tape.value(v).data()[0];
        }
        t
    }
}

/// Shortcut structure of an `L`-block network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Router {
    /// Width of block input `I_i`.
    input_dims: Vec<usize>,
    /// Width of block output `O_j`.
    output_dims: Vec<usize>,
}

impl Router {
    pub fn new(input_dims: Vec<usize>, output_dims: Vec<usize>) -> Result<Self> {
        if input_dims.len() != output_dims.len() || input_dims.is_empty() {
            return Err(Error::Config(
                "router: one input and one output width per block".into(),
            ));
        }
        Ok(Self {
            input_dims,
            output_dims,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.input_dims.len()
    }

    pub fn shortcut_name(i: usize, j: usize) -> String {
        format!("shortcut/{i}_{j}")
    }

    /// Every forward pair `(i, j)`, `i <= j`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let l = self.num_blocks();
        (0..l).flat_map(move |i| (i..l).map(move |j| (i, j)))
    }

    /// Registers `theta` (zeros) and a map `g_ij` for every forward pair.
    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let l = self.num_blocks();
        store.insert(THETA_NAME, Tensor::zeros(&[l, l]), true, MACRO_GROUP);
        self.register_shortcuts(store, rng, self.pairs().collect::<Vec<_>>().iter().copied());
    }

    /// Registers maps for the given pairs only.
    pub fn register_shortcuts(
        &self,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) {
        for (i, j) in pairs {
            let w = glorot(rng, self.input_dims[i], self.output_dims[j]);
            store.insert(&Self::shortcut_name(i, j), w, true, WEIGHT_GROUP);
        }
    }

    pub fn check_pairs(&self, pairs: &BTreeSet<(usize, usize)>) -> Result<()> {
        let l = self.num_blocks();
        match pairs.iter().find(|&&(i, j)| i > j || j >= l) {
            Some((i, j)) => Err(Error::Invalid(format!(
                "shortcut ({i}, {j}) is not a forward pair of {l} blocks"
            ))),
            None => Ok(()),
        }
    }

    /// Builds gate nodes for `mode`.
    pub fn gates(&self, tape: &mut Tape, store: &ParamStore, mode: &GateMode<'_>) -> Result<Gates> {
        let l = self.num_blocks();
        let mut entries = BTreeMap::new();
        let matrix = match mode {
            GateMode::Off => return Ok(Gates::default()),
            GateMode::Binary(pairs) => {
                self.check_pairs(pairs)?;
                for &p in pairs.iter() {
                    entries.insert(p, tape.constant(Tensor::scalar(1.0)));
                }
                return Ok(Gates { entries });
            }
            GateMode::Sampled { tau, draw } => {
                if draw.0.shape() != [l, l] {
                    return Err(Error::Invalid(format!(
                        "gumbel draw shape {:?} for {l} blocks",
                        draw.0.shape()
                    )));
                }
                let theta = tape.param(store, THETA_NAME)?;
                let g = tape.constant(draw.0.clone());
                let z = tape.add(theta, g)?;
                let z = tape.scale(z, 1.0 / clamp_tau(*tau));
                tape.sigmoid(z)
            }
            GateMode::Deterministic { tau } => {
                let theta = tape.param(store, THETA_NAME)?;
                let z = tape.scale(theta, 1.0 / clamp_tau(*tau));
                tape.sigmoid(z)
            }
        };
        for i in 0..l {
            let row = tape.gather_rows(matrix, Arc::from(vec![i]))?;
            for j in i..l {
                entries.insert((i, j), tape.slice_cols(row, j, j + 1)?);
            }
        }
        Ok(Gates { entries })
    }

    /// `O_j = O'_j + sum_{i <= j} gate_ij * g_ij(I_i)` for one output.
    /// `inputs` holds at least `I_0 ..= I_j`.
    pub fn route_output(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        j: usize,
        inputs: &[Var],
        o_prime: Var,
        gates: &Gates,
    ) -> Result<Var> {
        let mut out = o_prime;
        for (i, &input) in inputs.iter().enumerate().take(j + 1) {
            let Some(gate) = gates.get(i, j) else {
                continue;
            };
            let w = tape.param(store, &Self::shortcut_name(i, j))?;
            let mapped = tape.matmul(input, w)?;
            if tape.shape(mapped) != tape.shape(o_prime) {
                return Err(Error::Invalid(format!(
                    "shortcut ({i}, {j}) yields {:?} for output {:?}",
                    tape.shape(mapped),
                    tape.shape(o_prime)
                )));
            }
            let gated = tape.mul(mapped, gate)?;
            out = tape.add(out, gated)?;
        }
        Ok(out)
    }

    /// Routes every output given all block inputs and raw block outputs.
    pub fn route(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &[Var],
        o_prime: &[Var],
        gates: &Gates,
    ) -> Result<Vec<Var>> {
        if inputs.len() != self.num_blocks() || o_prime.len() != self.num_blocks() {
            return Err(Error::Invalid(
                "route: one input and one output per block".into(),
            ));
        }
        (0..self.num_blocks())
            .map(|j| self.route_output(tape, store, j, inputs, o_prime[j], gates))
            .collect()
    }
}

/// `sigmoid(theta)` on forward pairs, zero below the diagonal.
pub fn gate_expectations(theta: &Tensor) -> Vec<Vec<f64>> {
    (0..theta.rows())
        .map(|i| {
            (0..theta.cols())
                .map(|j| {
                    if i <= j {
                        sigmoid(theta.get(i, j))
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gumbel_sigmoid_examples() {
        assert_eq!(gumbel_sigmoid_with(0.0, 0.0, 1.0), 0.5);
        assert!(gumbel_sigmoid_with(0.3, 0.2, 1e-3) > 1.0 - 1e-12);
        assert!(gumbel_sigmoid_with(-0.3, 0.2, 1e-9) < 1e-12);
    }

    #[test]
    fn median_matches_gumbel_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut v: Vec<f64> = (0..100_000)
            .map(|_| gumbel_sigmoid(0.0, 1.0, &mut rng))
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = 0.5 * (v[49_999] + v[50_000]);
        let want = sigmoid(-(2f64.ln()).ln());
        assert!((want - 0.5906).abs() < 1e-4);
        assert!((median - want).abs() < 0.005, "{median}");
    }

    #[test]
    fn monotone_in_theta() {
        let mut prev = 0.0;
        for k in -20..=20 {
            let y = gumbel_sigmoid_with(k as f64 * 0.25, 0.37, 0.8);
            assert!(y > prev);
            prev = y;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let means: Vec<f64> = [-2.0, 0.0, 2.0]
            .iter()
            .map(|&t| {
                (0..100_000)
                    .map(|_| gumbel_sigmoid(t, 1.0, &mut rng))
                    .sum::<f64>()
                    / 1e5
            })
            .collect();
        assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
    }

    #[test]
    fn binary_routing_rule() {
        assert!(derive_binary_routing(&Tensor::zeros(&[3, 3])).is_empty());
        let mut theta = Tensor::full(&[3, 3], -2.0);
        theta.data_mut()[1] = 2.0;
        assert_eq!(derive_binary_routing(&theta), vec![(0, 1)]);
        // lower triangle is never read
        theta.data_mut()[3] = 5.0;
        assert_eq!(derive_binary_routing(&theta), vec![(0, 1)]);
    }

    #[test]
    fn exp_schedule_values() {
        let s = TempSchedule {
            e_m: Some(400),
            ..TempSchedule::default()
        };
        assert_eq!(s.tau(0, 400), 1.0);
        assert_eq!(s.tau(79, 400), 1.0);
        assert_eq!(s.tau(80, 400), 1.0);
        assert!((s.tau(280, 400) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((s.tau(280, 400) - 0.60653).abs() < 1e-5);
        assert!((s.tau(399, 400) - (-319.0f64 / 400.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = TempSchedule {
            kind: ScheduleKind::CosineExp,
            e_m: Some(400),
            ..TempSchedule::default()
        };
        assert_eq!(s.tau(99, 400), 1.0);
        assert_eq!(s.tau(100, 400), 1.0);
        assert!((s.tau(200, 400) - (std::f64::consts::FRAC_PI_4).cos()).abs() < 1e-12);
        assert!(s.tau(299, 400) < 0.01);
        // jump back at e_exp, kept as written
        assert_eq!(s.tau(300, 400), 1.0);
        for e in 0..400 {
            let t = s.tau(e, 400);
            assert!((TAU_MIN..=1.0).contains(&t));
        }
    }

    fn identity_router(l: usize, d: usize) -> (Router, ParamStore) {
        let r = Router::new(vec![d; l], vec![d; l]).unwrap();
        let mut store = ParamStore::new();
        r.register(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        for (i, j) in r.pairs().collect::<Vec<_>>() {
            store.get_mut(&Router::shortcut_name(i, j)).unwrap().value = Tensor::eye(d);
        }
        (r, store)
    }

    #[test]
    fn route_hand_cases() {
        let (r, store) = identity_router(3, 2);
        let mut tape = Tape::new();
        let inputs: Vec<Var> = (0..3)
            .map(|k| {
                tape.constant(Tensor::row_vector(vec![
                    k as f64 + 1.0,
                    10.0 * (k as f64 + 1.0),
                ]))
            })
            .collect();
        let o_prime: Vec<Var> = (0..3)
            .map(|_| tape.constant(Tensor::row_vector(vec![0.5, 0.5])))
            .collect();

        let none = r.gates(&mut tape, &store, &GateMode::Off).unwrap();
        let out = r
            .route(&mut tape, &store, &inputs, &o_prime, &none)
            .unwrap();
        assert_eq!(tape.value(out[2]).data(), &[0.5, 0.5]);

        let mut gates = Gates::default();
        gates
            .entries
            .insert((0, 2), tape.constant(Tensor::scalar(0.5)));
        gates
            .entries
            .insert((1, 2), tape.constant(Tensor::scalar(1.0)));
        gates
            .entries
            .insert((0, 1), tape.constant(Tensor::scalar(1.0)));
        let out = r
            .route(&mut tape, &store, &inputs, &o_prime, &gates)
            .unwrap();
        // O_2 = 0.5 + 0.5 * I_0 + I_1
        assert_eq!(
            tape.value(out[2]).data(),
            &[0.5 + 0.5 + 2.0, 0.5 + 5.0 + 20.0]
        );
        assert_eq!(tape.value(out[1]).data(), &[1.5, 10.5]);
        assert_eq!(tape.value(out[0]).data(), &[0.5, 0.5]);

        let pure = BTreeSet::from([(0, 2)]);
        let gates = r
            .gates(&mut tape, &store, &GateMode::Binary(&pure))
            .unwrap();
        let zero: Vec<Var> = (0..3)
            .map(|_| tape.constant(Tensor::zeros(&[1, 2])))
            .collect();
        let out = r.route(&mut tape, &store, &inputs, &zero, &gates).unwrap();
        assert_eq!(tape.value(out[2]).data(), tape.value(inputs[0]).data());
    }

    #[test]
    fn lower_triangle_is_zero_and_gates_open() {
        let (r, store) = identity_router(4, 2);
        let mut tape = Tape::new();
        let draw = GumbelDraw::sample(4, &mut ChaCha8Rng::seed_from_u64(3));
        let gates = r
            .gates(
                &mut tape,
                &store,
                &GateMode::Sampled {
                    tau: 0.7,
                    draw: &draw,
                },
            )
            .unwrap();
        let v = gates.values(&tape, 4);
        for i in 0..4 {
            for j in 0..4 {
                let g = v.get(i, j);
                if i > j {
                    assert_eq!(g, 0.0);
                } else {
                    assert!(g > 0.0 && g < 1.0);
                }
            }
        }
        assert_eq!(gates.len(), 10);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let r = Router::new(vec![3, 4], vec![4, 4]).unwrap();
        let mut store = ParamStore::new();
        r.register(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let inputs = [
            tape.constant(Tensor::zeros(&[2, 3])),
            tape.constant(Tensor::zeros(&[2, 4])),
        ];
        let bad = tape.constant(Tensor::zeros(&[2, 5]));
        let gates = r
            .gates(&mut tape, &store, &GateMode::Deterministic { tau: 1.0 })
            .unwrap();
        assert!(r
            .route_output(&mut tape, &store, 1, &inputs, bad, &gates)
            .is_err());
    }

    #[test]
    fn theta_gradient_matches_finite_differences() {
        let (r, mut store) = identity_router(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.get_mut(THETA_NAME).unwrap().value = Tensor::matrix(3, 3, theta).unwrap();
        let draw = GumbelDraw::sample(3, &mut rng);
        let f = |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
            let inputs: Vec<Var> = (0..3)
                .map(|k| {
                    tape.constant(Tensor::row_vector(vec![
                        k as f64 - 0.5,
                        0.3 * k as f64 + 0.1,
                    ]))
                })
                .collect();
            let o: Vec<Var> = (0..3)
                .map(|_| tape.constant(Tensor::row_vector(vec![0.2, -0.1])))
                .collect();
            let gates = r.gates(
                tape,
                s,
                &GateMode::Sampled {
                    tau: 0.6,
                    draw: &draw,
                },
            )?;
            let out = r.route(tape, s, &inputs, &o, &gates)?;
            let sq = tape.mul(out[2], out[2])?;
            let a = tape.sum(sq);
            let b = tape.sum(out[1]);
            Ok(tape.add(a, b)?)
        };
        let err =
            crate::tensor::finite_difference_check_params(&store, &[THETA_NAME.to_string()], f)
                .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
