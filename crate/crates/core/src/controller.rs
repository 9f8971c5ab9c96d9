//! Micro-architecture controller: a trainable prior `z` fed through a
//! ReLU MLP and one linear head per (layer, sub-block), each followed by a
//! softmax. Exploration noise is mixed into the probabilities before the
//! argmax picks the active operators.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::micro::{glorot, SubBlock, NUM_SUB_BLOCKS};
use crate::{ParamStore, Tape, Tensor, Var};

pub const MICRO_GROUP: &str = "a_micro";
pub const PRIOR_DIM: usize = 256;
const PRIOR_INIT_STD: f64 = 0.01;

/// Probability vector per layer and sub-block.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityTensor {
    pub layers: Vec<[Vec<f64>; NUM_SUB_BLOCKS]>,
}

impl ProbabilityTensor {
    pub fn get(&self, layer: usize, kind: SubBlock) -> &[f64] {
        &self.layers[layer][kind as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.layers.iter().flat_map(|l| l.iter())
    }

    /// Largest deviation of any vector's sum from one.
    pub fn max_sum_error(&self) -> f64 {
        self.iter()
            .map(|p| (p.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Argmax per (layer, sub-block), ties to the lowest index.
pub fn extract_indices(p: &ProbabilityTensor) -> Vec<[usize; NUM_SUB_BLOCKS]> {
    p.layers
        .iter()
        .map(|layer| {
            let mut idx = [0; NUM_SUB_BLOCKS];
            for (slot, v) in idx.iter_mut().zip(layer) {
                *slot = crate::tensor::argmax(v);
            }
            idx
        })
        .collect()
}

/// Uniform draws used by [`add_noise`], one per probability entry.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub layers: Vec<[Vec<f64>; NUM_SUB_BLOCKS]>,
}

impl NoiseDraw {
    pub fn sample(shape: &ProbabilityTensor, rng: &mut impl Rng) -> Self {
        let layers = shape
            .layers
            .iter()
            .map(|layer| {
                layer
                    .clone()
                    .map(|v| v.iter().map(|_| rng.random::<f64>()).collect())
            })
            .collect();
        Self { layers }
    }
}

/// `P = (P_bar + tau * U) / Z` with `Z` the sum of the numerator.
/// With `tau == 0` the input is returned untouched.
pub fn add_noise_with(p_bar: &ProbabilityTensor, tau: f64, noise: &NoiseDraw) -> ProbabilityTensor {
    if tau == 0.0 {
        return p_bar.clone();
    }
    let layers = p_bar
        .layers
        .iter()
        .zip(&noise.layers)
        .map(|(pl, nl)| {
            let mut out: [Vec<f64>; NUM_SUB_BLOCKS] = Default::default();
            for (o, (p, u)) in out.iter_mut().zip(pl.iter().zip(nl)) {
                let raw: Vec<f64> = p.iter().zip(u).map(|(p, u)| p + tau * u).collect();
                let z: f64 = raw.iter().sum();
                *o = raw.iter().map(|r| r / z).collect();
            }
            out
        })
        .collect();
    ProbabilityTensor { layers }
}

pub fn add_noise(
    p_bar: &ProbabilityTensor,
    tau: f64,
    rng: &mut impl Rng,
) -> (ProbabilityTensor, NoiseDraw) {
    let noise = NoiseDraw::sample(p_bar, rng);
    (add_noise_with(p_bar, tau, &noise), noise)
}

/// Tape handles of every probability vector, each of shape `[1, T]`.
#[derive(Clone, Debug)]
pub struct ProbabilityVars {
    pub layers: Vec<[Var; NUM_SUB_BLOCKS]>,
}

impl ProbabilityVars {
    pub fn values(&self, tape: &Tape) -> ProbabilityTensor {
        let layers = self
            .layers
            .iter()
            .map(|l| l.map(|v| tape.value(v).data().to_vec()))
            .collect();
        ProbabilityTensor { layers }
    }

    /// Differentiable noise mixing, identical in value to [`add_noise_with`].
    pub fn add_noise(&self, tape: &mut Tape, tau: f64, noise: &NoiseDraw) -> Result<Self> {
        if tau == 0.0 {
            return Ok(self.clone());
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (pl, nl) in self.layers.iter().zip(&noise.layers) {
            let mut out = *pl;
            for (o, (&p, u)) in out.iter_mut().zip(pl.iter().zip(nl)) {
                let c = tape.constant(Tensor::row_vector(u.iter().map(|u| tau * u).collect()));
                let raw = tape.add(p, c)?;
                let z = tape.sum(raw);
                *o = tape.div(raw, z)?;
            }
            layers.push(out);
        }
        Ok(Self { layers })
    }

    /// The `[1, 1]` entries `P[layer][k][index[layer][k]]`.
    pub fn select(
        &self,
        tape: &mut Tape,
        index: &[[usize; NUM_SUB_BLOCKS]],
    ) -> Result<Vec<[Var; NUM_SUB_BLOCKS]>> {
        let mut out = Vec::with_capacity(self.layers.len());
        for (pl, idx) in self.layers.iter().zip(index) {
            let mut sel = *pl;
            for (s, (&p, &i)) in sel.iter_mut().zip(pl.iter().zip(idx)) {
                *s = tape.slice_cols(p, i, i + 1)?;
            }
            out.push(sel);
        }
        Ok(out)
    }
}

/// Shape of the controller: candidate counts per layer and sub-block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Controller {
    lengths: Vec<[usize; NUM_SUB_BLOCKS]>,
    prior_dim: usize,
}

impl Controller {
    pub fn new(lengths: Vec<[usize; NUM_SUB_BLOCKS]>) -> Result<Self> {
        Self::with_prior_dim(lengths, PRIOR_DIM)
    }

    pub fn with_prior_dim(lengths: Vec<[usize; NUM_SUB_BLOCKS]>, prior_dim: usize) -> Result<Self> {
        if lengths.is_empty() || lengths.iter().flatten().any(|&t| t == 0) || prior_dim == 0 {
            return Err(Error::Config(
                "controller needs non-empty candidate lists".into(),
            ));
        }
        Ok(Self { lengths, prior_dim })
    }

    pub fn num_layers(&self) -> usize {
        self.lengths.len()
    }

    pub fn prior_name() -> &'static str {
        "controller/z"
    }

    fn mlp_names() -> [&'static str; 2] {
        ["controller/mlp/w1", "controller/mlp/w2"]
    }

    fn head_name(layer: usize, kind: SubBlock) -> String {
        format!("controller/head/layer{layer}/{kind}")
    }

    /// Registers `z ~ N(0, 0.01^2)`, the MLP and the projection heads.
    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.prior_dim;
        let normal = Normal::new(0.0, PRIOR_INIT_STD).expect("valid sigma");
        let z = (0..d).map(|_| normal.sample(rng)).collect();
        store.insert(Self::prior_name(), Tensor::row_vector(z), true, MICRO_GROUP);
        for name in Self::mlp_names() {
            store.insert(name, glorot(rng, d, d), true, MICRO_GROUP);
        }
        for (layer, lens) in self.lengths.iter().enumerate() {
            for (&kind, &t) in SubBlock::ALL.iter().zip(lens) {
                store.insert(
                    &Self::head_name(layer, kind),
                    glorot(rng, d, t),
                    true,
                    MICRO_GROUP,
                );
            }
        }
    }

    /// Noise-free probabilities `P_bar` as tape nodes.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore) -> Result<ProbabilityVars> {
        let mut h = tape.param(store, Self::prior_name())?;
        for name in Self::mlp_names() {
            let w = tape.param(store, name)?;
            let lin = tape.matmul(h, w)?;
            h = tape.relu(lin);
        }
        let mut layers = Vec::with_capacity(self.lengths.len());
        for layer in 0..self.lengths.len() {
            let mut probs = [h; NUM_SUB_BLOCKS];
            for (slot, &kind) in probs.iter_mut().zip(SubBlock::ALL) {
                let w = tape.param(store, &Self::head_name(layer, kind))?;
                let logits = tape.matmul(h, w)?;
                *slot = tape.softmax_rows(logits);
            }
            layers.push(probs);
        }
        Ok(ProbabilityVars { layers })
    }

    /// Noise-free probabilities as plain values.
    pub fn probabilities(&self, store: &ParamStore) -> Result<ProbabilityTensor> {
        let mut tape = Tape::new();
        let vars = self.forward(&mut tape, store)?;
        Ok(vars.values(&tape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Controller, ParamStore) {
        let c = Controller::with_prior_dim(vec![[4, 7, 5, 3, 8], [4, 7, 5, 3, 8]], 16).unwrap();
        let mut store = ParamStore::new();
        c.register(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        (c, store)
    }

    #[test]
    fn zero_weights_give_uniform() {
        let (c, mut store) = setup();
        for name in Controller::mlp_names() {
            let p = store.get_mut(name).unwrap();
            p.value = Tensor::zeros(p.value.shape());
        }
        let p = c.probabilities(&store).unwrap();
        for v in p.iter() {
            let u = 1.0 / v.len() as f64;
            assert!(v.iter().all(|&x| (x - u).abs() < 1e-15));
        }
    }

    #[test]
    fn vectors_sum_to_one() {
        let (c, store) = setup();
        let p = c.probabilities(&store).unwrap();
        assert!(p.max_sum_error() < 1e-12);
        assert_eq!(p.layers[1][1].len(), 7);
    }

    #[test]
    fn noise_zero_is_identity() {
        let (c, store) = setup();
        let p = c.probabilities(&store).unwrap();
        let (q, _) = add_noise(&p, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(p, q);
    }

    #[test]
    fn noise_hand_example() {
        let p = ProbabilityTensor {
            layers: vec![[vec![0.5, 0.5], vec![1.0], vec![1.0], vec![1.0], vec![1.0]]],
        };
        let noise = NoiseDraw {
            layers: vec![[vec![0.2, 0.6], vec![0.0], vec![0.0], vec![0.0], vec![0.0]]],
        };
        let q = add_noise_with(&p, 1.0, &noise);
        assert!((q.layers[0][0][0] - 0.7 / 1.8).abs() < 1e-12);
        assert!((q.layers[0][0][1] - 1.1 / 1.8).abs() < 1e-12);
        assert!((q.layers[0][0][0] - 0.388_888_888_888_888_9).abs() < 1e-12);
    }

    #[test]
    fn tape_noise_matches_plain() {
        let (c, store) = setup();
        let mut tape = Tape::new();
        let vars = c.forward(&mut tape, &store).unwrap();
        let plain = vars.values(&tape);
        let (expected, noise) = add_noise(&plain, 0.7, &mut ChaCha8Rng::seed_from_u64(4));
        let noisy = vars.add_noise(&mut tape, 0.7, &noise).unwrap();
        let got = noisy.values(&tape);
        for (a, b) in got.iter().zip(expected.iter()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn indices_examples() {
        let p = ProbabilityTensor {
            layers: vec![[
                vec![0.25; 4],
                vec![0.2, 0.3, 0.5],
                vec![1.0],
                vec![0.4, 0.6],
                vec![1.0],
            ]],
        };
        assert_eq!(extract_indices(&p), vec![[0, 2, 0, 1, 0]]);
    }

    #[test]
    fn noisy_vectors_sum_to_one_for_any_tau() {
        let (c, store) = setup();
        let p = c.probabilities(&store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for tau in [1e-6, 0.1, 1.0, 37.0, 1e8] {
            let (q, _) = add_noise(&p, tau, &mut rng);
            assert!(q.max_sum_error() < 1e-12);
        }
    }

    #[test]
    fn large_tau_expectation_is_uniform() {
        let p_bar = ProbabilityTensor {
            layers: vec![[
                vec![0.7, 0.2, 0.1],
                vec![1.0],
                vec![1.0],
                vec![1.0],
                vec![1.0],
            ]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let (mut sum, mut sq) = ([0.0; 3], [0.0; 3]);
        for _ in 0..n {
            let (q, _) = add_noise(&p_bar, 1e6, &mut rng);
            for (j, &x) in q.layers[0][0].iter().enumerate() {
                sum[j] += x;
                sq[j] += x * x;
            }
        }
        for j in 0..3 {
            let mean = sum[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - 1.0 / 3.0).abs() < 3.0 * se,
                "entry {j}: {mean} (se {se})"
            );
        }
    }

    #[test]
    fn indices_invariant_under_logit_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let probs = |scale: f64| {
                let e: Vec<f64> = logits.iter().map(|x| (x * scale).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|x| x / z).collect::<Vec<_>>()
            };
            let wrap = |v: Vec<f64>| ProbabilityTensor {
                layers: vec![[v, vec![1.0], vec![1.0], vec![1.0], vec![1.0]]],
            };
            assert_eq!(
                extract_indices(&wrap(probs(1.0))),
                extract_indices(&wrap(probs(2.0)))
            );
        }
    }

    #[test]
    fn gradient_reaches_prior_through_selection() {
        let (c, store) = setup();
        let mut tape = Tape::new();
        let vars = c.forward(&mut tape, &store).unwrap();
        let values = vars.values(&tape);
        let (_, noise) = add_noise(&values, 0.5, &mut ChaCha8Rng::seed_from_u64(2));
        let noisy = vars.add_noise(&mut tape, 0.5, &noise).unwrap();
        let index = extract_indices(&noisy.values(&tape));
        let sel = noisy.select(&mut tape, &index).unwrap();
        let mut loss = sel[0][0];
        for &v in sel.iter().flatten().skip(1) {
            loss = tape.mul(loss, v).unwrap();
        }
        let g = tape.backward(loss).unwrap();
        let gz = g.get(Controller::prior_name()).unwrap();
        assert!(gz.data().iter().any(|&x| x != 0.0));
        assert!(g
            .get("controller/mlp/w1")
            .unwrap()
            .data()
            .iter()
            .any(|&x| x != 0.0));
    }
}
