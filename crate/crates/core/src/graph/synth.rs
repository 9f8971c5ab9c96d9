use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::Tensor;

use super::{DatasetSpec, Graph, Labels, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SbmParams {
    pub num_classes: usize,
    pub nodes_per_class: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
}

/// Stochastic block model. Node `i` belongs to block `i / nodes_per_class`;
/// its features are the one-hot block centroid plus Gaussian noise.
pub fn generate_sbm(p: &SbmParams) -> Result<(Graph, DatasetSpec)> {
    if !(0.0 <= p.p_out && p.p_out < p.p_in && p.p_in <= 1.0) {
        return Err(Error::Invalid(format!(
            "sbm: need 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
            p.p_in, p.p_out
        )));
    }
    if p.feature_dim < p.num_classes {
        return Err(Error::Invalid(format!(
            "sbm: feature_dim {} < num_classes {}",
            p.feature_dim, p.num_classes
        )));
    }
    if p.feature_noise < 0.0 {
        return Err(Error::Invalid("sbm: negative feature_noise".into()));
    }
    let n = p.num_classes * p.nodes_per_class;
    let labels: Vec<usize> = (0..n).map(|i| i / p.nodes_per_class).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let mut features = vec![0.0; n * p.feature_dim];
    let noise = Normal::new(0.0, p.feature_noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    for i in 0..n {
        let row = &mut features[i * p.feature_dim..(i + 1) * p.feature_dim];
        row[labels[i]] = 1.0;
        if p.feature_noise > 0.0 {
            for x in row.iter_mut() {
                *x += noise.sample(&mut rng);
            }
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let prob = if labels[i] == labels[j] {
                p.p_in
            } else {
                p.p_out
            };
            if rng.random::<f64>() < prob {
                edges.push((i, j));
            }
        }
    }
    let spec = DatasetSpec {
        task: TaskKind::Single,
        num_classes: p.num_classes,
        feature_dim: p.feature_dim,
    };
    let graph = Graph::build(
        spec,
        Tensor::matrix(n, p.feature_dim, features)?,
        &edges,
        Labels::Single(labels),
        None,
    )?;
    Ok((graph, spec))
}

pub const CHAIN_FEATURE_DIM: usize = 8;

/// Two-class probe whose labels depend only on each node's own features.
///
/// Feature 0 carries the class sign with magnitude in `[0.5, 1.5)`; the other
/// features are uniform noise. Nodes form a path plus `num_blocks_needed`
/// random chords per node on average, all label-independent, so message
/// passing only mixes in unrelated signal.
pub fn generate_chain_task(
    length: usize,
    num_blocks_needed: usize,
    seed: u64,
) -> Result<(Graph, DatasetSpec)> {
    if length < 20 {
        return Err(Error::Invalid(format!("chain task: length {length} < 20")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..length).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    let d = CHAIN_FEATURE_DIM;
    let mut features = vec![0.0; length * d];
    for i in 0..length {
        let sign = if labels[i] == 1 { 1.0 } else { -1.0 };
        features[i * d] = sign * rng.random_range(0.5..1.5);
        for k in 1..d {
            features[i * d + k] = rng.random_range(-1.0..1.0);
        }
    }
    let mut pairs = std::collections::BTreeSet::new();
    for i in 1..length {
        pairs.insert((i - 1, i));
    }
    let chords = length * num_blocks_needed / 2;
    let mut attempts = 0;
    while pairs.len() < length - 1 + chords && attempts < 100 * (chords + 1) {
        attempts += 1;
        let a = rng.random_range(0..length);
        let b = rng.random_range(0..length);
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let edges: Vec<_> = pairs.into_iter().collect();
    let spec = DatasetSpec {
        task: TaskKind::Single,
        num_classes: 2,
        feature_dim: d,
    };
    let graph = Graph::build(
        spec,
        Tensor::matrix(length, d, features)?,
        &edges,
        Labels::Single(labels),
        None,
    )?;
    Ok((graph, spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sbm(num_classes: usize, per: usize, p_in: f64, p_out: f64, noise: f64, seed: u64) -> Graph {
        generate_sbm(&SbmParams {
            num_classes,
            nodes_per_class: per,
            p_in,
            p_out,
            feature_dim: num_classes.max(4),
            feature_noise: noise,
            seed,
        })
        .unwrap()
        .0
    }

    #[test]
    fn degenerate_probabilities_give_cliques() {
        let g = sbm(2, 3, 1.0, 0.0, 0.1, 1);
        assert_eq!(
            g.undirected_pairs(),
            &[(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)]
        );
    }

    #[test]
    fn noiseless_features_are_centroids() {
        let g = sbm(3, 4, 0.5, 0.1, 0.0, 2);
        let Labels::Single(labels) = g.labels() else {
            panic!()
        };
        // nearest one-hot centroid
        let correct = (0..g.num_nodes())
            .filter(|&i| {
                let row = g.features().row(i);
                crate::tensor::argmax(row) == labels[i] && row.iter().sum::<f64>() == 1.0
            })
            .count();
        assert_eq!(correct, g.num_nodes());
    }

    #[test]
    fn within_block_edge_count_matches_binomial() {
        let g = sbm(4, 50, 0.5, 0.01, 0.1, 3);
        let Labels::Single(labels) = g.labels() else {
            panic!()
        };
        let within = g
            .undirected_pairs()
            .iter()
            .filter(|(u, v)| labels[*u] == labels[*v])
            .count() as f64;
        let trials = 4.0 * (50.0 * 49.0 / 2.0);
        let mean = 0.5 * trials;
        let sd = (trials * 0.25f64).sqrt();
        assert_eq!(mean, 2450.0);
        assert!((within - mean).abs() < 5.0 * sd, "{within}");
    }

    #[test]
    fn sbm_rejects_bad_params() {
        let base = SbmParams {
            num_classes: 3,
            nodes_per_class: 5,
            p_in: 0.5,
            p_out: 0.1,
            feature_dim: 3,
            feature_noise: 0.1,
            seed: 0,
        };
        assert!(generate_sbm(&SbmParams {
            feature_dim: 2,
            ..base
        })
        .is_err());
        assert!(generate_sbm(&SbmParams { p_out: 0.6, ..base }).is_err());
    }

    #[test]
    fn sbm_components_stay_within_class_when_p_out_zero() {
        let g = sbm(3, 10, 0.3, 0.0, 0.5, 9);
        let Labels::Single(labels) = g.labels() else {
            panic!()
        };
        for &(u, v) in g.undirected_pairs() {
            assert_eq!(labels[u], labels[v]);
        }
    }

    #[test]
    fn chain_task_is_linearly_separable() {
        let (g, _) = generate_chain_task(60, 3, 4).unwrap();
        let Labels::Single(labels) = g.labels() else {
            panic!()
        };
        for (i, &label) in labels.iter().enumerate() {
            let pred = usize::from(g.features().get(i, 0) > 0.0);
            assert_eq!(pred, label);
        }
    }

    #[test]
    fn chain_task_shuffled_labels_defeat_probe() {
        let (g, _) = generate_chain_task(400, 2, 5).unwrap();
        let Labels::Single(labels) = g.labels() else {
            panic!()
        };
        let mut shuffled = labels.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(99));
        let hits = (0..g.num_nodes())
            .filter(|&i| usize::from(g.features().get(i, 0) > 0.0) == shuffled[i])
            .count() as f64;
        let acc = hits / 400.0;
        // chance level with 5 binomial standard deviations of slack
        assert!((acc - 0.5).abs() < 5.0 * (0.25f64 / 400.0).sqrt(), "{acc}");
    }

    #[test]
    fn chain_task_deterministic() {
        let a = generate_chain_task(30, 2, 7).unwrap().0.to_json().unwrap();
        let b = generate_chain_task(30, 2, 7).unwrap().0.to_json().unwrap();
        assert_eq!(a, b);
        assert!(generate_chain_task(19, 2, 7).is_err());
    }
}
