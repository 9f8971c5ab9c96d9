#![allow(dead_code)]

use gnasforge::graph::{generate_sbm, random_split, Graph, SbmParams, SplitRatios};
use gnasforge::micro::{Activation, Aggregator, AttentionKind, Candidates};
use gnasforge::search::SearchConfig;

pub fn sbm(classes: usize, per_class: usize, noise: f64, seed: u64) -> Graph {
    let (g, _) = generate_sbm(&SbmParams {
        num_classes: classes,
        nodes_per_class: per_class,
        p_in: 0.3,
        p_out: 0.02,
        feature_dim: classes.max(4),
        feature_noise: noise,
        seed,
    })
    .unwrap();
    random_split(g, SplitRatios::default(), seed).unwrap()
}

pub fn small_candidates() -> Candidates {
    Candidates {
        expansions: vec![1, 2],
        attentions: vec![AttentionKind::Const, AttentionKind::Gcn, AttentionKind::Gat],
        heads: vec![1, 2],
        aggregators: vec![Aggregator::Sum, Aggregator::Mean],
        activations: vec![Activation::Relu, Activation::Tanh],
    }
}

pub fn small_config() -> SearchConfig {
    SearchConfig {
        num_layers: 2,
        hidden_grid: vec![16],
        max_iter: 4,
        train_step: 2,
        candidates: small_candidates(),
        controller_dim: 16,
        ..Default::default()
    }
}
