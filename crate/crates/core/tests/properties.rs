mod common;

use std::collections::BTreeSet;

use gnasforge::graph::Graph;
use gnasforge::micro::{Activation, Aggregator, AttentionKind, BlockOp};
use gnasforge::search::{NetworkShape, StandaloneNet};
use gnasforge::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn op_strategy() -> impl Strategy<Value = BlockOp> {
    (
        prop::sample::select(vec![1usize, 2]),
        prop::sample::select(AttentionKind::ALL.to_vec()),
        prop::sample::select(vec![1usize, 2, 4]),
        prop::sample::select(Aggregator::ALL.to_vec()),
        prop::sample::select(Activation::ALL.to_vec()),
    )
        .prop_map(
            |(expansion, attention, heads, aggregate, activation)| BlockOp {
                expansion,
                attention,
                heads,
                aggregate,
                activation,
            },
        )
}

fn net_for(g: &Graph, ops: Vec<BlockOp>, shortcut: bool) -> StandaloneNet {
    let shape = NetworkShape::new(g.spec(), vec![8; ops.len()]).unwrap();
    let routing: BTreeSet<_> = if shortcut {
        [(0, 1)].into()
    } else {
        BTreeSet::new()
    };
    StandaloneNet::new(shape, ops, routing).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn relabeling_nodes_permutes_predictions(
        a in op_strategy(),
        b in op_strategy(),
        shortcut in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let g = common::sbm(3, 5, 0.4, seed);
        let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
        let h = g.permute(&perm).unwrap();
        let net = net_for(&g, vec![a, b], shortcut);
        let store = net.init(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (y, z) = (net.predict(&store, &g).unwrap(), net.predict(&store, &h).unwrap());
        for (i, &pi) in perm.iter().enumerate() {
            for (u, v) in y.row(i).iter().zip(z.row(pi)) {
                prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()), "node {i}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn graph_json_round_trip(seed in 0u64..1000, classes in 2usize..5, per_class in 5usize..12) {
        let g = common::sbm(classes, per_class, 0.5, seed);
        let back = Graph::from_json(&g.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(back.to_json().unwrap(), g.to_json().unwrap());
    }

    #[test]
    fn backward_is_linear_in_the_loss(
        w in prop::collection::vec(-2.0f64..2.0, 12),
        x in prop::collection::vec(-2.0f64..2.0, 15),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::matrix(3, 4, w).unwrap(), true, "w");
        let mut tape = Tape::new();
        let wv = tape.param(&store, "w").unwrap();
        let xv = tape.constant(Tensor::matrix(5, 3, x).unwrap());
        let h = tape.matmul(xv, wv).unwrap();
        let t = tape.tanh(h);
        let f = tape.sum(t);
        let sq = tape.mul(h, h).unwrap();
        let g = tape.sum(sq);
        let fa = tape.scale(f, alpha);
        let gb = tape.scale(g, beta);
        let combo = tape.add(fa, gb).unwrap();
        let (df, dg, dc) = (
            tape.backward(f).unwrap(),
            tape.backward(g).unwrap(),
            tape.backward(combo).unwrap(),
        );
        let (df, dg, dc) = (df.get("w").unwrap(), dg.get("w").unwrap(), dc.get("w").unwrap());
        for k in 0..12 {
            let want = alpha * df.data()[k] + beta * dg.data()[k];
            prop_assert!((dc.data()[k] - want).abs() <= 1e-10 * (1.0 + want.abs()));
        }
    }
}
