mod support;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cployo::attention::{Cbam, Psa};
use cployo::nnkit::{Ctx, ParamInit, ParamStore, Tape};
use cployo::Tensor;
use support::{channel_oracle, dyadic, gates, permute_channels, permute_pixels, sigmoid, spatial_oracle};

#[test]
fn gates_match_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t in 0..100u64 {
        let c = [4, 8, 12][t as usize % 3];
        let r = [2, 4, 4][t as usize % 3];
        let mut store = ParamStore::new();
        let cbam = Cbam::new(&mut ParamInit::new(&mut store, t), "a", c, r).unwrap();
        let (h, w) = (rng.random_range(3..10), rng.random_range(3..10));
        let x = Tensor::randn(&[2, c, h, w], 1.5, &mut rng);
        let g = gates(&cbam, &store, &x);
        let want_c = channel_oracle(&store, &x);
        for (b, row) in want_c.iter().enumerate() {
            for (ch, v) in row.iter().enumerate() {
                assert!((g.channel.at4(b, ch, 0, 0) - v).abs() < 1e-6);
            }
        }
        let want_s = spatial_oracle(&store, &x);
        for (a, b) in g.spatial.data().iter().zip(&want_s) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(g.channel.data().iter().chain(g.spatial.data()).all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn pooling_invariances_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in 0..20u64 {
        let mut store = ParamStore::new();
        let cbam = Cbam::new(&mut ParamInit::new(&mut store, t), "a", 8, 2).unwrap();
        let x = dyadic(&[2, 8, 6, 6], &mut rng);
        let base = gates(&cbam, &store, &x);

        // channel gate ignores where features are
        let mut perm: Vec<usize> = (0..36).collect();
        perm.shuffle(&mut rng);
        let moved = gates(&cbam, &store, &permute_pixels(&x, &perm));
        assert_eq!(moved.channel, base.channel);

        // spatial gate ignores channel order
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut rng);
        let shuffled = gates(&cbam, &store, &permute_channels(&x, &perm));
        assert_eq!(shuffled.spatial, base.spatial);
    }
}

#[test]
fn reduction_must_divide_channels() {
    let mut store = ParamStore::new();
    assert!(Cbam::new(&mut ParamInit::new(&mut store, 0), "a", 6, 4).is_err());
}

#[test]
fn psa_gate_is_per_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let psa = Psa::new(&mut ParamInit::new(&mut store, 0), "p", 3);
    let x = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, false);
    let y = psa.forward(&cx, tape.constant(x.clone())).unwrap();
    let w = store.get("p.gate.weight").unwrap().data();
    let b = store.get("p.gate.bias").unwrap().data()[0];
    for i in 0..4 {
        for j in 0..4 {
            let g = sigmoid(b + (0..3).map(|c| w[c] * x.at4(0, c, i, j)).sum::<f64>());
            for c in 0..3 {
                assert!((y.value().at4(0, c, i, j) - x.at4(0, c, i, j) * g).abs() < 1e-12);
            }
        }
    }
}
