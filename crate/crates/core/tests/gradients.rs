mod support;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cployo::nnkit::{BatchNorm, Conv, ConvSpec, Ctx, ParamInit, ParamStore, Tape, BN_EPS};
use cployo::verify::{check_block, GRAD_BLOCKS, GRAD_TOL};
use cployo::Tensor;
use support::{naive_batchnorm_train, naive_conv2d};

fn check_seeds(block: &str) {
    for seed in 0..3 {
        let r = check_block(block, seed).unwrap();
        assert!(
            r.max_rel_error < GRAD_TOL,
            "{block} seed {seed}: {:.3e} at {}",
            r.max_rel_error,
            r.worst_tensor
        );
    }
}

macro_rules! grad_tests {
    ($($name:ident),* $(,)?) => {
        $(#[test]
        fn $name() {
            check_seeds(stringify!($name));
        })*
    };
}

grad_tests!(conv, batchnorm, cbam, psa, kan, kan_bottleneck, repvitcamf, c2f, neck, head, loss);

#[test]
fn suite_covers_every_block_quickly() {
    assert_eq!(GRAD_BLOCKS.len(), 11);
    let t = Instant::now();
    for b in GRAD_BLOCKS {
        check_block(b, 7).unwrap();
    }
    assert!(t.elapsed().as_secs() < 100, "one seed of the suite took {:?}", t.elapsed());
}

#[test]
fn unknown_block_is_rejected() {
    assert!(check_block("lstm", 0).is_err());
}

fn forward(store: &ParamStore, x: &Tensor, train: bool, f: impl for<'t> Fn(&Ctx<'t>, cployo::nnkit::Var<'t>) -> cployo::Result<cployo::nnkit::Var<'t>>) -> Tensor {
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store, train);
    let y = f(&cx, tape.constant(x.clone())).unwrap();
    let v = (*y.value()).clone();
    v
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = [
        (ConvSpec::new(3, 5, 3), 9),
        (ConvSpec::new(4, 6, 3).stride(2), 8),
        (ConvSpec::new(4, 4, 5).groups(2), 7),
        (ConvSpec::depthwise(6, 7), 9),
        (ConvSpec::new(2, 3, 1).stride(2), 5),
    ];
    for (i, (spec, size)) in cases.into_iter().enumerate() {
        let mut store = ParamStore::new();
        let conv = Conv::new(&mut ParamInit::new(&mut store, i as u64), "c", spec, None).unwrap();
        let x = Tensor::randn(&[2, spec.in_ch, size, size], 1.0, &mut rng);
        let got = forward(&store, &x, false, |cx, x| conv.forward(cx, x));
        let want = naive_conv2d(
            &x,
            store.get("c.weight").unwrap(),
            Some(store.get("c.bias").unwrap().data()),
            spec.stride,
            spec.padding(),
            spec.groups,
        );
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "case {i}");
    }
}

#[test]
fn batchnorm_train_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut ParamInit::new(&mut store, 0), "bn", 3);
    store.set("bn.weight", Tensor::new(&[3], vec![0.5, 1.5, -2.0]).unwrap()).unwrap();
    store.set("bn.bias", Tensor::new(&[3], vec![0.1, -0.3, 2.0]).unwrap()).unwrap();
    let x = Tensor::randn(&[4, 3, 5, 5], 2.0, &mut rng);
    let got = forward(&store, &x, true, |cx, x| bn.forward(cx, x));
    let want = naive_batchnorm_train(&x, &[0.5, 1.5, -2.0], &[0.1, -0.3, 2.0], BN_EPS);
    assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
}
