//! Every finite-difference check in one place, as `(name, max relative
//! error)` pairs, so the per-layer tests and the acceptance run share
//! the same cases.

use super::*;
use pvt_core::nn::ops;
use pvt_core::nn::{
    BatchNorm, Conv2d, Dense, DepthwiseConv1d, ParamStore, Pointwise, Se2d, SeTemporal, Tensor,
};
use pvt_core::sv::PoolingKind;

pub type Check = (String, f64);

pub fn layer_errors(seed: u64) -> Vec<Check> {
    let mut out: Vec<Check> = Vec::new();
    let mut push = |name: &str, err: f64| out.push((name.to_string(), err));

    for causal in [true, false] {
        let mut r = rng(seed);
        let mut ps = ParamStore::new();
        let layer = DepthwiseConv1d::new(&mut ps, "dw", 3, 5, 2, causal, &mut r);
        let x = random_tensor(&[2, 3, 13], &mut r);
        let err = check_layer(&ps, &x, seed, |ps, x, dy| {
            (layer.forward(ps, x).unwrap(), dy.map(|d| layer.backward(ps, x, d)))
        });
        push(if causal { "depthwise causal" } else { "depthwise centered" }, err);
    }

    let mut r = rng(seed);
    let mut ps = ParamStore::new();
    let layer = Pointwise::new(&mut ps, "pw", 4, 3, true, &mut r);
    let x = random_tensor(&[2, 4, 7], &mut r);
    push(
        "pointwise",
        check_layer(&ps, &x, seed, |ps, x, dy| {
            (layer.forward(ps, x).unwrap(), dy.map(|d| layer.backward(ps, x, d)))
        }),
    );

    let mut r = rng(seed);
    let mut ps = ParamStore::new();
    let layer = Dense::new(&mut ps, "fc", 5, 3, &mut r);
    let x = random_tensor(&[4, 5], &mut r);
    push(
        "dense",
        check_layer(&ps, &x, seed, |ps, x, dy| {
            (layer.forward(ps, x).unwrap(), dy.map(|d| layer.backward(ps, x, d)))
        }),
    );

    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let mut r = rng(seed);
        let mut ps = ParamStore::new();
        let layer = Conv2d::new(&mut ps, "conv", 2, 3, 3, stride, pad, &mut r);
        let x = random_tensor(&[2, 2, 6, 7], &mut r);
        let err = check_layer(&ps, &x, seed, |ps, x, dy| {
            (layer.forward(ps, x).unwrap(), dy.map(|d| layer.backward(ps, x, d)))
        });
        push(&format!("conv2d stride {stride} pad {pad}"), err);
    }

    let mut r = rng(seed);
    let mut ps = ParamStore::new();
    let bn = BatchNorm::new(&mut ps, "bn", 3, 1e-5, 0.1);
    let x = random_tensor(&[2, 3, 6], &mut r);
    push(
        "batchnorm train",
        check_layer(&ps, &x, seed, |ps, x, dy| {
            let (y, cache) = bn.forward_train(ps, x, None).unwrap();
            (y, dy.map(|d| bn.backward(ps, &cache, d, None)))
        }),
    );
    // the last two frames of the second item are padding
    let mask: Vec<f64> = (0..12).map(|i| if i >= 10 { 0.0 } else { 1.0 }).collect();
    push(
        "batchnorm masked",
        check_layer(&ps, &x, seed, |ps, x, dy| {
            let (y, cache) = bn.forward_train(ps, x, Some(&mask)).unwrap();
            (y, dy.map(|d| bn.backward(ps, &cache, d, Some(&mask))))
        }),
    );
    let x4 = random_tensor(&[2, 3, 2, 3], &mut r);
    push(
        "batchnorm 2d",
        check_layer(&ps, &x4, seed, |ps, x, dy| {
            let (y, cache) = bn.forward_train(ps, x, None).unwrap();
            (y, dy.map(|d| bn.backward(ps, &cache, d, None)))
        }),
    );
    push(
        "batchnorm eval",
        check_layer(&ps, &x, seed, |ps, x, dy| {
            (bn.forward(ps, x).unwrap(), dy.map(|d| bn.backward_eval(ps, x, d)))
        }),
    );

    let mut r = rng(seed);
    let ps = ParamStore::new();
    let x = away_from_zero(&[3, 5], &mut r);
    push(
        "relu",
        check_layer(&ps, &x, seed, |_, x, dy| {
            let y = ops::relu(x);
            let dx = dy.map(|d| ops::relu_backward(&y, d));
            (y, dx)
        }),
    );
    push(
        "sigmoid",
        check_layer(&ps, &x, seed, |_, x, dy| {
            let y = ops::sigmoid_t(x);
            let dx = dy.map(|d| ops::sigmoid_backward(&y, d));
            (y, dx)
        }),
    );
    push(
        "tanh",
        check_layer(&ps, &x, seed, |_, x, dy| {
            let y = ops::tanh_t(x);
            let dx = dy.map(|d| ops::tanh_backward(&y, d));
            (y, dx)
        }),
    );
    push(
        "softmax",
        check_layer(&ps, &x, seed, |_, x, dy| {
            let y = ops::softmax(x);
            let dx = dy.map(|d| {
                Tensor::new(x.shape(), ops::softmax_rows_backward(y.data(), d.data(), 5)).unwrap()
            });
            (y, dx)
        }),
    );
    push(
        "l2 normalize",
        check_layer(&ps, &x, seed, |_, x, dy| {
            let (y, n) = ops::l2_normalize_rows(x.data(), 5, 1e-12);
            let dx = dy.map(|d| {
                Tensor::new(x.shape(), ops::l2_normalize_rows_backward(&y, &n, d.data(), 5, 1e-12))
                    .unwrap()
            });
            (Tensor::new(x.shape(), y).unwrap(), dx)
        }),
    );

    for window in [1, 4] {
        let mut r = rng(seed);
        let mut ps = ParamStore::new();
        let se = SeTemporal::new(&mut ps, "se", 4, 2, window, &mut r).unwrap();
        let x = random_tensor(&[2, 4, 9], &mut r);
        let err = check_layer(&ps, &x, seed, |ps, x, dy| {
            let (y, cache) = se.forward_cached(ps, x).unwrap();
            (y, dy.map(|d| se.backward(ps, x, &cache, d)))
        });
        push(&format!("temporal se window {window}"), err);
    }
    let mut r = rng(seed);
    let mut ps = ParamStore::new();
    let se = Se2d::new(&mut ps, "se", 4, 2, &mut r).unwrap();
    let x = random_tensor(&[2, 4, 3, 5], &mut r);
    push(
        "2d se",
        check_layer(&ps, &x, seed, |ps, x, dy| {
            let (y, cache) = se.forward_cached(ps, x).unwrap();
            (y, dy.map(|d| se.backward(ps, x, &cache, d)))
        }),
    );

    for kind in [PoolingKind::Asp, PoolingKind::Sap] {
        push(&format!("{kind:?} pooling"), pooling_grad_error(kind, seed));
    }
    for (s, m) in [(1.0, 0.0), (32.0, 0.2), (4.0, 0.5)] {
        push(&format!("arcface s={s} m={m}"), arcface_grad_error(seed, s, m));
    }
    for tau in [0.07, 0.5] {
        push(&format!("supcon tau={tau}"), supcon_grad_error(seed, tau));
    }
    out
}

pub fn network_errors(seed: u64) -> Vec<Check> {
    let mut sap = tiny_sv();
    sap.pooling = PoolingKind::Sap;
    vec![
        ("mdtc".into(), mdtc_grad_error(&tiny_mdtc(), seed, false)),
        ("mdtc masked".into(), mdtc_grad_error(&tiny_mdtc(), seed, true)),
        ("sv embedding".into(), sv_embedding_grad_error(&tiny_sv(), seed)),
        ("sv sap embedding".into(), sv_embedding_grad_error(&sap, seed)),
        ("sv losses".into(), sv_loss_grad_error(&tiny_sv(), seed)),
    ]
}
