#![allow(dead_code)]

use pvt_core::nn::{grad_check, straddles_kink, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub mod grad_suite;
pub mod losses;
pub mod oracle;
pub mod probe;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero, for inputs that feed a relu directly.
pub fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Gradient check of `loss = <r, f(x; params)>` with respect to the input
/// and every trainable parameter in `ps` (frozen ones are skipped).
/// `run` performs the forward pass
/// and, when given an upstream gradient, the backward pass (returning dx).
pub fn check_layer<F>(ps: &ParamStore<f64>, x: &Tensor<f64>, seed: u64, run: F) -> f64
where
    F: Fn(&mut ParamStore<f64>, &Tensor<f64>, Option<&Tensor<f64>>) -> (Tensor<f64>, Option<Tensor<f64>>),
{
    let (op, inputs) = projected_loss(ps, x, seed, &run);
    grad_check(op, &inputs, FD_EPS).max_rel_error
}

/// [`check_layer`] for networks with relu kinks: the input is redrawn
/// (from `draw`, at most 8 times) until no difference stencil crosses a
/// kink, as judged from function values alone by `straddles_kink`.
pub fn check_network<F>(
    ps: &ParamStore<f64>,
    seed: u64,
    mut draw: impl FnMut() -> Tensor<f64>,
    run: F,
) -> f64
where
    F: Fn(&mut ParamStore<f64>, &Tensor<f64>, Option<&Tensor<f64>>) -> (Tensor<f64>, Option<Tensor<f64>>),
{
    for _ in 0..8 {
        let x = draw();
        let (op, inputs) = projected_loss(ps, &x, seed, &run);
        if !straddles_kink(&op, &inputs, FD_EPS) {
            return grad_check(op, &inputs, FD_EPS).max_rel_error;
        }
        eprintln!("seed {seed}: input draw puts a relu kink inside the stencil, redrawing");
    }
    panic!("seed {seed}: every input draw put a relu kink inside the stencil");
}

/// The scalar `<r, f(x; params)>` with a fixed random `r`, as a
/// `grad_check` operation over the input and every trainable parameter
/// (frozen ones are skipped). `run` performs the forward pass and, when
/// given an upstream gradient, the backward pass (returning dx).
#[allow(clippy::type_complexity)]
fn projected_loss<'a, F>(
    ps: &'a ParamStore<f64>,
    x: &Tensor<f64>,
    seed: u64,
    run: &'a F,
) -> (impl Fn(&[Tensor<f64>], bool) -> (f64, Vec<Tensor<f64>>) + 'a, Vec<Tensor<f64>>)
where
    F: Fn(&mut ParamStore<f64>, &Tensor<f64>, Option<&Tensor<f64>>) -> (Tensor<f64>, Option<Tensor<f64>>),
{
    let ids: Vec<ParamId> = ps
        .ids()
        .zip(ps.iter())
        .filter(|(_, (_, p))| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut probe = ps.clone();
    let (y0, _) = run(&mut probe, x, None);
    let r = random_tensor(y0.shape(), &mut rng(seed ^ 0x5eed));
    let mut inputs = vec![x.clone()];
    inputs.extend(ids.iter().map(|&id| ps.value(id).clone()));
    let op = move |inp: &[Tensor<f64>], want: bool| {
        let mut local = ps.clone();
        for (&id, v) in ids.iter().zip(&inp[1..]) {
            *local.value_mut(id) = v.clone();
        }
        local.zero_grad();
        let (y, dx) = run(&mut local, &inp[0], want.then_some(&r));
        let loss = y.dot(&r);
        if !want {
            return (loss, Vec::new());
        }
        let mut grads = vec![dx.expect("backward ran")];
        grads.extend(ids.iter().map(|&id| local.grad(id).clone()));
        (loss, grads)
    };
    (op, inputs)
}

/// Gives every BN running statistic a non-trivial value so eval-mode
/// paths exercise the affine fold.
pub fn randomize_buffers<T: pvt_core::nn::Real>(ps: &mut ParamStore<T>, rng: &mut impl Rng) {
    let names: Vec<(String, Vec<usize>)> = ps
        .buffers()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    for (name, shape) in names {
        let is_var = name.ends_with("var");
        let t = Tensor::from_fn(&shape, |_| {
            let v: f64 = if is_var {
                rng.gen_range(0.5..2.0)
            } else {
                rng.gen_range(-0.5..0.5)
            };
            T::c(v)
        });
        ps.assign(&name, t).unwrap();
    }
}

pub fn tiny_mdtc() -> pvt_core::mdtc::MdtcConfig {
    pvt_core::mdtc::MdtcConfig {
        input_dim: 5,
        channels: 4,
        stacks: 2,
        dilations: vec![1, 2],
        kernel: 3,
        se_reduction: 2,
        ..Default::default()
    }
}

/// Gradient check of the whole MDTC network in train mode. The input
/// projection bias feeds a batch-statistics BN, so its gradient is
/// identically zero and it is checked separately by
/// [`pre_bn_bias_grad`].
pub fn mdtc_grad_error(cfg: &pvt_core::mdtc::MdtcConfig, seed: u64, masked: bool) -> f64 {
    use pvt_core::mdtc::MdtcModel;
    let mut model = MdtcModel::<f64>::build(cfg, seed).unwrap();
    model.params.set_trainable(|n| n != "input.proj.bias");
    let mut r = rng(seed + 100);
    let (b, t) = (2, 9);
    let draw = || random_tensor(&[b, cfg.input_dim, t], &mut r);
    let mask: Option<Vec<f64>> =
        masked.then(|| (0..b * t).map(|i| if i >= b * t - 3 { 0.0 } else { 1.0 }).collect());
    let ps0 = model.params.clone();
    check_network(&ps0, seed, draw, |ps, x, dy| {
        let mut m = model.cast::<f64>();
        std::mem::swap(&mut m.params, ps);
        let (z, cache) = m.forward_train(x, mask.as_deref()).unwrap();
        let dx = dy.map(|d| m.backward(&cache, d, mask.as_deref()));
        std::mem::swap(&mut m.params, ps);
        (z, dx)
    })
}

/// Largest |gradient| reaching the input projection bias in train mode.
pub fn pre_bn_bias_grad(cfg: &pvt_core::mdtc::MdtcConfig, seed: u64) -> f64 {
    use pvt_core::mdtc::MdtcModel;
    let mut m = MdtcModel::<f64>::build(cfg, seed).unwrap();
    let mut r = rng(seed + 200);
    let x = random_tensor(&[2, cfg.input_dim, 9], &mut r);
    let (z, cache) = m.forward_train(&x, None).unwrap();
    let dz = random_tensor(z.shape(), &mut r);
    m.backward(&cache, &dz, None);
    let id = m.params.id("input.proj.bias").unwrap();
    m.params.grad(id).data().iter().fold(0.0, |a, &g| a.max(g.abs()))
}

pub fn tiny_sv() -> pvt_core::sv::SvConfig {
    use pvt_core::sv::{SvConfig, StageSpec};
    SvConfig {
        input_dim: 8,
        stem_channels: 2,
        stages: vec![StageSpec::new(2, 1, 1), StageSpec::new(4, 1, 2)],
        se_reduction: 2,
        attention_dim: 3,
        embedding_dim: 4,
        n_classes: 3,
        ..SvConfig::tiny()
    }
}

/// Embedding-level gradient check of the whole SV network in train mode
/// (extractor, pooling, projection, normalization).
pub fn sv_embedding_grad_error(cfg: &pvt_core::sv::SvConfig, seed: u64) -> f64 {
    use pvt_core::sv::{SvModel, TrainScope};
    let model = SvModel::<f64>::build(cfg, seed).unwrap();
    let mut r = rng(seed + 300);
    let draw = || random_tensor(&[3, 1, cfg.input_dim, 6], &mut r);
    check_network(&model.params, seed, draw, |ps, x, dy| {
        let mut m = model.clone();
        std::mem::swap(&mut m.params, ps);
        let (e, cache) = m.forward_train(x, TrainScope::Full).unwrap();
        let dx = dy.map(|d| m.backward(&cache, d.data(), None).unwrap());
        std::mem::swap(&mut m.params, ps);
        (e, dx)
    })
}

/// Gradient check of ArcFace + lambda * SupCon through the whole SV
/// network, class weights included.
pub fn sv_loss_grad_error(cfg: &pvt_core::sv::SvConfig, seed: u64) -> f64 {
    use pvt_core::sv::{arcface_loss, supcon_loss, SvModel, TrainScope};
    let model = SvModel::<f64>::build(cfg, seed).unwrap();
    let mut r = rng(seed + 400);
    let draw = || random_tensor(&[4, 1, cfg.input_dim, 6], &mut r);
    let labels = [0usize, 1, 0, 2];
    let e = cfg.embedding_dim;
    check_network(&model.params, seed, draw, |ps, x, dy| {
        let mut m = model.clone();
        std::mem::swap(&mut m.params, ps);
        let (emb, cache) = m.forward_train(x, TrainScope::Full).unwrap();
        let w = m.class_weights().0;
        let arc = arcface_loss(emb.data(), &labels, &w, e, cfg.arcface.scale, cfg.arcface.margin).unwrap();
        let sup = supcon_loss(emb.data(), &labels, e, cfg.supcon.temperature).unwrap();
        let loss = arc.loss + cfg.supcon.weight * sup.loss;
        let dx = dy.map(|d| {
            let g = d.data()[0];
            let d_emb: Vec<f64> = arc
                .d_emb
                .iter()
                .zip(&sup.d_emb)
                .map(|(a, s)| g * (a + cfg.supcon.weight * s))
                .collect();
            let d_class: Vec<f64> = arc.d_weight.iter().map(|v| g * v).collect();
            m.backward(&cache, &d_emb, Some(&d_class)).unwrap()
        });
        std::mem::swap(&mut m.params, ps);
        (Tensor::new(&[1], vec![loss]).unwrap(), dx)
    })
}

/// Gradient check of attentive pooling (ASP or SAP) on its own.
pub fn pooling_grad_error(kind: pvt_core::sv::PoolingKind, seed: u64) -> f64 {
    use pvt_core::sv::AttentivePooling;
    let mut r = rng(seed);
    let mut ps = ParamStore::new();
    let pool = AttentivePooling::new(&mut ps, "pool", kind, 4, 3, 1e-5, &mut r);
    let x = random_tensor(&[2, 4, 7], &mut r);
    check_layer(&ps, &x, seed, |ps, x, dy| {
        let (y, cache) = pool.forward_cached(ps, x).unwrap();
        let dx = dy.map(|d| pool.backward(ps, x, &cache, d));
        (y, dx)
    })
}

/// Random unit-norm rows.
pub fn unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for row in v.chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Largest relative error of the ArcFace gradients (embeddings and class
/// rows) against central differences.
pub fn arcface_grad_error(seed: u64, scale: f64, margin: f64) -> f64 {
    use pvt_core::sv::arcface_loss;
    let mut r = rng(seed);
    let (n, c, d) = (5, 4, 3);
    let emb = Tensor::new(&[n, d], unit_rows(n, d, &mut r)).unwrap();
    let w = Tensor::new(&[c, d], unit_rows(c, d, &mut r)).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    grad_check(
        |inp, _| {
            let l = arcface_loss(inp[0].data(), &labels, inp[1].data(), d, scale, margin).unwrap();
            (
                l.loss,
                vec![
                    Tensor::new(&[n, d], l.d_emb).unwrap(),
                    Tensor::new(&[c, d], l.d_weight).unwrap(),
                ],
            )
        },
        &[emb, w],
        FD_EPS,
    )
    .max_rel_error
}

pub fn supcon_grad_error(seed: u64, temperature: f64) -> f64 {
    use pvt_core::sv::supcon_loss;
    let mut r = rng(seed);
    let (n, d) = (6, 3);
    let emb = Tensor::new(&[n, d], unit_rows(n, d, &mut r)).unwrap();
    let labels = [0usize, 0, 1, 1, 1, 2];
    grad_check(
        |inp, _| {
            let l = supcon_loss(inp[0].data(), &labels, d, temperature).unwrap();
            (l.loss, vec![Tensor::new(&[n, d], l.d_emb).unwrap()])
        },
        &[emb],
        FD_EPS,
    )
    .max_rel_error
}
