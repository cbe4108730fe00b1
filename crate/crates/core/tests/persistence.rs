//! Checkpoint round trips and the ways a checkpoint can fail to load.

mod common;

use std::collections::BTreeMap;

use common::*;
use pvt_core::container::{self, Checkpoint, TensorContainer};
use pvt_core::features::FeatureMatrix;
use pvt_core::mdtc::{MdtcConfig, MdtcModel};
use pvt_core::nn::{Optimizer, Tensor};
use pvt_core::sv::{enroll, Embedding, SvConfig, SvModel};
use pvt_core::Error;
use rand::Rng;

fn trained_mdtc(cfg: &MdtcConfig, seed: u64) -> (MdtcModel, Optimizer<f32>) {
    let mut m = MdtcModel::<f32>::build(cfg, seed).unwrap();
    let mut opt = Optimizer::adam(1e-3, &m.params);
    let mut r = rng(seed);
    for _ in 0..2 {
        let x: Tensor<f32> = random_tensor(&[2, cfg.input_dim, 12], &mut r).cast();
        let (z, cache) = m.forward_train(&x, None).unwrap();
        let dz: Tensor<f32> = random_tensor(z.shape(), &mut r).cast();
        m.params.zero_grad();
        m.backward(&cache, &dz, None);
        opt.step(&mut m.params).unwrap();
    }
    (m, opt)
}

fn random_features(n: usize, dim: usize, r: &mut impl Rng) -> FeatureMatrix {
    FeatureMatrix::new((0..n * dim).map(|_| r.gen_range(-2.0..2.0)).collect(), n, dim).unwrap()
}

#[test]
fn mdtc_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kws.pvtk");
    let cfg = MdtcConfig::default();
    let (m, opt) = trained_mdtc(&cfg, 1);
    container::save_mdtc(&path, &m, Some(&opt)).unwrap();
    let back = container::load_mdtc(&path, Some(&cfg)).unwrap();
    let mut r = rng(2);
    for n in [1, 37, 300] {
        let f = random_features(n, 80, &mut r);
        let a = m.forward(&f).unwrap().posteriors;
        let b = back.forward(&f).unwrap().posteriors;
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let restored = Checkpoint::read(&path).unwrap().optimizer(&back.params).unwrap().unwrap();
    assert_eq!(restored.step, opt.step);
    assert_eq!(restored.kind, opt.kind);
    assert_eq!(restored.first, opt.first);
    assert_eq!(restored.second, opt.second);
}

#[test]
fn resumed_training_continues_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kws.pvtk");
    let cfg = tiny_mdtc();
    let (mut a, mut opt_a) = trained_mdtc(&cfg, 3);
    container::save_mdtc(&path, &a, Some(&opt_a)).unwrap();
    let mut b = container::load_mdtc(&path, None).unwrap();
    let mut opt_b = Checkpoint::read(&path).unwrap().optimizer(&b.params).unwrap().unwrap();
    let mut r = rng(4);
    let x: Tensor<f32> = random_tensor(&[2, cfg.input_dim, 10], &mut r).cast();
    let dz: Tensor<f32> = random_tensor(&[2, 10], &mut r).cast();
    for (m, opt) in [(&mut a, &mut opt_a), (&mut b, &mut opt_b)] {
        let (_, cache) = m.forward_train(&x, None).unwrap();
        m.params.zero_grad();
        m.backward(&cache, &dz, None);
        opt.step(&mut m.params).unwrap();
    }
    for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(pa.value, pb.value);
    }
}

#[test]
fn sv_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sv.pvtk");
    let cfg = SvConfig { n_classes: 5, ..SvConfig::tiny() };
    let mut m = SvModel::<f32>::build(&cfg, 6).unwrap();
    randomize_buffers(&mut m.params, &mut rng(6));
    container::save_sv(&path, &m, None).unwrap();
    let back = container::load_sv(&path, Some(&cfg)).unwrap();
    assert_eq!(back.n_classes(), 5);
    let mut r = rng(7);
    for n in [3, 50, 200] {
        let f = random_features(n, cfg.input_dim, &mut r);
        let a = m.embed_utterance(&f).unwrap().vector;
        let b = back.embed_utterance(&f).unwrap().vector;
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn profiles_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("profiles.pvtk");
    let mut profiles = BTreeMap::new();
    for (spk, v) in [("alice", vec![0.6, 0.8, 0.0]), ("bob", vec![0.0, -1.0, 0.0])] {
        profiles.insert(spk.to_string(), enroll(spk, &[Embedding::from_raw(v)]).unwrap());
    }
    container::save_profiles(&path, &profiles).unwrap();
    assert_eq!(container::load_profiles(&path).unwrap(), profiles);
}

#[test]
fn unknown_tensors_are_reported_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kws.pvtk");
    let m = MdtcModel::<f32>::build(&tiny_mdtc(), 0).unwrap();
    let mut c = container::checkpoint_container(container::KWS_KIND, m.config(), &m.params, None).unwrap();
    c.insert("param/leftover.weight", Tensor::zeros(&[2])).unwrap();
    c.write(&path).unwrap();
    let mut fresh = MdtcModel::<f32>::build(&tiny_mdtc(), 9).unwrap();
    let extra = Checkpoint::read(&path).unwrap().restore_params(&mut fresh.params).unwrap();
    assert_eq!(extra, vec!["param/leftover.weight".to_string()]);
    for ((_, a), (_, b)) in m.params.iter().zip(fresh.params.iter()) {
        assert_eq!(a.value, b.value);
    }
}

/// Rewrites the checkpoint at `path` with `edit` applied to its tensors.
fn tamper(path: &std::path::Path, edit: impl Fn(&str, &Tensor<f32>) -> Option<Tensor<f32>>) {
    let old = TensorContainer::read(path).unwrap();
    let mut c = TensorContainer::new();
    c.attributes = old.attributes.clone();
    for (name, t) in old.iter() {
        if let Some(t) = edit(name, t) {
            c.insert(name, t).unwrap();
        }
    }
    c.write(path).unwrap();
}

#[test]
fn missing_or_misshapen_tensors_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kws.pvtk");
    let m = MdtcModel::<f32>::build(&tiny_mdtc(), 0).unwrap();
    let target = m.params.iter().next().unwrap().0.to_string();
    let key = format!("param/{target}");

    container::save_mdtc(&path, &m, None).unwrap();
    tamper(&path, |n, t| (n != key).then(|| t.clone()));
    let err = container::load_mdtc(&path, None).unwrap_err();
    assert!(matches!(err, Error::Container(_)) && err.to_string().contains(&target), "{err}");

    container::save_mdtc(&path, &m, None).unwrap();
    tamper(&path, |n, t| Some(if n == key { Tensor::zeros(&[t.len() + 1]) } else { t.clone() }));
    let err = container::load_mdtc(&path, None).unwrap_err();
    assert!(err.to_string().contains("shape"), "{err}");
}

#[test]
fn mismatched_config_or_kind_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kws.pvtk");
    let m = MdtcModel::<f32>::build(&tiny_mdtc(), 0).unwrap();
    container::save_mdtc(&path, &m, None).unwrap();
    let other = MdtcConfig { channels: 6, ..tiny_mdtc() };
    let err = container::load_mdtc(&path, Some(&other)).unwrap_err();
    let Error::ConfigMismatch { expected, found } = err else {
        panic!("expected a config mismatch, got {err}");
    };
    assert_eq!(expected, container::config_hash(&other).unwrap());
    assert_eq!(found, container::config_hash(&tiny_mdtc()).unwrap());
    assert!(container::load_sv(&path, None).is_err());
}
