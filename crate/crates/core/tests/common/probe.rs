//! Empirical receptive-field probe for the keyword model.

use super::*;
use pvt_core::mdtc::{MdtcConfig, MdtcModel};
use pvt_core::nn::Tensor;

/// A model in eval mode with non-trivial batch-norm statistics.
pub fn eval_model(cfg: &MdtcConfig, seed: u64) -> MdtcModel<f64> {
    let mut m = MdtcModel::<f64>::build(cfg, seed).unwrap();
    randomize_buffers(&mut m.params, &mut rng(seed + 1));
    m
}

/// Smallest offset `k` such that perturbing frame `t - k` leaves the
/// output at `t` unchanged, probing `k` in `0..limit`. Several random
/// perturbations are tried so a dead relu path cannot hide a dependency.
pub fn first_blind_offset(m: &MdtcModel<f64>, t_len: usize, limit: usize) -> usize {
    let d = m.config().input_dim;
    let mut r = rng(42);
    let t = t_len - 1;
    let bases: Vec<(Tensor<f64>, f64)> = (0..32)
        .map(|_| {
            let x = random_tensor(&[1, d, t_len], &mut r);
            let z = m.logits(&x).unwrap().data()[t];
            (x, z)
        })
        .collect();
    for k in 0..limit {
        let reaches = bases.iter().any(|(x, z)| {
            let mut y = x.clone();
            for c in 0..d {
                y.data_mut()[c * t_len + t - k] += r.gen_range(-4.0..4.0);
            }
            m.logits(&y).unwrap().data()[t] != *z
        });
        if !reaches {
            return k;
        }
    }
    limit
}
