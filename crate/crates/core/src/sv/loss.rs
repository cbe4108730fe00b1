//! Speaker-classification losses on L2-normalized embeddings.

use crate::error::{Error, Result};

/// Cosines are clamped to this magnitude before `acos`.
const COS_LIMIT: f64 = 1.0 - 1e-7;

/// Loss value with gradients for every input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// Gradient w.r.t. the (already normalized) embeddings, `[N, E]`.
    pub d_emb: Vec<f64>,
    /// Gradient w.r.t. the normalized class rows, `[C, E]` (ArcFace only).
    pub d_weight: Vec<f64>,
    /// Fraction of items whose nearest class is the label (ArcFace only).
    pub accuracy: f64,
}

/// Additive angular margin softmax. `emb` is `[N, E]`, `weight` is
/// `[C, E]`, both row-normalized. Returns the mean cross-entropy over
/// logits `s * cos(theta_j + m * [j == y])`, with theta clamped to
/// `[0, pi - m]` before the margin is added.
pub fn arcface_loss(
    emb: &[f64],
    labels: &[usize],
    weight: &[f64],
    dim: usize,
    scale: f64,
    margin: f64,
) -> Result<LossGrad> {
    let n = labels.len();
    let c = weight.len() / dim;
    if n == 0 || emb.len() != n * dim {
        return Err(Error::Shape(format!("{} embeddings of dim {dim} for {n} labels", emb.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} outside {c} classes")));
    }
    let theta_max = std::f64::consts::PI - margin;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut d_emb = vec![0.0; n * dim];
    let mut d_weight = vec![0.0; c * dim];
    for i in 0..n {
        let e = &emb[i * dim..(i + 1) * dim];
        let y = labels[i];
        let cos: Vec<f64> = (0..c)
            .map(|j| e.iter().zip(&weight[j * dim..(j + 1) * dim]).map(|(a, b)| a * b).sum())
            .collect();
        if (0..c).all(|j| cos[j] <= cos[y]) {
            correct += 1;
        }
        let cy = cos[y].clamp(-COS_LIMIT, COS_LIMIT);
        let theta = cy.acos();
        let (target, dtarget) = if theta > theta_max {
            (-1.0, 0.0)
        } else if cos[y].abs() >= COS_LIMIT {
            ((theta + margin).cos(), 0.0)
        } else {
            ((theta + margin).cos(), (theta + margin).sin() / theta.sin())
        };
        let logits: Vec<f64> = (0..c)
            .map(|j| scale * if j == y { target } else { cos[j] })
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        // a confident row has z = 1 + tiny; summing the tiny part on its
        // own and taking ln_1p keeps that row's loss accurate
        loss += if logits[y] == mx {
            let rest: f64 = (0..c).filter(|&j| j != y).map(|j| (logits[j] - mx).exp()).sum();
            rest.ln_1p()
        } else {
            mx - logits[y] + z.ln()
        };
        for j in 0..c {
            let p = (logits[j] - mx).exp() / z;
            let dlogit = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
            let dcos = scale * dlogit * if j == y { dtarget } else { 1.0 };
            if dcos == 0.0 {
                continue;
            }
            let wj = &weight[j * dim..(j + 1) * dim];
            for k in 0..dim {
                d_emb[i * dim + k] += dcos * wj[k];
                d_weight[j * dim + k] += dcos * e[k];
            }
        }
    }
    Ok(LossGrad {
        loss: loss / n as f64,
        d_emb,
        d_weight,
        accuracy: correct as f64 / n as f64,
    })
}

/// Supervised contrastive loss with the average over positives taken
/// outside the log. Anchors without a positive are skipped.
pub fn supcon_loss(emb: &[f64], labels: &[usize], dim: usize, temperature: f64) -> Result<LossGrad> {
    let n = labels.len();
    if emb.len() != n * dim {
        return Err(Error::Shape(format!("{} embeddings of dim {dim} for {n} labels", emb.len())));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("supervised contrastive loss needs 2+ items".into()));
    }
    let sim = |i: usize, j: usize| -> f64 {
        emb[i * dim..(i + 1) * dim]
            .iter()
            .zip(&emb[j * dim..(j + 1) * dim])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / temperature
    };
    let anchors: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|p| p != i && labels[p] == labels[i]))
        .collect();
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("no anchor has a positive in the batch".into()));
    }
    let scale = 1.0 / anchors.len() as f64;
    let mut loss = 0.0;
    let mut d_emb = vec![0.0; n * dim];
    for &i in &anchors {
        let s: Vec<f64> = (0..n).map(|a| if a == i { f64::NEG_INFINITY } else { sim(i, a) }).collect();
        let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
        let log_z = mx + z.ln();
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let np = pos.len() as f64;
        loss += pos.iter().map(|&p| log_z - s[p]).sum::<f64>() / np;
        for a in 0..n {
            if a == i {
                continue;
            }
            let q = (s[a] - mx).exp() / z;
            let is_pos = labels[a] == labels[i];
            let g = scale * (q - if is_pos { 1.0 / np } else { 0.0 }) / temperature;
            for k in 0..dim {
                d_emb[i * dim + k] += g * emb[a * dim + k];
                d_emb[a * dim + k] += g * emb[i * dim + k];
            }
        }
    }
    Ok(LossGrad {
        loss: loss * scale,
        d_emb,
        d_weight: Vec::new(),
        accuracy: 0.0,
    })
}

/// `arcface + lambda * supcon`.
pub fn sv_total_loss(arcface: f64, supcon: f64, lambda: f64) -> f64 {
    arcface + lambda * supcon
}
