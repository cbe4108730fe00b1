//! Direct formula transcriptions of the speaker losses.

pub fn softmax_ce(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    m + z.ln() - logits[y]
}

/// Direct transcription of the L_out formula.
pub fn supcon_oracle(emb: &[f64], labels: &[usize], d: usize, tau: f64) -> f64 {
    let n = labels.len();
    let dot = |i: usize, j: usize| -> f64 { (0..d).map(|k| emb[i * d + k] * emb[j * d + k]).sum() };
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (dot(i, a) / tau).exp()).sum();
        let s: f64 = pos.iter().map(|&p| ((dot(i, p) / tau).exp() / denom).ln()).sum();
        total += -s / pos.len() as f64;
    }
    total / anchors as f64
}
