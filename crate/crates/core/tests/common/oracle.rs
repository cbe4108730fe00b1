//! Brute-force reference for the detection metrics: every candidate
//! threshold is evaluated by counting trials directly, and EER crossings
//! are found with exact rational arithmetic.

use pvt_core::eval::{ScoredTrial, Trial, TrialLabel};
use rand::Rng;

/// A random trial set with tied scores, unfired trials and both classes.
pub fn random_trials(rng: &mut impl Rng, max_len: usize) -> Vec<ScoredTrial> {
    let n = if rng.gen_bool(0.5) {
        rng.gen_range(2..=60)
    } else {
        rng.gen_range(2..=max_len)
    };
    let levels = rng.gen_range(2..=400);
    let p_target = rng.gen_range(0.05..0.6);
    let p_fire = rng.gen_range(0.4..1.0);
    let mut out: Vec<ScoredTrial> = (0..n)
        .map(|i| {
            let target = rng.gen_bool(p_target);
            let label = if target { TrialLabel::Target } else { TrialLabel::Nontarget };
            let trial = Trial::new("spk", &format!("u{i}"), label);
            if rng.gen_bool(p_fire) {
                let shift = if target { levels / 3 } else { 0 };
                let q = (rng.gen_range(0..levels) + shift).min(levels);
                ScoredTrial::fired(trial, q as f64 / levels as f64 * 2.0 - 1.0)
            } else {
                ScoredTrial::unfired(trial)
            }
        })
        .collect();
    out[0].trial.label = TrialLabel::Target;
    out[1].trial.label = TrialLabel::Nontarget;
    out
}

/// Error counts at `delta`: (false accepts, false rejects).
fn errors(trials: &[ScoredTrial], delta: f64) -> (i128, i128) {
    let mut fa = 0;
    let mut fr = 0;
    for t in trials {
        let accepted = match t.sv_score {
            Some(s) if t.kws_fired => s >= delta,
            _ => false,
        };
        match (t.trial.label, accepted) {
            (TrialLabel::Nontarget, true) => fa += 1,
            (TrialLabel::Target, false) => fr += 1,
            _ => {}
        }
    }
    (fa, fr)
}

fn candidates(trials: &[ScoredTrial]) -> Vec<f64> {
    let mut c: Vec<f64> = trials.iter().filter_map(|t| t.sv_score).collect();
    c.push(f64::NEG_INFINITY);
    c.push(f64::INFINITY);
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

/// `(minC_d, smallest threshold reaching it)` with cost `FRR + alpha FAR`.
pub fn min_cd(trials: &[ScoredTrial], alpha: f64) -> (f64, f64) {
    let nt = trials.iter().filter(|t| t.trial.label == TrialLabel::Target).count() as f64;
    let nn = trials.len() as f64 - nt;
    let mut best = (f64::INFINITY, f64::NAN);
    for d in candidates(trials) {
        let (fa, fr) = errors(trials, d);
        let cost = fr as f64 / nt + alpha * (fa as f64 / nn);
        if cost < best.0 {
            best = (cost, d);
        }
    }
    best
}

/// Exact fraction `num / den` with `den > 0`.
#[derive(Clone, Copy)]
struct Q(i128, i128);

impl Q {
    fn lt(self, o: Q) -> bool {
        self.0 * o.1 < o.0 * self.1
    }
    fn f64(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

/// Smallest `max(FAR, FRR)` along the straight segments joining
/// consecutive sweep points.
pub fn eer(trials: &[ScoredTrial]) -> f64 {
    let nt = trials.iter().filter(|t| t.trial.label == TrialLabel::Target).count() as i128;
    let nn = trials.len() as i128 - nt;
    // FAR = fa/nn and FRR = fr/nt over the common denominator nn*nt
    let pts: Vec<(i128, i128)> = candidates(trials)
        .into_iter()
        .map(|d| {
            let (fa, fr) = errors(trials, d);
            (fa * nt, fr * nn)
        })
        .collect();
    let den = nn * nt;
    let mut best: Option<Q> = None;
    let mut keep = |q: Q| {
        if best.is_none_or(|b| q.lt(b)) {
            best = Some(q);
        }
    };
    for w in pts.windows(2) {
        let ((a0, r0), (a1, r1)) = (w[0], w[1]);
        keep(Q(a0.max(r0), den));
        keep(Q(a1.max(r1), den));
        // far(s) = a0 + s (a1 - a0), frr(s) = r0 + s (r1 - r0); they meet
        // at s = (a0 - r0) / ((a0 - r0) - (a1 - r1)) when the sign flips
        let (d0, d1) = (a0 - r0, a1 - r1);
        if d0 > 0 && d1 < 0 {
            let (sn, sd) = (d0, d0 - d1);
            keep(Q(a0 * sd + sn * (a1 - a0), den * sd));
        }
    }
    best.expect("at least two sweep points").f64()
}
