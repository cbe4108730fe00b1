//! Central finite-difference verification of analytic gradients.

use super::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |a - n| / max(|a|, |n|, 1e-8)
    pub max_rel_error: f64,
    /// (input index, coordinate) of the worst coordinate
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Central difference of `op` along every coordinate of every input,
/// paired with the rounding resolution of each quotient (the blur that
/// rounding the two function values alone introduces).
fn difference_quotients<F>(op: &mut F, inputs: &[Tensor<f64>], eps: f64) -> Vec<Vec<(f64, f64)>>
where
    F: FnMut(&[Tensor<f64>], bool) -> (f64, Vec<Tensor<f64>>),
{
    let mut work = inputs.to_vec();
    (0..inputs.len())
        .map(|i| {
            (0..inputs[i].len())
                .map(|j| {
                    let orig = work[i].data()[j];
                    work[i].data_mut()[j] = orig + eps;
                    let (plus, _) = op(&work, false);
                    work[i].data_mut()[j] = orig - eps;
                    let (minus, _) = op(&work, false);
                    work[i].data_mut()[j] = orig;
                    let numeric = (plus - minus) / (2.0 * eps);
                    let resolution = f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * eps);
                    (numeric, resolution)
                })
                .collect()
        })
        .collect()
}

/// Compares the analytic gradients returned by `op` with central
/// differences of its scalar output. A coordinate whose discrepancy is
/// within the rounding resolution of the difference quotient counts as
/// exact; otherwise its error is [`relative_error`].
///
/// `op(inputs, want_grads)` returns the scalar value and, when
/// `want_grads` is set, one gradient tensor per input.
pub fn grad_check<F>(mut op: F, inputs: &[Tensor<f64>], eps: f64) -> GradCheckReport
where
    F: FnMut(&[Tensor<f64>], bool) -> (f64, Vec<Tensor<f64>>),
{
    let (_, analytic) = op(inputs, true);
    assert_eq!(analytic.len(), inputs.len(), "one gradient per input");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (i, row) in difference_quotients(&mut op, inputs, eps).into_iter().enumerate() {
        for (j, (numeric, resolution)) in row.into_iter().enumerate() {
            let a = analytic[i].data()[j];
            let err = if (a - numeric).abs() <= resolution {
                0.0
            } else {
                relative_error(a, numeric)
            };
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    report
}

/// Whether some central-difference stencil of half-width `eps` around
/// `inputs` crosses a point where `op` is not differentiable (a relu
/// kink, a clamp). Detected from function values alone: on a smooth
/// stretch the quotients at `eps` and `eps / 10` agree to `O(eps^2)`,
/// while a crossed kink shifts one of them by a finite fraction. The
/// analytic gradient is never consulted, so screening sample points
/// with this cannot mask a wrong backward pass.
pub fn straddles_kink<F>(mut op: F, inputs: &[Tensor<f64>], eps: f64) -> bool
where
    F: FnMut(&[Tensor<f64>], bool) -> (f64, Vec<Tensor<f64>>),
{
    let wide = difference_quotients(&mut op, inputs, eps);
    let narrow = difference_quotients(&mut op, inputs, eps / 10.0);
    wide.iter().flatten().zip(narrow.iter().flatten()).any(|(&(a, ra), &(b, rb))| {
        (a - b).abs() > ra + rb && relative_error(a, b) > KINK_TOL
    })
}

/// Relative disagreement between the two stencils that marks a kink.
/// Smooth truncation differences stay orders of magnitude below it.
const KINK_TOL: f64 = 1e-5;
