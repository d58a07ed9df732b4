use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of a central finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Entries compared.
    pub checked: usize,
    /// Entries whose ±h perturbation crossed a non-smooth point.
    pub skipped: usize,
}

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so that vanishing gradients are compared absolutely.
const FLOOR: f64 = 1e-3;

/// Fixed projection coefficients that turn a tensor output into a scalar.
fn projection(len: usize) -> Vec<f64> {
    (0..len).map(|i| libm::sin(i as f64 * 0.7391 + 0.4) * 0.9 + 0.05).collect()
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], track: bool) -> Result<(Tape<f64>, Var, Vec<Var>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), track)).collect();
    let mut out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        let coeffs = projection(tape.value(out).len());
        out = tape.weighted_sum(out, &coeffs)?;
    }
    Ok((tape, out, vars))
}

/// Compare the tape's analytic gradient of `f` against central differences
/// with step `h`, over every entry of every input. Non-scalar outputs are
/// reduced with a fixed projection. Entries where the perturbation changes
/// a discrete branch (ReLU kink, argmax tie, L1 tie) are skipped.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (mut tape, out, vars) = evaluate(&f, inputs, true)?;
    let base_sig = tape.branch_signature();
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheck { max_rel_error: 0.0, checked: 0, skipped: 0 };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let orig = input.data()[e];
            probe[ti].data_mut()[e] = orig + h;
            let (tp, op, _) = evaluate(&f, &probe, false)?;
            probe[ti].data_mut()[e] = orig - h;
            let (tm, om, _) = evaluate(&f, &probe, false)?;
            probe[ti].data_mut()[e] = orig;
            if tp.branch_signature() != base_sig || tm.branch_signature() != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (tp.value(op).item() - tm.value(om).item()) / (2.0 * h);
            let a = analytic[ti].data()[e];
            let denom = a.abs().max(numeric.abs()).max(FLOOR);
            report.max_rel_error = report.max_rel_error.max((a - numeric).abs() / denom);
            report.checked += 1;
        }
    }
    Ok(report)
}
