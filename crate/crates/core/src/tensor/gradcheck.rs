use super::{Tape, Tensor, Var};
use crate::Result;

/// Denominator floor for relative errors, so near-zero gradients are
/// compared on an absolute scale.
const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_element: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub step: f64,
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Compare tape gradients of `sum(f(inputs))` against central differences.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, 1e-2)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tolerance: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, step, tolerance, None)
}

/// As [`grad_check`], optionally corrupting the analytic gradients through
/// [`Tape::inject_gradient_fault`].
#[doc(hidden)]
pub fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    tolerance: f64,
    fault: Option<f64>,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(fault) = fault {
        tape.inject_gradient_fault(fault);
    }
    let leaves: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &leaves)?;
    let loss = tape.sum(&out)?;
    tape.backward(&loss, &Tensor::scalar(1.0))?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        Ok(f(&mut t, &vs)?.value().sum())
    };

    let mut reports = Vec::with_capacity(inputs.len());
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = tape
            .grad(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut report = InputReport {
            index: i,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_element: 0,
        };
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_element = e;
            }
        }
        reports.push(report);
    }
    Ok(GradReport {
        step,
        tolerance,
        inputs: reports,
    })
}
