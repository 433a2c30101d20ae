//! Central-difference gradient verification in double precision.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Coordinates whose one-sided differences disagree by more than this
/// fraction are treated as sitting on a kink and skipped.
const KINK_REL: f64 = 1e-2;
const KINK_ABS: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Flat coordinate of the worst disagreement.
    pub worst: Option<usize>,
}

impl GradCheckReport {
    pub fn merge(mut self, other: GradCheckReport) -> Self {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst.or(self.worst);
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        self
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.checked > 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` with central differences of `f` at `x`.
///
/// `coords` restricts the check to a subset of flat coordinates.
pub fn grad_check_fn(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    grad_check_fn_with_kinks(|p| Ok((f(p)?, 0)), x, analytic, eps, coords)
}

/// Like [`grad_check_fn`], with `f` also returning a fingerprint of its
/// nondifferentiable branch decisions (see [`Tape::relu_fingerprint`]). A
/// coordinate whose two probes disagree on the fingerprint straddles a kink
/// and is skipped.
pub fn grad_check_fn_with_kinks(
    mut f: impl FnMut(&[f64]) -> Result<(f64, u64)>,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let (f0, _) = f(x)?;
    let mut probe = x.to_vec();
    let mut report = GradCheckReport::default();
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    for &i in coords {
        probe[i] = x[i] + eps;
        let (fp, kp) = f(&probe)?;
        probe[i] = x[i] - eps;
        let (fm, km) = f(&probe)?;
        probe[i] = x[i];
        let right = (fp - f0) / eps;
        let left = (f0 - fm) / eps;
        let gap = (right - left).abs();
        if kp != km || (gap > KINK_ABS && gap > KINK_REL * right.abs().max(left.abs())) {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(i);
        }
    }
    Ok(report)
}

/// Gradient check of a tape-built scalar function with respect to every input.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor<f64>], track: bool| -> Result<(f64, u64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| {
                let mut t = t.detach();
                t.set_requires_grad(track);
                tape.leaf(t)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        let loss = tape.value(out).item();
        if !track {
            return Ok((loss, tape.relu_fingerprint(), Vec::new()));
        }
        tape.backward(out)?;
        let grads = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        Ok((loss, 0, grads))
    };

    let (_, _, analytic) = run(inputs, true)?;
    let mut report = GradCheckReport::default();
    for (idx, input) in inputs.iter().enumerate() {
        let mut values: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
        let r = grad_check_fn_with_kinks(
            |probe| {
                values[idx].data_mut().copy_from_slice(probe);
                let (loss, kinks, _) = run(&values, false)?;
                Ok((loss, kinks))
            },
            input.data(),
            &analytic[idx],
            eps,
            None,
        )?;
        report = report.merge(r);
    }
    Ok(report)
}

/// Max relative error of `f` with respect to a single input tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}
