use super::tape::{grad, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Entries whose analytic gradient is smaller than this fraction of the
/// largest gradient entry are compared against that scale instead of
/// their own magnitude.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (parameter index, flat entry index) of the worst entry.
    pub worst: (usize, usize),
    pub entries: usize,
}

/// Compares tape gradients of `f` with central differences.
///
/// The error for each entry is `|analytic - numeric| / (|analytic| + 1e-12)`,
/// with the denominator floored at `RELATIVE_FLOOR * max|analytic|`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<FdReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid("finite-difference eps must be positive".into()));
    }
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        check_finite(loss.item())?;
        grad(loss, &vars)?
    };
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let v = f(&tape, &vars)?.item();
        check_finite(v)
    };
    let scale = analytic.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    let floor = RELATIVE_FLOOR * scale;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = FdReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        entries: 0,
    };
    for (pi, g) in analytic.iter().enumerate() {
        for k in 0..g.len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = g.data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / (a.abs() + 1e-12).max(floor);
            report.entries += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, k);
            }
        }
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("objective under finite differences".into()))
    }
}
