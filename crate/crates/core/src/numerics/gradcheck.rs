use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract_err, Result};

/// Gradients smaller than this are compared in absolute terms (scaled by
/// the floor), so round-off on near-zero entries does not read as error.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic[i]` with central differences of `f` at the listed
/// coordinates of `x`.
pub fn finite_difference_check<F>(
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(contract_err!("grad_check eps {eps} outside [1e-7, 1e-3]"));
    }
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
    };
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe)?;
        probe[i] = orig - eps;
        let down = f(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = rel_error(analytic[i], numeric);
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// finite differences over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = match tape.grad(xv) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.numel()],
    };
    let coords: Vec<usize> = (0..x.numel()).collect();
    let report = finite_difference_check(x.data(), &analytic, &coords, eps, |probe| {
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new(x.shape().to_vec(), probe.to_vec())?, false);
        let loss = f(&mut tape, xv)?;
        Ok(tape.value(loss).item())
    })?;
    Ok(report.max_rel_error)
}
