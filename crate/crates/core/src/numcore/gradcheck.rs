use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{unflatten, Tensor};
use crate::error::Result;

/// Outcome of comparing backward gradients with central differences.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GradcheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub failing_coords: Vec<Vec<usize>>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failing_coords.is_empty() && self.max_rel_err.is_finite()
    }

    /// Folds another report into this one (worst error, union of failures).
    pub fn merge(&mut self, other: GradcheckReport) {
        self.max_rel_err = if other.max_rel_err.is_nan() || self.max_rel_err.is_nan() {
            f64::NAN
        } else {
            self.max_rel_err.max(other.max_rel_err)
        };
        self.failing_coords.extend(other.failing_coords);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks every coordinate of `x`.
pub fn gradcheck<F>(op: &str, f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    gradcheck_coords(op, f, x, h, tol, &coords)
}

/// Checks only the listed flat coordinates of `x`.
pub fn gradcheck_coords<F>(op: &str, f: F, x: &Tensor, h: f64, tol: f64, coords: &[usize]) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let root = f(&mut tape, xv)?;
    let grads = tape.backward(root)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let probe = |v: &Tensor| -> Option<f64> {
        let mut t = Tape::new();
        let pv = t.constant(v.clone());
        match f(&mut t, pv) {
            Ok(r) if t.value(r).numel() == 1 && t.value(r).item().is_finite() => Some(t.value(r).item()),
            _ => None,
        }
    };

    let mut report = GradcheckReport {
        op: op.to_string(),
        max_rel_err: 0.0,
        failing_coords: Vec::new(),
    };
    let mut shifted = x.clone();
    for &c in coords {
        let orig = x.data()[c];
        shifted.data_mut()[c] = orig + h;
        let up = probe(&shifted);
        shifted.data_mut()[c] = orig - h;
        let down = probe(&shifted);
        shifted.data_mut()[c] = orig;
        let err = match (up, down) {
            (Some(u), Some(d)) => relative_error(analytic.data()[c], (u - d) / (2.0 * h)),
            _ => f64::INFINITY,
        };
        if !(err < tol) {
            report.failing_coords.push(unflatten(x.shape(), c));
        }
        if err.is_nan() || err > report.max_rel_err {
            report.max_rel_err = err;
        }
    }
    Ok(report)
}
