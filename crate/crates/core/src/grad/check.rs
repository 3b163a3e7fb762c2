use super::{Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Maximum relative error between the analytic gradient of `loss_fn` at
/// `point` and its central-difference estimate.
pub fn finite_diff_check<F>(loss_fn: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    finite_diff_report(loss_fn, point, step).map(|r| r.max_rel_error)
}

/// Like [`finite_diff_check`] but keeps both gradient estimates.
///
/// Each coordinate's error is `|analytic - numeric| / (|numeric| + floor)`
/// with `floor = 1e-8 * (1 + max |numeric|)`, so coordinates whose true
/// derivative vanishes are judged on an absolute scale.
pub fn finite_diff_report<F>(loss_fn: F, point: &Tensor, step: f64) -> Result<FdReport>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid(format!("finite difference step must be positive, got {step}")));
    }
    let point = &point.as_standard_layout().into_owned();
    let g = Graph::new();
    let x = g.leaf(point.clone());
    let loss = loss_fn(&g, x)?;
    let base = g.scalar(loss)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("finite_diff_check: loss at base point".into()));
    }
    g.backward(loss)?;
    let analytic = g.grad(x).unwrap_or_else(|| Tensor::zeros(point.raw_dim()));
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("finite_diff_check: analytic gradient".into()));
    }

    let eval = |p: Tensor| -> Result<f64> {
        let g = Graph::new();
        let x = g.constant(p);
        let v = g.scalar(loss_fn(&g, x)?)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("finite_diff_check: perturbed loss".into()))
        }
    };
    let mut numeric = Tensor::zeros(point.raw_dim());
    let flat_len = point.len();
    for i in 0..flat_len {
        let mut plus = point.clone();
        let mut minus = point.clone();
        plus.as_slice_mut().expect("standard layout")[i] += step;
        minus.as_slice_mut().expect("standard layout")[i] -= step;
        let d = (eval(plus)? - eval(minus)?) / (2.0 * step);
        numeric.as_slice_mut().unwrap()[i] = d;
    }

    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-8 * (1.0 + scale);
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let err = (a - n).abs() / (n.abs() + floor);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(FdReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
