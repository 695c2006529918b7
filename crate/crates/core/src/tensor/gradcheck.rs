//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Magnitude below which gradient comparisons fall back to absolute error.
/// Central differences at `h = 1e-5` carry roughly `1e-10` of round-off.
pub const RELATIVE_FLOOR: f64 = 1e-4;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Smallest step tried when a probe straddles a kink. Round-off at this
/// step is still below `1e-8` for losses of order one.
pub const MIN_STEP: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub elements: usize,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    /// Elements whose probes needed a smaller step to stay on one smooth piece.
    pub refined: usize,
    /// Elements left unchecked because even `MIN_STEP` crossed a kink.
    pub at_kink: usize,
}

/// Compares `analytic` against central differences of `loss` for every
/// element of every tensor in `params`. For smooth losses.
pub fn check_gradients(
    params: &BTreeMap<String, Tensor>,
    analytic: &BTreeMap<String, Tensor>,
    step: f64,
    mut loss: impl FnMut(&BTreeMap<String, Tensor>) -> Result<f64>,
) -> Result<Vec<TensorCheck>> {
    check_piecewise_gradients(params, analytic, step, |p| Ok((loss(p)?, 0)))
}

/// Like [`check_gradients`] for piecewise-smooth losses. `loss` also returns
/// a fingerprint of its active pieces; when either probe lands on a
/// different piece than the unperturbed point the step is divided by ten,
/// down to [`MIN_STEP`].
pub fn check_piecewise_gradients(
    params: &BTreeMap<String, Tensor>,
    analytic: &BTreeMap<String, Tensor>,
    step: f64,
    mut loss: impl FnMut(&BTreeMap<String, Tensor>) -> Result<(f64, u64)>,
) -> Result<Vec<TensorCheck>> {
    let (_, base) = loss(params)?;
    let mut probe = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for (name, tensor) in params {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::Logic(format!("no analytic gradient for `{name}`")))?;
        if grad.shape() != tensor.shape() {
            return Err(Error::Logic(format!("gradient shape mismatch for `{name}`")));
        }
        let mut check = TensorCheck {
            name: name.clone(),
            elements: tensor.len(),
            max_relative_error: 0.0,
            max_abs_error: 0.0,
            refined: 0,
            at_kink: 0,
        };
        for i in 0..tensor.len() {
            let original = tensor.data()[i];
            let mut h = step;
            let numeric = loop {
                probe.get_mut(name).expect("cloned key").data_mut()[i] = original + h;
                let (up, p_up) = loss(&probe)?;
                probe.get_mut(name).expect("cloned key").data_mut()[i] = original - h;
                let (down, p_down) = loss(&probe)?;
                probe.get_mut(name).expect("cloned key").data_mut()[i] = original;
                if p_up == base && p_down == base {
                    break Some((up - down) / (2.0 * h));
                }
                if h / 10.0 < MIN_STEP * 0.999 {
                    break None;
                }
                h /= 10.0;
            };
            let Some(numeric) = numeric else {
                check.at_kink += 1;
                continue;
            };
            if h < step {
                check.refined += 1;
            }
            let a = grad.data()[i];
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_relative_error = check.max_relative_error.max(relative_error(a, numeric));
        }
        report.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_gradient_of_a_polynomial_passes() {
        let params = BTreeMap::from([("x".to_string(), Tensor::vector(&[0.5, -1.5, 2.0]))]);
        let loss = |p: &BTreeMap<String, Tensor>| Ok(p["x"].data().iter().map(|v| v * v * v).sum());
        let analytic = BTreeMap::from([(
            "x".to_string(),
            Tensor::vector(&[0.75, 6.75, 12.0]),
        )]);
        let report = check_gradients(&params, &analytic, DEFAULT_STEP, loss).unwrap();
        assert!(report[0].max_relative_error < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let params = BTreeMap::from([("x".to_string(), Tensor::vector(&[1.0]))]);
        let loss = |p: &BTreeMap<String, Tensor>| Ok(p["x"].item() * 3.0);
        let analytic = BTreeMap::from([("x".to_string(), Tensor::vector(&[2.0]))]);
        let report = check_gradients(&params, &analytic, DEFAULT_STEP, loss).unwrap();
        assert!(report[0].max_relative_error > 0.3);
    }
}
