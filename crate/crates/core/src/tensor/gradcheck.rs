//! Central finite-difference validation of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error between an analytic and a numeric gradient component.
fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare the analytic gradient of a scalar-valued `f` against central
/// finite differences at `x`. Returns the max over components of
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradcheck(f: &dyn Fn(&Tensor) -> Result<Tensor>, x: &Tensor, step: f64) -> Result<f64> {
    let x = Tensor::param(x.shape(), x.to_vec())?;
    gradcheck_params(&|| f(&x), &[&x], step)
}

/// Gradcheck over several parameter leaves at once. `f` must be a pure
/// function of the given params; every param must be a `requires_grad` leaf.
/// The numeric side perturbs each component in place and re-evaluates `f`
/// under `no_grad`.
pub fn gradcheck_params(
    f: &dyn Fn() -> Result<Tensor>,
    params: &[&Tensor],
    step: f64,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::contract(
            "gradcheck",
            format!("step {step} outside [1e-6, 1e-3]"),
        ));
    }
    for p in params {
        if !p.requires_grad() {
            return Err(Error::contract("gradcheck", "params must require grad"));
        }
        p.zero_grad();
    }

    let out = f()?;
    if out.len() != 1 {
        return Err(Error::contract(
            "gradcheck",
            format!("f must be scalar-valued, got shape {:?}", out.shape()),
        ));
    }
    out.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut max_err = 0.0f64;
    for (p, a) in params.iter().zip(&analytic) {
        for i in 0..p.len() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + step;
            let plus = no_grad(|| f())?.item()?;
            p.data_mut()[i] = orig - step;
            let minus = no_grad(|| f())?.item()?;
            p.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { op: "gradcheck" });
            }
            let numeric = (plus - minus) / (2.0 * step);
            max_err = max_err.max(relative_error(a[i], numeric));
        }
    }
    Ok(max_err)
}

/// Max absolute analytic/numeric gradient gap; used where the true gradient
/// is zero and a relative comparison is meaningless.
pub fn gradcheck_absolute(
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    step: f64,
) -> Result<f64> {
    let x = Tensor::param(x.shape(), x.to_vec())?;
    x.zero_grad();
    let out = f(&x)?;
    out.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.len()]);

    let mut max_gap = 0.0f64;
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + step;
        let plus = no_grad(|| f(&x))?.item()?;
        x.data_mut()[i] = orig - step;
        let minus = no_grad(|| f(&x))?.item()?;
        x.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        max_gap = max_gap.max((analytic[i] - numeric).abs());
        max_gap = max_gap.max(analytic[i].abs());
    }
    Ok(max_gap)
}
