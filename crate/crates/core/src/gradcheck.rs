//! Central finite-difference gradient checking.

use crate::error::{Error, Result};

/// Summary of one comparison between analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub probe_count: usize,
    pub step: f64,
}

/// A scalar function with a known gradient.
pub trait Differentiable {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Adapter for a pair of closures.
pub struct FnPair<F, G> {
    pub value: F,
    pub gradient: G,
}

impl<F, G> Differentiable for FnPair<F, G>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    fn value(&self, x: &[f64]) -> Result<f64> {
        (self.value)(x)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        (self.gradient)(x)
    }
}

/// Relative error uses `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-8;

/// Compares `f.gradient(x)` against `(f(x+h) - f(x-h)) / 2h` on every coordinate.
pub fn finite_diff_check<D: Differentiable + ?Sized>(
    f: &D,
    input: &[f64],
    step: f64,
) -> Result<GradCheckReport> {
    let coords: Vec<usize> = (0..input.len()).collect();
    finite_diff_check_subset(f, input, step, &coords)
}

/// Same as [`finite_diff_check`] restricted to the listed coordinates.
pub fn finite_diff_check_subset<D: Differentiable + ?Sized>(
    f: &D,
    input: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<GradCheckReport> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    if coords.is_empty() {
        return Err(Error::Config("no coordinates to probe".into()));
    }
    let analytic = f.gradient(input)?;
    if analytic.len() != input.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for a {}-d input",
            analytic.len(),
            input.len()
        )));
    }
    let mut x = input.to_vec();
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for &k in coords {
        if k >= x.len() {
            return Err(Error::Bounds(format!("coordinate {k} out of range")));
        }
        let orig = x[k];
        x[k] = orig + step;
        let fp = f.value(&x)?;
        x[k] = orig - step;
        let fm = f.value(&x)?;
        x[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value probing coordinate {k}")));
        }
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[k];
        if !a.is_finite() {
            return Err(Error::Numeric(format!("non-finite analytic gradient at coordinate {k}")));
        }
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        probe_count: coords.len(),
        step,
    })
}
