//! Dense-vector primitives with their analytic partial derivatives, and the
//! central-difference oracle every gradient test leans on.

use crate::error::{DetaError, Result};
use crate::scalar::Scalar;

/// Four independent accumulators so the loop vectorizes; the summation
/// order is fixed, so results are still bit-reproducible.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for k in 0..4 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail = tail + x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// `y += alpha * x`
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

pub fn all_finite<T: Scalar>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn nonzero_norm<T: Scalar>(v: &[T], what: &str) -> Result<T> {
    let n = norm(v);
    if !(n > T::zero()) || !n.is_finite() {
        return Err(DetaError::degenerate(format!(
            "{what} has zero or non-finite norm"
        )));
    }
    Ok(n)
}

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(DetaError::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = nonzero_norm(a, "left operand")?;
    let nb = nonzero_norm(b, "right operand")?;
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Cosine similarity together with its gradients with respect to both inputs.
///
/// `d cos / d a = b / (|a||b|) - cos * a / |a|^2`, symmetrically for `b`.
/// The value is not clamped here so that it stays consistent with the
/// gradients under finite differences.
pub fn cosine_with_grad<T: Scalar>(a: &[T], b: &[T]) -> Result<(T, Vec<T>, Vec<T>)> {
    let na = nonzero_norm(a, "left operand")?;
    let nb = nonzero_norm(b, "right operand")?;
    let inv = T::one() / (na * nb);
    let c = dot(a, b) * inv;
    let ca = c / (na * na);
    let cb = c / (nb * nb);
    let ga = a.iter().zip(b).map(|(&x, &y)| y * inv - ca * x).collect();
    let gb = a.iter().zip(b).map(|(&x, &y)| x * inv - cb * y).collect();
    Ok((c, ga, gb))
}

/// Numerically stable `log(sum(exp(x)))`. Returns -inf for an empty slice.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    let s: T = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax of `scores / temperature`, max-shifted.
pub fn softmax<T: Scalar>(scores: &[T], temperature: T) -> Result<Vec<T>> {
    if !(temperature > T::zero()) {
        return Err(DetaError::invalid("softmax temperature must be > 0"));
    }
    if scores.is_empty() {
        return Err(DetaError::invalid("softmax of an empty score vector"));
    }
    let scaled: Vec<T> = scores.iter().map(|&s| s / temperature).collect();
    let m = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scaled.iter().map(|&s| (s - m).exp()).collect();
    let z: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let n = nonzero_norm(v, "vector")?;
    Ok(v.iter().map(|&x| x / n).collect())
}

/// Back-propagates `grad_out` (w.r.t. `unit = v/|v|`) to the pre-normalization
/// vector: `(g - (g . unit) unit) / |v|`.
pub fn l2_normalize_backward<T: Scalar>(unit: &[T], pre_norm: T, grad_out: &[T]) -> Vec<T> {
    let gu = dot(grad_out, unit);
    grad_out
        .iter()
        .zip(unit)
        .map(|(&g, &u)| (g - gu * u) / pre_norm)
        .collect()
}

/// Settings for central-difference gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.rel_tol > 0.0) || !(self.abs_tol > 0.0) {
            return Err(DetaError::invalid(
                "grad-check step and tolerances must be positive",
            ));
        }
        Ok(())
    }

    /// True when `analytic` and `numeric` agree: either the absolute gap is
    /// below `abs_tol` or the relative gap (scaled by the larger magnitude)
    /// is below `rel_tol`.
    pub fn agrees(&self, analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        diff <= self.abs_tol || diff / analytic.abs().max(numeric.abs()) <= self.rel_tol
    }
}

/// Central-difference estimate `(f(p + h e_i) - f(p - h e_i)) / 2h` of the
/// gradient of `f` at `params`. Always evaluated in `f64`.
pub fn finite_difference_gradient<F>(f: F, params: &[f64], cfg: &GradCheckConfig) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    cfg.validate()?;
    let h = cfg.step;
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = f(&p);
        p[i] = orig - h;
        let fm = f(&p);
        p[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(DetaError::OracleFailure(format!(
                "non-finite objective while perturbing coordinate {i}"
            )));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest coordinate-wise disagreement between two gradients, as
/// `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
