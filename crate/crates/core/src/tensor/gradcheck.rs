//! Central finite differences for validating reverse-mode gradients.
//!
//! The numeric side only ever evaluates the objective forward, so it shares
//! no code with the backward rules it checks.

use super::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitudes below this are compared on an absolute scale.
///
/// With `h = 1e-5` the numeric derivative carries roughly `1e-16 · |f| / h`
/// of rounding noise, so entries much smaller than `1e-3` cannot be resolved
/// to four relative digits.
pub const SCALE_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

/// Numeric gradient of `f` with respect to every entry of every tensor.
pub fn numeric_gradients<F>(params: &mut [Tensor], step: f64, mut f: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape().to_vec());
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + step;
            let plus = f(params)?;
            params[p].data_mut()[i] = orig - step;
            let minus = f(params)?;
            params[p].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// (tensor index, flat entry, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

pub fn compare(analytic: &[Tensor], numeric: &[Tensor]) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let e = relative_error(av, nv);
            report.checked += 1;
            if e > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(e);
                report.worst = Some((p, i, av, nv));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_quadratic() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let g = numeric_gradients(&mut params, DEFAULT_STEP, |p| {
            Ok(p[0].data().iter().map(|v| v * v).sum())
        })
        .unwrap();
        assert!((g[0].data()[0] - 2.0).abs() < 1e-8);
        assert!((g[0].data()[1] + 4.0).abs() < 1e-8);
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn compare_reports_worst_entry() {
        let a = vec![Tensor::vector(vec![1.0, 2.0])];
        let n = vec![Tensor::vector(vec![1.0, 2.2])];
        let r = compare(&a, &n);
        assert_eq!(r.checked, 2);
        assert_eq!(r.worst.unwrap().1, 1);
        assert!(!r.passes(1e-4));
    }
}
