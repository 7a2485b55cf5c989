//! B-spline bases on a uniform grid extended `degree` knots past each end
//! of the domain.
//!
//! With `G` interior intervals and degree `k` the knot vector has
//! `G + 2k + 1` entries and spans `G + k` basis functions. Inputs outside
//! the domain are clamped to its boundary; the basis is therefore constant
//! (and its derivative zero) beyond the domain.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub grid_size: usize,
    pub degree: usize,
    pub domain_lo: f64,
    pub domain_hi: f64,
}

impl SplineSpec {
    pub fn new(grid_size: usize, degree: usize, domain_lo: f64, domain_hi: f64) -> Result<Self> {
        let spec = Self {
            grid_size,
            degree,
            domain_lo,
            domain_hi,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Unit-domain spec, matching min-max scaled inputs.
    pub fn unit(grid_size: usize, degree: usize) -> Result<Self> {
        Self::new(grid_size, degree, 0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(input_err("spline grid size must be at least 1"));
        }
        if self.degree == 0 {
            return Err(input_err("spline degree must be at least 1"));
        }
        if !(self.domain_lo.is_finite()
            && self.domain_hi.is_finite()
            && self.domain_lo < self.domain_hi)
        {
            return Err(input_err(format!(
                "spline domain [{}, {}] must be finite with lo < hi",
                self.domain_lo, self.domain_hi
            )));
        }
        Ok(())
    }

    pub fn basis_count(&self) -> usize {
        self.grid_size + self.degree
    }

    /// Knot spacing.
    pub fn step(&self) -> f64 {
        (self.domain_hi - self.domain_lo) / self.grid_size as f64
    }

    pub fn knots(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.grid_size + 2 * self.degree + 1)
            .map(|j| self.domain_lo + (j as f64 - self.degree as f64) * h)
            .collect()
    }

    fn knot(&self, j: usize) -> f64 {
        self.domain_lo + (j as f64 - self.degree as f64) * self.step()
    }

    fn clamp(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(input_err(format!("spline input must be finite, got {x}")));
        }
        Ok(x.clamp(self.domain_lo, self.domain_hi))
    }

    /// Index of the interior interval holding (clamped) `x`; the right
    /// boundary belongs to the last interval.
    fn interval(&self, x: f64) -> usize {
        let u = (x - self.domain_lo) / self.step();
        (u.floor().max(0.0) as usize).min(self.grid_size - 1)
    }

    /// Writes the `degree + 1` basis values that can be nonzero at `x` into
    /// `values` and returns the index of the first one.
    ///
    /// When `lower` is given it receives the `degree` nonzero values of the
    /// degree-`(k-1)` basis at `x`, which start at the returned index + 1.
    pub fn local_basis(
        &self,
        x: f64,
        values: &mut [f64],
        lower: Option<&mut [f64]>,
    ) -> Result<usize> {
        let x = self.clamp(x)?;
        let k = self.degree;
        debug_assert!(values.len() > k);
        let s = self.interval(x);
        let span = s + k;

        let mut left = vec![0.0; k + 1];
        let mut right = vec![0.0; k + 1];
        values[0] = 1.0;
        let mut lower = lower;
        for j in 1..=k {
            if j == k {
                if let Some(out) = lower.as_deref_mut() {
                    out[..k].copy_from_slice(&values[..k]);
                }
            }
            left[j] = x - self.knot(span + 1 - j);
            right[j] = self.knot(span + j) - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        Ok(s)
    }

    /// Derivatives of the `degree + 1` locally nonzero basis functions,
    /// returning the index of the first one.
    pub fn local_basis_grad(&self, x: f64, values: &mut [f64], grads: &mut [f64]) -> Result<usize> {
        let k = self.degree;
        let mut lower = vec![0.0; k];
        let s = self.local_basis(x, values, Some(&mut lower))?;
        if x < self.domain_lo || x > self.domain_hi {
            grads[..=k].iter_mut().for_each(|g| *g = 0.0);
            return Ok(s);
        }
        let inv_h = 1.0 / self.step();
        for r in 0..=k {
            let a = if r >= 1 { lower[r - 1] } else { 0.0 };
            let b = if r < k { lower[r] } else { 0.0 };
            grads[r] = (a - b) * inv_h;
        }
        Ok(s)
    }
}

/// Values of all `G + k` basis functions at `x`.
pub fn basis_eval(spec: &SplineSpec, x: f64) -> Result<Vec<f64>> {
    let k = spec.degree;
    let mut local = vec![0.0; k + 1];
    let start = spec.local_basis(x, &mut local, None)?;
    let mut out = vec![0.0; spec.basis_count()];
    out[start..=start + k].copy_from_slice(&local);
    Ok(out)
}

/// Derivatives of all `G + k` basis functions at `x`.
pub fn basis_grad(spec: &SplineSpec, x: f64) -> Result<Vec<f64>> {
    let k = spec.degree;
    let mut local = vec![0.0; k + 1];
    let mut grads = vec![0.0; k + 1];
    let start = spec.local_basis_grad(x, &mut local, &mut grads)?;
    let mut out = vec![0.0; spec.basis_count()];
    out[start..=start + k].copy_from_slice(&grads);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineFunction {
    spec: SplineSpec,
    coefficients: Vec<f64>,
}

impl SplineFunction {
    pub fn new(spec: SplineSpec, coefficients: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if coefficients.len() != spec.basis_count() {
            return Err(crate::error::shape_err(format!(
                "spline with {} basis functions given {} coefficients",
                spec.basis_count(),
                coefficients.len()
            )));
        }
        Ok(Self { spec, coefficients })
    }

    pub fn spec(&self) -> &SplineSpec {
        &self.spec
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        spline_eval(self, x)
    }
}

pub fn spline_eval(f: &SplineFunction, x: f64) -> Result<f64> {
    let k = f.spec.degree;
    let mut local = vec![0.0; k + 1];
    let start = f.spec.local_basis(x, &mut local, None)?;
    Ok(local
        .iter()
        .zip(&f.coefficients[start..=start + k])
        .map(|(b, c)| b * c)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    /// Textbook recursive definition over an explicit knot vector.
    fn naive_basis(knots: &[f64], i: usize, k: usize, x: f64) -> f64 {
        if k == 0 {
            return if knots[i] <= x && x < knots[i + 1] {
                1.0
            } else {
                0.0
            };
        }
        let mut v = 0.0;
        let d1 = knots[i + k] - knots[i];
        if d1 > 0.0 {
            v += (x - knots[i]) / d1 * naive_basis(knots, i, k - 1, x);
        }
        let d2 = knots[i + k + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + k + 1] - x) / d2 * naive_basis(knots, i + 1, k - 1, x);
        }
        v
    }

    #[test]
    fn knot_vector_layout() {
        let spec = SplineSpec::unit(3, 2).unwrap();
        let knots = spec.knots();
        assert_eq!(knots.len(), 3 + 2 * 2 + 1);
        assert_eq!(spec.basis_count(), 5);
        assert!((knots[0] + 2.0 / 3.0).abs() < 1e-15);
        assert!((knots[2]).abs() < 1e-15);
        assert!((knots[5] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn linear_hats_at_midpoint() {
        let spec = SplineSpec::unit(1, 1).unwrap();
        assert_eq!(basis_eval(&spec, 0.5).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn matches_naive_recursion_at_midpoint() {
        let spec = SplineSpec::unit(3, 2).unwrap();
        let knots = spec.knots();
        let x = 0.5;
        let b = basis_eval(&spec, x).unwrap();
        for (i, v) in b.iter().enumerate() {
            assert!(
                (v - naive_basis(&knots, i, 2, x)).abs() < 1e-12,
                "basis {i}"
            );
        }
    }

    #[test]
    fn matches_naive_recursion_everywhere() {
        let mut rng = Rng::new(17);
        for g in 1..=6 {
            for k in 1..=4 {
                let spec = SplineSpec::new(g, k, -0.5, 2.0).unwrap();
                let knots = spec.knots();
                for _ in 0..40 {
                    let x = rng.uniform_range(-0.5, 2.0);
                    let b = basis_eval(&spec, x).unwrap();
                    for (i, v) in b.iter().enumerate() {
                        assert!((v - naive_basis(&knots, i, k, x)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_invalid_specs_and_inputs() {
        assert!(SplineSpec::unit(0, 2).is_err());
        assert!(SplineSpec::unit(3, 0).is_err());
        assert!(SplineSpec::new(3, 2, 1.0, 1.0).is_err());
        let spec = SplineSpec::unit(3, 2).unwrap();
        assert!(basis_eval(&spec, f64::NAN).is_err());
        assert!(basis_grad(&spec, f64::INFINITY).is_err());
        assert!(SplineFunction::new(spec, vec![0.0; 4]).is_err());
    }

    #[test]
    fn out_of_domain_clamps() {
        let spec = SplineSpec::unit(4, 3).unwrap();
        assert_eq!(
            basis_eval(&spec, -3.0).unwrap(),
            basis_eval(&spec, 0.0).unwrap()
        );
        assert_eq!(
            basis_eval(&spec, 1.7).unwrap(),
            basis_eval(&spec, 1.0).unwrap()
        );
        assert!(basis_grad(&spec, 1.7).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn right_boundary_is_covered() {
        for k in 1..=5 {
            let spec = SplineSpec::unit(4, k).unwrap();
            let s: f64 = basis_eval(&spec, 1.0).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_constant_and_zero() {
        let spec = SplineSpec::unit(5, 3).unwrap();
        let zero = SplineFunction::new(spec, vec![0.0; 8]).unwrap();
        let three = SplineFunction::new(spec, vec![3.0; 8]).unwrap();
        for i in 0..=20 {
            let x = i as f64 / 20.0;
            assert_eq!(zero.eval(x).unwrap(), 0.0);
            assert!((three.eval(x).unwrap() - 3.0).abs() < 1e-12);
        }
    }

    /// Normal equations solved by Gaussian elimination with partial pivoting.
    fn least_squares(design: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let n = design[0].len();
        let mut a = vec![vec![0.0; n + 1]; n];
        for (row, &t) in design.iter().zip(y) {
            for i in 0..n {
                for j in 0..n {
                    a[i][j] += row[i] * row[j];
                }
                a[i][n] += row[i] * t;
            }
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
                .unwrap();
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..n).map(|i| a[i][n] / a[i][i]).collect()
    }

    #[test]
    fn least_squares_sine_fit() {
        let spec = SplineSpec::unit(10, 3).unwrap();
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let design: Vec<Vec<f64>> = xs.iter().map(|&x| basis_eval(&spec, x).unwrap()).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| (std::f64::consts::PI * x).sin())
            .collect();
        let f = SplineFunction::new(spec, least_squares(&design, &ys)).unwrap();
        let worst = (0..=1000)
            .map(|i| {
                let x = i as f64 / 1000.0;
                (f.eval(x).unwrap() - (std::f64::consts::PI * x).sin()).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "max error {worst}");
    }

    #[test]
    fn derivative_sums_to_zero() {
        let spec = SplineSpec::unit(6, 3).unwrap();
        for i in 1..40 {
            let s: f64 = basis_grad(&spec, i as f64 / 40.0).unwrap().iter().sum();
            assert!(s.abs() < 1e-10);
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let h = 1e-6;
        let mut rng = Rng::new(5);
        for k in 2..=5 {
            let spec = SplineSpec::unit(7, k).unwrap();
            for _ in 0..100 {
                let x = rng.uniform_range(0.01, 0.99);
                let g = basis_grad(&spec, x).unwrap();
                let hi = basis_eval(&spec, x + h).unwrap();
                let lo = basis_eval(&spec, x - h).unwrap();
                for i in 0..g.len() {
                    let fd = (hi[i] - lo[i]) / (2.0 * h);
                    assert!(
                        (fd - g[i]).abs() < 1e-5,
                        "k={k} x={x} i={i}: {fd} vs {}",
                        g[i]
                    );
                }
            }
        }
    }

    #[test]
    fn linear_hat_slopes_at_peak() {
        let spec = SplineSpec::unit(4, 1).unwrap();
        let delta = spec.step();
        // Hat 2 spans [t_2, t_4] = [0.25, 0.75] and peaks at t_3 = 0.5.
        let peak = 0.5;
        let right = basis_grad(&spec, peak).unwrap();
        let left = basis_grad(&spec, peak - 1e-3).unwrap();
        assert!((left[2] - 1.0 / delta).abs() < 1e-9);
        assert!((right[2] + 1.0 / delta).abs() < 1e-9);
    }

    #[test]
    fn continuity_across_knots() {
        for k in 2..=5 {
            let spec = SplineSpec::unit(5, k).unwrap();
            for knot in spec.knots().into_iter().filter(|t| (0.0..=1.0).contains(t)) {
                let a = basis_eval(&spec, knot - 1e-9).unwrap();
                let b = basis_eval(&spec, knot + 1e-9).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn local_support() {
        let mut rng = Rng::new(9);
        for k in 1..=5 {
            let spec = SplineSpec::unit(8, k).unwrap();
            for _ in 0..50 {
                let b = basis_eval(&spec, rng.uniform()).unwrap();
                assert!(b.iter().filter(|&&v| v != 0.0).count() <= k + 1);
            }
        }
    }
}
