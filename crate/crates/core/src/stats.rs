//! Small numeric helpers shared across modules: a row-major matrix,
//! sample moments, posterior summaries, quadrature and least squares.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            data: vec![0.0; nrows * ncols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(nrows * ncols);
        for r in rows {
            assert_eq!(r.len(), ncols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { nrows, ncols, data }
    }

    pub fn from_columns(cols: &[Vec<f64>]) -> Self {
        let ncols = cols.len();
        let nrows = cols.first().map_or(0, Vec::len);
        let mut m = Self::zeros(nrows, ncols);
        for (j, c) in cols.iter().enumerate() {
            assert_eq!(c.len(), nrows, "ragged columns");
            for (i, v) in c.iter().enumerate() {
                m.data[i * ncols + j] = *v;
            }
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.ncols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.ncols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.nrows).map(|i| self.get(i, j)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.ncols).map(|j| self.column(j)).collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.ncols.max(1)).take(self.nrows)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.ncols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            nrows: idx.len(),
            ncols: self.ncols,
            data,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with denominator `n - 1`.
pub fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

pub fn sample_sd(x: &[f64]) -> f64 {
    sample_variance(x).sqrt()
}

/// Linear-interpolation quantile of already sorted data (R type 7).
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(x: &[f64], prob: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, prob)
}

pub fn median(x: &[f64]) -> f64 {
    quantile(x, 0.5)
}

/// Posterior summary with an equal-tailed credible interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl Summary {
    pub fn from_draws(draws: &[f64], level: f64) -> Self {
        let mut s = draws.to_vec();
        s.sort_by(f64::total_cmp);
        let alpha = 1.0 - level;
        let sd = if draws.len() > 1 { sample_sd(draws) } else { 0.0 };
        Summary {
            mean: mean(draws),
            sd,
            lower: quantile_sorted(&s, alpha / 2.0),
            upper: quantile_sorted(&s, 1.0 - alpha / 2.0),
            level,
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Nodes and weights for expectations under a standard normal:
/// `E f(Z) ≈ Σ w_k f(z_k)`. Golub-Welsch on the probabilists' Hermite
/// recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let off = (k as f64).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(z, w)| (z, w / total)).unzip()
}

/// Ordinary least squares fit returning coefficients, fitted values and
/// residual variance (denominator `n - k`). `None` when the design is
/// rank deficient.
pub struct OlsFit {
    pub coef: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residual_variance: f64,
}

pub fn ols(design: &DMatrix<f64>, y: &[f64]) -> Option<OlsFit> {
    let (n, k) = design.shape();
    if n <= k {
        return None;
    }
    let yv = DVector::from_column_slice(y);
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-10) {
        return None;
    }
    let coef = svd.solve(&yv, 0.0).ok()?;
    let fitted = design * &coef;
    let ssr: f64 = fitted
        .iter()
        .zip(y)
        .map(|(f, yi)| (yi - f) * (yi - f))
        .sum();
    Some(OlsFit {
        coef: coef.iter().copied().collect(),
        fitted: fitted.iter().copied().collect(),
        residual_variance: ssr / (n - k) as f64,
    })
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_moments() {
        let (z, w) = gauss_hermite(25);
        let m = |p: i32| z.iter().zip(&w).map(|(z, w)| w * z.powi(p)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-12);
        assert!(m(1).abs() < 1e-12);
        assert!((m(2) - 1.0).abs() < 1e-10);
        assert!((m(4) - 3.0).abs() < 1e-9);
        assert!((m(6) - 15.0).abs() < 1e-8);
    }

    #[test]
    fn quantiles_and_summary() {
        let x = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(median(&x), 3.0);
        assert_eq!(quantile(&x, 0.25), 2.0);
        let s = Summary::from_draws(&[0.4; 10], 0.95);
        assert_eq!((s.lower, s.upper), (0.4, 0.4));
        assert!((sample_variance(&[0.0, 2.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn ols_recovers_line() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = xs.iter().map(|x| 1.0 + 2.0 * x).collect();
        let d = DMatrix::from_fn(20, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let fit = ols(&d, &y).unwrap();
        assert!((fit.coef[0] - 1.0).abs() < 1e-10);
        assert!((fit.coef[1] - 2.0).abs() < 1e-10);
        let rank_def = DMatrix::from_fn(20, 2, |_, _| 1.0);
        assert!(ols(&rank_def, &y).is_none());
    }

    #[test]
    fn normal_cdf_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        let v = normal_cdf(1.959963984540054);
        assert!((v - 0.975).abs() < 1e-10, "{v}");
    }
}
