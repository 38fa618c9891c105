//! Convergence and overlap checks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimands::{cate_many, DrawSet, ExposureContrast};
use crate::stats::{mean, median, normal_cdf, ols, quantile, sample_sd, sample_variance, Matrix, Summary};

/// Shortest chain accepted by [`psrf`].
pub const MIN_CHAIN_LENGTH: usize = 10;

/// Potential scale reduction factor of scalar traces, one per chain.
pub fn psrf(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::TooFewChains);
    }
    let m = chains[0].len();
    if m < MIN_CHAIN_LENGTH || chains.iter().any(|c| c.len() != m) {
        return Err(Error::BadChainLength {
            min: MIN_CHAIN_LENGTH,
        });
    }
    let within = mean(&chains.iter().map(|c| sample_variance(c)).collect::<Vec<_>>());
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let between = m as f64 * sample_variance(&means);
    if within == 0.0 {
        return Ok(if between > 0.0 { f64::INFINITY } else { 1.0 });
    }
    let mf = m as f64;
    let pooled = within * (mf - 1.0) / mf + between / mf;
    Ok((pooled / within).sqrt())
}

/// Quantile windows around the two contrast levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositivityOptions {
    pub delta: f64,
    pub low_window: (f64, f64),
    pub high_window: (f64, f64),
}

impl Default for PositivityOptions {
    fn default() -> Self {
        Self {
            delta: 0.01,
            low_window: (0.15, 0.35),
            high_window: (0.65, 0.85),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositivityReport {
    pub options: PositivityOptions,
    pub exposure_names: Vec<String>,
    /// Raw-scale windows per exposure for the low and high level.
    pub low_bounds: Vec<(f64, f64)>,
    pub high_bounds: Vec<(f64, f64)>,
    /// `P(W_j ∈ R(w_0j) | X_i)`, observations × exposures.
    pub p0: Matrix,
    pub p1: Matrix,
    /// Joint probabilities under working independence across exposures.
    pub joint_p0: Vec<f64>,
    pub joint_p1: Vec<f64>,
    /// Share of observations passing per exposure.
    pub marginal_pass: Vec<f64>,
    /// Share passing for every exposure at both levels.
    pub joint_pass: f64,
    /// Per observation, whether every exposure passes.
    pub pass: Vec<bool>,
}

impl PositivityReport {
    /// `min(p_0, p_1)` per observation.
    pub fn min_joint(&self) -> Vec<f64> {
        self.joint_p0
            .iter()
            .zip(&self.joint_p1)
            .map(|(a, b)| a.min(*b))
            .collect()
    }
}

/// Additive cubic polynomial design in standardized covariates.
fn cubic_design(x: &Matrix) -> DMatrix<f64> {
    let n = x.nrows();
    let p = x.ncols();
    let stats: Vec<(f64, f64)> = (0..p)
        .map(|j| {
            let c = x.column(j);
            let sd = sample_sd(&c);
            (mean(&c), if sd > 0.0 { sd } else { 1.0 })
        })
        .collect();
    DMatrix::from_fn(n, 1 + 3 * p, |i, c| {
        if c == 0 {
            return 1.0;
        }
        let j = (c - 1) / 3;
        let power = (c - 1) % 3 + 1;
        let z = (x.get(i, j) - stats[j].0) / stats[j].1;
        z.powi(power as i32)
    })
}

/// Overlap of each observation with windows around the contrast levels,
/// under a Gaussian cubic-regression model for each exposure given the
/// covariates.
pub fn positivity_report(ds: &Dataset, opts: &PositivityOptions) -> Result<PositivityReport> {
    let n = ds.n();
    let q = ds.q();
    let design = cubic_design(&ds.x);
    let mut p0 = Matrix::zeros(n, q);
    let mut p1 = Matrix::zeros(n, q);
    let mut low_bounds = Vec::with_capacity(q);
    let mut high_bounds = Vec::with_capacity(q);
    for j in 0..q {
        let wj = ds.w.column(j);
        if !(sample_sd(&wj) > 0.0) {
            return Err(Error::RankDeficient(ds.exposure_names[j].clone()));
        }
        let fit = ols(&design, &wj).ok_or_else(|| Error::RankDeficient(ds.exposure_names[j].clone()))?;
        let sd = fit.residual_variance.sqrt();
        if !(sd > 0.0) {
            return Err(Error::RankDeficient(ds.exposure_names[j].clone()));
        }
        let lo = (quantile(&wj, opts.low_window.0), quantile(&wj, opts.low_window.1));
        let hi = (quantile(&wj, opts.high_window.0), quantile(&wj, opts.high_window.1));
        let mass = |m: f64, (a, b): (f64, f64)| normal_cdf((b - m) / sd) - normal_cdf((a - m) / sd);
        for i in 0..n {
            let m = fit.fitted[i];
            p0.set(i, j, mass(m, lo).clamp(0.0, 1.0));
            p1.set(i, j, mass(m, hi).clamp(0.0, 1.0));
        }
        low_bounds.push(lo);
        high_bounds.push(hi);
    }
    let joint = |p: &Matrix| -> Vec<f64> { p.rows().map(|r| r.iter().product()).collect() };
    let joint_p0 = joint(&p0);
    let joint_p1 = joint(&p1);
    let passes = |i: usize, j: usize| p0.get(i, j).min(p1.get(i, j)) > opts.delta;
    let marginal_pass = (0..q)
        .map(|j| (0..n).filter(|&i| passes(i, j)).count() as f64 / n as f64)
        .collect();
    let pass: Vec<bool> = (0..n).map(|i| (0..q).all(|j| passes(i, j))).collect();
    let joint_pass = pass.iter().filter(|p| **p).count() as f64 / n as f64;
    Ok(PositivityReport {
        options: opts.clone(),
        exposure_names: ds.exposure_names.clone(),
        low_bounds,
        high_bounds,
        p0,
        p1,
        joint_p0,
        joint_p1,
        marginal_pass,
        joint_pass,
        pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimmedAte {
    pub threshold: f64,
    pub kept: usize,
    pub draws: Vec<f64>,
    pub summary: Summary,
}

/// ATE restricted to observations whose `min(p_0, p_1)` exceeds its
/// sample median.
pub fn trimmed_ate(
    set: &DrawSet<'_>,
    x: &Matrix,
    report: &PositivityReport,
    contrast: &ExposureContrast,
) -> Result<TrimmedAte> {
    let score = report.min_joint();
    if score.len() != x.nrows() {
        return Err(Error::InvalidDataset(
            "positivity report and covariates differ in length".into(),
        ));
    }
    let threshold = median(&score);
    let kept: Vec<Vec<f64>> = (0..x.nrows())
        .filter(|&i| score[i] > threshold)
        .map(|i| x.row(i).to_vec())
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyTrimmedSet);
    }
    let per_point = cate_many(set, &kept, contrast)?;
    let k = kept.len() as f64;
    let draws: Vec<f64> = (0..set.len())
        .map(|d| per_point.iter().map(|p| p[d]).sum::<f64>() / k)
        .collect();
    Ok(TrimmedAte {
        threshold,
        kept: kept.len(),
        summary: Summary::from_draws(&draws, 0.95),
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn psrf_edge_cases() {
        let c: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin()).collect();
        let r = psrf(&[c.clone(), c.clone()]).unwrap();
        let m = 50.0f64;
        assert!((r - ((m - 1.0) / m).sqrt()).abs() < 1e-12);
        assert!((r - 1.0).abs() < 1.0 / m);
        assert_eq!(psrf(&[vec![1.0; 20], vec![2.0; 20]]).unwrap(), f64::INFINITY);
        assert_eq!(psrf(&[vec![1.0; 20], vec![1.0; 20]]).unwrap(), 1.0);
        assert!(matches!(psrf(&[c.clone()]), Err(Error::TooFewChains)));
        assert!(matches!(psrf(&[c.clone(), c[..5].to_vec()]), Err(Error::BadChainLength { .. })));
    }

    #[test]
    fn psrf_iid_chains_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chains: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..1000).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let r = psrf(&chains).unwrap();
        assert!((0.99..=1.05).contains(&r), "{r}");
    }

    #[test]
    fn psrf_grows_with_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..200).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut last = 0.0;
        for shift in [0.0, 0.2, 0.5, 1.0, 2.0] {
            let shifted = vec![base[0].clone(), base[1].iter().map(|v| v + shift).collect()];
            let r = psrf(&shifted).unwrap();
            assert!(r > last);
            last = r;
        }
    }

    #[test]
    fn independent_exposures_have_window_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4000;
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
        let w: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample(StandardNormal)]).collect();
        let ds = Dataset {
            y: vec![0.0; n],
            x: Matrix::from_rows(&x),
            w: Matrix::from_rows(&w),
            covariate_names: vec!["a".into(), "b".into()],
            exposure_names: vec!["e".into()],
        };
        let r = positivity_report(&ds, &PositivityOptions::default()).unwrap();
        // cubic terms amplify coefficient noise at extreme covariates,
        // so the bulk is checked rather than every observation
        for p in [&r.p0, &r.p1] {
            let dev: Vec<f64> = p.column(0).iter().map(|v| (v - 0.2).abs()).collect();
            assert!((mean(&p.column(0)) - 0.2).abs() < 0.01);
            assert!(quantile(&dev, 0.95) < 0.02);
        }
        for i in 0..n {
            assert!(r.joint_p0[i] <= r.p0.get(i, 0) + 1e-15);
        }
        assert_eq!(r.joint_pass, 1.0);
    }

    #[test]
    fn constant_exposure_is_rank_deficient() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64]).collect();
        let ds = Dataset {
            y: vec![0.0; 30],
            x: Matrix::from_rows(&rows),
            w: Matrix::from_rows(&vec![vec![1.0]; 30]),
            covariate_names: vec!["a".into()],
            exposure_names: vec!["flat".into()],
        };
        match positivity_report(&ds, &PositivityOptions::default()) {
            Err(Error::RankDeficient(name)) => assert_eq!(name, "flat"),
            other => panic!("{other:?}"),
        }
    }
}
