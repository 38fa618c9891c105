//! Targeted-smoothing interaction ensembles `h(u, w) = Σ_m B_m(u) T_m(w)`.
//!
//! Each tree over the exposures is multiplied by a random cosine
//! feature of a single covariate, which makes `h` smooth in `u` and
//! forces the product structure. Samplers reuse [`crate::softbart`] with
//! per-tree multipliers.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::softbart::{Forest, ForestCache, ForestPrior, Inputs};

/// Random cosine features `B_m(u) = √2 cos(ω_m u + b_m)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineBasis {
    pub omega: Vec<f64>,
    pub phase: Vec<f64>,
    pub rho: f64,
}

impl CosineBasis {
    pub fn draw<R: Rng + ?Sized>(m: usize, rho: f64, rng: &mut R) -> Self {
        assert!(rho > 0.0);
        let normal = Normal::new(0.0, 1.0 / rho).expect("valid scale");
        let omega = (0..m).map(|_| normal.sample(rng)).collect();
        let phase = (0..m)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        Self { omega, phase, rho }
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn eval(&self, m: usize, u: f64) -> f64 {
        basis_eval(self.omega[m], self.phase[m], u)
    }

    /// Rescales the frequencies to a new length-scale, keeping the
    /// underlying standard-normal draws.
    pub fn set_rho(&mut self, rho: f64) {
        let ratio = self.rho / rho;
        for w in self.omega.iter_mut() {
            *w *= ratio;
        }
        self.rho = rho;
    }

    /// `n`-vectors of basis values at `u`, one per tree.
    pub fn columns(&self, u: &[f64]) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|m| u.iter().map(|&v| self.eval(m, v)).collect())
            .collect()
    }
}

pub fn basis_eval(omega: f64, phase: f64, u: f64) -> f64 {
    std::f64::consts::SQRT_2 * (omega * u + phase).cos()
}

/// Configuration of an interaction ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionPrior {
    pub forest: ForestPrior,
    pub rho: f64,
    pub rho_update: bool,
}

impl InteractionPrior {
    /// `M_h` trees with `σ_μ` capped at `3.5/(2√M_h)`.
    pub fn with_trees(trees: usize, rho: f64) -> Self {
        let mut forest = ForestPrior::with_trees(trees);
        forest.sigma_mu_cap = Some(forest.initial_sigma_mu());
        Self {
            forest,
            rho,
            rho_update: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionForest {
    pub forest: Forest,
    pub basis: CosineBasis,
    pub rho_update: bool,
}

impl InteractionForest {
    pub fn new<R: Rng + ?Sized>(exposure_dim: usize, prior: InteractionPrior, rng: &mut R) -> Self {
        let basis = CosineBasis::draw(prior.forest.trees, prior.rho, rng);
        Self {
            forest: Forest::new(exposure_dim, prior.forest),
            basis,
            rho_update: prior.rho_update,
        }
    }

    pub fn predict(&self, u: f64, w: &[f64]) -> f64 {
        predict_interaction(self, u, w)
    }

    /// Per-tree exposure factors `T_m(w)`.
    pub fn tree_predictions(&self, w: &[f64]) -> Vec<f64> {
        self.forest.tree_predictions(w)
    }

    /// One backfitting sweep; `x_col` is the covariate on [0,1] and
    /// `w_cols` the exposures.
    pub fn sweep<R: Rng + ?Sized>(
        &mut self,
        cache: &mut InteractionCache,
        w_cols: &[Vec<f64>],
        target: &[f64],
        sigma2: f64,
        rng: &mut R,
    ) -> Result<()> {
        let inputs = Inputs {
            cols: w_cols,
            multipliers: Some(&cache.basis_cols),
        };
        self.forest
            .sweep(&mut cache.forest, &inputs, target, sigma2, rng)?;
        if self.rho_update {
            self.update_rho(cache, target, sigma2, rng);
        }
        Ok(())
    }

    /// Metropolis step for `ρ` over a five-point log grid centred on
    /// the initial value, proposing a neighbouring grid point.
    fn update_rho<R: Rng + ?Sized>(
        &mut self,
        cache: &mut InteractionCache,
        target: &[f64],
        sigma2: f64,
        rng: &mut R,
    ) {
        let k = cache.rho_index as isize + if rng.gen::<bool>() { 1 } else { -1 };
        let u: f64 = rng.gen();
        if !(0..RHO_GRID.len() as isize).contains(&k) {
            return;
        }
        let k = k as usize;
        let mut basis = self.basis.clone();
        basis.set_rho(cache.rho_base * RHO_GRID[k]);
        let basis_cols = basis.columns(&cache.x_col);
        let n = target.len();
        let tree_fit: Vec<Vec<f64>> = self
            .forest
            .trees
            .iter()
            .enumerate()
            .map(|(m, t)| {
                let raw = cache.forest.raw_tree_fit(m, &t.leaf_values());
                raw.iter().zip(&basis_cols[m]).map(|(a, b)| a * b).collect()
            })
            .collect();
        let mut fit = vec![0.0; n];
        for f in &tree_fit {
            for (a, b) in fit.iter_mut().zip(f) {
                *a += b;
            }
        }
        let ssr = |f: &[f64]| -> f64 {
            target.iter().zip(f).map(|(t, v)| (t - v) * (t - v)).sum()
        };
        let log_alpha = -(ssr(&fit) - ssr(&cache.forest.fit)) / (2.0 * sigma2);
        if u.ln() < log_alpha {
            self.basis = basis;
            cache.basis_cols = basis_cols;
            cache.forest.tree_fit = tree_fit;
            cache.forest.fit = fit;
            cache.rho_index = k;
        }
    }
}

/// Multipliers of the length-scale grid.
const RHO_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// `Σ_m B_m(u) T_m(w)`.
pub fn predict_interaction(forest: &InteractionForest, u: f64, w: &[f64]) -> f64 {
    let routing = forest.forest.routing();
    forest
        .forest
        .trees
        .iter()
        .enumerate()
        .map(|(m, t)| forest.basis.eval(m, u) * t.predict(w, routing))
        .sum()
}

/// Training-point state for an interaction ensemble.
#[derive(Clone, Debug)]
pub struct InteractionCache {
    pub forest: ForestCache,
    pub basis_cols: Vec<Vec<f64>>,
    x_col: Vec<f64>,
    rho_base: f64,
    rho_index: usize,
}

impl InteractionCache {
    pub fn new(forest: &InteractionForest, x_col: &[f64], w_cols: &[Vec<f64>]) -> Self {
        let basis_cols = forest.basis.columns(x_col);
        let inputs = Inputs {
            cols: w_cols,
            multipliers: Some(&basis_cols),
        };
        let cache = ForestCache::new(&forest.forest, &inputs);
        Self {
            forest: cache,
            basis_cols,
            x_col: x_col.to_vec(),
            rho_base: forest.basis.rho,
            rho_index: 2,
        }
    }

    pub fn fit(&self) -> &[f64] {
        &self.forest.fit
    }
}

/// Monte-Carlo draw of the prior covariance kernel, used in tests:
/// one fresh basis per call.
pub fn sample_basis_product<R: Rng + ?Sized>(u: f64, v: f64, rho: f64, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    let b = rng.gen_range(0.0..std::f64::consts::TAU);
    basis_eval(z / rho, b, u) * basis_eval(z / rho, b, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trees::Tree;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basis_values() {
        assert!((basis_eval(0.0, 0.0, 0.37) - 2f64.sqrt()).abs() < 1e-15);
        assert!((basis_eval(std::f64::consts::PI, 0.0, 1.0) + 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn limiting_kernel_is_squared_exponential() {
        // E[B(u)B(v)] = exp(-(u-v)²/(2ρ²)); the ensemble covariance is
        // σ_μ² times this, so checking the per-feature expectation suffices.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rho = 0.4;
        let draws = 100_000;
        for &(u, v) in &[(0.0, 0.0), (0.1, 0.5), (0.2, 0.9), (0.0, 1.0), (0.5, 0.6)] {
            let xs: Vec<f64> = (0..draws)
                .map(|_| sample_basis_product(u, v, rho, &mut rng))
                .collect();
            let m = crate::stats::mean(&xs);
            let se = crate::stats::sample_sd(&xs) / (draws as f64).sqrt();
            let target = (-((u - v) * (u - v)) / (2.0 * rho * rho)).exp();
            assert!((m - target).abs() < 3.0 * se + 1e-12, "({u},{v}): {m} vs {target}");
        }
    }

    #[test]
    fn prediction_is_sum_of_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let n = 60;
        let x: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let w: Vec<Vec<f64>> = (0..2).map(|_| (0..n).map(|_| rng.gen()).collect()).collect();
        let target: Vec<f64> = (0..n).map(|i| x[i] * (w[0][i] - 0.5)).collect();
        let mut f = InteractionForest::new(2, InteractionPrior::with_trees(5, 1.0), &mut rng);
        assert_eq!(f.predict(0.3, &[0.2, 0.8]), 0.0);
        let mut cache = InteractionCache::new(&f, &x, &w);
        for _ in 0..10 {
            f.sweep(&mut cache, &w, &target, 0.2, &mut rng).unwrap();
        }
        let routing = f.forest.routing();
        for _ in 0..100 {
            let u: f64 = rng.gen();
            let v = [rng.gen::<f64>(), rng.gen::<f64>()];
            let manual: f64 = (0..5)
                .map(|m| {
                    2f64.sqrt()
                        * (f.basis.omega[m] * u + f.basis.phase[m]).cos()
                        * f.forest.trees[m].predict(&v, routing)
                })
                .sum();
            assert!((f.predict(u, &v) - manual).abs() < 1e-12);
        }
        for i in 0..n {
            let v = [w[0][i], w[1][i]];
            assert!((cache.fit()[i] - f.predict(x[i], &v)).abs() < 1e-10);
        }
    }

    #[test]
    fn single_leaf_flat_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut f = InteractionForest::new(1, InteractionPrior::with_trees(1, 1.0), &mut rng);
        f.basis.omega[0] = 0.0;
        f.basis.phase[0] = 0.0;
        f.forest.trees[0] = Tree::leaf(1.0);
        for u in [0.0, 0.4, 1.0] {
            assert!((f.predict(u, &[0.7]) - 2f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn flat_basis_reduces_to_scaled_softbart() {
        let n = 50;
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let w: Vec<Vec<f64>> = vec![(0..n).map(|_| rng.gen()).collect()];
        let target: Vec<f64> = w[0].iter().map(|v| if *v > 0.4 { 1.0 } else { -0.5 }).collect();

        let prior = InteractionPrior::with_trees(4, 1.0);
        let mut inter = InteractionForest::new(1, prior.clone(), &mut rng);
        inter.basis.omega = vec![0.0; 4];
        inter.basis.phase = vec![0.0; 4];
        let s2 = 2f64.sqrt();
        let mut plain_prior = prior.forest.clone();
        plain_prior.sigma_mu_scale *= s2;
        plain_prior.sigma_mu_cap = plain_prior.sigma_mu_cap.map(|c| c * s2);
        let mut plain = Forest::new(1, plain_prior);
        plain.sigma_mu = inter.forest.sigma_mu * s2;

        let mut ci = InteractionCache::new(&inter, &x, &w);
        let inputs = Inputs::plain(&w);
        let mut cp = ForestCache::new(&plain, &inputs);
        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..30 {
            inter.sweep(&mut ci, &w, &target, 0.3, &mut r1).unwrap();
            plain.sweep(&mut cp, &inputs, &target, 0.3, &mut r2).unwrap();
            for i in 0..n {
                assert!((ci.fit()[i] - cp.fit[i]).abs() < 1e-9);
            }
        }
        assert!((inter.forest.sigma_mu * s2 - plain.sigma_mu).abs() < 1e-12);
    }

    #[test]
    fn recovers_step_sign_pattern() {
        let n = 300;
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let w: Vec<Vec<f64>> = vec![(0..n).map(|_| rng.gen()).collect()];
        let bx = |u: f64| basis_eval(2.0, 0.3, u);
        let step = |v: f64| if v > 0.5 { 1.0 } else { -1.0 };
        let target: Vec<f64> = (0..n)
            .map(|i| bx(x[i]) * step(w[0][i]) + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut f = InteractionForest::new(1, InteractionPrior::with_trees(1, 1.0), &mut rng);
        f.basis.omega[0] = 2.0;
        f.basis.phase[0] = 0.3;
        let mut cache = InteractionCache::new(&f, &x, &w);
        let grid: Vec<f64> = (0..10).map(|k| 0.05 + 0.1 * k as f64).collect();
        let mut mean = vec![0.0; grid.len()];
        for it in 0..600 {
            f.sweep(&mut cache, &w, &target, 0.01, &mut rng).unwrap();
            if it >= 300 {
                let tp: Vec<f64> = grid.iter().map(|g| f.tree_predictions(&[*g])[0]).collect();
                for (a, b) in mean.iter_mut().zip(tp) {
                    *a += b;
                }
            }
        }
        for (g, m) in grid.iter().zip(&mean) {
            assert_eq!(m.signum(), step(*g), "w={g}: {m}");
        }
    }

    #[test]
    fn sigma_mu_never_exceeds_cap() {
        let n = 80;
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let x: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let w: Vec<Vec<f64>> = vec![(0..n).map(|_| rng.gen()).collect()];
        // a large signal pushes σ_μ upward against the cap
        let target: Vec<f64> = (0..n).map(|i| 20.0 * x[i] * w[0][i]).collect();
        let mut prior = InteractionPrior::with_trees(20, 1.0);
        prior.rho_update = true;
        let cap = prior.forest.sigma_mu_cap.unwrap();
        let mut f = InteractionForest::new(1, prior, &mut rng);
        let mut cache = InteractionCache::new(&f, &x, &w);
        for _ in 0..100 {
            f.sweep(&mut cache, &w, &target, 1.0, &mut rng).unwrap();
            assert!(f.forest.sigma_mu <= cap);
            assert!(f.forest.sigma_mu_step(cap * 1.01, 1e-300) == false);
        }
        for i in 0..n {
            assert!((cache.fit()[i] - f.predict(x[i], &[w[0][i]])).abs() < 1e-9);
        }
    }
}
