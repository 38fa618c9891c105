//! Causal summaries of a fitted model: conditional and average effects
//! of an exposure contrast, total heterogeneity `φ`, the leave-one-out
//! quantities `φ_j` and the importance measures `ψ_j = 1 − φ_j / φ`.
//!
//! Heterogeneity is measured on the τ-matrix `τ_{w0}(X_l, W_k)`: `φ` is
//! the mean over exposure rows of the sample variance across covariate
//! columns, and `φ_j` is the same after replacing `τ` by its conditional
//! expectation over `X_j` given the other covariates.
//!
//! Two routes compute these. [`TauSurface`] evaluates any surface
//! pointwise (cubic cost, used for small problems and as a cross-check).
//! The fast route exploits the separable form of the model,
//! `τ(x, w) = Σ_t D_t(w) Π_{j ∈ S_t} a_{tj}(x_j)`, so that each block's
//! `φ` becomes `trace(C S)` with `C` the covariance of the covariate
//! features and `S` the second moment of the exposure contrasts.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::NormalizationInfo;
use crate::error::{Error, Result};
use crate::model::{PosteriorDraw, PosteriorSamples};
use crate::stats::{gauss_hermite, ols, sample_sd, sample_variance, Matrix, Summary};
use crate::tsbart::CosineBasis;

/// Two exposure levels on the raw scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureContrast {
    pub w0: Vec<f64>,
    pub w1: Vec<f64>,
}

/// Retained draws pooled over chains, with the shared normalization.
pub struct DrawSet<'a> {
    pub info: &'a NormalizationInfo,
    pub draws: Vec<&'a PosteriorDraw>,
}

impl<'a> DrawSet<'a> {
    pub fn from_chains(chains: &'a [PosteriorSamples]) -> Result<Self> {
        let first = chains.first().ok_or(Error::EmptyDraws)?;
        let draws: Vec<&PosteriorDraw> = chains.iter().flat_map(|c| c.draws.iter()).collect();
        if draws.is_empty() {
            return Err(Error::EmptyDraws);
        }
        Ok(Self {
            info: &first.normalization,
            draws,
        })
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// One draw's contrast reduced to its separable form:
/// `τ(x) = s · (Δg + Σ_{jm} B_{jm}(x_j) ΔT_{jm})` with `x` normalized.
pub struct DrawContrast<'a> {
    draw: &'a PosteriorDraw,
    scale: f64,
    dg: f64,
    dt: Vec<Vec<f64>>,
}

impl<'a> DrawContrast<'a> {
    /// `w1`, `w0` on the normalized scale.
    pub fn new(draw: &'a PosteriorDraw, info: &NormalizationInfo, w1: &[f64], w0: &[f64]) -> Self {
        let st = &draw.state;
        let dg = st.forest_g.predict(w1) - st.forest_g.predict(w0);
        let dt = st
            .interactions
            .iter()
            .map(|h| {
                let a = h.tree_predictions(w1);
                let b = h.tree_predictions(w0);
                a.iter().zip(&b).map(|(a, b)| a - b).collect()
            })
            .collect();
        Self {
            draw,
            scale: info.y_scale,
            dg,
            dt,
        }
    }

    pub fn tau(&self, x: &[f64]) -> f64 {
        let mut v = self.dg;
        for (j, h) in self.draw.state.interactions.iter().enumerate() {
            for (m, d) in self.dt[j].iter().enumerate() {
                v += h.basis.eval(m, x[j]) * d;
            }
        }
        self.scale * v
    }
}

fn check_len(v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::InvalidDataset(format!(
            "expected a vector of length {len}, got {}",
            v.len()
        )));
    }
    Ok(())
}

/// Per-draw CATE at a raw covariate point.
pub fn cate_draws(set: &DrawSet<'_>, x: &[f64], contrast: &ExposureContrast) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::EmptyDraws);
    }
    check_len(x, set.info.x_maps.len())?;
    let xn = set.info.normalize_x(x);
    let (w1, w0) = (
        set.info.normalize_w(&contrast.w1),
        set.info.normalize_w(&contrast.w0),
    );
    Ok(set
        .draws
        .iter()
        .map(|d| DrawContrast::new(d, set.info, &w1, &w0).tau(&xn))
        .collect())
}

pub fn cate(set: &DrawSet<'_>, x: &[f64], contrast: &ExposureContrast) -> Result<Summary> {
    Ok(Summary::from_draws(&cate_draws(set, x, contrast)?, 0.95))
}

/// CATE draws at many raw points: `[point][draw]`.
pub fn cate_many(
    set: &DrawSet<'_>,
    xs: &[Vec<f64>],
    contrast: &ExposureContrast,
) -> Result<Vec<Vec<f64>>> {
    if set.is_empty() {
        return Err(Error::EmptyDraws);
    }
    let (w1, w0) = (
        set.info.normalize_w(&contrast.w1),
        set.info.normalize_w(&contrast.w0),
    );
    let xn: Vec<Vec<f64>> = xs.iter().map(|x| set.info.normalize_x(x)).collect();
    let per_draw: Vec<Vec<f64>> = set
        .draws
        .par_iter()
        .map(|d| {
            let c = DrawContrast::new(d, set.info, &w1, &w0);
            xn.iter().map(|x| c.tau(x)).collect()
        })
        .collect();
    Ok((0..xs.len())
        .map(|i| per_draw.iter().map(|d| d[i]).collect())
        .collect())
}

/// Per-draw ATE over the rows of a raw covariate matrix.
pub fn ate_draws(set: &DrawSet<'_>, x: &Matrix, contrast: &ExposureContrast) -> Result<Vec<f64>> {
    let rows: Vec<Vec<f64>> = x.rows().map(<[f64]>::to_vec).collect();
    let per_point = cate_many(set, &rows, contrast)?;
    let n = rows.len() as f64;
    Ok((0..set.len())
        .map(|d| per_point.iter().map(|p| p[d]).sum::<f64>() / n)
        .collect())
}

pub fn ate(set: &DrawSet<'_>, x: &Matrix, contrast: &ExposureContrast) -> Result<Summary> {
    Ok(Summary::from_draws(&ate_draws(set, x, contrast)?, 0.95))
}

/// A block of the τ-matrix: entry `(k, l)` is `τ_{w0}(X_l, W_k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauMatrix {
    pub values: Matrix,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

/// `τ_{w0}(x, w)` on the raw scale.
pub trait TauSurface: Sync {
    fn tau(&self, x: &[f64], w: &[f64]) -> f64;
}

impl<F: Fn(&[f64], &[f64]) -> f64 + Sync> TauSurface for F {
    fn tau(&self, x: &[f64], w: &[f64]) -> f64 {
        self(x, w)
    }
}

/// A posterior draw seen as a surface, evaluated through the full mean.
pub struct DrawSurface<'a> {
    pub draw: &'a PosteriorDraw,
    pub info: &'a NormalizationInfo,
    w0: Vec<f64>,
}

impl<'a> DrawSurface<'a> {
    pub fn new(draw: &'a PosteriorDraw, info: &'a NormalizationInfo, w0_raw: &[f64]) -> Self {
        Self {
            draw,
            info,
            w0: info.normalize_w(w0_raw),
        }
    }
}

impl TauSurface for DrawSurface<'_> {
    fn tau(&self, x: &[f64], w: &[f64]) -> f64 {
        let xn = self.info.normalize_x(x);
        let wn = self.info.normalize_w(w);
        self.draw.predict_mu(self.info, &xn, &wn) - self.draw.predict_mu(self.info, &xn, &self.w0)
    }
}

pub fn tau_matrix(
    surface: &dyn TauSurface,
    x: &Matrix,
    w: &Matrix,
    rows: &[usize],
    cols: &[usize],
) -> Result<TauMatrix> {
    for &i in rows.iter().chain(cols) {
        if i >= x.nrows() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: x.nrows(),
            });
        }
    }
    let mut values = Matrix::zeros(rows.len(), cols.len());
    for (a, &k) in rows.iter().enumerate() {
        for (b, &l) in cols.iter().enumerate() {
            values.set(a, b, surface.tau(x.row(l), w.row(k)));
        }
    }
    Ok(TauMatrix {
        values,
        rows: rows.to_vec(),
        cols: cols.to_vec(),
    })
}

/// Mean over rows of each row's sample variance.
pub fn total_heterogeneity(m: &Matrix) -> Result<f64> {
    if m.ncols() < 2 {
        return Err(Error::SingleColumn);
    }
    Ok(m.rows().map(sample_variance).sum::<f64>() / m.nrows() as f64)
}

/// Conditional-expectation smoother used to integrate covariates out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Smoother {
    /// Sample average over the block (covariates treated as independent).
    Mean,
    /// Nadaraya-Watson with a Gaussian product kernel.
    Kernel,
    /// Gaussian linear model for the smoothed covariates given the rest.
    Regression,
}

impl std::str::FromStr for Smoother {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Smoother::Mean),
            "kernel" => Ok(Smoother::Kernel),
            "regression" => Ok(Smoother::Regression),
            other => Err(Error::InvalidConfig(format!("smoother: unknown method {other:?}"))),
        }
    }
}

/// Number of Gauss-Hermite nodes for one smoothed covariate.
pub const REGRESSION_NODES: usize = 25;
/// Cap on the tensor grid size for grouped regression smoothing.
pub const REGRESSION_GRID_CAP: usize = 625;

/// Fitted Gaussian linear model of the covariates in a unit given the
/// others, over all observations.
#[derive(Clone, Debug)]
struct RegressionModel {
    /// Per observation, conditional means of the unit's covariates.
    cond_mean: Vec<Vec<f64>>,
    /// Quadrature points as offsets `L z` with weights.
    offsets: Vec<(Vec<f64>, f64)>,
}

impl RegressionModel {
    fn fit(x: &Matrix, unit: &[usize]) -> Result<Self> {
        let n = x.nrows();
        let others: Vec<usize> = (0..x.ncols()).filter(|j| !unit.contains(j)).collect();
        let design = DMatrix::from_fn(n, others.len() + 1, |i, c| {
            if c == 0 {
                1.0
            } else {
                x.get(i, others[c - 1])
            }
        });
        let s = unit.len();
        let mut cond_mean = vec![vec![0.0; s]; n];
        let mut resid = vec![vec![0.0; s]; n];
        for (a, &j) in unit.iter().enumerate() {
            let col = x.column(j);
            if !(sample_sd(&col) > 0.0) {
                return Err(Error::ConstantCovariate(j));
            }
            let fit = ols(&design, &col).ok_or_else(|| Error::RankDeficient(format!("covariate {}", j + 1)))?;
            for i in 0..n {
                cond_mean[i][a] = fit.fitted[i];
                resid[i][a] = col[i] - fit.fitted[i];
            }
        }
        let dof = (n - others.len() - 1) as f64;
        let cov = DMatrix::from_fn(s, s, |a, b| {
            resid.iter().map(|r| r[a] * r[b]).sum::<f64>() / dof
        });
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::RankDeficient(format!("residuals of unit {unit:?}")))?;
        let l = chol.l();

        let k = if s == 1 {
            REGRESSION_NODES
        } else {
            let mut k = 1;
            while (k + 1usize).pow(s as u32) <= REGRESSION_GRID_CAP {
                k += 1;
            }
            k.max(2)
        };
        let (nodes, weights) = gauss_hermite(k);
        let mut offsets = Vec::with_capacity(k.pow(s as u32));
        let mut idx = vec![0usize; s];
        loop {
            let z: Vec<f64> = idx.iter().map(|&i| nodes[i]).collect();
            let wgt: f64 = idx.iter().map(|&i| weights[i]).product();
            let off: Vec<f64> = (0..s)
                .map(|a| (0..=a).map(|b| l[(a, b)] * z[b]).sum())
                .collect();
            offsets.push((off, wgt));
            let mut pos = 0;
            loop {
                if pos == s {
                    return Ok(Self { cond_mean, offsets });
                }
                idx[pos] += 1;
                if idx[pos] < k {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
            }
        }
    }
}

/// Smoothing operator for one unit (covariate or group) within a block:
/// for each column observation `l`, a list of replacement values of the
/// unit's covariates with weights summing to one.
struct UnitSmoother {
    unit: Vec<usize>,
    kind: UnitKind,
}

enum UnitKind {
    /// The block's own values, equal weights; independent of `l`.
    Mean,
    /// Row-normalized weights over the block.
    Kernel(Vec<Vec<f64>>),
    /// Conditional means per block position plus shared offsets.
    Regression {
        means: Vec<Vec<f64>>,
        offsets: Vec<(Vec<f64>, f64)>,
    },
}

impl UnitSmoother {
    fn new(
        x: &Matrix,
        block: &[usize],
        unit: &[usize],
        smoother: Smoother,
        regression: Option<&RegressionModel>,
    ) -> Result<Self> {
        let kind = match smoother {
            Smoother::Mean => UnitKind::Mean,
            Smoother::Kernel => UnitKind::Kernel(kernel_weights(x, block, unit)?),
            Smoother::Regression => {
                let model = regression.expect("regression model prepared");
                UnitKind::Regression {
                    means: block.iter().map(|&i| model.cond_mean[i].clone()).collect(),
                    offsets: model.offsets.clone(),
                }
            }
        };
        Ok(Self {
            unit: unit.to_vec(),
            kind,
        })
    }

    /// Replacement points and weights for block position `a`.
    fn points(&self, x: &Matrix, block: &[usize], a: usize) -> Vec<(Vec<f64>, f64)> {
        let pick = |i: usize| -> Vec<f64> { self.unit.iter().map(|&j| x.get(i, j)).collect() };
        match &self.kind {
            UnitKind::Mean => {
                let w = 1.0 / block.len() as f64;
                block.iter().map(|&i| (pick(i), w)).collect()
            }
            UnitKind::Kernel(k) => block
                .iter()
                .zip(&k[a])
                .filter(|(_, w)| **w > 0.0)
                .map(|(&i, &w)| (pick(i), w))
                .collect(),
            UnitKind::Regression { means, offsets } => offsets
                .iter()
                .map(|(off, w)| {
                    (
                        means[a].iter().zip(off).map(|(m, o)| m + o).collect(),
                        *w,
                    )
                })
                .collect(),
        }
    }
}

/// Silverman's rule for a `d`-dimensional Gaussian product kernel.
pub fn silverman_bandwidth(sd: f64, n: usize, d: usize) -> f64 {
    let d = d as f64;
    (4.0 / (d + 2.0)).powf(1.0 / (d + 4.0)) * (n as f64).powf(-1.0 / (d + 4.0)) * sd
}

/// Row-normalized Gaussian product-kernel weights over the covariates
/// outside `unit`, within a block.
fn kernel_weights(x: &Matrix, block: &[usize], unit: &[usize]) -> Result<Vec<Vec<f64>>> {
    let others: Vec<usize> = (0..x.ncols())
        .filter(|j| !unit.contains(j))
        .filter(|&j| {
            let col: Vec<f64> = block.iter().map(|&i| x.get(i, j)).collect();
            sample_sd(&col) > 0.0
        })
        .collect();
    let nb = block.len();
    let d = others.len();
    let bw: Vec<f64> = others
        .iter()
        .map(|&j| {
            let col: Vec<f64> = block.iter().map(|&i| x.get(i, j)).collect();
            silverman_bandwidth(sample_sd(&col), nb, d)
        })
        .collect();
    let mut out = Vec::with_capacity(nb);
    for (a, &l) in block.iter().enumerate() {
        let mut row: Vec<f64> = block
            .iter()
            .map(|&i| {
                let q: f64 = others
                    .iter()
                    .zip(&bw)
                    .map(|(&j, h)| {
                        let z = (x.get(i, j) - x.get(l, j)) / h;
                        z * z
                    })
                    .sum();
                (-0.5 * q).exp()
            })
            .collect();
        let total: f64 = row.iter().sum();
        if !(total > 0.0) {
            return Err(Error::ZeroKernelWeights(a));
        }
        row.iter_mut().for_each(|v| *v /= total);
        out.push(row);
    }
    Ok(out)
}

/// Options for importance computations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VimOptions {
    pub smoother: Smoother,
    /// Number of blocks; `None` uses `ceil(n / 500)`.
    pub blocks: Option<usize>,
    /// Covariate groups; `None` means one unit per covariate.
    pub groups: Option<Vec<Vec<usize>>>,
    /// Seed of the block shuffle.
    pub seed: u64,
}

impl Default for VimOptions {
    fn default() -> Self {
        Self {
            smoother: Smoother::Mean,
            blocks: None,
            groups: None,
            seed: 0,
        }
    }
}

pub fn default_blocks(n: usize) -> usize {
    n.div_ceil(500).max(1)
}

/// Seeded shuffle of `0..n` split into `k` contiguous blocks whose sizes
/// differ by at most one.
pub fn make_blocks(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for b in 0..k {
        let len = base + usize::from(b < extra);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Resolved blocks, units and regression models for a covariate matrix.
struct VimPlan {
    blocks: Vec<Vec<usize>>,
    units: Vec<Vec<usize>>,
    regression: Vec<Option<RegressionModel>>,
    smoother: Smoother,
}

impl VimPlan {
    fn new(x: &Matrix, opts: &VimOptions) -> Result<Self> {
        let n = x.nrows();
        let p = x.ncols();
        let k = opts.blocks.unwrap_or_else(|| default_blocks(n));
        if k == 0 || n < 2 * k {
            return Err(Error::InvalidConfig(format!(
                "blocks: need 1 <= K and n >= 2K (n = {n}, K = {k})"
            )));
        }
        let units = match &opts.groups {
            Some(g) => {
                for unit in g {
                    if unit.is_empty() {
                        return Err(Error::InvalidConfig("groups: empty group".into()));
                    }
                    for &j in unit {
                        if j >= p {
                            return Err(Error::IndexOutOfRange { index: j, len: p });
                        }
                    }
                }
                g.clone()
            }
            None => (0..p).map(|j| vec![j]).collect(),
        };
        let regression = units
            .iter()
            .map(|u| match opts.smoother {
                Smoother::Regression => RegressionModel::fit(x, u).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks: make_blocks(n, k, opts.seed),
            units,
            regression,
            smoother: opts.smoother,
        })
    }

    fn unit_smoother(&self, x: &Matrix, b: usize, u: usize) -> Result<UnitSmoother> {
        UnitSmoother::new(
            x,
            &self.blocks[b],
            &self.units[u],
            self.smoother,
            self.regression[u].as_ref(),
        )
    }
}

/// `φ` and `φ_u` for one surface (or one draw).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityDraw {
    pub phi: f64,
    pub phi_unit: Vec<f64>,
}

impl HeterogeneityDraw {
    /// `1 − φ_u / φ`, or `None` when `φ` is numerically zero.
    pub fn psi(&self) -> Option<Vec<f64>> {
        if self.phi < PHI_FLOOR {
            return None;
        }
        Some(self.phi_unit.iter().map(|p| 1.0 - p / self.phi).collect())
    }
}

/// Draws with `φ` below this are treated as having no heterogeneity.
pub const PHI_FLOOR: f64 = 1e-12;

/// Smoothed τ-matrix over one block, generic route: entry `(k, l)` is the
/// conditional expectation of `τ(X_l, W_k)` over the unit's covariates.
pub fn smooth_tau_matrix(
    surface: &dyn TauSurface,
    x: &Matrix,
    w: &Matrix,
    block: &[usize],
    unit: &[usize],
    smoother: Smoother,
) -> Result<Matrix> {
    let regression = match smoother {
        Smoother::Regression => Some(RegressionModel::fit(x, unit)?),
        _ => None,
    };
    let us = UnitSmoother::new(x, block, unit, smoother, regression.as_ref())?;
    Ok(smooth_with(surface, x, w, block, &us))
}

fn smooth_with(
    surface: &dyn TauSurface,
    x: &Matrix,
    w: &Matrix,
    block: &[usize],
    us: &UnitSmoother,
) -> Matrix {
    let nb = block.len();
    let mut out = Matrix::zeros(nb, nb);
    for (a, &l) in block.iter().enumerate() {
        let pts = us.points(x, block, a);
        let mut xl = x.row(l).to_vec();
        for (c, &k) in block.iter().enumerate() {
            let wk = w.row(k);
            let mut acc = 0.0;
            for (pt, wt) in &pts {
                for (&j, v) in us.unit.iter().zip(pt) {
                    xl[j] = *v;
                }
                acc += wt * surface.tau(&xl, wk);
            }
            out.set(c, a, acc);
        }
    }
    out
}

/// Generic-route heterogeneity of a surface with blocking.
pub fn heterogeneity_surface(
    surface: &dyn TauSurface,
    x: &Matrix,
    w: &Matrix,
    opts: &VimOptions,
) -> Result<HeterogeneityDraw> {
    let plan = VimPlan::new(x, opts)?;
    let k = plan.blocks.len() as f64;
    let mut phi = 0.0;
    let mut phi_unit = vec![0.0; plan.units.len()];
    for (b, block) in plan.blocks.iter().enumerate() {
        let tm = tau_matrix(surface, x, w, block, block)?;
        phi += total_heterogeneity(&tm.values)? / k;
        for (u, pu) in phi_unit.iter_mut().enumerate() {
            let us = plan.unit_smoother(x, b, u)?;
            let sm = smooth_with(surface, x, w, block, &us);
            *pu += total_heterogeneity(&sm)? / k;
        }
    }
    Ok(HeterogeneityDraw { phi, phi_unit })
}

/// Covariate side of a separable surface
/// `τ(x, w) = Σ_t D_t(w) Π_{j ∈ S_t} a_{tj}(x_j)` on the raw scale.
/// Terms with empty support are constant in `x` and can be left out.
pub trait SeparableFeatures: Sync {
    fn n_terms(&self) -> usize;
    fn support(&self, t: usize) -> &[usize];
    fn factor(&self, t: usize, j: usize, xj: f64) -> f64;
}

/// Feature covariances of one block: unsmoothed and per unit.
pub struct BlockCovariances {
    pub full: DMatrix<f64>,
    pub smoothed: Vec<DMatrix<f64>>,
}

fn product_factor(feat: &dyn SeparableFeatures, t: usize, js: &[usize], vals: &[f64]) -> f64 {
    js.iter().zip(vals).map(|(&j, &v)| feat.factor(t, j, v)).product()
}

fn covariance(a: &DMatrix<f64>) -> DMatrix<f64> {
    let nb = a.nrows();
    let mut c = a.clone();
    for mut col in c.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    c.tr_mul(&c) / (nb as f64 - 1.0)
}

fn block_covariances(
    feat: &dyn SeparableFeatures,
    x: &Matrix,
    plan: &VimPlan,
    b: usize,
) -> Result<BlockCovariances> {
    let block = &plan.blocks[b];
    let nb = block.len();
    let nt = feat.n_terms();
    let features = DMatrix::from_fn(nb, nt, |a, t| {
        let l = block[a];
        let s = feat.support(t);
        let vals: Vec<f64> = s.iter().map(|&j| x.get(l, j)).collect();
        product_factor(feat, t, s, &vals)
    });
    let full = covariance(&features);
    let mut smoothed = Vec::with_capacity(plan.units.len());
    for (u, unit) in plan.units.iter().enumerate() {
        let us = plan.unit_smoother(x, b, u)?;
        // per term: which support members are smoothed, and which stay
        let split: Vec<(Vec<usize>, Vec<usize>)> = (0..nt)
            .map(|t| {
                feat.support(t)
                    .iter()
                    .partition::<Vec<usize>, _>(|j| unit.contains(j))
            })
            .collect();
        // position of each smoothed covariate within the unit
        let pos = |j: usize| unit.iter().position(|&k| k == j).expect("member");
        let inner_at = |pts: &[(Vec<f64>, f64)], t: usize| -> f64 {
            let (sm, _) = &split[t];
            pts.iter()
                .map(|(pt, wt)| {
                    let vals: Vec<f64> = sm.iter().map(|&j| pt[pos(j)]).collect();
                    wt * product_factor(feat, t, sm, &vals)
                })
                .sum()
        };
        let mean_inner: Option<Vec<f64>> = match us.kind {
            UnitKind::Mean => {
                let pts = us.points(x, block, 0);
                Some((0..nt).map(|t| inner_at(&pts, t)).collect())
            }
            _ => None,
        };
        let mut a_s = features.clone();
        for a in 0..nb {
            let l = block[a];
            let pts = if mean_inner.is_none() {
                us.points(x, block, a)
            } else {
                Vec::new()
            };
            for t in 0..nt {
                let (sm, rest) = &split[t];
                if sm.is_empty() {
                    continue;
                }
                let vals: Vec<f64> = rest.iter().map(|&j| x.get(l, j)).collect();
                let outer = product_factor(feat, t, rest, &vals);
                let inner = match &mean_inner {
                    Some(m) => m[t],
                    None => inner_at(&pts, t),
                };
                a_s[(a, t)] = outer * inner;
            }
        }
        smoothed.push(covariance(&a_s));
    }
    Ok(BlockCovariances { full, smoothed })
}

/// `trace(C S)` for symmetric `C`, `S`.
fn trace_product(c: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    c.iter().zip(s.iter()).map(|(a, b)| a * b).sum()
}

/// Heterogeneity from precomputed block covariances and per-block
/// exposure contrast rows `D` (block size × terms).
fn heterogeneity_from(covs: &[BlockCovariances], d_blocks: &[DMatrix<f64>]) -> HeterogeneityDraw {
    let k = covs.len() as f64;
    let units = covs[0].smoothed.len();
    let mut phi = 0.0;
    let mut phi_unit = vec![0.0; units];
    for (cov, d) in covs.iter().zip(d_blocks) {
        let s = d.tr_mul(d) / d.nrows() as f64;
        phi += trace_product(&cov.full, &s) / k;
        for (pu, c) in phi_unit.iter_mut().zip(&cov.smoothed) {
            *pu += trace_product(c, &s) / k;
        }
    }
    HeterogeneityDraw { phi, phi_unit }
}

/// Fast-route heterogeneity of a separable surface. `contrast_rows`
/// returns `D_t(W_k) − D_t(w0)` for every training row `k`, as an
/// `n × terms` matrix.
pub fn heterogeneity_separable(
    feat: &dyn SeparableFeatures,
    x: &Matrix,
    contrast_rows: &DMatrix<f64>,
    opts: &VimOptions,
) -> Result<HeterogeneityDraw> {
    let plan = VimPlan::new(x, opts)?;
    let covs = (0..plan.blocks.len())
        .map(|b| block_covariances(feat, x, &plan, b))
        .collect::<Result<Vec<_>>>()?;
    let d_blocks: Vec<DMatrix<f64>> = plan
        .blocks
        .iter()
        .map(|blk| contrast_rows.select_rows(blk.iter()))
        .collect();
    Ok(heterogeneity_from(&covs, &d_blocks))
}

/// Covariate features of a fitted model: `B_{jm}` composed with the
/// quantile map of covariate `j`, one term per interaction tree.
pub struct ModelFeatures<'a> {
    info: &'a NormalizationInfo,
    bases: Vec<CosineBasis>,
    terms: Vec<(usize, usize)>,
    supports: Vec<[usize; 1]>,
}

impl<'a> ModelFeatures<'a> {
    pub fn new(draw: &PosteriorDraw, info: &'a NormalizationInfo) -> Self {
        let bases: Vec<CosineBasis> = draw
            .state
            .interactions
            .iter()
            .map(|h| h.basis.clone())
            .collect();
        let terms: Vec<(usize, usize)> = bases
            .iter()
            .enumerate()
            .flat_map(|(j, b)| (0..b.len()).map(move |m| (j, m)))
            .collect();
        let supports = terms.iter().map(|&(j, _)| [j]).collect();
        Self {
            info,
            bases,
            terms,
            supports,
        }
    }

    fn matches(&self, draw: &PosteriorDraw) -> bool {
        draw.state
            .interactions
            .iter()
            .zip(&self.bases)
            .all(|(h, b)| &h.basis == b)
    }

    /// `y_scale (T_{jm}(W_k) − T_{jm}(w0))` for every row of normalized `w`.
    fn contrast_rows(&self, draw: &PosteriorDraw, w_norm: &[Vec<f64>], w0: &[f64]) -> DMatrix<f64> {
        let scale = self.info.y_scale;
        let base: Vec<Vec<f64>> = draw
            .state
            .interactions
            .iter()
            .map(|h| h.tree_predictions(w0))
            .collect();
        let mut d = DMatrix::zeros(w_norm.len(), self.terms.len());
        for (k, wk) in w_norm.iter().enumerate() {
            let mut t = 0;
            for (j, h) in draw.state.interactions.iter().enumerate() {
                for (m, v) in h.tree_predictions(wk).iter().enumerate() {
                    d[(k, t)] = scale * (v - base[j][m]);
                    t += 1;
                }
            }
        }
        d
    }
}

impl SeparableFeatures for ModelFeatures<'_> {
    fn n_terms(&self) -> usize {
        self.terms.len()
    }

    fn support(&self, t: usize) -> &[usize] {
        &self.supports[t]
    }

    fn factor(&self, t: usize, j: usize, xj: f64) -> f64 {
        let (jj, m) = self.terms[t];
        debug_assert_eq!(j, jj);
        self.bases[jj].eval(m, self.info.x_maps[jj].forward(xj))
    }
}

/// Importance results over posterior draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VimResult {
    pub smoother: Smoother,
    pub blocks: usize,
    pub units: Vec<Vec<usize>>,
    pub draws: Vec<HeterogeneityDraw>,
}

impl VimResult {
    /// Unclamped `ψ` for draws with defined importance.
    pub fn psi_raw(&self) -> Vec<Vec<f64>> {
        self.draws.iter().filter_map(HeterogeneityDraw::psi).collect()
    }

    /// `ψ` clamped to [0, 1], defined draws only.
    pub fn psi(&self) -> Vec<Vec<f64>> {
        self.psi_raw()
            .into_iter()
            .map(|v| v.into_iter().map(|p| p.clamp(0.0, 1.0)).collect())
            .collect()
    }

    pub fn undefined(&self) -> usize {
        self.draws.iter().filter(|d| d.psi().is_none()).count()
    }

    pub fn phi(&self) -> Vec<f64> {
        self.draws.iter().map(|d| d.phi).collect()
    }

    /// Posterior summaries of clamped `ψ` per unit.
    pub fn psi_summaries(&self, level: f64) -> Vec<Summary> {
        let psi = self.psi();
        (0..self.units.len())
            .map(|u| {
                let v: Vec<f64> = psi.iter().map(|d| d[u]).collect();
                if v.is_empty() {
                    Summary {
                        mean: f64::NAN,
                        sd: f64::NAN,
                        lower: f64::NAN,
                        upper: f64::NAN,
                        level,
                    }
                } else {
                    Summary::from_draws(&v, level)
                }
            })
            .collect()
    }

    /// Posterior means of clamped `ψ`.
    pub fn psi_means(&self) -> Vec<f64> {
        self.psi_summaries(0.95).iter().map(|s| s.mean).collect()
    }
}

/// Importance over posterior draws (fast route). `x`, `w` are the raw
/// training matrices and `w0` the raw reference exposure.
pub fn vim(
    set: &DrawSet<'_>,
    x: &Matrix,
    w: &Matrix,
    w0: &[f64],
    opts: &VimOptions,
) -> Result<VimResult> {
    if set.is_empty() {
        return Err(Error::EmptyDraws);
    }
    check_len(w0, w.ncols())?;
    let plan = VimPlan::new(x, opts)?;
    let w_norm: Vec<Vec<f64>> = w.rows().map(|r| set.info.normalize_w(r)).collect();
    let w0n = set.info.normalize_w(w0);

    let mut results = Vec::with_capacity(set.len());
    let mut k = 0;
    while k < set.len() {
        // consecutive draws sharing a basis share feature covariances
        let feat = ModelFeatures::new(set.draws[k], set.info);
        let covs = (0..plan.blocks.len())
            .map(|b| block_covariances(&feat, x, &plan, b))
            .collect::<Result<Vec<_>>>()?;
        let end = (k..set.len())
            .find(|&i| !feat.matches(set.draws[i]))
            .unwrap_or(set.len());
        let chunk: Vec<HeterogeneityDraw> = set.draws[k..end]
            .par_iter()
            .map(|d| {
                let rows = feat.contrast_rows(d, &w_norm, &w0n);
                let d_blocks: Vec<DMatrix<f64>> = plan
                    .blocks
                    .iter()
                    .map(|blk| rows.select_rows(blk.iter()))
                    .collect();
                heterogeneity_from(&covs, &d_blocks)
            })
            .collect();
        results.extend(chunk);
        k = end;
    }
    Ok(VimResult {
        smoother: plan.smoother,
        blocks: plan.blocks.len(),
        units: plan.units,
        draws: results,
    })
}

/// Minimum number of defined draws for a difference test.
pub const MIN_TEST_DRAWS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferenceTest {
    pub lower: f64,
    pub upper: f64,
    pub reject: bool,
}

/// Equal-tailed `1 − α` interval of `ψ_j − ψ_k`; rejects equality when
/// the interval excludes zero.
pub fn vim_difference_test(result: &VimResult, j: usize, k: usize, alpha: f64) -> Result<DifferenceTest> {
    let units = result.units.len();
    for i in [j, k] {
        if i >= units {
            return Err(Error::IndexOutOfRange { index: i, len: units });
        }
    }
    let psi = result.psi();
    if psi.len() < MIN_TEST_DRAWS {
        return Err(Error::InsufficientDraws {
            needed: MIN_TEST_DRAWS,
            found: psi.len(),
        });
    }
    let diffs: Vec<f64> = psi.iter().map(|d| d[j] - d[k]).collect();
    let s = Summary::from_draws(&diffs, 1.0 - alpha);
    Ok(DifferenceTest {
        lower: s.lower,
        upper: s.upper,
        reject: !(s.lower <= 0.0 && 0.0 <= s.upper),
    })
}

/// Every pairwise test `j < k`.
pub fn all_difference_tests(result: &VimResult, alpha: f64) -> Result<Vec<(usize, usize, DifferenceTest)>> {
    let u = result.units.len();
    let mut out = Vec::new();
    for j in 0..u {
        for k in j + 1..u {
            out.push((j, k, vim_difference_test(result, j, k, alpha)?));
        }
    }
    Ok(out)
}

/// Heterogeneity curve for covariate `j` on a grid of normalized values:
/// per draw, `CATE(x̃) − CATE(x̄)` where `x̃` equals the anchor except in
/// coordinate `j`. Returns `[grid point][draw]`.
pub fn hetero_curve_normalized(
    set: &DrawSet<'_>,
    j: usize,
    contrast: &ExposureContrast,
    grid: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if set.is_empty() {
        return Err(Error::EmptyDraws);
    }
    let p = set.info.x_anchor.len();
    if j >= p {
        return Err(Error::IndexOutOfRange { index: j, len: p });
    }
    let (w1, w0) = (
        set.info.normalize_w(&contrast.w1),
        set.info.normalize_w(&contrast.w0),
    );
    let xbar = &set.info.x_anchor;
    let per_draw: Vec<Vec<f64>> = set
        .draws
        .iter()
        .map(|d| {
            let c = DrawContrast::new(d, set.info, &w1, &w0);
            let base = c.tau(xbar);
            grid.iter()
                .map(|&u| {
                    let mut x = xbar.clone();
                    x[j] = u;
                    c.tau(&x) - base
                })
                .collect()
        })
        .collect();
    Ok((0..grid.len())
        .map(|g| per_draw.iter().map(|d| d[g]).collect())
        .collect())
}

/// [`hetero_curve_normalized`] on a grid of raw covariate values.
pub fn hetero_curve(
    set: &DrawSet<'_>,
    j: usize,
    contrast: &ExposureContrast,
    grid: &[f64],
) -> Result<Vec<Summary>> {
    let p = set.info.x_maps.len();
    if j >= p {
        return Err(Error::IndexOutOfRange { index: j, len: p });
    }
    let g: Vec<f64> = grid.iter().map(|&v| set.info.x_maps[j].forward(v)).collect();
    Ok(hetero_curve_normalized(set, j, contrast, &g)?
        .iter()
        .map(|d| Summary::from_draws(d, 0.95))
        .collect())
}

/// Raw covariate values of the identification anchor.
pub fn raw_anchor(info: &NormalizationInfo) -> Vec<f64> {
    info.x_anchor
        .iter()
        .zip(&info.x_maps)
        .map(|(a, m)| m.inverse(*a))
        .collect()
}
