//! Simulation designs with known effect surfaces, their oracle
//! quantities, and the replicate-study driver.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{normalize, Dataset};
use crate::diagnostics::{positivity_report, psrf, trimmed_ate, PositivityOptions};
use crate::error::{Error, Result};
use crate::estimands::{
    all_difference_tests, ate_draws, cate_many, heterogeneity_separable, vim, DrawSet,
    ExposureContrast, SeparableFeatures, Smoother, VimOptions, VimResult,
};
use crate::model::{fit, FitConfig, IdentificationCheck, PosteriorSamples};
use crate::stats::{mean, Matrix, Summary};

pub const P: usize = 5;
pub const Q: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interaction {
    None,
    Moderate,
    Strong,
    Violation1,
    Violation2,
}

impl Interaction {
    pub const ALL: [Interaction; 5] = [
        Interaction::None,
        Interaction::Moderate,
        Interaction::Strong,
        Interaction::Violation1,
        Interaction::Violation2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Interaction::None => "none",
            Interaction::Moderate => "moderate",
            Interaction::Strong => "strong",
            Interaction::Violation1 => "violation1",
            Interaction::Violation2 => "violation2",
        }
    }

    /// Importance values published for the design, if any.
    pub fn reported_psi(self) -> Option<[f64; P]> {
        match self {
            Interaction::None => None,
            Interaction::Moderate | Interaction::Strong => Some([0.72, 0.28, 0.0, 0.0, 0.0]),
            Interaction::Violation1 | Interaction::Violation2 => Some([0.5, 0.5, 0.0, 0.0, 0.0]),
        }
    }

    /// Total heterogeneity published for the design, if any.
    pub fn reported_phi(self) -> Option<f64> {
        match self {
            Interaction::None => Some(0.0),
            Interaction::Moderate => Some(0.26),
            Interaction::Strong => Some(1.14),
            _ => None,
        }
    }
}

impl std::str::FromStr for Interaction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Interaction::ALL
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("scenario: unknown interaction {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub interaction: Interaction,
    pub n: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn new(interaction: Interaction, n: usize, seed: u64) -> Result<Self> {
        if n < 50 {
            return Err(Error::InvalidConfig(format!("n: must be at least 50, got {n}")));
        }
        Ok(Self {
            interaction,
            n,
            seed,
        })
    }
}

/// The exact outcome-mean components of a design.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub interaction: Interaction,
}

impl GroundTruth {
    pub fn f_star(&self, x: &[f64]) -> f64 {
        x[0] + x[1] - 0.5 * x[2]
    }

    pub fn g_star(&self, w: &[f64]) -> f64 {
        let ind = if w[0] > 0.0 { 1.0 } else { 0.0 };
        ind + w[0] * (0.3 * w[2]).exp()
            + w[1].atan()
            + (w[1] * w[2] * std::f64::consts::PI).sin()
            + w[2].abs().min(1.0)
    }

    /// Factors `a_t(x)` such that `h*(x, w) = Σ_t a_t(x) g*(w)`, one per
    /// interaction term. Additive designs have one term per modifier.
    pub fn modifier_terms(&self, x: &[f64]) -> Vec<f64> {
        use std::f64::consts::PI;
        match self.interaction {
            Interaction::None => vec![],
            Interaction::Moderate => vec![0.2 * (4.0 * x[0]).atan(), 0.2 * (PI * x[1]).cos()],
            Interaction::Strong => vec![0.4 * (4.0 * x[0]).atan(), 0.4 * (PI * x[1]).cos()],
            Interaction::Violation1 => vec![0.5 * x[0].cos() * x[1].cos()],
            Interaction::Violation2 => {
                let a = if x[0] < 1.0 && x[1] < 1.0 { 0.35 } else { 0.0 };
                vec![a]
            }
        }
    }

    /// Total interaction `h*(x, w)`.
    pub fn h_star(&self, x: &[f64], w: &[f64]) -> f64 {
        let m: f64 = self.modifier_terms(x).iter().sum();
        if m == 0.0 {
            0.0
        } else {
            m * self.g_star(w)
        }
    }

    pub fn mu(&self, x: &[f64], w: &[f64]) -> f64 {
        self.f_star(x) + self.g_star(w) + self.h_star(x, w)
    }

    /// `τ*(x; w, w0) = μ*(x, w) − μ*(x, w0)`.
    pub fn tau(&self, x: &[f64], w: &[f64], w0: &[f64]) -> f64 {
        let m: f64 = self.modifier_terms(x).iter().sum();
        (1.0 + m) * (self.g_star(w) - self.g_star(w0))
    }

    /// Mean of the exposures given covariates.
    pub fn exposure_mean(x: &[f64]) -> [f64; Q] {
        [
            1.0 / (1.0 + (-x[0]).exp()) - 0.5,
            0.1 * x[1] * x[1] - 0.1,
            0.3 * x[2],
            x[1].sin(),
            0.05 * x[3].powi(3),
        ]
    }
}

/// Lower Cholesky factor of the exposure covariance (1 on the diagonal,
/// 0.3 elsewhere).
pub fn exposure_chol() -> [[f64; Q]; Q] {
    let mut a = [[0.0; Q]; Q];
    for i in 0..Q {
        for j in 0..Q {
            a[i][j] = if i == j { 1.0 } else { 0.3 };
        }
    }
    let mut l = [[0.0; Q]; Q];
    for i in 0..Q {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][j] = (a[i][i] - s).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

/// Draws one `(x, w)` pair from the design distribution.
pub fn draw_covariates_exposures<R: Rng + ?Sized>(
    rng: &mut R,
    chol: &[[f64; Q]; Q],
) -> ([f64; P], [f64; Q]) {
    let mut x = [0.0; P];
    for v in x.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    let mean = GroundTruth::exposure_mean(&x);
    let z: Vec<f64> = (0..Q).map(|_| rng.sample(StandardNormal)).collect();
    let mut w = [0.0; Q];
    for i in 0..Q {
        w[i] = mean[i] + (0..=i).map(|k| chol[i][k] * z[k]).sum::<f64>();
    }
    (x, w)
}

pub fn generate(scenario: &Scenario) -> (Dataset, GroundTruth) {
    let truth = GroundTruth {
        interaction: scenario.interaction,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let chol = exposure_chol();
    let mut xs = Vec::with_capacity(scenario.n);
    let mut ws = Vec::with_capacity(scenario.n);
    let mut y = Vec::with_capacity(scenario.n);
    for _ in 0..scenario.n {
        let (x, w) = draw_covariates_exposures(&mut rng, &chol);
        let eps: f64 = rng.sample(StandardNormal);
        y.push(truth.mu(&x, &w) + eps);
        xs.push(x.to_vec());
        ws.push(w.to_vec());
    }
    let ds = Dataset {
        y,
        x: Matrix::from_rows(&xs),
        w: Matrix::from_rows(&ws),
        covariate_names: (1..=P).map(|j| format!("x{j}")).collect(),
        exposure_names: (1..=Q).map(|j| format!("w{j}")).collect(),
    };
    (ds, truth)
}

impl GroundTruth {
    /// The design's standard contrast `w0 = −0.5·1`, `w1 = 0.5·1`.
    pub fn default_contrast() -> ExposureContrast {
        ExposureContrast {
            w0: vec![-0.5; Q],
            w1: vec![0.5; Q],
        }
    }
}

/// Interaction terms of a design as separable covariate features; the
/// exposure side of every term is `g*(w) − g*(w0)`.
pub struct TruthFeatures {
    interaction: Interaction,
}

impl TruthFeatures {
    pub fn new(interaction: Interaction) -> Self {
        Self { interaction }
    }
}

impl SeparableFeatures for TruthFeatures {
    fn n_terms(&self) -> usize {
        match self.interaction {
            Interaction::None => 0,
            Interaction::Moderate | Interaction::Strong => 2,
            Interaction::Violation1 | Interaction::Violation2 => 1,
        }
    }

    fn support(&self, t: usize) -> &[usize] {
        match self.interaction {
            Interaction::Moderate | Interaction::Strong => {
                if t == 0 {
                    &[0]
                } else {
                    &[1]
                }
            }
            _ => &[0, 1],
        }
    }

    fn factor(&self, t: usize, j: usize, v: f64) -> f64 {
        use std::f64::consts::PI;
        let k = match self.interaction {
            Interaction::Moderate => 0.2,
            _ => 0.4,
        };
        match (self.interaction, t, j) {
            (Interaction::Moderate | Interaction::Strong, 0, _) => k * (4.0 * v).atan(),
            (Interaction::Moderate | Interaction::Strong, _, _) => k * (PI * v).cos(),
            (Interaction::Violation1, _, 0) => 0.5 * v.cos(),
            (Interaction::Violation1, _, _) => v.cos(),
            (Interaction::Violation2, _, 0) => {
                if v < 1.0 {
                    0.35
                } else {
                    0.0
                }
            }
            (Interaction::Violation2, _, _) => {
                if v < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            (Interaction::None, _, _) => unreachable!("no terms"),
        }
    }
}

/// Oracle values of a design under a contrast.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueQuantities {
    pub interaction: Interaction,
    pub draws: usize,
    pub ate: f64,
    pub phi: f64,
    /// `None` when the design has no heterogeneity.
    pub psi: Option<Vec<f64>>,
    pub reported_phi: Option<f64>,
    pub reported_psi: Option<Vec<f64>>,
}

/// Monte-Carlo oracle over `draws` fresh `(X, W)` pairs: ATE by
/// averaging `τ*`, and `φ`, `ψ` from the full τ-matrix (one block,
/// mean smoother) evaluated through the separable engine.
pub fn true_quantities(
    interaction: Interaction,
    contrast: &ExposureContrast,
    draws: usize,
    seed: u64,
) -> Result<TrueQuantities> {
    let truth = GroundTruth { interaction };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chol = exposure_chol();
    let mut xs = Vec::with_capacity(draws * P);
    let mut dg = Vec::with_capacity(draws);
    let mut ate = 0.0;
    for _ in 0..draws {
        let (x, w) = draw_covariates_exposures(&mut rng, &chol);
        ate += truth.tau(&x, &contrast.w1, &contrast.w0);
        dg.push(truth.g_star(&w) - truth.g_star(&contrast.w0));
        xs.extend_from_slice(&x);
    }
    ate /= draws as f64;
    let feat = TruthFeatures::new(interaction);
    let (phi, psi) = if feat.n_terms() == 0 {
        (0.0, None)
    } else {
        let x = Matrix::from_rows(&xs.chunks(P).map(<[f64]>::to_vec).collect::<Vec<_>>());
        let d = DMatrix::from_fn(draws, feat.n_terms(), |k, _| dg[k]);
        let opts = VimOptions {
            smoother: Smoother::Mean,
            blocks: Some(1),
            groups: None,
            seed,
        };
        let h = heterogeneity_separable(&feat, &x, &d, &opts)?;
        (h.phi, h.psi())
    };
    Ok(TrueQuantities {
        interaction,
        draws,
        ate,
        phi,
        psi,
        reported_phi: interaction.reported_phi(),
        reported_psi: interaction.reported_psi().map(|v| v.to_vec()),
    })
}

/// Settings of a replicate study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub interaction: Interaction,
    pub n: usize,
    pub replicates: usize,
    pub master_seed: u64,
    pub fit: FitConfig,
    pub contrast: ExposureContrast,
    pub alpha: f64,
    pub test_points: usize,
    pub vim: VimOptions,
    /// Compute importance on a random subsample of this size (one block)
    /// instead of the full sample.
    pub vim_subsample: Option<usize>,
    /// Draws of the Monte-Carlo oracle for `φ`, `ψ` and the ATE.
    pub truth_draws: usize,
}

impl StudyConfig {
    pub fn new(interaction: Interaction, n: usize, replicates: usize) -> Self {
        Self {
            interaction,
            n,
            replicates,
            master_seed: 1,
            fit: FitConfig::default(),
            contrast: GroundTruth::default_contrast(),
            alpha: 0.05,
            test_points: 100,
            vim: VimOptions::default(),
            vim_subsample: None,
            truth_draws: 1_000_000,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> = self.fit.problems();
        if self.n < 50 {
            out.push("n: must be at least 50".into());
        }
        if self.replicates == 0 {
            out.push("replicates: must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            out.push("alpha: must lie in (0, 1)".into());
        }
        if self.test_points == 0 {
            out.push("test_points: must be at least 1".into());
        }
        if self.contrast.w0.len() != Q || self.contrast.w1.len() != Q {
            out.push(format!("contrast: exposures have dimension {Q}"));
        }
        if self.truth_draws < 2 {
            out.push("truth_draws: must be at least 2".into());
        }
        out
    }
}

/// Per-replicate outcomes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub seed: u64,
    pub cate_rmse: f64,
    pub cate_covered: usize,
    pub cate_points: usize,
    pub ate: Summary,
    pub ate_truth: f64,
    pub phi_mean: f64,
    pub psi_mean: Vec<f64>,
    pub psi_raw_mean: Vec<f64>,
    pub psi_undefined: usize,
    /// `(j, k, reject)` for every pair `j < k`.
    pub tests: Vec<(usize, usize, bool)>,
    pub trimmed_ate: Option<Summary>,
    pub identification: IdentificationCheck,
    pub max_cap_ratio: f64,
    pub psrf_ate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub truth: TrueQuantities,
    pub replicates: Vec<ReplicateResult>,
    pub failures: Vec<(usize, String)>,
    pub coverage: f64,
    pub mean_cate_rmse: f64,
    pub mean_psi: Vec<f64>,
    /// Rejection rate of `ψ_j = ψ_k`, symmetric, zero diagonal.
    pub rejection_rates: Vec<Vec<f64>>,
}

/// Fits and summaries of one simulated data set.
pub struct ReplicateFit {
    pub data: Dataset,
    pub chains: Vec<PosteriorSamples>,
}

/// Seed of replicate `r`.
pub fn replicate_seed(master: u64, r: usize) -> u64 {
    master.wrapping_add(r as u64)
}

pub fn fit_replicate(cfg: &StudyConfig, r: usize) -> Result<ReplicateFit> {
    let seed = replicate_seed(cfg.master_seed, r);
    let scenario = Scenario::new(cfg.interaction, cfg.n, seed)?;
    let (data, _) = generate(&scenario);
    let (norm, info) = normalize(&data)?;
    let fit_cfg = FitConfig {
        seed,
        ..cfg.fit.clone()
    };
    let chains = fit(&norm, &info, &fit_cfg)?;
    Ok(ReplicateFit { data, chains })
}

/// Importance for a fitted replicate under the study's options.
pub fn replicate_vim(cfg: &StudyConfig, rep: &ReplicateFit, seed: u64) -> Result<VimResult> {
    let set = DrawSet::from_chains(&rep.chains)?;
    let (x, w) = match cfg.vim_subsample {
        Some(m) if m < rep.data.n() => {
            let blocks = crate::estimands::make_blocks(rep.data.n(), 1, seed ^ 0x5eed);
            let idx = &blocks[0][..m];
            (rep.data.x.select_rows(idx), rep.data.w.select_rows(idx))
        }
        _ => (rep.data.x.clone(), rep.data.w.clone()),
    };
    let opts = VimOptions {
        seed,
        ..cfg.vim.clone()
    };
    vim(&set, &x, &w, &cfg.contrast.w0, &opts)
}

/// Summaries of one fitted replicate against the ground truth.
pub fn evaluate_replicate(
    cfg: &StudyConfig,
    r: usize,
    rep: &ReplicateFit,
    ate_truth: f64,
) -> Result<ReplicateResult> {
    let seed = replicate_seed(cfg.master_seed, r);
    let truth = GroundTruth {
        interaction: cfg.interaction,
    };
    let set = DrawSet::from_chains(&rep.chains)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let chol = exposure_chol();
    let points: Vec<Vec<f64>> = (0..cfg.test_points)
        .map(|_| draw_covariates_exposures(&mut rng, &chol).0.to_vec())
        .collect();
    let cates = cate_many(&set, &points, &cfg.contrast)?;
    let mut covered = 0;
    let mut sq = 0.0;
    for (x, draws) in points.iter().zip(&cates) {
        let s = Summary::from_draws(draws, 0.95);
        let t = truth.tau(x, &cfg.contrast.w1, &cfg.contrast.w0);
        covered += usize::from(s.covers(t));
        sq += (s.mean - t).powi(2);
    }

    let ate_d = ate_draws(&set, &rep.data.x, &cfg.contrast)?;
    let ate = Summary::from_draws(&ate_d, 0.95);

    let vr = replicate_vim(cfg, rep, seed)?;
    let psi = vr.psi();
    let psi_raw = vr.psi_raw();
    let col_mean = |v: &[Vec<f64>], u: usize| -> f64 {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().map(|d| d[u]).sum::<f64>() / v.len() as f64
        }
    };
    let units = vr.units.len();
    let tests = match all_difference_tests(&vr, cfg.alpha) {
        Ok(t) => t.into_iter().map(|(j, k, t)| (j, k, t.reject)).collect(),
        Err(Error::InsufficientDraws { .. }) => Vec::new(),
        Err(e) => return Err(e),
    };

    let report = positivity_report(&rep.data, &PositivityOptions::default())?;
    let trimmed = trimmed_ate(&set, &rep.data.x, &report, &cfg.contrast)
        .ok()
        .map(|t| t.summary);

    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed);
    probe_rng.set_stream(2);
    let probe_x: Vec<Vec<f64>> = (0..100)
        .map(|_| (0..P).map(|_| probe_rng.gen()).collect())
        .collect();
    let probe_w: Vec<Vec<f64>> = (0..100)
        .map(|_| (0..Q).map(|_| probe_rng.gen()).collect())
        .collect();
    let mut ident = IdentificationCheck::default();
    let mut cap = 0.0f64;
    for c in &rep.chains {
        for d in &c.draws {
            ident = ident.max(d.identification_check(c.xbar(), c.wbar(), &probe_x, &probe_w));
            cap = cap.max(d.max_cap_ratio());
        }
    }

    let psrf_ate = if rep.chains.len() >= 2 {
        let traces: Vec<Vec<f64>> = rep
            .chains
            .iter()
            .map(|c| {
                let s = DrawSet {
                    info: &c.normalization,
                    draws: c.draws.iter().collect(),
                };
                ate_draws(&s, &rep.data.x, &cfg.contrast)
            })
            .collect::<Result<_>>()?;
        psrf(&traces).ok()
    } else {
        None
    };

    Ok(ReplicateResult {
        replicate: r,
        seed,
        cate_rmse: (sq / points.len() as f64).sqrt(),
        cate_covered: covered,
        cate_points: points.len(),
        ate,
        ate_truth,
        phi_mean: mean(&vr.phi()),
        psi_mean: (0..units).map(|u| col_mean(&psi, u)).collect(),
        psi_raw_mean: (0..units).map(|u| col_mean(&psi_raw, u)).collect(),
        psi_undefined: vr.undefined(),
        tests,
        trimmed_ate: trimmed,
        identification: ident,
        max_cap_ratio: cap,
        psrf_ate,
    })
}

/// Runs every replicate; failures are recorded and the study continues.
pub fn replicate_study(cfg: &StudyConfig) -> Result<StudyReport> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems.join("; ")));
    }
    let truth = true_quantities(cfg.interaction, &cfg.contrast, cfg.truth_draws, cfg.master_seed)?;
    let outcomes: Vec<(usize, Result<ReplicateResult>)> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let res = fit_replicate(cfg, r).and_then(|rep| evaluate_replicate(cfg, r, &rep, truth.ate));
            (r, res)
        })
        .collect();
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in outcomes {
        match res {
            Ok(v) => replicates.push(v),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    Ok(summarize_study(cfg.clone(), truth, replicates, failures))
}

pub fn summarize_study(
    config: StudyConfig,
    truth: TrueQuantities,
    replicates: Vec<ReplicateResult>,
    failures: Vec<(usize, String)>,
) -> StudyReport {
    let points: usize = replicates.iter().map(|r| r.cate_points).sum();
    let covered: usize = replicates.iter().map(|r| r.cate_covered).sum();
    let units = replicates.first().map_or(0, |r| r.psi_mean.len());
    let mean_psi = (0..units)
        .map(|u| {
            let v: Vec<f64> = replicates
                .iter()
                .map(|r| r.psi_mean[u])
                .filter(|v| v.is_finite())
                .collect();
            if v.is_empty() {
                f64::NAN
            } else {
                mean(&v)
            }
        })
        .collect();
    let mut rejection_rates = vec![vec![0.0; units]; units];
    let mut counts = vec![vec![0usize; units]; units];
    for r in &replicates {
        for &(j, k, rej) in &r.tests {
            counts[j][k] += 1;
            counts[k][j] += 1;
            if rej {
                rejection_rates[j][k] += 1.0;
                rejection_rates[k][j] += 1.0;
            }
        }
    }
    for j in 0..units {
        for k in 0..units {
            if counts[j][k] > 0 {
                rejection_rates[j][k] /= counts[j][k] as f64;
            }
        }
    }
    let rmse: Vec<f64> = replicates.iter().map(|r| r.cate_rmse).collect();
    StudyReport {
        config,
        truth,
        coverage: if points > 0 {
            covered as f64 / points as f64
        } else {
            f64::NAN
        },
        mean_cate_rmse: if rmse.is_empty() { f64::NAN } else { mean(&rmse) },
        mean_psi,
        rejection_rates,
        replicates,
        failures,
    }
}
