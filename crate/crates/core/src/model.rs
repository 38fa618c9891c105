//! The separable outcome model
//! `E(Y | x, w) = c + f(x) + g(w) + Σ_j h_j(x_j, w)`
//! and its backfitting sampler.
//!
//! The sampler mutates unconstrained components `(c0, f0, g0, h_j0)`.
//! Identification (`f(x̄) = g(w̄) = 0`, `h_j(x̄_j, ·) = h_j(·, w̄) = 0`) is
//! applied when a draw is retained: [`PosteriorDraw`] stores the anchor
//! evaluations needed to evaluate the identified components exactly.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, NormalizationInfo};
use crate::error::{Error, Result};
use crate::softbart::{Forest, ForestCache, ForestPrior, Inputs};
use crate::trees::TreePrior;
use crate::tsbart::{InteractionCache, InteractionForest, InteractionPrior};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    pub trees_f: usize,
    pub trees_g: usize,
    pub trees_h: usize,
    pub tau_prior_rate: f64,
    pub sigma_mu_scale: f64,
    pub dirichlet_a: f64,
    pub dirichlet_xi: f64,
    pub max_depth: usize,
    pub rho: f64,
    pub rho_update: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            burn_in: 1500,
            thin: 3,
            chains: 1,
            seed: 1,
            trees_f: 50,
            trees_g: 50,
            trees_h: 20,
            tau_prior_rate: 10.0,
            sigma_mu_scale: 1.0,
            dirichlet_a: 1.0,
            dirichlet_xi: 1.0,
            max_depth: 10,
            rho: DEFAULT_RHO,
            rho_update: false,
        }
    }
}

/// Length-scale of the cosine basis on the quantile scale.
pub const DEFAULT_RHO: f64 = 0.15;

impl FitConfig {
    /// Every violated constraint, by key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                out.push(msg.to_string());
            }
        };
        check(self.iterations >= 1, "iterations: must be at least 1");
        check(
            self.burn_in < self.iterations,
            "burn_in: must be smaller than iterations",
        );
        check(self.thin >= 1, "thin: must be at least 1");
        check(self.chains >= 1, "chains: must be at least 1");
        check(self.trees_f >= 1, "trees_f: must be at least 1");
        check(self.trees_g >= 1, "trees_g: must be at least 1");
        check(self.trees_h >= 1, "trees_h: must be at least 1");
        check(
            self.tau_prior_rate > 0.0 && self.tau_prior_rate.is_finite(),
            "tau_prior_rate: must be positive",
        );
        check(
            self.sigma_mu_scale > 0.0 && self.sigma_mu_scale.is_finite(),
            "sigma_mu_scale: must be positive",
        );
        check(
            self.dirichlet_a > 0.0 && self.dirichlet_a.is_finite(),
            "dirichlet_a: must be positive",
        );
        check(
            self.dirichlet_xi >= 0.0 && self.dirichlet_xi.is_finite(),
            "dirichlet_xi: must be non-negative",
        );
        check(self.max_depth >= 1, "max_depth: must be at least 1");
        check(self.rho > 0.0 && self.rho.is_finite(), "rho: must be positive");
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p.join("; ")))
        }
    }

    fn forest_prior(&self, trees: usize) -> ForestPrior {
        let mut prior = ForestPrior::with_trees(trees);
        prior.tree_prior = TreePrior {
            max_depth: self.max_depth,
            ..TreePrior::default()
        };
        prior.tau_rate = self.tau_prior_rate;
        prior.sigma_mu_scale = self.sigma_mu_scale;
        prior.dirichlet_a = self.dirichlet_a;
        prior.dirichlet_xi = self.dirichlet_xi;
        prior
    }

    fn interaction_prior(&self) -> InteractionPrior {
        let base = self.forest_prior(self.trees_h);
        let cap = base.initial_sigma_mu();
        InteractionPrior {
            forest: ForestPrior {
                sigma_mu_cap: Some(cap),
                ..base
            },
            rho: self.rho,
            rho_update: self.rho_update,
        }
    }

    /// Number of retained draws per chain.
    pub fn retained(&self) -> usize {
        (self.burn_in..self.iterations)
            .filter(|it| (it - self.burn_in + 1) % self.thin == 0)
            .count()
    }
}

/// Unconstrained sampler state on the normalized scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub c0: f64,
    pub forest_f: Forest,
    pub forest_g: Forest,
    pub interactions: Vec<InteractionForest>,
    pub sigma2: f64,
}

impl ModelState {
    pub fn init<R: Rng + ?Sized>(p: usize, q: usize, cfg: &FitConfig, rng: &mut R) -> Self {
        let interactions = (0..p)
            .map(|_| InteractionForest::new(q, cfg.interaction_prior(), rng))
            .collect();
        Self {
            c0: 0.0,
            forest_f: Forest::new(p, cfg.forest_prior(cfg.trees_f)),
            forest_g: Forest::new(q, cfg.forest_prior(cfg.trees_g)),
            interactions,
            sigma2: 1.0,
        }
    }

    /// Unidentified mean `c0 + f0(x) + g0(w) + Σ h_j0(x_j, w)`,
    /// standardized outcome scale.
    pub fn raw_mu(&self, x: &[f64], w: &[f64]) -> f64 {
        self.c0
            + self.forest_f.predict(x)
            + self.forest_g.predict(w)
            + self
                .interactions
                .iter()
                .enumerate()
                .map(|(j, h)| h.predict(x[j], w))
                .sum::<f64>()
    }
}

/// Anchor evaluations that turn a raw state into identified components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorCache {
    pub f0_xbar: f64,
    pub g0_wbar: f64,
    /// `B_jm(x̄_j)` per covariate and tree.
    pub basis_xbar: Vec<Vec<f64>>,
    /// `T_jm(w̄)` per covariate and tree.
    pub tree_wbar: Vec<Vec<f64>>,
}

impl AnchorCache {
    pub fn new(state: &ModelState, xbar: &[f64], wbar: &[f64]) -> Self {
        let basis_xbar = state
            .interactions
            .iter()
            .enumerate()
            .map(|(j, h)| (0..h.basis.len()).map(|m| h.basis.eval(m, xbar[j])).collect())
            .collect();
        let tree_wbar = state
            .interactions
            .iter()
            .map(|h| h.tree_predictions(wbar))
            .collect();
        Self {
            f0_xbar: state.forest_f.predict(xbar),
            g0_wbar: state.forest_g.predict(wbar),
            basis_xbar,
            tree_wbar,
        }
    }
}

/// A retained posterior draw.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosteriorDraw {
    pub iteration: usize,
    pub state: ModelState,
    pub anchors: AnchorCache,
    /// `μ` at the training points, original outcome scale.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub training_mu: Vec<f64>,
}

impl PosteriorDraw {
    pub fn from_state(state: ModelState, iteration: usize, xbar: &[f64], wbar: &[f64]) -> Self {
        let anchors = AnchorCache::new(&state, xbar, wbar);
        Self {
            iteration,
            state,
            anchors,
            training_mu: Vec::new(),
        }
    }

    /// Identified intercept `c`.
    pub fn intercept(&self) -> f64 {
        let a = &self.anchors;
        let h: f64 = a
            .basis_xbar
            .iter()
            .zip(&a.tree_wbar)
            .map(|(b, t)| b.iter().zip(t).map(|(b, t)| b * t).sum::<f64>())
            .sum();
        self.state.c0 + a.f0_xbar + a.g0_wbar + h
    }

    /// Identified `f(x)`.
    pub fn f(&self, x: &[f64]) -> f64 {
        let a = &self.anchors;
        let mut v = self.state.forest_f.predict(x) - a.f0_xbar;
        for (j, h) in self.state.interactions.iter().enumerate() {
            for m in 0..h.basis.len() {
                v += (h.basis.eval(m, x[j]) - a.basis_xbar[j][m]) * a.tree_wbar[j][m];
            }
        }
        v
    }

    /// Identified `g(w)`.
    pub fn g(&self, w: &[f64]) -> f64 {
        let a = &self.anchors;
        let mut v = self.state.forest_g.predict(w) - a.g0_wbar;
        for (j, h) in self.state.interactions.iter().enumerate() {
            let t = h.tree_predictions(w);
            for m in 0..t.len() {
                v += a.basis_xbar[j][m] * (t[m] - a.tree_wbar[j][m]);
            }
        }
        v
    }

    /// Identified `h_j(x_j, w)`.
    pub fn h(&self, j: usize, xj: f64, w: &[f64]) -> f64 {
        let a = &self.anchors;
        let h = &self.state.interactions[j];
        let t = h.tree_predictions(w);
        (0..t.len())
            .map(|m| (h.basis.eval(m, xj) - a.basis_xbar[j][m]) * (t[m] - a.tree_wbar[j][m]))
            .sum()
    }

    /// `c + f(x) + g(w) + Σ h_j(x_j, w)` on the standardized scale.
    pub fn mu_identified(&self, x: &[f64], w: &[f64]) -> f64 {
        self.intercept()
            + self.f(x)
            + self.g(w)
            + (0..x.len()).map(|j| self.h(j, x[j], w)).sum::<f64>()
    }

    /// Mean outcome at normalized `(x, w)`, original scale.
    pub fn predict_mu(&self, info: &NormalizationInfo, x: &[f64], w: &[f64]) -> f64 {
        info.destandardize_y(self.state.raw_mu(x, w))
    }
}

/// Largest deviations from the identification constraints on a draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentificationCheck {
    /// Max of `|f(x̄)|`, `|g(w̄)|`, `|h_j(x̄_j, w)|` and `|h_j(x_j, w̄)|`.
    pub anchor: f64,
    /// Max gap between identified and raw `μ`.
    pub telescoping: f64,
}

impl IdentificationCheck {
    pub fn max(self, other: Self) -> Self {
        Self {
            anchor: self.anchor.max(other.anchor),
            telescoping: self.telescoping.max(other.telescoping),
        }
    }
}

impl PosteriorDraw {
    /// Checks the constraints at normalized probe points.
    pub fn identification_check(
        &self,
        xbar: &[f64],
        wbar: &[f64],
        probe_x: &[Vec<f64>],
        probe_w: &[Vec<f64>],
    ) -> IdentificationCheck {
        let mut anchor = self.f(xbar).abs().max(self.g(wbar).abs());
        for j in 0..xbar.len() {
            for w in probe_w {
                anchor = anchor.max(self.h(j, xbar[j], w).abs());
            }
            for x in probe_x {
                anchor = anchor.max(self.h(j, x[j], wbar).abs());
            }
        }
        let telescoping = probe_x
            .iter()
            .zip(probe_w)
            .map(|(x, w)| (self.mu_identified(x, w) - self.state.raw_mu(x, w)).abs())
            .fold(0.0, f64::max);
        IdentificationCheck {
            anchor,
            telescoping,
        }
    }

    /// Largest `σ_μ` of the interaction ensembles relative to its cap.
    pub fn max_cap_ratio(&self) -> f64 {
        self.state
            .interactions
            .iter()
            .map(|h| {
                let cap = h.forest.prior.sigma_mu_cap.unwrap_or(f64::INFINITY);
                h.forest.sigma_mu / cap
            })
            .fold(0.0, f64::max)
    }
}

/// Draws from one chain together with everything needed to interpret them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub chain: usize,
    pub seed: u64,
    pub config: FitConfig,
    pub normalization: NormalizationInfo,
    pub draws: Vec<PosteriorDraw>,
}

impl PosteriorSamples {
    pub fn xbar(&self) -> &[f64] {
        &self.normalization.x_anchor
    }

    pub fn wbar(&self) -> &[f64] {
        &self.normalization.w_anchor
    }
}

/// Fits every chain of `cfg` on a normalized dataset. Chains run in
/// parallel with independent streams of the same seed.
pub fn fit(ds: &Dataset, info: &NormalizationInfo, cfg: &FitConfig) -> Result<Vec<PosteriorSamples>> {
    cfg.validate()?;
    ds.validate()?;
    (0..cfg.chains)
        .into_par_iter()
        .map(|c| fit_chain(ds, info, cfg, c))
        .collect()
}

/// Runs a single chain.
pub fn fit_chain(
    ds: &Dataset,
    info: &NormalizationInfo,
    cfg: &FitConfig,
    chain: usize,
) -> Result<PosteriorSamples> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);
    let n = ds.n();
    let (p, q) = (ds.p(), ds.q());
    let x_cols = ds.x.columns();
    let w_cols = ds.w.columns();
    let y = &ds.y;

    let mut state = ModelState::init(p, q, cfg, &mut rng);
    let f_inputs = Inputs::plain(&x_cols);
    let g_inputs = Inputs::plain(&w_cols);
    let mut f_cache = ForestCache::new(&state.forest_f, &f_inputs);
    let mut g_cache = ForestCache::new(&state.forest_g, &g_inputs);
    let mut h_caches: Vec<InteractionCache> = state
        .interactions
        .iter()
        .enumerate()
        .map(|(j, h)| InteractionCache::new(h, &x_cols[j], &w_cols))
        .collect();

    // e = y - c0 - f - g - Σ h
    let mut resid: Vec<f64> = y.iter().map(|v| v - state.c0).collect();
    let mut target = vec![0.0; n];
    let diverged = |iteration: usize, what: &str| Error::Divergence {
        iteration,
        what: what.to_string(),
    };

    let mut draws = Vec::with_capacity(cfg.retained());
    for it in 0..cfg.iterations {
        // f
        add_into(&mut target, &resid, &f_cache.fit);
        state
            .forest_f
            .sweep(&mut f_cache, &f_inputs, &target, state.sigma2, &mut rng)
            .map_err(|_| diverged(it, "f forest"))?;
        sub_into(&mut resid, &target, &f_cache.fit);
        // g
        add_into(&mut target, &resid, &g_cache.fit);
        state
            .forest_g
            .sweep(&mut g_cache, &g_inputs, &target, state.sigma2, &mut rng)
            .map_err(|_| diverged(it, "g forest"))?;
        sub_into(&mut resid, &target, &g_cache.fit);
        // h_j
        for (j, (h, cache)) in state.interactions.iter_mut().zip(h_caches.iter_mut()).enumerate() {
            add_into(&mut target, &resid, cache.fit());
            h.sweep(cache, &w_cols, &target, state.sigma2, &mut rng)
                .map_err(|_| diverged(it, &format!("interaction forest {}", j + 1)))?;
            sub_into(&mut resid, &target, cache.fit());
        }
        // c0 | rest, N(0, C0_PRIOR_VAR) prior
        let partial: f64 = resid.iter().sum::<f64>() + n as f64 * state.c0;
        let precision = n as f64 / state.sigma2 + 1.0 / C0_PRIOR_VAR;
        let mean = partial / state.sigma2 / precision;
        let z: f64 = rng.sample(StandardNormal);
        let c0 = mean + z / precision.sqrt();
        let shift = c0 - state.c0;
        resid.iter_mut().for_each(|r| *r -= shift);
        state.c0 = c0;
        // σ² | rest
        let ssr: f64 = resid.iter().map(|r| r * r).sum();
        let shape = SIGMA_A0 + n as f64 / 2.0;
        let rate = SIGMA_B0 + ssr / 2.0;
        let g = Gamma::new(shape, 1.0 / rate).map_err(|_| diverged(it, "noise variance"))?;
        state.sigma2 = 1.0 / g.sample(&mut rng);
        if !state.sigma2.is_finite() || !(state.sigma2 > 0.0) || !state.c0.is_finite() {
            return Err(diverged(it, "noise variance or intercept"));
        }

        if it >= cfg.burn_in && (it - cfg.burn_in + 1) % cfg.thin == 0 {
            let mut draw =
                PosteriorDraw::from_state(state.clone(), it, &info.x_anchor, &info.w_anchor);
            draw.training_mu = resid
                .iter()
                .zip(y)
                .map(|(r, yi)| info.destandardize_y(yi - r))
                .collect();
            draws.push(draw);
        }
    }
    Ok(PosteriorSamples {
        chain,
        seed: cfg.seed,
        config: cfg.clone(),
        normalization: info.clone(),
        draws,
    })
}

const C0_PRIOR_VAR: f64 = 100.0;
const SIGMA_A0: f64 = 1.0;
const SIGMA_B0: f64 = 1.0;

/// `target = resid + fit`.
fn add_into(target: &mut [f64], resid: &[f64], fit: &[f64]) {
    for ((t, r), f) in target.iter_mut().zip(resid).zip(fit) {
        *t = r + f;
    }
}

/// `resid = target - fit`.
fn sub_into(resid: &mut [f64], target: &[f64], fit: &[f64]) {
    for ((r, t), f) in resid.iter_mut().zip(target).zip(fit) {
        *r = t - f;
    }
}

pub const DRAW_FORMAT: &str = "sepbart-draws";
pub const DRAW_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DrawFileHeader {
    format: String,
    version: u32,
    chain: usize,
    seed: u64,
    config: FitConfig,
    normalization: NormalizationInfo,
    draws: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

/// Writes a chain as JSON lines: one header line, then one draw per line.
pub fn write_draws(path: &Path, samples: &PosteriorSamples) -> Result<()> {
    write_draws_with(path, samples, None)
}

/// [`write_draws`] with an arbitrary record stored in the header.
pub fn write_draws_with(
    path: &Path,
    samples: &PosteriorSamples,
    provenance: Option<&serde_json::Value>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = DrawFileHeader {
        format: DRAW_FORMAT.into(),
        version: DRAW_FORMAT_VERSION,
        chain: samples.chain,
        seed: samples.seed,
        config: samples.config.clone(),
        normalization: samples.normalization.clone(),
        draws: samples.draws.len(),
        provenance: provenance.cloned(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for d in &samples.draws {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_draws(path: &Path) -> Result<PosteriorSamples> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::DrawFile("empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: DrawFileHeader = serde_json::from_str(&first)
        .map_err(|e| Error::DrawFile(format!("bad header: {e}")))?;
    if header.format != DRAW_FORMAT {
        return Err(Error::DrawFile(format!("unknown format {:?}", header.format)));
    }
    if header.version != DRAW_FORMAT_VERSION {
        return Err(Error::DrawFile(format!("unsupported version {}", header.version)));
    }
    let mut draws = Vec::with_capacity(header.draws);
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: PosteriorDraw = serde_json::from_str(&line)
            .map_err(|e| Error::DrawFile(format!("draw {}: {e}", k + 1)))?;
        draws.push(d);
    }
    if draws.len() != header.draws {
        return Err(Error::DrawFile(format!(
            "header announces {} draws, found {}",
            header.draws,
            draws.len()
        )));
    }
    Ok(PosteriorSamples {
        chain: header.chain,
        seed: header.seed,
        config: header.config,
        normalization: header.normalization,
        draws,
    })
}
