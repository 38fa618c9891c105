//! Run configuration: one TOML file plus `--set section.key=value`
//! overrides, validated as a whole so that every bad key is reported.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sepbart::diagnostics::PositivityOptions;
use sepbart::estimands::{ExposureContrast, Smoother, VimOptions};
use sepbart::model::FitConfig;
use sepbart::sim::{GroundTruth, Interaction, StudyConfig};
use sepbart::stats::{quantile, Matrix};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub input: Option<PathBuf>,
    pub outcome: String,
    pub covariates: Vec<String>,
    pub exposures: Vec<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            input: None,
            outcome: "y".into(),
            covariates: Vec::new(),
            exposures: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub scenario: Interaction,
    pub n: usize,
    /// Monte-Carlo draws for the oracle quantities written next to the data.
    pub truth_draws: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            scenario: Interaction::Strong,
            n: 2000,
            truth_draws: 100_000,
        }
    }
}

/// One end of a contrast: a quantile label such as `"q25"` applied to every
/// exposure, or explicit raw values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Level {
    Quantile(String),
    Values(Vec<f64>),
}

impl Level {
    fn quantile_prob(label: &str) -> Option<f64> {
        let digits = label.strip_prefix('q')?;
        let v: f64 = digits.parse().ok()?;
        (0.0..=100.0).contains(&v).then_some(v / 100.0)
    }

    fn problem(&self, key: &str, q: Option<usize>) -> Option<String> {
        match self {
            Level::Quantile(s) if Self::quantile_prob(s).is_none() => Some(format!(
                "contrast.{key}: expected a label like \"q25\" or a list of numbers, got {s:?}"
            )),
            Level::Values(v) if v.iter().any(|x| !x.is_finite()) => {
                Some(format!("contrast.{key}: values must be finite"))
            }
            Level::Values(v) => match q {
                Some(q) if v.len() != q => Some(format!(
                    "contrast.{key}: expected {q} values, one per exposure, got {}",
                    v.len()
                )),
                _ => None,
            },
            _ => None,
        }
    }

    /// Raw exposure values of this level on data `w`.
    pub fn resolve(&self, w: &Matrix) -> Vec<f64> {
        match self {
            Level::Values(v) => v.clone(),
            Level::Quantile(s) => {
                let p = Self::quantile_prob(s).expect("validated");
                (0..w.ncols()).map(|j| quantile(&w.column(j), p)).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastSection {
    pub w0: Level,
    pub w1: Level,
}

impl Default for ContrastSection {
    fn default() -> Self {
        Self {
            w0: Level::Quantile("q25".into()),
            w1: Level::Quantile("q75".into()),
        }
    }
}

impl ContrastSection {
    pub fn resolve(&self, w: &Matrix) -> ExposureContrast {
        ExposureContrast {
            w0: self.w0.resolve(w),
            w1: self.w1.resolve(w),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VimSection {
    pub smoother: Smoother,
    pub blocks: Option<usize>,
    /// Covariate groups by name; omitted covariates are not reported.
    pub groups: Option<Vec<Vec<String>>>,
}

impl Default for VimSection {
    fn default() -> Self {
        Self {
            smoother: Smoother::Regression,
            blocks: None,
            groups: None,
        }
    }
}

impl VimSection {
    pub fn options(&self, covariates: &[String], seed: u64) -> Result<VimOptions, CliError> {
        let groups = match &self.groups {
            None => None,
            Some(gs) => {
                let mut out = Vec::new();
                let mut bad = Vec::new();
                for g in gs {
                    let mut idx = Vec::new();
                    for name in g {
                        match covariates.iter().position(|c| c == name) {
                            Some(i) => idx.push(i),
                            None => bad.push(format!("vim.groups: unknown covariate {name:?}")),
                        }
                    }
                    out.push(idx);
                }
                if !bad.is_empty() {
                    return Err(CliError::Config(bad));
                }
                Some(out)
            }
        };
        Ok(VimOptions {
            smoother: self.smoother,
            blocks: self.blocks,
            groups,
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateSection {
    /// Raw-quantile grid points for the heterogeneity curves.
    pub curve_points: usize,
    pub level: f64,
    pub alpha: f64,
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self {
            curve_points: 19,
            level: 0.95,
            alpha: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub delta: f64,
    pub low_window: (f64, f64),
    pub high_window: (f64, f64),
    /// Include per-observation probabilities and flags.
    pub per_observation: bool,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        let p = PositivityOptions::default();
        Self {
            delta: p.delta,
            low_window: p.low_window,
            high_window: p.high_window,
            per_observation: false,
        }
    }
}

impl DiagnoseSection {
    pub fn options(&self) -> PositivityOptions {
        PositivityOptions {
            delta: self.delta,
            low_window: self.low_window,
            high_window: self.high_window,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub scenario: Interaction,
    pub n: usize,
    pub replicates: usize,
    pub alpha: f64,
    pub test_points: usize,
    pub smoother: Smoother,
    pub blocks: Option<usize>,
    pub vim_subsample: Option<usize>,
    pub truth_draws: usize,
    pub w0: Vec<f64>,
    pub w1: Vec<f64>,
}

impl Default for StudySection {
    fn default() -> Self {
        let c = GroundTruth::default_contrast();
        Self {
            scenario: Interaction::Strong,
            n: 2000,
            replicates: 20,
            alpha: 0.05,
            test_points: 100,
            smoother: Smoother::Mean,
            blocks: None,
            vim_subsample: None,
            truth_draws: 1_000_000,
            w0: c.w0,
            w1: c.w1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub simulate: SimulateSection,
    pub fit: FitConfig,
    pub contrast: ContrastSection,
    pub vim: VimSection,
    pub estimate: EstimateSection,
    pub diagnose: DiagnoseSection,
    pub study: StudySection,
}

const SECTIONS: [&str; 8] = [
    "data", "simulate", "fit", "contrast", "vim", "estimate", "diagnose", "study",
];

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` of the form
    /// `section.key=value`, and validates everything at once.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(vec![format!("{}: {e}", p.display())]))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(vec![format!("{}: {e}", p.display())]))?
            }
            None => toml::Table::new(),
        };
        let mut problems = Vec::new();
        for o in overrides {
            if let Err(e) = apply_override(&mut root, o) {
                problems.push(e);
            }
        }
        let (bad, key_errors) = key_problems(&root);
        problems.extend(key_errors);
        // drop unusable keys so the remaining ones still get semantic checks
        for (section, key) in bad {
            match section {
                None => {
                    root.remove(&key);
                }
                Some(s) => {
                    if let Some(toml::Value::Table(t)) = root.get_mut(&s) {
                        t.remove(&key);
                    }
                }
            }
        }
        match toml::Value::Table(root).try_into::<RunConfig>() {
            Ok(cfg) => {
                let extra: Vec<String> = cfg
                    .problems()
                    .into_iter()
                    .filter(|p| !problems.iter().any(|q| same_key(p, q)))
                    .collect();
                problems.extend(extra);
                if problems.is_empty() {
                    Ok(cfg)
                } else {
                    Err(CliError::Config(problems))
                }
            }
            Err(e) => {
                problems.push(e.message().to_string());
                Err(CliError::Config(problems))
            }
        }
    }

    /// Semantic constraints, every violated one.
    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> = self.fit.problems().into_iter().map(|p| format!("fit.{p}")).collect();
        if self.fit.seed != FitConfig::default().seed {
            out.push("fit.seed: set the top-level seed instead".into());
        }
        if self.simulate.n < 50 {
            out.push("simulate.n: must be at least 50".into());
        }
        if self.simulate.truth_draws < 2 {
            out.push("simulate.truth_draws: must be at least 2".into());
        }
        let q = (!self.data.exposures.is_empty()).then_some(self.data.exposures.len());
        out.extend(self.contrast.w0.problem("w0", q));
        out.extend(self.contrast.w1.problem("w1", q));
        if self.vim.blocks == Some(0) {
            out.push("vim.blocks: must be at least 1".into());
        }
        if let Some(gs) = &self.vim.groups {
            if gs.is_empty() || gs.iter().any(Vec::is_empty) {
                out.push("vim.groups: groups must be non-empty".into());
            }
        }
        if self.estimate.curve_points < 2 {
            out.push("estimate.curve_points: must be at least 2".into());
        }
        if !(self.estimate.level > 0.0 && self.estimate.level < 1.0) {
            out.push("estimate.level: must lie in (0, 1)".into());
        }
        if !(self.estimate.alpha > 0.0 && self.estimate.alpha < 1.0) {
            out.push("estimate.alpha: must lie in (0, 1)".into());
        }
        let d = &self.diagnose;
        if !(d.delta > 0.0 && d.delta < 1.0) {
            out.push("diagnose.delta: must lie in (0, 1)".into());
        }
        for (key, (a, b)) in [("low_window", d.low_window), ("high_window", d.high_window)] {
            if !(0.0 <= a && a < b && b <= 1.0) {
                out.push(format!("diagnose.{key}: need 0 <= lower < upper <= 1"));
            }
        }
        if self.study.blocks == Some(0) {
            out.push("study.blocks: must be at least 1".into());
        }
        let fit_problems = self.fit.problems();
        out.extend(
            self.study_config()
                .problems()
                .into_iter()
                .filter(|p| !fit_problems.contains(p))
                .map(|p| format!("study.{p}")),
        );
        out
    }

    pub fn study_config(&self) -> StudyConfig {
        let s = &self.study;
        let mut c = StudyConfig::new(s.scenario, s.n, s.replicates);
        c.master_seed = self.seed;
        c.fit = self.fit.clone();
        c.contrast = ExposureContrast {
            w0: s.w0.clone(),
            w1: s.w1.clone(),
        };
        c.alpha = s.alpha;
        c.test_points = s.test_points;
        c.vim = VimOptions {
            smoother: s.smoother,
            blocks: s.blocks,
            groups: None,
            seed: self.seed,
        };
        c.vim_subsample = s.vim_subsample;
        c.truth_draws = s.truth_draws;
        c
    }

    /// Fit settings with the master seed applied.
    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            seed: self.seed,
            ..self.fit.clone()
        }
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // bare strings are accepted without quotes
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("--set {spec:?}: expected key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) || path.len() > 2 {
        return Err(format!("--set {spec:?}: expected section.key or key"));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("non-empty");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| format!("--set {spec:?}: {p} is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

type BadKey = (Option<String>, String);

fn same_key(a: &str, b: &str) -> bool {
    a.split(':').next() == b.split(':').next()
}

/// Checks each key on its own so that one bad key does not hide another.
fn check_keys<T: DeserializeOwned>(
    section: Option<&str>,
    table: &toml::Table,
    bad: &mut Vec<BadKey>,
    out: &mut Vec<String>,
) {
    for (k, v) in table {
        let mut single = toml::Table::new();
        single.insert(k.clone(), v.clone());
        if let Err(e) = toml::Value::Table(single).try_into::<T>() {
            let name = match section {
                Some(s) => format!("{s}.{k}"),
                None => k.clone(),
            };
            out.push(format!("{name}: {}", e.message().trim()));
            bad.push((section.map(String::from), k.clone()));
        }
    }
}

fn key_problems(root: &toml::Table) -> (Vec<BadKey>, Vec<String>) {
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for (k, v) in root {
        let sec = Some(k.as_str());
        match (k.as_str(), v) {
            ("seed", _) => {
                let mut single = toml::Table::new();
                single.insert(k.clone(), v.clone());
                check_keys::<RunConfig>(None, &single, &mut bad, &mut out);
            }
            (s, toml::Value::Table(t)) if SECTIONS.contains(&s) => match s {
                "data" => check_keys::<DataSection>(sec, t, &mut bad, &mut out),
                "simulate" => check_keys::<SimulateSection>(sec, t, &mut bad, &mut out),
                "fit" => check_keys::<FitConfig>(sec, t, &mut bad, &mut out),
                "contrast" => check_keys::<ContrastSection>(sec, t, &mut bad, &mut out),
                "vim" => check_keys::<VimSection>(sec, t, &mut bad, &mut out),
                "estimate" => check_keys::<EstimateSection>(sec, t, &mut bad, &mut out),
                "diagnose" => check_keys::<DiagnoseSection>(sec, t, &mut bad, &mut out),
                _ => check_keys::<StudySection>(sec, t, &mut bad, &mut out),
            },
            _ => {
                let msg = if SECTIONS.contains(&k.as_str()) {
                    "expected a section"
                } else {
                    "unknown key"
                };
                out.push(format!("{k}: {msg}"));
                bad.push((None, k.clone()));
            }
        }
    }
    (bad, out)
}
