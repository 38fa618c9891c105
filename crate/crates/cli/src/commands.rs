use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use sepbart::dataset::{load_csv, normalize, Dataset, NormalizationInfo};
use sepbart::diagnostics::{positivity_report, psrf, trimmed_ate};
use sepbart::estimands::{
    all_difference_tests, ate_draws, cate_many, hetero_curve, vim, DrawSet, ExposureContrast,
};
use sepbart::model::{fit, read_draws, write_draws_with, IdentificationCheck, PosteriorSamples};
use sepbart::sim::{generate, replicate_study, true_quantities, Scenario};
use sepbart::stats::{mean, quantile, Matrix, Summary};

use crate::config::RunConfig;
use crate::output::{atomic, ensure_dir, num, write_csv, write_json, Provenance};
use crate::CliError;

fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let d = &cfg.data;
    let mut problems = Vec::new();
    if d.input.is_none() {
        problems.push("data.input: required by this command".to_string());
    }
    if d.covariates.is_empty() {
        problems.push("data.covariates: required by this command".to_string());
    }
    if d.exposures.is_empty() {
        problems.push("data.exposures: required by this command".to_string());
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let path = d.input.as_ref().expect("checked");
    Ok(load_csv(path, &d.outcome, &d.covariates, &d.exposures)?)
}

/// Reads draw files and checks they belong to `data`.
fn load_chains(
    paths: &[PathBuf],
    data: &Dataset,
) -> Result<(Vec<PosteriorSamples>, NormalizationInfo), CliError> {
    let (_, info) = normalize(data)?;
    let chains = paths
        .iter()
        .map(|p| read_draws(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    for (p, c) in paths.iter().zip(&chains) {
        if c.normalization != info {
            return Err(CliError::Runtime(format!(
                "{}: draws were fitted on different data than data.input",
                p.display()
            )));
        }
    }
    Ok((chains, info))
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let prov = Provenance::new("simulate", cfg);
    let s = &cfg.simulate;
    let scenario = Scenario::new(s.scenario, s.n, cfg.seed)?;
    let (ds, _) = generate(&scenario);
    let contrast = cfg.contrast.resolve(&ds.w);
    if contrast.w0.len() != ds.q() || contrast.w1.len() != ds.q() {
        return Err(CliError::Config(vec![format!(
            "contrast: simulated data have {} exposures",
            ds.q()
        )]));
    }
    let truth = true_quantities(s.scenario, &contrast, s.truth_draws, cfg.seed)?;
    ensure_dir(out)?;

    let mut header = vec!["y".to_string()];
    header.extend(ds.covariate_names.iter().cloned());
    header.extend(ds.exposure_names.iter().cloned());
    let rows = (0..ds.n()).map(|i| {
        let mut r = vec![num(ds.y[i])];
        r.extend(ds.x.row(i).iter().map(|v| num(*v)));
        r.extend(ds.w.row(i).iter().map(|v| num(*v)));
        r
    });
    write_csv(&out.join("data.csv"), &prov, &header, rows)?;
    write_json(
        &out.join("truth.json"),
        &prov,
        &json!({ "scenario": scenario, "contrast": contrast, "truth": truth }),
    )
}

#[derive(Serialize)]
struct ChainSummary {
    chain: usize,
    file: String,
    draws: usize,
    sigma_mean: f64,
    max_cap_ratio: f64,
    identification_anchor: f64,
    identification_telescoping: f64,
}

pub fn fit_cmd(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let prov = Provenance::new("fit", cfg);
    let data = load_data(cfg)?;
    let (norm, info) = normalize(&data)?;
    let chains = fit(&norm, &info, &cfg.fit_config())?;
    ensure_dir(out)?;
    let pj = prov.to_json();
    let (probe_x, probe_w) = (probe_rows(&norm.x), probe_rows(&norm.w));
    let mut summaries = Vec::new();
    for c in &chains {
        let name = format!("chain_{}.jsonl", c.chain);
        let path = out.join(&name);
        atomic(&path, |tmp| Ok(write_draws_with(tmp, c, Some(&pj))?))?;
        let sig: Vec<f64> = c.draws.iter().map(|d| d.state.sigma2.sqrt() * info.y_scale).collect();
        let mut ident = IdentificationCheck::default();
        for d in &c.draws {
            ident = ident.max(d.identification_check(c.xbar(), c.wbar(), &probe_x, &probe_w));
        }
        summaries.push(ChainSummary {
            chain: c.chain,
            file: name,
            draws: c.draws.len(),
            sigma_mean: mean(&sig),
            max_cap_ratio: c.draws.iter().map(|d| d.max_cap_ratio()).fold(0.0, f64::max),
            identification_anchor: ident.anchor,
            identification_telescoping: ident.telescoping,
        });
    }
    write_json(
        &out.join("fit.json"),
        &prov,
        &json!({ "n": data.n(), "p": data.p(), "q": data.q(), "chains": summaries }),
    )
}

/// Up to 100 evenly spaced training rows.
fn probe_rows(m: &Matrix) -> Vec<Vec<f64>> {
    let step = (m.nrows() / 100).max(1);
    (0..m.nrows()).step_by(step).take(100).map(|i| m.row(i).to_vec()).collect()
}

fn summary_json(s: &Summary) -> Value {
    json!({ "mean": s.mean, "sd": s.sd, "lower": s.lower, "upper": s.upper, "level": s.level })
}

pub fn estimate(cfg: &RunConfig, out: &Path, draws: &[PathBuf]) -> Result<(), CliError> {
    let prov = Provenance::new("estimate", cfg);
    let data = load_data(cfg)?;
    let (chains, _) = load_chains(draws, &data)?;
    let set = DrawSet::from_chains(&chains)?;
    let contrast: ExposureContrast = cfg.contrast.resolve(&data.w);
    if contrast.w0.len() != data.q() || contrast.w1.len() != data.q() {
        return Err(CliError::Config(vec![format!(
            "contrast: data have {} exposures",
            data.q()
        )]));
    }
    let level = cfg.estimate.level;
    ensure_dir(out)?;

    let ate = Summary::from_draws(&ate_draws(&set, &data.x, &contrast)?, level);

    let rows: Vec<Vec<f64>> = data.x.rows().map(<[f64]>::to_vec).collect();
    let cates = cate_many(&set, &rows, &contrast)?;
    let cate_rows = cates.iter().enumerate().map(|(i, d)| {
        let s = Summary::from_draws(d, level);
        vec![i.to_string(), num(s.mean), num(s.sd), num(s.lower), num(s.upper)]
    });
    let h: Vec<String> = ["row", "mean", "sd", "lower", "upper"].map(String::from).to_vec();
    write_csv(&out.join("cate.csv"), &prov, &h, cate_rows)?;

    let k = cfg.estimate.curve_points;
    let mut curve_rows = Vec::new();
    for (j, name) in data.covariate_names.iter().enumerate() {
        let col = data.x.column(j);
        let grid: Vec<f64> = (1..=k).map(|i| quantile(&col, i as f64 / (k + 1) as f64)).collect();
        for (g, s) in grid.iter().zip(hetero_curve(&set, j, &contrast, &grid)?) {
            curve_rows.push(vec![name.clone(), num(*g), num(s.mean), num(s.lower), num(s.upper)]);
        }
    }
    let h: Vec<String> = ["covariate", "value", "mean", "lower", "upper"].map(String::from).to_vec();
    write_csv(&out.join("curves.csv"), &prov, &h, curve_rows)?;

    let opts = cfg.vim.options(&data.covariate_names, cfg.seed)?;
    let vr = vim(&set, &data.x, &data.w, &contrast.w0, &opts)?;
    let unit_names: Vec<String> = vr
        .units
        .iter()
        .map(|u| u.iter().map(|&j| data.covariate_names[j].as_str()).collect::<Vec<_>>().join("+"))
        .collect();
    let psi = vr.psi_summaries(level);
    let raw = vr.psi_raw();
    let raw_mean: Vec<f64> = (0..vr.units.len())
        .map(|u| if raw.is_empty() { f64::NAN } else { mean(&raw.iter().map(|d| d[u]).collect::<Vec<_>>()) })
        .collect();
    let vim_rows = unit_names.iter().enumerate().map(|(u, name)| {
        vec![name.clone(), num(psi[u].mean), num(psi[u].lower), num(psi[u].upper), num(raw_mean[u])]
    });
    let h: Vec<String> = ["unit", "psi_mean", "psi_lower", "psi_upper", "psi_raw_mean"].map(String::from).to_vec();
    write_csv(&out.join("vim.csv"), &prov, &h, vim_rows)?;

    let tests = match all_difference_tests(&vr, cfg.estimate.alpha) {
        Ok(t) => json!(t
            .iter()
            .map(|(j, k, t)| json!({
                "units": [unit_names[*j], unit_names[*k]],
                "lower": t.lower,
                "upper": t.upper,
                "reject": t.reject,
            }))
            .collect::<Vec<_>>()),
        Err(e) => json!({ "skipped": e.to_string() }),
    };
    let body = json!({
        "contrast": contrast,
        "draws": set.len(),
        "ate": summary_json(&ate),
        "vim": {
            "smoother": vr.smoother,
            "blocks": vr.blocks,
            "units": unit_names,
            "phi": summary_json(&Summary::from_draws(&vr.phi(), level)),
            "psi": psi.iter().map(summary_json).collect::<Vec<_>>(),
            "psi_raw_mean": raw_mean,
            "psi_raw_sum": raw_mean.iter().sum::<f64>(),
            "undefined_draws": vr.undefined(),
            "tests": tests,
        },
        "files": ["cate.csv", "curves.csv", "vim.csv"],
    });
    write_json(&out.join("estimate.json"), &prov, &body)
}

pub fn diagnose(cfg: &RunConfig, out: &Path, draws: &[PathBuf]) -> Result<(), CliError> {
    let prov = Provenance::new("diagnose", cfg);
    let data = load_data(cfg)?;
    let (chains, _) = load_chains(draws, &data)?;
    let contrast = cfg.contrast.resolve(&data.w);
    ensure_dir(out)?;

    let traces = chains
        .iter()
        .map(|c| {
            let s = DrawSet {
                info: &c.normalization,
                draws: c.draws.iter().collect(),
            };
            ate_draws(&s, &data.x, &contrast)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let psrf_json = match psrf(&traces) {
        Ok(v) => json!({ "ate": v }),
        Err(e) => json!({ "skipped": e.to_string() }),
    };

    let set = DrawSet::from_chains(&chains)?;
    let report = positivity_report(&data, &cfg.diagnose.options())?;
    let all: Vec<f64> = traces.concat();
    let untrimmed = Summary::from_draws(&all, 0.95);
    let trimmed = match trimmed_ate(&set, &data.x, &report, &contrast) {
        Ok(t) => json!({
            "threshold": t.threshold,
            "kept": t.kept,
            "ate": summary_json(&t.summary),
            "difference": t.summary.mean - untrimmed.mean,
        }),
        Err(e) => json!({ "skipped": e.to_string() }),
    };
    if cfg.diagnose.per_observation {
        let rows = (0..data.n()).map(|i| {
            vec![
                i.to_string(),
                num(report.joint_p0[i]),
                num(report.joint_p1[i]),
                report.pass[i].to_string(),
            ]
        });
        let h: Vec<String> = ["row", "joint_p0", "joint_p1", "pass"].map(String::from).to_vec();
        write_csv(&out.join("positivity.csv"), &prov, &h, rows)?;
    }
    let body = json!({
        "contrast": contrast,
        "chains": chains.len(),
        "psrf": psrf_json,
        "positivity": {
            "options": report.options,
            "exposures": report.exposure_names,
            "low_bounds": report.low_bounds,
            "high_bounds": report.high_bounds,
            "marginal_pass": report.marginal_pass,
            "joint_pass": report.joint_pass,
        },
        "ate": summary_json(&untrimmed),
        "trimmed_ate": trimmed,
    });
    write_json(&out.join("diagnose.json"), &prov, &body)
}

pub fn study(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let prov = Provenance::new("study", cfg);
    let report = replicate_study(&cfg.study_config())?;
    ensure_dir(out)?;
    let units = report.mean_psi.len();
    let mut h: Vec<String> = ["replicate", "seed", "cate_rmse", "cate_coverage", "ate_mean", "ate_truth", "phi_mean"]
        .map(String::from)
        .to_vec();
    h.extend((1..=units).map(|u| format!("psi{u}")));
    let rows = report.replicates.iter().map(|r| {
        let mut v = vec![
            r.replicate.to_string(),
            r.seed.to_string(),
            num(r.cate_rmse),
            num(r.cate_covered as f64 / r.cate_points as f64),
            num(r.ate.mean),
            num(r.ate_truth),
            num(r.phi_mean),
        ];
        v.extend(r.psi_mean.iter().map(|p| num(*p)));
        v
    });
    write_csv(&out.join("replicates.csv"), &prov, &h, rows)?;
    let h: Vec<String> = ["j", "k", "rejection_rate"].map(String::from).to_vec();
    let rows = (0..units).flat_map(|j| {
        let rr = &report.rejection_rates;
        (0..units).filter(move |&k| k != j).map(move |k| vec![(j + 1).to_string(), (k + 1).to_string(), num(rr[j][k])])
    });
    write_csv(&out.join("rejection.csv"), &prov, &h, rows)?;
    write_json(&out.join("study.json"), &prov, &report)
}
