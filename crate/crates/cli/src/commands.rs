//! Subcommand implementations. Each returns `Err(NotConverged)` only after
//! its artifacts are on disk.

use std::path::Path;

use camm::model::{
    coefficient_inference, fit_camm_observed, marginal_effects, rmspe, varying_p_values,
};
use camm::reml::{FitObserver, Phase};
use camm::simulate::{run_experiment, write_experiment_csv};
use camm::stats;
use camm::{predict as predict_rows, Dataset, FitResult, ModelSpec, WarpStack};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TemplateName, TrNum};
use crate::data::{dataset, Table};
use crate::{write_atomic, CliError};

pub const FIT_FILE: &str = "fit.json";
pub const HISTOGRAM_RANGE: (f64, f64) = (-4.0, 4.0);
const DEFAULT_BINS: usize = 20;

/// Column roles recorded with a fit so `predict` can read new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub response: String,
    pub covariates: Vec<String>,
    pub coords: Option<Vec<String>>,
    pub location_id: Option<String>,
    pub group_ids: Vec<String>,
    pub time_id: Option<String>,
}

/// Contents of fit.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub columns: ColumnRoles,
    pub model: FitResult,
}

impl FitDocument {
    pub fn load(path: &Path) -> Result<FitDocument, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        let doc: FitDocument = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}: not a fit document: {e}", path.display())))?;
        if doc.model.schema_version != camm::model::SCHEMA_VERSION {
            return Err(CliError::Input(format!(
                "{}: unsupported schema_version {}",
                path.display(),
                doc.model.schema_version
            )));
        }
        Ok(doc)
    }

    fn run_config(&self) -> RunConfig {
        RunConfig {
            response: Some(self.columns.response.clone()),
            covariates: self.columns.covariates.clone(),
            coords: self.columns.coords.clone(),
            location_id: self.columns.location_id.clone(),
            group_ids: self.columns.group_ids.clone(),
            time_id: self.columns.time_id.clone(),
            ..Default::default()
        }
    }
}

struct PhaseLog;

impl FitObserver for PhaseLog {
    fn on_phase(&self, phase: Phase) {
        eprintln!("  {phase:?}");
    }
}

struct Quiet;
impl FitObserver for Quiet {}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Numeric(format!("csv encoding failed: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner()
        .map_err(|e| CliError::Numeric(format!("csv encoding failed: {e}")))
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

fn fit_with(cfg: &RunConfig, data: &Dataset, spec: &ModelSpec) -> Result<FitResult, CliError> {
    let observer: &dyn FitObserver = if cfg.verbosity() >= 2 { &PhaseLog } else { &Quiet };
    Ok(fit_camm_observed(data, spec, observer)?)
}

/// `camm fit`: writes fit.json, coefficients.csv, fixed_effects.csv,
/// marginal_effects.csv and fit_report.csv.
pub fn fit(cfg: &RunConfig) -> Result<(), CliError> {
    let table = Table::read(cfg.input()?)?;
    let response = cfg.response()?;
    let data = dataset(cfg, &table, Some(response))?;
    let spec = cfg.model_spec()?;
    let fit = fit_with(cfg, &data, &spec)?;
    let out = cfg.output_dir();

    let doc = FitDocument {
        columns: ColumnRoles {
            response: response.to_string(),
            covariates: cfg.covariates.clone(),
            coords: cfg.coords.clone(),
            location_id: cfg.location_id.clone(),
            group_ids: cfg.group_ids.clone(),
            time_id: cfg.time_id.clone(),
        },
        model: fit,
    };
    let fit = &doc.model;
    let json = serde_json::to_string_pretty(&doc).expect("fit document serializes");
    write_atomic(&out.join(FIT_FILE), json.as_bytes())?;

    let pvals = varying_p_values(fit);
    let mut rows = Vec::new();
    for i in 0..fit.n {
        for (k, name) in fit.coefficient_names.iter().enumerate() {
            rows.push(vec![
                (i + 1).to_string(),
                name.clone(),
                num(fit.varying_coefficients[k][i]),
                num(fit.varying_svc_part[k][i]),
                num(fit.varying_nvc_part[k][i]),
                num(fit.varying_se[k][i]),
                num(pvals[k][i]),
            ]);
        }
    }
    let header = ["row_id", "covariate", "beta_total", "beta_svc_part", "beta_nvc_part", "se", "p"];
    write_atomic(&out.join("coefficients.csv"), &csv_bytes(&header, rows)?)?;

    let fixed = coefficient_inference(fit).into_iter().zip(&fit.coef_type).map(|(c, t)| {
        vec![c.name, num(c.estimate), num(c.se), num(c.t), num(c.p), t.name().to_string()]
    });
    let header = ["covariate", "estimate", "se", "t", "p", "coef_type"];
    write_atomic(&out.join("fixed_effects.csv"), &csv_bytes(&header, fixed)?)?;

    let me = marginal_effects(fit, &data)?;
    let rows = me
        .covariate_names
        .iter()
        .zip(&me.medians)
        .map(|(n, m)| vec![n.clone(), num(*m)]);
    write_atomic(&out.join("marginal_effects.csv"), &csv_bytes(&["covariate", "median_effect"], rows)?)?;

    let rows = fit.depth_report.iter().map(|r| {
        vec![
            r.d.to_string(),
            num(r.bic),
            num(r.log_restricted_lik),
            num(r.log_lik),
            r.converged.to_string(),
            (r.d == fit.d).to_string(),
            r.error.clone().unwrap_or_default(),
        ]
    });
    let header = ["d", "bic", "log_restricted_lik", "log_lik", "converged", "selected", "error"];
    write_atomic(&out.join("fit_report.csv"), &csv_bytes(&header, rows)?)?;

    if cfg.verbosity() >= 1 {
        println!("D     BIC");
        for r in &fit.depth_report {
            let mark = if r.d == fit.d { " *" } else { "" };
            println!("{:<5} {:.4}{mark}", r.d, r.bic);
        }
        for (name, t) in fit.coefficient_names.iter().zip(&fit.coef_type) {
            println!("{name}: {}", t.name());
        }
        println!("wrote {}", out.display());
    }
    if !fit.converged {
        return Err(CliError::NotConverged(format!(
            "stopped after {} cycles; artifacts in {} are flagged converged=false",
            fit.cycles,
            out.display()
        )));
    }
    Ok(())
}

/// `camm predict`: predictions.csv with one row per input row.
pub fn predict(cfg: &RunConfig) -> Result<(), CliError> {
    let fit_path = cfg
        .fit
        .clone()
        .unwrap_or_else(|| cfg.output_dir().join(FIT_FILE));
    let doc = FitDocument::load(&fit_path)?;
    let table = Table::read(cfg.input()?)?;
    let roles = doc.run_config();
    let data = dataset(&roles, &table, None)?;
    let pred = predict_rows(&doc.model, &data)?;

    let rows = pred.warped.iter().zip(&pred.response).enumerate().map(|(i, (w, r))| {
        let (p, flag) = match r {
            Some(v) if v.is_finite() => (num(*v), "ok"),
            _ => (String::new(), "inverse_undefined"),
        };
        vec![(i + 1).to_string(), p, num(*w), flag.to_string()]
    });
    let header = ["row_id", "prediction", "linear_predictor", "flag"];
    let out = cfg.output_dir();
    write_atomic(&out.join("predictions.csv"), &csv_bytes(&header, rows)?)?;

    let flagged = pred.response.iter().filter(|r| r.is_none()).count();
    if flagged > 0 {
        eprintln!("camm: {flagged} rows flagged inverse_undefined");
    }
    if let Some(col) = &cfg.truth {
        let truth = table.numeric(col)?;
        let (p, t): (Vec<f64>, Vec<f64>) = pred
            .response
            .iter()
            .zip(&truth)
            .filter_map(|(p, t)| p.filter(|v| v.is_finite()).map(|p| (p, *t)))
            .unzip();
        println!("rmspe={} rows={}", rmspe(&p, &t), p.len());
    }
    Ok(())
}

/// `camm simulate`: experiment.csv over the configured grid.
pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let grid = cfg.experiment_grid()?;
    let mut records = run_experiment(&grid)?;
    if !cfg.simulate.timing {
        for r in &mut records {
            r.seconds = 0.0;
        }
    }
    let mut buf = Vec::new();
    write_experiment_csv(&records, &mut buf)?;
    let out = cfg.output_dir();
    write_atomic(&out.join("experiment.csv"), &buf)?;
    if cfg.verbosity() >= 1 {
        println!("{} records, wrote {}", records.len(), out.join("experiment.csv").display());
    }
    Ok(())
}

/// Moments and histogram of a standardized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub histogram: Vec<usize>,
}

pub fn diagnostics(z: &[f64], bins: usize) -> Diagnostics {
    let m = stats::mean(z);
    let s = stats::std_dev(z);
    let std: Vec<f64> = z.iter().map(|v| (v - m) / s).collect();
    Diagnostics {
        skewness: stats::skewness(z),
        excess_kurtosis: stats::excess_kurtosis(z),
        histogram: stats::histogram(&std, HISTOGRAM_RANGE.0, HISTOGRAM_RANGE.1, bins),
    }
}

/// `camm warp-check`: fits intercept + warp and writes warp_check.csv,
/// warp_histogram.csv and warp.json.
pub fn warp_check(cfg: &RunConfig) -> Result<(), CliError> {
    let table = Table::read(cfg.input()?)?;
    let y = table.numeric(cfg.response()?)?;
    let bins = cfg.bins.unwrap_or(DEFAULT_BINS).max(1);
    let mut spec = ModelSpec::linear(0);
    spec.tr_num = cfg.tr_num.unwrap_or(TrNum::Depth(2)).depth();
    spec.tr_nonneg = cfg.template.unwrap_or_default() == TemplateName::Nonneg;
    if let Some(d) = &cfg.d_candidates {
        spec.d_candidates = d.clone();
    }
    let data = Dataset::new(y.clone(), vec![], vec![]);
    let fit = fit_with(cfg, &data, &spec)?;
    let z = fit.stack.forward(&y)?;

    let pre = diagnostics(&y, bins);
    let post = diagnostics(&z, bins);
    let rows = [("pre", &pre), ("post", &post)].map(|(s, d)| {
        vec![s.to_string(), num(d.skewness), num(d.excess_kurtosis), fit.d.to_string()]
    });
    let out = cfg.output_dir();
    let header = ["stage", "skewness", "excess_kurtosis", "d"];
    write_atomic(&out.join("warp_check.csv"), &csv_bytes(&header, rows)?)?;

    let width = (HISTOGRAM_RANGE.1 - HISTOGRAM_RANGE.0) / bins as f64;
    let rows = (0..bins).map(|b| {
        let lo = HISTOGRAM_RANGE.0 + b as f64 * width;
        vec![num(lo), num(lo + width), pre.histogram[b].to_string(), post.histogram[b].to_string()]
    });
    let header = ["bin_lo", "bin_hi", "pre", "post"];
    write_atomic(&out.join("warp_histogram.csv"), &csv_bytes(&header, rows)?)?;
    write_atomic(&out.join("warp.json"), fit.stack.to_json().as_bytes())?;

    if cfg.verbosity() >= 1 {
        println!("D = {}", fit.d);
        println!("pre:  skewness {:.4}  excess kurtosis {:.4}", pre.skewness, pre.excess_kurtosis);
        println!("post: skewness {:.4}  excess kurtosis {:.4}", post.skewness, post.excess_kurtosis);
    }
    if !fit.converged {
        return Err(CliError::NotConverged(format!("warp fit stopped after {} cycles", fit.cycles)));
    }
    Ok(())
}

/// Reloads a warp written by `warp-check`.
pub fn load_warp(path: &Path) -> Result<WarpStack, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    Ok(WarpStack::from_json(&text)?)
}
