//! Run configuration: a TOML file overlaid by command-line flags.

use std::path::{Path, PathBuf};

use camm::model::WarpDepth;
use camm::simulate::{ExperimentGrid, ModelKind};
use camm::ModelSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// `tr_num` accepts an integer depth or the string `"select"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrNum {
    Depth(usize),
    Word(SelectWord),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectWord {
    Select,
}

impl TrNum {
    pub fn parse(s: &str) -> Result<TrNum, String> {
        if s.eq_ignore_ascii_case("select") {
            return Ok(TrNum::Word(SelectWord::Select));
        }
        s.parse()
            .map(TrNum::Depth)
            .map_err(|_| format!("tr_num must be a non-negative integer or \"select\", got '{s}'"))
    }

    pub fn depth(self) -> WarpDepth {
        match self {
            TrNum::Depth(d) => WarpDepth::Fixed(d),
            TrNum::Word(_) => WarpDepth::Select,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    #[default]
    Default,
    Nonneg,
}

/// Column roles and model options shared by every subcommand.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub response: Option<String>,
    pub covariates: Vec<String>,
    /// `[x, y]` coordinate columns.
    pub coords: Option<Vec<String>>,
    pub location_id: Option<String>,
    pub group_ids: Vec<String>,
    /// Enters the model as an additional group intercept.
    pub time_id: Option<String>,
    pub tr_num: Option<TrNum>,
    pub tr_nonneg: Option<bool>,
    pub x_nvc: Option<bool>,
    pub d_candidates: Option<Vec<usize>>,
    pub max_vectors: Option<usize>,
    pub kernel_range: Option<f64>,
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub threads: Option<usize>,
    pub verbosity: Option<u8>,
    /// predict: fitted model.
    pub fit: Option<PathBuf>,
    /// predict: observed response column used for RMSPE.
    pub truth: Option<String>,
    /// warp-check: stack template.
    pub template: Option<TemplateName>,
    pub bins: Option<usize>,
    pub simulate: SimulateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub n: Vec<usize>,
    /// `"LM"`, `"AMM"` or `"CAMM<D>"`.
    pub models: Vec<String>,
    pub coefficients: Vec<usize>,
    pub n_locations: Option<usize>,
    /// When false the seconds column is written as 0 so reruns are byte-identical.
    pub timing: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let grid = ExperimentGrid::default();
        SimulateSection {
            g: grid.gs,
            h: grid.hs,
            n: grid.ns,
            models: grid.models.iter().map(|m| model_label(*m)).collect(),
            coefficients: grid.coefficients,
            n_locations: grid.n_locations,
            timing: true,
        }
    }
}

pub fn model_label(m: ModelKind) -> String {
    match m {
        ModelKind::Camm(d) => format!("CAMM{d}"),
        other => other.name().to_string(),
    }
}

pub fn parse_model(s: &str) -> Result<ModelKind, CliError> {
    let up = s.trim().to_ascii_uppercase();
    match up.as_str() {
        "LM" => Ok(ModelKind::Lm),
        "AMM" => Ok(ModelKind::Amm),
        _ => up
            .strip_prefix("CAMM")
            .and_then(|d| d.parse().ok())
            .map(ModelKind::Camm)
            .ok_or_else(|| CliError::Input(format!("unknown model '{s}' (use LM, AMM or CAMM<D>)"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))
    }

    pub fn input(&self) -> Result<&Path, CliError> {
        self.input
            .as_deref()
            .ok_or_else(|| CliError::Input("no input file (--input or `input` in the config)".into()))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn response(&self) -> Result<&str, CliError> {
        self.response
            .as_deref()
            .ok_or_else(|| CliError::Input("no response column (--response)".into()))
    }

    pub fn verbosity(&self) -> u8 {
        self.verbosity.unwrap_or(1)
    }

    /// Group columns including the time column.
    pub fn all_groups(&self) -> Vec<String> {
        let mut g = self.group_ids.clone();
        if let Some(t) = &self.time_id {
            g.push(t.clone());
        }
        g
    }

    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        let k = self.covariates.len();
        let spatial = self.coords.is_some();
        let mut spec = if spatial { ModelSpec::new(k) } else { ModelSpec::linear(k) };
        if self.x_nvc.unwrap_or(false) {
            spec.allow_nvc = vec![true; k];
        }
        spec.tr_num = self.tr_num.unwrap_or(TrNum::Depth(0)).depth();
        spec.tr_nonneg = self.tr_nonneg.unwrap_or(false);
        if let Some(d) = &self.d_candidates {
            if d.is_empty() {
                return Err(CliError::Input("d_candidates is empty".into()));
            }
            spec.d_candidates = d.clone();
        }
        if let Some(m) = self.max_vectors {
            spec.max_vectors = m;
        }
        spec.kernel_range = self.kernel_range;
        Ok(spec)
    }

    pub fn experiment_grid(&self) -> Result<ExperimentGrid, CliError> {
        let s = &self.simulate;
        let models = s.models.iter().map(|m| parse_model(m)).collect::<Result<Vec<_>, _>>()?;
        if s.g.is_empty() || s.h.is_empty() || s.n.is_empty() || models.is_empty() {
            return Err(CliError::Input("simulate grid has an empty axis".into()));
        }
        let defaults = ExperimentGrid::default();
        Ok(ExperimentGrid {
            gs: s.g.clone(),
            hs: s.h.clone(),
            ns: s.n.clone(),
            models,
            coefficients: s.coefficients.clone(),
            replicates: self.replicates.unwrap_or(defaults.replicates),
            seed: self.seed.unwrap_or(defaults.seed),
            max_vectors: self.max_vectors.unwrap_or(defaults.max_vectors),
            n_locations: s.n_locations,
        })
    }
}
