//! Command-line front end for CAMM: `fit`, `predict`, `simulate` and
//! `warp-check`.
//!
//! Exit codes: 0 success, 2 input or validation error, 3 non-convergence
//! (artifacts are still written), 4 numerical failure.

pub mod commands;
pub mod config;
pub mod data;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use camm::CammError;
use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, TemplateName, TrNum};

#[derive(Debug)]
pub enum CliError {
    Input(String),
    /// Fit finished without meeting the convergence tolerance.
    NotConverged(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::NotConverged(m) => write!(f, "not converged: {m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CammError> for CliError {
    fn from(e: CammError) -> Self {
        match e {
            CammError::Numerical(_)
            | CammError::Singular(_)
            | CammError::Optimizer(_)
            | CammError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "camm", version, about = "Compositionally-warped additive mixed models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a model and write fit.json plus coefficient tables.
    Fit(CommonArgs),
    /// Predict new rows from a saved fit.json.
    Predict(CommonArgs),
    /// Run the Monte Carlo experiment grid.
    Simulate(CommonArgs),
    /// Fit the warp-only model and report normality diagnostics.
    WarpCheck(CommonArgs),
}

/// Flags override values from `--config`.
#[derive(Args, Debug, Default, Clone)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub response: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Two columns: x,y.
    #[arg(long, value_delimiter = ',')]
    pub coords: Option<Vec<String>>,
    #[arg(long)]
    pub location_id: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub group_ids: Option<Vec<String>>,
    #[arg(long)]
    pub time_id: Option<String>,
    /// Number of SAL steps, or "select".
    #[arg(long, value_parser = TrNum::parse)]
    pub tr_num: Option<TrNum>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub tr_nonneg: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub x_nvc: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    pub d_candidates: Option<Vec<usize>>,
    #[arg(long)]
    pub max_vectors: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// 0 quiet, 1 summary, 2 estimation phases.
    #[arg(long)]
    pub verbosity: Option<u8>,
    /// predict: fit.json to load.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// predict: response column for RMSPE.
    #[arg(long)]
    pub truth: Option<String>,
    /// warp-check: default or nonneg.
    #[arg(long, value_parser = parse_template)]
    pub template: Option<TemplateName>,
}

fn parse_template(s: &str) -> Result<TemplateName, String> {
    match s {
        "default" => Ok(TemplateName::Default),
        "nonneg" => Ok(TemplateName::Nonneg),
        _ => Err(format!("unknown template '{s}' (default or nonneg)")),
    }
}

impl CommonArgs {
    /// Loads the config file, if any, and applies the flags on top.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! over {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { c.$f = Some(v.clone()); } )* };
        }
        over!(
            input, output_dir, response, coords, location_id, time_id, tr_num, tr_nonneg, x_nvc,
            d_candidates, max_vectors, seed, replicates, threads, verbosity, fit, truth, template
        );
        if let Some(v) = &self.covariates {
            c.covariates = v.clone();
        }
        if let Some(v) = &self.group_ids {
            c.group_ids = v.clone();
        }
        Ok(c)
    }
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (args, cmd): (&CommonArgs, fn(&RunConfig) -> Result<(), CliError>) = match &cli.command {
        Command::Fit(a) => (a, commands::fit),
        Command::Predict(a) => (a, commands::predict),
        Command::Simulate(a) => (a, commands::simulate),
        Command::WarpCheck(a) => (a, commands::warp_check),
    };
    let result = args.resolve().and_then(|cfg| {
        if let Some(t) = cfg.threads {
            // a second build in the same process (tests) keeps the first pool
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
        cmd(&cfg)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("camm: {e}");
            e.exit_code()
        }
    }
}

/// Writes via a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let io = |e: std::io::Error| CliError::Input(format!("cannot write {}: {e}", path.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, "response = \"a\"\ncovariates = [\"x\"]\nseed = 3\nx_nvc = true\n").unwrap();
        let cli = Cli::try_parse_from([
            "camm",
            "fit",
            "--config",
            cfg.to_str().unwrap(),
            "--response",
            "b",
            "--x-nvc",
            "false",
            "--tr-num",
            "select",
            "--d-candidates",
            "0,2",
        ])
        .unwrap();
        let Command::Fit(a) = cli.command else { panic!() };
        let c = a.resolve().unwrap();
        assert_eq!(c.response.as_deref(), Some("b"));
        assert_eq!(c.covariates, vec!["x"]);
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.x_nvc, Some(false));
        assert_eq!(c.d_candidates, Some(vec![0, 2]));
    }

    #[test]
    fn bare_bool_flag_means_true() {
        let cli = Cli::try_parse_from(["camm", "fit", "--tr-nonneg"]).unwrap();
        let Command::Fit(a) = cli.command else { panic!() };
        assert_eq!(a.tr_nonneg, Some(true));
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(CammError::RankDeficient).exit_code(), 2);
        assert_eq!(CliError::from(CammError::Numerical("x".into())).exit_code(), 4);
        assert_eq!(run(["camm", "bogus"]), 2);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
