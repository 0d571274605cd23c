//! Monte Carlo machinery: spatially varying coefficient data under Tukey
//! g-and-h warping, distribution fixtures, accuracy metrics and timing.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, ChiSquared, Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CammError, Result};
use crate::model::{fit_camm, Dataset, FitResult, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub g: f64,
    pub h: f64,
    pub replicates: usize,
    pub seed: u64,
    pub kernel_range_dgp: f64,
    pub noise_sd: f64,
    /// Standard deviations of the moving-average innovations `u_0, u_1, u_2`.
    pub svc_sd: [f64; 3],
    pub svc_means: [f64; 3],
    /// Draw this many sites and assign samples to them at random; `None`
    /// gives every sample its own site.
    pub n_locations: Option<usize>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n: 500,
            g: 0.0,
            h: 0.0,
            replicates: 20,
            seed: 1,
            kernel_range_dgp: 0.5,
            noise_sd: 2.0,
            svc_sd: [1.0, 3.0, 1.0],
            svc_means: [1.0, -2.0, 0.5],
            n_locations: None,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(CammError::InvalidParameter("replicates must be >= 1".into()));
        }
        if !(self.h >= 0.0) {
            return Err(CammError::InvalidParameter(format!("h must be >= 0, got {}", self.h)));
        }
        if self.n < 3 || self.n_locations.is_some_and(|l| l < 3) {
            return Err(CammError::InvalidParameter("need at least 3 sites".into()));
        }
        Ok(())
    }
}

/// A generated dataset with its true coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SvcSample {
    pub data: Dataset,
    /// Response before warping.
    pub y0: Vec<f64>,
    /// `beta[k][i]`, k = 0 (intercept), 1, 2.
    pub beta: [Vec<f64>; 3],
}

/// Independent stream for `(seed, cell, replicate)`.
pub fn stream_rng(seed: u64, cell: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ cell.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(replicate);
    rng
}

/// Tukey g-and-h transform; `h >= 0`.
pub fn tukey_gh(z: &[f64], g: f64, h: f64) -> Vec<f64> {
    z.iter()
        .map(|&v| {
            let tail = (h * v * v / 2.0).exp();
            if g == 0.0 {
                v * tail
            } else {
                (g * v).exp_m1() / g * tail
            }
        })
        .collect()
}

fn moving_average(coords: &[[f64; 2]], range: f64, u: &[f64]) -> Vec<f64> {
    let n = coords.len();
    (0..n)
        .map(|i| {
            let mut wsum = 0.0;
            let mut acc = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = (coords[i][0] - coords[j][0]).hypot(coords[i][1] - coords[j][1]);
                let w = (-d / range).exp();
                wsum += w;
                acc += w * u[j];
            }
            acc / wsum
        })
        .collect()
}

pub fn generate_svc_data(cfg: &SimulationConfig, rng: &mut ChaCha8Rng) -> SvcSample {
    let n = cfg.n;
    let sites = cfg.n_locations.unwrap_or(n);
    let site_coords: Vec<[f64; 2]> = (0..sites)
        .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
        .collect();
    let site_of: Vec<usize> = match cfg.n_locations {
        None => (0..n).collect(),
        Some(l) => (0..n).map(|i| if i < l { i } else { rng.random_range(0..l) }).collect(),
    };
    let x1: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let x2: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();

    let site_beta: Vec<Vec<f64>> = (0..3)
        .map(|k| {
            let u: Vec<f64> = (0..sites)
                .map(|_| cfg.svc_sd[k] * rng.sample::<f64, _>(StandardNormal))
                .collect();
            moving_average(&site_coords, cfg.kernel_range_dgp, &u)
                .into_iter()
                .map(|v| v + cfg.svc_means[k])
                .collect()
        })
        .collect();
    let beta: [Vec<f64>; 3] =
        std::array::from_fn(|k| site_of.iter().map(|&s| site_beta[k][s]).collect());

    let noise = Normal::new(0.0, cfg.noise_sd).expect("valid noise sd");
    let y0: Vec<f64> = (0..n)
        .map(|i| beta[0][i] + x1[i] * beta[1][i] + x2[i] * beta[2][i] + noise.sample(rng))
        .collect();
    let y = if cfg.g == 0.0 && cfg.h == 0.0 {
        y0.clone()
    } else {
        tukey_gh(&y0, cfg.g, cfg.h)
    };

    let coords: Vec<[f64; 2]> = site_of.iter().map(|&s| site_coords[s]).collect();
    let mut data =
        Dataset::new(y, vec!["x1".into(), "x2".into()], vec![x1, x2]).with_coords(coords);
    if cfg.n_locations.is_some() {
        data = data.with_location_ids(site_of.iter().map(|s| format!("s{s}")).collect());
    }
    SvcSample { data, y0, beta }
}

/// Root mean squared error over replicates x samples.
pub fn rmse(estimates: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimates.shape() != truth.shape() {
        return Err(CammError::Shape(format!(
            "estimates {:?} vs truth {:?}",
            estimates.shape(),
            truth.shape()
        )));
    }
    Ok(((estimates - truth).norm_squared() / estimates.len() as f64).sqrt())
}

pub fn mean_estimate(estimates: &DMatrix<f64>) -> f64 {
    estimates.mean()
}

/// The three 1000-sample distribution fixtures.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixtures {
    pub beta: Vec<f64>,
    pub skew_t: Vec<f64>,
    pub mixture: Vec<f64>,
}

pub const SKEW_T_SCALE: f64 = 6.0;
pub const SKEW_T_SLANT: f64 = 3.0;
pub const SKEW_T_DOF: f64 = 5.0;

/// Azzalini skew-t draw with location 0.
pub fn skew_t(rng: &mut ChaCha8Rng, scale: f64, slant: f64, dof: f64) -> f64 {
    let delta = slant / (1.0 + slant * slant).sqrt();
    let u0: f64 = rng.sample(StandardNormal);
    let u1: f64 = rng.sample(StandardNormal);
    let z = delta * u0.abs() + (1.0 - delta * delta).sqrt() * u1;
    let v = ChiSquared::new(dof).expect("positive dof").sample(rng);
    scale * z / (v / dof).sqrt()
}

pub fn gaussianization_fixtures(seed: u64) -> Fixtures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = Beta::new(2.0, 2.0).expect("valid shape");
    let beta = (0..1000).map(|_| b.sample(&mut rng)).collect();
    let skew_t = (0..1000)
        .map(|_| skew_t(&mut rng, SKEW_T_SCALE, SKEW_T_SLANT, SKEW_T_DOF))
        .collect();
    let mut mixture = Vec::with_capacity(1000);
    for (mean, count) in [(-2.0, 250), (5.0, 250), (10.0, 500)] {
        let d = Normal::new(mean, 1.0).expect("unit variance");
        mixture.extend((0..count).map(|_| d.sample(&mut rng)));
    }
    Fixtures {
        beta,
        skew_t,
        mixture,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// Ordinary least squares on the raw response.
    Lm,
    /// Spatially varying coefficients on the raw response.
    Amm,
    /// Spatially varying coefficients with `D` SAL steps.
    Camm(usize),
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lm => "LM",
            ModelKind::Amm => "AMM",
            ModelKind::Camm(_) => "CAMM",
        }
    }

    pub fn depth(self) -> usize {
        match self {
            ModelKind::Camm(d) => d,
            _ => 0,
        }
    }

    /// Specification for the two-covariate simulated data.
    pub fn spec(self, max_vectors: usize) -> ModelSpec {
        let base = match self {
            ModelKind::Lm => ModelSpec::linear(2),
            _ => ModelSpec {
                select_types: false,
                ..ModelSpec::new(2)
            },
        };
        ModelSpec {
            max_vectors,
            ..base.depth(self.depth())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub gs: Vec<f64>,
    pub hs: Vec<f64>,
    pub ns: Vec<usize>,
    pub models: Vec<ModelKind>,
    /// Coefficient indices reported (0 = intercept).
    pub coefficients: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub max_vectors: usize,
    pub n_locations: Option<usize>,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            gs: vec![0.0, 0.5],
            hs: vec![0.0, 0.125, 0.25],
            ns: vec![500],
            models: vec![ModelKind::Lm, ModelKind::Amm, ModelKind::Camm(2)],
            coefficients: vec![0, 1, 2],
            replicates: 20,
            seed: 1,
            max_vectors: 100,
            n_locations: None,
        }
    }
}

/// Metrics for one (g, h, N, model, coefficient) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub g: f64,
    pub h: f64,
    pub n: usize,
    pub model: ModelKind,
    pub coefficient: usize,
    pub rmse: f64,
    pub mean: f64,
    /// Mean wall-clock seconds per fit.
    pub seconds: f64,
    /// Replicates that returned a converged fit.
    pub converged: usize,
    pub replicates: usize,
    /// Restricted log-likelihood traces of every fit behind this cell.
    #[serde(skip)]
    pub traces: Vec<Vec<f64>>,
}

struct ReplicateOutcome {
    /// Per model: estimates `[k][i]`, seconds, converged, traces.
    fits: Vec<Option<(Vec<Vec<f64>>, f64, bool, Vec<Vec<f64>>)>>,
    truth: [Vec<f64>; 3],
}

fn fit_traces(fit: &FitResult) -> Vec<Vec<f64>> {
    let mut t = fit.selection_traces.clone();
    if t.is_empty() {
        t.push(fit.trace.clone());
    }
    t
}

pub fn run_experiment(grid: &ExperimentGrid) -> Result<Vec<ExperimentRecord>> {
    if grid.replicates == 0 {
        return Err(CammError::InvalidParameter("replicates must be >= 1".into()));
    }
    if let Some(&k) = grid.coefficients.iter().find(|&&k| k > 2) {
        return Err(CammError::InvalidParameter(format!("coefficient index {k} > 2")));
    }
    let mut records = Vec::new();
    let mut cell = 0u64;
    for &n in &grid.ns {
        for &g in &grid.gs {
            for &h in &grid.hs {
                let cfg = SimulationConfig {
                    n,
                    g,
                    h,
                    replicates: grid.replicates,
                    seed: grid.seed,
                    n_locations: grid.n_locations,
                    ..Default::default()
                };
                cfg.validate()?;
                let outcomes: Vec<ReplicateOutcome> = (0..grid.replicates)
                    .into_par_iter()
                    .map(|r| {
                        let mut rng = stream_rng(grid.seed, cell, r as u64);
                        let sample = generate_svc_data(&cfg, &mut rng);
                        let fits = grid
                            .models
                            .iter()
                            .map(|m| {
                                let start = Instant::now();
                                let fit = fit_camm(&sample.data, &m.spec(grid.max_vectors)).ok()?;
                                let secs = start.elapsed().as_secs_f64();
                                Some((
                                    fit.varying_coefficients.clone(),
                                    secs,
                                    fit.converged,
                                    fit_traces(&fit),
                                ))
                            })
                            .collect();
                        ReplicateOutcome {
                            fits,
                            truth: sample.beta,
                        }
                    })
                    .collect();
                for (mi, &model) in grid.models.iter().enumerate() {
                    let ok: Vec<(&ReplicateOutcome, &(Vec<Vec<f64>>, f64, bool, Vec<Vec<f64>>))> =
                        outcomes
                            .iter()
                            .filter_map(|o| o.fits[mi].as_ref().map(|f| (o, f)))
                            .collect();
                    let converged = ok.iter().filter(|(_, f)| f.2).count();
                    let seconds = ok.iter().map(|(_, f)| f.1).sum::<f64>() / ok.len().max(1) as f64;
                    let traces: Vec<Vec<f64>> =
                        ok.iter().flat_map(|(_, f)| f.3.iter().cloned()).collect();
                    for &k in &grid.coefficients {
                        let (rmse_v, mean_v) = if ok.is_empty() {
                            (f64::NAN, f64::NAN)
                        } else {
                            let est = DMatrix::from_fn(ok.len(), n, |r, i| ok[r].1 .0[k][i]);
                            let truth = DMatrix::from_fn(ok.len(), n, |r, i| ok[r].0.truth[k][i]);
                            (rmse(&est, &truth)?, mean_estimate(&est))
                        };
                        records.push(ExperimentRecord {
                            g,
                            h,
                            n,
                            model,
                            coefficient: k,
                            rmse: rmse_v,
                            mean: mean_v,
                            seconds,
                            converged,
                            replicates: grid.replicates,
                            traces: traces.clone(),
                        });
                    }
                }
                cell += 1;
            }
        }
    }
    Ok(records)
}

pub const EXPERIMENT_HEADER: [&str; 10] = [
    "g",
    "h",
    "N",
    "model",
    "D",
    "coefficient",
    "rmse",
    "mean",
    "seconds",
    "converged",
];

/// Writes the experiment table. `converged` is the count of converged
/// replicates; `seconds` is the mean fit time.
pub fn write_experiment_csv<W: Write>(records: &[ExperimentRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| CammError::Numerical(format!("csv write failed: {e}"));
    w.write_record(EXPERIMENT_HEADER).map_err(io)?;
    for r in records {
        w.write_record([
            r.g.to_string(),
            r.h.to_string(),
            r.n.to_string(),
            r.model.name().to_string(),
            r.model.depth().to_string(),
            format!("beta{}", r.coefficient),
            r.rmse.to_string(),
            r.mean.to_string(),
            r.seconds.to_string(),
            r.converged.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()
        .map_err(|e| CammError::Numerical(format!("csv write failed: {e}")))?;
    Ok(())
}

/// Median wall-clock seconds of `runs` fits of `model` at each sample size.
pub fn timing_sweep(
    ns: &[usize],
    model: ModelKind,
    seed: u64,
    n_locations: Option<usize>,
    max_vectors: usize,
    runs: usize,
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for (c, &n) in ns.iter().enumerate() {
        let cfg = SimulationConfig {
            n,
            g: 0.5,
            h: 0.25,
            n_locations,
            ..Default::default()
        };
        let sample = generate_svc_data(&cfg, &mut stream_rng(seed, c as u64, 0));
        let spec = model.spec(max_vectors);
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs.max(1) {
            let start = Instant::now();
            fit_camm(&sample.data, &spec)?;
            times.push(start.elapsed().as_secs_f64());
        }
        out.push((n, crate::stats::median(&times)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tukey_identity_and_continuity() {
        let z = [-3.0, -0.5, 0.0, 1.2, 4.0];
        assert_eq!(tukey_gh(&z, 0.0, 0.0), z.to_vec());
        let a = tukey_gh(&z, 1e-8, 0.2);
        let b = tukey_gh(&z, 0.0, 0.2);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn tukey_monotone() {
        let z: Vec<f64> = (0..=800).map(|i| -4.0 + i as f64 * 0.01).collect();
        let t = tukey_gh(&z, 0.5, 0.25);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rmse_and_mean_fixture() {
        let est = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let truth = DMatrix::from_element(2, 2, 1.0);
        assert!((rmse(&est, &truth).unwrap() - (14.0f64 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_estimate(&est), 2.5);
        assert_eq!(rmse(&truth, &truth).unwrap(), 0.0);
        assert_eq!(rmse(&(truth.add_scalar(1.0)), &truth).unwrap(), 1.0);
        assert!(rmse(&est, &DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn identity_warp_keeps_y0() {
        let cfg = SimulationConfig {
            n: 60,
            ..Default::default()
        };
        let s = generate_svc_data(&cfg, &mut stream_rng(3, 0, 0));
        assert_eq!(s.data.y, s.y0);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SimulationConfig {
            n: 40,
            g: 0.5,
            h: 0.1,
            ..Default::default()
        };
        let a = generate_svc_data(&cfg, &mut stream_rng(9, 1, 2));
        let b = generate_svc_data(&cfg, &mut stream_rng(9, 1, 2));
        let c = generate_svc_data(&cfg, &mut stream_rng(9, 1, 3));
        assert_eq!(a, b);
        assert_ne!(a.data.y, c.data.y);
    }

    #[test]
    fn shared_locations() {
        let cfg = SimulationConfig {
            n: 100,
            n_locations: Some(10),
            ..Default::default()
        };
        let s = generate_svc_data(&cfg, &mut stream_rng(1, 0, 0));
        let ids = s.data.location_ids.as_ref().unwrap();
        let mut distinct = ids.clone();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 10);
        for i in 0..100 {
            for j in 0..100 {
                if ids[i] == ids[j] {
                    assert_eq!(s.beta[1][i], s.beta[1][j]);
                }
            }
        }
    }

    #[test]
    fn fixtures_support_and_mixture_mean() {
        let f = gaussianization_fixtures(5);
        assert!(f.beta.iter().all(|&v| v > 0.0 && v < 1.0));
        let m = crate::stats::mean(&f.mixture);
        assert!((m - 5.75).abs() < 0.3, "{m}");
        assert!(crate::stats::skewness(&f.skew_t) > 0.0);
        assert_eq!(f.mixture.len(), 1000);
    }
}
