//! User-facing estimator: effect-block assembly, BIC-driven selection of
//! coefficient types and warp depth, prediction, marginal effects and
//! inference.
//!
//! Coefficients are reported on a response-like scale `r = a + b z` where
//! `z` is the warped response. For stacks ending in a standardization,
//! `b = 1 / phi'(median y)` and `a = median y - b phi(median y)`, so the
//! reported scale follows `y` near its median; with `D = 0` it is `y` itself.
//! Other stacks report on the warped scale (`a = 0`, `b = 1`).

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{
    moran_eigenvectors, unique_locations, BlockKind, EffectBlock, GroupLevels, MoranOptions,
    NaturalSpline, SpatialBasis, DEFAULT_KNOTS, DEFAULT_MAX_VECTORS,
};
use crate::error::{CammError, Result};
use crate::reml::{self, BlockVariance, FitObserver, FitOptions, RemlFit, VarianceSpec};
use crate::stats;
use crate::warp::{Template, WarpStack};

pub const SCHEMA_VERSION: u32 = 1;
pub const INTERCEPT: &str = "(Intercept)";

/// Input data. Covariates exclude the intercept.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub covariate_names: Vec<String>,
    /// One vector per covariate, each of length N.
    pub covariates: Vec<Vec<f64>>,
    pub coords: Option<Vec<[f64; 2]>>,
    /// Location labels; rows sharing a label share a spatial basis row.
    pub location_ids: Option<Vec<String>>,
    /// Named id columns, each giving a random intercept.
    pub group_ids: Vec<(String, Vec<String>)>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, covariate_names: Vec<String>, covariates: Vec<Vec<f64>>) -> Self {
        Dataset {
            y,
            covariate_names,
            covariates,
            ..Default::default()
        }
    }

    pub fn with_coords(mut self, coords: Vec<[f64; 2]>) -> Self {
        self.coords = Some(coords);
        self
    }

    pub fn with_location_ids(mut self, ids: Vec<String>) -> Self {
        self.location_ids = Some(ids);
        self
    }

    pub fn with_group(mut self, name: &str, ids: Vec<String>) -> Self {
        self.group_ids.push((name.to_string(), ids));
        self
    }

    /// Row count, taken from the covariates so response-free data works too.
    pub fn n(&self) -> usize {
        if let Some(c) = self.covariates.first() {
            c.len()
        } else if let Some(c) = &self.coords {
            c.len()
        } else {
            self.y.len()
        }
    }

    /// Checks lengths and finiteness. `need_y` also requires a response.
    pub fn validate(&self, need_y: bool) -> Result<()> {
        let n = self.n();
        if self.covariate_names.len() != self.covariates.len() {
            return Err(CammError::LengthMismatch {
                expected: self.covariates.len(),
                got: self.covariate_names.len(),
            });
        }
        let check = |len: usize| -> Result<()> {
            if len != n {
                Err(CammError::LengthMismatch { expected: n, got: len })
            } else {
                Ok(())
            }
        };
        if need_y {
            check(self.y.len())?;
            if let Some(i) = self.y.iter().position(|v| !v.is_finite()) {
                return Err(CammError::NonFinite { step: 0, index: i });
            }
        }
        for c in &self.covariates {
            check(c.len())?;
            if let Some(i) = c.iter().position(|v| !v.is_finite()) {
                return Err(CammError::NonFinite { step: 0, index: i });
            }
        }
        if let Some(c) = &self.coords {
            check(c.len())?;
        }
        if let Some(c) = &self.location_ids {
            check(c.len())?;
        }
        for (_, g) in &self.group_ids {
            check(g.len())?;
        }
        Ok(())
    }

    /// Fixed-effect design `[1, x_1, ..., x_K]`.
    pub fn design(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, self.covariates.len() + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                self.covariates[j - 1][i]
            }
        })
    }

    /// Values of design column `j` (0 is the intercept).
    fn column(&self, j: usize) -> Vec<f64> {
        if j == 0 {
            vec![1.0; self.n()]
        } else {
            self.covariates[j - 1].clone()
        }
    }

    /// Rows restricted to `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let pick = |v: &Vec<f64>| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let pick_s = |v: &Vec<String>| rows.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        Dataset {
            y: if self.y.is_empty() { vec![] } else { pick(&self.y) },
            covariate_names: self.covariate_names.clone(),
            covariates: self.covariates.iter().map(pick).collect(),
            coords: self
                .coords
                .as_ref()
                .map(|c| rows.iter().map(|&i| c[i]).collect()),
            location_ids: self.location_ids.as_ref().map(pick_s),
            group_ids: self
                .group_ids
                .iter()
                .map(|(n, g)| (n.clone(), pick_s(g)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpDepth {
    Fixed(usize),
    Select,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Per covariate (intercept excluded). Needs coordinates.
    pub allow_svc: Vec<bool>,
    pub allow_nvc: Vec<bool>,
    pub spatial_intercept: bool,
    /// When false every allowed block is included without BIC comparison.
    pub select_types: bool,
    pub tr_num: WarpDepth,
    pub tr_nonneg: bool,
    pub d_candidates: Vec<usize>,
    /// Replaces the templates; `tr_num` is then ignored.
    pub custom_stack: Option<WarpStack>,
    pub max_vectors: usize,
    pub kernel_range: Option<f64>,
    pub spline_knots: usize,
    pub fit_options: FitOptions,
}

impl ModelSpec {
    /// SVCs on every covariate, no NVCs, spatial intercept, `D = 0`.
    pub fn new(n_covariates: usize) -> Self {
        ModelSpec {
            allow_svc: vec![true; n_covariates],
            allow_nvc: vec![false; n_covariates],
            spatial_intercept: true,
            select_types: true,
            tr_num: WarpDepth::Fixed(0),
            tr_nonneg: false,
            d_candidates: vec![0, 1, 2, 3, 4],
            custom_stack: None,
            max_vectors: DEFAULT_MAX_VECTORS,
            kernel_range: None,
            spline_knots: DEFAULT_KNOTS,
            fit_options: FitOptions::default(),
        }
    }

    /// No spatial or non-spatial varying terms.
    pub fn linear(n_covariates: usize) -> Self {
        ModelSpec {
            allow_svc: vec![false; n_covariates],
            spatial_intercept: false,
            ..ModelSpec::new(n_covariates)
        }
    }

    pub fn depth(mut self, d: usize) -> Self {
        self.tr_num = WarpDepth::Fixed(d);
        self
    }

    fn template(&self, d: usize, y: &[f64]) -> Result<WarpStack> {
        match (&self.custom_stack, self.tr_nonneg) {
            (Some(s), _) => Ok(s.clone()),
            (None, true) => WarpStack::nonnegative_template(d, y),
            (None, false) => Ok(WarpStack::default_template(d)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoefType {
    Const,
    Svc,
    Nvc,
    Snvc,
}

impl CoefType {
    pub fn name(self) -> &'static str {
        match self {
            CoefType::Const => "Const",
            CoefType::Svc => "SVC",
            CoefType::Nvc => "NVC",
            CoefType::Snvc => "SNVC",
        }
    }
}

/// How to rebuild a block's coefficient basis for new rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisGenerator {
    /// Rows of the shared spatial basis (Nystrom projection at new sites).
    Spatial,
    Spline(NaturalSpline),
    Group { column: String, levels: GroupLevels },
}

/// A fitted random-effect term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedBlock {
    pub kind: BlockKind,
    /// Multiplied design column (0 = intercept); `None` for group intercepts.
    pub covariate: Option<usize>,
    pub generator: BasisGenerator,
    pub variance: BlockVariance,
    /// Random coefficients on the warped scale.
    pub gamma: Vec<f64>,
}

/// JSON has no infinities; they are written as strings.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// BIC of the best fit for one warp depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub d: usize,
    #[serde(with = "extended_f64")]
    pub bic: f64,
    #[serde(with = "extended_f64")]
    pub log_restricted_lik: f64,
    #[serde(with = "extended_f64")]
    pub log_lik: f64,
    pub converged: bool,
    /// Set when the fit at this depth failed; `bic` is then infinite.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub schema_version: u32,
    /// Intercept first.
    pub coefficient_names: Vec<String>,
    /// Fixed coefficients on the reporting scale.
    pub beta: Vec<f64>,
    pub se_beta: Vec<f64>,
    /// Fixed coefficients on the warped scale.
    pub beta_warped: Vec<f64>,
    pub coef_type: Vec<CoefType>,
    /// `varying_coefficients[k][i]`: coefficient `k` at training row `i`,
    /// reporting scale.
    pub varying_coefficients: Vec<Vec<f64>>,
    pub varying_svc_part: Vec<Vec<f64>>,
    pub varying_nvc_part: Vec<Vec<f64>>,
    pub varying_se: Vec<Vec<f64>>,
    pub blocks: Vec<FittedBlock>,
    pub spatial_basis: Option<SpatialBasis>,
    pub theta: VarianceSpec,
    pub stack: WarpStack,
    pub d: usize,
    /// `(a, b)` with reported = a + b * warped.
    pub reporting_scale: (f64, f64),
    pub sigma_sq: f64,
    pub log_restricted_lik: f64,
    pub log_lik: f64,
    pub bic: f64,
    pub n_params: usize,
    pub n: usize,
    pub converged: bool,
    pub cycles: usize,
    pub trace: Vec<f64>,
    pub depth_report: Vec<DepthReport>,
    /// Restricted log-likelihood traces of every fit run during selection.
    pub selection_traces: Vec<Vec<f64>>,
}

impl FitResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit result serializes")
    }

    pub fn from_json(s: &str) -> Result<FitResult> {
        let fit: FitResult =
            serde_json::from_str(s).map_err(|e| CammError::InvalidParameter(e.to_string()))?;
        if fit.schema_version != SCHEMA_VERSION {
            return Err(CammError::InvalidParameter(format!(
                "unsupported schema_version {}",
                fit.schema_version
            )));
        }
        Ok(fit)
    }

    pub fn coefficient_index(&self, name: &str) -> Option<usize> {
        self.coefficient_names.iter().position(|c| c == name)
    }
}

/// Candidate block with enough information to rebuild it.
#[derive(Clone)]
struct Candidate {
    block: EffectBlock,
    generator: BasisGenerator,
}

struct Prepared {
    x: DMatrix<f64>,
    spatial: Option<SpatialBasis>,
    groups: Vec<Candidate>,
    /// `(coefficient, kind)` in trial order.
    optional: Vec<(usize, Candidate)>,
}

fn spatial_rows(sb: &SpatialBasis, data: &Dataset) -> Result<DMatrix<f64>> {
    let n = data.n();
    let l = sb.n_vectors();
    let lookup: HashMap<&str, usize> = sb
        .location_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut out = DMatrix::zeros(n, l);
    for i in 0..n {
        let known = data
            .location_ids
            .as_ref()
            .and_then(|ids| lookup.get(ids[i].as_str()).copied());
        match (known, &data.coords) {
            (Some(r), _) => out.row_mut(i).copy_from(&sb.vectors.row(r)),
            (None, Some(c)) => {
                let p = sb.project(c[i]);
                for (j, v) in p.into_iter().enumerate() {
                    out[(i, j)] = v;
                }
            }
            (None, None) => {
                return Err(CammError::UnknownId(format!(
                    "row {i}: no known location id and no coordinates"
                )))
            }
        }
    }
    Ok(out)
}

fn build_spatial_basis(data: &Dataset, spec: &ModelSpec) -> Result<SpatialBasis> {
    let coords = data
        .coords
        .as_ref()
        .ok_or_else(|| CammError::InvalidParameter("coordinates are required".into()))?;
    let opts = MoranOptions {
        kernel_range: spec.kernel_range,
        max_vectors: spec.max_vectors,
    };
    match &data.location_ids {
        Some(ids) => {
            let mut first: HashMap<&str, usize> = HashMap::new();
            let mut labels = Vec::new();
            let mut sites = Vec::new();
            for (i, id) in ids.iter().enumerate() {
                if !first.contains_key(id.as_str()) {
                    first.insert(id.as_str(), i);
                    labels.push(id.clone());
                    sites.push(coords[i]);
                }
            }
            moran_eigenvectors(&sites, opts)?.with_location_ids(labels)
        }
        None => {
            let (sites, _) = unique_locations(coords);
            let labels = (0..sites.len()).map(|i| i.to_string()).collect();
            moran_eigenvectors(&sites, opts)?.with_location_ids(labels)
        }
    }
}

fn prepare(data: &Dataset, spec: &ModelSpec) -> Result<Prepared> {
    let x = data.design();
    let k = data.covariates.len();
    if spec.allow_svc.len() != k || spec.allow_nvc.len() != k {
        return Err(CammError::LengthMismatch {
            expected: k,
            got: spec.allow_svc.len().min(spec.allow_nvc.len()),
        });
    }
    let wants_spatial = spec.spatial_intercept || spec.allow_svc.iter().any(|&b| b);
    let spatial = if wants_spatial && data.coords.is_some() {
        Some(build_spatial_basis(data, spec)?)
    } else if spec.allow_svc.iter().any(|&b| b) {
        return Err(CammError::InvalidParameter(
            "spatially varying coefficients need coordinates".into(),
        ));
    } else {
        None
    };
    let e_rows = match &spatial {
        Some(sb) => Some(spatial_rows(sb, data)?),
        None => None,
    };

    let mut groups = Vec::new();
    for (name, ids) in &data.group_ids {
        let levels = GroupLevels::fit(ids)?;
        let block = EffectBlock::new(BlockKind::GroupIntercept, levels.indicators(ids), None, None)?;
        groups.push(Candidate {
            block,
            generator: BasisGenerator::Group {
                column: name.clone(),
                levels,
            },
        });
    }

    let mut optional = Vec::new();
    for j in 0..=k {
        let xj = data.column(j);
        let svc_allowed = if j == 0 {
            spec.spatial_intercept
        } else {
            spec.allow_svc[j - 1]
        };
        if let (true, Some(e), Some(sb)) = (svc_allowed, &e_rows, &spatial) {
            let kind = if j == 0 {
                BlockKind::SpatialIntercept
            } else {
                BlockKind::SpatialVc
            };
            if let Ok(block) = EffectBlock::new(kind, e.clone(), Some((j, &xj)), Some(&sb.eigenvalues)) {
                optional.push((
                    j,
                    Candidate {
                        block,
                        generator: BasisGenerator::Spatial,
                    },
                ));
            }
        }
        if j > 0 && spec.allow_nvc[j - 1] {
            if let Ok(spline) = NaturalSpline::fit(&xj, spec.spline_knots) {
                let b = spline.basis(&xj);
                if let Ok(block) = EffectBlock::new(BlockKind::NonSpatialVc, b, Some((j, &xj)), None) {
                    optional.push((
                        j,
                        Candidate {
                            block,
                            generator: BasisGenerator::Spline(spline),
                        },
                    ));
                }
            }
        }
    }
    Ok(Prepared {
        x,
        spatial,
        groups,
        optional,
    })
}

struct Selected {
    fit: RemlFit,
    chosen: Vec<Candidate>,
    traces: Vec<Vec<f64>>,
}

fn run(
    x: &DMatrix<f64>,
    chosen: &[Candidate],
    y: &[f64],
    template: &WarpStack,
    opts: &FitOptions,
    observer: &dyn FitObserver,
) -> Result<RemlFit> {
    let blocks: Vec<EffectBlock> = chosen.iter().map(|c| c.block.clone()).collect();
    reml::fit_observed(x, &blocks, y, template, opts, observer)
}

fn select_for_template(
    prep: &Prepared,
    y: &[f64],
    template: &WarpStack,
    spec: &ModelSpec,
    observer: &dyn FitObserver,
) -> Result<Selected> {
    let opts = &spec.fit_options;
    let mut traces = Vec::new();
    if !spec.select_types {
        let mut chosen = prep.groups.clone();
        chosen.extend(prep.optional.iter().map(|(_, c)| c.clone()));
        let fit = run(&prep.x, &chosen, y, template, opts, observer)?;
        traces.push(fit.trace.clone());
        return Ok(Selected { fit, chosen, traces });
    }
    let mut chosen = prep.groups.clone();
    let mut best = run(&prep.x, &chosen, y, template, opts, observer)?;
    traces.push(best.trace.clone());
    for (_, cand) in &prep.optional {
        let mut trial = chosen.clone();
        trial.push(cand.clone());
        match run(&prep.x, &trial, y, template, opts, observer) {
            Ok(fit) => {
                traces.push(fit.trace.clone());
                if fit.bic < best.bic {
                    best = fit;
                    chosen = trial;
                }
            }
            Err(CammError::Singular(_)) | Err(CammError::Numerical(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(Selected {
        fit: best,
        chosen,
        traces,
    })
}

fn check_response(data: &Dataset, spec: &ModelSpec) -> Result<()> {
    let n = data.n();
    let j = data.covariates.len() + 1;
    if n <= j + 10 {
        return Err(CammError::Degenerate(format!(
            "need N > J + 10 (N = {n}, J = {j})"
        )));
    }
    if data.y.iter().all(|v| v.fract() == 0.0) {
        return Err(CammError::InvalidParameter(
            "response is integer-valued; convert counts to a density (e.g. per area) before fitting"
                .into(),
        ));
    }
    if spec.d_candidates.is_empty() {
        return Err(CammError::InvalidParameter("d_candidates is empty".into()));
    }
    Ok(())
}

pub fn fit_camm(data: &Dataset, spec: &ModelSpec) -> Result<FitResult> {
    fit_camm_observed(data, spec, &NoObserver)
}

struct NoObserver;
impl FitObserver for NoObserver {}

pub fn fit_camm_observed(
    data: &Dataset,
    spec: &ModelSpec,
    observer: &dyn FitObserver,
) -> Result<FitResult> {
    data.validate(true)?;
    check_response(data, spec)?;
    let prep = prepare(data, spec)?;
    let y = &data.y;

    let depths: Vec<usize> = match (&spec.custom_stack, spec.tr_num) {
        (Some(s), _) => vec![s.d_count()],
        (None, WarpDepth::Fixed(d)) => vec![d],
        (None, WarpDepth::Select) => spec.d_candidates.clone(),
    };
    let results: Vec<Result<Selected>> = depths
        .par_iter()
        .map(|&d| {
            let template = spec.template(d, y)?;
            select_for_template(&prep, y, &template, spec, observer)
        })
        .collect();

    let mut report = Vec::new();
    let mut best: Option<(usize, Selected)> = None;
    let mut first_err = None;
    let mut traces = Vec::new();
    for (&d, r) in depths.iter().zip(results) {
        match r {
            Ok(sel) => {
                report.push(DepthReport {
                    d,
                    bic: sel.fit.bic,
                    log_restricted_lik: sel.fit.log_restricted_lik,
                    log_lik: sel.fit.log_lik,
                    converged: sel.fit.converged,
                    error: None,
                });
                traces.extend(sel.traces.iter().cloned());
                if best.as_ref().is_none_or(|(_, b)| sel.fit.bic < b.fit.bic) {
                    best = Some((d, sel));
                }
            }
            Err(e) => {
                report.push(DepthReport {
                    d,
                    bic: f64::INFINITY,
                    log_restricted_lik: f64::NEG_INFINITY,
                    log_lik: f64::NEG_INFINITY,
                    converged: false,
                    error: Some(e.to_string()),
                });
                first_err.get_or_insert(e);
            }
        }
    }
    let (d, sel) = match best {
        Some(b) => b,
        None => return Err(first_err.expect("at least one depth")),
    };
    assemble(data, &prep, d, sel, report, traces)
}

fn reporting_scale(stack: &WarpStack, y: &[f64]) -> Result<(f64, f64)> {
    match stack.template() {
        Template::Custom => Ok((0.0, 1.0)),
        _ => {
            let med = stats::median(y);
            let (z, logd) = stack.forward_with_log_derivative(&[med])?;
            let b = (-logd[0]).exp();
            Ok((med - b * z[0], b))
        }
    }
}

fn assemble(
    data: &Dataset,
    prep: &Prepared,
    d: usize,
    sel: Selected,
    depth_report: Vec<DepthReport>,
    selection_traces: Vec<Vec<f64>>,
) -> Result<FitResult> {
    let fit = sel.fit;
    let n = data.n();
    let j = prep.x.ncols();
    let (a, b) = reporting_scale(&fit.stack, &data.y)?;

    let mut blocks = Vec::new();
    let mut off = 0;
    let mut offsets = Vec::new();
    for (cand, var) in sel.chosen.iter().zip(&fit.theta.blocks) {
        let l = cand.block.columns();
        offsets.push(off);
        blocks.push(FittedBlock {
            kind: cand.block.kind,
            covariate: cand.block.covariate,
            generator: cand.generator.clone(),
            variance: *var,
            gamma: fit.gamma.rows(off, l).iter().copied().collect(),
        });
        off += l;
    }

    let cinv = reml::system_inverse(&fit.inner_products, &fit.theta, &fit.shapes)?;
    let v = reml::scaling_vector(&fit.shapes, &fit.theta)?;

    let names: Vec<String> = std::iter::once(INTERCEPT.to_string())
        .chain(data.covariate_names.iter().cloned())
        .collect();
    let mut beta = Vec::with_capacity(j);
    let mut se_beta = Vec::with_capacity(j);
    let mut coef_type = Vec::with_capacity(j);
    let mut varying = Vec::with_capacity(j);
    let mut svc_part = Vec::with_capacity(j);
    let mut nvc_part = Vec::with_capacity(j);
    let mut varying_se = Vec::with_capacity(j);
    for k in 0..j {
        let shift = if k == 0 { a } else { 0.0 };
        beta.push(shift + b * fit.beta[k]);
        se_beta.push(b * (fit.sigma_sq * cinv[(k, k)]).max(0.0).sqrt());

        let mut svc = vec![0.0; n];
        let mut nvc = vec![0.0; n];
        let mut has_svc = false;
        let mut has_nvc = false;
        // Positions in [beta; u] and per-row weights for the standard errors.
        let mut members: Vec<(usize, &DMatrix<f64>, usize)> = Vec::new();
        for (bi, cand) in sel.chosen.iter().enumerate() {
            if cand.block.covariate != Some(k) || cand.block.kind == BlockKind::GroupIntercept {
                continue;
            }
            let fb = &blocks[bi];
            let contrib = &cand.block.coef_basis * DVector::from_column_slice(&fb.gamma);
            let nonzero = fb.variance.tau_sq > 0.0;
            let target = if cand.block.kind.is_spatial() {
                has_svc |= nonzero;
                &mut svc
            } else {
                has_nvc |= nonzero;
                &mut nvc
            };
            for i in 0..n {
                target[i] += b * contrib[i];
            }
            members.push((j + offsets[bi], &cand.block.coef_basis, offsets[bi]));
        }
        coef_type.push(match (has_svc, has_nvc) {
            (false, false) => CoefType::Const,
            (true, false) => CoefType::Svc,
            (false, true) => CoefType::Nvc,
            (true, true) => CoefType::Snvc,
        });
        let total: Vec<f64> = (0..n).map(|i| beta[k] + svc[i] + nvc[i]).collect();

        let mut idx = vec![k];
        for (pos, basis, _) in &members {
            idx.extend((0..basis.ncols()).map(|c| pos + c));
        }
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |p, q| cinv[(idx[p], idx[q])]);
        let mut w = DVector::zeros(idx.len());
        let se: Vec<f64> = (0..n)
            .map(|i| {
                w[0] = 1.0;
                let mut c = 1;
                for (_, basis, voff) in &members {
                    for col in 0..basis.ncols() {
                        w[c] = basis[(i, col)] * v[voff + col];
                        c += 1;
                    }
                }
                b * (fit.sigma_sq * w.dot(&(&sub * &w))).max(0.0).sqrt()
            })
            .collect();

        varying.push(total);
        svc_part.push(svc);
        nvc_part.push(nvc);
        varying_se.push(se);
    }

    Ok(FitResult {
        schema_version: SCHEMA_VERSION,
        coefficient_names: names,
        beta,
        se_beta,
        beta_warped: fit.beta.iter().copied().collect(),
        coef_type,
        varying_coefficients: varying,
        varying_svc_part: svc_part,
        varying_nvc_part: nvc_part,
        varying_se,
        blocks,
        spatial_basis: prep.spatial.clone(),
        theta: fit.theta.clone(),
        d,
        reporting_scale: (a, b),
        sigma_sq: fit.sigma_sq,
        log_restricted_lik: fit.log_restricted_lik,
        log_lik: fit.log_lik,
        bic: fit.bic,
        n_params: fit.n_params,
        n,
        converged: fit.converged,
        cycles: fit.cycles,
        trace: fit.trace.clone(),
        depth_report,
        selection_traces,
        stack: fit.stack,
    })
}

/// Coefficient basis of a fitted block at the rows of `data`.
fn block_basis(fit: &FitResult, block: &FittedBlock, data: &Dataset) -> Result<DMatrix<f64>> {
    match &block.generator {
        BasisGenerator::Spatial => {
            let sb = fit
                .spatial_basis
                .as_ref()
                .ok_or_else(|| CammError::InvalidParameter("fit has no spatial basis".into()))?;
            spatial_rows(sb, data)
        }
        BasisGenerator::Spline(s) => {
            let k = block.covariate.expect("spline blocks multiply a covariate");
            Ok(s.basis(&data.column(k)))
        }
        BasisGenerator::Group { column, levels } => {
            let ids = data
                .group_ids
                .iter()
                .find(|(n, _)| n == column)
                .map(|(_, g)| g)
                .ok_or_else(|| CammError::InvalidParameter(format!("missing group column {column}")))?;
            Ok(levels.indicators(ids))
        }
    }
}

fn check_columns(fit: &FitResult, data: &Dataset) -> Result<()> {
    if data.covariate_names != fit.coefficient_names[1..] {
        return Err(CammError::InvalidParameter(format!(
            "covariates {:?} do not match the fitted {:?}",
            data.covariate_names,
            &fit.coefficient_names[1..]
        )));
    }
    data.validate(false)
}

/// Warped-scale coefficients `beta_k + b_k(...)` at the rows of `data`.
pub fn varying_coefficients_warped(fit: &FitResult, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    check_columns(fit, data)?;
    let n = data.n();
    let mut out: Vec<Vec<f64>> = fit.beta_warped.iter().map(|&b| vec![b; n]).collect();
    for block in &fit.blocks {
        let Some(k) = block.covariate else { continue };
        let e = block_basis(fit, block, data)?;
        let g = &e * DVector::from_column_slice(&block.gamma);
        for i in 0..n {
            out[k][i] += g[i];
        }
    }
    Ok(out)
}

/// Prediction on the original response scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// Linear predictor on the warped scale.
    pub warped: Vec<f64>,
    /// Inverse-warped predictor; `None` where the inverse is undefined.
    pub response: Vec<Option<f64>>,
}

pub fn predict(fit: &FitResult, data: &Dataset) -> Result<Predictions> {
    let coefs = varying_coefficients_warped(fit, data)?;
    let n = data.n();
    let mut mu: Vec<f64> = (0..n)
        .map(|i| {
            (0..coefs.len())
                .map(|k| coefs[k][i] * if k == 0 { 1.0 } else { data.covariates[k - 1][i] })
                .sum()
        })
        .collect();
    for block in fit.blocks.iter().filter(|b| b.covariate.is_none()) {
        let e = block_basis(fit, block, data)?;
        let g = &e * DVector::from_column_slice(&block.gamma);
        for i in 0..n {
            mu[i] += g[i];
        }
    }
    let response = mu.iter().map(|&m| fit.stack.inverse_one(m).ok()).collect();
    Ok(Predictions { warped: mu, response })
}

pub fn rmspe(predicted: &[f64], truth: &[f64]) -> f64 {
    let s: f64 = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    (s / predicted.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalEffects {
    pub covariate_names: Vec<String>,
    /// `effects[k][i]` for covariate `k` (intercept excluded).
    pub effects: Vec<Vec<f64>>,
    pub medians: Vec<f64>,
}

/// `dy/dx_k = beta_k(i) / phi'(y_i)` at the responses in `data.y`.
pub fn marginal_effects(fit: &FitResult, data: &Dataset) -> Result<MarginalEffects> {
    data.validate(true)?;
    let coefs = varying_coefficients_warped(fit, data)?;
    let deriv = fit.stack.derivative(&data.y)?;
    if let Some(i) = deriv.iter().position(|d| !(*d > 0.0)) {
        return Err(CammError::NonPositiveDerivative { step: 0, index: i });
    }
    let effects: Vec<Vec<f64>> = coefs[1..]
        .iter()
        .map(|c| c.iter().zip(&deriv).map(|(b, d)| b / d).collect())
        .collect();
    let medians = effects.iter().map(|e| stats::median(e)).collect();
    Ok(MarginalEffects {
        covariate_names: fit.coefficient_names[1..].to_vec(),
        effects,
        medians,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub p: f64,
}

/// Wald summaries of the fixed coefficients (normal reference).
pub fn coefficient_inference(fit: &FitResult) -> Vec<CoefficientSummary> {
    fit.coefficient_names
        .iter()
        .zip(fit.beta.iter().zip(&fit.se_beta))
        .map(|(name, (&est, &se))| {
            let (t, p) = if se > 0.0 && se.is_finite() {
                let t = est / se;
                (t, stats::normal_two_sided_p(t))
            } else {
                (f64::NAN, f64::NAN)
            };
            CoefficientSummary {
                name: name.clone(),
                estimate: est,
                se,
                t,
                p,
            }
        })
        .collect()
}

/// Two-sided p-values of the varying coefficients, per coefficient and row.
pub fn varying_p_values(fit: &FitResult) -> Vec<Vec<f64>> {
    fit.varying_coefficients
        .iter()
        .zip(&fit.varying_se)
        .map(|(b, s)| {
            b.iter()
                .zip(s)
                .map(|(&b, &s)| {
                    if s > 0.0 {
                        stats::normal_two_sided_p(b / s)
                    } else {
                        f64::NAN
                    }
                })
                .collect()
        })
        .collect()
}
