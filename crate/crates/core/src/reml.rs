//! Fast restricted maximum likelihood for (warped) additive mixed models.
//!
//! The model on the warped response `z = phi(y)` is
//! `z = X b + E V u + e` with `u ~ N(0, s2 I)`, `e ~ N(0, s2 I)`, where `V` is
//! diagonal with block `k` equal to `tau_k * Lambda_k^(alpha_k / 2)` (spatial
//! blocks) or `tau_k * I`, so the random coefficients `g = V u` have
//! covariance `s2 * tau_k^2 * Lambda_k^alpha_k`. The variance ratios are
//! profiled against `s2`.
//!
//! Everything after [`InnerProducts::compute`] works on the cross-product
//! matrices only. With `C = [[X'X, X'E V], [V E'X, V E'E V + I]]` and
//! `r = [X'z; V E'z]`, the solution `s = C^-1 r` gives
//! `d = z'z - s'r` and
//! `log L_R = -1/2 log|C| - (N - J)/2 (1 + log(2 pi d / (N - J)))`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::basis::{stack_blocks, EffectBlock};
use crate::error::{CammError, Result};
use crate::optim::NelderMead;
use crate::stats;
use crate::warp::WarpStack;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Dimensions and eigenvalues of one random-effect block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockShape {
    pub columns: usize,
    /// Present for spatial blocks; scaled so the largest is 1.
    pub eigenvalues: Option<Vec<f64>>,
}

impl From<&EffectBlock> for BlockShape {
    fn from(b: &EffectBlock) -> Self {
        BlockShape {
            columns: b.columns(),
            eigenvalues: b.eigenvalues.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockVariance {
    /// Variance of the random coefficients relative to the residual variance.
    pub tau_sq: f64,
    /// Eigenvalue exponent; fixed at 0 for non-spatial blocks.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSpec {
    pub blocks: Vec<BlockVariance>,
}

impl VarianceSpec {
    pub fn zeros(shapes: &[BlockShape]) -> Self {
        VarianceSpec {
            blocks: shapes
                .iter()
                .map(|_| BlockVariance {
                    tau_sq: 0.0,
                    alpha: 0.0,
                })
                .collect(),
        }
    }

    /// Number of free variance parameters: two per spatial block, one otherwise.
    pub fn parameter_count(shapes: &[BlockShape]) -> usize {
        shapes
            .iter()
            .map(|s| if s.eigenvalues.is_some() { 2 } else { 1 })
            .sum()
    }
}

fn block_scaling(shape: &BlockShape, var: &BlockVariance, out: &mut [f64]) {
    let tau = var.tau_sq.max(0.0).sqrt();
    match &shape.eigenvalues {
        Some(ev) => {
            for (o, l) in out.iter_mut().zip(ev) {
                *o = tau * l.powf(var.alpha / 2.0);
            }
        }
        None => out.iter_mut().for_each(|o| *o = tau),
    }
}

/// Diagonal of `V(theta)`.
pub fn scaling_vector(shapes: &[BlockShape], theta: &VarianceSpec) -> Result<DVector<f64>> {
    if shapes.len() != theta.blocks.len() {
        return Err(CammError::LengthMismatch {
            expected: shapes.len(),
            got: theta.blocks.len(),
        });
    }
    let total: usize = shapes.iter().map(|s| s.columns).sum();
    let mut v = DVector::zeros(total);
    let mut off = 0;
    for (shape, var) in shapes.iter().zip(&theta.blocks) {
        if var.tau_sq < 0.0 || !var.tau_sq.is_finite() || !var.alpha.is_finite() {
            return Err(CammError::InvalidParameter(format!(
                "variance parameters must be finite with tau^2 >= 0, got {var:?}"
            )));
        }
        block_scaling(shape, var, &mut v.as_mut_slice()[off..off + shape.columns]);
        off += shape.columns;
    }
    Ok(v)
}

/// Cross products of the design with the warped response.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerProducts {
    /// `X'X`, J x J.
    pub xx: DMatrix<f64>,
    /// `E'X`, L x J.
    pub ex: DMatrix<f64>,
    /// `E'E`, L x L.
    pub ee: DMatrix<f64>,
    pub xy: DVector<f64>,
    pub ey: DVector<f64>,
    pub yy: f64,
    pub n: usize,
}

impl InnerProducts {
    pub fn compute(x: &DMatrix<f64>, e: &DMatrix<f64>, z: &[f64]) -> Result<InnerProducts> {
        let n = x.nrows();
        if e.nrows() != n || z.len() != n {
            return Err(CammError::Shape(format!(
                "X has {n} rows, E has {}, z has {}",
                e.nrows(),
                z.len()
            )));
        }
        let xx = x.tr_mul(x);
        check_rank(&xx)?;
        let zv = DVector::from_column_slice(z);
        Ok(InnerProducts {
            ex: e.tr_mul(x),
            ee: e.tr_mul(e),
            xy: x.tr_mul(&zv),
            ey: e.tr_mul(&zv),
            yy: zv.dot(&zv),
            xx,
            n,
        })
    }

    /// Recomputes the response-dependent products only.
    pub fn refresh_response(&mut self, x: &DMatrix<f64>, e: &DMatrix<f64>, z: &[f64]) {
        let zv = DVector::from_column_slice(z);
        self.xy = x.tr_mul(&zv);
        self.ey = e.tr_mul(&zv);
        self.yy = zv.dot(&zv);
    }

    pub fn fixed_dim(&self) -> usize {
        self.xx.nrows()
    }

    pub fn random_dim(&self) -> usize {
        self.ee.nrows()
    }
}

fn check_rank(xx: &DMatrix<f64>) -> Result<()> {
    let ev = xx.symmetric_eigenvalues();
    let max = ev.iter().copied().fold(0.0, f64::max);
    let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= 1e-10 * max {
        return Err(CammError::RankDeficient);
    }
    Ok(())
}

/// Coefficient matrix of the mixed-model equations in the scaled variables.
pub fn system_matrix(ip: &InnerProducts, v: &DVector<f64>) -> DMatrix<f64> {
    let j = ip.fixed_dim();
    let l = ip.random_dim();
    let mut c = DMatrix::zeros(j + l, j + l);
    c.view_mut((0, 0), (j, j)).copy_from(&ip.xx);
    for a in 0..l {
        for b in 0..j {
            let val = v[a] * ip.ex[(a, b)];
            c[(j + a, b)] = val;
            c[(b, j + a)] = val;
        }
        for b in 0..l {
            c[(j + a, j + b)] = v[a] * ip.ee[(a, b)] * v[b];
        }
        c[(j + a, j + a)] += 1.0;
    }
    c
}

fn system_rhs(ip: &InnerProducts, v: &DVector<f64>) -> DVector<f64> {
    let j = ip.fixed_dim();
    let l = ip.random_dim();
    let mut r = DVector::zeros(j + l);
    r.rows_mut(0, j).copy_from(&ip.xy);
    for a in 0..l {
        r[j + a] = v[a] * ip.ey[a];
    }
    r
}

fn log_det(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

fn factor(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| CammError::Singular(what.to_string()))
}

fn restricted_value(log_det_c: f64, d: f64, n: usize, j: usize) -> f64 {
    let dof = (n - j) as f64;
    -0.5 * log_det_c - 0.5 * dof * (1.0 + LN_2PI + (d / dof).ln())
}

fn checked_d(d: f64) -> Result<f64> {
    if d < -1e-8 || d.is_nan() {
        return Err(CammError::Numerical(format!(
            "negative residual quadratic form {d}"
        )));
    }
    Ok(d.max(0.0))
}

/// Estimates at fixed variance parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfiledFit {
    pub beta_hat: DVector<f64>,
    /// Scaled random coefficients; the coefficients themselves are `V u`.
    pub u_hat: DVector<f64>,
    pub sigma_sq_hat: f64,
    pub d_value: f64,
    pub log_restricted_lik: f64,
    /// `log|C(theta)|`.
    pub log_det_system: f64,
}

/// Profiled restricted log-likelihood from the inner products alone.
pub fn profiled_restricted_loglik(
    ip: &InnerProducts,
    theta: &VarianceSpec,
    shapes: &[BlockShape],
) -> Result<ProfiledFit> {
    let v = scaling_vector(shapes, theta)?;
    if v.len() != ip.random_dim() {
        return Err(CammError::LengthMismatch {
            expected: ip.random_dim(),
            got: v.len(),
        });
    }
    let j = ip.fixed_dim();
    if ip.n <= j {
        return Err(CammError::Degenerate("need N > J".into()));
    }
    let ch = factor(system_matrix(ip, &v), "mixed-model equations")?;
    let r = system_rhs(ip, &v);
    let s = ch.solve(&r);
    let d = checked_d(ip.yy - s.dot(&r))?;
    let ldc = log_det(&ch);
    Ok(ProfiledFit {
        beta_hat: s.rows(0, j).into_owned(),
        u_hat: s.rows(j, ip.random_dim()).into_owned(),
        sigma_sq_hat: d / (ip.n - j) as f64,
        d_value: d,
        log_restricted_lik: restricted_value(ldc, d, ip.n, j),
        log_det_system: ldc,
    })
}

/// Restricted log-likelihood of the warped model: the profiled value on
/// `phi(y)` plus the log-Jacobian of the warp.
pub fn camm_restricted_loglik(
    ip: &InnerProducts,
    theta: &VarianceSpec,
    shapes: &[BlockShape],
    stack: &WarpStack,
    y: &[f64],
) -> Result<f64> {
    Ok(profiled_restricted_loglik(ip, theta, shapes)?.log_restricted_lik + stack.log_jacobian(y)?)
}

/// `C(theta)^-1`; multiplied by `s2` it is the covariance of `[b; u]`.
pub fn system_inverse(
    ip: &InnerProducts,
    theta: &VarianceSpec,
    shapes: &[BlockShape],
) -> Result<DMatrix<f64>> {
    let v = scaling_vector(shapes, theta)?;
    Ok(factor(system_matrix(ip, &v), "mixed-model equations")?.inverse())
}

/// Restricted likelihood of one block's variance parameters with every other
/// block held fixed, via the Schur complement on the other unknowns. Each
/// evaluation factors an `L_k x L_k` matrix only.
pub struct BlockProfile {
    shape: BlockShape,
    log_det_rest: f64,
    schur: DMatrix<f64>,
    t: DVector<f64>,
    base: f64,
    yy: f64,
    n: usize,
    j: usize,
}

impl BlockProfile {
    pub fn new(
        ip: &InnerProducts,
        theta: &VarianceSpec,
        shapes: &[BlockShape],
        k: usize,
    ) -> Result<BlockProfile> {
        let j = ip.fixed_dim();
        let mut unit = theta.clone();
        unit.blocks[k] = BlockVariance {
            tau_sq: 1.0,
            alpha: 0.0,
        };
        let v = scaling_vector(shapes, &unit)?;
        let c = system_matrix(ip, &v);
        let g = system_rhs(ip, &v);

        let start = j + shapes[..k].iter().map(|s| s.columns).sum::<usize>();
        let lk = shapes[k].columns;
        let total = c.nrows();
        let rest: Vec<usize> = (0..total).filter(|&i| i < start || i >= start + lk).collect();
        let nr = rest.len();

        let c_rr = DMatrix::from_fn(nr, nr, |a, b| c[(rest[a], rest[b])]);
        let p = DMatrix::from_fn(nr, lk, |a, b| c[(rest[a], start + b)]);
        let g_r = DVector::from_fn(nr, |a, _| g[rest[a]]);
        let m_k = g.rows(start, lk).into_owned();
        let mut ee_kk = c.view((start, start), (lk, lk)).into_owned();
        for i in 0..lk {
            ee_kk[(i, i)] -= 1.0;
        }

        let ch = factor(c_rr, "fixed part of the mixed-model equations")?;
        let a = ch.solve(&p);
        let w = ch.solve(&g_r);
        let schur = ee_kk - p.tr_mul(&a);
        let t = m_k - p.tr_mul(&w);
        Ok(BlockProfile {
            shape: shapes[k].clone(),
            log_det_rest: log_det(&ch),
            schur,
            t,
            base: g_r.dot(&w),
            yy: ip.yy,
            n: ip.n,
            j,
        })
    }

    pub fn loglik(&self, var: &BlockVariance) -> Result<f64> {
        let lk = self.shape.columns;
        let mut v = vec![0.0; lk];
        block_scaling(&self.shape, var, &mut v);
        let mut m = DMatrix::from_fn(lk, lk, |a, b| v[a] * self.schur[(a, b)] * v[b]);
        for i in 0..lk {
            m[(i, i)] += 1.0;
        }
        let q = DVector::from_fn(lk, |a, _| v[a] * self.t[a]);
        let ch = factor(m, "block Schur complement")?;
        let quad = q.dot(&ch.solve(&q));
        let d = checked_d(self.yy - self.base - quad)?;
        Ok(restricted_value(self.log_det_rest + log_det(&ch), d, self.n, self.j))
    }
}

/// Phases of the alternating estimation loop, reported to a [`FitObserver`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    VarianceUpdateStart,
    VarianceUpdateEnd,
    WarpUpdateStart,
    WarpUpdateEnd,
}

/// Instrumentation hook for the estimation loop.
pub trait FitObserver: Sync {
    fn on_phase(&self, _phase: Phase) {}
}

struct Silent;
impl FitObserver for Silent {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub tol_outer: f64,
    pub max_outer: usize,
    pub inner_xtol: f64,
    pub inner_max_evals: usize,
    pub alpha_bounds: (f64, f64),
    /// Box for `log tau^2`; hitting the lower end sets `tau^2 = 0`.
    pub log_tau_sq_bounds: (f64, f64),
    /// Initial simplex edge for the packed warp parameters.
    pub warp_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol_outer: 1e-5,
            max_outer: 30,
            inner_xtol: 1e-4,
            inner_max_evals: 500,
            alpha_bounds: (-2.0, 2.0),
            log_tau_sq_bounds: (-20.0, 20.0),
            warp_step: 0.5,
        }
    }
}

/// Result of the alternating REML fit, on the warped scale.
#[derive(Debug, Clone)]
pub struct RemlFit {
    pub beta: DVector<f64>,
    pub u: DVector<f64>,
    /// Random coefficients `V u`, blocks concatenated.
    pub gamma: DVector<f64>,
    pub theta: VarianceSpec,
    pub shapes: Vec<BlockShape>,
    pub stack: WarpStack,
    pub sigma_sq: f64,
    pub d_value: f64,
    /// Restricted log-likelihood including the warp Jacobian.
    pub log_restricted_lik: f64,
    /// Full (marginal) log-likelihood at the estimates, including the Jacobian.
    pub log_lik: f64,
    pub log_jacobian: f64,
    pub n_params: usize,
    pub bic: f64,
    pub converged: bool,
    pub cycles: usize,
    /// Restricted log-likelihood after initialization and after every cycle.
    pub trace: Vec<f64>,
    pub inner_products: InnerProducts,
}

impl RemlFit {
    pub fn n(&self) -> usize {
        self.inner_products.n
    }
}

/// BIC = -2 log L + P log N with
/// P = J + variance parameters + trainable warp parameters + 1.
pub fn bic(fit: &RemlFit) -> f64 {
    bic_value(fit.log_lik, fit.n_params, fit.n())
}

pub fn bic_value(log_lik: f64, n_params: usize, n: usize) -> f64 {
    -2.0 * log_lik + n_params as f64 * (n as f64).ln()
}

pub fn parameter_count(j: usize, shapes: &[BlockShape], stack: &WarpStack) -> usize {
    j + VarianceSpec::parameter_count(shapes) + stack.trainable_count() + 1
}

/// Marginal log-likelihood at `(b_hat, theta, s2)` plus the Jacobian.
pub fn full_loglik(
    ip: &InnerProducts,
    theta: &VarianceSpec,
    shapes: &[BlockShape],
    profiled: &ProfiledFit,
    log_jacobian: f64,
) -> Result<f64> {
    let v = scaling_vector(shapes, theta)?;
    let l = ip.random_dim();
    let log_det_random = if l == 0 {
        0.0
    } else {
        let mut m = DMatrix::from_fn(l, l, |a, b| v[a] * ip.ee[(a, b)] * v[b]);
        for i in 0..l {
            m[(i, i)] += 1.0;
        }
        log_det(&factor(m, "random-effect block")?)
    };
    let n = ip.n as f64;
    let s2 = profiled.sigma_sq_hat;
    if !(s2 > 0.0) {
        return Err(CammError::Numerical("zero residual variance".into()));
    }
    Ok(-0.5 * log_det_random - 0.5 * n * (LN_2PI + s2.ln()) - profiled.d_value / (2.0 * s2)
        + log_jacobian)
}

/// Evaluator for warp candidates at fixed variance parameters: the system
/// matrix is factored once, each candidate refreshes the response products.
struct WarpObjective<'a> {
    x: &'a DMatrix<f64>,
    e: &'a DMatrix<f64>,
    v: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det_c: f64,
    j: usize,
}

impl<'a> WarpObjective<'a> {
    /// Restricted log-likelihood (with Jacobian) of the warped response `z`.
    fn evaluate(&self, z: &[f64], jac: f64) -> Result<f64> {
        let zv = DVector::from_column_slice(z);
        let xy = self.x.tr_mul(&zv);
        let ey = self.e.tr_mul(&zv);
        let mut r = DVector::zeros(self.j + ey.len());
        r.rows_mut(0, self.j).copy_from(&xy);
        for a in 0..ey.len() {
            r[self.j + a] = self.v[a] * ey[a];
        }
        let s = self.chol.solve(&r);
        let d = checked_d(zv.dot(&zv) - s.dot(&r))?;
        Ok(restricted_value(self.log_det_c, d, z.len(), self.j) + jac)
    }
}

pub fn fit(
    x: &DMatrix<f64>,
    blocks: &[EffectBlock],
    y: &[f64],
    template: &WarpStack,
    options: &FitOptions,
) -> Result<RemlFit> {
    fit_observed(x, blocks, y, template, options, &Silent)
}

/// Alternating estimation: variance parameters block by block on the
/// N-free profile, then warp parameters, until the restricted
/// log-likelihood stops improving.
pub fn fit_observed(
    x: &DMatrix<f64>,
    blocks: &[EffectBlock],
    y: &[f64],
    template: &WarpStack,
    options: &FitOptions,
    observer: &dyn FitObserver,
) -> Result<RemlFit> {
    let n = y.len();
    let j = x.ncols();
    if x.nrows() != n {
        return Err(CammError::Shape(format!(
            "X has {} rows but y has {n}",
            x.nrows()
        )));
    }
    if n <= j + 1 {
        return Err(CammError::Degenerate(format!("need N > J + 1 (N = {n}, J = {j})")));
    }
    if let Some(b) = blocks.iter().find(|b| b.basis.nrows() != n) {
        return Err(CammError::Shape(format!(
            "effect block has {} rows, expected {n}",
            b.basis.nrows()
        )));
    }
    let shapes: Vec<BlockShape> = blocks.iter().map(BlockShape::from).collect();
    let e = stack_blocks(blocks, n);

    let mut stack = template.fit_standardize(y)?;
    let (z0, logd0) = stack.forward_with_log_derivative(y)?;
    let mut jac: f64 = logd0.iter().sum();
    let mut ip = InnerProducts::compute(x, &e, &z0)?;

    let k_count = shapes.len().max(1) as f64;
    let var_z = stats::variance(&z0);
    let mut theta = VarianceSpec {
        blocks: shapes
            .iter()
            .map(|s| BlockVariance {
                tau_sq: 0.5 * var_z / k_count,
                alpha: if s.eigenvalues.is_some() { 1.0 } else { 0.0 },
            })
            .collect(),
    };

    let mut current = profiled_restricted_loglik(&ip, &theta, &shapes)?.log_restricted_lik + jac;
    let mut trace = vec![current];
    let identity = template.pack();
    let mut converged = false;
    let mut cycles = 0;
    // later cycles start from a simplex sized to the previous warp move
    let mut warp_step = options.warp_step;
    let mut restarted = false;
    let mut last_gain = f64::INFINITY;
    let tight = 0.1 * options.tol_outer;

    for _ in 0..options.max_outer {
        cycles += 1;
        let mut loose = false;

        observer.on_phase(Phase::VarianceUpdateStart);
        for k in 0..shapes.len() {
            theta.blocks[k] = update_block(&ip, &theta, &shapes, k, options)?;
        }
        observer.on_phase(Phase::VarianceUpdateEnd);
        if cycles == 1 {
            let after = profiled_restricted_loglik(&ip, &theta, &shapes)?.log_restricted_lik + jac;
            last_gain = after - current;
        }

        if stack.trainable_count() > 0 {
            observer.on_phase(Phase::WarpUpdateStart);
            let v = scaling_vector(&shapes, &theta)?;
            let chol = factor(system_matrix(&ip, &v), "mixed-model equations")?;
            let objective = WarpObjective {
                x,
                e: &e,
                log_det_c: log_det(&chol),
                v,
                chol,
                j,
            };
            let candidate = |packed: &[f64]| -> Result<(WarpStack, Vec<f64>, f64)> {
                let (s, z, logd) = stack.unpack(packed)?.fit_standardize_forward(y)?;
                Ok((s, z, logd.iter().sum()))
            };
            // the search runs over the entries that can move the likelihood
            let start = stack.pack();
            let free: Vec<usize> = stack
                .pack_redundant()
                .iter()
                .enumerate()
                .filter(|(_, &r)| !r)
                .map(|(i, _)| i)
                .collect();
            let embed = |sub: &[f64]| -> Vec<f64> {
                let mut full = start.clone();
                for (&i, &v) in free.iter().zip(sub) {
                    full[i] = v;
                }
                full
            };
            let neg = |sub: &[f64]| -> f64 {
                candidate(&embed(sub))
                    .and_then(|(_, z, jac)| objective.evaluate(&z, jac))
                    .map(|v| -v)
                    .unwrap_or(f64::INFINITY)
            };
            let (lo, hi) = stack.pack_bounds();
            let pick = |v: &[f64]| free.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            let sub_start = pick(&start);
            let (mut lo, mut hi) = (pick(&lo), pick(&hi));
            for ((l, h), &s) in lo.iter_mut().zip(hi.iter_mut()).zip(&sub_start) {
                *l = l.min(s);
                *h = h.max(s);
            }
            // the warp need not be polished further than the loop is still moving
            let ftol = (0.01 * last_gain.abs()).clamp(tight, 1.0);
            loose = ftol > tight;
            let simplex = |step: f64| {
                NelderMead::new(vec![step; free.len()])
                    .bounds(lo.clone(), hi.clone())
                    .xtol(options.inner_xtol)
                    .ftol(ftol)
                    .max_evals(options.inner_max_evals)
            };
            let mut best = simplex(warp_step).minimize(neg, &sub_start);
            if start != identity && !restarted {
                restarted = true;
                let restart = simplex(options.warp_step).minimize(neg, &pick(&identity));
                if restart.f < best.f {
                    best = restart;
                }
            }
            if best.f.is_finite() {
                let moved = best.x.iter().zip(&sub_start).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                warp_step = moved.clamp(0.1 * options.warp_step, options.warp_step);
                let (s, z, new_jac) = candidate(&embed(&best.x))?;
                stack = s;
                jac = new_jac;
                ip.refresh_response(x, &e, &z);
            }
            observer.on_phase(Phase::WarpUpdateEnd);
        }

        let next = profiled_restricted_loglik(&ip, &theta, &shapes)?.log_restricted_lik + jac;
        trace.push(next);
        let gain = next - current;
        last_gain = gain;
        current = next;
        // a stall under a loose inner solve is not convergence
        if gain.abs() < options.tol_outer && !loose {
            converged = true;
            break;
        }
    }

    let profiled = profiled_restricted_loglik(&ip, &theta, &shapes)?;
    let v = scaling_vector(&shapes, &theta)?;
    let gamma = profiled.u_hat.component_mul(&v);
    let log_lik = full_loglik(&ip, &theta, &shapes, &profiled, jac)?;
    let n_params = parameter_count(j, &shapes, &stack);
    Ok(RemlFit {
        beta: profiled.beta_hat.clone(),
        u: profiled.u_hat.clone(),
        gamma,
        sigma_sq: profiled.sigma_sq_hat,
        d_value: profiled.d_value,
        log_restricted_lik: profiled.log_restricted_lik + jac,
        log_lik,
        log_jacobian: jac,
        bic: bic_value(log_lik, n_params, n),
        n_params,
        converged,
        cycles,
        trace,
        theta,
        shapes,
        stack,
        inner_products: ip,
    })
}

fn update_block(
    ip: &InnerProducts,
    theta: &VarianceSpec,
    shapes: &[BlockShape],
    k: usize,
    options: &FitOptions,
) -> Result<BlockVariance> {
    let profile = BlockProfile::new(ip, theta, shapes, k)?;
    let spatial = shapes[k].eigenvalues.is_some();
    let (lo_tau, hi_tau) = options.log_tau_sq_bounds;
    let (lo_a, hi_a) = options.alpha_bounds;
    let current = theta.blocks[k];
    let to_var = |p: &[f64]| BlockVariance {
        tau_sq: p[0].exp(),
        alpha: if spatial { p[1] } else { 0.0 },
    };
    let neg = |p: &[f64]| -> f64 {
        profile
            .loglik(&to_var(p))
            .map(|v| -v)
            .unwrap_or(f64::INFINITY)
    };
    let start_tau = if current.tau_sq > 0.0 {
        current.tau_sq.ln().clamp(lo_tau, hi_tau)
    } else {
        lo_tau
    };
    let (start, nm) = if spatial {
        (
            vec![start_tau, current.alpha.clamp(lo_a, hi_a)],
            NelderMead::new(vec![1.0, 0.5]).bounds(vec![lo_tau, lo_a], vec![hi_tau, hi_a]),
        )
    } else {
        (
            vec![start_tau],
            NelderMead::new(vec![1.0]).bounds(vec![lo_tau], vec![hi_tau]),
        )
    };
    let nm = nm
        .xtol(options.inner_xtol)
        .max_evals(options.inner_max_evals);

    let start_value = if current.tau_sq > 0.0 {
        profile.loglik(&current).unwrap_or(f64::NEG_INFINITY)
    } else {
        f64::NEG_INFINITY
    };
    let zero = BlockVariance {
        tau_sq: 0.0,
        alpha: current.alpha,
    };
    let zero_value = profile.loglik(&zero)?;

    let best = nm.minimize(neg, &start);
    let mut chosen = (to_var(&best.x), -best.f);
    if best.x[0] <= lo_tau + 1e-9 || zero_value >= chosen.1 {
        chosen = (zero, zero_value);
    }
    if start_value > chosen.1 {
        chosen = (current, start_value);
    }
    if current.tau_sq == 0.0 && zero_value >= chosen.1 {
        chosen = (current, zero_value);
    }
    if !chosen.1.is_finite() {
        return Err(CammError::Optimizer(format!(
            "variance update for block {k} produced no finite likelihood"
        )));
    }
    Ok(chosen.0)
}
