//! Compositional warping of the response: an ordered stack of monotone
//! elementary transformations with closed-form inverses and derivatives.
//!
//! | kind          | forward                         | inverse                              | derivative                                   |
//! |---------------|---------------------------------|--------------------------------------|----------------------------------------------|
//! | `Sal`         | a + b sinh(c asinh(y) - d)      | sinh((asinh((z - a)/b) + d)/c)       | b c cosh(c asinh(y) - d) / sqrt(1 + y^2)     |
//! | `BoxCox`      | (y^l - 1)/l, log(y) at l = 0    | (l z + 1)^(1/l), exp(z) at l = 0     | y^(l - 1)                                    |
//! | `Log`         | log(y)                          | exp(z)                               | 1/y                                          |
//! | `Standardize` | (y - m)/s                       | s z + m                              | 1/s                                          |
//! | `AddValue`    | y + c                           | z - c                                | 1                                            |
//!
//! Positive parameters (`b`, `c` of a SAL step, and the AddValue margin) are
//! optimized on the log scale; see [`WarpStack::pack`].

use serde::{Deserialize, Serialize};

use crate::error::{CammError, Result};
use crate::stats;

/// Smallest admissible value of `min(y) + c` for an AddValue step.
pub const ADD_VALUE_MARGIN: f64 = 1e-8;

/// Standardization refuses inputs whose spread is below this fraction of
/// their mean: the result would be rounding noise.
pub const RELATIVE_SD_FLOOR: f64 = 1e-9;

/// Optimizer box: |a|, |d| of SAL steps.
pub const SAL_SHIFT_BOUND: f64 = 10.0;
/// Optimizer box: |log b|, |log c| of SAL steps.
pub const SAL_LOG_SCALE_BOUND: f64 = 6.0;
pub const BOX_COX_BOUND: f64 = 5.0;
/// Optimizer box: |log(c - lower)| of AddValue steps.
pub const ADD_VALUE_LOG_BOUND: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Sal,
    BoxCox,
    Log,
    Standardize,
    AddValue,
}

impl StepKind {
    pub fn name(self) -> &'static str {
        match self {
            StepKind::Sal => "sal",
            StepKind::BoxCox => "box_cox",
            StepKind::Log => "log",
            StepKind::Standardize => "standardize",
            StepKind::AddValue => "add_value",
        }
    }

    fn param_count(self) -> usize {
        match self {
            StepKind::Sal => 4,
            StepKind::BoxCox => 1,
            StepKind::Log => 0,
            StepKind::Standardize => 2,
            StepKind::AddValue => 1,
        }
    }
}

/// One elementary transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpStep {
    pub kind: StepKind,
    pub params: Vec<f64>,
    pub trainable: Vec<bool>,
    /// Lower bound of the AddValue constant, derived from the training data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
}

impl WarpStep {
    pub fn sal(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self {
            kind: StepKind::Sal,
            params: vec![a, b, c, d],
            trainable: vec![true; 4],
            lower: None,
        }
    }

    pub fn identity_sal() -> Self {
        Self::sal(0.0, 1.0, 1.0, 0.0)
    }

    pub fn box_cox(lambda: f64) -> Self {
        Self {
            kind: StepKind::BoxCox,
            params: vec![lambda],
            trainable: vec![true],
            lower: None,
        }
    }

    pub fn log() -> Self {
        Self {
            kind: StepKind::Log,
            params: vec![],
            trainable: vec![],
            lower: None,
        }
    }

    pub fn standardize(location: f64, scale: f64) -> Self {
        Self {
            kind: StepKind::Standardize,
            params: vec![location, scale],
            trainable: vec![false, false],
            lower: None,
        }
    }

    pub fn add_value(c: f64, lower: Option<f64>) -> Self {
        Self {
            kind: StepKind::AddValue,
            params: vec![c],
            trainable: vec![true],
            lower,
        }
    }

    /// Returns the step with every parameter fixed.
    pub fn frozen(mut self) -> Self {
        self.trainable.iter_mut().for_each(|t| *t = false);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.kind.param_count();
        if self.params.len() != n {
            return Err(CammError::LengthMismatch {
                expected: n,
                got: self.params.len(),
            });
        }
        if self.trainable.len() != n {
            return Err(CammError::LengthMismatch {
                expected: n,
                got: self.trainable.len(),
            });
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(CammError::InvalidParameter(format!(
                "{} step has non-finite parameters",
                self.kind.name()
            )));
        }
        match self.kind {
            StepKind::Sal => {
                if self.params[1] <= 0.0 || self.params[2] <= 0.0 {
                    return Err(CammError::InvalidParameter(
                        "SAL scale and shape parameters must be positive".into(),
                    ));
                }
            }
            StepKind::Standardize => {
                if self.params[1] <= 0.0 {
                    return Err(CammError::InvalidParameter(
                        "standardization scale must be positive".into(),
                    ));
                }
                if self.trainable.iter().any(|&t| t) {
                    return Err(CammError::InvalidParameter(
                        "standardization parameters are data-derived and cannot be trainable"
                            .into(),
                    ));
                }
            }
            StepKind::AddValue => {
                if let Some(lo) = self.lower {
                    if !lo.is_finite() || self.params[0] <= lo {
                        return Err(CammError::InvalidParameter(format!(
                            "add-value constant {} must exceed its lower bound {lo}",
                            self.params[0]
                        )));
                    }
                }
            }
            StepKind::BoxCox | StepKind::Log => {}
        }
        Ok(())
    }

    fn needs_positive_input(&self) -> bool {
        matches!(self.kind, StepKind::BoxCox | StepKind::Log)
    }

    /// Forward map of a single value. Does not check the domain.
    pub fn apply(&self, y: f64) -> f64 {
        let p = &self.params;
        match self.kind {
            StepKind::Sal if is_identity_sal(p) => y,
            StepKind::Sal => p[0] + p[1] * (p[2] * y.asinh() - p[3]).sinh(),
            StepKind::BoxCox => {
                let lambda = p[0];
                if lambda == 0.0 {
                    y.ln()
                } else {
                    (lambda * y.ln()).exp_m1() / lambda
                }
            }
            StepKind::Log => y.ln(),
            StepKind::Standardize => (y - p[0]) / p[1],
            StepKind::AddValue => y + p[0],
        }
    }

    /// Inverse map of a single value; `None` outside the inverse's domain.
    pub fn invert(&self, z: f64) -> Option<f64> {
        let p = &self.params;
        let y = match self.kind {
            StepKind::Sal if is_identity_sal(p) => z,
            StepKind::Sal => ((((z - p[0]) / p[1]).asinh() + p[3]) / p[2]).sinh(),
            StepKind::BoxCox => {
                let lambda = p[0];
                if lambda == 0.0 {
                    z.exp()
                } else {
                    let base = lambda * z;
                    if base <= -1.0 {
                        return None;
                    }
                    (base.ln_1p() / lambda).exp()
                }
            }
            StepKind::Log => z.exp(),
            StepKind::Standardize => p[1] * z + p[0],
            StepKind::AddValue => z - p[0],
        };
        y.is_finite().then_some(y)
    }

    /// Log of the derivative at `y`, computed in log space for stability.
    pub fn log_derivative(&self, y: f64) -> f64 {
        let p = &self.params;
        match self.kind {
            StepKind::Sal => {
                let arg = p[2] * y.asinh() - p[3];
                p[1].ln() + p[2].ln() + ln_cosh(arg) - y.hypot(1.0).ln()
            }
            StepKind::BoxCox => (p[0] - 1.0) * y.ln(),
            StepKind::Log => -y.ln(),
            StepKind::Standardize => -p[1].ln(),
            StepKind::AddValue => 0.0,
        }
    }

    pub fn derivative(&self, y: f64) -> f64 {
        self.log_derivative(y).exp()
    }
}

fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Arrangement of a stack, inferred from its step kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// Standardize, D SAL steps, Standardize.
    Default,
    /// AddValue, BoxCox, Standardize, D SAL steps, Standardize.
    NonNegative,
    Custom,
}

/// Ordered composition of warp steps; `steps[0]` is applied first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<WarpStep>", into = "Vec<WarpStep>")]
pub struct WarpStack {
    steps: Vec<WarpStep>,
}

impl TryFrom<Vec<WarpStep>> for WarpStack {
    type Error = CammError;

    fn try_from(steps: Vec<WarpStep>) -> Result<Self> {
        WarpStack::new(steps)
    }
}

impl From<WarpStack> for Vec<WarpStep> {
    fn from(stack: WarpStack) -> Self {
        stack.steps
    }
}

impl WarpStack {
    pub fn new(steps: Vec<WarpStep>) -> Result<Self> {
        for s in &steps {
            s.validate()?;
        }
        Ok(Self { steps })
    }

    /// Standardize, `d` identity SAL steps, Standardize. With `d = 0` a single
    /// standardization remains.
    pub fn default_template(d: usize) -> Self {
        let mut steps = vec![WarpStep::standardize(0.0, 1.0)];
        if d > 0 {
            steps.extend((0..d).map(|_| WarpStep::identity_sal()));
            steps.push(WarpStep::standardize(0.0, 1.0));
        }
        Self { steps }
    }

    /// AddValue, BoxCox, Standardize, `d` SAL steps, Standardize, for
    /// non-negative responses. The AddValue constant is bounded below by
    /// `max(0, 1e-8 - min(y))`: it only ever adds, since letting `min(y) + c`
    /// approach zero makes the likelihood unbounded for positive responses.
    pub fn nonnegative_template(d: usize, y: &[f64]) -> Result<Self> {
        let min = y.iter().copied().fold(f64::INFINITY, f64::min);
        if !min.is_finite() {
            return Err(CammError::Degenerate("empty or non-finite response".into()));
        }
        let lower = (ADD_VALUE_MARGIN - min).max(0.0);
        let c0 = match (1e-6 - min).max(0.0) {
            c if c > lower => c,
            _ => lower + 1e-6,
        };
        let mut steps = vec![
            WarpStep::add_value(c0, Some(lower)),
            WarpStep::box_cox(1.0),
            WarpStep::standardize(0.0, 1.0),
        ];
        if d > 0 {
            steps.extend((0..d).map(|_| WarpStep::identity_sal()));
            steps.push(WarpStep::standardize(0.0, 1.0));
        }
        Self::new(steps)
    }

    pub fn steps(&self) -> &[WarpStep] {
        &self.steps
    }

    /// Number of SAL steps (D).
    pub fn d_count(&self) -> usize {
        self.steps.iter().filter(|s| s.kind == StepKind::Sal).count()
    }

    pub fn template(&self) -> Template {
        use StepKind::*;
        let kinds: Vec<StepKind> = self.steps.iter().map(|s| s.kind).collect();
        let sal_run = |k: &[StepKind]| -> bool {
            match k {
                [] => false,
                [Standardize] => true,
                [middle @ .., Standardize] => {
                    !middle.is_empty() && middle.iter().all(|&m| m == Sal)
                }
                _ => false,
            }
        };
        match kinds.as_slice() {
            [Standardize, rest @ ..] if rest.is_empty() || sal_run(rest) => Template::Default,
            [AddValue, BoxCox, Standardize, rest @ ..] if rest.is_empty() || sal_run(rest) => {
                Template::NonNegative
            }
            _ => Template::Custom,
        }
    }

    /// Applies the stack element-wise.
    pub fn forward(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut v = y.to_vec();
        for (si, step) in self.steps.iter().enumerate() {
            apply_step(si, step, &mut v)?;
        }
        Ok(v)
    }

    /// Forward values together with the per-sample log-derivative of the
    /// whole composition (chain rule across steps).
    pub fn forward_with_log_derivative(&self, y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut v = y.to_vec();
        let mut logd = vec![0.0; y.len()];
        for (si, step) in self.steps.iter().enumerate() {
            apply_step_with_log_derivative(si, step, &mut v, &mut logd)?;
        }
        Ok((v, logd))
    }

    /// Sum over samples of the log-derivative of the composition.
    pub fn log_jacobian(&self, y: &[f64]) -> Result<f64> {
        let (_, logd) = self.forward_with_log_derivative(y)?;
        Ok(logd.iter().sum())
    }

    /// Per-sample derivative of the composition.
    pub fn derivative(&self, y: &[f64]) -> Result<Vec<f64>> {
        let (_, logd) = self.forward_with_log_derivative(y)?;
        Ok(logd.into_iter().map(f64::exp).collect())
    }

    /// Inverse map: steps undone in reverse order.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        z.iter()
            .enumerate()
            .map(|(i, &v)| self.inverse_one(v).map_err(|e| with_index(e, i)))
            .collect()
    }

    /// Inverse of a single value; the error's sample index is 0.
    pub fn inverse_one(&self, z: f64) -> Result<f64> {
        if !z.is_finite() {
            return Err(CammError::NonFinite { step: 0, index: 0 });
        }
        let mut v = z;
        for (si, step) in self.steps.iter().enumerate().rev() {
            v = step.invert(v).ok_or(CammError::DomainViolation {
                step: si,
                kind: step.kind.name(),
                index: 0,
                value: v,
            })?;
        }
        Ok(v)
    }

    /// Sets every Standardize step to the mean and population standard
    /// deviation of the values entering it.
    pub fn fit_standardize(&self, y: &[f64]) -> Result<WarpStack> {
        self.fit_standardize_forward(y).map(|(s, _, _)| s)
    }

    /// [`fit_standardize`](Self::fit_standardize) and
    /// [`forward_with_log_derivative`](Self::forward_with_log_derivative) in
    /// one pass.
    pub fn fit_standardize_forward(&self, y: &[f64]) -> Result<(WarpStack, Vec<f64>, Vec<f64>)> {
        let mut out = self.clone();
        let mut v = y.to_vec();
        let mut logd = vec![0.0; y.len()];
        for (si, step) in out.steps.iter_mut().enumerate() {
            if step.kind == StepKind::Standardize {
                let m = stats::mean(&v);
                let s = stats::std_dev(&v);
                if !(s > 0.0) || !s.is_finite() || s <= 1e-300 || s <= RELATIVE_SD_FLOOR * m.abs() {
                    return Err(CammError::ZeroVariance(format!(
                        "input to standardization step {si} is numerically constant"
                    )));
                }
                step.params = vec![m, s];
            }
            apply_step_with_log_derivative(si, step, &mut v, &mut logd)?;
        }
        Ok((out, v, logd))
    }

    pub fn trainable_count(&self) -> usize {
        self.steps
            .iter()
            .map(|s| s.trainable.iter().filter(|&&t| t).count())
            .sum()
    }

    /// Trainable parameters mapped to an unconstrained vector.
    pub fn pack(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.trainable_count());
        for step in &self.steps {
            for (j, (&p, &t)) in step.params.iter().zip(&step.trainable).enumerate() {
                if !t {
                    continue;
                }
                v.push(match (step.kind, j) {
                    (StepKind::Sal, 1) | (StepKind::Sal, 2) => p.ln(),
                    (StepKind::AddValue, 0) => match step.lower {
                        Some(lo) => (p - lo).ln(),
                        None => p,
                    },
                    _ => p,
                });
            }
        }
        v
    }

    /// Flags packed entries that cannot change the standardized output: the
    /// shift and scale of a SAL step followed directly by standardization
    /// cancel in both the values and the log-Jacobian.
    pub fn pack_redundant(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.trainable_count());
        for (i, step) in self.steps.iter().enumerate() {
            let before_std = matches!(
                self.steps.get(i + 1).map(|s| s.kind),
                Some(StepKind::Standardize)
            );
            for (j, &t) in step.trainable.iter().enumerate() {
                if t {
                    out.push(before_std && step.kind == StepKind::Sal && j < 2);
                }
            }
        }
        out
    }

    /// Box on the packed vector that keeps the optimizer away from warps
    /// which flatten the sample to a numerically constant vector, where the
    /// likelihood is unbounded.
    pub fn pack_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = Vec::with_capacity(self.trainable_count());
        let mut hi = Vec::with_capacity(self.trainable_count());
        for step in &self.steps {
            for (j, &t) in step.trainable.iter().enumerate() {
                if !t {
                    continue;
                }
                let b = match (step.kind, j) {
                    (StepKind::Sal, 1) | (StepKind::Sal, 2) => SAL_LOG_SCALE_BOUND,
                    (StepKind::Sal, _) => SAL_SHIFT_BOUND,
                    (StepKind::BoxCox, _) => BOX_COX_BOUND,
                    (StepKind::AddValue, _) if step.lower.is_some() => ADD_VALUE_LOG_BOUND,
                    _ => f64::INFINITY,
                };
                lo.push(-b);
                hi.push(b);
            }
        }
        (lo, hi)
    }

    /// Inverse of [`pack`](Self::pack): a copy of `self` with the trainable
    /// parameters replaced.
    pub fn unpack(&self, v: &[f64]) -> Result<WarpStack> {
        let expected = self.trainable_count();
        if v.len() != expected {
            return Err(CammError::LengthMismatch {
                expected,
                got: v.len(),
            });
        }
        let mut out = self.clone();
        let mut it = v.iter();
        for step in out.steps.iter_mut() {
            let lower = step.lower;
            for j in 0..step.params.len() {
                if !step.trainable[j] {
                    continue;
                }
                let u = *it.next().expect("length checked");
                step.params[j] = match (step.kind, j) {
                    (StepKind::Sal, 1) | (StepKind::Sal, 2) => u.exp(),
                    (StepKind::AddValue, 0) => match lower {
                        Some(lo) => lo + u.exp(),
                        None => u,
                    },
                    _ => u,
                };
            }
            step.validate()?;
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("warp stack serializes")
    }

    pub fn from_json(s: &str) -> Result<WarpStack> {
        serde_json::from_str(s).map_err(|e| CammError::InvalidParameter(e.to_string()))
    }
}

fn with_index(e: CammError, index: usize) -> CammError {
    match e {
        CammError::DomainViolation {
            step, kind, value, ..
        } => CammError::DomainViolation {
            step,
            kind,
            index,
            value,
        },
        CammError::NonFinite { step, .. } => CammError::NonFinite { step, index },
        other => other,
    }
}

fn apply_step(si: usize, step: &WarpStep, v: &mut [f64]) -> Result<()> {
    for (i, x) in v.iter_mut().enumerate() {
        if step.needs_positive_input() && *x <= 0.0 {
            return Err(CammError::DomainViolation {
                step: si,
                kind: step.kind.name(),
                index: i,
                value: *x,
            });
        }
        *x = step.apply(*x);
        if !x.is_finite() {
            return Err(CammError::NonFinite { step: si, index: i });
        }
    }
    Ok(())
}

/// Forward map of one step in place, accumulating its log-derivative.
fn apply_step_with_log_derivative(
    si: usize,
    step: &WarpStep,
    v: &mut [f64],
    logd: &mut [f64],
) -> Result<()> {
    let p = &step.params;
    let sal = step.kind == StepKind::Sal;
    let identity = sal && is_identity_sal(p);
    let ln_bc = if sal { p[1].ln() + p[2].ln() } else { 0.0 };
    let std_ld = (step.kind == StepKind::Standardize).then(|| -p[1].ln());
    for (i, (x, ld)) in v.iter_mut().zip(logd.iter_mut()).enumerate() {
        if step.needs_positive_input() && *x <= 0.0 {
            return Err(CammError::DomainViolation {
                step: si,
                kind: step.kind.name(),
                index: i,
                value: *x,
            });
        }
        let (z, l) = if sal {
            let arg = p[2] * x.asinh() - p[3];
            let sh = arg.sinh();
            let z = if identity { *x } else { p[0] + p[1] * sh };
            // cosh(arg) = sqrt(1 + sinh(arg)^2) saves two transcendental calls
            let l = if sh.abs() < 1e150 && x.abs() < 1e150 {
                0.5 * ((1.0 + sh * sh) / (1.0 + *x * *x)).ln()
            } else {
                ln_cosh(arg) - x.hypot(1.0).ln()
            };
            (z, ln_bc + l)
        } else if let Some(l) = std_ld {
            ((*x - p[0]) / p[1], l)
        } else {
            (step.apply(*x), step.log_derivative(*x))
        };
        if l.is_nan() || l == f64::NEG_INFINITY {
            return Err(CammError::NonPositiveDerivative { step: si, index: i });
        }
        if !l.is_finite() || !z.is_finite() {
            return Err(CammError::NonFinite { step: si, index: i });
        }
        *ld += l;
        *x = z;
    }
    Ok(())
}

// sinh(asinh(y)) is not bit-exact in floating point.
fn is_identity_sal(p: &[f64]) -> bool {
    p == [0.0, 1.0, 1.0, 0.0]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(steps: Vec<WarpStep>) -> WarpStack {
        WarpStack::new(steps).unwrap()
    }

    #[test]
    fn identity_sal_is_identity() {
        let s = stack(vec![WarpStep::identity_sal()]);
        assert_eq!(s.forward(&[2.0]).unwrap(), vec![2.0]);
        assert_eq!(s.inverse(&[5.0]).unwrap(), vec![5.0]);
        let lj = s.log_jacobian(&[-3.0, 0.0, 0.7, 40.0]).unwrap();
        assert!(lj.abs() < 1e-14, "{lj}");
    }

    #[test]
    fn log_step_flags_zero() {
        let s = stack(vec![WarpStep::log()]);
        let y = [0.0, 0.001, 0.5, 1.0, 2.0];
        match s.forward(&y) {
            Err(CammError::DomainViolation { index, .. }) => assert_eq!(index, 0),
            other => panic!("expected domain violation, got {other:?}"),
        }
        let z = s.forward(&y[1..]).unwrap();
        let expect = [-6.91, -0.69, 0.00, 0.69];
        for (a, b) in z.iter().zip(expect) {
            assert!((a - b).abs() < 5e-3, "{a} vs {b}");
        }
        assert!((s.log_jacobian(&[2.0]).unwrap() - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn box_cox_special_values() {
        let s = stack(vec![WarpStep::box_cox(1.0)]);
        assert!((s.forward(&[3.0]).unwrap()[0] - 2.0).abs() < 1e-15);
        let s0 = stack(vec![WarpStep::box_cox(0.0)]);
        assert!((s0.inverse(&[1.0]).unwrap()[0] - std::f64::consts::E).abs() < 1e-15);
        let s2 = stack(vec![WarpStep::box_cox(2.0)]);
        assert!(matches!(
            s2.inverse(&[-1.0]),
            Err(CammError::DomainViolation { .. })
        ));
    }

    #[test]
    fn box_cox_is_continuous_in_lambda() {
        let a = stack(vec![WarpStep::box_cox(0.0)]).forward(&[0.3, 4.0]).unwrap();
        let b = stack(vec![WarpStep::box_cox(1e-12)]).forward(&[0.3, 4.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn template_param_counts() {
        assert_eq!(WarpStack::default_template(2).pack().len(), 8);
        let y = [0.0, 1.0, 2.0];
        assert_eq!(WarpStack::nonnegative_template(2, &y).unwrap().pack().len(), 10);
        assert_eq!(WarpStack::default_template(2).template(), Template::Default);
        assert_eq!(WarpStack::default_template(0).template(), Template::Default);
        assert_eq!(
            WarpStack::nonnegative_template(0, &y).unwrap().template(),
            Template::NonNegative
        );
        assert_eq!(stack(vec![WarpStep::log()]).template(), Template::Custom);
    }

    #[test]
    fn pack_unpack_is_exact() {
        let y = [0.0, 1.0, 2.0];
        let mut s = WarpStack::nonnegative_template(2, &y).unwrap();
        s.steps[3] = WarpStep::sal(0.3, 1.7, 0.6, -0.2);
        let back = s.unpack(&s.pack()).unwrap();
        for (a, b) in s.steps.iter().zip(&back.steps) {
            for (p, q) in a.params.iter().zip(&b.params) {
                assert!((p - q).abs() <= 1e-15 * p.abs().max(1.0));
            }
        }
        assert!(matches!(
            s.unpack(&[0.0; 3]),
            Err(CammError::LengthMismatch { expected: 10, got: 3 })
        ));
    }

    #[test]
    fn redundant_entries_do_not_move_the_output() {
        let y: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).cos() * 2.0 + 0.1 * i as f64).collect();
        let mut s = WarpStack::default_template(2);
        s.steps[1] = WarpStep::sal(0.2, 1.3, 0.8, 0.1);
        s.steps[2] = WarpStep::sal(-0.4, 0.9, 1.2, -0.3);
        let flags = s.pack_redundant();
        assert_eq!(flags, vec![false, false, false, false, true, true, false, false]);
        let (_, z0, l0) = s.fit_standardize_forward(&y).unwrap();
        let mut v = s.pack();
        v[4] += 0.7;
        v[5] -= 0.4;
        let (_, z1, l1) = s.unpack(&v).unwrap().fit_standardize_forward(&y).unwrap();
        for (a, b) in z0.iter().zip(&z1) {
            assert!((a - b).abs() < 1e-12);
        }
        let (s0, s1): (f64, f64) = (l0.iter().sum(), l1.iter().sum());
        assert!((s0 - s1).abs() < 1e-9);
    }

    #[test]
    fn pack_bounds_layout() {
        let s = WarpStack::nonnegative_template(1, &[0.0, 1.0, 4.0]).unwrap();
        let (lo, hi) = s.pack_bounds();
        assert_eq!(hi, vec![ADD_VALUE_LOG_BOUND, BOX_COX_BOUND, 10.0, 6.0, 6.0, 10.0]);
        assert!(lo.iter().zip(&hi).all(|(l, h)| *l == -h));
        assert_eq!(lo.len(), s.pack().len());
    }

    #[test]
    fn rounding_noise_is_not_standardized() {
        let y: Vec<f64> = (0..20).map(|i| 5.0 + 1e-15 * i as f64).collect();
        assert!(matches!(
            WarpStack::default_template(0).fit_standardize(&y),
            Err(CammError::ZeroVariance(_))
        ));
        let y: Vec<f64> = (0..20).map(|i| 5.0 + 1e-6 * i as f64).collect();
        assert!(WarpStack::default_template(0).fit_standardize(&y).is_ok());
    }

    #[test]
    fn add_value_initialization() {
        let s = WarpStack::nonnegative_template(1, &[0.0, 2.0]).unwrap();
        let add = &s.steps()[0];
        assert_eq!(add.params[0], 1e-6);
        assert_eq!(add.lower, Some(1e-8));
        let s = WarpStack::nonnegative_template(1, &[3.0, 5.0]).unwrap();
        assert_eq!(s.steps()[0].params[0], 1e-6);
        assert_eq!(s.steps()[0].lower, Some(0.0));
    }

    #[test]
    fn standardize_fit() {
        let y: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0).collect();
        let s = WarpStack::default_template(2).fit_standardize(&y).unwrap();
        let z = s.forward(&y).unwrap();
        assert!(stats::mean(&z).abs() < 1e-12);
        assert!((stats::std_dev(&z) - 1.0).abs() < 1e-12);
        assert!(matches!(
            WarpStack::default_template(1).fit_standardize(&[2.0; 10]),
            Err(CammError::ZeroVariance(_))
        ));
    }

    #[test]
    fn refit_touches_only_trailing_standardization() {
        let y: Vec<f64> = (0..40).map(|i| (i as f64).powf(1.3)).collect();
        let s = WarpStack::default_template(1).fit_standardize(&y).unwrap();
        let mut v = s.pack();
        v[1] += 0.4;
        v[3] -= 0.2;
        let moved = s.unpack(&v).unwrap();
        let refit = moved.fit_standardize(&y).unwrap();
        assert_eq!(refit.steps()[0], s.steps()[0]);
        assert_ne!(refit.steps()[2], s.steps()[2]);
    }

    #[test]
    fn identity_embedding_jacobian() {
        let y: Vec<f64> = (0..30).map(|i| (i as f64 * 1.1).cos() * 2.5).collect();
        let s = WarpStack::default_template(3).fit_standardize(&y).unwrap();
        let sd = stats::std_dev(&y);
        let lj = s.log_jacobian(&y).unwrap();
        assert!((lj - 30.0 * (1.0 / sd).ln()).abs() < 1e-10);
        let z = s.forward(&y).unwrap();
        let m = stats::mean(&y);
        for (zi, yi) in z.iter().zip(&y) {
            assert!((zi - (yi - m) / sd).abs() < 1e-12);
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let s = stack(vec![
            WarpStep::add_value(0.1234567890123, Some(-0.3)),
            WarpStep::box_cox(0.33333333333333331),
            WarpStep::standardize(1.0 / 3.0, 2.0f64.sqrt()),
            WarpStep::sal(0.1, std::f64::consts::PI, 0.7, -1e-17),
            WarpStep::standardize(-0.0, 7.0 / 9.0),
        ]);
        let back = WarpStack::from_json(&s.to_json()).unwrap();
        for (a, b) in s.steps().iter().zip(back.steps()) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.trainable, b.trainable);
            for (p, q) in a.params.iter().zip(&b.params) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn json_rejects_invalid_steps() {
        let bad = r#"[{"kind":"sal","params":[0,-1,1,0],"trainable":[true,true,true,true]}]"#;
        assert!(WarpStack::from_json(bad).is_err());
    }
}
