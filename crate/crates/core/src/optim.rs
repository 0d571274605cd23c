//! Derivative-free Nelder-Mead simplex minimization with optional box bounds.
//!
//! Trial points outside the box are projected onto it. The returned point is
//! the best vertex ever evaluated, so the result is never worse than the start.

#[derive(Debug, Clone)]
pub struct NelderMead {
    /// Initial simplex edge per coordinate.
    pub steps: Vec<f64>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    /// Stop once every vertex lies within this distance (max-norm) of the best.
    pub xtol: f64,
    /// Stop once the spread of objective values falls below this.
    pub ftol: f64,
    pub max_evals: usize,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

impl NelderMead {
    pub fn new(steps: Vec<f64>) -> Self {
        Self {
            steps,
            lower: None,
            upper: None,
            xtol: 1e-4,
            ftol: 1e-10,
            max_evals: 200,
        }
    }

    pub fn bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = Some(lower);
        self.upper = Some(upper);
        self
    }

    pub fn xtol(mut self, xtol: f64) -> Self {
        self.xtol = xtol;
        self
    }

    pub fn ftol(mut self, ftol: f64) -> Self {
        self.ftol = ftol;
        self
    }

    pub fn max_evals(mut self, max_evals: usize) -> Self {
        self.max_evals = max_evals;
        self
    }

    fn project(&self, x: &mut [f64]) {
        if let Some(lo) = &self.lower {
            for (v, l) in x.iter_mut().zip(lo) {
                *v = v.max(*l);
            }
        }
        if let Some(hi) = &self.upper {
            for (v, h) in x.iter_mut().zip(hi) {
                *v = v.min(*h);
            }
        }
    }

    /// Minimizes `f` from `x0`. Non-finite objective values are treated as +inf.
    pub fn minimize<F>(&self, mut f: F, x0: &[f64]) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        let n = x0.len();
        let mut evals = 0usize;
        let mut eval = |x: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };

        let mut start = x0.to_vec();
        self.project(&mut start);
        let f0 = eval(&start, &mut evals);
        if n == 0 {
            return Minimum {
                x: start,
                f: f0,
                evals,
                converged: true,
            };
        }

        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        simplex.push((start.clone(), f0));
        for i in 0..n {
            let mut v = start.clone();
            v[i] += self.steps[i];
            self.project(&mut v);
            if v[i] == start[i] {
                // Pinned against an upper bound: step the other way.
                v[i] -= self.steps[i];
                self.project(&mut v);
            }
            let fv = eval(&v, &mut evals);
            simplex.push((v, fv));
        }

        let mut converged = false;
        while evals < self.max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let best = &simplex[0];
            let worst_f = simplex[n].1;
            let spread_x = simplex[1..]
                .iter()
                .map(|(v, _)| {
                    v.iter()
                        .zip(&best.0)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            let spread_f = (worst_f - best.1).abs();
            if spread_x < self.xtol || (best.1.is_finite() && spread_f < self.ftol) {
                converged = true;
                break;
            }

            let mut centroid = vec![0.0; n];
            for (v, _) in &simplex[..n] {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / n as f64;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[n].0)
                    .map(|(c, w)| c + t * (c - w))
                    .collect()
            };

            let mut xr = along(REFLECT);
            self.project(&mut xr);
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].1 {
                let mut xe = along(EXPAND);
                self.project(&mut xe);
                let fe = eval(&xe, &mut evals);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
                continue;
            }
            let (mut xc, outside) = if fr < worst_f {
                (along(CONTRACT), true)
            } else {
                (along(-CONTRACT), false)
            };
            self.project(&mut xc);
            let fc = eval(&xc, &mut evals);
            if (outside && fc <= fr) || (!outside && fc < worst_f) {
                simplex[n] = (xc, fc);
                continue;
            }
            let best_x = simplex[0].0.clone();
            for vertex in simplex.iter_mut().skip(1) {
                let mut v: Vec<f64> = best_x
                    .iter()
                    .zip(&vertex.0)
                    .map(|(b, x)| b + SHRINK * (x - b))
                    .collect();
                self.project(&mut v);
                let fv = eval(&v, &mut evals);
                *vertex = (v, fv);
            }
        }

        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, f) = simplex.swap_remove(0);
        Minimum {
            x,
            f,
            evals,
            converged,
        }
    }
}
