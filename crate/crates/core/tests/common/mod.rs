//! Dense N x N reference evaluations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Restricted log-likelihood, variance ratios profiled against s2, with
/// marginal covariance `s2 (I + sum_k E_k G_k E_k')`.
pub fn dense_reml(x: &DMatrix<f64>, e_blocks: &[(DMatrix<f64>, Vec<f64>)], z: &[f64]) -> f64 {
    let n = x.nrows();
    let j = x.ncols();
    let mut h = DMatrix::<f64>::identity(n, n);
    for (e, g) in e_blocks {
        let eg = DMatrix::from_fn(n, e.ncols(), |i, c| e[(i, c)] * g[c]);
        h += &eg * e.transpose();
    }
    let hc = h.clone().cholesky().expect("H positive definite");
    let hinv_x = hc.solve(x);
    let xhx = x.transpose() * &hinv_x;
    let zv = DVector::from_column_slice(z);
    let xhz = hinv_x.transpose() * &zv;
    let b = xhx.clone().cholesky().expect("X'H^-1X").solve(&xhz);
    let r = &zv - x * &b;
    let quad = r.dot(&hc.solve(&r));
    let dof = (n - j) as f64;
    let logdet_h = hc.determinant().ln();
    let logdet_xhx = xhx.determinant().ln();
    -0.5 * logdet_h - 0.5 * logdet_xhx
        - 0.5 * dof * (1.0 + (2.0 * std::f64::consts::PI * quad / dof).ln())
}

/// Closed-form OLS restricted log-likelihood.
pub fn ols_reml(x: &DMatrix<f64>, z: &[f64]) -> f64 {
    let n = x.nrows();
    let j = x.ncols();
    let xtx = x.transpose() * x;
    let zv = DVector::from_column_slice(z);
    let b = xtx.clone().cholesky().unwrap().solve(&(x.transpose() * &zv));
    let rss = (&zv - x * b).norm_squared();
    let dof = (n - j) as f64;
    -0.5 * xtx.determinant().ln() - 0.5 * dof * (1.0 + (2.0 * std::f64::consts::PI * rss / dof).ln())
}

/// Largest backward step in a likelihood trace (0 when non-decreasing).
pub fn worst_descent(trace: &[f64]) -> f64 {
    trace
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(0.0, f64::max)
}
