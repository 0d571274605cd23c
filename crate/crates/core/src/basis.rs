//! Basis matrices for the random-effect terms: Moran eigenvectors for spatial
//! effects, natural cubic splines for effects varying with a covariate's own
//! value, and group indicators for random intercepts.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{CammError, Result};
use crate::stats;

/// Default cap on retained Moran eigenvectors.
pub const DEFAULT_MAX_VECTORS: usize = 200;
/// Eigenpairs with `lambda <= RETAIN_TOL * lambda_1` are dropped.
pub const RETAIN_TOL: f64 = 1e-12;
pub const DEFAULT_KNOTS: usize = 5;

/// Moran eigenvectors of the doubly-centered exponential proximity matrix
/// over a set of unique locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialBasis {
    pub coords: Vec<[f64; 2]>,
    /// Label of each unique location (row of `vectors`).
    pub location_ids: Vec<String>,
    /// `N_u x L`, orthonormal columns orthogonal to the constant vector.
    pub vectors: DMatrix<f64>,
    /// Strictly decreasing, strictly positive.
    pub eigenvalues: Vec<f64>,
    pub kernel_range: f64,
    /// Column means of the (zero-diagonal) proximity matrix, for projecting
    /// new locations.
    pub proximity_col_means: Vec<f64>,
    pub proximity_grand_mean: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct MoranOptions {
    /// `None` selects the largest nearest-neighbour distance.
    pub kernel_range: Option<f64>,
    pub max_vectors: usize,
}

impl Default for MoranOptions {
    fn default() -> Self {
        Self {
            kernel_range: None,
            max_vectors: DEFAULT_MAX_VECTORS,
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Collapses repeated coordinate pairs. Returns the unique locations in order
/// of first appearance and, per input row, the index of its location.
pub fn unique_locations(coords: &[[f64; 2]]) -> (Vec<[f64; 2]>, Vec<usize>) {
    let mut seen: HashMap<(u64, u64), usize> = HashMap::new();
    let mut unique = Vec::new();
    let index = coords
        .iter()
        .map(|c| {
            let key = (c[0].to_bits(), c[1].to_bits());
            *seen.entry(key).or_insert_with(|| {
                unique.push(*c);
                unique.len() - 1
            })
        })
        .collect();
    (unique, index)
}

/// Largest distance from any location to its nearest distinct neighbour.
pub fn default_kernel_range(coords: &[[f64; 2]]) -> f64 {
    coords
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            coords
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &b)| dist(a, b))
                .filter(|&d| d > 0.0)
                .fold(f64::INFINITY, f64::min)
        })
        .filter(|d| d.is_finite())
        .fold(0.0, f64::max)
}

/// Exponential proximity matrix `exp(-d_ij / r)` with zero diagonal.
pub fn proximity_matrix(coords: &[[f64; 2]], range: f64) -> DMatrix<f64> {
    let n = coords.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            (-dist(coords[i], coords[j]) / range).exp()
        }
    })
}

/// `(I - 11'/n) C (I - 11'/n)`.
pub fn double_center(c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = c.nrows();
    let row_means: Vec<f64> = (0..n).map(|i| c.row(i).sum() / n as f64).collect();
    let col_means: Vec<f64> = (0..n).map(|j| c.column(j).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    DMatrix::from_fn(n, n, |i, j| c[(i, j)] - row_means[i] - col_means[j] + grand)
}

/// Moran coefficient of a map pattern `e` under proximity matrix `c`.
pub fn moran_coefficient(e: &[f64], c: &DMatrix<f64>) -> f64 {
    let n = e.len();
    let m = stats::mean(e);
    let d: Vec<f64> = e.iter().map(|v| v - m).collect();
    let mut num = 0.0;
    for i in 0..n {
        for j in 0..n {
            num += d[i] * c[(i, j)] * d[j];
        }
    }
    let den: f64 = d.iter().map(|v| v * v).sum();
    n as f64 / c.sum() * num / den
}

/// Moran eigenvectors with positive eigenvalues, sorted by decreasing
/// eigenvalue. Location labels default to the row index.
pub fn moran_eigenvectors(coords: &[[f64; 2]], opts: MoranOptions) -> Result<SpatialBasis> {
    if coords.iter().any(|c| !c[0].is_finite() || !c[1].is_finite()) {
        return Err(CammError::Degenerate("non-finite coordinates".into()));
    }
    let (distinct, _) = unique_locations(coords);
    if distinct.len() < 3 {
        return Err(CammError::Degenerate(format!(
            "need at least 3 distinct locations, got {}",
            distinct.len()
        )));
    }
    let range = match opts.kernel_range {
        Some(r) if r > 0.0 && r.is_finite() => r,
        Some(r) => {
            return Err(CammError::InvalidParameter(format!(
                "kernel range must be positive, got {r}"
            )))
        }
        None => default_kernel_range(coords),
    };
    let n = coords.len();
    let c = proximity_matrix(coords, range);
    let col_means: Vec<f64> = (0..n).map(|j| c.column(j).sum() / n as f64).collect();
    let grand = col_means.iter().sum::<f64>() / n as f64;
    let centered = double_center(&c);
    let eig = SymmetricEigen::new(centered);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    if !(top > 0.0) {
        return Err(CammError::Degenerate("no positive Moran eigenvalues".into()));
    }
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&k| eig.eigenvalues[k] > RETAIN_TOL * top)
        .take(opts.max_vectors.min(n - 1))
        .collect();

    let mut vectors = DMatrix::zeros(n, keep.len());
    for (col, &k) in keep.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        let mut pivot = 0;
        for i in 1..n {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[(i, col)] = sign * v[i];
        }
    }
    Ok(SpatialBasis {
        coords: coords.to_vec(),
        location_ids: (0..n).map(|i| i.to_string()).collect(),
        vectors,
        eigenvalues: keep.iter().map(|&k| eig.eigenvalues[k]).collect(),
        kernel_range: range,
        proximity_col_means: col_means,
        proximity_grand_mean: grand,
    })
}

impl SpatialBasis {
    pub fn with_location_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.coords.len() {
            return Err(CammError::LengthMismatch {
                expected: self.coords.len(),
                got: ids.len(),
            });
        }
        self.location_ids = ids;
        Ok(self)
    }

    pub fn n_vectors(&self) -> usize {
        self.vectors.ncols()
    }

    /// Keeps only the leading `l` eigenpairs.
    pub fn truncated(&self, l: usize) -> SpatialBasis {
        let l = l.min(self.n_vectors());
        let mut out = self.clone();
        out.vectors = self.vectors.columns(0, l).into_owned();
        out.eigenvalues.truncate(l);
        out
    }

    /// Row `i` of the output is the eigenvector row of `rows[i]`.
    pub fn expand_rows(&self, rows: &[usize]) -> Result<DMatrix<f64>> {
        let l = self.n_vectors();
        let n_u = self.vectors.nrows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_u) {
            return Err(CammError::UnknownId(bad.to_string()));
        }
        Ok(DMatrix::from_fn(rows.len(), l, |i, j| {
            self.vectors[(rows[i], j)]
        }))
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.location_ids.iter().position(|l| l == id)
    }

    /// Eigenvector values at an arbitrary site by Nystrom extension of the
    /// doubly-centered kernel. Reproduces the stored row at a training site.
    pub fn project(&self, site: [f64; 2]) -> Vec<f64> {
        let n = self.coords.len();
        let c: Vec<f64> = self
            .coords
            .iter()
            .map(|&s| {
                let d = dist(s, site);
                if d == 0.0 {
                    0.0
                } else {
                    (-d / self.kernel_range).exp()
                }
            })
            .collect();
        let c_mean = c.iter().sum::<f64>() / n as f64;
        let centered: Vec<f64> = c
            .iter()
            .zip(&self.proximity_col_means)
            .map(|(cj, mj)| cj - c_mean - mj + self.proximity_grand_mean)
            .collect();
        (0..self.n_vectors())
            .map(|l| {
                let dot: f64 = (0..n).map(|j| self.vectors[(j, l)] * centered[j]).sum();
                dot / self.eigenvalues[l]
            })
            .collect()
    }
}

/// Expands a spatial basis to sample rows through location labels.
pub fn expand_by_location(sb: &SpatialBasis, location_id: &[String]) -> Result<DMatrix<f64>> {
    let lookup: HashMap<&str, usize> = sb
        .location_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let rows = location_id
        .iter()
        .map(|id| {
            lookup
                .get(id.as_str())
                .copied()
                .ok_or_else(|| CammError::UnknownId(id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    sb.expand_rows(&rows)
}

/// Natural cubic spline basis (truncated-power form, linear beyond the
/// boundary knots) with training-centered columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalSpline {
    /// Knots in the original units, boundary knots first and last.
    pub knots: Vec<f64>,
    pub column_means: Vec<f64>,
}

impl NaturalSpline {
    /// `knot_count` columns; knots at the `j / knot_count` quantiles of `x`.
    pub fn fit(x: &[f64], knot_count: usize) -> Result<NaturalSpline> {
        if knot_count < 1 {
            return Err(CammError::InvalidParameter("knot_count must be >= 1".into()));
        }
        let mut sorted = x.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        sorted.dedup();
        if sorted.len() <= knot_count {
            return Err(CammError::Degenerate(format!(
                "spline needs more than {knot_count} distinct values, got {}",
                sorted.len()
            )));
        }
        let mut all = x.to_vec();
        all.sort_by(|a, b| a.total_cmp(b));
        let knots: Vec<f64> = (0..=knot_count)
            .map(|j| stats::quantile_sorted(&all, j as f64 / knot_count as f64))
            .collect();
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(CammError::Degenerate(
                "spline knots at quantiles are not distinct (too many ties)".into(),
            ));
        }
        let mut spline = NaturalSpline {
            knots,
            column_means: vec![0.0; knot_count],
        };
        let raw = spline.raw_basis(x);
        spline.column_means = (0..knot_count)
            .map(|j| raw.column(j).sum() / x.len() as f64)
            .collect();
        Ok(spline)
    }

    pub fn columns(&self) -> usize {
        self.column_means.len()
    }

    fn raw_basis(&self, x: &[f64]) -> DMatrix<f64> {
        let k = self.knots.len();
        let lo = self.knots[0];
        let width = self.knots[k - 1] - lo;
        let u_knots: Vec<f64> = self.knots.iter().map(|t| (t - lo) / width).collect();
        let last = u_knots[k - 1];
        let d = |u: f64, j: usize| -> f64 {
            let a = (u - u_knots[j]).max(0.0).powi(3);
            let b = (u - last).max(0.0).powi(3);
            (a - b) / (last - u_knots[j])
        };
        DMatrix::from_fn(x.len(), k - 1, |i, col| {
            let u = (x[i] - lo) / width;
            if col == 0 {
                u
            } else {
                d(u, col - 1) - d(u, k - 2)
            }
        })
    }

    pub fn basis(&self, x: &[f64]) -> DMatrix<f64> {
        let mut b = self.raw_basis(x);
        for (j, m) in self.column_means.iter().enumerate() {
            b.column_mut(j).add_scalar_mut(-m);
        }
        b
    }
}

/// Centered natural spline basis with `knot_count` columns.
pub fn spline_basis(x: &[f64], knot_count: usize) -> Result<DMatrix<f64>> {
    Ok(NaturalSpline::fit(x, knot_count)?.basis(x))
}

/// Group levels in order of first appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLevels {
    pub levels: Vec<String>,
}

impl GroupLevels {
    pub fn fit(ids: &[String]) -> Result<GroupLevels> {
        let mut levels: Vec<String> = Vec::new();
        let mut seen = HashMap::new();
        for id in ids {
            if !seen.contains_key(id.as_str()) {
                seen.insert(id.as_str(), levels.len());
                levels.push(id.clone());
            }
        }
        if levels.len() < 2 {
            return Err(CammError::Degenerate(
                "group effect needs at least 2 groups".into(),
            ));
        }
        Ok(GroupLevels { levels })
    }

    /// Indicator matrix; ids not seen in training give an all-zero row.
    pub fn indicators(&self, ids: &[String]) -> DMatrix<f64> {
        let lookup: HashMap<&str, usize> = self
            .levels
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut m = DMatrix::zeros(ids.len(), self.levels.len());
        for (i, id) in ids.iter().enumerate() {
            if let Some(&g) = lookup.get(id.as_str()) {
                m[(i, g)] = 1.0;
            }
        }
        m
    }
}

pub fn group_basis(ids: &[String]) -> Result<DMatrix<f64>> {
    Ok(GroupLevels::fit(ids)?.indicators(ids))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    SpatialVc,
    NonSpatialVc,
    GroupIntercept,
    SpatialIntercept,
    TemporalIntercept,
}

impl BlockKind {
    pub fn is_spatial(self) -> bool {
        matches!(self, BlockKind::SpatialVc | BlockKind::SpatialIntercept)
    }
}

/// One random-effect term.
#[derive(Debug, Clone)]
pub struct EffectBlock {
    pub kind: BlockKind,
    /// Basis of the coefficient itself (before multiplying by the covariate).
    pub coef_basis: DMatrix<f64>,
    /// Design columns entering the model: `x_k o coef_basis` row-wise.
    pub basis: DMatrix<f64>,
    /// Eigenvalues scaled so the largest is 1 (spatial kinds only).
    pub eigenvalues: Option<Vec<f64>>,
    /// Index of the multiplied fixed-effect column (0 = intercept).
    pub covariate: Option<usize>,
}

impl EffectBlock {
    /// Builds a block, multiplying `coef_basis` row-wise by `covariate_values`
    /// when given, and checks full column rank.
    pub fn new(
        kind: BlockKind,
        coef_basis: DMatrix<f64>,
        covariate: Option<(usize, &[f64])>,
        eigenvalues: Option<&[f64]>,
    ) -> Result<EffectBlock> {
        if kind.is_spatial() != eigenvalues.is_some() {
            return Err(CammError::InvalidParameter(
                "eigenvalues are required for spatial blocks only".into(),
            ));
        }
        let eigenvalues = match eigenvalues {
            Some(ev) => {
                if ev.len() != coef_basis.ncols() {
                    return Err(CammError::LengthMismatch {
                        expected: coef_basis.ncols(),
                        got: ev.len(),
                    });
                }
                if ev.iter().any(|&v| !(v > 0.0)) {
                    return Err(CammError::InvalidParameter(
                        "eigenvalues must be positive".into(),
                    ));
                }
                let top = ev.iter().copied().fold(0.0, f64::max);
                Some(ev.iter().map(|v| v / top).collect())
            }
            None => None,
        };
        let mut basis = coef_basis.clone();
        let index = match covariate {
            Some((k, x)) => {
                if x.len() != basis.nrows() {
                    return Err(CammError::LengthMismatch {
                        expected: basis.nrows(),
                        got: x.len(),
                    });
                }
                for (i, xi) in x.iter().enumerate() {
                    basis.row_mut(i).scale_mut(*xi);
                }
                Some(k)
            }
            None => None,
        };
        check_full_column_rank(&basis)?;
        Ok(EffectBlock {
            kind,
            coef_basis,
            basis,
            eigenvalues,
            covariate: index,
        })
    }

    pub fn columns(&self) -> usize {
        self.basis.ncols()
    }
}

fn check_full_column_rank(b: &DMatrix<f64>) -> Result<()> {
    if b.ncols() == 0 {
        return Err(CammError::Degenerate("empty basis".into()));
    }
    let gram = b.tr_mul(b);
    let ev = gram.symmetric_eigenvalues();
    let max = ev.iter().copied().fold(0.0, f64::max);
    let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= 1e-10 * max {
        return Err(CammError::Degenerate(
            "basis matrix is not of full column rank".into(),
        ));
    }
    Ok(())
}

/// Horizontal concatenation of the block design matrices.
pub fn stack_blocks(blocks: &[EffectBlock], n: usize) -> DMatrix<f64> {
    let total: usize = blocks.iter().map(|b| b.columns()).sum();
    let mut e = DMatrix::zeros(n, total);
    let mut off = 0;
    for b in blocks {
        e.columns_mut(off, b.columns()).copy_from(&b.basis);
        off += b.columns();
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Vec<[f64; 2]> {
        (0..n)
            .map(|i| {
                let t = i as f64;
                [(t * 0.731).sin() * 3.0 + t * 0.05, (t * 1.37).cos() * 2.0]
            })
            .collect()
    }

    #[test]
    fn eigenvectors_are_orthonormal_and_centered() {
        let sb = moran_eigenvectors(&grid(40), MoranOptions::default()).unwrap();
        let e = &sb.vectors;
        let gram = e.tr_mul(e);
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - target).abs() < 1e-10);
            }
            assert!(e.column(i).sum().abs() < 1e-10);
        }
        assert!(sb.eigenvalues.windows(2).all(|w| w[0] > w[1]));
        assert!(sb.eigenvalues.iter().all(|&v| v > 0.0));
        assert!(sb.n_vectors() <= 39);
    }

    #[test]
    fn double_centering_zeroes_margins() {
        let c = proximity_matrix(&grid(25), 1.3);
        let m = double_center(&c);
        for i in 0..25 {
            assert!(m.row(i).sum().abs() < 1e-10);
            assert!(m.column(i).sum().abs() < 1e-10);
        }
    }

    #[test]
    fn positive_moran_coefficients() {
        let coords = grid(30);
        let sb = moran_eigenvectors(&coords, MoranOptions::default()).unwrap();
        let c = proximity_matrix(&coords, sb.kernel_range);
        for l in 0..sb.n_vectors() {
            let e: Vec<f64> = sb.vectors.column(l).iter().copied().collect();
            assert!(moran_coefficient(&e, &c) > 0.0);
        }
    }

    #[test]
    fn deterministic_signs() {
        let a = moran_eigenvectors(&grid(20), MoranOptions::default()).unwrap();
        let b = moran_eigenvectors(&grid(20), MoranOptions::default()).unwrap();
        assert_eq!(a, b);
        for l in 0..a.n_vectors() {
            let col = a.vectors.column(l);
            let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn too_few_locations() {
        let dup = vec![[1.0, 1.0], [1.0, 1.0], [2.0, 2.0], [2.0, 2.0]];
        assert!(moran_eigenvectors(&dup, MoranOptions::default()).is_err());
    }

    #[test]
    fn default_range_is_max_nearest_neighbour() {
        let coords = vec![[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]];
        assert_eq!(default_kernel_range(&coords), 4.0);
    }

    #[test]
    fn expansion_by_location() {
        let sb = moran_eigenvectors(&grid(10), MoranOptions::default()).unwrap();
        let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        assert_eq!(expand_by_location(&sb, &ids).unwrap(), sb.vectors);
        let rep: Vec<String> = ["3", "3", "7"].iter().map(|s| s.to_string()).collect();
        let m = expand_by_location(&sb, &rep).unwrap();
        assert_eq!(m.row(0), m.row(1));
        assert!(matches!(
            expand_by_location(&sb, &["99".to_string()]),
            Err(CammError::UnknownId(_))
        ));
    }

    #[test]
    fn uneven_repetition_breaks_centering() {
        let sb = moran_eigenvectors(&grid(12), MoranOptions::default()).unwrap();
        let mut ids = Vec::new();
        for i in 0..12 {
            let times = if i < 6 { 2 } else { 1 };
            for _ in 0..times {
                ids.push(i.to_string());
            }
        }
        let m = expand_by_location(&sb, &ids).unwrap();
        let max_mean = (0..m.ncols())
            .map(|j| (m.column(j).sum() / m.nrows() as f64).abs())
            .fold(0.0, f64::max);
        assert!(max_mean > 1e-3);
    }

    #[test]
    fn projection_reproduces_training_rows() {
        let sb = moran_eigenvectors(&grid(15), MoranOptions::default()).unwrap();
        for i in [0, 4, 14] {
            let p = sb.project(sb.coords[i]);
            for l in 0..sb.n_vectors() {
                assert!((p[l] - sb.vectors[(i, l)]).abs() < 1e-9);
            }
        }
        let far = sb.project([1e6, 1e6]);
        let row0 = sb.project(sb.coords[0]);
        assert!(far.iter().all(|v| v.is_finite()));
        assert_ne!(far, row0);
    }

    #[test]
    fn spline_columns_are_centered() {
        let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.618).fract() * 10.0).collect();
        let b = spline_basis(&x, 5).unwrap();
        assert_eq!(b.ncols(), 5);
        for j in 0..5 {
            assert!((b.column(j).sum() / 200.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_is_linear_outside_boundary() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let s = NaturalSpline::fit(&x, 4).unwrap();
        for probe in [[-3.0, -2.0, -1.0], [2.0, 3.0, 4.0]] {
            let b = s.basis(&probe);
            for j in 0..b.ncols() {
                let second = b[(0, j)] - 2.0 * b[(1, j)] + b[(2, j)];
                assert!(second.abs() < 1e-9, "col {j}: {second}");
            }
        }
    }

    #[test]
    fn spline_needs_distinct_values() {
        assert!(spline_basis(&[1.0, 2.0, 1.0, 2.0, 3.0], 5).is_err());
    }

    #[test]
    fn group_indicators() {
        let ids: Vec<String> = ["a", "a", "b"].iter().map(|s| s.to_string()).collect();
        let g = group_basis(&ids).unwrap();
        assert_eq!(g, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
        assert!(group_basis(&ids[..2]).is_err());
        let ids: Vec<String> = (0..30).map(|i| format!("g{}", i % 4)).collect();
        let g = group_basis(&ids).unwrap();
        for i in 0..30 {
            assert_eq!(g.row(i).sum(), 1.0);
        }
        let sizes: Vec<f64> = (0..4).map(|j| g.column(j).sum()).collect();
        assert_eq!(sizes, vec![8.0, 8.0, 7.0, 7.0]);
    }

    #[test]
    fn hadamard_block() {
        let sb = moran_eigenvectors(&grid(10), MoranOptions::default()).unwrap();
        let x: Vec<f64> = (0..10).map(|i| 1.0 + i as f64).collect();
        let b = EffectBlock::new(
            BlockKind::SpatialVc,
            sb.vectors.clone(),
            Some((1, &x)),
            Some(&sb.eigenvalues),
        )
        .unwrap();
        for l in 0..b.columns() {
            for i in 0..10 {
                assert_eq!(b.basis[(i, l)], x[i] * sb.vectors[(i, l)]);
            }
        }
        let ev = b.eigenvalues.as_ref().unwrap();
        assert_eq!(ev[0], 1.0);
    }
}
