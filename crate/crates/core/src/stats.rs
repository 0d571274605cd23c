//! Small descriptive statistics used across the crate.

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population (1/N) variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

pub fn std_dev(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

fn central_moment(x: &[f64], m: f64, p: i32) -> f64 {
    x.iter().map(|v| (v - m).powi(p)).sum::<f64>() / x.len() as f64
}

/// Moment skewness m3 / m2^1.5.
pub fn skewness(x: &[f64]) -> f64 {
    let m = mean(x);
    let m2 = central_moment(x, m, 2);
    central_moment(x, m, 3) / m2.powf(1.5)
}

/// Moment excess kurtosis m4 / m2^2 - 3.
pub fn excess_kurtosis(x: &[f64]) -> f64 {
    let m = mean(x);
    let m2 = central_moment(x, m, 2);
    central_moment(x, m, 4) / (m2 * m2) - 3.0
}

/// Linear-interpolation quantile (R type 7). `x` need not be sorted.
pub fn quantile(x: &[f64], p: f64) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, p)
}

pub fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let n = v.len();
    if n == 1 {
        return v[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(x: &[f64]) -> f64 {
    quantile(x, 0.5)
}

/// Two-sided p-value of a standard normal statistic.
pub fn normal_two_sided_p(t: f64) -> f64 {
    statrs::function::erf::erfc(t.abs() / std::f64::consts::SQRT_2)
}

/// Counts of `x` in `bins` equal-width bins over `[lo, hi)`; values outside
/// are clamped into the end bins.
pub fn histogram(x: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in x {
        let b = ((v - lo) / width).floor();
        let b = if b < 0.0 { 0 } else { (b as usize).min(bins - 1) };
        counts[b] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_symmetric_sample() {
        let x = [-2.0, -1.0, 0.0, 1.0, 2.0];
        assert_eq!(mean(&x), 0.0);
        assert_eq!(variance(&x), 2.0);
        assert_eq!(skewness(&x), 0.0);
        // m4 = (16+1+0+1+16)/5 = 6.8, m2 = 2
        assert!((excess_kurtosis(&x) - (6.8 / 4.0 - 3.0)).abs() < 1e-15);
    }

    #[test]
    fn quantiles_interpolate() {
        let x = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&x), 2.5);
        assert_eq!(quantile(&x, 0.0), 1.0);
        assert_eq!(quantile(&x, 1.0), 4.0);
    }

    #[test]
    fn normal_p_values() {
        assert!((normal_two_sided_p(1.959963984540054) - 0.05).abs() < 1e-9);
        assert!((normal_two_sided_p(0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn histogram_clamps() {
        let h = histogram(&[-10.0, 0.1, 0.6, 10.0], 0.0, 1.0, 2);
        assert_eq!(h, vec![2, 2]);
    }
}
