//! Small statistics helpers shared by calibration, evaluation, and the tests.

use crate::float::Float;

/// Mean of a slice. Returns 0 for an empty slice.
pub fn mean<F: Float>(xs: &[F]) -> F {
    if xs.is_empty() {
        return F::zero();
    }
    let sum = xs.iter().fold(F::zero(), |a, &b| a + b);
    sum / F::from_usize(xs.len()).unwrap()
}

/// Mean and sample standard deviation (n-1 denominator; std is 0 when n < 2).
pub fn mean_std<F: Float>(xs: &[F]) -> (F, F) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, F::zero());
    }
    let ss = xs
        .iter()
        .fold(F::zero(), |a, &b| a + (b - m) * (b - m));
    (m, (ss / F::from_usize(xs.len() - 1).unwrap()).sqrt())
}

/// Population standard deviation (n denominator).
pub fn std_pop<F: Float>(xs: &[F]) -> F {
    if xs.is_empty() {
        return F::zero();
    }
    let m = mean(xs);
    let ss = xs
        .iter()
        .fold(F::zero(), |a, &b| a + (b - m) * (b - m));
    (ss / F::from_usize(xs.len()).unwrap()).sqrt()
}

/// Percentile in [0, 100] with linear interpolation between order statistics.
pub fn percentile<F: Float>(xs: &[F], p: f64) -> F {
    assert!(!xs.is_empty(), "percentile of empty slice");
    assert!((0.0..=100.0).contains(&p), "percentile out of range");
    let mut sorted: Vec<F> = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in percentile input"));
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = F::from_f64_lossy(rank - lo as f64);
        sorted[lo] * (F::one() - w) + sorted[hi] * w
    }
}

/// Index of the largest element; first index wins ties.
pub fn argmax<F: Float>(xs: &[F]) -> usize {
    assert!(!xs.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Ranks with ties assigned the average rank (1-based).
fn ranks<F: Float>(xs: &[F]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("NaN in rank input"));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation of two equal-length f64 slices.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "correlation needs at least two points");
    let mx = mean(xs);
    let my = mean(ys);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman<F: Float>(xs: &[F], ys: &[F]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

/// Least-squares slope of y against x.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "slope needs at least two points");
    let mx = mean(xs);
    let my = mean(ys);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    sxy / sxx
}

/// Kolmogorov-Smirnov statistic of `xs` against Uniform[lo, hi].
pub fn ks_uniform(xs: &[f64], lo: f64, hi: f64) -> f64 {
    assert!(hi > lo);
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
        let lo_step = i as f64 / n;
        let hi_step = (i + 1) as f64 / n;
        d = d.max((cdf - lo_step).abs()).max((hi_step - cdf).abs());
    }
    d
}

/// Rounds to `figs` significant figures (used for reporting parameter counts).
pub fn round_sig_figs(x: f64, figs: u32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(magnitude - figs as i32 + 1);
    (x / scale).round() * scale
}

/// Tukey box-plot summary: median, quartiles, whiskers at the most extreme
/// points within 1.5 IQR of the box.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub min: f64,
    pub max: f64,
}

pub fn box_stats(xs: &[f64]) -> BoxStats {
    assert!(!xs.is_empty());
    let q1 = percentile(xs, 25.0);
    let q3 = percentile(xs, 75.0);
    let iqr = q3 - q1;
    let lo_fence = q1 - 1.5 * iqr;
    let hi_fence = q3 + 1.5 * iqr;
    let whisker_lo = xs
        .iter()
        .copied()
        .filter(|&x| x >= lo_fence)
        .fold(f64::INFINITY, f64::min);
    let whisker_hi = xs
        .iter()
        .copied()
        .filter(|&x| x <= hi_fence)
        .fold(f64::NEG_INFINITY, f64::max);
    BoxStats {
        median: percentile(xs, 50.0),
        q1,
        q3,
        whisker_lo,
        whisker_hi,
        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Slope of the radially averaged log-log power spectrum of a 2D map.
///
/// The periodogram is computed with a forward FFT, binned into logarithmic
/// annuli of spatial frequency over [2/N, 0.25], and fitted by least squares.
/// For ideal 1/f amplitude noise the slope is -2.
pub fn radial_psd_slope(map: &ndarray::Array2<f64>) -> f64 {
    use rustfft::{num_complex::Complex, FftPlanner};

    let (h, w) = map.dim();
    assert!(h >= 16 && w >= 16, "map too small for a spectral fit");
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);

    let mut data: Vec<Complex<f64>> = map.iter().map(|&x| Complex::new(x, 0.0)).collect();
    for r in 0..h {
        row_fft.process(&mut data[r * w..(r + 1) * w]);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = data[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            data[r * w + c] = col[r];
        }
    }

    let fy = |r: usize| -> f64 {
        let k = if r <= h / 2 { r as f64 } else { r as f64 - h as f64 };
        k / h as f64
    };
    let fx = |c: usize| -> f64 {
        let k = if c <= w / 2 { c as f64 } else { c as f64 - w as f64 };
        k / w as f64
    };

    let f_min = 2.0 / h.min(w) as f64;
    let f_max = 0.25f64;
    let nbins = 24usize;
    let log_lo = f_min.ln();
    let log_hi = f_max.ln();
    let mut power = vec![0.0f64; nbins];
    let mut count = vec![0usize; nbins];
    for r in 0..h {
        for c in 0..w {
            let f = (fy(r).powi(2) + fx(c).powi(2)).sqrt();
            if f < f_min || f > f_max {
                continue;
            }
            let t = (f.ln() - log_lo) / (log_hi - log_lo);
            let b = ((t * nbins as f64) as usize).min(nbins - 1);
            power[b] += data[r * w + c].norm_sqr();
            count[b] += 1;
        }
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for b in 0..nbins {
        if count[b] == 0 {
            continue;
        }
        let f_center = (log_lo + (b as f64 + 0.5) / nbins as f64 * (log_hi - log_lo)).exp();
        xs.push(f_center.ln());
        ys.push((power[b] / count[b] as f64).ln());
    }
    ls_slope(&xs, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let xs = [1.0f64, 2.0, 3.0, 4.0];
        assert!((percentile(&xs, 50.0) - 2.5).abs() < 1e-12);
        assert_eq!(percentile(&xs, 0.0), 1.0);
        assert_eq!(percentile(&xs, 100.0), 4.0);
    }

    #[test]
    fn spearman_detects_monotone_relations() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| (0.3 * x).exp()).collect();
        assert!((spearman(&xs, &ys) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|&x| -x * x).collect();
        assert!((spearman(&xs, &neg) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranks_average_ties() {
        let r = ranks(&[1.0f64, 2.0, 2.0, 3.0]);
        assert_eq!(r, vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn sig_fig_rounding_matches_reported_counts() {
        assert_eq!(round_sig_figs(7989.0, 3), 7.99e3);
        assert_eq!(round_sig_figs(122_843.0, 3), 1.23e5);
        assert_eq!(round_sig_figs(463_395.0, 3), 4.63e5);
    }

    #[test]
    fn ks_accepts_uniform_rejects_shifted() {
        use rand::Rng;
        let mut rng = crate::seed::rng(11);
        let u: Vec<f64> = (0..2000).map(|_| rng.random_range(0.0..7.0)).collect();
        let crit = 1.36 / (u.len() as f64).sqrt();
        assert!(ks_uniform(&u, 0.0, 7.0) < crit);
        let squashed: Vec<f64> = u.iter().map(|x| x * 0.5).collect();
        assert!(ks_uniform(&squashed, 0.0, 7.0) > crit);
    }

    #[test]
    fn box_stats_tukey_whiskers() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 100.0];
        let b = box_stats(&xs);
        assert_eq!(b.median, 3.5);
        assert_eq!(b.whisker_lo, 1.0);
        assert_eq!(b.whisker_hi, 5.0);
        assert_eq!(b.max, 100.0);
    }
}
