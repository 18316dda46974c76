//! Small statistics helpers: running moments, batch means, jackknife, regression.

use serde::{Deserialize, Serialize};

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanVar {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MeanVar {
    pub fn vec(n: usize) -> Vec<MeanVar> {
        vec![MeanVar::default(); n]
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn standard_error(&self) -> f64 {
        if self.n < 2 {
            f64::INFINITY
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// Mean and standard error of equal-weight batch means.
pub fn batch_mean_se(batch_means: &[f64]) -> (f64, f64) {
    let mut mv = MeanVar::default();
    for &b in batch_means {
        mv.push(b);
    }
    (mv.mean(), mv.standard_error())
}

/// Split a series into `n_batches` contiguous batches and return their means.
/// Trailing samples that do not fill a batch are dropped.
pub fn batch_means(series: &[f64], n_batches: usize) -> Vec<f64> {
    let size = series.len() / n_batches.max(1);
    if size == 0 {
        return Vec::new();
    }
    series[..size * n_batches]
        .chunks_exact(size)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect()
}

/// Delete-one-block jackknife for a statistic of block totals.
///
/// `blocks[b]` holds per-block sums of the raw quantities the statistic needs;
/// `stat` maps summed quantities to the estimate. Returns `(estimate, se)`.
pub fn jackknife<F>(blocks: &[Vec<f64>], stat: F) -> (f64, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let nb = blocks.len();
    let width = blocks.first().map_or(0, |b| b.len());
    let mut total = vec![0.0; width];
    for b in blocks {
        for (t, v) in total.iter_mut().zip(b) {
            *t += v;
        }
    }
    let full = stat(&total);
    if nb < 2 {
        return (full, f64::INFINITY);
    }
    let mut loo = Vec::with_capacity(nb);
    let mut tmp = vec![0.0; width];
    for b in blocks {
        for ((t, tot), v) in tmp.iter_mut().zip(&total).zip(b) {
            *t = tot - v;
        }
        loo.push(stat(&tmp));
    }
    let mean_loo = loo.iter().sum::<f64>() / nb as f64;
    let var = loo.iter().map(|x| (x - mean_loo).powi(2)).sum::<f64>() * (nb - 1) as f64 / nb as f64;
    (full, var.sqrt())
}

/// Integrated autocorrelation time with Sokal's automatic window (`c = 6`).
pub fn integrated_autocorr_time(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return 0.5;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0 = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return 0.5;
    }
    let mut tau = 0.5;
    for lag in 1..n / 2 {
        let c = series[..n - lag]
            .iter()
            .zip(&series[lag..])
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / n as f64;
        tau += c / c0;
        if lag as f64 >= 6.0 * tau {
            break;
        }
    }
    tau.max(0.5)
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    weighted_linear_fit(x, y, &vec![1.0; x.len()]).slope
}

/// Result of a weighted straight-line fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope from the weights.
    pub slope_se_weights: f64,
    /// Standard error of the slope from the residual scatter.
    pub slope_se_scatter: f64,
    pub chi2: f64,
    pub n: usize,
}

/// Weighted least squares `y ≈ a + b x` with weights `w = 1/σ²`.
pub fn weighted_linear_fit(x: &[f64], y: &[f64], w: &[f64]) -> LineFit {
    let n = x.len();
    let sw: f64 = w.iter().sum();
    let sx: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
    let sy: f64 = y.iter().zip(w).map(|(a, b)| a * b).sum();
    let xm = sx / sw;
    let ym = sy / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - xm).powi(2)).sum();
    let sxy: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((a, c), b)| b * (a - xm) * (c - ym))
        .sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let chi2: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((a, c), b)| b * (c - intercept - slope * a).powi(2))
        .sum();
    let dof = n.saturating_sub(2).max(1) as f64;
    LineFit {
        slope,
        intercept,
        slope_se_weights: (1.0 / sxx).sqrt(),
        slope_se_scatter: (chi2 / dof / sxx).sqrt(),
        chi2,
        n,
    }
}
