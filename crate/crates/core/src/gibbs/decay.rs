//! Power-law decay fits in log-log coordinates.

use serde::{Deserialize, Serialize};

use crate::stats::{ols_slope, weighted_linear_fit};

/// Minimum number of distinct separations for a fit.
pub const MIN_SEPARATIONS: usize = 6;

/// Largest relative standard error admitted by the gate.
pub const MAX_RELATIVE_SE: f64 = 0.3;

/// A value at a separation, with its standard error (`None` for exact values).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub separation: f64,
    pub value: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayStatus {
    Fit,
    /// Too few separations pass the noise gate.
    NoSignal,
}

/// Output of [`decay_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub status: DecayStatus,
    pub slope: f64,
    pub slope_se: f64,
    /// 95% interval for the slope.
    pub ci: (f64, f64),
    pub intercept: f64,
    pub points_used: usize,
    pub distinct_separations: usize,
    /// Slope of the monotone envelope (running maximum from large separations).
    pub envelope_slope: f64,
}

impl DecayReport {
    fn no_signal(points_used: usize, distinct: usize) -> Self {
        Self {
            status: DecayStatus::NoSignal,
            slope: f64::NAN,
            slope_se: f64::NAN,
            ci: (f64::NAN, f64::NAN),
            intercept: f64::NAN,
            points_used,
            distinct_separations: distinct,
            envelope_slope: f64::NAN,
        }
    }
}

fn passes(p: &DecayPoint) -> bool {
    p.separation > 0.0
        && p.value.is_finite()
        && p.value != 0.0
        && p.se.is_none_or(|se| se < MAX_RELATIVE_SE * p.value.abs())
}

/// Weighted regression of `ln |value|` on `ln separation` plus an envelope fit.
pub fn decay_report(points: &[DecayPoint]) -> DecayReport {
    let used: Vec<&DecayPoint> = points.iter().filter(|p| passes(p)).collect();
    let mut seps: Vec<f64> = used.iter().map(|p| p.separation).collect();
    seps.sort_by(f64::total_cmp);
    seps.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    if seps.len() < MIN_SEPARATIONS {
        return DecayReport::no_signal(used.len(), seps.len());
    }
    let x: Vec<f64> = used.iter().map(|p| p.separation.ln()).collect();
    let y: Vec<f64> = used.iter().map(|p| p.value.abs().ln()).collect();
    let exact = used.iter().all(|p| p.se.is_none());
    let w: Vec<f64> = used
        .iter()
        .map(|p| p.se.map_or(1.0, |se| (p.value / se).powi(2)))
        .collect();
    let fit = weighted_linear_fit(&x, &y, &w);
    let slope_se = if exact {
        fit.slope_se_scatter
    } else {
        fit.slope_se_weights.max(fit.slope_se_scatter)
    };

    // Envelope: maximum |value| per separation, then running maximum from the right.
    let mut env: Vec<(f64, f64)> = seps
        .iter()
        .map(|&s| {
            let m = used
                .iter()
                .filter(|p| (p.separation - s).abs() < 1e-9)
                .map(|p| p.value.abs())
                .fold(0.0, f64::max);
            (s, m)
        })
        .collect();
    for k in (0..env.len().saturating_sub(1)).rev() {
        env[k].1 = env[k].1.max(env[k + 1].1);
    }
    let ex: Vec<f64> = env.iter().map(|e| e.0.ln()).collect();
    let ey: Vec<f64> = env.iter().map(|e| e.1.ln()).collect();
    DecayReport {
        status: DecayStatus::Fit,
        slope: fit.slope,
        slope_se,
        ci: (fit.slope - 1.96 * slope_se, fit.slope + 1.96 * slope_se),
        intercept: fit.intercept,
        points_used: used.len(),
        distinct_separations: seps.len(),
        envelope_slope: ols_slope(&ex, &ey),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gff::{green_kernel, QMatrix};
    use crate::lattice::{make_torus, LatticePoint};
    use rand::Rng;

    #[test]
    fn planted_power_law() {
        let pts: Vec<DecayPoint> = (2..20)
            .map(|r| DecayPoint {
                separation: r as f64,
                value: 5.0 * (r as f64).powi(-3),
                se: None,
            })
            .collect();
        let rep = decay_report(&pts);
        assert_eq!(rep.status, DecayStatus::Fit);
        assert!((rep.slope + 3.0).abs() < 0.05);
        assert!((rep.envelope_slope + 3.0).abs() < 0.05);
    }

    #[test]
    fn white_noise_has_no_signal() {
        let mut rng = crate::rng::stream_rng(2, 0);
        let pts: Vec<DecayPoint> = (2..40)
            .map(|r| DecayPoint {
                separation: r as f64,
                value: rng.random_range(-1.0..1.0),
                se: Some(1.0),
            })
            .collect();
        assert_eq!(decay_report(&pts).status, DecayStatus::NoSignal);
    }

    #[test]
    fn exact_kernel_decays_like_dimension() {
        let t = make_torus(2, 3, 5).unwrap();
        let k = green_kernel(&QMatrix::zero(2), &t).unwrap();
        let o = LatticePoint::origin(2);
        let pts: Vec<DecayPoint> = (4..=30)
            .map(|s| DecayPoint {
                separation: s as f64,
                value: k.grad_grad_cov(&o, &LatticePoint(vec![s, 0]), 0, 0),
                se: None,
            })
            .collect();
        let rep = decay_report(&pts);
        assert!((-2.3..=-1.7).contains(&rep.slope), "{}", rep.slope);
    }

    #[test]
    fn noisy_points_are_weighted() {
        let pts: Vec<DecayPoint> = (1..=10)
            .map(|r| {
                let v = (r as f64).powi(-2);
                DecayPoint {
                    separation: r as f64,
                    value: v,
                    se: Some(0.05 * v),
                }
            })
            .collect();
        let rep = decay_report(&pts);
        assert!((rep.slope + 2.0).abs() < 1e-10);
        assert!(rep.ci.0 < -2.0 && rep.ci.1 > -2.0);
    }
}
