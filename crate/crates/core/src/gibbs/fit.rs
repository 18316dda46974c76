//! Least-squares fit of an effective `q` to measured gradient covariances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::estimate::CovEstimate;
use crate::error::{Error, Result};
use crate::fourier::NdFft;
use crate::gff::{
    grad_grad_from_values, green_kernel, symbol_derivative, CovKernel, QMatrix, Q_NORM_BOUND,
};
use crate::lattice::{LatticePoint, Torus};

const MAX_ITERATIONS: usize = 50;

/// Measured versus fitted value for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub a: LatticePoint,
    pub b: LatticePoint,
    pub i: usize,
    pub j: usize,
    pub separation: f64,
    /// `β · Ĉov`.
    pub measured: f64,
    /// `∇∇C^{q̂}(a, b)`.
    pub model: f64,
    pub residual: f64,
    /// Standard error of the residual, including the uncertainty of `q̂`.
    pub se: f64,
}

/// Output of [`fit_q`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub q: QMatrix,
    /// Upper-triangle parameters in [`QMatrix::param_pairs`] order.
    pub params: Vec<f64>,
    pub param_se: Vec<f64>,
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
    /// `q̂` had to be scaled back to `‖q‖ ≤ 1/2`.
    pub projected: bool,
    pub residuals: Vec<ResidualRow>,
    pub flags: Vec<String>,
}

impl FitResult {
    /// Operator norm of `q̂` relative to the largest parameter standard error.
    pub fn norm_over_se(&self) -> f64 {
        let se = self.param_se.iter().cloned().fold(0.0, f64::max);
        if se > 0.0 {
            self.q.op_norm() / se
        } else {
            f64::INFINITY
        }
    }
}

/// `∂C / ∂θ_p` for every upper-triangle parameter, as kernel values.
fn kernel_derivatives(kernel: &CovKernel, torus: &Torus, fft: &NdFft) -> Vec<Vec<f64>> {
    let d = torus.d();
    QMatrix::param_pairs(d)
        .into_iter()
        .map(|(k, l)| {
            let ds = symbol_derivative(torus, k, l);
            let spec: Vec<f64> = ds
                .iter()
                .zip(&kernel.spectrum)
                .map(|(a, s)| -a * s * s)
                .collect();
            fft.synthesize_real(&spec)
        })
        .collect()
}

fn offset(a: &LatticePoint, b: &LatticePoint) -> Vec<i64> {
    a.0.iter().zip(&b.0).map(|(x, y)| x - y).collect()
}

/// Fit `β Ĉov(∇_i φ(a), ∇_j φ(b)) ≈ ∇∇C^q(a, b)` over rows with separation in `window`.
///
/// Gauss–Newton on the upper-triangle entries of `q`, weighted by the inverse
/// squared standard errors. Residuals are reported for every row.
pub fn fit_q(est: &CovEstimate, torus: &Torus, beta: f64, window: (f64, f64)) -> Result<FitResult> {
    let d = torus.d();
    let n_params = QMatrix::n_params(d);
    let rows: Vec<_> = est
        .rows
        .iter()
        .filter(|r| r.separation >= window.0 && r.separation <= window.1 && r.se > 0.0)
        .collect();
    if rows.len() < n_params {
        return Err(Error::Singular(format!(
            "{} rows in the fit window for {n_params} parameters",
            rows.len()
        )));
    }
    let fft = NdFft::new(*torus);
    let y: Vec<f64> = rows.iter().map(|r| beta * r.estimate).collect();
    let w: Vec<f64> = rows.iter().map(|r| 1.0 / (beta * r.se).powi(2)).collect();
    let offsets: Vec<Vec<i64>> = rows.iter().map(|r| offset(&r.a, &r.b)).collect();
    let mut theta = vec![0.0; n_params];
    let mut iterations = 0;
    let mut normal = DMatrix::<f64>::zeros(n_params, n_params);
    let mut chi2;
    loop {
        iterations += 1;
        let q = QMatrix::from_params_unbounded(d, &theta)?;
        let kernel = green_kernel(&q, torus)?;
        let derivs = kernel_derivatives(&kernel, torus, &fft);
        let mut jt_w_r = DVector::<f64>::zeros(n_params);
        normal.fill(0.0);
        chi2 = 0.0;
        for (k, r) in rows.iter().enumerate() {
            let m = grad_grad_from_values(torus, &kernel.values, &offsets[k], r.i, r.j);
            let res = y[k] - m;
            chi2 += w[k] * res * res;
            let g: Vec<f64> = derivs
                .iter()
                .map(|dv| grad_grad_from_values(torus, dv, &offsets[k], r.i, r.j))
                .collect();
            for p in 0..n_params {
                jt_w_r[p] += w[k] * g[p] * res;
                for s in 0..n_params {
                    normal[(p, s)] += w[k] * g[p] * g[s];
                }
            }
        }
        let chol = normal
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("normal equations are not positive definite".into()))?;
        let step = chol.solve(&jt_w_r);
        for (t, s) in theta.iter_mut().zip(step.iter()) {
            *t += s;
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Singular("fit diverged".into()));
        }
        let small = step
            .iter()
            .all(|s| s.abs() < 1e-12 * (1.0 + theta.iter().map(|t| t.abs()).fold(0.0, f64::max)));
        if small || iterations >= MAX_ITERATIONS {
            break;
        }
    }
    let inv = normal
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("normal matrix not invertible".into()))?;
    let cond = {
        let ev = normal.clone().symmetric_eigenvalues();
        let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| {
            (a.min(v.abs()), b.max(v.abs()))
        });
        hi / lo
    };
    let mut flags = Vec::new();
    if cond > 1e12 {
        flags.push(format!(
            "ill-conditioned normal equations (condition {cond:.2e})"
        ));
    }
    if iterations >= MAX_ITERATIONS {
        flags.push("Gauss-Newton did not converge".into());
    }
    let param_se: Vec<f64> = (0..n_params).map(|p| inv[(p, p)].max(0.0).sqrt()).collect();
    let mut q = QMatrix::from_params_unbounded(d, &theta)?;
    let mut projected = false;
    let norm = q.op_norm();
    if norm > Q_NORM_BOUND {
        let scaled: Vec<f64> = theta.iter().map(|t| t * Q_NORM_BOUND / norm).collect();
        q = QMatrix::from_params_unbounded(d, &scaled)?;
        theta = scaled;
        projected = true;
        flags.push(format!(
            "‖q̂‖ = {norm:.4} projected onto the admissible ball"
        ));
    }

    let kernel = green_kernel(&q, torus)?;
    let derivs = kernel_derivatives(&kernel, torus, &fft);
    let residuals = est
        .rows
        .iter()
        .map(|r| {
            let off = offset(&r.a, &r.b);
            let model = grad_grad_from_values(torus, &kernel.values, &off, r.i, r.j);
            let g: Vec<f64> = derivs
                .iter()
                .map(|dv| grad_grad_from_values(torus, dv, &off, r.i, r.j))
                .collect();
            let mut var_fit = 0.0;
            for p in 0..n_params {
                for s in 0..n_params {
                    var_fit += g[p] * inv[(p, s)] * g[s];
                }
            }
            let measured = beta * r.estimate;
            ResidualRow {
                a: r.a.clone(),
                b: r.b.clone(),
                i: r.i,
                j: r.j,
                separation: r.separation,
                measured,
                model,
                residual: measured - model,
                se: ((beta * r.se).powi(2) + var_fit.max(0.0)).sqrt(),
            }
        })
        .collect();
    Ok(FitResult {
        q,
        params: theta,
        param_se,
        chi2,
        dof: rows.len() - n_params,
        iterations,
        projected,
        residuals,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::estimate::{window_pairs, CovRow};
    use crate::lattice::{make_torus, Norm};
    use crate::rng::stream_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn synthetic(
        torus: &Torus,
        q: &QMatrix,
        beta: f64,
        rel: f64,
        noise_seed: Option<u64>,
    ) -> CovEstimate {
        let k = green_kernel(q, torus).unwrap();
        let mut rng = stream_rng(noise_seed.unwrap_or(0), 0);
        let rows = window_pairs(torus, 1.0, 9.0)
            .into_iter()
            .map(|p| {
                let v = k.grad_grad_cov(&p.a, &p.b, p.i, p.j) / beta;
                let se = rel * v.abs() + 1e-6 / beta;
                let noise: f64 = if noise_seed.is_some() {
                    StandardNormal.sample(&mut rng)
                } else {
                    0.0
                };
                CovRow {
                    separation: torus.periodic_dist(&p.a, &p.b, Norm::Euclid),
                    offset: p.b.0.clone(),
                    a: p.a,
                    b: p.b,
                    i: p.i,
                    j: p.j,
                    estimate: v + noise * se,
                    se,
                    samples: 1,
                    tau: 0.5,
                }
            })
            .collect();
        CovEstimate {
            rows,
            batches: 50,
            samples_per_chain: 1,
            flags: vec![],
        }
    }

    #[test]
    fn recovers_planted_q() {
        let t = make_torus(2, 3, 3).unwrap();
        let q_star = QMatrix::scaled_identity(2, 0.1).unwrap();
        let est = synthetic(&t, &q_star, 25.0, 0.01, None);
        let fit = fit_q(&est, &t, 25.0, (2.0, 9.0)).unwrap();
        for (p, (v, se)) in fit.params.iter().zip(&fit.param_se).enumerate() {
            let want = q_star.to_params()[p];
            assert!(
                (v - want).abs() <= 2.0 * se,
                "param {p}: {v} vs {want} ± {se}"
            );
            assert!((v - want).abs() < 1e-8);
        }
        assert!(fit.residuals.iter().all(|r| r.residual.abs() < 1e-8));
        assert!(!fit.projected && fit.flags.is_empty());
    }

    #[test]
    fn noisy_recovery_within_errors() {
        let t = make_torus(2, 3, 3).unwrap();
        let q_star = QMatrix::new(2, vec![0.1, 0.03, 0.03, -0.05]).unwrap();
        let est = synthetic(&t, &q_star, 1.0, 0.05, Some(3));
        let fit = fit_q(&est, &t, 1.0, (2.0, 9.0)).unwrap();
        for (p, (v, se)) in fit.params.iter().zip(&fit.param_se).enumerate() {
            assert!((v - q_star.to_params()[p]).abs() <= 3.0 * se);
        }
        let red = fit.chi2 / fit.dof as f64;
        assert!((0.7..1.3).contains(&red), "{red}");
    }

    #[test]
    fn gaussian_data_gives_zero_q() {
        let t = make_torus(2, 3, 3).unwrap();
        let est = synthetic(&t, &QMatrix::zero(2), 2.0, 0.05, Some(8));
        let fit = fit_q(&est, &t, 2.0, (2.0, 9.0)).unwrap();
        assert!(fit
            .params
            .iter()
            .zip(&fit.param_se)
            .all(|(v, se)| v.abs() <= 3.0 * se));
    }

    #[test]
    fn empty_window_is_singular() {
        let t = make_torus(2, 3, 2).unwrap();
        let est = synthetic(&t, &QMatrix::zero(2), 1.0, 0.05, None);
        assert!(matches!(
            fit_q(&est, &t, 1.0, (50.0, 60.0)),
            Err(Error::Singular(_))
        ));
    }
}
