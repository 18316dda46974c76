//! The tilted Gibbs measure for the gradient model.
//!
//! Two samplers are provided. The brute-force oracle draws exact Gaussian
//! fields from the unit-temperature reference measure and reweights them by the
//! Mayer product; it is only feasible on tiny tori. The Markov chain samples
//! `exp(-β H)` directly with heat-bath proposals and a Metropolis correction
//! for the perturbation. Covariance estimates from either route are on the
//! unrescaled field, so the Gaussian answer is `(1/β) ∇∇C⁰`.

mod brute;
mod decay;
mod estimate;
mod fit;
mod mcmc;

pub use brute::{
    brute_force_cov, brute_force_z, product_weight, subset_sum_weight, BruteCov, BruteZ,
    WeightDiagnostics, MAX_BRUTE_VOLUME, NEGATIVE_WEIGHT_LIMIT,
};
pub use decay::{decay_report, DecayPoint, DecayReport, DecayStatus};
pub use estimate::{
    estimate_grad_cov, window_pairs, CovEstimate, CovRow, GradCovAccumulator, PairSpec, MIN_BATCHES,
};
pub use fit::{fit_q, FitResult, ResidualRow};
pub use mcmc::{mcmc_sample, run_mcmc, McmcParams, McmcRun};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LatticePoint, Torus};
use crate::perturbation::PotentialSpec;

/// Observable pair `(∇_{m_a} φ(a), ∇_{m_b} φ(b))` with 0-based directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservablePair {
    pub a: LatticePoint,
    pub m_a: usize,
    pub b: LatticePoint,
    pub m_b: usize,
}

/// Geometry, potential, tilt and inverse temperature of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub torus: Torus,
    pub potential: PotentialSpec,
    pub u: Vec<f64>,
    pub beta: f64,
    pub pair: Option<ObservablePair>,
}

impl ModelSpec {
    pub fn new(torus: Torus, potential: PotentialSpec, u: Vec<f64>, beta: f64) -> Result<Self> {
        let m = Self {
            torus,
            potential,
            u,
            beta,
            pair: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_pair(mut self, pair: ObservablePair) -> Result<Self> {
        self.pair = Some(pair);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.torus.d();
        if self.u.len() != d {
            return Err(Error::LengthMismatch {
                expected: d,
                got: self.u.len(),
            });
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "β = {} must be positive",
                self.beta
            )));
        }
        if let Some(p) = &self.pair {
            if p.m_a >= d || p.m_b >= d {
                return Err(Error::InvalidArgument(
                    "observable direction out of range".into(),
                ));
            }
            if p.a.dim() != d || p.b.dim() != d {
                return Err(Error::InvalidArgument(
                    "observable point has wrong dimension".into(),
                ));
            }
            if self.torus.canonicalize(&p.a) == self.torus.canonicalize(&p.b) {
                return Err(Error::InvalidArgument(
                    "observable points must differ".into(),
                ));
            }
        }
        Ok(())
    }

    /// `H(φ) = Σ_x Σ_i W(∇_i φ(x) + u_i)`.
    pub fn energy(&self, values: &[f64]) -> f64 {
        let t = &self.torus;
        let mut h = 0.0;
        for x in 0..t.volume() {
            for i in 0..t.d() {
                let g = values[t.shift(x, i, 1)] - values[x] + self.u[i];
                h += self.potential.w(g);
            }
        }
        h
    }
}
