//! Scale-by-scale coupling recursions for a pair of gradient observables.
//!
//! Functionals are kept thin: the recursions only consume the constant and
//! linear coefficients of Gaussian-integrated block terms, so a block term is
//! either a polynomial in first gradients (integrated exactly by Wick pairings)
//! or an evaluation oracle (integrated by Monte Carlo). The bookkeeping tracks
//! `λ^a, λ^b`, the linear couplings `n^a, n^b` and the pair coupling `q^{ab}`,
//! whose value at the last scale is the covariance of the two observables.

mod flow;
mod identity;
mod poly;
mod projection;

pub use flow::{
    apply_b, couple_flow, BOutput, FlowInputs, FlowResult, McOptions, ObservableCouplings,
};
pub use identity::{
    second_order_identity_check, single_observable_decay_check, DecayCheck, IdentityCheck,
};
pub use poly::{BlockFunctional, GradVar, LocalPolynomial, MAX_POLY_DEGREE};
pub use projection::{
    linear_indices, project_obs, project_pi2, quadratic_pairs, shifted_binomial, Pi2Projection,
    RelevantHamiltonian,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cap reported for `ν` when `η` is so small that `-ln(4η)/ln L` is meaningless.
pub const NU_CAP: f64 = 100.0;

/// Constants of the flow bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowBoundParams {
    /// Contraction per scale, `0 < η < 1/4`.
    pub eta: f64,
    pub rho0: f64,
    /// Integration constant `A_𝓑 ≥ 1`.
    pub a_b: f64,
    pub h: f64,
    pub l: usize,
    pub d: usize,
    pub n: u32,
}

impl FlowBoundParams {
    /// Defaults `ρ₀ = 0.1`, `A_𝓑 = 2`, `h = 1`, `η = 0.2`.
    pub fn new(l: usize, d: usize, n: u32) -> Self {
        Self {
            eta: 0.2,
            rho0: 0.1,
            a_b: 2.0,
            h: 1.0,
            l,
            d,
            n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 0.25) {
            return Err(Error::InvalidArgument(format!(
                "η = {} must lie in (0, 1/4)",
                self.eta
            )));
        }
        if !(self.rho0 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ρ₀ = {} must be positive",
                self.rho0
            )));
        }
        if !(self.a_b >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "A_B = {} must be at least 1",
                self.a_b
            )));
        }
        if !(self.h >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "h = {} must be at least 1",
                self.h
            )));
        }
        if self.l < 2 || self.d == 0 {
            return Err(Error::InvalidArgument("need L ≥ 2 and d ≥ 1".into()));
        }
        Ok(())
    }

    /// `g_k = η^k`.
    pub fn g(&self, k: u32) -> f64 {
        self.eta.powi(k as i32)
    }

    /// `h_k = 2^k h`.
    pub fn h_k(&self, k: u32) -> f64 {
        2f64.powi(k as i32) * self.h
    }

    /// `l_k = L^{-dk/2} h_k`.
    pub fn l_k(&self, k: u32) -> f64 {
        (self.l as f64).powf(-(self.d as f64) * k as f64 / 2.0) * self.h_k(k)
    }
}

/// `l_{obs,k} = ρ₀ g_k 2^{-k} 4^{(k - j_ab)_+} L^{(d/2)(k ∧ j_ab)}`.
pub fn obs_weight(k: u32, j_ab: u32, params: &FlowBoundParams) -> f64 {
    let excess = k.saturating_sub(j_ab) as i32;
    let low = k.min(j_ab) as f64;
    params.rho0
        * params.g(k)
        * 2f64.powi(-(k as i32))
        * 4f64.powi(excess)
        * (params.l as f64).powf(params.d as f64 / 2.0 * low)
}

/// Output of [`remainder_bound`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemainderBound {
    pub bound: f64,
    pub nu: f64,
    pub nu_capped: bool,
    /// `C` in `bound ≤ C (2|a - b|)^{-(d+ν)}`.
    pub distance_constant: f64,
}

/// `(A_𝓑/2) ρ₀^{-1} L^{-d j_ab} (4η)^{j_ab} · 16/15` and `ν = -ln(4η)/ln L`.
pub fn remainder_bound(params: &FlowBoundParams, j_ab: u32) -> Result<RemainderBound> {
    params.validate()?;
    let l = params.l as f64;
    let d = params.d as f64;
    let prefactor = params.a_b / 2.0 / params.rho0 * 16.0 / 15.0;
    let bound = prefactor * l.powf(-d * j_ab as f64) * (4.0 * params.eta).powi(j_ab as i32);
    let raw_nu = -(4.0 * params.eta).ln() / l.ln();
    let nu_capped = !(raw_nu <= NU_CAP);
    let nu = raw_nu.min(NU_CAP);
    // L^{j} ≤ 2r < L^{j+1} turns L^{-j(d+ν)} into at most L^{d+ν} (2r)^{-(d+ν)}.
    let distance_constant = prefactor * l.powf(d + nu);
    Ok(RemainderBound {
        bound,
        nu,
        nu_capped,
        distance_constant,
    })
}

/// [`remainder_bound`] at the coalescence scale of a separation `r`.
pub fn remainder_bound_at_distance(params: &FlowBoundParams, r: f64) -> Result<RemainderBound> {
    if !(r >= 0.5) {
        return Err(Error::InvalidArgument(format!(
            "separation {r} must be at least 1/2"
        )));
    }
    let j = ((2.0 * r).ln() / (params.l as f64).ln() + 1e-12)
        .floor()
        .max(0.0) as u32;
    remainder_bound(params, j)
}
