//! Exact-draw reweighting oracle on tiny tori.

use serde::{Deserialize, Serialize};

use super::ModelSpec;
use crate::error::{Error, Result};
use crate::fourier::NdFft;
use crate::gff::{green_kernel, QMatrix};
use crate::lattice::Field;
use crate::perturbation::{mayer_checked, MayerParams};
use crate::rng::stream_rng;
use crate::stats::{jackknife, MeanVar};

/// Largest volume for which the subset sum over `2^V` polymers is enumerated.
pub const MAX_BRUTE_VOLUME: usize = 16;

/// Negative-weight fraction above which the estimate is flagged.
pub const NEGATIVE_WEIGHT_LIMIT: f64 = 0.01;

const JACKKNIFE_BLOCKS: usize = 100;

/// `Π_x (1 + k_x)`.
pub fn product_weight(k: &[f64]) -> f64 {
    k.iter().map(|v| 1.0 + v).product()
}

/// `Σ_{X ⊆ Λ} Π_{x ∈ X} k_x`, enumerated over all subsets.
pub fn subset_sum_weight(k: &[f64]) -> f64 {
    let n = k.len();
    let mut prod = vec![1.0; 1 << n];
    let mut total = 1.0;
    for mask in 1usize..1 << n {
        let low = mask.trailing_zeros() as usize;
        prod[mask] = prod[mask & (mask - 1)] * k[low];
        total += prod[mask];
    }
    total
}

/// Per-site Mayer values `𝒦(∇ψ(x))` and whether any exponent was clamped.
fn site_mayer(model: &ModelSpec, params: &MayerParams, psi: &Field, out: &mut [f64]) -> bool {
    let t = &model.torus;
    let d = t.d();
    let mut z = vec![0.0; d];
    let mut clamped = false;
    for (x, o) in out.iter_mut().enumerate() {
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = psi.values[t.shift(x, i, 1)] - psi.values[x];
        }
        let (v, c) = mayer_checked(&model.potential, params, &z);
        clamped |= c;
        *o = v;
    }
    clamped
}

/// Common diagnostics of the brute-force estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    pub samples: usize,
    /// Draws on which the subset-sum and product forms were compared.
    pub identity_checked: usize,
    /// Largest relative discrepancy between the two forms.
    pub max_identity_error: f64,
    pub negative_fraction: f64,
    pub clamped: bool,
}

impl WeightDiagnostics {
    pub fn flagged(&self) -> bool {
        self.negative_fraction > NEGATIVE_WEIGHT_LIMIT
            || self.clamped
            || self.max_identity_error > 1e-12
    }
}

struct Draws {
    weights: Vec<f64>,
    fields: Vec<Field>,
    diag: WeightDiagnostics,
}

fn draw(model: &ModelSpec, n_samples: usize, seed: u64, keep_fields: bool) -> Result<Draws> {
    model.validate()?;
    let t = model.torus;
    if t.volume() > MAX_BRUTE_VOLUME {
        return Err(Error::TooLarge {
            volume: t.volume(),
            limit: MAX_BRUTE_VOLUME,
        });
    }
    if n_samples < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let kernel = green_kernel(&QMatrix::zero(t.d()), &t)?;
    let fft = NdFft::new(t);
    let params = MayerParams {
        u: model.u.clone(),
        beta: model.beta,
        zeta: 0.5,
    };
    let mut rng = stream_rng(seed, 0);
    let check_all = t.volume() <= 10;
    let mut k = vec![0.0; t.volume()];
    let mut weights = Vec::with_capacity(n_samples);
    let mut fields = Vec::new();
    let mut diag = WeightDiagnostics {
        samples: n_samples,
        identity_checked: 0,
        max_identity_error: 0.0,
        negative_fraction: 0.0,
        clamped: false,
    };
    let mut negatives = 0usize;
    for s in 0..n_samples {
        let psi = kernel.sample_with(&fft, &mut rng);
        diag.clamped |= site_mayer(model, &params, &psi, &mut k);
        let w = product_weight(&k);
        if check_all || s < 256 {
            let alt = subset_sum_weight(&k);
            let err = (alt - w).abs() / w.abs().max(1.0);
            diag.max_identity_error = diag.max_identity_error.max(err);
            diag.identity_checked += 1;
        }
        if w < 0.0 {
            negatives += 1;
        }
        weights.push(w);
        if keep_fields {
            fields.push(psi);
        }
    }
    diag.negative_fraction = negatives as f64 / n_samples as f64;
    Ok(Draws {
        weights,
        fields,
        diag,
    })
}

/// Estimate of the normalised partition function `𝒵(u, f)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BruteZ {
    pub estimate: f64,
    pub se: f64,
    pub diagnostics: WeightDiagnostics,
}

/// `E_{μ₁}[e^{(f,ψ)} Π_x (1 + 𝒦(∇ψ(x)))]` over exact draws.
pub fn brute_force_z(model: &ModelSpec, f: &Field, n_samples: usize, seed: u64) -> Result<BruteZ> {
    if f.torus != model.torus {
        return Err(Error::InvalidArgument(
            "source field lives on another torus".into(),
        ));
    }
    let draws = draw(model, n_samples, seed, true)?;
    let mut mv = MeanVar::default();
    for (w, psi) in draws.weights.iter().zip(&draws.fields) {
        mv.push(w * f.inner(psi).exp());
    }
    Ok(BruteZ {
        estimate: mv.mean(),
        se: mv.standard_error(),
        diagnostics: draws.diag,
    })
}

/// Reweighted covariance of the observable pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BruteCov {
    pub estimate: f64,
    pub se: f64,
    pub diagnostics: WeightDiagnostics,
}

/// `E_w[g_a g_b] - E_w[g_a] E_w[g_b]` with `g_α = ∇_{m_α} ψ(α) / √β` and `w = Π(1 + 𝒦)`.
pub fn brute_force_cov(model: &ModelSpec, n_samples: usize, seed: u64) -> Result<BruteCov> {
    let pair = model
        .pair
        .clone()
        .ok_or_else(|| Error::InvalidArgument("model has no observable pair".into()))?;
    let draws = draw(model, n_samples, seed, true)?;
    let t = model.torus;
    let ia = t.index(&pair.a);
    let ib = t.index(&pair.b);
    let sb = model.beta.sqrt();
    let nb = JACKKNIFE_BLOCKS.min(n_samples);
    let per = n_samples / nb;
    let mut blocks = vec![vec![0.0; 4]; nb];
    for (s, (w, psi)) in draws.weights.iter().zip(&draws.fields).enumerate() {
        let b = (s / per).min(nb - 1);
        let ga = (psi.values[t.shift(ia, pair.m_a, 1)] - psi.values[ia]) / sb;
        let gb = (psi.values[t.shift(ib, pair.m_b, 1)] - psi.values[ib]) / sb;
        let row = &mut blocks[b];
        row[0] += w;
        row[1] += w * ga;
        row[2] += w * gb;
        row[3] += w * ga * gb;
    }
    let (estimate, se) = jackknife(&blocks, |s| s[3] / s[0] - (s[1] / s[0]) * (s[2] / s[0]));
    Ok(BruteCov {
        estimate,
        se,
        diagnostics: draws.diag,
    })
}
