//! Gaussian integration of block terms and the coupling recursions.

use serde::{Deserialize, Serialize};

use super::poly::{local_field, BlockFunctional};
use super::{obs_weight, FlowBoundParams};
use crate::error::{Error, Result};
use crate::fourier::NdFft;
use crate::frd::{FrdLayer, FrdStack};
use crate::gff::{bilinear, gaussian_pair_moment};
use crate::gibbs::ObservablePair;
use crate::lattice::LatticePoint;
use crate::polymers::coalescence_scale;
use crate::rng::Rng;
use crate::stats::MeanVar;

const MC_STEP: f64 = 1e-4;

/// Monte Carlo settings for oracle block terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    pub samples: usize,
    /// Largest acceptable standard error before the output is flagged.
    pub tolerance: f64,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            samples: 10_000,
            tolerance: 1e-2,
        }
    }
}

/// Constant and linear coefficients of a Gaussian-integrated block term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BOutput {
    pub c0: f64,
    pub c1: Vec<f64>,
    pub c0_se: f64,
    pub c1_se: Vec<f64>,
    /// Computed from exact Gaussian moments.
    pub exact: bool,
    pub flags: Vec<String>,
}

/// `c0 = E[K(ξ)]` and `c1_i = E[D K(ξ) · b^α_{e_i}]` with `ξ` distributed by `layer`.
///
/// `c1` vanishes from the coalescence scale on.
pub fn apply_b(
    func: &BlockFunctional,
    layer: &FrdLayer,
    alpha: &LatticePoint,
    k: u32,
    j_ab: u32,
    mc: &McOptions,
    rng: &mut Rng,
) -> Result<BOutput> {
    let kernel = &layer.kernel;
    let torus = kernel.torus;
    let d = torus.d();
    let scale = kernel
        .spectrum
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    let min = kernel.min_spectrum();
    if min < -1e-12 * scale {
        return Err(Error::LayerNotPositive { k: layer.k, min });
    }
    let linear = k < j_ab;
    match func {
        BlockFunctional::Polynomial(p) => {
            let c0 = p.gaussian_expectation(kernel)?;
            let mut c1 = vec![0.0; d];
            if linear {
                for (i, c) in c1.iter_mut().enumerate() {
                    *c = p
                        .directional(|v| (v.dir == i) as u8 as f64)
                        .gaussian_expectation(kernel)?;
                }
            }
            Ok(BOutput {
                c0,
                c1,
                c0_se: 0.0,
                c1_se: vec![0.0; d],
                exact: true,
                flags: vec![],
            })
        }
        BlockFunctional::Oracle(f) => {
            if mc.samples < 2 {
                return Err(Error::InvalidArgument(
                    "Monte Carlo needs at least two samples".into(),
                ));
            }
            let fft = NdFft::new(torus);
            let dirs: Vec<_> = (0..d)
                .map(|i| local_field(&torus, alpha, alpha, |z| z[i] as f64))
                .collect();
            let mut m0 = MeanVar::default();
            let mut m1 = MeanVar::vec(d);
            for _ in 0..mc.samples {
                let xi = kernel.sample_with(&fft, rng);
                m0.push(f(&xi));
                if linear {
                    for (dir, acc) in dirs.iter().zip(m1.iter_mut()) {
                        let h = MC_STEP / (1.0 + dir.sup_norm());
                        let mut up = xi.clone();
                        up.add_scaled(h, dir);
                        let mut down = xi.clone();
                        down.add_scaled(-h, dir);
                        acc.push((f(&up) - f(&down)) / (2.0 * h));
                    }
                }
            }
            let c1: Vec<f64> = m1
                .iter()
                .map(|m| if linear { m.mean() } else { 0.0 })
                .collect();
            let c1_se: Vec<f64> = m1
                .iter()
                .map(|m| if linear { m.standard_error() } else { 0.0 })
                .collect();
            let c0_se = m0.standard_error();
            let worst = c1_se.iter().fold(c0_se, |a, &b| a.max(b));
            let mut flags = Vec::new();
            if worst > mc.tolerance {
                flags.push(format!(
                    "Monte Carlo standard error {worst:.3e} above tolerance {:.3e}",
                    mc.tolerance
                ));
            }
            Ok(BOutput {
                c0: m0.mean(),
                c1,
                c0_se,
                c1_se,
                exact: false,
                flags,
            })
        }
    }
}

/// Per-scale inputs `(𝐁K^a)⁰, (𝐁K^a)¹, (𝐁K^b)⁰, (𝐁K^b)¹, (𝐁K^{ab})⁰`, indexed by `l = 0..N-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowInputs {
    pub c0_a: Vec<f64>,
    pub c1_a: Vec<Vec<f64>>,
    pub c0_b: Vec<f64>,
    pub c1_b: Vec<Vec<f64>>,
    pub c0_ab: Vec<f64>,
}

impl FlowInputs {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            c0_a: vec![0.0; n],
            c1_a: vec![vec![0.0; d]; n],
            c0_b: vec![0.0; n],
            c1_b: vec![vec![0.0; d]; n],
            c0_ab: vec![0.0; n],
        }
    }

    fn validate(&self, n: usize, d: usize) -> Result<()> {
        for len in [
            self.c0_a.len(),
            self.c1_a.len(),
            self.c0_b.len(),
            self.c1_b.len(),
            self.c0_ab.len(),
        ] {
            if len != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    got: len,
                });
            }
        }
        for v in self.c1_a.iter().chain(&self.c1_b) {
            if v.len() != d {
                return Err(Error::LengthMismatch {
                    expected: d,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }
}

/// Couplings of the observable pair at scale `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableCouplings {
    pub k: u32,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub n_a: Vec<f64>,
    pub n_b: Vec<f64>,
    pub q_ab: f64,
}

/// Output of [`couple_flow`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowResult {
    pub j_ab: u32,
    /// Couplings at `k = 0..=N`.
    pub scales: Vec<ObservableCouplings>,
    /// `l_{obs,k}` at `k = 0..=N`.
    pub l_obs: Vec<f64>,
    /// `S^α = Σ_{k < j_ab} (𝐁K^α)¹_k`.
    pub s_a: Vec<f64>,
    pub s_b: Vec<f64>,
    /// `∇*_{m_b} ∇_{m_a} C^q(a, b)`.
    pub gaussian: f64,
    /// `(e_{m_a} + S^a)ᵀ ∇∇C^q(a, b) (e_{m_b} + S^b)`.
    pub leading: f64,
    /// `q_N^{ab}` minus the leading term.
    pub remainder: f64,
}

impl FlowResult {
    pub fn last(&self) -> &ObservableCouplings {
        self.scales.last().expect("flow has at least one scale")
    }
}

fn unit(d: usize, m: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[m] = 1.0;
    e
}

/// Sequential fold of the coupling recursions over `l = 0..N-1`.
///
/// `λ^α` sums the constants; `n^α` adds linear coefficients only below the
/// coalescence scale; `q^{ab}` collects, from the coalescence scale on, the
/// pair constants plus the Gaussian pair moment of the current linear couplings
/// under layer `l + 1`.
pub fn couple_flow(
    inputs: &FlowInputs,
    stack: &FrdStack,
    pair: &ObservablePair,
    params: &FlowBoundParams,
) -> Result<FlowResult> {
    let torus = stack.torus;
    let d = torus.d();
    let n = stack.n_layers();
    inputs.validate(n, d)?;
    if pair.m_a >= d || pair.m_b >= d {
        return Err(Error::InvalidArgument(
            "observable direction out of range".into(),
        ));
    }
    let j_ab = coalescence_scale(&pair.a, &pair.b, &torus)?.min(n as u32 - 1);

    let mut cur = ObservableCouplings {
        k: 0,
        lambda_a: 0.0,
        lambda_b: 0.0,
        n_a: unit(d, pair.m_a),
        n_b: unit(d, pair.m_b),
        q_ab: 0.0,
    };
    let mut scales = vec![cur.clone()];
    for l in 0..n {
        let mut next = cur.clone();
        next.k = l as u32 + 1;
        next.lambda_a += inputs.c0_a[l];
        next.lambda_b += inputs.c0_b[l];
        if (l as u32) < j_ab {
            for i in 0..d {
                next.n_a[i] += inputs.c1_a[l][i];
                next.n_b[i] += inputs.c1_b[l][i];
            }
        } else {
            let layer = stack.layer(l as u32 + 1);
            next.q_ab += inputs.c0_ab[l]
                + gaussian_pair_moment(&cur.n_a, &pair.a, &cur.n_b, &pair.b, &layer.kernel);
        }
        scales.push(next.clone());
        cur = next;
    }

    let sum = |c1: &[Vec<f64>]| -> Vec<f64> {
        (0..d)
            .map(|i| c1[..j_ab as usize].iter().map(|v| v[i]).sum())
            .collect()
    };
    let s_a = sum(&inputs.c1_a);
    let s_b = sum(&inputs.c1_b);
    let g = stack.source.grad_grad_matrix(&pair.a, &pair.b);
    let gaussian = g[pair.m_a * d + pair.m_b];
    let va: Vec<f64> = unit(d, pair.m_a)
        .iter()
        .zip(&s_a)
        .map(|(e, s)| e + s)
        .collect();
    let vb: Vec<f64> = unit(d, pair.m_b)
        .iter()
        .zip(&s_b)
        .map(|(e, s)| e + s)
        .collect();
    let leading = bilinear(&va, &g, &vb);
    let l_obs = (0..=n as u32)
        .map(|k| obs_weight(k, j_ab, params))
        .collect();
    Ok(FlowResult {
        j_ab,
        remainder: cur.q_ab - leading,
        scales,
        l_obs,
        s_a,
        s_b,
        gaussian,
        leading,
    })
}
