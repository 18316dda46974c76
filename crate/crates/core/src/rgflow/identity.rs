//! Exact second-order Gaussian identity and the single-observable decay check.

use serde::{Deserialize, Serialize};

use super::poly::{GradVar, LocalPolynomial};
use crate::error::{Error, Result};
use crate::gff::{gaussian_pair_moment, CovKernel};
use crate::lattice::LatticePoint;
use crate::stats::ols_slope;

/// Output of [`second_order_identity_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    /// Constant coefficient of the `st`-part.
    pub st_part: f64,
    /// `n_aᵀ ∇∇C(a, b) n_b`.
    pub expected: f64,
    /// `|st_part - expected|` plus the size of any field-dependent coefficients.
    pub residual: f64,
}

fn observable(kernel: &CovKernel, n: &[f64], x: &LatticePoint) -> LocalPolynomial {
    let mut p = LocalPolynomial::zero(kernel.torus);
    for (i, &c) in n.iter().enumerate() {
        p.add_term(vec![GradVar::new(&kernel.torus, x, i)], c);
    }
    p
}

/// `𝓡H + ½𝓡(H²) - ½(𝓡H)²` for `H = s·ℓ_a + t·ℓ_b`.
fn second_order(
    kernel: &CovKernel,
    la: &LocalPolynomial,
    lb: &LocalPolynomial,
    s: f64,
    t: f64,
) -> Result<LocalPolynomial> {
    let h = la.scaled(s).add(&lb.scaled(t));
    let rh = h.gaussian_convolve(kernel)?;
    let rh2 = h.mul(&h).gaussian_convolve(kernel)?;
    Ok(rh.add(&rh2.scaled(0.5)).add(&rh.mul(&rh).scaled(-0.5)))
}

/// Compare the `st`-part of the second-order expansion with the Gaussian pair moment.
///
/// The `st`-part is extracted by polarisation over `s, t ∈ {0, 1}` on exact
/// polynomial Gaussian integrals, so it is a polynomial in `φ` that must reduce
/// to the constant `n_aᵀ ∇∇C(a, b) n_b`.
pub fn second_order_identity_check(
    n_a: &[f64],
    a: &LatticePoint,
    n_b: &[f64],
    b: &LatticePoint,
    kernel: &CovKernel,
) -> Result<IdentityCheck> {
    let d = kernel.d();
    if n_a.len() != d || n_b.len() != d {
        return Err(Error::LengthMismatch {
            expected: d,
            got: n_a.len().min(n_b.len()),
        });
    }
    let la = observable(kernel, n_a, a);
    let lb = observable(kernel, n_b, b);
    let st = second_order(kernel, &la, &lb, 1.0, 1.0)?
        .add(&second_order(kernel, &la, &lb, 1.0, 0.0)?.scaled(-1.0))
        .add(&second_order(kernel, &la, &lb, 0.0, 1.0)?.scaled(-1.0))
        .add(&second_order(kernel, &la, &lb, 0.0, 0.0)?);
    let st_part = st.constant_term();
    let stray: f64 = st
        .terms()
        .filter(|(k, _)| !k.is_empty())
        .map(|(_, c)| c.abs())
        .sum();
    let expected = gaussian_pair_moment(n_a, a, n_b, b, kernel);
    Ok(IdentityCheck {
        st_part,
        expected,
        residual: (st_part - expected).abs() + stray,
    })
}

/// Output of [`single_observable_decay_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCheck {
    /// `|Σ_{l ≥ m} c1_l|` for `m = 0..=len`.
    pub tails: Vec<f64>,
    /// Smallest `C` with `tail_m ≤ C η^m` for every `m`.
    pub constant: f64,
    /// `exp` of the log-linear slope of `|c1_l|`; `None` with fewer than two nonzero terms.
    pub fitted_rate: Option<f64>,
    /// Tails never increase.
    pub stabilised: bool,
    pub passed: bool,
}

/// Geometric control of the partial sums of a single observable's linear coefficients.
pub fn single_observable_decay_check(seq_c1: &[Vec<f64>], eta: f64) -> Result<DecayCheck> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "η = {eta} must lie in (0, 1)"
        )));
    }
    let d = seq_c1.first().map_or(0, Vec::len);
    if let Some(bad) = seq_c1.iter().find(|v| v.len() != d) {
        return Err(Error::LengthMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let n = seq_c1.len();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tails: Vec<f64> = (0..=n)
        .map(|m| {
            let t: Vec<f64> = (0..d)
                .map(|i| seq_c1[m..].iter().map(|v| v[i]).sum())
                .collect();
            norm(&t)
        })
        .collect();
    let constant = tails
        .iter()
        .enumerate()
        .map(|(m, t)| t / eta.powi(m as i32))
        .fold(0.0, f64::max);
    let (x, y): (Vec<f64>, Vec<f64>) = seq_c1
        .iter()
        .enumerate()
        .filter_map(|(l, v)| {
            let a = norm(v);
            (a > 0.0).then(|| (l as f64, a.ln()))
        })
        .unzip();
    let fitted_rate = (x.len() >= 2).then(|| ols_slope(&x, &y).exp());
    let scale = tails.iter().cloned().fold(0.0, f64::max);
    let stabilised = tails.windows(2).all(|w| w[1] <= w[0] + 1e-12 * scale);
    Ok(DecayCheck {
        tails,
        constant,
        fitted_rate,
        stabilised,
        passed: stabilised && constant.is_finite(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frd::build_frd;
    use crate::gff::{green_kernel, QMatrix};
    use crate::lattice::make_torus;
    use crate::rgflow::{apply_b, BlockFunctional, McOptions};
    use crate::rng::stream_rng;
    use rand::Rng;

    #[test]
    fn identity_holds_on_random_triples() {
        let t = make_torus(2, 3, 3).unwrap();
        let stack = build_frd(
            &green_kernel(&QMatrix::scaled_identity(2, 0.1).unwrap(), &t).unwrap(),
            &t,
        )
        .unwrap();
        let mut rng = stream_rng(21, 0);
        for _ in 0..30 {
            let na: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let nb: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = LatticePoint(vec![rng.random_range(-13..=13), rng.random_range(-13..=13)]);
            let b = LatticePoint(vec![rng.random_range(-13..=13), rng.random_range(-13..=13)]);
            let k = rng.random_range(1..=3u32);
            let c = second_order_identity_check(&na, &a, &nb, &b, &stack.layer(k).kernel).unwrap();
            assert!(c.residual <= 1e-12, "{c:?}");
        }
    }

    #[test]
    fn short_range_layer_gives_zero_on_both_sides() {
        let t = make_torus(2, 3, 3).unwrap();
        let stack = build_frd(&green_kernel(&QMatrix::zero(2), &t).unwrap(), &t).unwrap();
        let a = LatticePoint(vec![0, 0]);
        let b = LatticePoint(vec![9, 0]);
        let c =
            second_order_identity_check(&[1.0, 0.5], &a, &[0.3, 1.0], &b, &stack.layer(1).kernel)
                .unwrap();
        assert!(c.st_part.abs() < 1e-12 && c.expected.abs() < 1e-12);
    }

    #[test]
    fn absent_observable_is_trivial() {
        let t = make_torus(2, 3, 2).unwrap();
        let k = green_kernel(&QMatrix::zero(2), &t).unwrap();
        let c = second_order_identity_check(
            &[0.0, 0.0],
            &LatticePoint(vec![0, 0]),
            &[1.0, 0.0],
            &LatticePoint(vec![1, 0]),
            &k,
        )
        .unwrap();
        assert_eq!((c.st_part, c.expected, c.residual), (0.0, 0.0, 0.0));
    }

    #[test]
    fn planted_geometric_tail() {
        let eta: f64 = 0.2;
        let v = [0.7, -0.4];
        let seq: Vec<Vec<f64>> = (0..40)
            .map(|l| v.iter().map(|x| -(1.0 - eta) * eta.powi(l) * x).collect())
            .collect();
        let c = single_observable_decay_check(&seq, eta).unwrap();
        let nv = (0.7f64 * 0.7 + 0.4 * 0.4).sqrt();
        for m in 0..10 {
            assert!((c.tails[m] - eta.powi(m as i32) * nv).abs() < 1e-12);
        }
        assert!((c.fitted_rate.unwrap() - eta).abs() < 1e-12);
        assert!(c.passed && (c.constant - nv).abs() < 1e-9);
    }

    #[test]
    fn zero_sequence_passes_with_zero_constant() {
        let c = single_observable_decay_check(&vec![vec![0.0; 2]; 5], 0.2).unwrap();
        assert!(c.passed && c.constant == 0.0 && c.fitted_rate.is_none());
    }

    #[test]
    fn cubic_block_terms_across_the_stack() {
        let t = make_torus(2, 3, 4).unwrap();
        let stack = build_frd(&green_kernel(&QMatrix::zero(2), &t).unwrap(), &t).unwrap();
        let a = LatticePoint(vec![0, 0]);
        let f = BlockFunctional::Polynomial(LocalPolynomial::power(t, &a, 0, 3, 1.0));
        let mut rng = stream_rng(0, 0);
        let seq: Vec<Vec<f64>> = (0..4u32)
            .map(|l| {
                apply_b(
                    &f,
                    stack.layer(l + 1),
                    &a,
                    l,
                    4,
                    &McOptions::default(),
                    &mut rng,
                )
                .unwrap()
                .c1
            })
            .collect();
        let c = single_observable_decay_check(&seq, 0.2).unwrap();
        assert!(c.constant.is_finite() && c.fitted_rate.unwrap() > 0.0);
    }
}
