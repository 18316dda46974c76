//! Polynomials in first gradients and their exact Gaussian moments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gff::CovKernel;
use crate::lattice::{Field, LatticePoint, Torus};
use crate::polymers::Functional;

/// Largest total degree for which Gaussian moments are expanded.
pub const MAX_POLY_DEGREE: usize = 8;

/// The variable `∇_dir φ(site)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GradVar {
    pub site: LatticePoint,
    pub dir: usize,
}

impl GradVar {
    pub fn new(torus: &Torus, site: &LatticePoint, dir: usize) -> Self {
        Self {
            site: torus.canonicalize(site),
            dir,
        }
    }

    pub fn eval(&self, torus: &Torus, phi: &Field) -> f64 {
        let x = torus.index(&self.site);
        phi.values[torus.shift(x, self.dir, 1)] - phi.values[x]
    }
}

/// `Σ c_m Π_{v ∈ m} v` over multisets `m` of gradient variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalPolynomial {
    pub torus: Torus,
    terms: BTreeMap<Vec<GradVar>, f64>,
}

impl LocalPolynomial {
    pub fn zero(torus: Torus) -> Self {
        Self {
            torus,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(torus: Torus, c: f64) -> Self {
        let mut p = Self::zero(torus);
        p.add_term(vec![], c);
        p
    }

    /// `c · ∇_dir φ(site)`.
    pub fn linear(torus: Torus, site: &LatticePoint, dir: usize, c: f64) -> Self {
        let mut p = Self::zero(torus);
        p.add_term(vec![GradVar::new(&torus, site, dir)], c);
        p
    }

    /// `c · (∇_dir φ(site))^power`.
    pub fn power(torus: Torus, site: &LatticePoint, dir: usize, power: usize, c: f64) -> Self {
        let mut p = Self::zero(torus);
        p.add_term(vec![GradVar::new(&torus, site, dir); power], c);
        p
    }

    pub fn add_term(&mut self, mut vars: Vec<GradVar>, c: f64) {
        if c == 0.0 {
            return;
        }
        for v in &mut vars {
            v.site = self.torus.canonicalize(&v.site);
        }
        vars.sort();
        let e = self.terms.entry(vars.clone()).or_insert(0.0);
        *e += c;
        if *e == 0.0 {
            self.terms.remove(&vars);
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[GradVar], f64)> {
        self.terms.iter().map(|(k, v)| (k.as_slice(), *v))
    }

    pub fn degree(&self) -> usize {
        self.terms.keys().map(Vec::len).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Value at `φ = 0`.
    pub fn constant_term(&self) -> f64 {
        self.terms.get(&Vec::new()).copied().unwrap_or(0.0)
    }

    pub fn add(&self, other: &LocalPolynomial) -> LocalPolynomial {
        let mut out = self.clone();
        for (k, v) in &other.terms {
            out.add_term(k.clone(), *v);
        }
        out
    }

    pub fn scaled(&self, c: f64) -> LocalPolynomial {
        let mut out = Self::zero(self.torus);
        for (k, v) in &self.terms {
            out.add_term(k.clone(), v * c);
        }
        out
    }

    pub fn mul(&self, other: &LocalPolynomial) -> LocalPolynomial {
        let mut out = Self::zero(self.torus);
        for (ka, va) in &self.terms {
            for (kb, vb) in &other.terms {
                let mut k = ka.clone();
                k.extend(kb.iter().cloned());
                out.add_term(k, va * vb);
            }
        }
        out
    }

    pub fn eval(&self, phi: &Field) -> f64 {
        let mut cache: BTreeMap<&GradVar, f64> = BTreeMap::new();
        let mut acc = 0.0;
        for (k, c) in &self.terms {
            let mut m = *c;
            for v in k {
                m *= *cache.entry(v).or_insert_with(|| v.eval(&self.torus, phi));
            }
            acc += m;
        }
        acc
    }

    /// Directional derivative along a field whose gradients are `weight(v)` at each variable.
    pub fn directional(&self, weight: impl Fn(&GradVar) -> f64) -> LocalPolynomial {
        let mut out = Self::zero(self.torus);
        for (k, c) in &self.terms {
            for p in 0..k.len() {
                let w = weight(&k[p]);
                if w != 0.0 {
                    let mut rest = k.clone();
                    rest.remove(p);
                    out.add_term(rest, c * w);
                }
            }
        }
        out
    }

    /// Coefficients of the degree-one terms.
    pub fn linear_part(&self) -> Vec<(GradVar, f64)> {
        self.terms
            .iter()
            .filter(|(k, _)| k.len() == 1)
            .map(|(k, v)| (k[0].clone(), *v))
            .collect()
    }

    /// `φ ↦ E[P(φ + ξ)]` for `ξ` centred Gaussian with covariance `kernel`.
    pub fn gaussian_convolve(&self, kernel: &CovKernel) -> Result<LocalPolynomial> {
        if kernel.torus != self.torus {
            return Err(Error::InvalidArgument(
                "kernel lives on another torus".into(),
            ));
        }
        if self.degree() > MAX_POLY_DEGREE {
            return Err(Error::InvalidArgument(format!(
                "degree {} above {MAX_POLY_DEGREE}",
                self.degree()
            )));
        }
        let mut out = Self::zero(self.torus);
        for (k, c) in &self.terms {
            let n = k.len();
            let cov = covariance_matrix(kernel, k);
            for mask in 0usize..1 << n {
                if mask.count_ones() % 2 == 1 {
                    continue;
                }
                let inside: Vec<usize> = (0..n).filter(|p| mask >> p & 1 == 1).collect();
                let m = isserlis(&cov, n, &inside);
                if m == 0.0 {
                    continue;
                }
                let rest: Vec<GradVar> = (0..n)
                    .filter(|p| mask >> p & 1 == 0)
                    .map(|p| k[p].clone())
                    .collect();
                out.add_term(rest, c * m);
            }
        }
        Ok(out)
    }

    /// `E[P(ξ)]`.
    pub fn gaussian_expectation(&self, kernel: &CovKernel) -> Result<f64> {
        Ok(self.gaussian_convolve(kernel)?.constant_term())
    }

    /// Wrap as a plain evaluation oracle.
    pub fn to_functional(&self) -> Functional {
        let p = self.clone();
        std::sync::Arc::new(move |phi: &Field| p.eval(phi))
    }
}

fn covariance_matrix(kernel: &CovKernel, vars: &[GradVar]) -> Vec<f64> {
    let n = vars.len();
    let mut cov = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let c = kernel.grad_grad_cov(&vars[i].site, &vars[j].site, vars[i].dir, vars[j].dir);
            cov[i * n + j] = c;
            cov[j * n + i] = c;
        }
    }
    cov
}

/// `E[Π_{p ∈ idx} X_p]` for a centred Gaussian vector, by pairings.
fn isserlis(cov: &[f64], n: usize, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 1.0;
    }
    if idx.len() % 2 == 1 {
        return 0.0;
    }
    let first = idx[0];
    let mut acc = 0.0;
    for k in 1..idx.len() {
        let c = cov[first * n + idx[k]];
        if c == 0.0 {
            continue;
        }
        let rest: Vec<usize> = idx[1..]
            .iter()
            .enumerate()
            .filter(|(p, _)| p + 1 != k)
            .map(|(_, v)| *v)
            .collect();
        acc += c * isserlis(cov, n, &rest);
    }
    acc
}

/// A block functional: an exact polynomial or a black-box oracle.
#[derive(Clone)]
pub enum BlockFunctional {
    Polynomial(LocalPolynomial),
    Oracle(Functional),
}

impl std::fmt::Debug for BlockFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Polynomial(p) => f.debug_tuple("Polynomial").field(p).finish(),
            Self::Oracle(_) => f.write_str("Oracle(..)"),
        }
    }
}

impl BlockFunctional {
    pub fn eval(&self, phi: &Field) -> f64 {
        match self {
            Self::Polynomial(p) => p.eval(phi),
            Self::Oracle(f) => f(phi),
        }
    }
}

impl From<LocalPolynomial> for BlockFunctional {
    fn from(p: LocalPolynomial) -> Self {
        Self::Polynomial(p)
    }
}

/// Offset `x - origin` taken through the image of `x` nearest to `center`.
pub(crate) fn local_offset(
    torus: &Torus,
    x: &LatticePoint,
    center: &LatticePoint,
    origin: &LatticePoint,
) -> Vec<i64> {
    (0..torus.d())
        .map(|i| torus.canonical(x.0[i] - center.0[i]) + center.0[i] - origin.0[i])
        .collect()
}

/// Field `z ↦ g(z - origin)` with offsets measured through the image nearest to `center`.
pub(crate) fn local_field(
    torus: &Torus,
    center: &LatticePoint,
    origin: &LatticePoint,
    g: impl Fn(&[i64]) -> f64,
) -> Field {
    Field::from_fn(*torus, |x| g(&local_offset(torus, x, center, origin)))
}

/// Richardson-extrapolated central difference of `t ↦ f(t)` at 0.
pub(crate) fn richardson_first(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gff::{green_kernel, QMatrix};
    use crate::lattice::make_torus;
    use crate::rng::stream_rng;

    fn setup() -> (Torus, CovKernel) {
        let t = make_torus(2, 3, 2).unwrap();
        let k = green_kernel(&QMatrix::zero(2), &t).unwrap();
        (t, k)
    }

    #[test]
    fn fourth_moment_is_three_variances_squared() {
        let (t, k) = setup();
        let a = LatticePoint(vec![1, 2]);
        let p = LocalPolynomial::power(t, &a, 0, 4, 1.0);
        let var = k.grad_grad_cov(&a, &a, 0, 0);
        assert!((p.gaussian_expectation(&k).unwrap() - 3.0 * var * var).abs() < 1e-14);
        assert_eq!(
            LocalPolynomial::power(t, &a, 1, 3, 1.0)
                .gaussian_expectation(&k)
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn convolution_matches_monte_carlo() {
        let (t, k) = setup();
        let a = LatticePoint(vec![0, 0]);
        let b = LatticePoint(vec![2, 1]);
        let p = LocalPolynomial::linear(t, &a, 0, 1.0)
            .mul(&LocalPolynomial::linear(t, &b, 1, 1.0))
            .add(&LocalPolynomial::power(t, &a, 1, 2, 0.5));
        let exact = p.gaussian_expectation(&k).unwrap();
        let mut rng = stream_rng(4, 0);
        let n = 40_000;
        let mut mv = crate::stats::MeanVar::default();
        for _ in 0..n {
            mv.push(p.eval(&k.sample(&mut rng)));
        }
        assert!((mv.mean() - exact).abs() < 4.0 * mv.standard_error());
    }

    #[test]
    fn directional_derivative_of_cube() {
        let (t, _) = setup();
        let a = LatticePoint(vec![1, 1]);
        let p = LocalPolynomial::power(t, &a, 0, 3, 2.0);
        let d = p.directional(|v| if v.dir == 0 { 1.0 } else { 0.0 });
        assert_eq!(d, LocalPolynomial::power(t, &a, 0, 2, 6.0));
    }

    #[test]
    fn evaluation_uses_forward_differences() {
        let (t, _) = setup();
        let phi = Field::from_fn(t, |x| (x.0[0] * x.0[0]) as f64);
        let p = LocalPolynomial::linear(t, &LatticePoint(vec![2, 0]), 0, 1.0);
        assert_eq!(p.eval(&phi), 9.0 - 4.0);
    }

    #[test]
    fn cancelling_terms_are_removed() {
        let (t, _) = setup();
        let a = LatticePoint(vec![0, 0]);
        let p =
            LocalPolynomial::linear(t, &a, 0, 1.0).add(&LocalPolynomial::linear(t, &a, 0, -1.0));
        assert!(p.is_zero());
    }
}
