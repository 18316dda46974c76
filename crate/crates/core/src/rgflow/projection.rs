//! Localisation onto relevant Hamiltonians and observable couplings.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::poly::{
    local_field, local_offset, richardson_first, BlockFunctional, GradVar, LocalPolynomial,
};
use crate::error::{Error, Result};
use crate::gff::diff_stencil;
use crate::lattice::{multi_indices, Field, LatticePoint, Torus};
use crate::polymers::Block;

/// Condition number above which the linear matching system is flagged.
pub const MAX_CONDITION: f64 = 1e10;

const ORACLE_STEP: f64 = 1e-3;

/// Relevant linear indices: multi-indices with `1 ≤ |β| ≤ ⌊d/2⌋ + 1`, by order then lexicographically.
pub fn linear_indices(d: usize) -> Vec<Vec<u8>> {
    (1..=d / 2 + 1).flat_map(|o| multi_indices(d, o)).collect()
}

/// Relevant quadratic pairs `(i, j)` of first-order directions with `i ≤ j`.
pub fn quadratic_pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect()
}

fn binomial(n: i64, k: u8) -> f64 {
    let mut acc = 1.0;
    for m in 0..k as i64 {
        acc *= (n - m) as f64 / (m + 1) as f64;
    }
    acc
}

/// `b_γ(z) = Π_i binom(z_i, γ_i)` evaluated at the offset `z`.
pub fn shifted_binomial(gamma: &[u8], z: &[i64]) -> f64 {
    gamma.iter().zip(z).map(|(&g, &c)| binomial(c, g)).product()
}

fn le(beta: &[u8], gamma: &[u8]) -> bool {
    beta.iter().zip(gamma).all(|(b, g)| b <= g)
}

fn minus(gamma: &[u8], beta: &[u8]) -> Vec<u8> {
    gamma.iter().zip(beta).map(|(g, b)| g - b).collect()
}

/// `Σ_{x ∈ B} ( a_∅ + Σ_β a_β ∇^β φ(x) + Σ_{i≤j} a_ij ∇_i φ(x) ∇_j φ(x) )`.
///
/// `a_const` is per point. `a_lin` follows [`linear_indices`] and `a_quad`
/// follows [`quadratic_pairs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevantHamiltonian {
    pub d: usize,
    pub a_const: f64,
    pub a_lin: Vec<f64>,
    pub a_quad: Vec<f64>,
}

impl RelevantHamiltonian {
    pub fn zero(d: usize) -> Self {
        Self {
            d,
            a_const: 0.0,
            a_lin: vec![0.0; linear_indices(d).len()],
            a_quad: vec![0.0; quadratic_pairs(d).len()],
        }
    }

    pub fn new(d: usize, a_const: f64, a_lin: Vec<f64>, a_quad: Vec<f64>) -> Result<Self> {
        let z = Self::zero(d);
        if a_lin.len() != z.a_lin.len() {
            return Err(Error::LengthMismatch {
                expected: z.a_lin.len(),
                got: a_lin.len(),
            });
        }
        if a_quad.len() != z.a_quad.len() {
            return Err(Error::LengthMismatch {
                expected: z.a_quad.len(),
                got: a_quad.len(),
            });
        }
        Ok(Self {
            d,
            a_const,
            a_lin,
            a_quad,
        })
    }

    /// Largest absolute coefficient difference.
    pub fn max_abs_diff(&self, other: &RelevantHamiltonian) -> f64 {
        let mut m = (self.a_const - other.a_const).abs();
        for (a, b) in self
            .a_lin
            .iter()
            .zip(&other.a_lin)
            .chain(self.a_quad.iter().zip(&other.a_quad))
        {
            m = m.max((a - b).abs());
        }
        m
    }

    /// The same functional as a polynomial in first gradients.
    pub fn to_polynomial(&self, torus: &Torus, block: &Block) -> LocalPolynomial {
        let t = *torus;
        let points = block.points(torus);
        let mut p = LocalPolynomial::constant(t, self.a_const * points.len() as f64);
        let lin = linear_indices(self.d);
        let quad = quadratic_pairs(self.d);
        for x in &points {
            for (beta, &a) in lin.iter().zip(&self.a_lin) {
                if a == 0.0 {
                    continue;
                }
                // ∇^β φ(x) = ∇^{β - e_i} (∇_i φ)(x) with i the first nonzero axis.
                let i = beta.iter().position(|&b| b > 0).unwrap_or(0);
                let mut rest = beta.clone();
                rest[i] -= 1;
                for (s, c) in diff_stencil(&rest) {
                    let site = LatticePoint(x.0.iter().zip(&s).map(|(a, b)| a + b).collect());
                    p.add_term(vec![GradVar::new(torus, &site, i)], a * c);
                }
            }
            for (&(i, j), &a) in quad.iter().zip(&self.a_quad) {
                p.add_term(
                    vec![GradVar::new(torus, x, i), GradVar::new(torus, x, j)],
                    a,
                );
            }
        }
        p
    }

    pub fn evaluate(&self, torus: &Torus, block: &Block, phi: &Field) -> f64 {
        self.to_polynomial(torus, block).eval(phi)
    }
}

/// Output of [`project_pi2`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pi2Projection {
    pub hamiltonian: RelevantHamiltonian,
    /// Condition number of the linear matching matrix.
    pub condition: f64,
    pub flags: Vec<String>,
}

/// `DF(0) · g` for a field direction `g` given by its gradient at each variable.
fn first_derivative(
    f: &BlockFunctional,
    torus: &Torus,
    center: &LatticePoint,
    origin: &LatticePoint,
    g: &dyn Fn(&[i64]) -> f64,
) -> f64 {
    match f {
        BlockFunctional::Polynomial(p) => p
            .linear_part()
            .iter()
            .map(|(v, c)| {
                let z = local_offset(torus, &v.site, center, origin);
                let mut up = z.clone();
                up[v.dir] += 1;
                c * (g(&up) - g(&z))
            })
            .sum(),
        BlockFunctional::Oracle(o) => {
            let dir = local_field(torus, center, origin, g);
            let scale = 1.0 + dir.sup_norm();
            richardson_first(|t| o(&dir.scaled(t)), ORACLE_STEP / scale)
        }
    }
}

/// Second derivative of `F` at 0 along the affine directions `z_k` and `z_l`.
fn affine_hessian(
    f: &BlockFunctional,
    torus: &Torus,
    center: &LatticePoint,
    k: usize,
    l: usize,
) -> f64 {
    match f {
        BlockFunctional::Polynomial(p) => p
            .directional(|v| (v.dir == k) as u8 as f64)
            .directional(|v| (v.dir == l) as u8 as f64)
            .constant_term(),
        BlockFunctional::Oracle(o) => {
            let ek = local_field(torus, center, center, |z| z[k] as f64);
            let el = local_field(torus, center, center, |z| z[l] as f64);
            let h = ORACLE_STEP / (1.0 + ek.sup_norm());
            let at = |a: f64, b: f64| {
                let mut x = ek.scaled(a);
                x.add_scaled(b, &el);
                o(&x)
            };
            (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h)
        }
    }
}

fn value_at_zero(f: &BlockFunctional, torus: &Torus) -> f64 {
    match f {
        BlockFunctional::Polynomial(p) => p.constant_term(),
        BlockFunctional::Oracle(o) => o(&Field::zeros(*torus)),
    }
}

/// Project a block functional onto the relevant Hamiltonians of `block`.
///
/// The constant is `F(B, 0)/|B|`; the linear coefficients match `DF(B, 0)` on the
/// binomial fields `b_γ(z - x₀)` anchored at the block's smallest corner; the
/// quadratic coefficients match `½ D²F(B, 0)` on affine fields.
pub fn project_pi2(f: &BlockFunctional, block: &Block, torus: &Torus) -> Result<Pi2Projection> {
    let d = torus.d();
    if block.k >= torus.n() {
        return Err(Error::InvalidArgument(format!(
            "block scale {} must be below N = {}",
            block.k,
            torus.n()
        )));
    }
    if let BlockFunctional::Polynomial(p) = f {
        if p.torus != *torus {
            return Err(Error::InvalidArgument(
                "functional lives on another torus".into(),
            ));
        }
    }
    let points = block.points(torus);
    let size = points.len() as f64;
    let center = block.center(torus);
    let origin = block.min_corner(torus);
    let lin = linear_indices(d);
    let n = lin.len();

    let mut m = DMatrix::<f64>::zeros(n, n);
    for (r, gamma) in lin.iter().enumerate() {
        for (c, beta) in lin.iter().enumerate() {
            if le(beta, gamma) {
                let diff = minus(gamma, beta);
                m[(r, c)] = points
                    .iter()
                    .map(|x| shifted_binomial(&diff, &local_offset(torus, x, &center, &origin)))
                    .sum();
            }
        }
    }
    let rhs = DVector::from_iterator(
        n,
        lin.iter().map(|gamma| {
            first_derivative(f, torus, &center, &origin, &|z| shifted_binomial(gamma, z))
        }),
    );
    let sv = m.clone().singular_values();
    let condition = sv.max() / sv.min();
    let mut flags = Vec::new();
    if !(condition <= MAX_CONDITION) {
        flags.push(format!("linear matching condition number {condition:.3e}"));
    }
    let a_lin = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("linear matching system".into()))?;

    let a_quad = quadratic_pairs(d)
        .into_iter()
        .map(|(i, j)| {
            let h = affine_hessian(f, torus, &center, i, j);
            if i == j {
                h / (2.0 * size)
            } else {
                h / size
            }
        })
        .collect();
    let hamiltonian = RelevantHamiltonian {
        d,
        a_const: value_at_zero(f, torus) / size,
        a_lin: a_lin.iter().copied().collect(),
        a_quad,
    };
    Ok(Pi2Projection {
        hamiltonian,
        condition,
        flags,
    })
}

/// `Π^α`: `λ = F(0)` and, below the coalescence scale, `n_i = DF(0) · b^α_{e_i}`.
pub fn project_obs(
    f: &BlockFunctional,
    torus: &Torus,
    alpha: &LatticePoint,
    k: u32,
    j_ab: u32,
) -> (f64, Vec<f64>) {
    let d = torus.d();
    let lambda = value_at_zero(f, torus);
    if k >= j_ab {
        return (lambda, vec![0.0; d]);
    }
    let n = (0..d)
        .map(|i| first_derivative(f, torus, alpha, alpha, &|z: &[i64]| z[i] as f64))
        .collect();
    (lambda, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::make_torus;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn random_h(d: usize, rng: &mut crate::rng::Rng) -> RelevantHamiltonian {
        let z = RelevantHamiltonian::zero(d);
        RelevantHamiltonian {
            d,
            a_const: rng.random_range(-1.0..1.0),
            a_lin: z
                .a_lin
                .iter()
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            a_quad: z
                .a_quad
                .iter()
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        }
    }

    #[test]
    fn index_sets() {
        assert_eq!(linear_indices(2).len(), 5);
        assert_eq!(linear_indices(3).len(), 9);
        assert_eq!(quadratic_pairs(2), vec![(0, 0), (0, 1), (1, 1)]);
    }

    #[test]
    fn binomials_difference_correctly() {
        for n in -6i64..6 {
            for k in 1u8..4 {
                assert_eq!(binomial(n + 1, k) - binomial(n, k), binomial(n, k - 1));
            }
        }
    }

    #[test]
    fn pi2_fixes_planted_hamiltonians() {
        let mut rng = stream_rng(12, 0);
        for (d, n) in [(2usize, 3u32), (3, 2)] {
            let t = make_torus(d, 3, n).unwrap();
            let block = Block::containing(&t, 1, &LatticePoint(vec![4; d]));
            for _ in 0..10 {
                let h = random_h(d, &mut rng);
                let f = BlockFunctional::Polynomial(h.to_polynomial(&t, &block));
                let p = project_pi2(&f, &block, &t).unwrap();
                assert!(
                    p.hamiltonian.max_abs_diff(&h) < 1e-12,
                    "{:?} vs {:?}",
                    p.hamiltonian,
                    h
                );
                assert!(p.flags.is_empty());
            }
        }
    }

    #[test]
    fn pi2_oracle_path_agrees() {
        let t = make_torus(2, 3, 3).unwrap();
        let block = Block::containing(&t, 1, &LatticePoint(vec![0, 0]));
        let h = random_h(2, &mut stream_rng(3, 0));
        let f = BlockFunctional::Oracle(h.to_polynomial(&t, &block).to_functional());
        let p = project_pi2(&f, &block, &t).unwrap();
        assert!(p.hamiltonian.max_abs_diff(&h) < 1e-6);
    }

    #[test]
    fn odd_cubic_projects_to_zero() {
        let t = make_torus(2, 3, 3).unwrap();
        let block = Block::containing(&t, 1, &LatticePoint(vec![3, 3]));
        let mut p = LocalPolynomial::zero(t);
        for x in block.points(&t) {
            p = p.add(&LocalPolynomial::power(t, &x, 0, 3, 1.0));
        }
        let out = project_pi2(&p.into(), &block, &t).unwrap().hamiltonian;
        assert_eq!(out.max_abs_diff(&RelevantHamiltonian::zero(2)), 0.0);
    }

    #[test]
    fn constant_is_stored_per_point() {
        let t = make_torus(2, 3, 3).unwrap();
        let block = Block::containing(&t, 2, &LatticePoint(vec![0, 0]));
        let f = BlockFunctional::Polynomial(LocalPolynomial::constant(t, 4.5));
        let out = project_pi2(&f, &block, &t).unwrap().hamiltonian;
        assert_eq!(out.a_const, 4.5 / 81.0);
        assert!(out.a_lin.iter().chain(&out.a_quad).all(|&a| a == 0.0));
    }

    #[test]
    fn top_scale_block_is_rejected() {
        let t = make_torus(2, 3, 2).unwrap();
        let block = Block::containing(&t, 2, &LatticePoint(vec![0, 0]));
        let f = BlockFunctional::Polynomial(LocalPolynomial::zero(t));
        assert!(project_pi2(&f, &block, &t).is_err());
    }

    fn planted_obs(t: Torus, a: &LatticePoint) -> LocalPolynomial {
        LocalPolynomial::constant(t, 5.0)
            .add(&LocalPolynomial::linear(t, a, 0, 2.0))
            .add(&LocalPolynomial::power(t, a, 0, 3, 1.0))
    }

    #[test]
    fn observable_projection_switches_at_coalescence() {
        let t = make_torus(2, 3, 3).unwrap();
        let a = LatticePoint(vec![1, -2]);
        let f: BlockFunctional = planted_obs(t, &a).into();
        assert_eq!(project_obs(&f, &t, &a, 1, 2), (5.0, vec![2.0, 0.0]));
        assert_eq!(project_obs(&f, &t, &a, 2, 2), (5.0, vec![0.0, 0.0]));
        assert_eq!(project_obs(&f, &t, &a, 3, 2), (5.0, vec![0.0, 0.0]));
        let zero = BlockFunctional::Polynomial(LocalPolynomial::zero(t));
        assert_eq!(project_obs(&zero, &t, &a, 0, 2), (0.0, vec![0.0, 0.0]));
    }

    #[test]
    fn observable_projection_through_oracle() {
        let t = make_torus(2, 3, 3).unwrap();
        let a = LatticePoint(vec![13, 0]);
        let f = BlockFunctional::Oracle(planted_obs(t, &a).to_functional());
        let (l, n) = project_obs(&f, &t, &a, 0, 1);
        assert!((l - 5.0).abs() < 1e-15);
        assert!((n[0] - 2.0).abs() < 1e-9 && n[1].abs() < 1e-12);
    }
}
