//! Anisotropic Gaussian free field on the torus.
//!
//! The operator `A^q = Σ_ij (δ_ij + q_ij) ∇*_j ∇_i` is diagonal in Fourier space
//! with symbol `σ_q(p) = Σ_ij (δ_ij + q_ij)(e^{-ip_i} - 1)(e^{ip_j} - 1)`. Its
//! inverse on mean-zero fields is extended by zero on constants, so every
//! kernel sums to zero over the torus.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{self, NdFft, C64};
use crate::lattice::{backward_diff, Field, LatticePoint, Norm, Torus, MAX_DIM};
use crate::rng::Rng;

/// Symmetric coefficient perturbation `q` with operator norm at most 1/2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QMatrix {
    d: usize,
    entries: Vec<f64>,
}

/// Operator-norm bound enforced by [`QMatrix::new`].
pub const Q_NORM_BOUND: f64 = 0.5;

impl QMatrix {
    /// Row-major `d × d` entries; rejects asymmetric input or `‖q‖ > 1/2`.
    pub fn new(d: usize, entries: Vec<f64>) -> Result<Self> {
        let q = Self::new_unbounded(d, entries)?;
        let norm = q.op_norm();
        if norm > Q_NORM_BOUND + 1e-12 {
            return Err(Error::InvalidArgument(format!("‖q‖ = {norm} exceeds 1/2")));
        }
        Ok(q)
    }

    /// Symmetric matrix without the norm bound, for probing positivity.
    pub fn new_unbounded(d: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != d * d {
            return Err(Error::LengthMismatch {
                expected: d * d,
                got: entries.len(),
            });
        }
        for i in 0..d {
            for j in 0..i {
                if entries[i * d + j] != entries[j * d + i] {
                    return Err(Error::InvalidArgument("q must be symmetric".into()));
                }
            }
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("q has non-finite entries".into()));
        }
        Ok(Self { d, entries })
    }

    pub fn zero(d: usize) -> Self {
        Self {
            d,
            entries: vec![0.0; d * d],
        }
    }

    pub fn scaled_identity(d: usize, c: f64) -> Result<Self> {
        let mut e = vec![0.0; d * d];
        for i in 0..d {
            e[i * d + i] = c;
        }
        Self::new(d, e)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.d + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Largest absolute eigenvalue.
    pub fn op_norm(&self) -> f64 {
        let m = DMatrix::from_row_slice(self.d, self.d, &self.entries);
        m.symmetric_eigenvalues()
            .iter()
            .fold(0.0, |a: f64, v| a.max(v.abs()))
    }

    /// Number of free parameters `d(d+1)/2`.
    pub fn n_params(d: usize) -> usize {
        d * (d + 1) / 2
    }

    /// Index pairs `(i, j)`, `i ≤ j`, in parameter order.
    pub fn param_pairs(d: usize) -> Vec<(usize, usize)> {
        (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect()
    }

    pub fn to_params(&self) -> Vec<f64> {
        Self::param_pairs(self.d)
            .into_iter()
            .map(|(i, j)| self.get(i, j))
            .collect()
    }

    pub fn from_params_unbounded(d: usize, params: &[f64]) -> Result<Self> {
        let mut e = vec![0.0; d * d];
        for (&(i, j), &v) in Self::param_pairs(d).iter().zip(params) {
            e[i * d + j] = v;
            e[j * d + i] = v;
        }
        Self::new_unbounded(d, e)
    }

    pub fn add_scaled(&self, c: f64, other: &QMatrix) -> Result<QMatrix> {
        let e = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a + c * b)
            .collect();
        Self::new_unbounded(self.d, e)
    }
}

/// `v_i = e^{ip_i} - 1` for the momenta of a storage index.
pub fn phase_factors(torus: &Torus, idx: usize) -> [C64; MAX_DIM] {
    let mut p = [0.0; MAX_DIM];
    fourier::momenta(torus, idx, &mut p[..torus.d()]);
    let mut v = [C64::new(0.0, 0.0); MAX_DIM];
    for i in 0..torus.d() {
        v[i] = C64::from_polar(1.0, p[i]) - 1.0;
    }
    v
}

/// Fourier symbol `σ_q` for every mode, in storage order.
pub fn symbol(q: &QMatrix, torus: &Torus) -> Vec<f64> {
    let d = torus.d();
    (0..torus.volume())
        .map(|idx| {
            let v = phase_factors(torus, idx);
            let mut s = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let a = if i == j { 1.0 } else { 0.0 } + q.get(i, j);
                    s += a * (v[i].conj() * v[j]).re;
                }
            }
            s
        })
        .collect()
}

/// Derivative of `σ_q` with respect to the symmetric parameter `(k, l)`.
pub fn symbol_derivative(torus: &Torus, k: usize, l: usize) -> Vec<f64> {
    (0..torus.volume())
        .map(|idx| {
            let v = phase_factors(torus, idx);
            if k == l {
                v[k].norm_sqr()
            } else {
                2.0 * (v[k].conj() * v[l]).re
            }
        })
        .collect()
}

/// Translation-invariant covariance on the mean-zero subspace.
///
/// `spectrum[m]` is the eigenvalue on the Fourier mode `m` (zero at `m = 0`) and
/// `values[x]` the kernel `(1/V) Σ_m spectrum[m] e^{ip·x}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovKernel {
    pub torus: Torus,
    pub q: QMatrix,
    pub values: Vec<f64>,
    pub spectrum: Vec<f64>,
}

/// Spectral inverse of `A^q`; rejects non-positive symbols away from the zero mode.
pub fn green_kernel(q: &QMatrix, torus: &Torus) -> Result<CovKernel> {
    let spectrum = inverse_symbol(q, torus)?;
    let values = NdFft::new(*torus).synthesize_real(&spectrum);
    Ok(CovKernel {
        torus: *torus,
        q: q.clone(),
        values,
        spectrum,
    })
}

/// Same kernel through the separable direct DFT; used to cross-check the FFT path.
pub fn green_kernel_direct(q: &QMatrix, torus: &Torus) -> Result<CovKernel> {
    let spectrum = inverse_symbol(q, torus)?;
    let data: Vec<C64> = spectrum.iter().map(|&s| C64::new(s, 0.0)).collect();
    let v = torus.volume() as f64;
    let values = fourier::dft_direct(torus, &data, 1.0)
        .iter()
        .map(|z| z.re / v)
        .collect();
    Ok(CovKernel {
        torus: *torus,
        q: q.clone(),
        values,
        spectrum,
    })
}

fn inverse_symbol(q: &QMatrix, torus: &Torus) -> Result<Vec<f64>> {
    if q.d() != torus.d() {
        return Err(Error::InvalidArgument(
            "q dimension differs from torus".into(),
        ));
    }
    let sigma = symbol(q, torus);
    let mut out = vec![0.0; sigma.len()];
    for (idx, &s) in sigma.iter().enumerate().skip(1) {
        if !(s > 0.0) {
            let mut m = vec![0; torus.d()];
            torus.unsigned_coords(idx, &mut m);
            return Err(Error::NotPositive { mode: m, value: s });
        }
        out[idx] = 1.0 / s;
    }
    Ok(out)
}

/// Coefficients of the forward-difference stencil `∇^alpha`.
pub fn diff_stencil(alpha: &[u8]) -> Vec<(Vec<i64>, f64)> {
    let mut terms = vec![(vec![0i64; alpha.len()], 1.0)];
    for (axis, &a) in alpha.iter().enumerate() {
        for _ in 0..a {
            let mut next = Vec::with_capacity(terms.len() * 2);
            for (s, c) in &terms {
                let mut up = s.clone();
                up[axis] += 1;
                next.push((up, *c));
                next.push((s.clone(), -c));
            }
            terms = next;
        }
    }
    terms.sort_by(|a, b| a.0.cmp(&b.0));
    let mut merged: Vec<(Vec<i64>, f64)> = Vec::new();
    for (s, c) in terms {
        match merged.last_mut() {
            Some((ls, lc)) if *ls == s => *lc += c,
            _ => merged.push((s, c)),
        }
    }
    merged.retain(|(_, c)| *c != 0.0);
    merged
}

/// `Cov(∇^alpha ξ(x), ∇^beta ξ(y))` for a field with kernel `values`, given `r = x - y`.
pub fn stencil_cov(torus: &Torus, values: &[f64], r: &[i64], alpha: &[u8], beta: &[u8]) -> f64 {
    let sa = diff_stencil(alpha);
    let sb = diff_stencil(beta);
    let mut disp = [0i64; MAX_DIM];
    let mut acc = 0.0;
    for (s, cs) in &sa {
        for (t, ct) in &sb {
            for i in 0..torus.d() {
                disp[i] = r[i] + s[i] - t[i];
            }
            acc += cs * ct * values[torus.index_of(&disp[..torus.d()])];
        }
    }
    acc
}

/// `Cov(∇_i ξ(a), ∇_j ξ(b))` with `r = a - b`:
/// `c(r + e_i - e_j) - c(r + e_i) - c(r - e_j) + c(r)`, i.e. `∇*_j ∇_i c(r)`.
pub fn grad_grad_from_values(torus: &Torus, values: &[f64], r: &[i64], i: usize, j: usize) -> f64 {
    let d = torus.d();
    let mut x = [0i64; MAX_DIM];
    x[..d].copy_from_slice(&r[..d]);
    let c = |x: &[i64]| values[torus.index_of(x)];
    let base = c(&x[..d]);
    x[i] += 1;
    let plus_i = c(&x[..d]);
    x[j] -= 1;
    let both = c(&x[..d]);
    x[i] -= 1;
    let minus_j = c(&x[..d]);
    both - plus_i - minus_j + base
}

impl CovKernel {
    pub fn d(&self) -> usize {
        self.torus.d()
    }

    pub fn at(&self, x: &LatticePoint) -> f64 {
        self.values[self.torus.index(x)]
    }

    pub fn at_offset(&self, r: &[i64]) -> f64 {
        self.values[self.torus.index_of(r)]
    }

    /// `Cov(∇_i φ(a), ∇_j φ(b))` under the Gaussian with this covariance (0-based directions).
    pub fn grad_grad_cov(&self, a: &LatticePoint, b: &LatticePoint, i: usize, j: usize) -> f64 {
        let r: Vec<i64> = a.0.iter().zip(&b.0).map(|(x, y)| x - y).collect();
        grad_grad_from_values(&self.torus, &self.values, &r, i, j)
    }

    pub fn grad_grad_cov_offset(&self, r: &[i64], i: usize, j: usize) -> f64 {
        grad_grad_from_values(&self.torus, &self.values, r, i, j)
    }

    /// The `d × d` matrix `G_ij = Cov(∇_i φ(a), ∇_j φ(b))`, row-major.
    pub fn grad_grad_matrix(&self, a: &LatticePoint, b: &LatticePoint) -> Vec<f64> {
        let d = self.d();
        let mut g = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                g[i * d + j] = self.grad_grad_cov(a, b, i, j);
            }
        }
        g
    }

    /// The same covariance computed as `(∇*_i 1_a, C ∇*_j 1_b)` through the operator.
    pub fn grad_grad_cov_operator(
        &self,
        a: &LatticePoint,
        b: &LatticePoint,
        i: usize,
        j: usize,
    ) -> f64 {
        let la = backward_diff(&Field::delta(self.torus, a), i);
        let lb = backward_diff(&Field::delta(self.torus, b), j);
        la.inner(&self.apply(&lb))
    }

    /// Convolution `Σ_y C(x - y) f(y)`; the result is mean-zero.
    pub fn apply(&self, f: &Field) -> Field {
        let fft = NdFft::new(self.torus);
        let mut fh = fft.forward_real(&f.values);
        for (z, s) in fh.iter_mut().zip(&self.spectrum) {
            *z *= *s;
        }
        Field {
            torus: self.torus,
            values: fft.inverse_real_normalized(&fh),
            mean_zero: true,
        }
    }

    /// Minimum spectral value over nonzero modes.
    pub fn min_spectrum(&self) -> f64 {
        self.spectrum
            .iter()
            .skip(1)
            .fold(f64::INFINITY, |m, &s| m.min(s))
    }

    /// Exact draw: white noise filtered by the square root of the spectrum.
    pub fn sample(&self, rng: &mut Rng) -> Field {
        let fft = NdFft::new(self.torus);
        self.sample_with(&fft, rng)
    }

    /// [`CovKernel::sample`] with a caller-held transform plan.
    pub fn sample_with(&self, fft: &NdFft, rng: &mut Rng) -> Field {
        let noise: Vec<f64> = (0..self.torus.volume())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let mut h = fft.forward_real(&noise);
        for (z, s) in h.iter_mut().zip(&self.spectrum) {
            *z *= s.max(0.0).sqrt();
        }
        h[0] = C64::new(0.0, 0.0);
        let mut values = fft.inverse_real_normalized(&h);
        let m = values.iter().sum::<f64>() / values.len() as f64;
        values.iter_mut().for_each(|v| *v -= m);
        Field {
            torus: self.torus,
            values,
            mean_zero: true,
        }
    }

    /// Rows `(|x|_inf, |x|_eucl, C(x))` over all offsets, sorted by Euclidean norm.
    pub fn radial_profile(&self) -> Vec<(f64, f64, f64)> {
        let o = LatticePoint::origin(self.d());
        let mut rows: Vec<(f64, f64, f64, usize)> = (0..self.torus.volume())
            .map(|idx| {
                let p = self.torus.point(idx);
                (
                    self.torus.periodic_dist(&o, &p, Norm::Inf),
                    self.torus.periodic_dist(&o, &p, Norm::Euclid),
                    self.values[idx],
                    idx,
                )
            })
            .collect();
        rows.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.3.cmp(&b.3)));
        rows.into_iter().map(|(a, b, c, _)| (a, b, c)).collect()
    }
}

/// `Σ_ij (δ_ij + q_ij) ∇*_j ∇_i f` for a mean-zero field.
pub fn apply_aq(f: &Field, q: &QMatrix) -> Result<Field> {
    if !(f.mean_zero || f.satisfies_mean_zero()) {
        return Err(Error::NotMeanZero);
    }
    let d = f.torus.d();
    let mut out = Field::zeros(f.torus);
    for i in 0..d {
        let gi = f.forward_diff(i);
        for j in 0..d {
            let a = if i == j { 1.0 } else { 0.0 } + q.get(i, j);
            if a != 0.0 {
                out.add_scaled(a, &gi.backward_diff(j));
            }
        }
    }
    out.mean_zero = true;
    Ok(out)
}

/// `Σ_ij n_a[i] n_b[j] Cov(∇_i φ(a), ∇_j φ(b))`.
pub fn gaussian_pair_moment(
    n_a: &[f64],
    a: &LatticePoint,
    n_b: &[f64],
    b: &LatticePoint,
    kernel: &CovKernel,
) -> f64 {
    let g = kernel.grad_grad_matrix(a, b);
    bilinear(n_a, &g, n_b)
}

/// `xᵀ G y` for a row-major square matrix.
pub fn bilinear(x: &[f64], g: &[f64], y: &[f64]) -> f64 {
    let d = x.len();
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            acc += x[i] * g[i * d + j] * y[j];
        }
    }
    acc
}

/// Outcome of the sampling-based sign check of [`CovKernel::grad_grad_cov`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignCheck {
    /// Largest `|empirical - kernel| / SE` over the probed entries.
    pub max_z: f64,
    /// Largest `|kernel - operator route|`.
    pub max_operator_gap: f64,
    pub samples: usize,
}

/// Compare gradient covariances from the kernel with exact samples and with the
/// operator route on the given geometry.
pub fn sign_convention_check(torus: &Torus, samples: usize, seed: u64) -> Result<SignCheck> {
    let d = torus.d();
    let kernel = green_kernel(&QMatrix::zero(d), torus)?;
    let o = LatticePoint::origin(d);
    let mut probes = Vec::new();
    for i in 0..d {
        for j in 0..d {
            for r in [
                vec![1i64, 0],
                vec![0, 1],
                vec![1, 1],
                vec![2, -1],
                vec![0, 0],
            ] {
                let mut full = vec![0i64; d];
                full[..2].copy_from_slice(&r);
                probes.push((LatticePoint(full), i, j));
            }
        }
    }
    let fft = NdFft::new(*torus);
    let mut rng = crate::rng::stream_rng(seed, 0);
    let mut acc = crate::stats::MeanVar::vec(probes.len());
    for _ in 0..samples {
        let phi = kernel.sample_with(&fft, &mut rng);
        let g: Vec<Field> = (0..d).map(|i| phi.forward_diff(i)).collect();
        let vals: Vec<f64> = probes
            .iter()
            .map(|(a, i, j)| {
                let ia = torus.index(a);
                g[*i].values[ia] * g[*j].values[0]
            })
            .collect();
        for (m, v) in acc.iter_mut().zip(vals) {
            m.push(v);
        }
    }
    let mut max_z: f64 = 0.0;
    let mut gap: f64 = 0.0;
    for ((a, i, j), m) in probes.iter().zip(&acc) {
        let exact = kernel.grad_grad_cov(a, &o, *i, *j);
        max_z = max_z.max((m.mean() - exact).abs() / m.standard_error());
        gap = gap.max((exact - kernel.grad_grad_cov_operator(a, &o, *i, *j)).abs());
    }
    Ok(SignCheck {
        max_z,
        max_operator_gap: gap,
        samples,
    })
}
