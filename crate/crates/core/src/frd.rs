//! Finite-range decomposition of the Green kernel by polynomial functional calculus.
//!
//! All nonzero eigenvalues of `A^q` lie in `(0, Λ]` with `Λ = 6d` whenever
//! `‖q‖ ≤ 1/2`. On that interval we build filters `G_j` with `G_j(0) = 1` and
//! `0 ≤ G_j ≤ 1`, set `P_k = Π_{j≤k} G_j`, and take the layer polynomial
//! `p_k(λ) = P_{k-1}(λ) (1 - G_k(λ)) / λ`. The layers are nonnegative, telescope
//! to `1/λ` together with the merged remainder `P_{N-1}(λ)/λ`, and `p_k(A^q)`
//! has exact range `deg p_k` because `A^q` only couples ∞-neighbours. Removing
//! the zero mode leaves the constant tail `-p_k(0)/V`, which does not depend
//! on `q` since the filters are fixed in `λ`.
//!
//! With `θ = 2 asin(√(λ/Λ))` the filters are `cos²(mθ)` for even degree `2m`
//! and `cos²(θ/2) cos²(mθ)` for odd degree `2m + 1`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::NdFft;
use crate::gff::{self, CovKernel, QMatrix};
use crate::io::{self, RecordKind};
use crate::lattice::{multi_forward_diff, multi_indices, Field, LatticePoint, Torus, MAX_DIM};
use crate::polymers::coalescence_scale;

/// Spectral upper bound per dimension for `‖q‖ ≤ 1/2`.
pub const LAMBDA_PER_DIM: f64 = 6.0;

/// One scale of the decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrdLayer {
    pub k: u32,
    /// Layer covariance; `spectrum` holds `p_k(σ_q)` on nonzero modes.
    pub kernel: CovKernel,
    /// Nominal range `L^k / 2`.
    pub range: f64,
    /// `M_k`; the kernel equals `-M_k` outside the range.
    pub tail: f64,
    /// Polynomial degree, `None` for the merged last layer.
    pub degree: Option<usize>,
    pub merged: bool,
}

/// Layers `k = 1..N-1` followed by the merged last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrdStack {
    pub torus: Torus,
    pub source: CovKernel,
    pub layers: Vec<FrdLayer>,
    /// Spectral bound `Λ` the filters were built on.
    pub lambda_max: f64,
}

/// Filter of a given degree on `[0, Λ]`.
///
/// With `cos θ = 1 - 2λ/Λ` and the normalised Fejér factor
/// `F_m(θ) = sin(mθ/2) / (m sin(θ/2))`, an even degree `2(m-1)` uses `F_m⁴`
/// and an odd degree prepends `cos²(θ/2) = 1 - λ/Λ`. Both lie in `[0, 1]` and
/// equal 1 at `λ = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Filter {
    degree: usize,
}

/// `sin(jθ/2) / sin(θ/2)`, with its limit `j` at `θ = 0`.
fn sine_ratio(j: f64, theta: f64) -> f64 {
    let s = (0.5 * theta).sin();
    if s.abs() < 1e-300 {
        j
    } else {
        (0.5 * j * theta).sin() / s
    }
}

impl Filter {
    fn theta(lambda: f64, lambda_max: f64) -> f64 {
        2.0 * (lambda / lambda_max).clamp(0.0, 1.0).sqrt().asin()
    }

    fn fejer_m(&self) -> usize {
        self.degree / 2 + 1
    }

    /// `F_m(θ)²`.
    fn fejer_sq(m: usize, theta: f64) -> f64 {
        let m = m as f64;
        (sine_ratio(m, theta) / m).powi(2)
    }

    /// `(1 - F_m(θ)²) / λ` from the cosine expansion of the Fejér kernel.
    fn fejer_complement_over_lambda(m: usize, theta: f64, lambda_max: f64) -> f64 {
        let mf = m as f64;
        (1..m)
            .map(|j| 4.0 * (mf - j as f64) / (mf * mf) * sine_ratio(j as f64, theta).powi(2))
            .sum::<f64>()
            / lambda_max
    }

    /// `G(λ)`.
    fn value(&self, theta: f64) -> f64 {
        let f2 = Self::fejer_sq(self.fejer_m(), theta);
        let j = f2 * f2;
        if self.degree.is_multiple_of(2) {
            j
        } else {
            (0.5 * theta).cos().powi(2) * j
        }
    }

    /// `(1 - G(λ)) / λ`, evaluated without cancellation.
    fn complement_over_lambda(&self, theta: f64, lambda_max: f64) -> f64 {
        let m = self.fejer_m();
        let f2 = Self::fejer_sq(m, theta);
        let one_minus_j = Self::fejer_complement_over_lambda(m, theta, lambda_max) * (1.0 + f2);
        if self.degree.is_multiple_of(2) {
            one_minus_j
        } else {
            one_minus_j + f2 * f2 / lambda_max
        }
    }
}

/// Largest admissible support radius of layer `k`.
///
/// The radius is capped so that the kernel is constant for `|x|_∞ ≥ L^k/2`, and
/// so that every offset entering `∇*_j ∇_i C_k(a, b)` lies outside the support
/// whenever the Euclidean distance satisfies `|a - b| ≥ L^k / 2`.
pub fn support_radius(l: usize, d: usize, k: u32) -> usize {
    let lk = (l as i64).pow(k);
    let range_cap = ((lk - 1) / 2) as usize;
    let b = (lk + 1) / 2 + 1;
    let lk2 = lk * lk;
    let mut best = i64::MAX;
    let mut r = vec![-b; d];
    'outer: loop {
        let norm2: i64 = r.iter().map(|c| c * c).sum();
        if 4 * norm2 >= lk2 {
            best = best.min(min_shifted_inf_norm(&r));
        }
        for axis in 0..d {
            if r[axis] < b {
                r[axis] += 1;
                continue 'outer;
            }
            r[axis] = -b;
        }
        break;
    }
    range_cap.min((best - 1).max(0) as usize)
}

/// `min |r + δ|_∞` over `δ ∈ {0, e_i, -e_j, e_i - e_j}`.
fn min_shifted_inf_norm(r: &[i64]) -> i64 {
    let d = r.len();
    let inf = |v: &[i64]| v.iter().map(|c| c.abs()).max().unwrap_or(0);
    let mut tmp = [0i64; MAX_DIM];
    tmp[..d].copy_from_slice(r);
    let mut best = inf(r);
    for i in 0..d {
        for j in 0..d {
            for (di, dj) in [(1, 0), (0, -1), (1, -1)] {
                tmp[..d].copy_from_slice(r);
                tmp[i] += di;
                tmp[j] += dj;
                best = best.min(inf(&tmp[..d]));
            }
        }
    }
    best
}

/// Polynomial degrees `deg p_k` for `k = 1..N-1`.
pub fn degree_schedule(torus: &Torus) -> Vec<usize> {
    (1..torus.n())
        .map(|k| support_radius(torus.l(), torus.d(), k))
        .collect()
}

/// Filter degrees `g_k = D_k - D_{k-1}` with `D_k = deg p_k + 1`.
fn filter_degrees(radii: &[usize]) -> Vec<usize> {
    let mut prev = 0;
    radii
        .iter()
        .map(|&r| {
            let dk = (r + 1).max(prev);
            let g = dk - prev;
            prev = dk;
            g
        })
        .collect()
}

/// Layer spectra `p_k(λ)` for `k = 1..N-1` and the merged remainder, at one eigenvalue.
fn layer_values(lambda: f64, lambda_max: f64, filters: &[Filter], out: &mut [f64]) {
    let theta = Filter::theta(lambda, lambda_max);
    let mut cum = 1.0;
    for (slot, f) in out.iter_mut().zip(filters) {
        if f.degree == 0 {
            *slot = 0.0;
            continue;
        }
        *slot = cum * f.complement_over_lambda(theta, lambda_max);
        cum *= f.value(theta);
    }
    let last = out.len() - 1;
    out[last] = if lambda > 0.0 { cum / lambda } else { 0.0 };
}

/// Decompose `kern` into finite-range layers on `torus`.
pub fn build_frd(kern: &CovKernel, torus: &Torus) -> Result<FrdStack> {
    if kern.torus != *torus {
        return Err(Error::InvalidArgument(
            "kernel geometry differs from torus".into(),
        ));
    }
    let lambda_max = LAMBDA_PER_DIM * torus.d() as f64;
    let sigma = gff::symbol(&kern.q, torus);
    let top = sigma.iter().fold(0.0f64, |m, &s| m.max(s));
    if top > lambda_max * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "symbol maximum {top} exceeds the spectral bound {lambda_max}; ‖q‖ too large"
        )));
    }
    let radii = degree_schedule(torus);
    let filters: Vec<Filter> = filter_degrees(&radii)
        .into_iter()
        .map(|degree| Filter { degree })
        .collect();
    let n_layers = torus.n() as usize;
    let volume = torus.volume();

    let mut spectra = vec![vec![0.0; volume]; n_layers];
    let mut buf = vec![0.0; n_layers];
    for (idx, &s) in sigma.iter().enumerate().skip(1) {
        layer_values(s, lambda_max, &filters, &mut buf);
        for (spec, &v) in spectra.iter_mut().zip(&buf) {
            spec[idx] = v;
        }
    }
    let mut at_zero = vec![0.0; n_layers];
    layer_values(0.0, lambda_max, &filters, &mut at_zero);

    let fft = NdFft::new(*torus);
    let layers: Vec<FrdLayer> = spectra
        .into_par_iter()
        .enumerate()
        .map(|(i, spectrum)| {
            let k = i as u32 + 1;
            let merged = i + 1 == n_layers;
            let values = fft.synthesize_real(&spectrum);
            FrdLayer {
                k,
                kernel: CovKernel {
                    torus: *torus,
                    q: kern.q.clone(),
                    values,
                    spectrum,
                },
                range: torus.block_side(k) as f64 / 2.0,
                tail: if merged {
                    0.0
                } else {
                    at_zero[i] / volume as f64
                },
                degree: if merged { None } else { Some(radii[i]) },
                merged,
            }
        })
        .collect();

    for layer in &layers {
        let min = layer.kernel.min_spectrum();
        let scale = layer
            .kernel
            .spectrum
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1.0);
        if min < -1e-12 * scale {
            return Err(Error::LayerNotPositive { k: layer.k, min });
        }
    }
    Ok(FrdStack {
        torus: *torus,
        source: kern.clone(),
        layers,
        lambda_max,
    })
}

impl FrdStack {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Layer `k` (1-based).
    pub fn layer(&self, k: u32) -> &FrdLayer {
        &self.layers[k as usize - 1]
    }

    /// Entrywise sum of all layer kernels.
    pub fn sum_values(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.torus.volume()];
        for layer in &self.layers {
            for (o, v) in out.iter_mut().zip(&layer.kernel.values) {
                *o += v;
            }
        }
        out
    }

    /// Largest `|Σ_k C_k(x) - C(x)|` divided by `max |C|`.
    pub fn reconstruction_error(&self) -> f64 {
        let sum = self.sum_values();
        let scale = self
            .source
            .values
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        sum.iter()
            .zip(&self.source.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            / scale
    }

    /// Write layer files and a JSON-lines manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = Vec::new();
        let header = serde_json::json!({
            "d": self.torus.d(), "L": self.torus.l(), "N": self.torus.n(),
            "q": self.source.q.entries(), "lambda_max": self.lambda_max,
        });
        writeln!(manifest, "{header}")?;
        let src = Field {
            torus: self.torus,
            values: self.source.values.clone(),
            mean_zero: true,
        };
        let src_bytes = io::to_binary(RecordKind::GffKernel, &src);
        fs::write(dir.join("source.bin"), &src_bytes)?;
        for layer in &self.layers {
            let f = Field {
                torus: self.torus,
                values: layer.kernel.values.clone(),
                mean_zero: true,
            };
            let bytes = io::to_binary(RecordKind::FrdLayer, &f);
            let name = format!("layer_{:02}.bin", layer.k);
            fs::write(dir.join(&name), &bytes)?;
            let row = serde_json::json!({
                "k": layer.k, "M_k": layer.tail, "degree": layer.degree, "range": layer.range,
                "merged": layer.merged, "file": name, "sha256": io::sha256_hex(&bytes),
            });
            writeln!(manifest, "{row}")?;
        }
        fs::write(dir.join("manifest.jsonl"), manifest)?;
        Ok(())
    }

    /// Read a stack written by [`FrdStack::save`], verifying checksums.
    pub fn load(dir: &Path) -> Result<FrdStack> {
        let text = fs::read_to_string(dir.join("manifest.jsonl"))?;
        let mut lines = text.lines();
        let header: serde_json::Value = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Format("empty manifest".into()))?,
        )?;
        let get_u = |key: &str| {
            header[key]
                .as_u64()
                .ok_or_else(|| Error::Format(format!("manifest lacks {key}")))
        };
        let torus = Torus::new(
            get_u("d")? as usize,
            get_u("L")? as usize,
            get_u("N")? as u32,
        )?;
        let q_entries: Vec<f64> = serde_json::from_value(header["q"].clone())?;
        let q = QMatrix::new_unbounded(torus.d(), q_entries)?;
        let lambda_max = header["lambda_max"]
            .as_f64()
            .unwrap_or(LAMBDA_PER_DIM * torus.d() as f64);
        let fft = NdFft::new(torus);
        let kernel_from = |values: Vec<f64>| {
            let spectrum = fft.forward_real(&values).iter().map(|z| z.re).collect();
            CovKernel {
                torus,
                q: q.clone(),
                values,
                spectrum,
            }
        };
        let (_, src) = io::read_binary(&mut fs::read(dir.join("source.bin"))?.as_slice())?;
        let source = kernel_from(src.values);
        let mut layers = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let row: serde_json::Value = serde_json::from_str(line)?;
            let file = row["file"]
                .as_str()
                .ok_or_else(|| Error::Format("row lacks file".into()))?;
            let bytes = fs::read(dir.join(file))?;
            if row["sha256"].as_str() != Some(io::sha256_hex(&bytes).as_str()) {
                return Err(Error::Format(format!("checksum mismatch for {file}")));
            }
            let (_, f) = io::read_binary(&mut bytes.as_slice())?;
            layers.push(FrdLayer {
                k: row["k"].as_u64().unwrap_or(0) as u32,
                kernel: kernel_from(f.values),
                range: row["range"].as_f64().unwrap_or(0.0),
                tail: row["M_k"].as_f64().unwrap_or(0.0),
                degree: row["degree"].as_u64().map(|v| v as usize),
                merged: row["merged"].as_bool().unwrap_or(false),
            });
        }
        Ok(FrdStack {
            torus,
            source,
            layers,
            lambda_max,
        })
    }
}

/// Per-layer finite-range deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeRow {
    pub k: u32,
    /// `max |C_k(x) + M_k|` over `|x|_∞ ≥ L^k/2`, `None` for the merged layer.
    pub max_deviation: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeReport {
    pub rows: Vec<RangeRow>,
    pub passed: bool,
}

/// Check that every finite-range layer equals its tail constant outside its range.
/// Deviations are measured relative to `max(1, sup |C_k|)`.
pub fn verify_finite_range(stack: &FrdStack, tol: f64) -> RangeReport {
    let t = stack.torus;
    let rows: Vec<RangeRow> = stack
        .layers
        .iter()
        .map(|layer| {
            if layer.merged {
                return RangeRow {
                    k: layer.k,
                    max_deviation: None,
                    passed: true,
                };
            }
            let lk = t.block_side(layer.k);
            let scale = layer
                .kernel
                .values
                .iter()
                .fold(1.0f64, |m, v| m.max(v.abs()));
            let dev = (0..t.volume())
                .filter(|&idx| 2 * t.inf_norm_of_index(idx) >= lk)
                .map(|idx| (layer.kernel.values[idx] + layer.tail).abs())
                .fold(0.0f64, f64::max);
            RangeRow {
                k: layer.k,
                max_deviation: Some(dev),
                passed: dev <= tol * scale,
            }
        })
        .collect();
    let passed = rows.iter().all(|r| r.passed);
    RangeReport { rows, passed }
}

/// One row of [`layer_scaling_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub k: u32,
    pub order: usize,
    /// `max_{|α| = order} sup_x |∇^α C_k(x)|`.
    pub sup: f64,
    pub normaliser: f64,
    pub ratio: f64,
}

/// `L^{-(k-1)(d-2+|α|)}`, times `ln L` when `d + |α| = 2`.
pub fn scaling_normaliser(l: usize, d: usize, k: u32, order: usize) -> f64 {
    let expo = -((k as f64 - 1.0) * (d + order) as f64 - 2.0 * (k as f64 - 1.0));
    let base = (l as f64).powf(expo);
    if d + order == 2 {
        base * (l as f64).ln()
    } else {
        base
    }
}

fn sup_derivative(values: &[f64], torus: &Torus, order: usize) -> f64 {
    let f = Field {
        torus: *torus,
        values: values.to_vec(),
        mean_zero: true,
    };
    multi_indices(torus.d(), order)
        .iter()
        .map(|alpha| multi_forward_diff(&f, alpha).sup_norm())
        .fold(0.0, f64::max)
}

/// Sup norms of `∇^α C_k` and their ratios to the scale normaliser.
pub fn layer_scaling_report(stack: &FrdStack, order: usize) -> Result<Vec<ScalingRow>> {
    let t = stack.torus;
    if t.d() + order < 2 || order > 2 {
        return Err(Error::InvalidArgument(format!(
            "derivative order {order} not in 0..=2"
        )));
    }
    Ok(stack
        .layers
        .iter()
        .map(|layer| {
            let sup = sup_derivative(&layer.kernel.values, &t, order);
            let normaliser = scaling_normaliser(t.l(), t.d(), layer.k, order);
            ScalingRow {
                k: layer.k,
                order,
                sup,
                normaliser,
                ratio: sup / normaliser,
            }
        })
        .collect())
}

/// One row of [`q_derivative_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QDerivativeRow {
    pub k: u32,
    pub direction: usize,
    pub order: usize,
    /// `sup_x |∇^α D_q C_k(x)(q̇)|` by central differences.
    pub sup: f64,
    pub ratio: f64,
}

/// First `q`-derivatives of the layers along random directions `q̇` with `‖q̇‖ = 1/2`.
pub fn q_derivative_report(
    stack: &FrdStack,
    order: usize,
    directions: usize,
    step: f64,
    seed: u64,
) -> Result<Vec<QDerivativeRow>> {
    use rand::Rng as _;
    let t = stack.torus;
    let d = t.d();
    let q0 = stack.source.q.clone();
    let mut rng = crate::rng::stream_rng(seed, 0);
    let mut rows = Vec::new();
    for dir in 0..directions {
        let params: Vec<f64> = (0..QMatrix::n_params(d))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let raw = QMatrix::from_params_unbounded(d, &params)?;
        let qdot = QMatrix::new_unbounded(
            d,
            raw.entries()
                .iter()
                .map(|v| 0.5 * v / raw.op_norm())
                .collect(),
        )?;
        let plus = build_frd(&gff::green_kernel(&q0.add_scaled(step, &qdot)?, &t)?, &t)?;
        let minus = build_frd(&gff::green_kernel(&q0.add_scaled(-step, &qdot)?, &t)?, &t)?;
        for (lp, lm) in plus.layers.iter().zip(&minus.layers) {
            let diff: Vec<f64> = lp
                .kernel
                .values
                .iter()
                .zip(&lm.kernel.values)
                .map(|(a, b)| (a - b) / (2.0 * step))
                .collect();
            let sup = sup_derivative(&diff, &t, order);
            let norm = scaling_normaliser(t.l(), d, lp.k, order);
            rows.push(QDerivativeRow {
                k: lp.k,
                direction: dir,
                order,
                sup,
                ratio: sup / norm,
            });
        }
    }
    Ok(rows)
}

/// Result of [`coalescence_zero_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalescenceReport {
    pub j_ab: u32,
    /// Layers inspected: `k ≤ min(j_ab, N - 1)`.
    pub layers_checked: Vec<u32>,
    pub max_abs: f64,
    pub passed: bool,
}

/// Verify `∇*_j ∇_i C_k(a, b) = 0` for every layer below the coalescence scale.
pub fn coalescence_zero_check(
    stack: &FrdStack,
    a: &LatticePoint,
    b: &LatticePoint,
) -> Result<CoalescenceReport> {
    let t = stack.torus;
    let j_ab = coalescence_scale(a, b, &t)?;
    let top = j_ab.min(t.n() - 1);
    let mut max_abs: f64 = 0.0;
    let mut checked = Vec::new();
    for k in 1..=top {
        let layer = stack.layer(k);
        for i in 0..t.d() {
            for j in 0..t.d() {
                max_abs = max_abs.max(layer.kernel.grad_grad_cov(a, b, i, j).abs());
            }
        }
        checked.push(k);
    }
    Ok(CoalescenceReport {
        j_ab,
        layers_checked: checked,
        max_abs,
        passed: max_abs <= 1e-10,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gff::green_kernel;
    use crate::lattice::make_torus;
    use rand::Rng;

    fn stack(d: usize, l: usize, n: u32, q: QMatrix) -> FrdStack {
        let t = make_torus(d, l, n).unwrap();
        build_frd(&green_kernel(&q, &t).unwrap(), &t).unwrap()
    }

    fn random_q(d: usize, norm: f64, seed: u64) -> QMatrix {
        let mut rng = crate::rng::stream_rng(seed, 5);
        let p: Vec<f64> = (0..QMatrix::n_params(d))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let raw = QMatrix::from_params_unbounded(d, &p).unwrap();
        QMatrix::new(
            d,
            raw.entries()
                .iter()
                .map(|v| v * norm / raw.op_norm())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn filters_are_bounded_and_telescope() {
        let lm = 12.0;
        let filters: Vec<Filter> = [1, 2, 6, 19, 57]
            .iter()
            .map(|&degree| Filter { degree })
            .collect();
        let mut out = vec![0.0; 6];
        for step in 1..=2000 {
            let lam = lm * step as f64 / 2000.0;
            let th = Filter::theta(lam, lm);
            for f in &filters {
                let g = f.value(th);
                assert!((-1e-15..=1.0 + 1e-15).contains(&g));
                assert!(
                    (f.complement_over_lambda(th, lm) - (1.0 - g) / lam).abs()
                        < 1e-9 * (1.0 + 1.0 / lam)
                );
            }
            layer_values(lam, lm, &filters, &mut out);
            assert!(out.iter().all(|&v| v >= 0.0));
            assert!((out.iter().sum::<f64>() - 1.0 / lam).abs() < 1e-12 / lam);
        }
    }

    #[test]
    fn filter_polynomial_degree() {
        // Finite differences of order deg+1 of G(λ) vanish on a uniform grid.
        for degree in 1..8 {
            let f = Filter { degree };
            let lm = 12.0;
            let h = 0.3;
            let vals: Vec<f64> = (0..=degree + 1)
                .map(|i| f.value(Filter::theta(i as f64 * h, lm)))
                .collect();
            let mut diffs = vals.clone();
            for _ in 0..=degree {
                diffs = diffs.windows(2).map(|w| w[1] - w[0]).collect();
            }
            assert!(diffs[0].abs() < 1e-10, "degree {degree}: {}", diffs[0]);
        }
    }

    #[test]
    fn radii_for_base_three() {
        let r: Vec<usize> = (1..=5).map(|k| support_radius(3, 2, k)).collect();
        assert_eq!(r, vec![0, 2, 8, 27, 84]);
        for k in 1..=4 {
            assert!(2 * support_radius(5, 2, k) < 5usize.pow(k));
            assert!(2 * support_radius(3, 3, k) < 3usize.pow(k));
        }
    }

    #[test]
    fn reconstruction_on_small_torus() {
        let s = stack(2, 3, 2, QMatrix::zero(2));
        assert!(s.reconstruction_error() <= 1e-10);
        assert_eq!(s.layers.len(), 2);
        assert!(s.layers[1].merged);
    }

    #[test]
    fn first_layer_constant_outside_range() {
        let s = stack(2, 3, 3, QMatrix::zero(2));
        let rep = verify_finite_range(&s, 1e-10);
        assert!(rep.passed, "{rep:?}");
        let t = s.torus;
        let l1 = s.layer(1);
        for idx in 0..t.volume() {
            if t.inf_norm_of_index(idx) >= 2 {
                assert!((l1.kernel.values[idx] + l1.tail).abs() < 1e-12);
            }
        }
        assert!(s.layers.iter().all(|l| l.tail >= 0.0));
    }

    #[test]
    fn tails_do_not_depend_on_q() {
        let base = stack(2, 3, 3, QMatrix::zero(2));
        for seed in 0..4 {
            let s = stack(2, 3, 3, random_q(2, 0.3, seed));
            for (a, b) in s.layers.iter().zip(&base.layers) {
                assert!((a.tail - b.tail).abs() <= 1e-8);
            }
            assert!(s.reconstruction_error() <= 1e-10);
            assert!(verify_finite_range(&s, 1e-10).passed);
        }
    }

    #[test]
    fn layers_are_positive_semidefinite() {
        let s = stack(3, 3, 2, random_q(3, 0.45, 2));
        for l in &s.layers {
            assert!(l.kernel.min_spectrum() >= -1e-12);
        }
    }

    #[test]
    fn fault_injection_is_detected() {
        let mut s = stack(2, 3, 3, QMatrix::zero(2));
        let t = s.torus;
        let far = t.index_of(&[10, -9]);
        s.layers[1].kernel.values[far] += 1e-3;
        let rep = verify_finite_range(&s, 1e-10);
        assert!(!rep.passed);
        assert!(!rep.rows[1].passed);
        assert!(rep.rows[0].passed);
    }

    #[test]
    fn single_layer_stack() {
        let s = stack(2, 3, 1, QMatrix::zero(2));
        assert_eq!(s.layers.len(), 1);
        let rep = verify_finite_range(&s, 1e-10);
        assert!(rep.passed);
        assert_eq!(rep.rows[0].max_deviation, None);
        assert!(s.reconstruction_error() < 1e-12);
    }

    #[test]
    fn coalescence_examples() {
        let s = stack(2, 3, 4, QMatrix::zero(2));
        let a = LatticePoint(vec![0, 0]);
        let rep = coalescence_zero_check(&s, &a, &LatticePoint(vec![5, 0])).unwrap();
        assert_eq!(rep.j_ab, 2);
        assert_eq!(rep.layers_checked, vec![1, 2]);
        assert!(rep.passed);
        let rep = coalescence_zero_check(&s, &a, &LatticePoint(vec![1, 0])).unwrap();
        assert_eq!(rep.j_ab, 0);
        assert!(rep.layers_checked.is_empty() && rep.passed);
        let mut rng = crate::rng::stream_rng(3, 0);
        for _ in 0..100 {
            let a = LatticePoint(vec![rng.random_range(-40..=40), rng.random_range(-40..=40)]);
            let b = LatticePoint(vec![rng.random_range(-40..=40), rng.random_range(-40..=40)]);
            if a == b {
                continue;
            }
            assert!(coalescence_zero_check(&s, &a, &b).unwrap().passed);
        }
        assert!(coalescence_zero_check(&s, &a, &a).is_err());
    }

    #[test]
    fn scaling_ratios_are_uniform() {
        let s = stack(2, 3, 4, QMatrix::zero(2));
        for order in 0..=2 {
            let rows = layer_scaling_report(&s, order).unwrap();
            // The first layer has degree 0, a multiple of the identity, so its
            // second-difference ratio sits far below the others.
            let skip = if order == 2 { 1 } else { 0 };
            let (lo, hi) = rows[skip..].iter().fold((f64::MAX, 0.0f64), |(a, b), r| {
                (a.min(r.ratio), b.max(r.ratio))
            });
            assert!(hi / lo < 50.0, "order {order}: {rows:?}");
            if order > 0 {
                assert_eq!(rows[0].ratio, rows[0].sup);
            }
        }
        assert!(layer_scaling_report(&s, 3).is_err());
    }

    #[test]
    fn q_derivatives_are_finite_and_scaled() {
        let s = stack(2, 3, 3, QMatrix::zero(2));
        let rows = q_derivative_report(&s, 2, 3, 1e-4, 1).unwrap();
        assert_eq!(rows.len(), 9);
        // Degree-0 layers do not depend on q at all.
        for r in rows.iter().filter(|r| r.k == 1) {
            assert!(r.sup < 1e-9, "{r:?}");
        }
        let rest: Vec<_> = rows.iter().filter(|r| r.k > 1).collect();
        let (lo, hi) = rest.iter().fold((f64::MAX, 0.0f64), |(a, b), r| {
            (a.min(r.ratio), b.max(r.ratio))
        });
        assert!(lo > 0.0 && hi.is_finite());
        assert!(hi / lo < 200.0, "{rows:?}");
    }

    #[test]
    fn save_and_load() {
        let s = stack(2, 3, 2, random_q(2, 0.2, 1));
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let back = FrdStack::load(dir.path()).unwrap();
        assert_eq!(back.layers.len(), s.layers.len());
        for (a, b) in back.layers.iter().zip(&s.layers) {
            assert_eq!(a.kernel.values, b.kernel.values);
            assert_eq!(
                (a.k, a.tail, a.degree, a.merged),
                (b.k, b.tail, b.degree, b.merged)
            );
            for (x, y) in a.kernel.spectrum.iter().zip(&b.kernel.spectrum) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let path = dir.path().join("layer_01.bin");
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(FrdStack::load(dir.path()).is_err());
    }
}
