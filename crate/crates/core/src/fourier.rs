//! Multi-dimensional discrete Fourier transforms on the torus.
//!
//! Conventions: `forward` computes `X(m) = Σ_x f(x) e^{-2πi m·x/side}` and
//! `inverse` computes `Σ_m X(m) e^{+2πi m·x/side}` without normalisation.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::lattice::Torus;

pub use rustfft::num_complex::Complex64 as C64;

/// Cached forward and inverse plans for one torus.
#[derive(Clone)]
pub struct NdFft {
    torus: Torus,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for NdFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NdFft").field("torus", &self.torus).finish()
    }
}

impl NdFft {
    pub fn new(torus: Torus) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(torus.side());
        let inv = planner.plan_fft_inverse(torus.side());
        Self { torus, fwd, inv }
    }

    pub fn torus(&self) -> Torus {
        self.torus
    }

    fn along_axes(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let t = self.torus;
        let side = t.side();
        let mut line = vec![Complex64::new(0.0, 0.0); side];
        let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        for axis in 0..t.d() {
            let stride = t.stride(axis);
            if stride == 1 {
                for chunk in data.chunks_exact_mut(side) {
                    plan.process_with_scratch(chunk, &mut scratch);
                }
                continue;
            }
            let block = stride * side;
            for outer in (0..data.len()).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    for (j, z) in line.iter_mut().enumerate() {
                        *z = data[base + j * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (j, z) in line.iter().enumerate() {
                        data[base + j * stride] = *z;
                    }
                }
            }
        }
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.along_axes(data, &self.fwd);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.along_axes(data, &self.inv);
    }

    pub fn forward_real(&self, values: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut data);
        data
    }

    /// Real part of the normalised inverse transform, `(1/V) Σ_m X(m) e^{ip·x}`.
    pub fn inverse_real_normalized(&self, spectrum: &[Complex64]) -> Vec<f64> {
        let mut data = spectrum.to_vec();
        self.inverse(&mut data);
        let v = self.torus.volume() as f64;
        data.iter().map(|z| z.re / v).collect()
    }

    /// Real part of `(1/V) Σ_m s(m) e^{ip·x}` for a real spectrum.
    pub fn synthesize_real(&self, spectrum: &[f64]) -> Vec<f64> {
        let data: Vec<Complex64> = spectrum.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        self.inverse_real_normalized(&data)
    }

    /// Circular convolution `Σ_y k(x - y) f(y)`.
    pub fn convolve(&self, kernel: &[f64], f: &[f64]) -> Vec<f64> {
        let kh = self.forward_real(kernel);
        let mut fh = self.forward_real(f);
        for (a, b) in fh.iter_mut().zip(&kh) {
            *a *= b;
        }
        self.inverse_real_normalized(&fh)
    }
}

/// Lattice momenta `p_i = 2π m_i / side` for each storage index.
pub fn momenta(torus: &Torus, idx: usize, out: &mut [f64]) {
    let mut m = [0usize; crate::lattice::MAX_DIM];
    torus.unsigned_coords(idx, &mut m[..torus.d()]);
    let side = torus.side() as f64;
    for (o, &mi) in out.iter_mut().zip(&m[..torus.d()]) {
        *o = 2.0 * PI * mi as f64 / side;
    }
}

/// Separable direct DFT, usable for any side; `sign = -1` is forward.
pub fn dft_direct(torus: &Torus, data: &[Complex64], sign: f64) -> Vec<Complex64> {
    let side = torus.side();
    let twiddle: Vec<Complex64> = (0..side)
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / side as f64))
        .collect();
    let mut cur = data.to_vec();
    let mut line = vec![Complex64::new(0.0, 0.0); side];
    for axis in 0..torus.d() {
        let stride = torus.stride(axis);
        let block = stride * side;
        for outer in (0..cur.len()).step_by(block) {
            for inner in 0..stride {
                let base = outer + inner;
                for (m, out) in line.iter_mut().enumerate() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for x in 0..side {
                        acc += cur[base + x * stride] * twiddle[(m * x) % side];
                    }
                    *out = acc;
                }
                for (j, z) in line.iter().enumerate() {
                    cur[base + j * stride] = *z;
                }
            }
        }
    }
    cur
}
