//! The perturbing potential, its Taylor remainder and the Mayer function.
//!
//! Potentials are evaluated through truncated Taylor series, so every built-in
//! exposes exact derivatives of any order. Tabulated potentials use a natural
//! cubic spline with linear extrapolation.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Truncated power series `Σ c_n ε^n`.
#[derive(Debug, Clone, PartialEq)]
struct Jet(Vec<f64>);

impl Jet {
    fn variable(s: f64, order: usize) -> Self {
        let mut c = vec![0.0; order + 1];
        c[0] = s;
        if order > 0 {
            c[1] = 1.0;
        }
        Jet(c)
    }

    fn mul(&self, other: &Jet) -> Jet {
        let n = self.0.len();
        let mut c = vec![0.0; n];
        for i in 0..n {
            for j in 0..n - i {
                c[i + j] += self.0[i] * other.0[j];
            }
        }
        Jet(c)
    }

    fn scale(mut self, a: f64) -> Jet {
        self.0.iter_mut().for_each(|v| *v *= a);
        self
    }

    fn exp(&self) -> Jet {
        let n = self.0.len();
        let mut b = vec![0.0; n];
        b[0] = self.0[0].exp();
        for m in 1..n {
            let mut acc = 0.0;
            for k in 1..=m {
                acc += k as f64 * self.0[k] * b[m - k];
            }
            b[m] = acc / m as f64;
        }
        Jet(b)
    }

    /// `n`-th derivative at the expansion point.
    fn derivative(&self, n: usize) -> f64 {
        self.0[n] * factorial(n)
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Natural cubic spline through `(s_i, v_i)`, extended linearly outside the knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spline {
    knots: Vec<f64>,
    values: Vec<f64>,
    second: Vec<f64>,
}

impl Spline {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let n = knots.len();
        if n != values.len() {
            return Err(Error::LengthMismatch {
                expected: n,
                got: values.len(),
            });
        }
        if n < 3 {
            return Err(Error::InvalidArgument(
                "spline needs at least 3 knots".into(),
            ));
        }
        if knots.windows(2).any(|w| w[1] <= w[0])
            || knots.iter().chain(&values).any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument(
                "spline knots must be finite and strictly increasing".into(),
            ));
        }
        // Tridiagonal solve for the interior second derivatives.
        let mut second = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        for i in 1..n - 1 {
            let h0 = knots[i] - knots[i - 1];
            let h1 = knots[i + 1] - knots[i];
            diag[i] = 2.0 * (h0 + h1);
            rhs[i] = 6.0 * ((values[i + 1] - values[i]) / h1 - (values[i] - values[i - 1]) / h0);
        }
        for i in 2..n - 1 {
            let h = knots[i] - knots[i - 1];
            let w = h / diag[i - 1];
            diag[i] -= w * h;
            rhs[i] -= w * rhs[i - 1];
        }
        for i in (1..n - 1).rev() {
            let h1 = knots[i + 1] - knots[i];
            second[i] = (rhs[i] - h1 * second[i + 1]) / diag[i];
        }
        Ok(Self {
            knots,
            values,
            second,
        })
    }

    /// Read `s,V(s)` rows; a non-numeric first line is treated as a header.
    pub fn from_csv<R: Read>(r: &mut R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut s = Vec::new();
        let mut v = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split(',').map(str::trim);
            let (a, b) = match (parts.next(), parts.next()) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::Format(format!(
                        "line {}: expected two columns",
                        lineno + 1
                    )))
                }
            };
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(x), Ok(y)) => {
                    s.push(x);
                    v.push(y);
                }
                _ if lineno == 0 => continue,
                _ => return Err(Error::Format(format!("line {}: not numeric", lineno + 1))),
            }
        }
        Self::new(s, v)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_csv(&mut std::fs::File::open(path)?)
    }

    /// Local cubic `Σ c_n (s - s0)^n` valid around `s0`.
    fn local_coefficients(&self, s0: f64) -> [f64; 4] {
        let n = self.knots.len();
        let (x, y, m) = (&self.knots, &self.values, &self.second);
        let slope_at = |i: usize| -> f64 {
            if i == 0 {
                let h = x[1] - x[0];
                (y[1] - y[0]) / h - h * (2.0 * m[0] + m[1]) / 6.0
            } else {
                let h = x[i] - x[i - 1];
                (y[i] - y[i - 1]) / h + h * (m[i - 1] + 2.0 * m[i]) / 6.0
            }
        };
        if s0 <= x[0] {
            let g = slope_at(0);
            return [y[0] + g * (s0 - x[0]), g, 0.0, 0.0];
        }
        if s0 >= x[n - 1] {
            let g = slope_at(n - 1);
            return [y[n - 1] + g * (s0 - x[n - 1]), g, 0.0, 0.0];
        }
        let i = x.partition_point(|&k| k <= s0).clamp(1, n - 1);
        let (x0, x1) = (x[i - 1], x[i]);
        let h = x1 - x0;
        let (a, b) = ((x1 - s0) / h, (s0 - x0) / h);
        let value = a * y[i - 1]
            + b * y[i]
            + ((a * a * a - a) * m[i - 1] + (b * b * b - b) * m[i]) * h * h / 6.0;
        let d1 = (y[i] - y[i - 1]) / h - (3.0 * a * a - 1.0) * h * m[i - 1] / 6.0
            + (3.0 * b * b - 1.0) * h * m[i] / 6.0;
        let d2 = a * m[i - 1] + b * m[i];
        let d3 = (m[i] - m[i - 1]) / h;
        [value, d1, d2 / 2.0, d3 / 6.0]
    }
}

/// Shape of the perturbation `V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialKind {
    /// `V ≡ 0`.
    Zero,
    /// `V(s) = κ s⁴`.
    Quartic { kappa: f64 },
    /// `V(s) = κ s⁴ e^{-s²}`.
    GaussQuartic { kappa: f64 },
    /// `V(s) = a s² e^{-s²}`; violates `V''(0) = 0` unless `a = 0`.
    GaussQuadratic { a: f64 },
    /// Tabulated spline.
    Spline(Spline),
}

/// Potential together with its regularity indices and coercivity constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub kind: PotentialKind,
    pub r0: usize,
    pub r1: usize,
    pub omega: f64,
}

impl PotentialSpec {
    pub fn new(kind: PotentialKind) -> Self {
        Self {
            kind,
            r0: 3,
            r1: 2,
            omega: 0.05,
        }
    }

    pub fn zero() -> Self {
        Self::new(PotentialKind::Zero)
    }

    pub fn quartic(kappa: f64) -> Self {
        Self::new(PotentialKind::Quartic { kappa })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, PotentialKind::Zero)
    }

    /// Reject invalid indices or `ω ∉ (0, 1/16)`.
    pub fn validate(&self) -> Result<()> {
        if self.r0 < 3 || self.r1 < 2 {
            return Err(Error::InvalidArgument("need r0 ≥ 3 and r1 ≥ 2".into()));
        }
        if !(self.omega > 0.0 && self.omega < 1.0 / 16.0) {
            return Err(Error::InvalidArgument(format!(
                "ω = {} must lie in (0, 1/16)",
                self.omega
            )));
        }
        Ok(())
    }

    fn jet(&self, s: f64, order: usize) -> Jet {
        let x = Jet::variable(s, order);
        match &self.kind {
            PotentialKind::Zero => Jet(vec![0.0; order + 1]),
            PotentialKind::Quartic { kappa } => {
                let x2 = x.mul(&x);
                x2.mul(&x2).scale(*kappa)
            }
            PotentialKind::GaussQuartic { kappa } => {
                let x2 = x.mul(&x);
                x2.mul(&x2).mul(&x2.clone().scale(-1.0).exp()).scale(*kappa)
            }
            PotentialKind::GaussQuadratic { a } => {
                let x2 = x.mul(&x);
                x2.mul(&x2.clone().scale(-1.0).exp()).scale(*a)
            }
            PotentialKind::Spline(sp) => {
                let c = sp.local_coefficients(s);
                let mut out = vec![0.0; order + 1];
                for (o, v) in out.iter_mut().zip(c) {
                    *o = v;
                }
                Jet(out)
            }
        }
    }

    pub fn v(&self, s: f64) -> f64 {
        match &self.kind {
            PotentialKind::Zero => 0.0,
            PotentialKind::Quartic { kappa } => kappa * (s * s) * (s * s),
            PotentialKind::GaussQuartic { kappa } => kappa * (s * s) * (s * s) * (-s * s).exp(),
            PotentialKind::GaussQuadratic { a } => a * s * s * (-s * s).exp(),
            PotentialKind::Spline(sp) => sp.local_coefficients(s)[0],
        }
    }

    /// `V^{(n)}(s)`.
    pub fn derivative(&self, s: f64, n: usize) -> f64 {
        self.jet(s, n).derivative(n)
    }

    /// `[V(s), V'(s), …, V^{(order)}(s)]`.
    pub fn derivatives(&self, s: f64, order: usize) -> Vec<f64> {
        let j = self.jet(s, order);
        (0..=order).map(|n| j.derivative(n)).collect()
    }

    /// `W(s) = s²/2 + V(s)`.
    pub fn w(&self, s: f64) -> f64 {
        0.5 * s * s + self.v(s)
    }

    /// `W^{(n)}(s)`.
    pub fn w_derivative(&self, s: f64, n: usize) -> f64 {
        let base = match n {
            0 => 0.5 * s * s,
            1 => s,
            2 => 1.0,
            _ => 0.0,
        };
        base + self.derivative(s, n)
    }

    /// Potential scaled by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        let kind = match &self.kind {
            PotentialKind::Zero => PotentialKind::Zero,
            PotentialKind::Quartic { kappa } => PotentialKind::Quartic { kappa: c * kappa },
            PotentialKind::GaussQuartic { kappa } => {
                PotentialKind::GaussQuartic { kappa: c * kappa }
            }
            PotentialKind::GaussQuadratic { a } => PotentialKind::GaussQuadratic { a: c * a },
            PotentialKind::Spline(sp) => PotentialKind::Spline(Spline::new(
                sp.knots.clone(),
                sp.values.iter().map(|v| c * v).collect(),
            )?),
        };
        Ok(Self {
            kind,
            ..self.clone()
        })
    }
}

/// `V̄(z, u) = V(z + u) - V(u) - V'(u) z`.
pub fn vbar(spec: &PotentialSpec, z: f64, u: f64) -> f64 {
    if z == 0.0 {
        return 0.0;
    }
    let du = spec.derivatives(u, 1);
    spec.v(z + u) - du[0] - du[1] * z
}

/// Tilt, inverse temperature and norm parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MayerParams {
    pub u: Vec<f64>,
    pub beta: f64,
    pub zeta: f64,
}

impl MayerParams {
    pub fn new(u: Vec<f64>, beta: f64, zeta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "β = {beta} must be positive"
            )));
        }
        if !(zeta > 0.0 && zeta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "ζ = {zeta} must lie in (0, 1)"
            )));
        }
        Ok(Self { u, beta, zeta })
    }
}

/// Largest exponent passed to `exp` before clamping.
pub const EXPONENT_CLAMP: f64 = 700.0;

/// `𝒦(z)` and whether the exponent had to be clamped.
pub fn mayer_checked(spec: &PotentialSpec, params: &MayerParams, z: &[f64]) -> (f64, bool) {
    let sb = params.beta.sqrt();
    let mut s = 0.0;
    for (i, &zi) in z.iter().enumerate() {
        s += vbar(spec, zi / sb, params.u.get(i).copied().unwrap_or(0.0));
    }
    let e = -params.beta * s;
    if e > EXPONENT_CLAMP {
        (EXPONENT_CLAMP.exp_m1(), true)
    } else {
        (e.exp_m1(), false)
    }
}

/// `𝒦_{u,β,V}(z) = exp(-β Σ_i V̄(z_i/√β, u_i)) - 1`.
pub fn mayer(spec: &PotentialSpec, params: &MayerParams, z: &[f64]) -> f64 {
    mayer_checked(spec, params, z).0
}

/// Sampling grid for the weighted sup norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormGrid {
    /// Grid points per axis (odd, so the origin is included).
    pub points_per_axis: usize,
    /// Half-width; `None` picks the radius where the weight drops below `1e-12`.
    pub radius: Option<f64>,
}

impl Default for NormGrid {
    fn default() -> Self {
        Self {
            points_per_axis: 81,
            radius: None,
        }
    }
}

/// Result of [`mayer_norm_estimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub value: f64,
    pub argmax: Vec<f64>,
    pub radius: f64,
    /// The maximiser sits on the grid boundary.
    pub boundary_flag: bool,
    pub clamped: bool,
}

/// Central-difference weights `(offset, weight)` for derivatives of order ≤ 3.
fn central_stencil(order: usize) -> &'static [(i32, f64)] {
    match order {
        0 => &[(0, 1.0)],
        1 => &[(-1, -0.5), (1, 0.5)],
        2 => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
        3 => &[(-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)],
        _ => &[],
    }
}

/// Multi-indices of length `d` with total order `≤ max`.
fn multi_indices_upto(d: usize, max: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..d {
        let mut next = Vec::new();
        for a in &out {
            let used: usize = a.iter().sum();
            for k in 0..=max - used {
                let mut b = a.clone();
                b.push(k);
                next.push(b);
            }
        }
        out = next;
    }
    out
}

/// `Σ_{|α| ≤ r0} |∂^α 𝒦(z)| / α!`, derivatives by tensor central differences.
pub fn mayer_jet_sum(spec: &PotentialSpec, params: &MayerParams, z: &[f64]) -> (f64, bool) {
    let d = z.len();
    let znorm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = 1e-2 * (1.0 + znorm);
    let order = spec.r0.min(3);
    let mut clamped = false;
    let mut cache = std::collections::HashMap::new();
    let mut eval = |off: &[i32]| -> f64 {
        *cache.entry(off.to_vec()).or_insert_with(|| {
            let p: Vec<f64> = z
                .iter()
                .zip(off)
                .map(|(zi, o)| zi + *o as f64 * h)
                .collect();
            let (v, c) = mayer_checked(spec, params, &p);
            clamped |= c;
            v
        })
    };
    let mut total = 0.0;
    for alpha in multi_indices_upto(d, order) {
        let stencils: Vec<&[(i32, f64)]> = alpha.iter().map(|&a| central_stencil(a)).collect();
        let mut acc = 0.0;
        let mut pos = vec![0usize; d];
        'outer: loop {
            let mut off = vec![0i32; d];
            let mut w = 1.0;
            for axis in 0..d {
                let (o, wt) = stencils[axis][pos[axis]];
                off[axis] = o;
                w *= wt;
            }
            acc += w * eval(&off);
            for axis in 0..d {
                pos[axis] += 1;
                if pos[axis] < stencils[axis].len() {
                    continue 'outer;
                }
                pos[axis] = 0;
            }
            break;
        }
        let total_order: usize = alpha.iter().sum();
        let afact: f64 = alpha.iter().map(|&a| factorial(a)).product();
        total += (acc / h.powi(total_order as i32)).abs() / afact;
    }
    (total, clamped)
}

/// Grid estimate of `‖𝒦‖_ζ = sup_z Σ_{|α|≤r0} |∂^α𝒦(z)|/α! · e^{-(1-ζ)|z|²/2}`.
pub fn mayer_norm_estimate(
    spec: &PotentialSpec,
    params: &MayerParams,
    grid: NormGrid,
) -> Result<NormEstimate> {
    let d = params.u.len();
    if d == 0 {
        return Err(Error::InvalidArgument(
            "tilt vector must have length d ≥ 1".into(),
        ));
    }
    let m = grid.points_per_axis.max(3) | 1;
    if m.checked_pow(d as u32).is_none_or(|c| c > 4_000_000) {
        return Err(Error::TooLarge {
            volume: m.saturating_pow(d as u32),
            limit: 4_000_000,
        });
    }
    let decay = 1.0 - params.zeta;
    let radius = grid
        .radius
        .unwrap_or_else(|| (2.0 * 1e12f64.ln() / decay).sqrt());
    let step = 2.0 * radius / (m - 1) as f64;
    let mut best = NormEstimate {
        value: 0.0,
        argmax: vec![0.0; d],
        radius,
        boundary_flag: false,
        clamped: false,
    };
    let mut best_pos = vec![m / 2; d];
    let mut pos = vec![0usize; d];
    'outer: loop {
        let z: Vec<f64> = pos.iter().map(|&p| -radius + p as f64 * step).collect();
        let z2: f64 = z.iter().map(|v| v * v).sum();
        let (s, c) = mayer_jet_sum(spec, params, &z);
        best.clamped |= c;
        let val = s * (-0.5 * decay * z2).exp();
        if val > best.value {
            best.value = val;
            best.argmax = z;
            best_pos = pos.clone();
        }
        for axis in 0..d {
            pos[axis] += 1;
            if pos[axis] < m {
                continue 'outer;
            }
            pos[axis] = 0;
        }
        break;
    }
    best.boundary_flag = best.value > 0.0 && best_pos.iter().any(|&p| p == 0 || p == m - 1);
    Ok(best)
}

/// Outcome of [`check_assumptions`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub v1_at_zero: f64,
    pub v2_at_zero: f64,
    pub derivatives_vanish: bool,
    pub omega_ok: bool,
    /// `min_{s≠0} (W(s) - ω s²)/s²` over the grid; by separability this also bounds `ΣW(z_i) - ω|z|²` relative to `|z|²`.
    pub min_margin_ratio: f64,
    pub margin_ok: bool,
    /// Rows `(t, Ψ(t), t^{-2} ln Ψ(t))`.
    pub psi: Vec<(f64, f64, f64)>,
    pub psi_trend_ok: bool,
    pub passed: bool,
}

/// `Ψ(t)` in the separable reduction: mixed partials of `Σ W(z_i)` vanish, so
/// `Ψ(t) = d · sup_{|s|≤t} Σ_{n=3}^{r0+r1} |W^{(n)}(s)|/n!`, taken over the cube.
pub fn psi(spec: &PotentialSpec, d: usize, t: f64, points: usize) -> f64 {
    let top = spec.r0 + spec.r1;
    let mut best: f64 = 0.0;
    for i in 0..points {
        let s = -t + 2.0 * t * i as f64 / (points - 1) as f64;
        let ders = spec.derivatives(s, top);
        let v: f64 = (3..=top).map(|n| ders[n].abs() / factorial(n)).sum();
        best = best.max(v);
    }
    d as f64 * best
}

/// Check the standing assumptions on `V` on the 1-D grid `|s| ≤ radius`.
pub fn check_assumptions(
    spec: &PotentialSpec,
    d: usize,
    radius: f64,
    points: usize,
) -> AssumptionReport {
    let ders = spec.derivatives(0.0, 2);
    let derivatives_vanish = ders[1].abs() <= 1e-8 && ders[2].abs() <= 1e-8;
    let omega_ok = spec.omega > 0.0 && spec.omega < 1.0 / 16.0;
    let mut min_ratio = f64::INFINITY;
    for i in 0..points {
        let s = -radius + 2.0 * radius * i as f64 / (points - 1) as f64;
        if s.abs() < 1e-12 {
            continue;
        }
        min_ratio = min_ratio.min((spec.w(s) - spec.omega * s * s) / (s * s));
    }
    let margin_ok = min_ratio >= -1e-12;
    let psi_rows: Vec<(f64, f64, f64)> = [1.0, 2.0, 4.0, 8.0, 16.0]
        .iter()
        .map(|&t| {
            let p = psi(spec, d, t, 4001);
            let r = if p > 0.0 {
                p.ln() / (t * t)
            } else {
                f64::NEG_INFINITY
            };
            (t, p, r)
        })
        .collect();
    let psi_trend_ok = psi_rows.iter().all(|r| r.1 == 0.0) || {
        let last = psi_rows.last().map_or(0.0, |r| r.2);
        let tail_decreasing = psi_rows
            .windows(2)
            .skip(1)
            .all(|w| w[1].2.abs() <= w[0].2.abs() + 1e-12);
        tail_decreasing && last.abs() < 0.1
    };
    AssumptionReport {
        v1_at_zero: ders[1],
        v2_at_zero: ders[2],
        derivatives_vanish,
        omega_ok,
        min_margin_ratio: min_ratio,
        margin_ok,
        psi: psi_rows,
        psi_trend_ok,
        passed: derivatives_vanish && omega_ok && margin_ok && psi_trend_ok,
    }
}
