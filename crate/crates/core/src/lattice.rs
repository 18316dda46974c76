//! The periodic lattice `Λ_N = (Z / L^N Z)^d`, its metrics, fields and discrete gradients.
//!
//! Values of a [`Field`] are stored row-major over coordinates reduced modulo
//! `side`, so the origin sits at index 0 and the layout matches the discrete
//! Fourier transform. Points handed out by [`Torus::point`] are always canonical:
//! every coordinate lies in `[-(side-1)/2, (side-1)/2]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported dimension.
pub const MAX_DIM: usize = 6;

/// Default cap on the number of lattice points.
pub const DEFAULT_VOLUME_LIMIT: usize = 1 << 24;

/// Discrete torus of side `L^N` in `d` dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Torus {
    d: usize,
    l: usize,
    n: u32,
    side: usize,
    volume: usize,
}

/// Norm used by [`Torus::periodic_dist`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    Euclid,
    Inf,
}

/// A point of the torus in canonical coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticePoint(pub Vec<i64>);

impl LatticePoint {
    pub fn new(coords: Vec<i64>) -> Self {
        Self(coords)
    }

    pub fn origin(d: usize) -> Self {
        Self(vec![0; d])
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl From<Vec<i64>> for LatticePoint {
    fn from(v: Vec<i64>) -> Self {
        Self(v)
    }
}

impl std::fmt::Display for LatticePoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// Build the torus `Λ_N` with the default volume limit.
pub fn make_torus(d: usize, l: usize, n: u32) -> Result<Torus> {
    Torus::with_limit(d, l, n, DEFAULT_VOLUME_LIMIT)
}

impl Torus {
    pub fn new(d: usize, l: usize, n: u32) -> Result<Self> {
        make_torus(d, l, n)
    }

    /// Build a torus, rejecting volumes above `limit`.
    pub fn with_limit(d: usize, l: usize, n: u32, limit: usize) -> Result<Self> {
        if !(2..=MAX_DIM).contains(&d) {
            return Err(Error::Geometry(format!(
                "dimension {d} outside 2..={MAX_DIM}"
            )));
        }
        if l < 3 || l.is_multiple_of(2) {
            return Err(Error::Geometry(format!(
                "L = {l} must be odd and at least 3"
            )));
        }
        if n < 1 {
            return Err(Error::Geometry("N must be at least 1".into()));
        }
        let side = (l as u64)
            .checked_pow(n)
            .filter(|&s| s <= i64::MAX as u64 / 4)
            .ok_or_else(|| Error::Geometry(format!("side {l}^{n} overflows")))?;
        let volume = side
            .checked_pow(d as u32)
            .filter(|&v| v <= usize::MAX as u64)
            .ok_or_else(|| Error::Geometry(format!("volume ({side})^{d} overflows")))?;
        if volume as usize > limit {
            return Err(Error::TooLarge {
                volume: volume as usize,
                limit,
            });
        }
        Ok(Self {
            d,
            l,
            n,
            side: side as usize,
            volume: volume as usize,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn volume(&self) -> usize {
        self.volume
    }

    /// `(side - 1) / 2`, the largest canonical coordinate.
    pub fn half(&self) -> i64 {
        (self.side as i64 - 1) / 2
    }

    /// `L^k` as an integer.
    pub fn block_side(&self, k: u32) -> i64 {
        (self.l as i64).pow(k)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.side.pow((self.d - 1 - axis) as u32)
    }

    /// Reduce an integer coordinate to the canonical range.
    pub fn canonical(&self, c: i64) -> i64 {
        let s = self.side as i64;
        let r = c.rem_euclid(s);
        if r > self.half() {
            r - s
        } else {
            r
        }
    }

    pub fn canonicalize(&self, p: &LatticePoint) -> LatticePoint {
        LatticePoint(p.0.iter().map(|&c| self.canonical(c)).collect())
    }

    /// Storage index of an arbitrary integer coordinate vector (wrapped).
    pub fn index_of(&self, coords: &[i64]) -> usize {
        debug_assert_eq!(coords.len(), self.d);
        let s = self.side as i64;
        coords
            .iter()
            .fold(0usize, |acc, &c| acc * self.side + c.rem_euclid(s) as usize)
    }

    pub fn index(&self, p: &LatticePoint) -> usize {
        self.index_of(&p.0)
    }

    /// Coordinates reduced to `[0, side)` for a storage index.
    pub fn unsigned_coords(&self, mut idx: usize, out: &mut [usize]) {
        for axis in (0..self.d).rev() {
            out[axis] = idx % self.side;
            idx /= self.side;
        }
    }

    /// Canonical coordinates of a storage index.
    pub fn coords_into(&self, mut idx: usize, out: &mut [i64]) {
        let h = self.half() as usize;
        for axis in (0..self.d).rev() {
            let u = idx % self.side;
            idx /= self.side;
            out[axis] = if u > h {
                u as i64 - self.side as i64
            } else {
                u as i64
            };
        }
    }

    pub fn point(&self, idx: usize) -> LatticePoint {
        let mut c = vec![0; self.d];
        self.coords_into(idx, &mut c);
        LatticePoint(c)
    }

    /// All points in storage order.
    pub fn points(&self) -> impl Iterator<Item = LatticePoint> + '_ {
        (0..self.volume).map(move |i| self.point(i))
    }

    /// Index of `idx + step * e_axis`, wrapped.
    #[inline]
    pub fn shift(&self, idx: usize, axis: usize, step: i64) -> usize {
        let stride = self.stride(axis);
        let u = (idx / stride) % self.side;
        let nu = (u as i64 + step).rem_euclid(self.side as i64) as usize;
        idx + nu * stride - u * stride
    }

    /// Index of `idx + disp`, wrapped.
    pub fn offset(&self, idx: usize, disp: &[i64]) -> usize {
        let mut out = idx;
        for (axis, &s) in disp.iter().enumerate() {
            if s != 0 {
                out = self.shift(out, axis, s);
            }
        }
        out
    }

    /// Quotient distance between two points.
    pub fn periodic_dist(&self, x: &LatticePoint, y: &LatticePoint, norm: Norm) -> f64 {
        let comps =
            x.0.iter()
                .zip(&y.0)
                .map(|(&a, &b)| self.canonical(a - b).abs());
        match norm {
            Norm::Inf => comps.max().unwrap_or(0) as f64,
            Norm::Euclid => (comps.map(|c| (c * c) as f64).sum::<f64>()).sqrt(),
        }
    }

    /// Squared periodic Euclidean distance as an exact integer.
    pub fn periodic_dist2(&self, x: &LatticePoint, y: &LatticePoint) -> i64 {
        x.0.iter()
            .zip(&y.0)
            .map(|(&a, &b)| self.canonical(a - b).pow(2))
            .sum()
    }

    /// Periodic ∞-norm of a storage index, measured from the origin.
    pub fn inf_norm_of_index(&self, idx: usize) -> i64 {
        let mut c = [0i64; MAX_DIM];
        self.coords_into(idx, &mut c[..self.d]);
        c[..self.d].iter().map(|v| v.abs()).max().unwrap_or(0)
    }

    /// Unit vector `e_axis` as a point.
    pub fn unit(&self, axis: usize) -> LatticePoint {
        let mut c = vec![0; self.d];
        c[axis] = 1;
        LatticePoint(c)
    }
}

/// Real-valued configuration on a torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub torus: Torus,
    pub values: Vec<f64>,
    /// Marks membership in the mean-zero subspace.
    pub mean_zero: bool,
}

impl Field {
    pub fn zeros(torus: Torus) -> Self {
        Self {
            torus,
            values: vec![0.0; torus.volume()],
            mean_zero: true,
        }
    }

    pub fn constant(torus: Torus, c: f64) -> Self {
        Self {
            torus,
            values: vec![c; torus.volume()],
            mean_zero: c == 0.0,
        }
    }

    pub fn new(torus: Torus, values: Vec<f64>) -> Result<Self> {
        if values.len() != torus.volume() {
            return Err(Error::LengthMismatch {
                expected: torus.volume(),
                got: values.len(),
            });
        }
        Ok(Self {
            torus,
            values,
            mean_zero: false,
        })
    }

    /// Wrap values that are already mean-zero, checking the invariant.
    pub fn new_mean_zero(torus: Torus, values: Vec<f64>) -> Result<Self> {
        let mut f = Self::new(torus, values)?;
        if !f.satisfies_mean_zero() {
            return Err(Error::NotMeanZero);
        }
        f.mean_zero = true;
        Ok(f)
    }

    pub fn from_fn(torus: Torus, f: impl Fn(&LatticePoint) -> f64) -> Self {
        let values = torus.points().map(|p| f(&p)).collect();
        Self {
            torus,
            values,
            mean_zero: false,
        }
    }

    /// Indicator of a single point.
    pub fn delta(torus: Torus, x: &LatticePoint) -> Self {
        let mut f = Self::zeros(torus);
        f.mean_zero = false;
        f.values[torus.index(x)] = 1.0;
        f
    }

    pub fn get(&self, x: &LatticePoint) -> f64 {
        self.values[self.torus.index(x)]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Whether `|Σ f| ≤ 1e-10 · volume · max|f|`.
    pub fn satisfies_mean_zero(&self) -> bool {
        self.sum().abs() <= 1e-10 * self.values.len() as f64 * self.sup_norm()
    }

    /// Lattice inner product `Σ_x f(x) g(x)`.
    pub fn inner(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn scaled(&self, c: f64) -> Field {
        Field {
            torus: self.torus,
            values: self.values.iter().map(|v| c * v).collect(),
            mean_zero: self.mean_zero,
        }
    }

    pub fn add_scaled(&mut self, c: f64, other: &Field) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        self.mean_zero = self.mean_zero && other.mean_zero;
    }

    /// Forward difference `∇_axis f(x) = f(x + e_axis) - f(x)`.
    pub fn forward_diff(&self, axis: usize) -> Field {
        forward_diff(self, axis)
    }

    /// Backward difference `∇*_axis f(x) = f(x - e_axis) - f(x)`.
    pub fn backward_diff(&self, axis: usize) -> Field {
        backward_diff(self, axis)
    }

    pub fn project_mean_zero(&self) -> Field {
        project_mean_zero(self)
    }
}

fn shifted_diff(f: &Field, axis: usize, step: i64) -> Field {
    let t = f.torus;
    assert!(
        axis < t.d(),
        "direction {axis} out of range for d = {}",
        t.d()
    );
    let values = (0..t.volume())
        .map(|i| f.values[t.shift(i, axis, step)] - f.values[i])
        .collect();
    Field {
        torus: t,
        values,
        mean_zero: true,
    }
}

/// `∇_axis f` with periodic wrap; directions are 0-based.
pub fn forward_diff(f: &Field, axis: usize) -> Field {
    shifted_diff(f, axis, 1)
}

/// `∇*_axis f`, the adjoint of [`forward_diff`].
pub fn backward_diff(f: &Field, axis: usize) -> Field {
    shifted_diff(f, axis, -1)
}

/// Subtract the spatial mean.
pub fn project_mean_zero(f: &Field) -> Field {
    let m = f.mean();
    Field {
        torus: f.torus,
        values: f.values.iter().map(|v| v - m).collect(),
        mean_zero: true,
    }
}

/// Apply `∇^alpha = Π_i ∇_i^{alpha_i}` (forward differences).
pub fn multi_forward_diff(f: &Field, alpha: &[u8]) -> Field {
    let mut out = f.clone();
    for (axis, &a) in alpha.iter().enumerate() {
        for _ in 0..a {
            out = forward_diff(&out, axis);
        }
    }
    out
}

/// Multi-indices of a given order in `d` dimensions, in lexicographic order.
pub fn multi_indices(d: usize, order: usize) -> Vec<Vec<u8>> {
    fn rec(d: usize, left: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if cur.len() == d - 1 {
            cur.push(left as u8);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for a in (0..=left).rev() {
            cur.push(a as u8);
            rec(d, left - a, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, order, &mut Vec::with_capacity(d), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(d: usize, l: usize, n: u32) -> Torus {
        make_torus(d, l, n).unwrap()
    }

    #[test]
    fn sizes() {
        assert_eq!((t(2, 3, 1).side(), t(2, 3, 1).volume()), (3, 9));
        assert_eq!((t(2, 3, 2).side(), t(2, 3, 2).volume()), (9, 81));
        assert!(make_torus(2, 4, 1).is_err());
        assert!(make_torus(2, 1, 1).is_err());
        assert!(make_torus(1, 3, 1).is_err());
        assert!(matches!(
            Torus::with_limit(3, 3, 5, 1000),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn canonical_points() {
        let g = t(2, 3, 2);
        for p in g.points() {
            assert!(p.0.iter().all(|c| c.abs() <= 4));
            assert_eq!(g.point(g.index(&p)), p);
        }
        assert_eq!(g.point(0), LatticePoint::origin(2));
    }

    #[test]
    fn distances() {
        let g = t(2, 3, 3);
        let o = LatticePoint::origin(2);
        let y = g.canonicalize(&LatticePoint(vec![26, 0]));
        assert_eq!(y, LatticePoint(vec![-1, 0]));
        assert_eq!(g.periodic_dist(&o, &y, Norm::Inf), 1.0);
        assert_eq!(g.periodic_dist(&o, &o, Norm::Euclid), 0.0);
        let g9 = t(2, 3, 2);
        assert_eq!(
            g9.periodic_dist(&o, &LatticePoint(vec![4, 4]), Norm::Inf),
            4.0
        );
    }

    #[test]
    fn diffs_of_delta() {
        let g = t(2, 3, 1);
        let o = LatticePoint::origin(2);
        let d = Field::delta(g, &o);
        let f = forward_diff(&d, 0);
        assert_eq!(f.get(&o), -1.0);
        assert_eq!(f.get(&LatticePoint(vec![-1, 0])), 1.0);
        assert_eq!(f.values.iter().filter(|v| **v != 0.0).count(), 2);
        let b = backward_diff(&d, 0);
        assert_eq!(b.get(&o), -1.0);
        assert_eq!(b.get(&LatticePoint(vec![1, 0])), 1.0);
        assert_eq!(b.values.iter().filter(|v| **v != 0.0).count(), 2);
    }

    #[test]
    fn constants_annihilated() {
        let g = t(3, 3, 1);
        let c = Field::constant(g, 2.5);
        for axis in 0..3 {
            assert!(forward_diff(&c, axis).sup_norm() == 0.0);
            assert!(backward_diff(&c, axis).sup_norm() == 0.0);
        }
        assert_eq!(project_mean_zero(&c).sup_norm(), 0.0);
    }

    #[test]
    fn sine_differences() {
        let g = t(2, 3, 2);
        let s = g.side() as f64;
        let f = Field::from_fn(g, |p| {
            (2.0 * std::f64::consts::PI * p.0[0] as f64 / s).sin()
        });
        let df = forward_diff(&f, 0);
        for p in g.points() {
            let x = p.0[0] as f64;
            let want = (2.0 * std::f64::consts::PI * (x + 1.0) / s).sin()
                - (2.0 * std::f64::consts::PI * x / s).sin();
            assert!((df.get(&p) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn projection_example() {
        let g = t(2, 3, 1);
        let f = Field::delta(g, &LatticePoint::origin(2));
        let p = project_mean_zero(&f);
        assert!((p.values[0] - 8.0 / 9.0).abs() < 1e-15);
        assert!(p.values[1..].iter().all(|v| (v + 1.0 / 9.0).abs() < 1e-15));
        assert!(p.satisfies_mean_zero());
    }

    #[test]
    fn multi_index_enumeration() {
        assert_eq!(multi_indices(2, 1), vec![vec![1, 0], vec![0, 1]]);
        assert_eq!(multi_indices(2, 2).len(), 3);
        assert_eq!(multi_indices(3, 2).len(), 6);
        assert_eq!(multi_indices(3, 0), vec![vec![0, 0, 0]]);
    }

    fn field_strategy(g: Torus) -> impl Strategy<Value = Field> {
        prop::collection::vec(-10.0f64..10.0, g.volume())
            .prop_map(move |v| Field::new(g, v).unwrap())
    }

    proptest! {
        #[test]
        fn adjointness(f in field_strategy(t(2, 3, 2)), g in field_strategy(t(2, 3, 2)), axis in 0usize..2) {
            let lhs = forward_diff(&f, axis).inner(&g);
            let rhs = f.inner(&backward_diff(&g, axis));
            let scale = f.sup_norm() * g.sup_norm() * f.values.len() as f64;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale.max(1.0));
        }

        #[test]
        fn gradients_sum_to_zero(f in field_strategy(t(3, 3, 1)), axis in 0usize..3) {
            let s = forward_diff(&f, axis).sum();
            prop_assert!(s.abs() <= 1e-12 * f.sup_norm().max(1.0) * 27.0);
        }

        #[test]
        fn projection_idempotent(f in field_strategy(t(2, 3, 2))) {
            let p = project_mean_zero(&f);
            let pp = project_mean_zero(&p);
            for (a, b) in p.values.iter().zip(&pp.values) {
                prop_assert!((a - b).abs() <= 1e-12 * f.sup_norm().max(1.0));
            }
            prop_assert!(p.satisfies_mean_zero());
        }

        #[test]
        fn triangle_inequality(
            x in prop::collection::vec(-13i64..=13, 2),
            y in prop::collection::vec(-13i64..=13, 2),
            z in prop::collection::vec(-13i64..=13, 2),
            inf in any::<bool>(),
        ) {
            let g = t(2, 3, 3);
            let norm = if inf { Norm::Inf } else { Norm::Euclid };
            let (x, y, z) = (LatticePoint(x), LatticePoint(y), LatticePoint(z));
            let dxz = g.periodic_dist(&x, &z, norm);
            let dxy = g.periodic_dist(&x, &y, norm);
            let dyz = g.periodic_dist(&y, &z, norm);
            prop_assert!(dxz <= dxy + dyz + 1e-12);
            prop_assert_eq!(g.periodic_dist(&x, &y, norm), g.periodic_dist(&y, &x, norm));
            prop_assert_eq!(dxy == 0.0, x == y);
        }
    }
}
