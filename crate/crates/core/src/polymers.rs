//! Blocks and polymers at every scale.
//!
//! A `k`-block is identified by its index `c` on the block grid of side
//! `L^{N-k}`; it is the cube of side `L^k` centred at `c · L^k`. Block indices
//! are kept canonical, so blocks never straddle the boundary of the
//! fundamental domain.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Field, LatticePoint, Torus};

/// A block at scale `k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Block {
    pub k: u32,
    pub index: Vec<i64>,
}

/// Side of the block grid at scale `k`.
pub fn grid_side(torus: &Torus, k: u32) -> i64 {
    (torus.l() as i64).pow(torus.n() - k)
}

fn wrap(c: i64, g: i64) -> i64 {
    let r = c.rem_euclid(g);
    if r > (g - 1) / 2 {
        r - g
    } else {
        r
    }
}

fn wrap_index(index: &[i64], g: i64) -> Vec<i64> {
    index.iter().map(|&c| wrap(c, g)).collect()
}

/// Periodic ∞-distance between two block indices on a grid of side `g`.
fn grid_dist(a: &[i64], b: &[i64], g: i64) -> i64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| wrap(x - y, g).abs())
        .max()
        .unwrap_or(0)
}

impl Block {
    /// The `k`-block containing `x`.
    pub fn containing(torus: &Torus, k: u32, x: &LatticePoint) -> Block {
        let lk = torus.block_side(k);
        let half = (lk - 1) / 2;
        let g = grid_side(torus, k);
        let index =
            x.0.iter()
                .map(|&c| wrap((torus.canonical(c) + half).div_euclid(lk), g))
                .collect();
        Block { k, index }
    }

    pub fn center(&self, torus: &Torus) -> LatticePoint {
        let lk = torus.block_side(self.k);
        LatticePoint(self.index.iter().map(|&c| c * lk).collect())
    }

    /// Corner with the smallest coordinates.
    pub fn min_corner(&self, torus: &Torus) -> LatticePoint {
        let lk = torus.block_side(self.k);
        let half = (lk - 1) / 2;
        LatticePoint(self.index.iter().map(|&c| c * lk - half).collect())
    }

    pub fn points(&self, torus: &Torus) -> Vec<LatticePoint> {
        let lk = torus.block_side(self.k);
        let corner = self.min_corner(torus);
        let d = torus.d();
        let count = (lk as usize).pow(d as u32);
        (0..count)
            .map(|mut i| {
                let mut c = corner.0.clone();
                for axis in (0..d).rev() {
                    c[axis] += (i % lk as usize) as i64;
                    i /= lk as usize;
                }
                LatticePoint(c)
            })
            .collect()
    }

    /// The `(k+1)`-block containing this block.
    pub fn parent(&self, torus: &Torus) -> Block {
        let l = torus.l() as i64;
        let g = grid_side(torus, self.k + 1);
        let index = self
            .index
            .iter()
            .map(|&c| wrap((c + (l - 1) / 2).div_euclid(l), g))
            .collect();
        Block {
            k: self.k + 1,
            index,
        }
    }

    /// The `(k-1)`-blocks inside this block.
    pub fn children(&self, torus: &Torus) -> Vec<Block> {
        let l = torus.l() as i64;
        let g = grid_side(torus, self.k - 1);
        let d = torus.d();
        let count = (l as usize).pow(d as u32);
        (0..count)
            .map(|mut i| {
                let mut index = Vec::with_capacity(d);
                let mut offs = vec![0i64; d];
                for axis in (0..d).rev() {
                    offs[axis] = (i % l as usize) as i64 - (l - 1) / 2;
                    i /= l as usize;
                }
                for (c, o) in self.index.iter().zip(&offs) {
                    index.push(wrap(c * l + o, g));
                }
                Block {
                    k: self.k - 1,
                    index,
                }
            })
            .collect()
    }
}

/// All `k`-blocks, in canonical order.
pub fn blocks_of(torus: &Torus, k: u32) -> Result<Vec<Block>> {
    if k > torus.n() {
        return Err(Error::InvalidArgument(format!(
            "scale {k} exceeds N = {}",
            torus.n()
        )));
    }
    let g = grid_side(torus, k);
    let d = torus.d();
    let count = (g as usize).pow(d as u32);
    let mut out: Vec<Block> = (0..count)
        .map(|mut i| {
            let mut index = vec![0i64; d];
            for axis in (0..d).rev() {
                index[axis] = wrap((i % g as usize) as i64, g);
                i /= g as usize;
            }
            Block { k, index }
        })
        .collect();
    out.sort();
    Ok(out)
}

/// A union of `k`-blocks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Polymer {
    pub torus: Torus,
    pub k: u32,
    pub blocks: BTreeSet<Vec<i64>>,
}

impl Polymer {
    pub fn empty(torus: Torus, k: u32) -> Self {
        Self {
            torus,
            k,
            blocks: BTreeSet::new(),
        }
    }

    pub fn from_blocks(torus: Torus, k: u32, indices: impl IntoIterator<Item = Vec<i64>>) -> Self {
        let g = grid_side(&torus, k);
        Self {
            torus,
            k,
            blocks: indices.into_iter().map(|i| wrap_index(&i, g)).collect(),
        }
    }

    /// The whole torus at scale `k`.
    pub fn full(torus: Torus, k: u32) -> Result<Self> {
        Ok(Self::from_blocks(
            torus,
            k,
            blocks_of(&torus, k)?.into_iter().map(|b| b.index),
        ))
    }

    /// Smallest `k`-polymer containing the given points.
    pub fn covering(torus: Torus, k: u32, points: &[LatticePoint]) -> Self {
        Self {
            torus,
            k,
            blocks: points
                .iter()
                .map(|p| Block::containing(&torus, k, p).index)
                .collect(),
        }
    }

    /// `|X|_k`.
    pub fn size(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> impl Iterator<Item = Block> + '_ {
        self.blocks.iter().map(move |i| Block {
            k: self.k,
            index: i.clone(),
        })
    }

    pub fn points(&self) -> BTreeSet<LatticePoint> {
        self.blocks().flat_map(|b| b.points(&self.torus)).collect()
    }

    pub fn is_subset(&self, other: &Polymer) -> bool {
        self.k == other.k && self.blocks.is_subset(&other.blocks)
    }

    pub fn difference(&self, other: &Polymer) -> Polymer {
        Polymer {
            torus: self.torus,
            k: self.k,
            blocks: self.blocks.difference(&other.blocks).cloned().collect(),
        }
    }

    pub fn union(&self, other: &Polymer) -> Polymer {
        Polymer {
            torus: self.torus,
            k: self.k,
            blocks: self.blocks.union(&other.blocks).cloned().collect(),
        }
    }

    /// JSON line with the scale and sorted block centres.
    pub fn to_json_line(&self) -> String {
        let centers: Vec<Vec<i64>> = self.blocks().map(|b| b.center(&self.torus).0).collect();
        serde_json::json!({ "k": self.k, "blocks": centers }).to_string()
    }

    /// Enumerate all sub-polymers, `∅` and `X` included.
    pub fn subsets(&self) -> Vec<Polymer> {
        let all: Vec<&Vec<i64>> = self.blocks.iter().collect();
        (0u64..1 << all.len())
            .map(|mask| Polymer {
                torus: self.torus,
                k: self.k,
                blocks: all
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask >> i & 1 == 1)
                    .map(|(_, b)| (*b).clone())
                    .collect(),
            })
            .collect()
    }
}

/// Maximal connected components under ∞-adjacency of blocks, ordered by smallest block.
pub fn connected_components(x: &Polymer) -> Vec<Polymer> {
    let g = grid_side(&x.torus, x.k);
    let mut seen: BTreeSet<&Vec<i64>> = BTreeSet::new();
    let mut out = Vec::new();
    for start in &x.blocks {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        while let Some(b) = queue.pop_front() {
            comp.insert(b.clone());
            for other in &x.blocks {
                if !seen.contains(other) && grid_dist(b, other, g) <= 1 {
                    seen.insert(other);
                    queue.push_back(other);
                }
            }
        }
        out.push(Polymer {
            torus: x.torus,
            k: x.k,
            blocks: comp,
        });
    }
    out
}

/// Components computed from lattice points: paths with unit ∞-steps inside `X`.
pub fn point_components(x: &Polymer) -> Vec<Polymer> {
    let t = x.torus;
    let pts = x.points();
    let d = t.d();
    let mut seen: BTreeSet<LatticePoint> = BTreeSet::new();
    let mut out = Vec::new();
    let steps: Vec<Vec<i64>> = (0..3usize.pow(d as u32))
        .map(|mut i| {
            (0..d)
                .map(|_| {
                    let s = (i % 3) as i64 - 1;
                    i /= 3;
                    s
                })
                .collect()
        })
        .filter(|s: &Vec<i64>| s.iter().any(|&c| c != 0))
        .collect();
    for p in &pts {
        if seen.contains(p) {
            continue;
        }
        seen.insert(p.clone());
        let mut blocks = BTreeSet::new();
        let mut queue = VecDeque::from([p.clone()]);
        while let Some(q) = queue.pop_front() {
            blocks.insert(Block::containing(&t, x.k, &q).index);
            for s in &steps {
                let n = t.canonicalize(&LatticePoint(
                    q.0.iter().zip(s).map(|(a, b)| a + b).collect(),
                ));
                if pts.contains(&n) && !seen.contains(&n) {
                    seen.insert(n.clone());
                    queue.push_back(n);
                }
            }
        }
        out.push(Polymer {
            torus: t,
            k: x.k,
            blocks,
        });
    }
    out.sort_by(|a, b| a.blocks.iter().next().cmp(&b.blocks.iter().next()));
    out
}

pub fn is_connected(x: &Polymer) -> bool {
    connected_components(x).len() == 1
}

/// Smallest `(k+1)`-polymer containing `X`.
pub fn closure(x: &Polymer) -> Result<Polymer> {
    if x.k >= x.torus.n() {
        return Err(Error::InvalidArgument("closure needs k < N".into()));
    }
    Ok(Polymer {
        torus: x.torus,
        k: x.k + 1,
        blocks: x.blocks().map(|b| b.parent(&x.torus).index).collect(),
    })
}

/// Connected, nonempty and at most `2^d` blocks.
pub fn is_small(x: &Polymer) -> bool {
    !x.is_empty() && x.size() <= 1 << x.torus.d() && is_connected(x)
}

fn cube_around(torus: &Torus, k: u32, index: &[i64], radius: i64, out: &mut BTreeSet<Vec<i64>>) {
    let g = grid_side(torus, k);
    let r = radius.min((g - 1) / 2);
    let d = index.len();
    let width = 2 * r + 1;
    for mut i in 0..(width as usize).pow(d as u32) {
        let mut c = vec![0i64; d];
        for axis in (0..d).rev() {
            c[axis] = wrap(index[axis] + (i % width as usize) as i64 - r, g);
            i /= width as usize;
        }
        out.insert(c);
    }
}

/// `X* = ∪ B̂` over the `(k-1)`-blocks of `X`, where `B̂` is the cube of side
/// `(2^{d+1} + 1) L^{k-1}` centred at `B`.
pub fn small_set_neighbourhood(x: &Polymer) -> Result<Polymer> {
    if x.k == 0 {
        return Err(Error::InvalidArgument(
            "small-set neighbourhood needs k ≥ 1".into(),
        ));
    }
    let radius = 1i64 << x.torus.d();
    let mut out = BTreeSet::new();
    for b in x.blocks() {
        for child in b.children(&x.torus) {
            cube_around(&x.torus, x.k - 1, &child.index, radius, &mut out);
        }
    }
    Ok(Polymer {
        torus: x.torus,
        k: x.k - 1,
        blocks: out,
    })
}

/// `X⁺`: `X` together with every `k`-block touching it.
pub fn large_neighbourhood(x: &Polymer) -> Polymer {
    let mut out = BTreeSet::new();
    for b in &x.blocks {
        cube_around(&x.torus, x.k, b, 1, &mut out);
    }
    Polymer {
        torus: x.torus,
        k: x.k,
        blocks: out,
    }
}

/// Map a `k`-polymer to a `(k+1)`-polymer: large components go to their closure,
/// small components to the block containing their lexicographically smallest point.
pub fn projection_pi(x: &Polymer) -> Result<Polymer> {
    if x.k >= x.torus.n() {
        return Err(Error::InvalidArgument("projection needs k < N".into()));
    }
    let t = x.torus;
    let mut out = BTreeSet::new();
    for comp in connected_components(x) {
        if is_small(&comp) {
            let anchor = comp
                .blocks()
                .map(|b| b.min_corner(&t))
                .min()
                .expect("component is nonempty");
            out.insert(Block::containing(&t, x.k + 1, &anchor).index);
        } else {
            out.extend(closure(&comp)?.blocks);
        }
    }
    Ok(Polymer {
        torus: t,
        k: x.k + 1,
        blocks: out,
    })
}

/// `j_ab = ⌊log_L(2|a - b|)⌋` with the periodic Euclidean distance, in exact integer arithmetic.
pub fn coalescence_scale(a: &LatticePoint, b: &LatticePoint, torus: &Torus) -> Result<u32> {
    let r2 = torus.periodic_dist2(a, b);
    if r2 == 0 {
        return Err(Error::InvalidArgument(
            "coalescence scale needs a ≠ b".into(),
        ));
    }
    Ok(coalescence_scale_from_dist2(r2, torus.l()))
}

/// Largest `j` with `L^{2j} ≤ 4 |r|²`.
pub fn coalescence_scale_from_dist2(r2: i64, l: usize) -> u32 {
    let target = 4 * r2 as i128;
    let l2 = (l * l) as i128;
    let mut j = 0;
    let mut p: i128 = l2;
    while p <= target {
        j += 1;
        p *= l2;
    }
    j
}

/// Evaluation oracle for one polymer.
pub type Functional = Arc<dyn Fn(&Field) -> f64 + Send + Sync>;

/// Map from polymers to evaluation oracles.
#[derive(Clone, Default)]
pub struct FunctionalTable {
    entries: BTreeMap<Polymer, Functional>,
}

impl FunctionalTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, x: Polymer, f: Functional) {
        self.entries.insert(x, f);
    }

    pub fn insert_fn(&mut self, x: Polymer, f: impl Fn(&Field) -> f64 + Send + Sync + 'static) {
        self.entries.insert(x, Arc::new(f));
    }

    pub fn eval(&self, x: &Polymer, phi: &Field) -> Result<f64> {
        let f = self
            .entries
            .get(x)
            .ok_or_else(|| Error::MissingEntry(x.to_json_line()))?;
        Ok(f(phi))
    }
}

/// `(F ∘ G)(X) = Σ_{Y ⊆ X} F(Y) G(X \ Y)`.
pub fn circ_product(
    f: &FunctionalTable,
    g: &FunctionalTable,
    x: &Polymer,
    phi: &Field,
) -> Result<f64> {
    if x.size() > 24 {
        return Err(Error::TooLarge {
            volume: x.size(),
            limit: 24,
        });
    }
    let mut acc = 0.0;
    for y in x.subsets() {
        acc += f.eval(&y, phi)? * g.eval(&x.difference(&y), phi)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::make_torus;
    use proptest::prelude::*;
    use rand::Rng;

    fn t() -> Torus {
        make_torus(2, 3, 3).unwrap()
    }

    #[test]
    fn tiling() {
        let tor = make_torus(2, 3, 2).unwrap();
        for k in 0..=2 {
            let blocks = blocks_of(&tor, k).unwrap();
            assert_eq!(blocks.len(), 3usize.pow(2 * (2 - k)));
            let mut seen = BTreeSet::new();
            for b in &blocks {
                let pts = b.points(&tor);
                assert_eq!(pts.len(), 3usize.pow(2 * k));
                for p in pts {
                    assert!(p.0.iter().all(|c| c.abs() <= tor.half()));
                    assert_eq!(Block::containing(&tor, k, &p), *b);
                    assert!(seen.insert(p));
                }
            }
            assert_eq!(seen.len(), tor.volume());
        }
        assert_eq!(blocks_of(&tor, 1).unwrap()[0].points(&tor).len(), 9);
        assert!(blocks_of(&tor, 3).is_err());
    }

    #[test]
    fn parents_and_children() {
        let tor = t();
        for k in 0..3 {
            for b in blocks_of(&tor, k).unwrap() {
                let p = b.parent(&tor);
                assert!(p.children(&tor).contains(&b));
                let c = b.center(&tor);
                assert_eq!(Block::containing(&tor, k + 1, &c), p);
            }
        }
    }

    #[test]
    fn connectivity_examples() {
        let tor = t();
        let corner = Polymer::from_blocks(tor, 1, [vec![0, 0], vec![1, 1]]);
        assert_eq!(connected_components(&corner).len(), 1);
        let apart = Polymer::from_blocks(tor, 1, [vec![0, 0], vec![2, 0]]);
        assert_eq!(connected_components(&apart).len(), 2);
        assert!(connected_components(&Polymer::empty(tor, 1)).is_empty());
    }

    #[test]
    fn smallness() {
        let tor = t();
        assert!(is_small(&Polymer::from_blocks(tor, 1, [vec![0, 0]])));
        let five = Polymer::from_blocks(tor, 1, (0..5).map(|i| vec![i - 2, 0]));
        assert!(is_connected(&five) && !is_small(&five));
        assert!(!is_small(&Polymer::from_blocks(
            tor,
            1,
            [vec![0, 0], vec![3, 3]]
        )));
    }

    #[test]
    fn closure_examples() {
        let tor = t();
        let single = Polymer::from_blocks(tor, 0, [vec![4, -4]]);
        let c = closure(&single).unwrap();
        assert_eq!(c.size(), 1);
        assert!(c.points().contains(&LatticePoint(vec![4, -4])));
        let two = Polymer::from_blocks(tor, 1, [vec![1, 0], vec![2, 0]]);
        assert_eq!(closure(&two).unwrap().size(), 2);
        let full = Polymer::full(tor, 1).unwrap();
        assert_eq!(closure(&full).unwrap(), Polymer::full(tor, 2).unwrap());
        let top = Polymer::full(tor, 3).unwrap();
        assert!(closure(&top).is_err());
    }

    #[test]
    fn neighbourhoods() {
        let big = make_torus(2, 3, 4).unwrap();
        let x = Polymer::from_blocks(big, 1, [vec![0, 0]]);
        let star = small_set_neighbourhood(&x).unwrap();
        assert_eq!(star.k, 0);
        // Side 9 + 2*... : children span 3 points, each grown by 4 on both sides.
        assert_eq!(star.size(), 11 * 11);
        let b = Polymer::from_blocks(big, 2, [vec![0, 0]]);
        let s2 = small_set_neighbourhood(&b).unwrap();
        assert_eq!(s2.size(), 11 * 11);
        let pts = s2.points();
        let side = pts.iter().map(|p| p.0[0]).max().unwrap()
            - pts.iter().map(|p| p.0[0]).min().unwrap()
            + 1;
        assert_eq!(side, 33);
        let tor = t();
        let full = Polymer::full(tor, 2).unwrap();
        assert_eq!(
            small_set_neighbourhood(&full).unwrap(),
            Polymer::full(tor, 1).unwrap()
        );
        let plus = large_neighbourhood(&Polymer::from_blocks(big, 1, [vec![0, 0]]));
        assert_eq!(plus.size(), 9);
    }

    #[test]
    fn projection_examples() {
        let tor = t();
        let inside = Polymer::from_blocks(tor, 0, [vec![0, 0], vec![1, 0]]);
        let p = projection_pi(&inside).unwrap();
        assert_eq!(p, Polymer::from_blocks(tor, 1, [vec![0, 0]]));
        let big = Polymer::from_blocks(tor, 0, (0..6).map(|i| vec![i, 0]));
        assert_eq!(projection_pi(&big).unwrap(), closure(&big).unwrap());
        assert!(projection_pi(&Polymer::empty(tor, 0)).unwrap().is_empty());
        // Small component straddling two parents: anchored at its smallest point.
        let straddle = Polymer::from_blocks(tor, 0, [vec![1, 0], vec![2, 0]]);
        assert_eq!(
            projection_pi(&straddle).unwrap(),
            Polymer::from_blocks(tor, 1, [vec![0, 0]])
        );
    }

    #[test]
    fn coalescence_examples() {
        let tor = make_torus(2, 3, 4).unwrap();
        let o = LatticePoint::origin(2);
        assert_eq!(
            coalescence_scale(&o, &LatticePoint(vec![5, 0]), &tor).unwrap(),
            2
        );
        assert_eq!(
            coalescence_scale(&o, &LatticePoint(vec![1, 0]), &tor).unwrap(),
            0
        );
        assert!(coalescence_scale(&o, &o, &tor).is_err());
        assert_eq!(coalescence_scale_from_dist2(17 * 17, 7), 1);
        // Against a floating-point oracle away from exact powers.
        for r2 in 1..2000i64 {
            let j = coalescence_scale_from_dist2(r2, 3) as f64;
            let want = (2.0 * (r2 as f64).sqrt()).ln() / 3f64.ln();
            if (want - want.round()).abs() > 1e-9 {
                assert_eq!(j, want.floor());
            }
        }
    }

    #[test]
    fn circ_product_identities() {
        let tor = t();
        let x = Polymer::from_blocks(tor, 1, [vec![0, 0], vec![1, 0]]);
        let phi = Field::zeros(tor);
        let mut unit = FunctionalTable::new();
        let mut g = FunctionalTable::new();
        for (i, y) in x.subsets().into_iter().enumerate() {
            let empty = y.is_empty();
            unit.insert_fn(y.clone(), move |_| if empty { 1.0 } else { 0.0 });
            g.insert_fn(y, move |_| 1.5 + i as f64);
        }
        assert_eq!(
            circ_product(&unit, &g, &x, &phi).unwrap(),
            g.eval(&x, &phi).unwrap()
        );
        let b = Polymer::from_blocks(tor, 1, [vec![0, 0]]);
        let e = Polymer::empty(tor, 1);
        let want = unit.eval(&e, &phi).unwrap() * g.eval(&b, &phi).unwrap()
            + unit.eval(&b, &phi).unwrap() * g.eval(&e, &phi).unwrap();
        assert_eq!(circ_product(&unit, &g, &b, &phi).unwrap(), want);
        let mut partial = FunctionalTable::new();
        partial.insert_fn(e, |_| 1.0);
        assert!(matches!(
            circ_product(&partial, &g, &b, &phi),
            Err(Error::MissingEntry(_))
        ));
    }

    fn random_table(x: &Polymer, seed: u64) -> FunctionalTable {
        let mut rng = crate::rng::stream_rng(seed, 0);
        let mut tab = FunctionalTable::new();
        for y in x.subsets() {
            let c: f64 = rng.random_range(-1.0..1.0);
            let w: f64 = rng.random_range(-1.0..1.0);
            tab.insert_fn(y, move |phi| c + w * phi.values[0]);
        }
        tab
    }

    #[test]
    fn circ_product_commutative_and_associative() {
        let tor = t();
        let x = Polymer::from_blocks(tor, 1, [vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]]);
        let mut phi = Field::zeros(tor);
        phi.values[0] = 0.7;
        let (f, g, h) = (
            random_table(&x, 1),
            random_table(&x, 2),
            random_table(&x, 3),
        );
        for y in x.subsets() {
            let fg = circ_product(&f, &g, &y, &phi).unwrap();
            let gf = circ_product(&g, &f, &y, &phi).unwrap();
            assert!((fg - gf).abs() < 1e-13);
        }
        let table_of = |a: &FunctionalTable, b: &FunctionalTable| {
            let mut out = FunctionalTable::new();
            for y in x.subsets() {
                let v = circ_product(a, b, &y, &phi).unwrap();
                out.insert_fn(y, move |_| v);
            }
            out
        };
        let left = circ_product(&table_of(&f, &g), &h, &x, &phi).unwrap();
        let right = circ_product(&f, &table_of(&g, &h), &x, &phi).unwrap();
        assert!((left - right).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn block_and_point_connectivity_agree(mask in prop::collection::vec(any::<bool>(), 9), k in 0u32..2) {
            let tor = t();
            let g = grid_side(&tor, k);
            let mut rng = crate::rng::stream_rng(mask.iter().filter(|b| **b).count() as u64, k as u64);
            let blocks: Vec<Vec<i64>> = mask.iter().filter(|b| **b)
                .map(|_| vec![rng.random_range(0..g), rng.random_range(0..g)]).collect();
            let x = Polymer::from_blocks(tor, k, blocks);
            prop_assert_eq!(connected_components(&x), point_components(&x));
        }

        #[test]
        fn closure_monotone(a in prop::collection::vec((-4i64..=4, -4i64..=4), 0..6), extra in prop::collection::vec((-4i64..=4, -4i64..=4), 0..4)) {
            let tor = t();
            let x = Polymer::from_blocks(tor, 1, a.iter().map(|(p, q)| vec![*p, *q]));
            let y = x.union(&Polymer::from_blocks(tor, 1, extra.iter().map(|(p, q)| vec![*p, *q])));
            let cx = closure(&x).unwrap();
            let cy = closure(&y).unwrap();
            prop_assert!(cx.is_subset(&cy));
            // Closure of a (k+1)-polymer viewed as a union of k-blocks is itself.
            let as_k = Polymer::from_blocks(tor, 1, cx.blocks().flat_map(|b| b.children(&tor)).map(|b| b.index));
            prop_assert_eq!(closure(&as_k).unwrap(), cx);
        }

        #[test]
        fn projection_structure(a in prop::collection::vec((-4i64..=4, -4i64..=4), 1..8)) {
            let tor = t();
            let x = Polymer::from_blocks(tor, 1, a.iter().map(|(p, q)| vec![*p, *q]));
            let p = projection_pi(&x).unwrap();
            let comps = connected_components(&x);
            let meeting = closure(&x).unwrap();
            prop_assert!(p.is_subset(&meeting));
            if comps.iter().all(|c| !is_small(c)) {
                prop_assert_eq!(&p, &meeting);
            }
            for c in comps.iter().filter(|c| is_small(c)) {
                let img = projection_pi(c).unwrap();
                prop_assert_eq!(img.size(), 1);
                prop_assert!(img.is_subset(&p));
            }
        }

        #[test]
        fn coalescence_bracket(x in -40i64..=40, y in -40i64..=40) {
            prop_assume!(x != 0 || y != 0);
            let tor = make_torus(2, 3, 4).unwrap();
            let a = LatticePoint(vec![x, y]);
            let j = coalescence_scale(&LatticePoint::origin(2), &a, &tor).unwrap();
            let r = tor.periodic_dist(&LatticePoint::origin(2), &a, crate::lattice::Norm::Euclid);
            prop_assert!(3f64.powi(j as i32) / 2.0 <= r + 1e-12);
            prop_assert!(r < 3f64.powi(j as i32 + 1) / 2.0);
        }
    }
}
