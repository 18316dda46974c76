//! Translation-averaged gradient covariances with batch-mean errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{NdFft, C64};
use crate::gff::phase_factors;
use crate::lattice::{LatticePoint, Norm, Torus};

/// Fewest batches accepted for error estimation.
pub const MIN_BATCHES: usize = 20;

/// Streaming estimator of `R_ij(r) = (1/V) Σ_x ∇_i φ(x) ∇_j φ(x + r)` for `i ≤ j`.
///
/// Each sample costs one forward transform and one inverse transform per
/// direction pair. Samples are grouped into equal consecutive batches; once
/// every batch is full, further samples are ignored.
#[derive(Debug, Clone)]
pub struct GradCovAccumulator {
    torus: Torus,
    fft: NdFft,
    dir_pairs: Vec<(usize, usize)>,
    phases: Vec<C64>,
    per_batch: usize,
    batches_per_chain: usize,
    chains: usize,
    /// Completed or in-progress batch sums, each of length `pairs × V`.
    batch_sums: Vec<Vec<f64>>,
    sq_sums: Vec<f64>,
    /// Samples accepted by the chain currently being filled.
    filled: usize,
    total: usize,
}

impl GradCovAccumulator {
    /// Accumulator for `expected` samples split into `n_batches` batches.
    pub fn new(torus: Torus, expected: usize, n_batches: usize) -> Result<Self> {
        if n_batches < MIN_BATCHES {
            return Err(Error::InvalidArgument(format!(
                "need at least {MIN_BATCHES} batches, got {n_batches}"
            )));
        }
        let per_batch = expected / n_batches;
        if per_batch == 0 {
            return Err(Error::InvalidArgument(format!(
                "{expected} samples cannot fill {n_batches} batches"
            )));
        }
        let d = torus.d();
        let dir_pairs: Vec<(usize, usize)> =
            (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect();
        let v = torus.volume();
        let mut phases = vec![C64::new(0.0, 0.0); v * d];
        for idx in 0..v {
            let f = phase_factors(&torus, idx);
            phases[idx * d..idx * d + d].copy_from_slice(&f[..d]);
        }
        Ok(Self {
            torus,
            fft: NdFft::new(torus),
            dir_pairs,
            phases,
            per_batch,
            batches_per_chain: n_batches,
            chains: 1,
            batch_sums: Vec::new(),
            sq_sums: vec![0.0; v * d * (d + 1) / 2],
            filled: 0,
            total: 0,
        })
    }

    pub fn torus(&self) -> Torus {
        self.torus
    }

    /// Samples that entered the estimate.
    pub fn samples(&self) -> usize {
        self.total
    }

    pub fn samples_per_chain(&self) -> usize {
        self.per_batch * self.batches_per_chain
    }

    pub fn per_batch(&self) -> usize {
        self.per_batch
    }

    pub fn n_batches(&self) -> usize {
        self.batch_sums.len()
    }

    pub fn is_full(&self) -> bool {
        self.filled >= self.samples_per_chain()
    }

    /// Add one field sample (storage order, any additive constant).
    pub fn push(&mut self, values: &[f64]) {
        if self.is_full() {
            return;
        }
        let v = self.torus.volume();
        let d = self.torus.d();
        let hat = self.fft.forward_real(values);
        if self.filled.is_multiple_of(self.per_batch) {
            self.batch_sums.push(vec![0.0; self.dir_pairs.len() * v]);
        }
        let target = self.batch_sums.len() - 1;
        let mut spec = vec![C64::new(0.0, 0.0); v];
        for (pi, &(i, j)) in self.dir_pairs.iter().enumerate() {
            for (p, s) in spec.iter_mut().enumerate() {
                let vi = self.phases[p * d + i];
                let vj = self.phases[p * d + j];
                *s = vi.conj() * vj * hat[p].norm_sqr();
            }
            self.fft.inverse(&mut spec);
            let scale = 1.0 / (v as f64 * v as f64);
            let sums = &mut self.batch_sums[target][pi * v..(pi + 1) * v];
            let sq = &mut self.sq_sums[pi * v..(pi + 1) * v];
            for ((s, q), z) in sums.iter_mut().zip(sq.iter_mut()).zip(&spec) {
                let r = z.re * scale;
                *s += r;
                *q += r * r;
            }
        }
        self.filled += 1;
        self.total += 1;
    }

    /// Append the batches of another chain; pooling in a fixed order keeps results deterministic.
    pub fn merge(&mut self, other: GradCovAccumulator) -> Result<()> {
        if other.torus != self.torus || other.per_batch != self.per_batch {
            return Err(Error::InvalidArgument(
                "accumulators differ in geometry or batch size".into(),
            ));
        }
        if !self.is_full() || !other.is_full() {
            return Err(Error::InvalidArgument(
                "only complete chains can be pooled".into(),
            ));
        }
        self.batch_sums.extend(other.batch_sums);
        for (a, b) in self.sq_sums.iter_mut().zip(&other.sq_sums) {
            *a += b;
        }
        self.chains += other.chains;
        self.total += other.total;
        Ok(())
    }

    fn slot(&self, i: usize, j: usize, r: &[i64]) -> (usize, usize) {
        let (pi, r_idx) = if i <= j {
            (self.pair_index(i, j), self.torus.index_of(r))
        } else {
            let neg: Vec<i64> = r.iter().map(|c| -c).collect();
            (self.pair_index(j, i), self.torus.index_of(&neg))
        };
        (pi, r_idx)
    }

    fn pair_index(&self, i: usize, j: usize) -> usize {
        self.dir_pairs
            .iter()
            .position(|&p| p == (i, j))
            .expect("direction pair exists")
    }

    /// `(estimate, se, τ)` for `Cov(∇_i φ(a), ∇_j φ(a + r))`.
    pub fn estimate(&self, i: usize, j: usize, r: &[i64]) -> (f64, f64, f64) {
        let (pi, ri) = self.slot(i, j, r);
        let v = self.torus.volume();
        let nb = self.batch_sums.len();
        let b = self.per_batch as f64;
        let means: Vec<f64> = self.batch_sums.iter().map(|s| s[pi * v + ri] / b).collect();
        let mean = means.iter().sum::<f64>() / nb as f64;
        let var_bm = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (nb as f64 - 1.0);
        let se = (var_bm / nb as f64).sqrt();
        let n = self.total as f64;
        let sigma2 = (self.sq_sums[pi * v + ri] / n - mean * mean).max(0.0);
        let tau = if sigma2 > 0.0 {
            (b * var_bm / (2.0 * sigma2)).max(0.5)
        } else {
            0.5
        };
        (mean, se, tau)
    }
}

/// Observable pair `(a, b)` with 0-based gradient directions `(i, j)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    pub a: LatticePoint,
    pub b: LatticePoint,
    pub i: usize,
    pub j: usize,
}

/// One covariance estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovRow {
    pub a: LatticePoint,
    pub b: LatticePoint,
    pub i: usize,
    pub j: usize,
    /// Canonical offset `b - a`.
    pub offset: Vec<i64>,
    /// Periodic Euclidean distance `|a - b|`.
    pub separation: f64,
    pub estimate: f64,
    pub se: f64,
    pub samples: usize,
    pub tau: f64,
}

/// Covariance estimates for a list of pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovEstimate {
    pub rows: Vec<CovRow>,
    pub batches: usize,
    pub samples_per_chain: usize,
    pub flags: Vec<String>,
}

impl CovEstimate {
    pub fn flagged(&self) -> bool {
        !self.flags.is_empty()
    }

    fn finish(acc: &GradCovAccumulator, rows: Vec<CovRow>) -> Self {
        let mut flags = Vec::new();
        if acc.n_batches() < MIN_BATCHES {
            flags.push(format!("only {} batches", acc.n_batches()));
        }
        let tau_max = rows.iter().map(|r| r.tau).fold(0.0, f64::max);
        if (acc.samples_per_chain() as f64) < 20.0 * tau_max {
            flags.push(format!(
                "insufficient effective samples: {} per chain for τ = {tau_max:.1}",
                acc.samples_per_chain()
            ));
        }
        Self {
            rows,
            batches: acc.n_batches(),
            samples_per_chain: acc.samples_per_chain(),
            flags,
        }
    }

    /// Translation-averaged estimates for the given pairs.
    pub fn from_pairs(acc: &GradCovAccumulator, pairs: &[PairSpec]) -> Self {
        let t = acc.torus();
        let rows = pairs
            .iter()
            .map(|p| {
                let offset: Vec<i64> =
                    p.b.0
                        .iter()
                        .zip(&p.a.0)
                        .map(|(x, y)| t.canonical(x - y))
                        .collect();
                let (estimate, se, tau) = acc.estimate(p.i, p.j, &offset);
                CovRow {
                    a: p.a.clone(),
                    b: p.b.clone(),
                    i: p.i,
                    j: p.j,
                    separation: t.periodic_dist(&p.a, &p.b, Norm::Euclid),
                    offset,
                    estimate,
                    se,
                    samples: acc.samples(),
                    tau,
                }
            })
            .collect();
        Self::finish(acc, rows)
    }

    /// Every offset with `lo ≤ |r| ≤ hi` from the origin, for all `i ≤ j`.
    /// For `i = j` only one of `±r` is kept, as the two estimates coincide.
    pub fn from_window(acc: &GradCovAccumulator, lo: f64, hi: f64) -> Self {
        Self::from_pairs(acc, &window_pairs(&acc.torus(), lo, hi))
    }
}

/// Pairs `(0, r)` with `lo ≤ |r| ≤ hi`, all `i ≤ j`, deduplicated under `r ↦ -r` when `i = j`.
pub fn window_pairs(torus: &Torus, lo: f64, hi: f64) -> Vec<PairSpec> {
    let d = torus.d();
    let o = LatticePoint::origin(d);
    let mut out = Vec::new();
    for p in torus.points() {
        let s = torus.periodic_dist(&o, &p, Norm::Euclid);
        if s < lo || s > hi {
            continue;
        }
        let neg = torus.canonicalize(&LatticePoint(p.0.iter().map(|c| -c).collect()));
        for i in 0..d {
            for j in i..d {
                if i == j && neg < p {
                    continue;
                }
                out.push(PairSpec {
                    a: o.clone(),
                    b: p.clone(),
                    i,
                    j,
                });
            }
        }
    }
    out
}

/// Estimate for a list of pairs from a pooled accumulator.
pub fn estimate_grad_cov(acc: &GradCovAccumulator, pairs: &[PairSpec]) -> CovEstimate {
    CovEstimate::from_pairs(acc, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gff::{green_kernel, QMatrix};
    use crate::lattice::make_torus;
    use crate::rng::stream_rng;

    #[test]
    fn single_sample_matches_direct_sum() {
        let t = make_torus(2, 3, 1).unwrap();
        let mut acc = GradCovAccumulator::new(t, 20, 20).unwrap();
        let mut rng = stream_rng(4, 0);
        let k = green_kernel(&QMatrix::zero(2), &t).unwrap();
        let phi = k.sample(&mut rng);
        acc.push(&phi.values);
        let g = |x: usize, i: usize| phi.values[t.shift(x, i, 1)] - phi.values[x];
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            for r in t.points() {
                let direct: f64 = (0..t.volume())
                    .map(|x| g(x, i) * g(t.offset(x, &r.0), j))
                    .sum::<f64>()
                    / t.volume() as f64;
                let (pi, ri) = acc.slot(i, j, &r.0);
                assert!((acc.batch_sums[0][pi * t.volume() + ri] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_draws_reproduce_kernel() {
        let t = make_torus(2, 3, 2).unwrap();
        let k = green_kernel(&QMatrix::zero(2), &t).unwrap();
        let mut acc = GradCovAccumulator::new(t, 20_000, 50).unwrap();
        let mut rng = stream_rng(9, 0);
        let fft = NdFft::new(t);
        while !acc.is_full() {
            acc.push(&k.sample_with(&fft, &mut rng).values);
        }
        let pairs = window_pairs(&t, 1.0, 3.5);
        let est = estimate_grad_cov(&acc, &pairs);
        let within = est
            .rows
            .iter()
            .filter(|r| (r.estimate - k.grad_grad_cov(&r.a, &r.b, r.i, r.j)).abs() <= 3.0 * r.se)
            .count();
        assert!(
            within as f64 >= 0.95 * est.rows.len() as f64,
            "{within}/{}",
            est.rows.len()
        );
        // Independent draws: τ close to 1/2.
        let mean_tau = est.rows.iter().map(|r| r.tau).sum::<f64>() / est.rows.len() as f64;
        assert!(mean_tau < 0.8, "{mean_tau}");
        assert!(!est.flagged());
        let (v, _, _) = acc.estimate(0, 0, &[0, 0]);
        assert!(v > 0.0);
        let (x, sx, _) = acc.estimate(0, 1, &[2, 1]);
        let (y, _, _) = acc.estimate(1, 0, &[-2, -1]);
        assert!((x - y).abs() <= 1e-15 + 1e-9 * sx);
    }

    #[test]
    fn merging_appends_batches() {
        let t = make_torus(2, 3, 1).unwrap();
        let k = green_kernel(&QMatrix::zero(2), &t).unwrap();
        let run = |seed| {
            let mut acc = GradCovAccumulator::new(t, 40, 20).unwrap();
            let mut rng = stream_rng(seed, 0);
            while !acc.is_full() {
                acc.push(&k.sample(&mut rng).values);
            }
            acc
        };
        let mut a = run(1);
        a.merge(run(2)).unwrap();
        assert_eq!(a.n_batches(), 40);
        assert_eq!(a.samples(), 80);
        let partial = GradCovAccumulator::new(t, 40, 20).unwrap();
        assert!(a.merge(partial).is_err());
        assert!(GradCovAccumulator::new(t, 100, 10).is_err());
    }

    #[test]
    fn window_pairs_are_deduplicated() {
        let t = make_torus(2, 3, 2).unwrap();
        let pairs = window_pairs(&t, 1.0, 1.0);
        // Four unit offsets: two survive for each diagonal pair, four for (0, 1).
        assert_eq!(pairs.len(), 2 + 4 + 2);
    }
}
