//! Heat-bath chains with a Metropolis correction for the perturbation.
//!
//! Each site update draws from the Gaussian conditional of the quadratic part
//! (mean = neighbour average, precision `2dβ`) and accepts with probability
//! `min(1, e^{-β ΔV})`. After every sweep the field mean is removed, which
//! leaves all gradients unchanged.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::estimate::GradCovAccumulator;
use super::ModelSpec;
use crate::error::{Error, Result};
use crate::gff::{green_kernel, QMatrix};
use crate::lattice::Field;
use crate::rng::{stream_rng, Rng};
use crate::stats::{batch_mean_se, batch_means};

/// Chain lengths and batching.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McmcParams {
    pub sweeps: usize,
    pub thin: usize,
    /// Discarded sweeps; defaults to a tenth of `sweeps`.
    pub burn_in: Option<usize>,
    pub chains: usize,
    pub batches: usize,
}

impl Default for McmcParams {
    fn default() -> Self {
        Self {
            sweeps: 10_000,
            thin: 1,
            burn_in: None,
            chains: 1,
            batches: 50,
        }
    }
}

impl McmcParams {
    pub fn burn(&self) -> usize {
        self.burn_in.unwrap_or(self.sweeps / 10)
    }

    /// Recorded samples per chain.
    pub fn samples_per_chain(&self) -> usize {
        self.sweeps.saturating_sub(self.burn()) / self.thin.max(1)
    }

    fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.chains == 0 {
            return Err(Error::InvalidArgument(
                "thin and chains must be positive".into(),
            ));
        }
        if self.burn() >= self.sweeps {
            return Err(Error::InvalidArgument(
                "burn-in consumes every sweep".into(),
            ));
        }
        Ok(())
    }
}

/// Lowest acceptance rate that is not flagged.
pub const MIN_ACCEPTANCE: f64 = 0.1;

/// Pooled output of [`run_mcmc`].
#[derive(Debug, Clone)]
pub struct McmcRun {
    pub accumulator: GradCovAccumulator,
    pub acceptance: f64,
    /// `(mean, se)` of the energy per site over the first and second half of each chain.
    pub energy_halves: [(f64, f64); 2],
    pub flags: Vec<String>,
}

impl McmcRun {
    pub fn flagged(&self) -> bool {
        !self.flags.is_empty()
    }
}

struct Sampler<'a> {
    model: &'a ModelSpec,
    neighbours: Vec<usize>,
    sd: f64,
    accepted: u64,
    proposed: u64,
}

impl<'a> Sampler<'a> {
    fn new(model: &'a ModelSpec) -> Self {
        let t = &model.torus;
        let d = t.d();
        let mut neighbours = Vec::with_capacity(2 * d * t.volume());
        for x in 0..t.volume() {
            for i in 0..d {
                neighbours.push(t.shift(x, i, 1));
                neighbours.push(t.shift(x, i, -1));
            }
        }
        let sd = 1.0 / (2.0 * d as f64 * model.beta).sqrt();
        Self {
            model,
            neighbours,
            sd,
            accepted: 0,
            proposed: 0,
        }
    }

    fn sweep(&mut self, phi: &mut [f64], rng: &mut Rng) {
        let d = self.model.torus.d();
        let v = &self.model.potential;
        let u = &self.model.u;
        let beta = self.model.beta;
        let gaussian = v.is_zero();
        for x in 0..phi.len() {
            let nb = &self.neighbours[2 * d * x..2 * d * (x + 1)];
            let mean = nb.iter().map(|&y| phi[y]).sum::<f64>() / (2 * d) as f64;
            let z: f64 = rng.sample(StandardNormal);
            let new = mean + self.sd * z;
            self.proposed += 1;
            if gaussian {
                phi[x] = new;
                self.accepted += 1;
                continue;
            }
            let old = phi[x];
            let mut dv = 0.0;
            for i in 0..d {
                let up = phi[nb[2 * i]];
                let down = phi[nb[2 * i + 1]];
                dv += v.v(up - new + u[i]) - v.v(up - old + u[i]);
                dv += v.v(new - down + u[i]) - v.v(old - down + u[i]);
            }
            if dv <= 0.0 || rng.random::<f64>() < (-beta * dv).exp() {
                phi[x] = new;
                self.accepted += 1;
            }
        }
        let m = phi.iter().sum::<f64>() / phi.len() as f64;
        phi.iter_mut().for_each(|p| *p -= m);
    }
}

/// Exact Gaussian draw scaled to the quadratic part at inverse temperature β.
fn initial_field(model: &ModelSpec, rng: &mut Rng) -> Result<Vec<f64>> {
    let k = green_kernel(&QMatrix::zero(model.torus.d()), &model.torus)?;
    let s = 1.0 / model.beta.sqrt();
    Ok(k.sample(rng).values.into_iter().map(|v| v * s).collect())
}

struct ChainOut {
    acc: GradCovAccumulator,
    accepted: u64,
    proposed: u64,
    energies: Vec<f64>,
}

fn run_chain(model: &ModelSpec, params: &McmcParams, seed: u64, chain: usize) -> Result<ChainOut> {
    let mut rng = stream_rng(seed, chain as u64);
    let mut phi = initial_field(model, &mut rng)?;
    let mut acc = GradCovAccumulator::new(model.torus, params.samples_per_chain(), params.batches)?;
    let mut sampler = Sampler::new(model);
    let burn = params.burn();
    let vol = model.torus.volume() as f64;
    let mut energies = Vec::with_capacity(params.samples_per_chain());
    for s in 0..params.sweeps {
        sampler.sweep(&mut phi, &mut rng);
        if s >= burn && (s - burn).is_multiple_of(params.thin) && !acc.is_full() {
            acc.push(&phi);
            energies.push(model.energy(&phi) / vol);
        }
    }
    Ok(ChainOut {
        acc,
        accepted: sampler.accepted,
        proposed: sampler.proposed,
        energies,
    })
}

/// Run `params.chains` independent chains in parallel and pool them in chain order.
pub fn run_mcmc(model: &ModelSpec, params: &McmcParams, seed: u64) -> Result<McmcRun> {
    model.validate()?;
    params.validate()?;
    let outs: Vec<ChainOut> = (0..params.chains)
        .into_par_iter()
        .map(|c| run_chain(model, params, seed, c))
        .collect::<Result<_>>()?;
    let mut flags = Vec::new();
    let (mut accepted, mut proposed) = (0u64, 0u64);
    let mut halves = [Vec::new(), Vec::new()];
    let mut pooled: Option<GradCovAccumulator> = None;
    for out in outs {
        accepted += out.accepted;
        proposed += out.proposed;
        let mid = out.energies.len() / 2;
        halves[0].extend(batch_means(&out.energies[..mid], 10));
        halves[1].extend(batch_means(&out.energies[mid..], 10));
        match pooled.as_mut() {
            None => pooled = Some(out.acc),
            Some(p) => p.merge(out.acc)?,
        }
    }
    let acceptance = accepted as f64 / proposed.max(1) as f64;
    if acceptance < MIN_ACCEPTANCE {
        flags.push(format!(
            "acceptance rate {acceptance:.3} below {MIN_ACCEPTANCE}"
        ));
    }
    let energy_halves = [batch_mean_se(&halves[0]), batch_mean_se(&halves[1])];
    let [(m1, s1), (m2, s2)] = energy_halves;
    if (m1 - m2).abs() > 3.0 * (s1 * s1 + s2 * s2).sqrt() {
        flags.push(format!("energy not stationary: {m1:.6} vs {m2:.6}"));
    }
    let accumulator = pooled.expect("at least one chain");
    Ok(McmcRun {
        accumulator,
        acceptance,
        energy_halves,
        flags,
    })
}

/// Recorded fields of a single chain (chain index 0), for small experiments.
pub fn mcmc_sample(model: &ModelSpec, params: &McmcParams, seed: u64) -> Result<Vec<Field>> {
    model.validate()?;
    params.validate()?;
    let mut rng = stream_rng(seed, 0);
    let mut phi = initial_field(model, &mut rng)?;
    let mut sampler = Sampler::new(model);
    let burn = params.burn();
    let mut out = Vec::new();
    for s in 0..params.sweeps {
        sampler.sweep(&mut phi, &mut rng);
        if s >= burn && (s - burn).is_multiple_of(params.thin) {
            out.push(Field {
                torus: model.torus,
                values: phi.clone(),
                mean_zero: true,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::estimate::{estimate_grad_cov, PairSpec};
    use crate::lattice::{make_torus, LatticePoint};
    use crate::perturbation::PotentialSpec;

    fn gaussian(side_n: u32, u: f64) -> ModelSpec {
        let t = make_torus(2, 3, side_n).unwrap();
        ModelSpec::new(t, PotentialSpec::zero(), vec![u, -u], 1.0).unwrap()
    }

    #[test]
    fn fixed_seed_gives_identical_chain() {
        let m = ModelSpec::new(
            make_torus(2, 3, 1).unwrap(),
            PotentialSpec::quartic(0.05),
            vec![0.0, 0.0],
            4.0,
        )
        .unwrap();
        let p = McmcParams {
            sweeps: 200,
            thin: 5,
            burn_in: Some(20),
            chains: 1,
            batches: 20,
        };
        let a = mcmc_sample(&m, &p, 7).unwrap();
        let b = mcmc_sample(&m, &p, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 36);
        assert!(a.iter().all(|f| f.mean().abs() < 1e-12));
        assert_ne!(a, mcmc_sample(&m, &p, 8).unwrap());
    }

    #[test]
    fn gaussian_chain_matches_kernel() {
        let m = gaussian(2, 0.0);
        let p = McmcParams {
            sweeps: 22_000,
            thin: 2,
            burn_in: Some(2_000),
            chains: 2,
            batches: 50,
        };
        let run = run_mcmc(&m, &p, 3).unwrap();
        assert!(!run.flagged(), "{:?}", run.flags);
        assert_eq!(run.acceptance, 1.0);
        let k = green_kernel(&QMatrix::zero(2), &m.torus).unwrap();
        let pairs = crate::gibbs::estimate::window_pairs(&m.torus, 1.0, 3.0);
        let est = estimate_grad_cov(&run.accumulator, &pairs);
        let ok = est
            .rows
            .iter()
            .filter(|r| (r.estimate - k.grad_grad_cov(&r.a, &r.b, r.i, r.j)).abs() <= 3.0 * r.se);
        assert!(ok.count() as f64 >= 0.9 * est.rows.len() as f64);
        let o = LatticePoint::origin(2);
        let var = estimate_grad_cov(
            &run.accumulator,
            &[PairSpec {
                a: o.clone(),
                b: o,
                i: 0,
                j: 0,
            }],
        );
        assert!(var.rows[0].estimate > 0.0);
    }

    #[test]
    fn tilt_drops_out_of_gaussian_covariance() {
        let p = McmcParams {
            sweeps: 6_000,
            thin: 2,
            burn_in: Some(500),
            chains: 1,
            batches: 25,
        };
        let pair = [PairSpec {
            a: LatticePoint(vec![0, 0]),
            b: LatticePoint(vec![1, 1]),
            i: 0,
            j: 1,
        }];
        let a = estimate_grad_cov(
            &run_mcmc(&gaussian(2, 0.0), &p, 5).unwrap().accumulator,
            &pair,
        )
        .rows[0]
            .clone();
        let b = estimate_grad_cov(
            &run_mcmc(&gaussian(2, 0.1), &p, 5).unwrap().accumulator,
            &pair,
        )
        .rows[0]
            .clone();
        assert!((a.estimate - b.estimate).abs() <= 3.0 * (a.se * a.se + b.se * b.se).sqrt());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let m = ModelSpec::new(
            make_torus(2, 3, 1).unwrap(),
            PotentialSpec::quartic(0.05),
            vec![0.0, 0.0],
            25.0,
        )
        .unwrap();
        let p = McmcParams {
            sweeps: 2_000,
            thin: 1,
            burn_in: None,
            chains: 3,
            batches: 20,
        };
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| run_mcmc(&m, &p, 11).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.acceptance, b.acceptance);
        assert_eq!(
            a.accumulator.estimate(0, 0, &[1, 0]),
            b.accumulator.estimate(0, 0, &[1, 0])
        );
        assert!(a.acceptance > 0.5 && a.acceptance < 1.0);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let m = gaussian(1, 0.0);
        let p = McmcParams {
            sweeps: 10,
            thin: 1,
            burn_in: Some(10),
            chains: 1,
            batches: 20,
        };
        assert!(run_mcmc(&m, &p, 1).is_err());
        let p = McmcParams {
            sweeps: 30,
            thin: 1,
            burn_in: Some(0),
            chains: 1,
            batches: 50,
        };
        assert!(run_mcmc(&m, &p, 1).is_err());
    }
}
