//! Subcommand implementations.
//!
//! Every command writes into a [`RunDir`] and returns the diagnostics it
//! flagged; an empty list means a clean run.

mod geometry;
mod gibbs;
mod rg;

pub use geometry::{frd_build, frd_profiles, frd_report, frd_verify, gff, polymers, torus};
pub use gibbs::{decay_verdict, gibbs_cov, gibbs_decay, gibbs_fit, gibbs_run, DecayVerdict};
pub use rg::{flow_table, rg_bound, rg_flow, rg_identity, BoundArgs};

use gradphi::{build_frd, green_kernel, FrdStack, LatticePoint, Torus};
use rand::Rng as _;

use crate::config::Config;
use crate::error::CliResult;
use crate::plots::emit_plot_data;
use crate::run::RunDir;

/// Random stream ids, one per consumer of the master seed.
pub(crate) mod streams {
    pub const SIGN_CHECK: u64 = 1;
    pub const FRD_PAIRS: u64 = 2;
    pub const IDENTITY: u64 = 3;
    pub const FLOW_MC: u64 = 4;
    pub const POLYMERS: u64 = 5;
}

pub type Flags = Vec<String>;

/// A resolved configuration together with its output directory.
#[derive(Debug)]
pub struct Ctx {
    pub cfg: Config,
    pub run: RunDir,
}

impl Ctx {
    /// Validate the geometry, create the output directory and write the manifest.
    pub fn new(cfg: Config, command: &str, threads: Option<usize>) -> CliResult<Self> {
        cfg.torus()?;
        let run = RunDir::create(&cfg.out_dir(), command, &cfg, threads)?;
        Ok(Self { cfg, run })
    }
}

pub(crate) fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

pub(crate) fn indexed(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("{prefix}_{i}")).collect()
}

pub(crate) fn stack_from(cfg: &Config) -> CliResult<FrdStack> {
    let t = cfg.torus()?;
    Ok(build_frd(&green_kernel(&cfg.q(t.d())?, &t)?, &t)?)
}

pub(crate) fn random_point(t: &Torus, rng: &mut gradphi::rng::Rng) -> LatticePoint {
    t.point(rng.random_range(0..t.volume()))
}

/// Run the configured stages in order, then export the plot bundles.
pub fn pipeline(ctx: &Ctx) -> CliResult<Flags> {
    let mut flags = Vec::new();
    for stage in ctx.cfg.stages()? {
        let f = match stage.as_str() {
            "gff" => gff(ctx)?,
            "frd" => {
                let mut f = frd_build(ctx)?;
                f.extend(frd_verify(ctx)?);
                f
            }
            "gibbs" => gibbs_run(ctx)?,
            "fit" => gibbs_fit(ctx)?,
            "decay" => gibbs_decay(ctx)?,
            "rg" => {
                let mut f = rg_flow(ctx)?;
                f.extend(rg_identity(ctx)?);
                f.extend(rg_bound(ctx, &BoundArgs::default())?);
                f
            }
            _ => unreachable!("stages are validated by the config"),
        };
        flags.extend(f.into_iter().map(|m| format!("{stage}: {m}")));
    }
    emit_plot_data(ctx.run.root())?;
    Ok(flags)
}
