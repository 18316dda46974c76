//! Experiment driver for the `gradphi` library.
//!
//! Each subcommand resolves a [`config::Config`], writes a manifest into the
//! output directory before computing, and exits with 0 (clean), 1 (flagged
//! diagnostics) or 2 (invalid input or failure).

pub mod commands;
pub mod config;
pub mod error;
pub mod plots;
pub mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{BoundArgs, Ctx, Flags};
use crate::config::Config;
use crate::error::CliResult;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FLAGGED: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "gradphi",
    version,
    about = "Gradient interface model experiments on the discrete torus"
)]
pub struct Cli {
    /// Key-value config file.
    #[arg(long, global = true, env = "GRADPHI_CONFIG")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the `out` key.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "GRADPHI_THREADS")]
    pub threads: Option<usize>,
    /// Override a config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Describe the torus and its block scales.
    Torus,
    /// Green kernel of the reference measure and the sign check.
    Gff,
    /// Finite-range decomposition.
    #[command(subcommand)]
    Frd(FrdCommand),
    /// Blocks at scale k and polymer operations on the polymer covering some points.
    Polymers {
        #[arg(long, default_value_t = 1)]
        k: u32,
        /// Points as `x,y;x,y`; three random points when omitted.
        #[arg(long)]
        points: Option<String>,
    },
    /// Sampling, covariance estimation and fits for the interacting measure.
    #[command(subcommand)]
    Gibbs(GibbsCommand),
    /// Coupling flow, remainder bounds and the second-order identity.
    #[command(subcommand)]
    Rg(RgCommand),
    /// Run the configured stages and export plot bundles.
    Pipeline,
}

#[derive(Debug, Subcommand)]
pub enum FrdCommand {
    /// Build and save the layers.
    Build,
    /// Check reconstruction, finite range and coalescence zeros.
    Verify,
    /// Scaling of layer derivatives.
    Report {
        #[arg(long)]
        alpha: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum GibbsCommand {
    /// MCMC and the translation-averaged covariance table.
    Run,
    /// Covariance of the configured observable pair by every available method.
    Cov,
    /// Fit q to the covariance table.
    FitQ,
    /// Decay of the fit residuals.
    Decay,
}

#[derive(Debug, Subcommand)]
pub enum RgCommand {
    /// Coupling flow of the observable pair.
    Flow,
    /// Remainder bound for j_ab = 0..=jab.
    Bound {
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long = "L")]
        l: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        jab: Option<u32>,
        #[arg(long)]
        rho0: Option<f64>,
        #[arg(long = "a-b")]
        a_b: Option<f64>,
    },
    /// Second-order Gaussian identity on random triples.
    IdentityCheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Torus => "torus",
            Command::Gff => "gff",
            Command::Frd(FrdCommand::Build) => "frd build",
            Command::Frd(FrdCommand::Verify) => "frd verify",
            Command::Frd(FrdCommand::Report { .. }) => "frd report",
            Command::Polymers { .. } => "polymers",
            Command::Gibbs(GibbsCommand::Run) => "gibbs run",
            Command::Gibbs(GibbsCommand::Cov) => "gibbs cov",
            Command::Gibbs(GibbsCommand::FitQ) => "gibbs fit-q",
            Command::Gibbs(GibbsCommand::Decay) => "gibbs decay",
            Command::Rg(RgCommand::Flow) => "rg flow",
            Command::Rg(RgCommand::Bound { .. }) => "rg bound",
            Command::Rg(RgCommand::IdentityCheck) => "rg identity-check",
            Command::Pipeline => "pipeline",
        }
    }
}

/// Resolve the configuration of a parsed command line.
pub fn resolve_config(cli: &Cli) -> CliResult<Config> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("out={}", o.display()));
    }
    Config::load(cli.config.as_deref(), &overrides)
}

fn dispatch(ctx: &Ctx, command: &Command) -> CliResult<Flags> {
    match command {
        Command::Torus => commands::torus(ctx),
        Command::Gff => commands::gff(ctx),
        Command::Frd(FrdCommand::Build) => commands::frd_build(ctx),
        Command::Frd(FrdCommand::Verify) => commands::frd_verify(ctx),
        Command::Frd(FrdCommand::Report { alpha }) => commands::frd_report(ctx, *alpha),
        Command::Polymers { k, points } => commands::polymers(ctx, *k, points.as_deref()),
        Command::Gibbs(GibbsCommand::Run) => commands::gibbs_run(ctx),
        Command::Gibbs(GibbsCommand::Cov) => commands::gibbs_cov(ctx),
        Command::Gibbs(GibbsCommand::FitQ) => commands::gibbs_fit(ctx),
        Command::Gibbs(GibbsCommand::Decay) => commands::gibbs_decay(ctx),
        Command::Rg(RgCommand::Flow) => commands::rg_flow(ctx),
        Command::Rg(RgCommand::Bound {
            eta,
            l,
            d,
            jab,
            rho0,
            a_b,
        }) => commands::rg_bound(
            ctx,
            &BoundArgs {
                eta: *eta,
                l: *l,
                d: *d,
                jab: *jab,
                rho0: *rho0,
                a_b: *a_b,
            },
        ),
        Command::Rg(RgCommand::IdentityCheck) => commands::rg_identity(ctx),
        Command::Pipeline => commands::pipeline(ctx),
    }
}

/// Execute a parsed command line and return its flags.
pub fn execute(cli: &Cli) -> CliResult<Flags> {
    let cfg = resolve_config(cli)?;
    let threads = cli.threads.or_else(|| Some(rayon::current_num_threads()));
    let ctx = Ctx::new(cfg, cli.command.name(), threads)?;
    let flags = dispatch(&ctx, &cli.command)?;
    ctx.run.finish(&flags)?;
    Ok(flags)
}

/// Parse `args`, run the command and map the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            return EXIT_ERROR;
        }
    }
    match execute(&cli) {
        Ok(flags) if flags.is_empty() => EXIT_OK,
        Ok(flags) => {
            for f in &flags {
                eprintln!("flag: {f}");
            }
            EXIT_FLAGGED
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_line_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_become_overrides() {
        let cli =
            Cli::try_parse_from(["gradphi", "--seed", "7", "--set", "beta=2", "torus"]).unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.get("seed"), Some("7"));
        assert_eq!(cfg.get("beta"), Some("2"));
    }
}
