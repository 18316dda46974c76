use gradphi::gibbs::{
    brute_force_cov, decay_report, fit_q, run_mcmc, DecayPoint, DecayReport, DecayStatus,
    FitResult, PairSpec, ResidualRow, MAX_BRUTE_VOLUME,
};
use gradphi::perturbation::check_assumptions;
use gradphi::{green_kernel, CovEstimate, QMatrix};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{header, indexed, Ctx, Flags};
use crate::error::CliResult;
use crate::run::Cell;

/// Brute-force draws use the master seed plus this offset, so they are independent of chain 0.
const BRUTE_SEED_OFFSET: u64 = 1;
/// Agreement threshold in combined standard errors.
const Z_MAX: f64 = 3.0;
/// Slack on the envelope slope relative to `-d`.
const ENVELOPE_SLACK: f64 = 0.3;

pub fn gibbs_run(ctx: &Ctx) -> CliResult<Flags> {
    let model = ctx.cfg.model()?;
    let t = model.torus;
    let d = t.d();
    let run = run_mcmc(&model, &ctx.cfg.mcmc()?, ctx.cfg.seed()?)?;
    let (lo, hi) = ctx.cfg.cov_window(t.side())?;
    let est = CovEstimate::from_window(&run.accumulator, lo, hi);

    let mut rows: Vec<_> = est.rows.iter().collect();
    rows.sort_by(|a, b| a.separation.total_cmp(&b.separation));
    let table: Vec<Vec<Cell>> = rows
        .iter()
        .map(|r| {
            let mut row: Vec<Cell> = vec![r.separation.into(), (r.i + 1).into(), (r.j + 1).into()];
            row.extend(r.offset.iter().map(|&c| Cell::Int(c)));
            row.extend([r.estimate.into(), r.se.into(), r.tau.into()]);
            row
        })
        .collect();
    let mut h = header(&["separation", "i", "j"]);
    h.extend(indexed("r", d));
    h.extend(header(&["estimate", "se", "tau"]));
    ctx.run.write_csv("cov.csv", &h, &table)?;
    ctx.run.write_json("cov.json", &est)?;
    let mcmc = json!({
        "acceptance": run.acceptance,
        "energy_halves": run.energy_halves,
        "samples": run.accumulator.samples(),
        "batches": run.accumulator.n_batches(),
        "flags": run.flags,
    });
    ctx.run.write_json("mcmc.json", &mcmc)?;
    let assumptions = check_assumptions(&model.potential, d, 5.0, 201);
    ctx.run.summarise(
        "gibbs",
        json!({ "mcmc": mcmc, "rows": est.rows.len(), "window": [lo, hi], "assumptions_passed": assumptions.passed }),
    )?;
    let mut flags = run.flags;
    flags.extend(est.flags);
    Ok(flags)
}

/// Covariance of the configured observable pair from MCMC, brute force (small tori) and the Gaussian kernel.
pub fn gibbs_cov(ctx: &Ctx) -> CliResult<Flags> {
    let base = ctx.cfg.model()?;
    let t = base.torus;
    let pair = ctx.cfg.pair(t.d())?;
    let model = base.with_pair(pair.clone())?;
    let seed = ctx.cfg.seed()?;
    let run = run_mcmc(&model, &ctx.cfg.mcmc()?, seed)?;
    let spec = PairSpec {
        a: pair.a.clone(),
        b: pair.b.clone(),
        i: pair.m_a,
        j: pair.m_b,
    };
    let est = CovEstimate::from_pairs(&run.accumulator, &[spec]);
    let mc = &est.rows[0];
    let gaussian = green_kernel(&QMatrix::zero(t.d()), &t)?
        .grad_grad_cov(&pair.a, &pair.b, pair.m_a, pair.m_b)
        / model.beta;

    let mut flags = run.flags;
    flags.extend(est.flags.iter().cloned());
    let mut rows = vec![
        vec![Cell::from("mcmc"), mc.estimate.into(), mc.se.into()],
        vec![Cell::from("gaussian"), gaussian.into(), 0.0.into()],
    ];
    let mut brute_json = serde_json::Value::Null;
    if t.volume() <= MAX_BRUTE_VOLUME {
        let samples: usize = ctx.cfg.required("brute.samples")?;
        let b = brute_force_cov(&model, samples, seed.wrapping_add(BRUTE_SEED_OFFSET))?;
        rows.push(vec![Cell::from("brute"), b.estimate.into(), b.se.into()]);
        let z = (mc.estimate - b.estimate).abs() / (mc.se.powi(2) + b.se.powi(2)).sqrt();
        if z > Z_MAX {
            flags.push(format!("MCMC and brute force differ by {z:.2} combined SE"));
        }
        if b.diagnostics.flagged() {
            flags.push(format!("brute-force weights flagged: {:?}", b.diagnostics));
        }
        brute_json =
            json!({ "estimate": b.estimate, "se": b.se, "z": z, "diagnostics": b.diagnostics });
    }
    ctx.run.write_csv(
        "pair_cov.csv",
        &header(&["method", "estimate", "se"]),
        &rows,
    )?;
    ctx.run.summarise(
        "pair_cov",
        json!({ "mcmc": { "estimate": mc.estimate, "se": mc.se, "tau": mc.tau }, "gaussian": gaussian, "brute": brute_json }),
    )?;
    Ok(flags)
}

pub fn gibbs_fit(ctx: &Ctx) -> CliResult<Flags> {
    let est: CovEstimate = ctx.run.read_json("cov.json")?;
    let t = ctx.cfg.torus()?;
    let beta: f64 = ctx.cfg.required("beta")?;
    let window = ctx.cfg.fit_window(t.side())?;
    let fit = fit_q(&est, &t, beta, window)?;
    ctx.run.write_json("fit.json", &fit)?;
    let rows: Vec<Vec<Cell>> = sorted(&fit.residuals)
        .iter()
        .map(|r| {
            vec![
                r.separation.into(),
                (r.i + 1).into(),
                (r.j + 1).into(),
                r.measured.into(),
                r.model.into(),
                r.residual.into(),
                r.se.into(),
            ]
        })
        .collect();
    ctx.run.write_csv(
        "residuals.csv",
        &header(&[
            "separation",
            "i",
            "j",
            "measured",
            "model",
            "residual",
            "se",
        ]),
        &rows,
    )?;
    ctx.run.summarise(
        "fit",
        json!({
            "q": fit.q.entries(), "params": fit.params, "param_se": fit.param_se, "chi2": fit.chi2,
            "dof": fit.dof, "norm_over_se": fit.norm_over_se(), "projected": fit.projected, "window": window,
        }),
    )?;
    Ok(fit.flags)
}

fn sorted(rows: &[ResidualRow]) -> Vec<&ResidualRow> {
    let mut v: Vec<&ResidualRow> = rows.iter().collect();
    v.sort_by(|a, b| a.separation.total_cmp(&b.separation));
    v
}

/// Residual decay verdict over a separation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayVerdict {
    pub envelope_slope: f64,
    pub envelope_ok: bool,
    /// `(separation, mean residual, se, |mean|/se)` at the three largest separations.
    pub largest: Vec<(f64, f64, f64, f64)>,
    pub largest_ok: bool,
    pub passed: bool,
}

/// Residuals decay at least like `|a-b|^{-d}`: the envelope slope is at most
/// `-d + 0.3`, or the mean residual at each of the three largest separations is
/// within 3 SE of zero.
pub fn decay_verdict(rows: &[ResidualRow], d: usize, window: (f64, f64)) -> DecayVerdict {
    let inside: Vec<&ResidualRow> = rows
        .iter()
        .filter(|r| r.separation >= window.0 && r.separation <= window.1)
        .collect();
    let points: Vec<DecayPoint> = inside
        .iter()
        .map(|r| DecayPoint {
            separation: r.separation,
            value: r.residual,
            se: Some(r.se),
        })
        .collect();
    let rep = decay_report(&points);
    let envelope_slope = rep.envelope_slope;
    let envelope_ok =
        rep.status == DecayStatus::Fit && envelope_slope <= -(d as f64) + ENVELOPE_SLACK;

    let mut seps: Vec<f64> = inside.iter().map(|r| r.separation).collect();
    seps.sort_by(f64::total_cmp);
    seps.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let largest: Vec<(f64, f64, f64, f64)> = seps
        .iter()
        .rev()
        .take(3)
        .map(|&s| {
            let at: Vec<&&ResidualRow> = inside
                .iter()
                .filter(|r| (r.separation - s).abs() < 1e-9)
                .collect();
            let n = at.len() as f64;
            let mean = at.iter().map(|r| r.residual).sum::<f64>() / n;
            let se = at.iter().map(|r| r.se * r.se).sum::<f64>().sqrt() / n;
            let z = if se > 0.0 {
                mean.abs() / se
            } else {
                f64::INFINITY
            };
            (s, mean, se, z)
        })
        .collect();
    let largest_ok = !largest.is_empty() && largest.iter().all(|l| l.3 <= Z_MAX);
    DecayVerdict {
        envelope_slope,
        envelope_ok,
        largest,
        largest_ok,
        passed: envelope_ok || largest_ok,
    }
}

fn report_json(r: &DecayReport) -> serde_json::Value {
    serde_json::to_value(r).unwrap_or(serde_json::Value::Null)
}

pub fn gibbs_decay(ctx: &Ctx) -> CliResult<Flags> {
    let fit: FitResult = ctx.run.read_json("fit.json")?;
    let t = ctx.cfg.torus()?;
    let rows = sorted(&fit.residuals);
    let table: Vec<Vec<Cell>> = rows
        .iter()
        .map(|r| {
            vec![
                r.separation.into(),
                r.measured.into(),
                r.model.into(),
                r.residual.into(),
                r.se.into(),
            ]
        })
        .collect();
    ctx.run.write_csv(
        "decay.csv",
        &header(&["separation", "value", "prediction", "residual", "se"]),
        &table,
    )?;

    let pts = |f: fn(&ResidualRow) -> f64| -> Vec<DecayPoint> {
        rows.iter()
            .map(|r| DecayPoint {
                separation: r.separation,
                value: f(r),
                se: Some(r.se),
            })
            .collect()
    };
    let measured = decay_report(&pts(|r| r.measured));
    let residual = decay_report(&pts(|r| r.residual));
    let verdict = decay_verdict(&fit.residuals, t.d(), ctx.cfg.fit_window(t.side())?);
    ctx.run.summarise(
        "decay",
        json!({ "measured": report_json(&measured), "residual": report_json(&residual), "verdict": verdict }),
    )?;
    let mut flags = Vec::new();
    if !verdict.passed {
        flags.push(format!(
            "residuals decay slower than |a-b|^-{}: envelope slope {:.3}, tail z {:?}",
            t.d(),
            verdict.envelope_slope,
            verdict.largest.iter().map(|l| l.3).collect::<Vec<_>>()
        ));
    }
    Ok(flags)
}
