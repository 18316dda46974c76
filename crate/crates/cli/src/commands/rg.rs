use gradphi::polymers::coalescence_scale;
use gradphi::rgflow::{
    apply_b, couple_flow, remainder_bound, second_order_identity_check,
    single_observable_decay_check, BlockFunctional, FlowBoundParams, FlowInputs, FlowResult,
    LocalPolynomial,
};
use gradphi::rng::stream_rng;
use rand::Rng as _;
use serde_json::json;

use super::{header, indexed, random_point, stack_from, streams, Ctx, Flags};
use crate::error::{CliError, CliResult};
use crate::run::Cell;

/// Tolerance of the zero-input flow against the Gaussian kernel.
const FLOW_TOL: f64 = 1e-10;
/// Tolerance of the second-order identity.
const IDENTITY_TOL: f64 = 1e-12;
/// Largest coalescence scale tabulated by `rg bound` when none is given.
const DEFAULT_MAX_JAB: u32 = 6;

/// Per-scale rows `(k, λ^a, λ^b, n^a, n^b, q^{ab}, l_obs)` for the given scales.
pub fn flow_table(res: &FlowResult, from: usize) -> (Vec<String>, Vec<Vec<Cell>>) {
    let d = res.scales[0].n_a.len();
    let mut h = header(&["k", "lambda_a", "lambda_b"]);
    h.extend(indexed("n_a", d));
    h.extend(indexed("n_b", d));
    h.extend(header(&["q_ab", "l_obs"]));
    let rows = res
        .scales
        .iter()
        .zip(&res.l_obs)
        .skip(from)
        .map(|(s, l)| {
            let mut row: Vec<Cell> = vec![s.k.into(), s.lambda_a.into(), s.lambda_b.into()];
            row.extend(s.n_a.iter().map(|&v| Cell::from(v)));
            row.extend(s.n_b.iter().map(|&v| Cell::from(v)));
            row.extend([s.q_ab.into(), (*l).into()]);
            row
        })
        .collect();
    (h, rows)
}

pub fn rg_flow(ctx: &Ctx) -> CliResult<Flags> {
    let stack = stack_from(&ctx.cfg)?;
    let t = stack.torus;
    let d = t.d();
    let n = stack.n_layers();
    let pair = ctx.cfg.pair(d)?;
    let params = ctx.cfg.flow()?;
    let j_ab = coalescence_scale(&pair.a, &pair.b, &t)?.min(n as u32 - 1);
    let mut inputs = FlowInputs::zeros(n, d);
    let mut flags = Vec::new();
    let kind = ctx.cfg.get("flow.inputs").unwrap_or("zero").to_string();
    match kind.as_str() {
        "zero" => {}
        "cubic" => {
            let kappa: f64 = ctx.cfg.required("flow.kappa")?;
            let mc = ctx.cfg.mc()?;
            let mut rng = stream_rng(ctx.cfg.seed()?, streams::FLOW_MC);
            let fa = BlockFunctional::from(LocalPolynomial::power(t, &pair.a, pair.m_a, 3, kappa));
            let fb = BlockFunctional::from(LocalPolynomial::power(t, &pair.b, pair.m_b, 3, kappa));
            for l in 0..n {
                let layer = stack.layer(l as u32 + 1);
                let oa = apply_b(&fa, layer, &pair.a, l as u32, j_ab, &mc, &mut rng)?;
                let ob = apply_b(&fb, layer, &pair.b, l as u32, j_ab, &mc, &mut rng)?;
                inputs.c0_a[l] = oa.c0;
                inputs.c1_a[l] = oa.c1;
                inputs.c0_b[l] = ob.c0;
                inputs.c1_b[l] = ob.c1;
                flags.extend(oa.flags.into_iter().chain(ob.flags));
            }
        }
        other => return Err(CliError::Config(format!("unknown flow.inputs `{other}`"))),
    }
    let res = couple_flow(&inputs, &stack, &pair, &params)?;
    let (h, rows) = flow_table(&res, 0);
    ctx.run.write_csv("flow.csv", &h, &rows)?;
    ctx.run
        .write_json("flow.json", &json!({ "inputs": inputs, "result": res }))?;

    let q = res.last().q_ab;
    if kind == "zero" && (q - res.gaussian).abs() > FLOW_TOL * res.gaussian.abs().max(1.0) {
        flags.push(format!(
            "zero-input flow gives {q:.6e}, kernel gives {:.6e}",
            res.gaussian
        ));
    }
    let decay = single_observable_decay_check(&inputs.c1_a, params.eta)?;
    if !decay.passed {
        flags.push("linear coefficients of the first observable do not stabilise".into());
    }
    let bound = remainder_bound(&params, res.j_ab)?;
    ctx.run.summarise(
        "flow",
        json!({
            "inputs": kind, "j_ab": res.j_ab, "q_ab": q, "gaussian": res.gaussian, "leading": res.leading,
            "remainder": res.remainder, "bound": bound, "decay_check": decay,
        }),
    )?;
    Ok(flags)
}

pub fn rg_identity(ctx: &Ctx) -> CliResult<Flags> {
    let stack = stack_from(&ctx.cfg)?;
    let t = stack.torus;
    let d = t.d();
    let triples: usize = ctx.cfg.required("identity.triples")?;
    let mut rng = stream_rng(ctx.cfg.seed()?, streams::IDENTITY);
    let mut rows = Vec::with_capacity(triples);
    let mut worst: f64 = 0.0;
    for idx in 0..triples {
        let na: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let nb: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = random_point(&t, &mut rng);
        let b = random_point(&t, &mut rng);
        let k = rng.random_range(1..=stack.n_layers() as u32);
        let c = second_order_identity_check(&na, &a, &nb, &b, &stack.layer(k).kernel)?;
        worst = worst.max(c.residual);
        let mut row: Vec<Cell> = vec![idx.into(), k.into()];
        row.extend(a.0.iter().map(|&v| Cell::Int(v)));
        row.extend(b.0.iter().map(|&v| Cell::Int(v)));
        row.extend(na.iter().chain(&nb).map(|&v| Cell::from(v)));
        row.extend([c.st_part.into(), c.expected.into(), c.residual.into()]);
        rows.push(row);
    }
    let mut h = header(&["triple", "k"]);
    for p in ["a", "b", "n_a", "n_b"] {
        h.extend(indexed(p, d));
    }
    h.extend(header(&["st_part", "expected", "residual"]));
    ctx.run.write_csv("identity.csv", &h, &rows)?;
    ctx.run.summarise(
        "identity",
        json!({ "triples": triples, "max_residual": worst }),
    )?;
    Ok(if worst > IDENTITY_TOL {
        vec![format!(
            "identity residual {worst:.3e} above {IDENTITY_TOL:e}"
        )]
    } else {
        vec![]
    })
}

/// Command-line overrides of the bound parameters.
#[derive(Debug, Clone, Default)]
pub struct BoundArgs {
    pub eta: Option<f64>,
    pub l: Option<usize>,
    pub d: Option<usize>,
    pub jab: Option<u32>,
    pub rho0: Option<f64>,
    pub a_b: Option<f64>,
}

pub fn rg_bound(ctx: &Ctx, args: &BoundArgs) -> CliResult<Flags> {
    let base = ctx.cfg.flow()?;
    let params = FlowBoundParams {
        eta: args.eta.unwrap_or(base.eta),
        rho0: args.rho0.unwrap_or(base.rho0),
        a_b: args.a_b.unwrap_or(base.a_b),
        l: args.l.unwrap_or(base.l),
        d: args.d.unwrap_or(base.d),
        ..base
    };
    let top = args.jab.unwrap_or(DEFAULT_MAX_JAB);
    let bounds = (0..=top)
        .map(|j| remainder_bound(&params, j))
        .collect::<gradphi::Result<Vec<_>>>()?;
    let rows: Vec<Vec<Cell>> = bounds
        .iter()
        .enumerate()
        .map(|(j, b)| {
            vec![
                j.into(),
                b.bound.into(),
                b.nu.into(),
                b.nu_capped.into(),
                b.distance_constant.into(),
            ]
        })
        .collect();
    ctx.run.write_csv(
        "bound.csv",
        &header(&["j_ab", "bound", "nu", "nu_capped", "distance_constant"]),
        &rows,
    )?;
    let monotone = bounds.windows(2).all(|w| w[1].bound < w[0].bound);
    ctx.run.summarise(
        "bound",
        json!({
            "eta": params.eta, "L": params.l, "d": params.d, "rho0": params.rho0, "a_b": params.a_b,
            "nu": bounds[0].nu, "values": bounds.iter().map(|b| b.bound).collect::<Vec<_>>(), "monotone": monotone,
        }),
    )?;
    Ok(if monotone {
        vec![]
    } else {
        vec!["remainder bound is not decreasing in j_ab".into()]
    })
}
