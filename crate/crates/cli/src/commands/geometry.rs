use gradphi::frd::{coalescence_zero_check, layer_scaling_report, verify_finite_range};
use gradphi::gff::sign_convention_check;
use gradphi::io::{to_binary, RecordKind};
use gradphi::polymers::{
    blocks_of, closure, connected_components, is_connected, is_small, large_neighbourhood,
    projection_pi, small_set_neighbourhood,
};
use gradphi::rng::stream_rng;
use gradphi::{green_kernel, Field, FrdStack, LatticePoint, Polymer};
use serde_json::{json, Value};

use super::{header, indexed, random_point, stack_from, streams, Ctx, Flags};
use crate::error::{CliError, CliResult};
use crate::run::Cell;

/// Tolerance of the finite-range and coalescence checks.
const FRD_TOL: f64 = 1e-10;
const SIGN_SAMPLES: usize = 2000;
/// A sampled gradient covariance further than this many SE from the kernel is flagged.
const SIGN_MAX_Z: f64 = 5.0;

pub fn torus(ctx: &Ctx) -> CliResult<Flags> {
    let t = ctx.cfg.torus()?;
    let sides: Vec<i64> = (0..=t.n()).map(|k| t.block_side(k)).collect();
    let info = json!({
        "d": t.d(), "L": t.l(), "N": t.n(), "side": t.side(), "volume": t.volume(), "block_sides": sides,
    });
    ctx.run.write_json("torus.json", &info)?;
    ctx.run.summarise("torus", info)?;
    Ok(vec![])
}

pub fn gff(ctx: &Ctx) -> CliResult<Flags> {
    let t = ctx.cfg.torus()?;
    let kernel = green_kernel(&ctx.cfg.q(t.d())?, &t)?;
    let rows: Vec<Vec<Cell>> = kernel
        .radial_profile()
        .into_iter()
        .map(|(a, b, c)| vec![a.into(), b.into(), c.into()])
        .collect();
    ctx.run.write_csv(
        "gff_profile.csv",
        &header(&["dist_inf", "dist_euclid", "value"]),
        &rows,
    )?;
    let field = Field {
        torus: t,
        values: kernel.values.clone(),
        mean_zero: true,
    };
    ctx.run
        .write_bytes("gff_kernel.bin", &to_binary(RecordKind::GffKernel, &field))?;

    let mut flags = Vec::new();
    let sign = if t.d() >= 2 {
        let s = sign_convention_check(
            &t,
            SIGN_SAMPLES,
            ctx.cfg.seed()?.wrapping_add(streams::SIGN_CHECK),
        )?;
        if s.max_z > SIGN_MAX_Z {
            flags.push(format!(
                "sampled gradient covariance {:.2} SE from the kernel",
                s.max_z
            ));
        }
        if s.max_operator_gap > FRD_TOL {
            flags.push(format!(
                "kernel and operator routes differ by {:.3e}",
                s.max_operator_gap
            ));
        }
        serde_json::to_value(s)?
    } else {
        Value::Null
    };
    let o = LatticePoint::origin(t.d());
    ctx.run.summarise(
        "gff",
        json!({
            "c_origin": kernel.at(&o),
            "grad_grad_origin": kernel.grad_grad_matrix(&o, &o),
            "min_spectrum": kernel.min_spectrum(),
            "sign_check": sign,
        }),
    )?;
    Ok(flags)
}

/// Rows `(k, r, C_k(r e_1))` for `r = 0..=side/2`.
pub fn frd_profiles(stack: &FrdStack) -> (Vec<String>, Vec<Vec<Cell>>) {
    let t = stack.torus;
    let mut rows = Vec::new();
    for layer in &stack.layers {
        for r in 0..=t.half() {
            let mut c = vec![0i64; t.d()];
            c[0] = r;
            rows.push(vec![
                layer.k.into(),
                Cell::Int(r),
                layer.kernel.at(&LatticePoint(c)).into(),
            ]);
        }
    }
    (header(&["k", "r", "value"]), rows)
}

pub fn frd_build(ctx: &Ctx) -> CliResult<Flags> {
    let stack = stack_from(&ctx.cfg)?;
    stack.save(&ctx.run.path("frd"))?;
    let rows: Vec<Vec<Cell>> = stack
        .layers
        .iter()
        .map(|l| {
            let degree = l.degree.map_or(Cell::Text(String::new()), Cell::from);
            vec![
                l.k.into(),
                l.range.into(),
                l.tail.into(),
                degree,
                l.merged.into(),
            ]
        })
        .collect();
    ctx.run.write_csv(
        "frd_layers.csv",
        &header(&["k", "range", "tail", "degree", "merged"]),
        &rows,
    )?;
    let (h, p) = frd_profiles(&stack);
    ctx.run.write_csv("frd_profiles.csv", &h, &p)?;
    ctx.run.summarise(
        "frd",
        json!({ "layers": stack.n_layers(), "lambda_max": stack.lambda_max, "reconstruction_error": stack.reconstruction_error() }),
    )?;
    Ok(vec![])
}

pub fn frd_verify(ctx: &Ctx) -> CliResult<Flags> {
    let stack = stack_from(&ctx.cfg)?;
    let t = stack.torus;
    let d = t.d();
    let mut flags = Vec::new();
    let recon = stack.reconstruction_error();
    if recon > FRD_TOL {
        flags.push(format!("layers sum to the kernel only within {recon:.3e}"));
    }
    let range = verify_finite_range(&stack, FRD_TOL);
    let rows: Vec<Vec<Cell>> = range
        .rows
        .iter()
        .map(|r| {
            vec![
                r.k.into(),
                r.max_deviation
                    .map_or(Cell::Text(String::new()), Cell::from),
                r.passed.into(),
            ]
        })
        .collect();
    ctx.run.write_csv(
        "frd_range.csv",
        &header(&["k", "max_deviation", "passed"]),
        &rows,
    )?;
    if !range.passed {
        flags.push("finite-range deviation above tolerance".into());
    }

    let n_pairs: usize = ctx.cfg.required("frd.pairs")?;
    let mut rng = stream_rng(ctx.cfg.seed()?, streams::FRD_PAIRS);
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    let mut done = 0;
    while done < n_pairs {
        let a = random_point(&t, &mut rng);
        let b = random_point(&t, &mut rng);
        if a == b {
            continue;
        }
        let rep = coalescence_zero_check(&stack, &a, &b)?;
        worst = worst.max(rep.max_abs);
        failed += usize::from(!rep.passed);
        let mut row: Vec<Cell> = vec![done.into()];
        row.extend(a.0.iter().map(|&c| Cell::Int(c)));
        row.extend(b.0.iter().map(|&c| Cell::Int(c)));
        row.extend([rep.j_ab.into(), rep.max_abs.into(), rep.passed.into()]);
        rows.push(row);
        done += 1;
    }
    let mut h = header(&["pair"]);
    h.extend(indexed("a", d));
    h.extend(indexed("b", d));
    h.extend(header(&["j_ab", "max_abs", "passed"]));
    ctx.run.write_csv("frd_coalescence.csv", &h, &rows)?;
    if failed > 0 {
        flags.push(format!(
            "{failed} pairs with nonzero gradient covariance below the coalescence scale"
        ));
    }
    ctx.run.summarise(
        "frd_verify",
        json!({
            "reconstruction_error": recon, "range_passed": range.passed,
            "pairs": n_pairs, "coalescence_max_abs": worst, "coalescence_failures": failed,
        }),
    )?;
    Ok(flags)
}

pub fn frd_report(ctx: &Ctx, alpha: Option<usize>) -> CliResult<Flags> {
    let order = match alpha {
        Some(a) => a,
        None => ctx.cfg.required("frd.alpha")?,
    };
    let stack = stack_from(&ctx.cfg)?;
    let report = layer_scaling_report(&stack, order)?;
    let rows: Vec<Vec<Cell>> = report
        .iter()
        .map(|r| {
            vec![
                r.k.into(),
                r.order.into(),
                r.sup.into(),
                r.normaliser.into(),
                r.ratio.into(),
            ]
        })
        .collect();
    ctx.run.write_csv(
        "frd_scaling.csv",
        &header(&["k", "order", "sup", "normaliser", "ratio"]),
        &rows,
    )?;
    let ratios: Vec<f64> = report.iter().map(|r| r.ratio).collect();
    ctx.run
        .summarise("frd_report", json!({ "order": order, "ratios": ratios }))?;
    Ok(vec![])
}

/// Parse `x,y;x,y` into points of dimension `d`.
fn parse_points(text: &str, d: usize) -> CliResult<Vec<LatticePoint>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let c: Vec<i64> = s
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| CliError::Config(format!("bad point `{s}`")))
                })
                .collect::<CliResult<_>>()?;
            if c.len() != d {
                return Err(CliError::Config(format!(
                    "point `{s}` has {} coordinates, expected {d}",
                    c.len()
                )));
            }
            Ok(LatticePoint(c))
        })
        .collect()
}

fn polymer_json(x: &Polymer) -> Value {
    serde_json::from_str(&x.to_json_line()).expect("polymer lines are valid JSON")
}

/// Write every `k`-block and the polymer operations applied to the polymer covering `points`.
pub fn polymers(ctx: &Ctx, k: u32, points: Option<&str>) -> CliResult<Flags> {
    let t = ctx.cfg.torus()?;
    let blocks = blocks_of(&t, k)?;
    let mut text = String::new();
    for b in &blocks {
        let line = json!({
            "k": k, "index": b.index, "center": b.center(&t).0, "min_corner": b.min_corner(&t).0,
        });
        text.push_str(&format!("{line}\n"));
    }
    ctx.run.write_text("blocks.jsonl", &text)?;

    let pts = match points {
        Some(p) => parse_points(p, t.d())?,
        None => {
            let mut rng = stream_rng(ctx.cfg.seed()?, streams::POLYMERS);
            (0..3).map(|_| random_point(&t, &mut rng)).collect()
        }
    };
    let x = Polymer::covering(t, k, &pts);
    let mut ops = vec![
        json!({ "op": "polymer", "result": polymer_json(&x) }),
        json!({ "op": "size", "result": x.size() }),
        json!({ "op": "connected", "result": is_connected(&x) }),
        json!({ "op": "small", "result": is_small(&x) }),
        json!({ "op": "components", "result": connected_components(&x).iter().map(polymer_json).collect::<Vec<_>>() }),
        json!({ "op": "large_neighbourhood", "result": polymer_json(&large_neighbourhood(&x)) }),
    ];
    if k >= 1 {
        ops.push(json!({ "op": "small_set_neighbourhood", "result": polymer_json(&small_set_neighbourhood(&x)?) }));
    }
    if k < t.n() {
        ops.push(json!({ "op": "closure", "result": polymer_json(&closure(&x)?) }));
        ops.push(json!({ "op": "projection", "result": polymer_json(&projection_pi(&x)?) }));
    }
    let text: String = ops.iter().map(|v| format!("{v}\n")).collect();
    ctx.run.write_text("polymer_ops.jsonl", &text)?;
    ctx.run.summarise(
        "polymers",
        json!({ "k": k, "blocks": blocks.len(), "polymer_size": x.size() }),
    )?;
    Ok(vec![])
}
