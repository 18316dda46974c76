//! Plain-text run configuration.
//!
//! One `key = value` pair per line, `#` starts a comment, keys are dotted
//! (`potential.kappa`, `fit.window`). Every key can be overridden from the
//! environment as `GRADPHI_<KEY>` with dots replaced by underscores and the
//! name uppercased (`GRADPHI_FIT_WINDOW`), and from the command line with
//! `--set key=value`. Precedence: defaults, file, environment, `--set`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gradphi::gibbs::{McmcParams, ObservablePair};
use gradphi::perturbation::{PotentialKind, Spline};
use gradphi::rgflow::{FlowBoundParams, McOptions};
use gradphi::{LatticePoint, ModelSpec, PotentialSpec, QMatrix, Torus};
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "GRADPHI_";

/// Environment variables read by the argument parser rather than the config.
pub const CLI_ENV: &[&str] = &["GRADPHI_CONFIG", "GRADPHI_THREADS"];

/// Documented keys with their defaults (`None` for keys without a default).
pub const SCHEMA: &[(&str, Option<&str>, &str)] = &[
    ("d", Some("2"), "dimension"),
    ("L", Some("3"), "odd block factor, at least 3"),
    ("N", Some("3"), "number of scales; the torus side is L^N"),
    ("q", None, "row-major d×d entries of q (default 0)"),
    ("beta", Some("1"), "inverse temperature"),
    ("u", None, "tilt, d comma-separated values (default 0)"),
    (
        "potential",
        Some("zero"),
        "zero | quartic | gauss_quartic | gauss_quadratic | spline",
    ),
    (
        "potential.kappa",
        Some("0"),
        "κ for quartic and gauss_quartic",
    ),
    ("potential.a", Some("0"), "a for gauss_quadratic"),
    ("potential.path", None, "CSV (s, V(s)) for spline"),
    ("potential.r0", Some("3"), "regularity index r0"),
    ("potential.r1", Some("2"), "regularity index r1"),
    ("potential.omega", Some("0.05"), "coercivity constant ω"),
    ("sweeps", Some("10000"), "MCMC sweeps per chain"),
    ("thin", Some("1"), "record every thin-th sweep"),
    ("burn_in", None, "discarded sweeps (default sweeps/10)"),
    ("chains", Some("1"), "independent chains"),
    ("batches", Some("50"), "batches per chain for batch means"),
    ("seed", Some("0"), "64-bit master seed"),
    ("out", Some("run"), "output directory"),
    (
        "fit.window",
        None,
        "lo,hi separation window (default 3,side/6)",
    ),
    (
        "cov.window",
        None,
        "lo,hi separation window of the covariance table (default 1,side/2)",
    ),
    ("obs.a", None, "first observable point (default origin)"),
    ("obs.b", None, "second observable point (default (4,0,…))"),
    (
        "obs.m_a",
        Some("1"),
        "direction of the first observable, 1-based",
    ),
    (
        "obs.m_b",
        Some("1"),
        "direction of the second observable, 1-based",
    ),
    (
        "brute.samples",
        Some("20000"),
        "exact draws for the brute-force oracle",
    ),
    ("flow.eta", Some("0.2"), "η in (0, 1/4)"),
    ("flow.rho0", Some("0.1"), "ρ₀"),
    ("flow.a_b", Some("2"), "A_B"),
    ("flow.h", Some("1"), "h"),
    (
        "flow.inputs",
        Some("zero"),
        "zero | cubic block terms for the coupling flow",
    ),
    (
        "flow.kappa",
        Some("0.01"),
        "coefficient of the cubic block terms",
    ),
    (
        "mc.samples",
        Some("10000"),
        "Monte Carlo samples for oracle block terms",
    ),
    (
        "mc.tolerance",
        Some("0.01"),
        "largest accepted Monte Carlo standard error",
    ),
    (
        "identity.triples",
        Some("100"),
        "random triples for the identity check",
    ),
    (
        "frd.pairs",
        Some("100"),
        "random pairs for the coalescence check",
    ),
    (
        "frd.alpha",
        Some("2"),
        "derivative order of the scaling report",
    ),
    (
        "stages",
        Some("gff,frd,gibbs,fit,decay,rg"),
        "pipeline stages",
    ),
];

fn schema_key(key: &str) -> Option<&'static str> {
    SCHEMA
        .iter()
        .find(|(k, _, _)| *k == key)
        .map(|(k, _, _)| *k)
}

fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
}

/// Resolved key-value configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse_str(text: &str) -> CliResult<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`", no + 1))
            })?;
            let k = k.trim();
            if schema_key(k).is_none() {
                return Err(CliError::Config(format!(
                    "line {}: unknown key `{k}`",
                    no + 1
                )));
            }
            out.insert(k.to_string(), v.trim().to_string());
        }
        Ok(out)
    }

    /// Defaults, then `file`, then the environment, then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut cfg = Self::default();
        for (k, default, _) in SCHEMA {
            if let Some(v) = default {
                cfg.set(k, v.to_string());
            }
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            for (k, v) in Self::parse_str(&text)? {
                cfg.set(&k, v);
            }
        }
        for (name, value) in std::env::vars() {
            if CLI_ENV.contains(&name.as_str()) {
                continue;
            }
            if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
                let key = SCHEMA
                    .iter()
                    .map(|s| s.0)
                    .find(|k| env_name(k) == name)
                    .ok_or_else(|| {
                        CliError::Config(format!("unknown environment override {ENV_PREFIX}{rest}"))
                    })?;
                cfg.set(key, value);
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{o}`")))?;
            let k = k.trim();
            if schema_key(k).is_none() {
                return Err(CliError::Config(format!("unknown key `{k}`")));
            }
            cfg.set(k, v.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Canonical text form, one sorted `key = value` per line; hashed into the manifest.
    pub fn canonical(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn required<T: std::str::FromStr>(&self, key: &str) -> CliResult<T> {
        self.parse(key)?
            .ok_or_else(|| CliError::Config(format!("missing key `{key}`")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> CliResult<Option<Vec<T>>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{v}`")))
                })
                .collect::<CliResult<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.required("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out").unwrap_or("run"))
    }

    pub fn torus(&self) -> CliResult<Torus> {
        let d: usize = self.required("d")?;
        let l: usize = self.required("L")?;
        let n: u32 = self.required("N")?;
        Ok(Torus::new(d, l, n)?)
    }

    pub fn q(&self, d: usize) -> CliResult<QMatrix> {
        match self.list::<f64>("q")? {
            None => Ok(QMatrix::zero(d)),
            Some(e) => Ok(QMatrix::new(d, e)?),
        }
    }

    pub fn potential(&self) -> CliResult<PotentialSpec> {
        let kind = match self.get("potential").unwrap_or("zero") {
            "zero" => PotentialKind::Zero,
            "quartic" => PotentialKind::Quartic {
                kappa: self.required("potential.kappa")?,
            },
            "gauss_quartic" => PotentialKind::GaussQuartic {
                kappa: self.required("potential.kappa")?,
            },
            "gauss_quadratic" => PotentialKind::GaussQuadratic {
                a: self.required("potential.a")?,
            },
            "spline" => {
                let path: String = self.required("potential.path")?;
                PotentialKind::Spline(Spline::from_path(Path::new(&path))?)
            }
            other => return Err(CliError::Config(format!("unknown potential `{other}`"))),
        };
        let spec = PotentialSpec {
            kind,
            r0: self.required("potential.r0")?,
            r1: self.required("potential.r1")?,
            omega: self.required("potential.omega")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn point(&self, key: &str, d: usize, default: LatticePoint) -> CliResult<LatticePoint> {
        match self.list::<i64>(key)? {
            None => Ok(default),
            Some(c) if c.len() == d => Ok(LatticePoint(c)),
            Some(c) => Err(CliError::Config(format!(
                "`{key}` has {} coordinates, expected {d}",
                c.len()
            ))),
        }
    }

    /// Observable pair with 1-based directions converted to 0-based.
    pub fn pair(&self, d: usize) -> CliResult<ObservablePair> {
        let mut b = vec![0; d];
        b[0] = 4;
        let m_a: usize = self.required("obs.m_a")?;
        let m_b: usize = self.required("obs.m_b")?;
        if m_a == 0 || m_b == 0 || m_a > d || m_b > d {
            return Err(CliError::Config(format!(
                "observable directions must lie in 1..={d}"
            )));
        }
        Ok(ObservablePair {
            a: self.point("obs.a", d, LatticePoint::origin(d))?,
            m_a: m_a - 1,
            b: self.point("obs.b", d, LatticePoint(b))?,
            m_b: m_b - 1,
        })
    }

    pub fn model(&self) -> CliResult<ModelSpec> {
        let t = self.torus()?;
        let u = self.list::<f64>("u")?.unwrap_or_else(|| vec![0.0; t.d()]);
        Ok(ModelSpec::new(
            t,
            self.potential()?,
            u,
            self.required("beta")?,
        )?)
    }

    pub fn mcmc(&self) -> CliResult<McmcParams> {
        Ok(McmcParams {
            sweeps: self.required("sweeps")?,
            thin: self.required("thin")?,
            burn_in: self.parse("burn_in")?,
            chains: self.required("chains")?,
            batches: self.required("batches")?,
        })
    }

    fn window(&self, key: &str, default: (f64, f64)) -> CliResult<(f64, f64)> {
        match self.list::<f64>(key)? {
            None => Ok(default),
            Some(w) if w.len() == 2 && w[0] <= w[1] => Ok((w[0], w[1])),
            Some(_) => Err(CliError::Config(format!(
                "`{key}` must be `lo,hi` with lo ≤ hi"
            ))),
        }
    }

    pub fn fit_window(&self, side: usize) -> CliResult<(f64, f64)> {
        self.window("fit.window", (3.0, side as f64 / 6.0))
    }

    pub fn cov_window(&self, side: usize) -> CliResult<(f64, f64)> {
        self.window("cov.window", (1.0, side as f64 / 2.0))
    }

    pub fn flow(&self) -> CliResult<FlowBoundParams> {
        let t = self.torus()?;
        let p = FlowBoundParams {
            eta: self.required("flow.eta")?,
            rho0: self.required("flow.rho0")?,
            a_b: self.required("flow.a_b")?,
            h: self.required("flow.h")?,
            l: t.l(),
            d: t.d(),
            n: t.n(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn mc(&self) -> CliResult<McOptions> {
        Ok(McOptions {
            samples: self.required("mc.samples")?,
            tolerance: self.required("mc.tolerance")?,
        })
    }

    pub fn stages(&self) -> CliResult<Vec<String>> {
        const KNOWN: &[&str] = &["gff", "frd", "gibbs", "fit", "decay", "rg"];
        let s: Vec<String> = self.list::<String>("stages")?.unwrap_or_default();
        for st in &s {
            if !KNOWN.contains(&st.as_str()) {
                return Err(CliError::Config(format!("unknown stage `{st}`")));
            }
        }
        Ok(s)
    }
}
