//! Command-line front end.
//!
//! Every command writes CSV (JSON for fibers) headed by `#` lines holding the
//! fully resolved configuration, so a file can be regenerated from its own
//! header. Exit codes: 0 success, 1 numerical failure, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::bvp::BvpError;
use crate::classify::{self, ShootingConfig, TippingReport};
use crate::frozen::{self, Limit, Stability};
use crate::integrator::{ExtendedSystem, Integrator, IntegratorConfig, Termination};
use crate::lin::{self, ConnectionKind, FoldBranch, LinError, LinSetup, LinSolution, ProjectionBasis, PtopClosure};
use crate::model::{self, SystemParams};

#[derive(Debug, Parser)]
#[command(name = "rtip", version, about = "Rate-induced tipping from periodic attractors")]
struct Cli {
    /// `key = value` file; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file (default: standard output).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for ensembles and sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// `a`, or a grid `lo:hi:n` for `sweep`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    a: Option<String>,
    #[arg(long, global = true)]
    b: Option<f64>,
    #[arg(long, global = true)]
    omega: Option<f64>,
    #[arg(long = "lambda-max", global = true)]
    lambda_max: Option<f64>,
    /// `r`, or a grid `lo:hi:n` for `sweep`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    r: Option<String>,
    /// Ensemble size (default: rate-dependent schedule).
    #[arg(long = "M", global = true)]
    ensemble: Option<usize>,
    /// Margin of Λ from its limits.
    #[arg(long, global = true)]
    s: Option<f64>,
    /// Λ of the manifold section.
    #[arg(long, global = true)]
    section: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One trajectory of the extended system: columns t, x, y, Lambda.
    Simulate {
        #[arg(long, allow_hyphen_values = true)]
        t0: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        t1: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        y0: Option<f64>,
        /// Seed phase on the frozen stable orbit when x0, y0 are not given.
        #[arg(long, default_value_t = 0.0)]
        phase: f64,
        #[arg(long, default_value_t = 1001)]
        samples: usize,
    },
    /// Classify one (a, r) point.
    Classify,
    /// Classify a grid of (a, r) points.
    Sweep,
    /// Compute one connection with Lin's method.
    Connect {
        #[arg(long)]
        kind: ConnectionKind,
        #[arg(long = "r-bracket")]
        r_bracket: Option<String>,
        #[arg(long = "seed-branch", default_value = "lower")]
        seed_branch: FoldBranch,
    },
    /// Continue a critical-rate curve in a.
    Continue {
        #[arg(long)]
        kind: ConnectionKind,
        #[arg(long = "a-range")]
        a_range: String,
        #[arg(long = "r-bracket")]
        r_bracket: Option<String>,
        #[arg(long = "seed-branch", default_value = "lower")]
        seed_branch: FoldBranch,
    },
    /// Pullback-attractor fibers as JSON.
    Fibers {
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 101)]
        times: usize,
    },
    /// W^u(Γˢ₋), W^s(Γᵘ₊) and W^s(Z₊) in the plane Λ = section.
    Section {
        #[arg(long, default_value_t = 360)]
        samples: usize,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numerical(String),
    Io(io::Error),
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// `lo:hi:n` (inclusive, `n` points) or a single value.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("bad number {t:?} in {s:?}"));
    match parts.as_slice() {
        [v] => Ok(vec![num(v)?]),
        [lo, hi, n] => {
            let (lo, hi) = (num(lo)?, num(hi)?);
            let n: usize = n.trim().parse().map_err(|_| format!("bad count in {s:?}"))?;
            match n {
                0 => Err(format!("grid {s:?} has no points")),
                1 => Ok(vec![lo]),
                _ => Ok((0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()),
            }
        }
        _ => Err(format!("expected a value or lo:hi:n, got {s:?}")),
    }
}

/// `lo:hi`.
pub fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected lo:hi, got {s:?}"))?;
    let lo: f64 = lo.trim().parse().map_err(|_| format!("bad number in {s:?}"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("bad number in {s:?}"))?;
    if !(lo < hi) {
        return Err(format!("range {s:?} must have lo < hi"));
    }
    Ok((lo, hi))
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
        out.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(out)
}

const CONFIG_KEYS: &[&str] = &[
    "a", "b", "omega", "lambda-max", "r", "M", "s", "section", "jobs", "out", "seed-offset", "rel-tol", "abs-tol",
    "lin-delta", "lin-time-factor", "projection", "closure",
];

/// Everything a command needs, after merging file and flags.
#[derive(Debug, Clone)]
struct RunConfig {
    base: SystemParams,
    a: Option<String>,
    r: Option<String>,
    shooting: ShootingConfig,
    lin: LinSetup,
    section: f64,
    jobs: Option<usize>,
    out: Option<PathBuf>,
}

impl RunConfig {
    fn resolve(cli: &Cli) -> Result<Self, CliError> {
        let file = match &cli.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
                parse_config_file(&text).map_err(usage)?
            }
            None => BTreeMap::new(),
        };
        if let Some(k) = file.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(usage(format!("unknown config key {k:?}")));
        }
        let num = |key: &str| -> Result<Option<f64>, CliError> {
            file.get(key)
                .map(|v| v.parse::<f64>().map_err(|_| usage(format!("config {key}: bad number {v:?}"))))
                .transpose()
        };
        let defaults = SystemParams::default();
        let base = SystemParams {
            a: defaults.a,
            b: cli.b.or(num("b")?).unwrap_or(defaults.b),
            omega: cli.omega.or(num("omega")?).unwrap_or(defaults.omega),
            r: defaults.r,
            lambda_max: cli.lambda_max.or(num("lambda-max")?).unwrap_or(defaults.lambda_max),
        };
        let mut integrator = IntegratorConfig::default();
        if let Some(v) = num("rel-tol")? {
            integrator.rel_tol = v;
        }
        if let Some(v) = num("abs-tol")? {
            integrator.abs_tol = v;
        }
        let ensemble = match cli.ensemble {
            Some(m) => Some(m),
            None => num("M")?.map(|v| v as usize),
        };
        let shooting = ShootingConfig {
            ensemble,
            s: cli.s.or(num("s")?).unwrap_or(0.01),
            seed_offset: num("seed-offset")?.unwrap_or(1e-3),
            integrator,
        };
        let mut lin = LinSetup::default();
        if let Some(v) = num("lin-delta")? {
            lin.delta = v;
        }
        if let Some(v) = num("lin-time-factor")? {
            lin.time_factor = v;
        }
        if let Some(v) = file.get("projection") {
            let basis = match v.as_str() {
                "adjoint" => ProjectionBasis::Adjoint,
                "literal" => ProjectionBasis::Literal,
                _ => return Err(usage(format!("projection must be adjoint or literal, got {v:?}"))),
            };
            lin.departure_basis = basis;
            lin.arrival_basis = basis;
        }
        if let Some(v) = file.get("closure") {
            lin.closure = match v.as_str() {
                "arrival-phase" => PtopClosure::ArrivalPhase,
                "departure-phase" => PtopClosure::DeparturePhase,
                "departure-offset" => PtopClosure::DepartureOffset,
                _ => return Err(usage(format!("unknown closure {v:?}"))),
            };
        }
        let jobs = match cli.jobs {
            Some(j) => Some(j),
            None => num("jobs")?.map(|v| v as usize),
        };
        if jobs == Some(0) {
            return Err(usage("--jobs must be at least 1"));
        }
        let cfg = RunConfig {
            base,
            a: cli.a.clone().or_else(|| file.get("a").cloned()),
            r: cli.r.clone().or_else(|| file.get("r").cloned()),
            shooting,
            lin,
            section: cli.section.or(num("section")?).unwrap_or(1.257),
            jobs,
            out: cli.out.clone().or_else(|| file.get("out").map(PathBuf::from)),
        };
        base.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    fn single(&self, which: &str, spec: &Option<String>, default: f64) -> Result<f64, CliError> {
        match spec {
            None => Ok(default),
            Some(s) => match parse_grid(s).map_err(usage)?.as_slice() {
                [v] => Ok(*v),
                _ => Err(usage(format!("--{which} takes a single value for this command"))),
            },
        }
    }

    fn params(&self, default_r: f64) -> Result<SystemParams, CliError> {
        let p = SystemParams {
            a: self.single("a", &self.a, 0.1)?,
            r: self.single("r", &self.r, default_r)?,
            ..self.base
        };
        p.validate().map_err(|e| usage(e.to_string()))?;
        p.require_periodic_orbits().map_err(|e| usage(e.to_string()))?;
        self.shooting.validate(&p).map_err(|e| usage(e.to_string()))?;
        Ok(p)
    }

    fn header(&self, command: &str, extra: &[(&str, String)]) -> String {
        let mut h = format!("# rtip {}\n# command = {command}\n", env!("CARGO_PKG_VERSION"));
        let mut line = |k: &str, v: String| h.push_str(&format!("# {k} = {v}\n"));
        line("a", self.a.clone().unwrap_or_else(|| "0.1".into()));
        line("r", self.r.clone().unwrap_or_else(|| "default".into()));
        line("b", self.base.b.to_string());
        line("omega", self.base.omega.to_string());
        line("lambda-max", self.base.lambda_max.to_string());
        line(
            "M",
            self.shooting
                .ensemble
                .map(|m| m.to_string())
                .unwrap_or_else(|| "schedule".into()),
        );
        line("s", self.shooting.s.to_string());
        line("seed-offset", self.shooting.seed_offset.to_string());
        line("rel-tol", self.shooting.integrator.rel_tol.to_string());
        line("abs-tol", self.shooting.integrator.abs_tol.to_string());
        line("section", self.section.to_string());
        line("lin-delta", self.lin.delta.to_string());
        line("lin-time-factor", self.lin.time_factor.to_string());
        line("projection", format!("{:?}", self.lin.departure_basis).to_lowercase());
        line("closure", format!("{:?}", self.lin.closure));
        for (k, v) in extra {
            line(k, v.clone());
        }
        h
    }
}

fn open_out(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

fn report_row(rep: &TippingReport) -> String {
    format!(
        "{},{},{},{:.6},{},{},{:.6}",
        rep.a,
        rep.r,
        rep.class,
        rep.tipped_fraction,
        rep.region.map(|r| r.to_string()).unwrap_or_default(),
        rep.ensemble,
        rep.half_time
    )
}

const GRID_COLUMNS: &str = "a,r,class,tipped_fraction,region,M,T";

fn cmd_simulate(
    cfg: &RunConfig,
    t0: Option<f64>,
    t1: Option<f64>,
    xy: (Option<f64>, Option<f64>),
    phase: f64,
    samples: usize,
) -> Result<(), CliError> {
    let p = cfg.params(0.1)?;
    let t_half = classify::integration_time(p.r, p.lambda_max, cfg.shooting.s);
    let (t0, t1) = (t0.unwrap_or(-t_half), t1.unwrap_or(t_half));
    if t1 < t0 {
        return Err(usage("--t1 must not precede --t0"));
    }
    let lambda0 = model::parameter_shift(p.r * t0, p.lambda_max);
    let (rs, _) = frozen::orbit_radii(p.a, p.b).map_err(|e| usage(e.to_string()))?;
    let rho = rs.sqrt() + cfg.shooting.seed_offset;
    let y0 = model::extended_state(
        xy.0.unwrap_or(lambda0 + rho * phase.cos()),
        xy.1.unwrap_or(rho * phase.sin()),
        lambda0,
    );
    let header = cfg.header(
        "simulate",
        &[
            ("t0", t0.to_string()),
            ("t1", t1.to_string()),
            ("x0", y0[0].to_string()),
            ("y0", y0[1].to_string()),
            ("samples", samples.to_string()),
        ],
    );
    let mut w = open_out(&cfg.out)?;
    w.write_all(header.as_bytes())?;
    writeln!(w, "t,x,y,Lambda")?;
    if t1 == t0 {
        return Ok(w.flush()?);
    }
    let integ = Integrator::new(cfg.shooting.integrator);
    let (traj, failure) = match integ.integrate(&ExtendedSystem { params: p }, &y0, t0, t1) {
        Ok(t) => (t, None),
        Err(e) => (e.partial().clone(), Some(e.to_string())),
    };
    let n = samples.max(2);
    for k in 0..n {
        let t = t0 + (t1 - t0) * k as f64 / (n - 1) as f64;
        if t > traj.last_time() {
            break;
        }
        if let Some(y) = traj.interpolate(t) {
            writeln!(w, "{t:.10},{:.10},{:.10},{:.10}", y[0], y[1], y[2])?;
        }
    }
    if traj.termination == Termination::Escape {
        writeln!(w, "# escape at t = {:.10}", traj.last_time())?;
    }
    w.flush()?;
    match failure {
        Some(msg) => Err(CliError::Numerical(format!("integration failed: {msg}"))),
        None => Ok(()),
    }
}

fn cmd_classify(cfg: &RunConfig) -> Result<(), CliError> {
    let p = cfg.params(0.1)?;
    let rep = classify::classify_region(&p, &cfg.shooting).map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut w = open_out(&cfg.out)?;
    w.write_all(cfg.header("classify", &[]).as_bytes())?;
    writeln!(w, "# class={} past_limit={}", rep.class, rep.past_limit.map(|l| l.to_string()).unwrap_or_default())?;
    writeln!(w, "# arcs = {:?}", rep.arcs)?;
    if rep.degraded() {
        writeln!(w, "# degraded: {} members failed to integrate", rep.failed)?;
    }
    writeln!(w, "{GRID_COLUMNS}")?;
    writeln!(w, "{}", report_row(&rep))?;
    Ok(w.flush()?)
}

fn cmd_sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let a_grid = parse_grid(cfg.a.as_deref().unwrap_or("0.1")).map_err(usage)?;
    let r_grid = parse_grid(cfg.r.as_deref().ok_or_else(|| usage("sweep needs --r lo:hi:n"))?).map_err(usage)?;
    let fold = cfg.base.b * cfg.base.b / 4.0;
    if let Some(a) = a_grid.iter().find(|&&a| !(a > 0.0 && a < fold)) {
        return Err(usage(format!("grid value a = {a} lies outside (0, {fold})")));
    }
    if let Some(r) = r_grid.iter().find(|&&r| !(r > 0.0)) {
        return Err(usage(format!("grid value r = {r} must be positive")));
    }
    cfg.shooting
        .validate(&cfg.base)
        .map_err(|e| usage(e.to_string()))?;
    let cells = classify::sweep(&cfg.base, &a_grid, &r_grid, &cfg.shooting, true);
    let mut w = open_out(&cfg.out)?;
    let shape = format!("{}x{}", a_grid.len(), r_grid.len());
    w.write_all(cfg.header("sweep", &[("grid", shape)]).as_bytes())?;
    writeln!(w, "{GRID_COLUMNS}")?;
    let mut failures = 0;
    for c in &cells {
        match &c.report {
            Ok(rep) => writeln!(w, "{}", report_row(rep))?,
            Err(e) => {
                failures += 1;
                writeln!(w, "{},{},error,,,,", c.a, c.r)?;
                writeln!(w, "# cell ({}, {}) failed: {e}", c.a, c.r)?;
            }
        }
    }
    w.flush()?;
    if failures > 0 {
        return Err(CliError::Numerical(format!("{failures} sweep cells failed")));
    }
    Ok(())
}

fn solution_rows(sols: &[LinSolution]) -> String {
    let mut s = String::from("a,r,kind,theta,phi,residual\n");
    for x in sols {
        let phi = x.phi.map(|v| format!("{v:.12}")).unwrap_or_default();
        s.push_str(&format!(
            "{:.12},{:.12},{},{:.12},{},{:.3e}\n",
            x.params.a, x.params.r, x.kind, x.theta, phi, x.diagnostics.residual_norm
        ));
    }
    s
}

fn diagnostics_lines(sols: &[LinSolution]) -> String {
    sols.iter()
        .map(|x| {
            let d = &x.diagnostics;
            format!(
                "# xi = {:.3e}, iterations = {}, gap identity = {:.1e}, section = {:.1e}, lin-space sigma = {:.3}{}\n",
                x.xi,
                d.iterations,
                d.gap_identity_error,
                d.section_error,
                d.lin_space_sigma,
                d.dropped_adjoint_condition
                    .map(|v| format!(", dropped adjoint condition = {v:.1e}"))
                    .unwrap_or_default()
            )
        })
        .collect()
}

/// Writes the best Newton iterate next to the output for a restart.
fn dump_best(cfg: &RunConfig, err: &LinError) {
    let best = match err {
        LinError::Bvp(BvpError::NoConvergence { best, residual, .. }) => (best, *residual),
        _ => return,
    };
    let json = serde_json::json!({ "residual": best.1, "iterate": best.0 });
    let path = match &cfg.out {
        Some(p) => p.with_extension("best.json"),
        None => PathBuf::from("rtip-best.json"),
    };
    if fs::write(&path, json.to_string()).is_ok() {
        eprintln!("best iterate written to {}", path.display());
    }
}

fn lin_failure(cfg: &RunConfig, e: LinError) -> CliError {
    dump_best(cfg, &e);
    CliError::Numerical(e.to_string())
}

fn connect_one(
    cfg: &RunConfig,
    kind: ConnectionKind,
    p: &SystemParams,
    r_bracket: &Option<String>,
    branch: FoldBranch,
    seed_rate: f64,
) -> Result<Vec<LinSolution>, CliError> {
    match kind {
        ConnectionKind::Ptoe => {
            let spec = r_bracket.as_deref().ok_or_else(|| usage("ptoe needs --r-bracket lo:hi"))?;
            let bracket = parse_range(spec).map_err(usage)?;
            let c = lin::find_critical_rate(p, p.a, bracket, &cfg.lin).map_err(|e| lin_failure(cfg, e))?;
            Ok(vec![c.solution])
        }
        ConnectionKind::Ptop0 => lin::seed_ptop(p, &cfg.lin).map_err(|e| lin_failure(cfg, e)),
        ConnectionKind::Ptop1 => {
            let c = lin::critical_ptop_rate(p, p.a, branch, seed_rate, &cfg.lin).map_err(|e| lin_failure(cfg, e))?;
            Ok(vec![c.solution])
        }
    }
}

fn cmd_connect(cfg: &RunConfig, kind: ConnectionKind, r_bracket: &Option<String>, branch: FoldBranch) -> Result<(), CliError> {
    let p = cfg.params(lin::PTOP_SEED_RATE)?;
    let sols = connect_one(cfg, kind, &p, r_bracket, branch, p.r)?;
    let mut w = open_out(&cfg.out)?;
    let extra = [
        ("kind", kind.to_string()),
        ("r-bracket", r_bracket.clone().unwrap_or_default()),
        ("seed-branch", format!("{branch:?}").to_lowercase()),
    ];
    w.write_all(cfg.header("connect", &extra).as_bytes())?;
    w.write_all(diagnostics_lines(&sols).as_bytes())?;
    w.write_all(solution_rows(&sols).as_bytes())?;
    Ok(w.flush()?)
}

fn cmd_continue(
    cfg: &RunConfig,
    kind: ConnectionKind,
    a_range: &str,
    r_bracket: &Option<String>,
    branch: FoldBranch,
) -> Result<(), CliError> {
    if kind == ConnectionKind::Ptop0 {
        return Err(usage("ptop0 connections form a two-parameter family; continue ptoe or ptop1"));
    }
    let range = parse_range(a_range).map_err(usage)?;
    let fold = cfg.base.b * cfg.base.b / 4.0;
    if !(range.0 > 0.0 && range.1 < fold) {
        return Err(usage(format!("--a-range must lie inside (0, {fold})")));
    }
    let p = cfg.params(lin::PTOP_SEED_RATE)?;
    let seed = connect_one(cfg, kind, &p, r_bracket, branch, p.r)?.remove(0);
    let curve = lin::continue_threshold(&seed, range, &cfg.lin).map_err(|e| lin_failure(cfg, e))?;
    let mut w = open_out(&cfg.out)?;
    let extra = [
        ("kind", kind.to_string()),
        ("a-range", a_range.to_string()),
        ("seed-branch", format!("{branch:?}").to_lowercase()),
        ("seed", format!("a = {}, r = {}", seed.params.a, seed.params.r)),
    ];
    w.write_all(cfg.header("continue", &extra).as_bytes())?;
    curve.write_csv(&mut w)?;
    Ok(w.flush()?)
}

fn cmd_fibers(cfg: &RunConfig, samples: usize, times: usize) -> Result<(), CliError> {
    let p = cfg.params(0.1)?;
    if samples == 0 || times < 2 {
        return Err(usage("fibers needs at least one sample and two times"));
    }
    let t = classify::integration_time(p.r, p.lambda_max, cfg.shooting.s);
    let grid: Vec<f64> = (0..times).map(|k| -t + 2.0 * t * k as f64 / (times - 1) as f64).collect();
    let f = classify::pullback_fibers(&p, &cfg.shooting, samples, &grid).map_err(|e| CliError::Numerical(e.to_string()))?;
    let json = f.to_json().map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut w = open_out(&cfg.out)?;
    // JSON has no comments; the configuration goes in a sidecar.
    if let Some(path) = &cfg.out {
        fs::write(path.with_extension("config.txt"), cfg.header("fibers", &[]))?;
    }
    writeln!(w, "{json}")?;
    Ok(w.flush()?)
}

fn cmd_section(cfg: &RunConfig, samples: usize) -> Result<(), CliError> {
    let p = cfg.params(0.1)?;
    let (l, lmax, s) = (cfg.section, p.lambda_max, cfg.shooting.s);
    if !(l > s && l < lmax - s) {
        return Err(usage(format!("--section must lie in ({s}, {})", lmax - s)));
    }
    let shift_time = |lambda: f64| model::parameter_shift_inverse(lambda, lmax) / p.r;
    let sys = ExtendedSystem { params: p };
    let integ = Integrator::new(IntegratorConfig {
        escape_radius_sq: 4.0,
        ..cfg.shooting.integrator
    });
    let mut rows = Vec::new();
    // W^u(Γˢ₋): the pullback ring carried from Λ = s up to the section.
    let fib = classify::pullback_fibers(&p, &cfg.shooting, samples, &[shift_time(s), shift_time(l)])
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    rows.extend(fib.points[1].iter().flatten().map(|q| ("Wu(Gs-)", q[0], q[1])));
    // W^s(Γᵘ₊): a ring on the frozen unstable orbit at Λ = λmax − s, backward.
    let gu = frozen::FrozenPeriodicOrbit::limit(Limit::Future, Stability::Unstable, &p).map_err(|e| usage(e.to_string()))?;
    let back = shift_time(l) - shift_time(lmax - s);
    for k in 0..samples {
        let th = std::f64::consts::TAU * k as f64 / samples as f64;
        let mut y = gu.point(th);
        y[0] -= s;
        y[2] = lmax - s;
        if let Ok(e) = integ.propagate(&sys, &y, 0.0, back) {
            if e.termination == Termination::TimeReached {
                rows.push(("Ws(Gu+)", e.state[0], e.state[1]));
            }
        }
    }
    // W^s(Z₊): one point.
    let wsz = classify::stable_manifold_zplus(&p, &cfg.shooting).map_err(|e| CliError::Numerical(e.to_string()))?;
    let t_sec = shift_time(l) - shift_time(lmax - s);
    if let Some(y) = wsz.trajectory.interpolate(t_sec) {
        rows.push(("Ws(Z+)", y[0], y[1]));
    }
    let mut w = open_out(&cfg.out)?;
    w.write_all(cfg.header("section", &[("samples", samples.to_string())]).as_bytes())?;
    writeln!(w, "set,x,y")?;
    for (set, x, y) in rows {
        writeln!(w, "{set},{x:.10},{y:.10}")?;
    }
    Ok(w.flush()?)
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(cli)?;
    let run = || match &cli.command {
        Command::Simulate {
            t0,
            t1,
            x0,
            y0,
            phase,
            samples,
        } => cmd_simulate(&cfg, *t0, *t1, (*x0, *y0), *phase, *samples),
        Command::Classify => cmd_classify(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
        Command::Connect {
            kind,
            r_bracket,
            seed_branch,
        } => cmd_connect(&cfg, *kind, r_bracket, *seed_branch),
        Command::Continue {
            kind,
            a_range,
            r_bracket,
            seed_branch,
        } => cmd_continue(&cfg, *kind, a_range, r_bracket, *seed_branch),
        Command::Fibers { samples, times } => cmd_fibers(&cfg, *samples, *times),
        Command::Section { samples } => cmd_section(&cfg, *samples),
    };
    match cfg.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| usage(e.to_string()))?
            .install(run),
        None => run(),
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(CliError::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            1
        }
        Err(CliError::Io(e)) => {
            eprintln!("i/o error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_syntax() {
        assert_eq!(parse_grid("0.1").unwrap(), vec![0.1]);
        let g = parse_grid("0.01:0.24:48").unwrap();
        assert_eq!(g.len(), 48);
        assert_eq!(g[0], 0.01);
        assert!((g[47] - 0.24).abs() < 1e-15);
        assert!(parse_grid("0:1:0").is_err());
        assert!(parse_grid("a:b").is_err());
        assert_eq!(parse_range("0.19:0.21").unwrap(), (0.19, 0.21));
        assert!(parse_range("0.2:0.1").is_err());
    }

    #[test]
    fn config_file_syntax() {
        let m = parse_config_file("# comment\na = 0.1\nlambda_max = 8 # trailing\n\nM=400\n").unwrap();
        assert_eq!(m["a"], "0.1");
        assert_eq!(m["lambda-max"], "8");
        assert_eq!(m["M"], "400");
        assert!(parse_config_file("novalue\n").is_err());
    }
}
