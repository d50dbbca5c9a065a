use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use qam::detect::{
    control_bulk_window, detect_scan, match_predictions, DetectorConfig, MatchTolerances,
};
use qam::epsmaps::{
    enumerate_delta_sequences, portrait, seed_grid, DeltaSequence, PhasePoint, TorusMapSpec,
};
use qam::io::{self as qio, fmt_f64, CsvWriter};
use qam::orbits::{
    acceleration, build_catalog, build_ray_hessian, candidate_jumps, det_growth, find_periodic_orbits,
    growth_slope, orbit_to_ray, random_delta_ray, transfer_lyapunov, CatalogEntry, CatalogQuery,
    OrbitSearch,
};
use qam::quantum::{scan_tau, EtaSpec, HistoryPolicy, ScanConfig};
use qam::resonance::{
    closest_resonance, gauss_coefficients, nearest_resonances, ResonanceSpec,
};
use qam::QamError;

#[derive(Parser, Debug, Serialize)]
#[command(
    name = "qam",
    version,
    about = "Quantum accelerator modes near kicked-rotor resonances",
    args_override_self = true,
    allow_negative_numbers = true
)]
struct Cli {
    /// File of `key = value` lines used as defaults for the subcommand's flags.
    #[arg(long, global = true)]
    #[serde(skip)]
    config: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    #[serde(skip)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Resonant quasi-momenta and Gauss coefficients, or resonances near a tau.
    Resonance(ResonanceArgs),
    /// Ensemble momentum distributions over a tau grid.
    Evolve(EvolveArgs),
    /// Phase portrait of a period map on the torus.
    Portrait(PortraitArgs),
    /// Periodic-orbit catalog.
    Orbits(OrbitsArgs),
    /// Acceleration of an orbit family.
    Predict(PredictArgs),
    /// Accelerated-peak detection on a tau scan, matched against orbits.
    Detect(DetectArgs),
    /// Determinant growth and Lyapunov exponents of ray Hessians.
    Stability(StabilityArgs),
}

#[derive(Args, Debug, Serialize)]
struct ResonanceArgs {
    #[arg(long, requires = "q")]
    p: Option<i64>,
    #[arg(long, requires = "p")]
    q: Option<i64>,
    #[arg(long, conflicts_with_all = ["p", "q"])]
    tau_over_2pi: Option<f64>,
    #[arg(long, default_value_t = 13)]
    q_max: i64,
    /// Half-width of the search window in tau/(2 pi); default 1/(2 q_max^2).
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize, Clone)]
struct EtaArgs {
    #[arg(long, conflicts_with = "eta_ratio")]
    eta: Option<f64>,
    /// eta = ratio * tau at every tau.
    #[arg(long)]
    eta_ratio: Option<f64>,
}

impl EtaArgs {
    fn spec(&self) -> Result<EtaSpec, CliError> {
        match (self.eta, self.eta_ratio) {
            (Some(e), None) => Ok(EtaSpec::Absolute(e)),
            (None, Some(r)) => Ok(EtaSpec::Ratio(r)),
            _ => Err(CliError::config("give exactly one of --eta and --eta-ratio")),
        }
    }
}

#[derive(Args, Debug, Serialize, Clone)]
struct ScanArgs {
    #[arg(long)]
    k: f64,
    #[command(flatten)]
    #[serde(flatten)]
    eta: EtaArgs,
    /// Explicit grid values of tau/(2 pi), comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["tau_min", "tau_max"])]
    tau_over_2pi: Vec<f64>,
    /// Lower end of an evenly spaced grid in tau/(2 pi).
    #[arg(long, requires = "tau_max")]
    tau_min: Option<f64>,
    #[arg(long, requires = "tau_min")]
    tau_max: Option<f64>,
    #[arg(long, default_value_t = 150)]
    points: usize,
    #[arg(long, default_value_t = 100)]
    kicks: usize,
    #[arg(long, default_value_t = 100)]
    ensemble: usize,
    #[arg(long, default_value_t = 0.0)]
    momentum_mean: f64,
    #[arg(long, default_value_t = 2.5)]
    momentum_sigma: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    bin_width: f64,
}

impl ScanArgs {
    fn grid(&self) -> Result<Vec<f64>, CliError> {
        let xs = match (self.tau_min, self.tau_max) {
            (Some(lo), Some(hi)) => {
                if self.points < 2 {
                    return Err(CliError::config("--points must be >= 2 for a range"));
                }
                (0..self.points)
                    .map(|i| lo + (hi - lo) * i as f64 / (self.points - 1) as f64)
                    .collect()
            }
            _ => self.tau_over_2pi.clone(),
        };
        if xs.is_empty() {
            return Err(CliError::config("no tau grid: use --tau-over-2pi or --tau-min/--tau-max"));
        }
        Ok(xs)
    }

    fn scan_config(&self, history: HistoryPolicy) -> Result<ScanConfig, CliError> {
        let seed = self
            .seed
            .ok_or_else(|| CliError::config("--seed is required for ensemble runs"))?;
        let cfg = ScanConfig {
            tau_grid: self.grid()?.iter().map(|x| 2.0 * PI * x).collect(),
            k: self.k,
            eta: self.eta.spec()?,
            n_kicks: self.kicks,
            ensemble_size: self.ensemble,
            momentum_mean: self.momentum_mean,
            momentum_sigma: self.momentum_sigma,
            seed,
            bin_width: self.bin_width,
            history,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Serialize)]
struct EvolveArgs {
    #[command(flatten)]
    #[serde(flatten)]
    scan: ScanArgs,
    #[arg(long)]
    out: PathBuf,
    /// Column-normalized copy of the scan.
    #[arg(long)]
    heatmap: Option<PathBuf>,
    /// Eq.-(12) final momenta for each `--families` entry over the grid.
    #[arg(long)]
    overlay: Option<PathBuf>,
    /// Orbit families `P/Q:D_LIST:PERIOD[:J]`, comma separated; D_LIST is `;` separated.
    #[arg(long, value_delimiter = ',')]
    families: Vec<String>,
    /// Grid indices whose per-kick history is written.
    #[arg(long, value_delimiter = ',')]
    history_index: Vec<usize>,
    #[arg(long, requires = "history_index")]
    history_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize, Clone)]
struct MapArgs {
    #[arg(long)]
    k_tilde: Option<f64>,
    /// tau * eta.
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Physical parametrisation instead of --k-tilde/--drift/--epsilon.
    #[arg(long, conflicts_with_all = ["k_tilde", "drift", "epsilon"])]
    tau_over_2pi: Option<f64>,
    #[arg(long, requires = "tau_over_2pi")]
    res_p: Option<i64>,
    #[arg(long, requires = "tau_over_2pi")]
    res_q: Option<i64>,
    #[arg(long, requires = "tau_over_2pi")]
    k: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    eta: EtaArgs,
    /// Denominator of the delta sequence (defaults to the resonance's q, else 1).
    #[arg(long)]
    q: Option<i64>,
    /// Numerators d_t of delta_t = 2 pi d_t / q, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    d: Vec<i64>,
}

struct MapContext {
    spec: TorusMapSpec,
    epsilon: Option<f64>,
    res: Option<(i64, i64)>,
}

impl MapArgs {
    fn context_with(&self, d: Vec<i64>) -> Result<MapContext, CliError> {
        if let Some(x) = self.tau_over_2pi {
            let tau = 2.0 * PI * x;
            let (rp, rq) = match (self.res_p, self.res_q) {
                (Some(p), Some(q)) => (p, q),
                (None, None) => {
                    let (s, _) = closest_resonance(tau, self.q.unwrap_or(13))?;
                    (s.p, s.q)
                }
                _ => return Err(CliError::config("give both --res-p and --res-q")),
            };
            let res = ResonanceSpec::new(rp, rq)?;
            let k = self.k.ok_or_else(|| CliError::config("--k is required with --tau-over-2pi"))?;
            let eta = self.eta.spec()?.eta(tau);
            let eps = res.epsilon(tau);
            let q = self.q.unwrap_or(rq);
            let spec = TorusMapSpec::new(k * eps, tau * eta, DeltaSequence::new(q, d)?)?;
            Ok(MapContext {
                spec,
                epsilon: Some(eps),
                res: Some((rp, rq)),
            })
        } else {
            let kt = self
                .k_tilde
                .ok_or_else(|| CliError::config("--k-tilde (or --tau-over-2pi) is required"))?;
            let drift = self.drift.ok_or_else(|| CliError::config("--drift is required"))?;
            let spec = TorusMapSpec::new(kt, drift, DeltaSequence::new(self.q.unwrap_or(1), d)?)?;
            Ok(MapContext {
                spec,
                epsilon: self.epsilon,
                res: None,
            })
        }
    }

    fn context(&self) -> Result<MapContext, CliError> {
        self.context_with(self.d.clone())
    }
}

#[derive(Args, Debug, Serialize)]
struct PortraitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    map: MapArgs,
    #[arg(long, default_value_t = 16)]
    n_theta: usize,
    #[arg(long, default_value_t = 16)]
    n_j: usize,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct OrbitsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    map: MapArgs,
    /// Orbit period in units of the map period.
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// Jumping index; by default the candidates around the drift are tried.
    #[arg(long)]
    j: Option<i64>,
    #[arg(long, default_value_t = 1)]
    j_spread: i64,
    /// Sweep every delta sequence of this period instead of --d.
    #[arg(long)]
    sweep_t: Option<usize>,
    #[arg(long, default_value_t = 0)]
    c_min: i64,
    #[arg(long, default_value_t = 0)]
    c_max: i64,
    #[arg(long, default_value_t = 64)]
    grid: usize,
    #[arg(long)]
    stable_only: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct PredictArgs {
    #[arg(long = "T", default_value_t = 1)]
    period_t: usize,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    j: i64,
    /// Sum of the d_t over one period.
    #[arg(long, conflicts_with = "d")]
    dsum: Option<i64>,
    #[arg(long, value_delimiter = ',')]
    d: Vec<i64>,
    /// Denominator of the delta sequence (defaults to the resonance's q).
    #[arg(long)]
    q: Option<i64>,
    #[arg(long)]
    tau_over_2pi: f64,
    #[command(flatten)]
    #[serde(flatten)]
    eta: EtaArgs,
    #[arg(long, requires = "res_q")]
    res_p: Option<i64>,
    #[arg(long, requires = "res_p")]
    res_q: Option<i64>,
    #[arg(long, default_value_t = 13)]
    q_max: i64,
}

#[derive(Args, Debug, Serialize)]
struct DetectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    scan: ScanArgs,
    /// Orbit families `P/Q:D_LIST:PERIOD[:J]` searched at every tau.
    #[arg(long, value_delimiter = ',', required = true)]
    families: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    catalog_out: Option<PathBuf>,
    #[arg(long)]
    scan_out: Option<PathBuf>,
    /// Bulk window; by default derived from the k=0 control run.
    #[arg(long, requires = "bulk_hi")]
    bulk_lo: Option<f64>,
    #[arg(long, requires = "bulk_lo")]
    bulk_hi: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    bulk_fraction: f64,
    #[arg(long, default_value_t = 2.0)]
    bulk_dilation: f64,
    #[arg(long)]
    mass_threshold: Option<f64>,
    #[arg(long)]
    gate: Option<f64>,
    #[arg(long)]
    max_gap: Option<usize>,
    #[arg(long)]
    min_fraction: Option<f64>,
    #[arg(long)]
    transient: Option<usize>,
    #[arg(long, default_value_t = 0.15)]
    match_tol: f64,
    #[arg(long, default_value_t = 0.05)]
    a_floor: f64,
    #[arg(long, default_value_t = 0.9)]
    min_r2: f64,
    #[arg(long, default_value_t = 64)]
    orbit_grid: usize,
}

#[derive(Args, Debug, Serialize)]
struct StabilityArgs {
    /// i.i.d. uniform diagonal in [diag-lo, diag-hi].
    #[arg(long, conflicts_with = "random_delta")]
    random_diag: bool,
    #[arg(long, default_value_t = 1.0)]
    diag_lo: f64,
    #[arg(long, default_value_t = 3.0)]
    diag_hi: f64,
    /// Rays with uniformly random s-labels.
    #[arg(long)]
    random_delta: bool,
    #[arg(long, default_value_t = 1)]
    rays: usize,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    map: MapArgs,
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long)]
    j: Option<i64>,
    #[arg(long, default_value_t = 1)]
    j_spread: i64,
    /// `n,log_abs_det` of the first series.
    #[arg(long)]
    growth_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Run(String),
}

impl CliError {
    fn config(msg: &str) -> Self {
        CliError::Config(msg.to_string())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Run(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<QamError> for CliError {
    fn from(e: QamError) -> Self {
        match e {
            QamError::InvalidInput(_) | QamError::NotCoprime { .. } | QamError::NotResonant { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Run(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

/// Turns `key = value` lines into `--key value` flags. A value of `true`
/// yields a bare switch, `false` drops the key.
fn config_flags(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("{}:{}: expected `key = value`", path.display(), n + 1))
        })?;
        let key = k.trim().replace('_', "-");
        let value = v.trim();
        match value {
            "true" => out.push(format!("--{key}")),
            "false" => {}
            _ => {
                out.push(format!("--{key}"));
                out.push(value.to_string());
            }
        }
    }
    Ok(out)
}

/// Splices config-file flags in right after the subcommand name so that
/// anything given on the command line overrides them.
fn expand_args(raw: Vec<String>) -> Result<Vec<String>, CliError> {
    let mut path = None;
    for (i, a) in raw.iter().enumerate() {
        if a == "--config" {
            path = raw.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(raw);
    };
    let flags = config_flags(Path::new(&path))?;
    let sub = raw
        .iter()
        .skip(1)
        .position(|a| !a.starts_with('-') && Some(a.as_str()) != Some(path.as_str()))
        .map(|i| i + 1);
    let Some(sub) = sub else {
        return Ok(raw);
    };
    let mut out = raw[..=sub].to_vec();
    out.extend(flags);
    out.extend_from_slice(&raw[sub + 1..]);
    Ok(out)
}

/// `key=value` pairs of the parsed command, for the CSV comment header.
fn echo(cli: &Cli) -> Vec<(String, String)> {
    let value = serde_json::to_value(&cli.command).unwrap_or(serde_json::Value::Null);
    let mut out = Vec::new();
    if let serde_json::Value::Object(map) = value {
        for (k, v) in map {
            let s = match v {
                serde_json::Value::Null => continue,
                serde_json::Value::String(s) => s,
                serde_json::Value::Array(items) => items
                    .iter()
                    .map(|x| match x {
                        serde_json::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            out.push((k, s));
        }
    }
    out
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| {
        CliError::Run(format!("cannot create {}: {e}", path.display()))
    })?))
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

#[derive(Debug, Clone, PartialEq)]
struct Family {
    res_p: i64,
    res_q: i64,
    d: Vec<i64>,
    period_p: usize,
    jump_j: Option<i64>,
}

impl Family {
    fn parse(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Config(format!("bad family `{s}`, expected P/Q:D_LIST:PERIOD[:J]"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        if parts.len() < 3 || parts.len() > 4 {
            return Err(bad());
        }
        let (p, q) = parts[0].split_once('/').ok_or_else(bad)?;
        let d = parts[1]
            .split(';')
            .map(|x| x.trim().parse::<i64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad())?;
        Ok(Family {
            res_p: p.trim().parse().map_err(|_| bad())?,
            res_q: q.trim().parse().map_err(|_| bad())?,
            d,
            period_p: parts[2].trim().parse().map_err(|_| bad())?,
            jump_j: match parts.get(3) {
                Some(j) => Some(j.trim().parse().map_err(|_| bad())?),
                None => None,
            },
        })
    }

    fn spec_at(&self, tau: f64, k: f64, eta: f64) -> Result<(TorusMapSpec, f64), CliError> {
        let res = ResonanceSpec::new(self.res_p, self.res_q)?;
        let eps = res.epsilon(tau);
        let spec = TorusMapSpec::new(k * eps, tau * eta, DeltaSequence::new(self.res_q, self.d.clone())?)?;
        Ok((spec, eps))
    }
}

fn parse_families(raw: &[String]) -> Result<Vec<Family>, CliError> {
    raw.iter().filter(|s| !s.trim().is_empty()).map(|s| Family::parse(s)).collect()
}

fn cmd_resonance(a: &ResonanceArgs, echo: &[(String, String)]) -> Result<(), CliError> {
    let out = output(&a.out)?;
    match (a.p, a.q, a.tau_over_2pi) {
        (Some(p), Some(q), None) => {
            let spec = ResonanceSpec::new(p, q)?;
            let mut w = CsvWriter::new(out, echo, &["beta_r", "s", "re", "im", "modulus"])?;
            w.comment("order", &spec.order.to_string())?;
            for &b in &spec.beta_r_set {
                let g = gauss_coefficients(p, q, b)?;
                for (s, z) in g.values.iter().enumerate() {
                    w.row(&[b.to_string(), s.to_string(), fmt_f64(z.re), fmt_f64(z.im), fmt_f64(z.norm())])?;
                }
            }
            w.finish()?;
        }
        (None, None, Some(x)) => {
            let list = nearest_resonances(2.0 * PI * x, a.q_max, a.window)?;
            let mut w = CsvWriter::new(out, echo, &["p", "q", "tau_over_2pi_res", "epsilon"])?;
            for (s, eps) in list {
                w.row(&[
                    s.p.to_string(),
                    s.q.to_string(),
                    fmt_f64(s.p as f64 / s.q as f64),
                    fmt_f64(eps),
                ])?;
            }
            w.finish()?;
        }
        _ => return Err(CliError::config("give --p and --q, or --tau-over-2pi")),
    }
    Ok(())
}

fn cmd_evolve(a: &EvolveArgs, echo: &[(String, String)]) -> Result<(), CliError> {
    let families = parse_families(&a.families)?;
    if a.overlay.is_some() && families.is_empty() {
        return Err(CliError::config("--overlay needs --families"));
    }
    let history = if a.history_dir.is_some() {
        HistoryPolicy::Indices(a.history_index.clone())
    } else {
        HistoryPolicy::None
    };
    let cfg = a.scan.scan_config(history)?;
    let scan = scan_tau(&cfg)?;
    qio::write_scan(create(&a.out)?, echo, &scan)?;
    if let Some(path) = &a.heatmap {
        qio::write_heatmap(create(path)?, echo, &scan)?;
    }
    if let Some(dir) = &a.history_dir {
        for (i, h) in &scan.history {
            let path = dir.join(format!("history_{i:04}.csv"));
            let mut e = echo.to_vec();
            e.push(("tau_over_2pi".into(), fmt_f64(cfg.tau_grid[*i] / (2.0 * PI))));
            qio::write_history(create(&path)?, &e, h)?;
        }
    }
    if let Some(path) = &a.overlay {
        let mut w = CsvWriter::new(
            create(path)?,
            echo,
            &["tau_over_2pi", "family", "epsilon", "a", "final_momentum"],
        )?;
        for f in &families {
            let j = f
                .jump_j
                .ok_or_else(|| CliError::config("overlay families need an explicit J"))?;
            let label = format!(
                "{}/{}:{}:{}:{}",
                f.res_p,
                f.res_q,
                f.d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";"),
                f.period_p,
                j
            );
            for &tau in &cfg.tau_grid {
                let (spec, eps) = f.spec_at(tau, cfg.k, cfg.eta.eta(tau))?;
                let acc = acceleration(j, f.period_p, spec.period(), spec.deltas.mean_delta(), spec.drift, eps)?;
                w.row(&[
                    fmt_f64(tau / (2.0 * PI)),
                    label.clone(),
                    fmt_f64(eps),
                    fmt_f64(acc.a),
                    fmt_f64(cfg.momentum_mean + acc.a * cfg.n_kicks as f64),
                ])?;
            }
        }
        w.finish()?;
    }
    Ok(())
}

fn cmd_portrait(a: &PortraitArgs, echo: &[(String, String)]) -> Result<(), CliError> {
    let ctx = a.map.context()?;
    let seeds = seed_grid(a.n_theta, a.n_j);
    let orbits = portrait(&ctx.spec, &seeds, a.iters)?;
    qio::write_portrait(create(&a.out)?, echo, &orbits)?;
    Ok(())
}

fn orbit_search(grid: usize) -> OrbitSearch {
    OrbitSearch {
        seeds_theta: grid,
        seeds_j: grid,
        ..OrbitSearch::default()
    }
}

fn cmd_orbits(a: &OrbitsArgs, echo: &[(String, String)]) -> Result<(), CliError> {
    let base = a.map.context()?;
    let sequences = match a.sweep_t {
        Some(t) => enumerate_delta_sequences(base.spec.deltas.q, t, a.c_min..=a.c_max)?,
        None => vec![base.spec.deltas.clone()],
    };
    let (res_p, res_q) = base.res.unwrap_or((0, 0));
    let epsilon = base.epsilon.unwrap_or(f64::NAN);
    let mut queries = Vec::new();
    for seq in sequences {
        let ctx = a.map.context_with(seq.d.clone())?;
        let ctx = MapContext {
            spec: TorusMapSpec::new(ctx.spec.k_tilde, ctx.spec.drift, seq)?,
            ..ctx
        };
        let jumps = match a.j {
            Some(j) => vec![j],
            None => candidate_jumps(&ctx.spec, a.p, a.j_spread),
        };
        for j in jumps {
            queries.push(CatalogQuery {
                res_p,
                res_q,
                epsilon,
                spec: ctx.spec.clone(),
                period_p: a.p,
                jump_j: j,
            });
        }
    }
    let catalog = catalog_allowing_nan(&queries, &orbit_search(a.grid))?;
    let catalog: Vec<CatalogEntry> = catalog
        .into_iter()
        .filter(|e| !a.stable_only || e.orbit.stable())
        .collect();
    qio::write_catalog(output(&a.out)?, echo, &catalog)?;
    Ok(())
}

/// Like `build_catalog`, but a missing epsilon gives `a_predicted = NaN`
/// instead of an error.
fn catalog_allowing_nan(queries: &[CatalogQuery], search: &OrbitSearch) -> Result<Vec<CatalogEntry>, CliError> {
    if queries.iter().all(|q| q.epsilon.is_finite() && q.epsilon != 0.0) {
        return Ok(build_catalog(queries, search)?);
    }
    let mut out = Vec::new();
    for q in queries {
        for orbit in find_periodic_orbits(&q.spec, q.period_p, q.jump_j, search)? {
            out.push(CatalogEntry {
                res_p: q.res_p,
                res_q: q.res_q,
                epsilon: q.epsilon,
                orbit,
                a_predicted: f64::NAN,
            });
        }
    }
    Ok(out)
}

fn cmd_predict(a: &PredictArgs, echo: &[(String, String)]) -> Result<(), CliError> {
    let tau = 2.0 * PI * a.tau_over_2pi;
    let res = match (a.res_p, a.res_q) {
        (Some(p), Some(q)) => ResonanceSpec::new(p, q)?,
        _ => closest_resonance(tau, a.q_max)?.0,
    };
    let eps = res.epsilon(tau);
    let q = a.q.unwrap_or(res.q);
    let dsum = match a.dsum {
        Some(s) => s,
        None if a.d.is_empty() => 0,
        None => {
            if a.d.len() != a.period_t {
                return Err(CliError::config("--d must have --T entries"));
            }
            a.d.iter().sum()
        }
    };
    let mean_delta = 2.0 * PI * dsum as f64 / (q * a.period_t as i64) as f64;
    let drift = tau * a.eta.spec()?.eta(tau);
    let acc = acceleration(a.j, a.p, a.period_t, mean_delta, drift, eps)?;
    let mut w = CsvWriter::new(
        io::stdout().lock(),
        echo,
        &["tau_over_2pi", "res_p", "res_q", "epsilon", "T", "p", "j", "delta_mean", "drift", "a"],
    )?;
    w.row(&[
        fmt_f64(a.tau_over_2pi),
        res.p.to_string(),
        res.q.to_string(),
        fmt_f64(eps),
        a.period_t.to_string(),
        a.p.to_string(),
        a.j.to_string(),
        fmt_f64(mean_delta),
        fmt_f64(drift),
        fmt_f64(acc.a),
    ])?;
    let _ = w.finish()?;
    Ok(())
}

fn cmd_detect(a: &DetectArgs, echo: &[(String, String)]) -> Result<(), CliError> {
    let families = parse_families(&a.families)?;
    if families.is_empty() {
        return Err(CliError::config("--families is empty"));
    }
    let cfg = a.scan.scan_config(HistoryPolicy::All)?;
    let bulk = match (a.bulk_lo, a.bulk_hi) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => control_bulk_window(&cfg, a.bulk_fraction, a.bulk_dilation)?,
    };
    let defaults = DetectorConfig::default();
    let det_cfg = DetectorConfig {
        bulk_window: bulk,
        mass_threshold: a.mass_threshold.unwrap_or(defaults.mass_threshold),
        gate: a.gate.unwrap_or(defaults.gate),
        max_gap: a.max_gap.unwrap_or(defaults.max_gap),
        min_fraction: a.min_fraction.unwrap_or(defaults.min_fraction),
        transient: a.transient.unwrap_or(defaults.transient),
        ..defaults
    };
    let scan = scan_tau(&cfg)?;
    if let Some(path) = &a.scan_out {
        qio::write_scan(create(path)?, echo, &scan)?;
    }
    let mut detections = detect_scan(&scan, &det_cfg)?;

    let search = orbit_search(a.orbit_grid);
    let catalogs: Vec<Vec<CatalogEntry>> = cfg
        .tau_grid
        .par_iter()
        .map(|&tau| -> Result<Vec<CatalogEntry>, CliError> {
            let mut queries = Vec::new();
            for f in &families {
                let (spec, eps) = f.spec_at(tau, cfg.k, cfg.eta.eta(tau))?;
                if eps == 0.0 {
                    continue;
                }
                let jumps = match f.jump_j {
                    Some(j) => vec![j],
                    None => candidate_jumps(&spec, f.period_p, 1),
                };
                for j in jumps {
                    queries.push(CatalogQuery {
                        res_p: f.res_p,
                        res_q: f.res_q,
                        epsilon: eps,
                        spec: spec.clone(),
                        period_p: f.period_p,
                        jump_j: j,
                    });
                }
            }
            Ok(build_catalog(&queries, &search)?)
        })
        .collect::<Result<_, _>>()?;

    let tol = MatchTolerances {
        relative: a.match_tol,
        a_floor: a.a_floor,
        min_r2: a.min_r2,
    };
    for det in detections.iter_mut() {
        if let Some(i) = cfg.tau_grid.iter().position(|t| *t == det.tau) {
            match_predictions(std::slice::from_mut(det), &catalogs[i], &tol);
        }
    }

    let mut e = echo.to_vec();
    e.push(("bulk_window".into(), format!("{},{}", fmt_f64(bulk.0), fmt_f64(bulk.1))));
    qio::write_detections(create(&a.out)?, &e, &detections)?;
    if let Some(path) = &a.catalog_out {
        let all: Vec<CatalogEntry> = catalogs.into_iter().flatten().collect();
        qio::write_catalog(create(path)?, &e, &all)?;
    }
    Ok(())
}

fn cmd_stability(a: &StabilityArgs, echo: &[(String, String)]) -> Result<(), CliError> {
    let mut rows: Vec<(String, Vec<f64>, Option<f64>, Option<bool>)> = Vec::new();
    if a.random_diag || a.random_delta {
        let seed = a
            .seed
            .ok_or_else(|| CliError::config("--seed is required for random rays"))?;
        if a.random_diag && !(a.diag_lo <= a.diag_hi) {
            return Err(CliError::config("--diag-lo must not exceed --diag-hi"));
        }
        let ctx = if a.random_delta { Some(a.map.context()?) } else { None };
        for r in 0..a.rays {
            let s = seed.wrapping_add(r as u64);
            let diag = if let Some(ctx) = &ctx {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let start = PhasePoint::new(rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
                let thetas = random_delta_ray(ctx.spec.k_tilde, ctx.spec.drift, ctx.spec.deltas.q, start, a.n, s)?;
                build_ray_hessian(&thetas, ctx.spec.k_tilde).diag
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                (0..a.n).map(|_| rng.gen_range(a.diag_lo..=a.diag_hi)).collect()
            };
            rows.push((format!("random_{r}"), diag, None, None));
        }
    } else {
        let ctx = a.map.context()?;
        let jumps = match a.j {
            Some(j) => vec![j],
            None => candidate_jumps(&ctx.spec, a.p, a.j_spread),
        };
        for j in jumps {
            for o in find_periodic_orbits(&ctx.spec, a.p, j, &OrbitSearch::default())? {
                let thetas = orbit_to_ray(&o, a.n);
                let label = format!("p{}_j{}_theta{:.6}", o.period_p, o.jump_j, o.points[0].theta);
                rows.push((
                    label,
                    build_ray_hessian(&thetas, ctx.spec.k_tilde).diag,
                    Some(o.tangent_lyapunov()),
                    Some(o.stable()),
                ));
            }
        }
    }

    let mut w = CsvWriter::new(
        output(&a.out)?,
        echo,
        &["ray", "n", "det_slope", "transfer_lyapunov", "tangent_lyapunov", "stable"],
    )?;
    for (i, (label, diag, tangent, stable)) in rows.iter().enumerate() {
        let growth = det_growth(&qam::orbits::RayHessian { diag: diag.clone() });
        if i == 0 {
            if let Some(path) = &a.growth_out {
                let mut g = CsvWriter::new(create(path)?, echo, &["n", "log_abs_det"])?;
                for (t, y) in growth.iter().enumerate() {
                    g.row(&[(t + 1).to_string(), fmt_f64(*y)])?;
                }
                g.finish()?;
            }
        }
        w.row(&[
            label.clone(),
            diag.len().to_string(),
            fmt_f64(growth_slope(&growth)),
            fmt_f64(transfer_lyapunov(diag)),
            tangent.map(fmt_f64).unwrap_or_default(),
            stable.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    w.finish()?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Run(e.to_string()))?;
    }
    let echo = echo(cli);
    match &cli.command {
        Command::Resonance(a) => cmd_resonance(a, &echo),
        Command::Evolve(a) => cmd_evolve(a, &echo),
        Command::Portrait(a) => cmd_portrait(a, &echo),
        Command::Orbits(a) => cmd_orbits(a, &echo),
        Command::Predict(a) => cmd_predict(a, &echo),
        Command::Detect(a) => cmd_detect(a, &echo),
        Command::Stability(a) => cmd_stability(a, &echo),
    }
}

fn main() -> ExitCode {
    let args = match expand_args(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.code());
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
