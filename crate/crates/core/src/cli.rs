//! Command-line front end.
//!
//! Every subcommand writes into `--out DIR`: a `config.txt` echo of the
//! resolved flags (re-usable with `--config`) and its outputs, each carrying
//! a provenance header with the tool version, a SHA-256 of the resolved
//! configuration (excluding the output path and worker count) and the root
//! seed.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiments::{
    run_interaction_study, run_strauss_study, run_trend_study, InteractionStudyConfig, PriorKind,
    StraussStudyConfig, TrendStudyConfig,
};
use crate::geometry::{parse_reals, PointPattern, Window};
use crate::model::{InteractionSpec, MarkTrend, ModelSpec, TrendBasis, TrendKind};
use crate::posterior::{
    bayes_factor, build_smoothing_prior, characteristic_range, envelope_from_curves,
    interaction_curves, sample_theta, trend_envelope, PinnedLayout, SmoothingPrior,
};
use crate::quadrature::{build_design, generate_dummy, DummyScheme};
use crate::simulate::{sample_gibbs, sample_poisson, InitialPattern, McmcOptions};
use crate::vb::{self, FitOptions, GaussianDistribution, XiInit};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "gibbsvb",
    version,
    about = "Variational Bayes fitting of Gibbs point process models"
)]
#[command(args_override_self = true)]
struct Cli {
    /// Flat `key=value` file supplying flags; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a Poisson or Gibbs pattern.
    Simulate(SimulateArgs),
    /// Fit a model to a pattern by VB or IRLS.
    Fit(FitArgs),
    /// Posterior trend envelopes from a VB fit.
    Envelope(EnvelopeArgs),
    /// Posterior interaction function and characteristic range from a VB fit.
    Interaction(InteractionArgs),
    /// Approximate Bayes factor of two VB fits on the same data.
    BayesFactor(BayesFactorArgs),
    /// Run one of the simulation studies.
    Study(StudyArgs),
}

#[derive(Debug, Args, Serialize)]
struct ModelArgs {
    /// constant | poly-y:D | poly-xy:D
    #[arg(long, default_value = "constant")]
    trend: String,
    /// pooled | proportional | separate
    #[arg(long, default_value = "pooled")]
    marks: String,
    /// Number of mark levels (default: from the pattern).
    #[arg(long)]
    mark_levels: Option<usize>,
    /// none | strauss:R | cross-strauss:R | step:K,RMAX | smooth:K,RMAX,BW | lj:EPS,SIGMA[,CUT]
    #[arg(long, default_value = "none")]
    interaction: String,
    #[arg(long)]
    hardcore: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Process {
    Poisson,
    Gibbs,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "gibbs")]
    process: Process,
    /// x0,x1,y0,y1
    #[arg(long)]
    window: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Poisson intensity.
    #[arg(long)]
    intensity: Option<f64>,
    /// Comma-separated coefficient vector of the Gibbs model.
    #[arg(long)]
    theta: Option<String>,
    #[arg(long, default_value_t = 100_000)]
    burn_in: usize,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Fitter {
    Vb,
    Irls,
}

#[derive(Debug, Args, Serialize)]
struct FitArgs {
    /// Pattern CSV (`x,y[,mark]`).
    #[arg(long)]
    pattern: PathBuf,
    /// Window of the pattern, x0,x1,y0,y1.
    #[arg(long)]
    window: String,
    /// Rows are restricted to this window (border correction); dummy points
    /// are generated on it.
    #[arg(long)]
    fit_window: Option<String>,
    /// poisson:RHO | stratified:NX,NY (default: about four per data point)
    #[arg(long)]
    dummy: Option<String>,
    /// Dummy points to use instead of generating them.
    #[arg(long)]
    dummy_file: Option<PathBuf>,
    /// flat | file:PATH | smooth
    #[arg(long, default_value = "flat")]
    prior: String,
    #[arg(long, value_enum, default_value = "vb")]
    fitter: Fitter,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    fit_tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    accelerate: bool,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EnvelopeArgs {
    /// `fit.json` written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Y0,Y1,N (default: vertical extent of the trend frame, 71 points)
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    include_intercept: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct InteractionArgs {
    #[arg(long)]
    fit: PathBuf,
    /// R0,R1,N (default: 0 to the interaction reach, 301 points)
    #[arg(long)]
    r_grid: Option<String>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct BayesFactorArgs {
    /// Fit of the model in the numerator.
    #[arg(long)]
    fit1: PathBuf,
    /// Fit of the model in the denominator.
    #[arg(long)]
    fit0: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum StudyKind {
    Strauss,
    Trend,
    Interaction,
}

#[derive(Debug, Args, Serialize)]
struct StudyArgs {
    #[arg(value_enum)]
    kind: StudyKind,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Birth-death proposals per simulated pattern (default: per study).
    #[arg(long)]
    burn_in: Option<usize>,
    /// Strauss study priors, comma-separated (flat,tight-correct,tight-wrong).
    #[arg(long)]
    priors: Option<String>,
    #[arg(long, default_value_t = 1e-8)]
    fit_tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code: 0 on success, 2 on usage errors, 1 on
/// data or numerical errors.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Fit(a) => run_fit(a),
        Command::Envelope(a) => run_envelope(a),
        Command::Interaction(a) => run_interaction(a),
        Command::BayesFactor(a) => run_bayes_factor(a),
        Command::Study(a) => run_study(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Replaces `--config FILE` by the flags it lists, inserted right after the
/// subcommand so that explicit flags override them.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy().into_owned();
        if s == "--config" {
            let path = it
                .next()
                .ok_or_else(|| Error::Parse("--config needs a file".into()))?;
            config = Some(PathBuf::from(path));
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let mut flags = Vec::new();
    for (lineno, line) in fs::read_to_string(&path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!(
                "{}:{}: expected key=value",
                path.display(),
                lineno + 1
            ))
        })?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(Error::Parse(format!(
                "{}:{}: invalid key '{}'",
                path.display(),
                lineno + 1,
                k.trim()
            )));
        }
        flags.push(OsString::from(format!("--{key}")));
        flags.push(OsString::from(v.trim()));
    }
    let mut at = rest.len().min(2);
    if rest.get(1).is_some_and(|s| s == "study") && rest.len() > 2 {
        at = 3;
    }
    rest.splice(at..at, flags);
    Ok(rest)
}

/// `key=value` lines of the resolved arguments, keys sorted.
fn config_lines<T: Serialize>(args: &T) -> Result<Vec<(String, String)>> {
    let value = serde_json::to_value(args)?;
    let serde_json::Value::Object(map) = value else {
        return Err(Error::Parse("arguments are not a map".into()));
    };
    let mut out: Vec<(String, String)> = map
        .into_iter()
        .filter_map(|(k, v)| {
            let v = match v {
                serde_json::Value::Null => return None,
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            Some((k.replace('_', "-"), v))
        })
        .collect();
    out.sort();
    Ok(out)
}

struct RunContext {
    out: PathBuf,
    preamble: Vec<String>,
    hash: String,
    seed: u64,
}

/// Creates the output directory, writes `config.txt` and builds the
/// provenance header.
fn start_run<T: Serialize>(args: &T, out: &Path, seed: u64) -> Result<RunContext> {
    let lines = config_lines(args)?;
    let mut hasher = Sha256::new();
    // neither the output path nor the pool size changes any result
    for (k, v) in lines.iter().filter(|(k, _)| k != "out" && k != "workers") {
        hasher.update(format!("{k}={v}\n").as_bytes());
    }
    let hash = hex(&hasher.finalize());
    let preamble = vec![
        format!("gibbsvb {VERSION}"),
        format!("config-sha256 {hash}"),
        format!("seed {seed}"),
    ];
    fs::create_dir_all(out)?;
    let mut f = fs::File::create(out.join("config.txt"))?;
    for line in &preamble {
        writeln!(f, "# {line}")?;
    }
    for (k, v) in &lines {
        writeln!(f, "{k}={v}")?;
    }
    Ok(RunContext {
        out: out.to_path_buf(),
        preamble,
        hash,
        seed,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Provenance {
    version: String,
    config_sha256: String,
    seed: u64,
}

impl RunContext {
    fn provenance(&self) -> Provenance {
        Provenance {
            version: VERSION.to_string(),
            config_sha256: self.hash.clone(),
            seed: self.seed,
        }
    }
}

fn model_spec(m: &ModelArgs, window: Window, default_levels: usize) -> Result<ModelSpec> {
    let trend = TrendBasis {
        kind: m.trend.parse::<TrendKind>()?,
        marks: m.marks.parse::<MarkTrend>()?,
        frame: window,
    };
    let interaction: InteractionSpec = m.interaction.parse()?;
    ModelSpec::new(
        trend,
        interaction,
        m.hardcore,
        m.mark_levels.unwrap_or(default_levels.max(1)),
    )
}

fn run_simulate(a: &SimulateArgs) -> Result<()> {
    let ctx = start_run(a, &a.out, a.seed)?;
    let window: Window = a.window.parse()?;
    let pattern = match a.process {
        Process::Poisson => {
            let lambda = a.intensity.ok_or_else(|| {
                Error::Parameter("--intensity is required for a Poisson process".into())
            })?;
            sample_poisson(&window, lambda, a.seed)?
        }
        Process::Gibbs => {
            let spec = model_spec(&a.model, window, 1)?;
            let theta = parse_reals(a.theta.as_deref().ok_or_else(|| {
                Error::Parameter("--theta is required for a Gibbs process".into())
            })?)?;
            let options = McmcOptions {
                burn_in_steps: a.burn_in,
                initial_pattern: InitialPattern::Poisson,
                seed: a.seed,
            };
            sample_gibbs(&spec, &theta, &window, &options)?
        }
    };
    pattern.write_csv_path(&ctx.out.join("pattern.csv"), &ctx.preamble)?;
    println!("simulated {} points in {}", pattern.n(), window);
    Ok(())
}

/// Everything `fit` knows about a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FitRecord {
    provenance: Provenance,
    fitter: String,
    spec: ModelSpec,
    coefficient_names: Vec<String>,
    layout: PinnedLayout,
    /// Full coefficient vector (pinned entries included).
    mean: Vec<f64>,
    /// Posterior or asymptotic standard deviations; zero for pinned entries.
    sd: Vec<f64>,
    /// Gaussian over the free coefficients (VB only).
    posterior: Option<GaussianDistribution>,
    elbo: Option<f64>,
    elbo_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    diagnostic: Option<String>,
    n_data: usize,
    n_rows: usize,
    data_sha256: String,
    dummy_sha256: String,
}

fn coefficient_names(spec: &ModelSpec) -> Vec<String> {
    let b = spec.trend.basis_len();
    let levels = spec.mark_levels;
    let mut names: Vec<String> = match spec.trend.marks {
        MarkTrend::Pooled => (0..b).map(|k| format!("trend{k}")).collect(),
        MarkTrend::Separate => (0..levels)
            .flat_map(|m| (0..b).map(move |k| format!("trend{k}[mark{m}]")))
            .collect(),
        MarkTrend::Proportional => (0..levels)
            .map(|m| format!("trend0[mark{m}]"))
            .chain((1..b).map(|k| format!("trend{k}")))
            .collect(),
    };
    names.extend((0..spec.interaction_dim()).map(|k| format!("interaction{k}")));
    names
}

fn pattern_bytes(p: &PointPattern) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    p.write_csv(&mut buf, &[])?;
    Ok(buf)
}

fn read_fit(path: &Path) -> Result<FitRecord> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn run_fit(a: &FitArgs) -> Result<()> {
    let ctx = start_run(a, &a.out, a.seed)?;
    let window: Window = a.window.parse()?;
    let fit_window: Option<Window> = a.fit_window.as_deref().map(str::parse).transpose()?;
    let data = PointPattern::read_csv_path(&a.pattern, window)?;
    let spec = model_spec(&a.model, window, data.mark_levels())?;
    spec.fitting_check()?;
    let dummy_window = fit_window.unwrap_or(window);
    let n_inside = data
        .points()
        .iter()
        .filter(|&&u| dummy_window.contains(u))
        .count();
    let scheme_arg: Option<DummyScheme> = a.dummy.as_deref().map(str::parse).transpose()?;
    let (dummy, scheme) = match &a.dummy_file {
        Some(path) => {
            let dummy = PointPattern::read_csv_path(path, dummy_window)?;
            let scheme = scheme_arg.unwrap_or(DummyScheme::Poisson {
                rho: dummy.n() as f64 / dummy_window.volume(),
            });
            (dummy, scheme)
        }
        None => {
            let scheme =
                scheme_arg.unwrap_or_else(|| DummyScheme::default_for(n_inside, &dummy_window));
            (generate_dummy(&dummy_window, &scheme, a.seed)?, scheme)
        }
    };
    dummy.write_csv_path(&ctx.out.join("dummy.csv"), &ctx.preamble)?;
    let design = build_design(&spec, &data, &dummy, &scheme, fit_window.as_ref())?;

    let p = spec.parameter_dim();
    let (prior, layout) = resolve_prior(&a.prior, &spec)?;
    let reduced = layout.reduce_design(&design)?;
    let names = coefficient_names(&spec);
    let record = match a.fitter {
        Fitter::Vb => {
            let options = FitOptions {
                max_iterations: a.max_iter,
                elbo_rel_tolerance: a.fit_tol,
                xi_init: XiInit::Ones,
                accelerate: a.accelerate,
                ..FitOptions::default()
            };
            let state = vb::fit(&prior, &reduced, &options)?;
            let sd_free = state.posterior.std_devs();
            let sd = layout.expand(&sd_free);
            let sd = (0..p)
                .map(|k| {
                    if layout.pinned.iter().any(|&(j, _)| j == k) {
                        0.0
                    } else {
                        sd[k]
                    }
                })
                .collect();
            FitRecord {
                provenance: ctx.provenance(),
                fitter: "vb".into(),
                coefficient_names: names,
                mean: layout.expand_mean(&state.posterior),
                sd,
                posterior: Some(state.posterior.clone()),
                elbo: Some(state.elbo),
                elbo_trace: state.elbo_trace.clone(),
                iterations: state.iteration,
                converged: state.converged,
                diagnostic: None,
                n_data: design.n_data(),
                n_rows: design.n_rows(),
                data_sha256: sha256_hex(&pattern_bytes(&data)?),
                dummy_sha256: sha256_hex(&pattern_bytes(&dummy)?),
                spec: spec.clone(),
                layout: layout.clone(),
            }
        }
        Fitter::Irls => {
            if a.prior != "flat" {
                return Err(Error::Parameter(
                    "IRLS fits take no prior; use --prior flat".into(),
                ));
            }
            let f = vb::irls_fit(&reduced)?;
            FitRecord {
                provenance: ctx.provenance(),
                fitter: "irls".into(),
                coefficient_names: names,
                mean: f.theta.clone(),
                sd: f.std_errors.clone(),
                posterior: None,
                elbo: None,
                elbo_trace: Vec::new(),
                iterations: f.iterations,
                converged: f.converged,
                diagnostic: f.diagnostic.clone(),
                n_data: design.n_data(),
                n_rows: design.n_rows(),
                data_sha256: sha256_hex(&pattern_bytes(&data)?),
                dummy_sha256: sha256_hex(&pattern_bytes(&dummy)?),
                spec: spec.clone(),
                layout: layout.clone(),
            }
        }
    };
    fs::write(
        ctx.out.join("fit.json"),
        serde_json::to_string_pretty(&record)?,
    )?;

    let mut table = fs::File::create(ctx.out.join("coefficients.csv"))?;
    for line in &ctx.preamble {
        writeln!(table, "# {line}")?;
    }
    writeln!(table, "name,mean,sd")?;
    println!("{:<20} {:>14} {:>12}", "coefficient", "mean", "sd");
    for k in 0..p {
        writeln!(
            table,
            "{},{:?},{:?}",
            record.coefficient_names[k], record.mean[k], record.sd[k]
        )?;
        println!(
            "{:<20} {:>14.6} {:>12.6}",
            record.coefficient_names[k], record.mean[k], record.sd[k]
        );
    }
    match record.elbo {
        Some(e) => println!(
            "elbo {e:.6}  iterations {}  converged {}",
            record.iterations, record.converged
        ),
        None => println!(
            "log-likelihood fit  iterations {}  converged {}",
            record.iterations, record.converged
        ),
    }
    if let Some(d) = &record.diagnostic {
        println!("warning: {d}");
    }
    Ok(())
}

/// Prior over the free coefficients and the layout of pinned ones.
fn resolve_prior(arg: &str, spec: &ModelSpec) -> Result<(GaussianDistribution, PinnedLayout)> {
    let p = spec.parameter_dim();
    if arg == "flat" {
        return Ok((GaussianDistribution::flat(p), PinnedLayout::none(p)));
    }
    if let Some(path) = arg.strip_prefix("file:") {
        let g: GaussianDistribution = serde_json::from_str(&fs::read_to_string(path)?)?;
        if g.dim() != p {
            return Err(Error::Dimension {
                expected: p,
                found: g.dim(),
                context: "prior file",
            });
        }
        return Ok((g, PinnedLayout::none(p)));
    }
    if arg == "smooth" {
        let locations: Vec<f64> = match &spec.interaction {
            InteractionSpec::StepFunction { grid } => {
                grid.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
            }
            InteractionSpec::SmoothBasis { centers, .. } => centers.clone(),
            other => {
                return Err(Error::WrongSpec {
                    expected: "step_function or smooth_basis",
                    found: other.name(),
                })
            }
        };
        let weights = build_smoothing_prior(
            &locations,
            &SmoothingPrior::default_for(&locations).with_short_range_pin(),
        )?;
        return weights.join_with_trend(&GaussianDistribution::flat(spec.trend_dim()));
    }
    Err(Error::Parse(format!(
        "unknown prior '{arg}' (flat|file:PATH|smooth)"
    )))
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let v = parse_reals(s)?;
    if v.len() != 3 || v[2] < 2.0 || v[2].fract() != 0.0 || !(v[1] > v[0]) {
        return Err(Error::Parse(format!(
            "grid '{s}' must be LO,HI,N with LO < HI, N >= 2"
        )));
    }
    let n = v[2] as usize;
    Ok((0..n)
        .map(|i| v[0] + (v[1] - v[0]) * i as f64 / (n - 1) as f64)
        .collect())
}

fn vb_posterior(fit: &FitRecord) -> Result<&GaussianDistribution> {
    fit.posterior.as_ref().ok_or_else(|| {
        Error::Parameter(format!(
            "{} fit has no posterior; refit with --fitter vb",
            fit.fitter
        ))
    })
}

fn run_envelope(a: &EnvelopeArgs) -> Result<()> {
    let ctx = start_run(a, &a.out, a.seed)?;
    let fit = read_fit(&a.fit)?;
    if !fit.layout.pinned.is_empty() {
        return Err(Error::Parameter(
            "trend envelopes need a fit without pinned coefficients".into(),
        ));
    }
    let posterior = vb_posterior(&fit)?;
    let frame = fit.spec.trend.frame;
    let grid = match &a.grid {
        Some(g) => parse_grid(g)?,
        None => parse_grid(&format!("{:?},{:?},71", frame.ymin(), frame.ymax()))?,
    };
    let envs = trend_envelope(
        &fit.spec,
        posterior,
        &grid,
        a.level,
        a.samples,
        a.seed,
        a.include_intercept,
    )?;
    for (m, env) in envs.iter().enumerate() {
        let name = format!("envelope_mark{m}.csv");
        env.write_csv(fs::File::create(ctx.out.join(&name))?, &ctx.preamble)?;
        println!("wrote {}", ctx.out.join(name).display());
    }
    Ok(())
}

fn run_interaction(a: &InteractionArgs) -> Result<()> {
    let ctx = start_run(a, &a.out, a.seed)?;
    let fit = read_fit(&a.fit)?;
    let posterior = vb_posterior(&fit)?;
    let grid = match &a.r_grid {
        Some(g) => parse_grid(g)?,
        None => parse_grid(&format!("0,{:?},301", fit.spec.interaction.reach()))?,
    };
    let draws = fit
        .layout
        .expand_samples(&sample_theta(posterior, a.samples, a.seed)?);
    let curves = interaction_curves(&fit.spec, &draws, &grid)?;
    let env = envelope_from_curves(&grid, &curves, a.level)?;
    env.write_csv(fs::File::create(ctx.out.join("curve.csv"))?, &ctx.preamble)?;
    let range = characteristic_range(&grid, &curves)?;
    let mut f = fs::File::create(ctx.out.join("range.txt"))?;
    for line in &ctx.preamble {
        writeln!(f, "# {line}")?;
    }
    writeln!(f, "mean={:?}", range.mean)?;
    writeln!(f, "lo={:?}", range.lo)?;
    writeln!(f, "hi={:?}", range.hi)?;
    writeln!(f, "boundary_flag={}", range.boundary_flag)?;
    println!(
        "characteristic range {:.5} (95% [{:.5}, {:.5}])",
        range.mean, range.lo, range.hi
    );
    if range.boundary_flag {
        println!("warning: most samples peak at the end of the grid; widen --r-grid");
    }
    Ok(())
}

fn run_bayes_factor(a: &BayesFactorArgs) -> Result<()> {
    let f1 = read_fit(&a.fit1)?;
    let f0 = read_fit(&a.fit0)?;
    if f1.data_sha256 != f0.data_sha256 || f1.dummy_sha256 != f0.dummy_sha256 {
        return Err(Error::Parameter(
            "fits use different data or dummy points; Bayes factors need identical designs".into(),
        ));
    }
    let (Some(e1), Some(e0)) = (f1.elbo, f0.elbo) else {
        return Err(Error::Parameter("both fits must be VB fits".into()));
    };
    let bf = bayes_factor(e1, e0);
    println!("log BF {:.6}", e1 - e0);
    println!("BF {bf:.6e} (ratio of evidence lower bounds)");
    if let Some(out) = &a.out {
        let ctx = start_run(a, out, 0)?;
        let mut f = fs::File::create(ctx.out.join("bayes_factor.txt"))?;
        for line in &ctx.preamble {
            writeln!(f, "# {line}")?;
        }
        writeln!(f, "elbo1={e1:?}")?;
        writeln!(f, "elbo0={e0:?}")?;
        writeln!(f, "log_bf={:?}", e1 - e0)?;
        writeln!(f, "bf={bf:?}")?;
    }
    Ok(())
}

fn run_study(a: &StudyArgs) -> Result<()> {
    let ctx = start_run(a, &a.out, a.seed)?;
    let fit = FitOptions {
        max_iterations: a.max_iter,
        elbo_rel_tolerance: a.fit_tol,
        ..FitOptions::default()
    };
    match a.kind {
        StudyKind::Strauss => {
            let mut config = StraussStudyConfig {
                seed: a.seed,
                workers: a.workers,
                fit,
                ..Default::default()
            };
            if let Some(r) = a.replicates {
                config.replicates = r;
            }
            if let Some(b) = a.burn_in {
                config.burn_in_steps = b;
            }
            if let Some(p) = &a.priors {
                config.priors = p
                    .split(',')
                    .map(str::parse::<PriorKind>)
                    .collect::<Result<_>>()?;
            }
            let study = run_strauss_study(&config)?;
            study.write_results(&ctx.out, &ctx.preamble)?;
            for s in study.summary() {
                println!(
                    "beta {:>6} gamma {:>5} {:<13} median |err| ({:.4}, {:.4})  max rel diff to IRLS ({:.2e}, {:.2e})",
                    s.beta, s.gamma, s.prior.to_string(), s.median_abs_error[0], s.median_abs_error[1],
                    s.max_rel_error_irls[0], s.max_rel_error_irls[1]
                );
            }
        }
        StudyKind::Trend => {
            if a.priors.is_some() {
                return Err(Error::Parameter(
                    "--priors applies to the strauss study only".into(),
                ));
            }
            let mut config = TrendStudyConfig {
                seed: a.seed,
                workers: a.workers,
                fit,
                ..Default::default()
            };
            if let Some(r) = a.replicates {
                config.replicates = r;
            }
            if let Some(b) = a.burn_in {
                config.burn_in_steps = b;
            }
            let study = run_trend_study(&config)?;
            study.write_results(&ctx.out, &ctx.preamble)?;
            for truth in [
                crate::experiments::TrendTruth::Distinct,
                crate::experiments::TrendTruth::Shared,
            ] {
                println!(
                    "{truth:<8} truth: BF > 1 in {:.0}% of replicates, median log BF {:.3}",
                    100.0 * study.fraction_favouring_separate(truth),
                    study.median_log_bayes_factor(truth)
                );
            }
        }
        StudyKind::Interaction => {
            if a.replicates.is_some_and(|r| r != 1) {
                return Err(Error::Parameter(
                    "the interaction study runs a single replicate".into(),
                ));
            }
            if a.priors.is_some() {
                return Err(Error::Parameter(
                    "--priors applies to the strauss study only".into(),
                ));
            }
            let mut config = InteractionStudyConfig {
                seed: a.seed,
                fit,
                ..Default::default()
            };
            if let Some(b) = a.burn_in {
                config.burn_in_steps = b;
            }
            let study = run_interaction_study(&config)?;
            study.write_results(&ctx.out, &ctx.preamble)?;
            for (name, f) in [("step", &study.step), ("basis", &study.basis)] {
                println!(
                    "{name:<5} characteristic range {:.5} (95% [{:.5}, {:.5}])",
                    f.range.mean, f.range.lo, f.range.hi
                );
            }
        }
    }
    println!("results in {}", ctx.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_flags_go_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "# comment\nreplicates = 3\nfit_tol=1e-6\n").unwrap();
        let out = expand_config(args(&[
            "gibbsvb",
            "study",
            "strauss",
            "--config",
            path.to_str().unwrap(),
            "--seed",
            "7",
        ]))
        .unwrap();
        let s: Vec<String> = out
            .iter()
            .map(|a| a.to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            s,
            [
                "gibbsvb",
                "study",
                "strauss",
                "--replicates",
                "3",
                "--fit-tol",
                "1e-6",
                "--seed",
                "7"
            ]
        );
        fs::write(&path, "oops\n").unwrap();
        assert!(expand_config(args(&["g", "fit", "--config", path.to_str().unwrap()])).is_err());
    }

    #[test]
    fn explicit_flags_override_config() {
        let cli = Cli::try_parse_from(args(&[
            "gibbsvb",
            "study",
            "strauss",
            "--replicates",
            "3",
            "--replicates",
            "5",
            "--out",
            "x",
        ]))
        .unwrap();
        match cli.command {
            Command::Study(s) => assert_eq!(s.replicates, Some(5)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn config_echo_and_hash_ignore_out() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |out: &str| {
            Cli::try_parse_from(args(&[
                "gibbsvb", "study", "trend", "--seed", "4", "--out", out,
            ]))
            .unwrap()
        };
        let (Command::Study(a), Command::Study(b)) = (mk("a").command, mk("b").command) else {
            unreachable!()
        };
        let ca = start_run(&a, &dir.path().join("a"), 4).unwrap();
        let cb = start_run(&b, &dir.path().join("b"), 4).unwrap();
        assert_eq!(ca.hash, cb.hash);
        let echo = fs::read_to_string(dir.path().join("a/config.txt")).unwrap();
        assert!(echo.contains("seed=4\n") && echo.contains("kind=trend\n"));
        assert!(!echo.contains("replicates"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(dispatch(args(&["gibbsvb", "fit", "--bogus", "1"])), 2);
        assert_eq!(dispatch(args(&["gibbsvb", "nope"])), 2);
        assert_eq!(dispatch(args(&["gibbsvb", "--help"])), 0);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let missing = dir.path().join("missing.csv");
        assert_eq!(
            dispatch(args(&[
                "gibbsvb",
                "fit",
                "--pattern",
                missing.to_str().unwrap(),
                "--window",
                "0,1,0,1",
                "--out",
                out.to_str().unwrap()
            ])),
            1
        );
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0,1,3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_grid("0,1,1").is_err());
        assert!(parse_grid("1,0,5").is_err());
        assert!(parse_grid("0,1,2.5").is_err());
    }

    #[test]
    fn coefficient_names_follow_layout() {
        let spec = ModelSpec::new(
            TrendBasis {
                kind: TrendKind::PolyY { degree: 2 },
                marks: MarkTrend::Proportional,
                frame: Window::unit_square(),
            },
            InteractionSpec::CrossStrauss { r: 0.1 },
            None,
            2,
        )
        .unwrap();
        assert_eq!(
            coefficient_names(&spec),
            [
                "trend0[mark0]",
                "trend0[mark1]",
                "trend1",
                "trend2",
                "interaction0"
            ]
        );
    }
}
