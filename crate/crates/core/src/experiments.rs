//! The three simulation studies: Strauss fits under different priors,
//! separate versus shared trends for a bivariate pattern, and recovery of a
//! Lennard-Jones interaction function.
//!
//! Every study is a pure function of its configuration. Replicates run on a
//! rayon pool of `workers` threads and are collected in replicate order, so
//! output does not depend on the pool size.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointPattern, Window};
use crate::model::{
    lennard_jones_curve, lennard_jones_sigma_for_peak, InteractionSpec, MarkTrend, ModelSpec,
    TrendBasis, TrendKind,
};
use crate::posterior::{
    bayes_factor, build_smoothing_prior, characteristic_range, envelope_from_curves,
    interaction_curves, sample_theta, trend_envelope, CurveEnvelope, PinnedLayout, RangeEstimate,
    SmoothingPrior,
};
use crate::quadrature::{build_design, generate_dummy, DummyScheme, LogisticDesign};
use crate::simulate::{pack_range_rule, replicate_seed, sample_gibbs, InitialPattern, McmcOptions};
use crate::vb::{self, FitOptions, GaussianDistribution, VariationalState, FLAT_PRIOR_VARIANCE};

/// Seed of the dummy pattern paired with the data pattern simulated from `seed`.
fn dummy_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

fn run_pool<T, F>(workers: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if workers == 0 {
        return Err(Error::Parameter("workers must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    pool.install(|| (0..jobs).into_par_iter().map(&f).collect())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    crate::posterior::quantile_sorted(&v, 0.5)
}

fn create_file(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

fn write_preamble<W: Write>(out: &mut W, preamble: &[String]) -> Result<()> {
    for line in preamble {
        writeln!(out, "# {line}")?;
    }
    Ok(())
}

/// Simulated data, its dummy pattern and the design on the target window.
struct Replicate {
    data: PointPattern,
    dummy: PointPattern,
    scheme: DummyScheme,
    target: Window,
}

/// Simulates on `target` dilated by `margin` and draws dummy points on
/// `target` at the default intensity.
fn simulate_replicate(
    truth_spec: &ModelSpec,
    theta: &[f64],
    target: Window,
    margin: f64,
    burn_in_steps: usize,
    seed: u64,
) -> Result<Replicate> {
    let options = McmcOptions {
        burn_in_steps,
        initial_pattern: InitialPattern::Poisson,
        seed,
    };
    let data = sample_gibbs(truth_spec, theta, &target.dilate(margin), &options)?;
    let inside = data
        .points()
        .iter()
        .filter(|&&u| target.contains(u))
        .count();
    let scheme = DummyScheme::default_for(inside, &target);
    let dummy = generate_dummy(&target, &scheme, dummy_seed(seed))?;
    Ok(Replicate {
        data,
        dummy,
        scheme,
        target,
    })
}

impl Replicate {
    fn design(&self, spec: &ModelSpec) -> Result<LogisticDesign> {
        build_design(
            spec,
            &self.data,
            &self.dummy,
            &self.scheme,
            Some(&self.target),
        )
    }
}

// ---------------------------------------------------------------------------
// Strauss study

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Zero mean, variance `1e9` per coordinate.
    Flat,
    /// Centred on the truth.
    TightCorrect,
    /// Centred on the truth shifted by `log 2`.
    TightWrong,
}

impl PriorKind {
    pub const ALL: [PriorKind; 3] = [
        PriorKind::Flat,
        PriorKind::TightCorrect,
        PriorKind::TightWrong,
    ];

    /// Prior for a Strauss fit with true `(log beta, log gamma)`.
    pub fn prior(self, truth: [f64; 2], gamma: f64) -> Result<GaussianDistribution> {
        let interaction_var = if gamma < 0.2 { 0.01 } else { 0.001 };
        match self {
            PriorKind::Flat => Ok(GaussianDistribution::flat(2)),
            PriorKind::TightCorrect => {
                GaussianDistribution::diagonal(&truth, &[1.0, interaction_var])
            }
            PriorKind::TightWrong => {
                let shift = std::f64::consts::LN_2;
                GaussianDistribution::diagonal(
                    &[truth[0] + shift, truth[1] + shift],
                    &[1.0, interaction_var],
                )
            }
        }
    }
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorKind::Flat => "flat",
            PriorKind::TightCorrect => "tight-correct",
            PriorKind::TightWrong => "tight-wrong",
        })
    }
}

impl FromStr for PriorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "flat" => Ok(PriorKind::Flat),
            "tight-correct" | "tight_correct" => Ok(PriorKind::TightCorrect),
            "tight-wrong" | "tight_wrong" => Ok(PriorKind::TightWrong),
            _ => Err(Error::Parse(format!(
                "unknown prior kind '{s}' (flat|tight-correct|tight-wrong)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StraussStudyConfig {
    pub beta_levels: Vec<f64>,
    pub gamma_levels: Vec<f64>,
    pub replicates: usize,
    pub priors: Vec<PriorKind>,
    pub seed: u64,
    pub window: Window,
    pub burn_in_steps: usize,
    pub fit: FitOptions,
    pub workers: usize,
}

impl Default for StraussStudyConfig {
    fn default() -> Self {
        Self {
            beta_levels: vec![100.0, 1000.0],
            gamma_levels: vec![0.05, 0.4],
            replicates: 20,
            priors: PriorKind::ALL.to_vec(),
            seed: 0,
            window: Window::unit_square(),
            burn_in_steps: 200_000,
            fit: FitOptions::default(),
            workers: 1,
        }
    }
}

impl StraussStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Parameter("replicates must be >= 1".into()));
        }
        if self.beta_levels.is_empty() || self.gamma_levels.is_empty() || self.priors.is_empty() {
            return Err(Error::Parameter("empty study design".into()));
        }
        if self
            .beta_levels
            .iter()
            .any(|&b| !(b > 0.0 && b.is_finite()))
        {
            return Err(Error::Parameter("beta levels must be positive".into()));
        }
        if self.gamma_levels.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
            return Err(Error::Parameter("gamma levels must lie in (0, 1]".into()));
        }
        self.fit.validate()
    }
}

/// Interaction range used for a Strauss cell: the packing rule rounded to
/// two decimals.
pub fn strauss_range(beta: f64) -> f64 {
    (pack_range_rule(beta) * 100.0).round() / 100.0
}

/// One prior's VB fit on a replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StraussFitRecord {
    pub prior: PriorKind,
    pub mean: [f64; 2],
    pub sd: [f64; 2],
    pub elbo: f64,
    pub iterations: usize,
    pub converged: bool,
    pub elbo_monotone: bool,
    pub rel_error_truth: [f64; 2],
    pub rel_error_irls: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StraussReplicate {
    pub beta: f64,
    pub gamma: f64,
    pub r: f64,
    pub replicate: usize,
    pub seed: u64,
    pub n_data: usize,
    pub n_rows: usize,
    pub truth: [f64; 2],
    pub irls: [f64; 2],
    pub irls_converged: bool,
    pub fits: Vec<StraussFitRecord>,
}

impl StraussReplicate {
    pub fn fit(&self, prior: PriorKind) -> Option<&StraussFitRecord> {
        self.fits.iter().find(|f| f.prior == prior)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StraussCellSummary {
    pub beta: f64,
    pub gamma: f64,
    pub prior: PriorKind,
    pub replicates: usize,
    pub median_abs_error: [f64; 2],
    pub median_rel_error_truth: [f64; 2],
    pub max_rel_error_irls: [f64; 2],
    pub median_prior_distance: [f64; 2],
    pub all_converged: bool,
    pub all_monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StraussStudy {
    pub config: StraussStudyConfig,
    pub replicates: Vec<StraussReplicate>,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

pub fn run_strauss_study(config: &StraussStudyConfig) -> Result<StraussStudy> {
    config.validate()?;
    let cells: Vec<(f64, f64)> = config
        .beta_levels
        .iter()
        .flat_map(|&b| config.gamma_levels.iter().map(move |&g| (b, g)))
        .collect();
    let reps = config.replicates;
    let replicates = run_pool(config.workers, cells.len() * reps, |job| {
        let (beta, gamma) = cells[job / reps];
        strauss_replicate(
            config,
            beta,
            gamma,
            job % reps,
            replicate_seed(config.seed, job as u64),
        )
    })?;
    Ok(StraussStudy {
        config: config.clone(),
        replicates,
    })
}

fn strauss_replicate(
    config: &StraussStudyConfig,
    beta: f64,
    gamma: f64,
    replicate: usize,
    seed: u64,
) -> Result<StraussReplicate> {
    let r = strauss_range(beta);
    let spec = ModelSpec::new(
        TrendBasis::constant(config.window),
        InteractionSpec::Strauss { r },
        None,
        1,
    )?;
    let truth = [beta.ln(), gamma.ln()];
    let rep = simulate_replicate(&spec, &truth, config.window, r, config.burn_in_steps, seed)?;
    let design = rep.design(&spec)?;
    let irls = vb::irls_fit(&design)?;
    let irls_theta = [irls.theta[0], irls.theta[1]];
    let fits = config
        .priors
        .iter()
        .map(|&kind| {
            let prior = kind.prior(truth, gamma)?;
            let state = vb::fit(&prior, &design, &config.fit)?;
            let m = state.posterior.mean();
            let sd = state.posterior.std_devs();
            let mean = [m[0], m[1]];
            Ok(StraussFitRecord {
                prior: kind,
                mean,
                sd: [sd[0], sd[1]],
                elbo: state.elbo,
                iterations: state.iteration,
                converged: state.converged,
                elbo_monotone: state.elbo_monotone(1e-8),
                rel_error_truth: [rel(mean[0], truth[0]), rel(mean[1], truth[1])],
                rel_error_irls: [rel(mean[0], irls_theta[0]), rel(mean[1], irls_theta[1])],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StraussReplicate {
        beta,
        gamma,
        r,
        replicate,
        seed,
        n_data: design.n_data(),
        n_rows: design.n_rows(),
        truth,
        irls: irls_theta,
        irls_converged: irls.converged,
        fits,
    })
}

impl StraussStudy {
    pub fn cell(&self, beta: f64, gamma: f64) -> impl Iterator<Item = &StraussReplicate> {
        self.replicates
            .iter()
            .filter(move |r| r.beta == beta && r.gamma == gamma)
    }

    pub fn summary(&self) -> Vec<StraussCellSummary> {
        let mut out = Vec::new();
        for &beta in &self.config.beta_levels {
            for &gamma in &self.config.gamma_levels {
                for &prior in &self.config.priors {
                    let recs: Vec<(&StraussReplicate, &StraussFitRecord)> = self
                        .cell(beta, gamma)
                        .filter_map(|r| r.fit(prior).map(|f| (r, f)))
                        .collect();
                    let pick = |f: &dyn Fn(&StraussReplicate, &StraussFitRecord, usize) -> f64,
                                k| {
                        recs.iter().map(|(r, s)| f(r, s, k)).collect::<Vec<f64>>()
                    };
                    let both = |f: &dyn Fn(&StraussReplicate, &StraussFitRecord, usize) -> f64| {
                        [median(&pick(f, 0)), median(&pick(f, 1))]
                    };
                    let max_irls = |k| {
                        pick(&|_, s, k| s.rel_error_irls[k], k)
                            .into_iter()
                            .fold(0.0, f64::max)
                    };
                    let prior_mean = prior
                        .prior([beta.ln(), gamma.ln()], gamma)
                        .map(|p| [p.mean()[0], p.mean()[1]])
                        .unwrap_or([0.0; 2]);
                    out.push(StraussCellSummary {
                        beta,
                        gamma,
                        prior,
                        replicates: recs.len(),
                        median_abs_error: both(&|r, s, k| (s.mean[k] - r.truth[k]).abs()),
                        median_rel_error_truth: both(&|_, s, k| s.rel_error_truth[k]),
                        max_rel_error_irls: [max_irls(0), max_irls(1)],
                        median_prior_distance: both(&|_, s, k| (s.mean[k] - prior_mean[k]).abs()),
                        all_converged: recs.iter().all(|(_, s)| s.converged),
                        all_monotone: recs.iter().all(|(_, s)| s.elbo_monotone),
                    });
                }
            }
        }
        out
    }

    /// Writes `replicates.csv`, `summary.csv` and `plot.gp` into `dir`.
    pub fn write_results(&self, dir: &Path, preamble: &[String]) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut out = create_file(dir, "replicates.csv")?;
        write_preamble(&mut out, preamble)?;
        writeln!(
            out,
            "beta,gamma,r,prior,replicate,seed,n_data,n_rows,true_theta1,true_theta2,\
             irls_theta1,irls_theta2,irls_converged,vb_theta1,vb_theta2,vb_sd1,vb_sd2,elbo,\
             iterations,converged,rel_err_truth1,rel_err_truth2,rel_err_irls1,rel_err_irls2"
        )?;
        for r in &self.replicates {
            for f in &r.fits {
                writeln!(
                    out,
                    "{:?},{:?},{:?},{},{},{},{},{},{:?},{:?},{:?},{:?},{},{:?},{:?},{:?},{:?},{:?},{},{},{:?},{:?},{:?},{:?}",
                    r.beta, r.gamma, r.r, f.prior, r.replicate, r.seed, r.n_data, r.n_rows,
                    r.truth[0], r.truth[1], r.irls[0], r.irls[1], r.irls_converged,
                    f.mean[0], f.mean[1], f.sd[0], f.sd[1], f.elbo, f.iterations, f.converged,
                    f.rel_error_truth[0], f.rel_error_truth[1], f.rel_error_irls[0], f.rel_error_irls[1],
                )?;
            }
        }
        out.flush()?;

        let mut out = create_file(dir, "summary.csv")?;
        write_preamble(&mut out, preamble)?;
        writeln!(
            out,
            "beta,gamma,prior,replicates,median_abs_err1,median_abs_err2,median_rel_err_truth1,\
             median_rel_err_truth2,max_rel_err_irls1,max_rel_err_irls2,median_prior_dist1,\
             median_prior_dist2,all_converged,all_monotone"
        )?;
        for s in self.summary() {
            writeln!(
                out,
                "{:?},{:?},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{}",
                s.beta,
                s.gamma,
                s.prior,
                s.replicates,
                s.median_abs_error[0],
                s.median_abs_error[1],
                s.median_rel_error_truth[0],
                s.median_rel_error_truth[1],
                s.max_rel_error_irls[0],
                s.max_rel_error_irls[1],
                s.median_prior_distance[0],
                s.median_prior_distance[1],
                s.all_converged,
                s.all_monotone,
            )?;
        }
        out.flush()?;

        let mut gp = create_file(dir, "plot.gp")?;
        write_preamble(&mut gp, preamble)?;
        writeln!(gp, "set datafile separator ','")?;
        writeln!(gp, "set key autotitle columnhead")?;
        writeln!(gp, "set xlabel 'relative error, theta1'")?;
        writeln!(gp, "set ylabel 'relative error, theta2'")?;
        writeln!(
            gp,
            "plot 'replicates.csv' using ($21*sgn($14-$9)):($22*sgn($15-$10)) with points title 'VB vs truth', \\\n     'replicates.csv' using (($12-$9)/abs($9)):(($13-$10)/abs($10)) with points title 'IRLS vs truth'"
        )?;
        gp.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trend study

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendTruth {
    /// Each type has its own quartic trend.
    Distinct,
    /// Both types share the non-constant part of the trend.
    Shared,
}

impl fmt::Display for TrendTruth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrendTruth::Distinct => "distinct",
            TrendTruth::Shared => "shared",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendStudyConfig {
    pub seed: u64,
    pub replicates: usize,
    pub window: Window,
    pub degree: usize,
    pub cross_range: f64,
    /// Separate-trend coefficients, five per type, in the rescaled coordinate.
    pub distinct_theta: Vec<f64>,
    /// Proportional-trend coefficients: two intercepts then four shared terms.
    pub shared_theta: Vec<f64>,
    pub log_cross_gamma: f64,
    pub prior_variance: f64,
    pub burn_in_steps: usize,
    pub envelope_points: usize,
    pub envelope_samples: usize,
    pub level: f64,
    pub fit: FitOptions,
    pub workers: usize,
}

impl Default for TrendStudyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            replicates: 20,
            window: Window::new(0.0, 1.0, 0.05, 0.75).expect("valid window"),
            degree: 4,
            cross_range: 0.008,
            distinct_theta: vec![5.8, 1.5, -0.3, -0.4, 0.2, 5.8, -1.5, -0.8, 0.4, 0.5],
            shared_theta: vec![5.7, 5.5, 0.5, -0.4, 0.2, 0.1],
            log_cross_gamma: -1.0,
            prior_variance: 100.0,
            burn_in_steps: 200_000,
            envelope_points: 71,
            envelope_samples: 1000,
            level: 0.95,
            fit: FitOptions::default(),
            workers: 1,
        }
    }
}

impl TrendStudyConfig {
    fn spec(&self, marks: MarkTrend) -> Result<ModelSpec> {
        ModelSpec::new(
            TrendBasis {
                kind: TrendKind::PolyY {
                    degree: self.degree,
                },
                marks,
                frame: self.window,
            },
            InteractionSpec::CrossStrauss {
                r: self.cross_range,
            },
            None,
            2,
        )
    }

    pub fn separate_spec(&self) -> Result<ModelSpec> {
        self.spec(MarkTrend::Separate)
    }

    pub fn shared_spec(&self) -> Result<ModelSpec> {
        self.spec(MarkTrend::Proportional)
    }

    /// Simulation model and full coefficient vector for `truth`.
    pub fn truth(&self, truth: TrendTruth) -> Result<(ModelSpec, Vec<f64>)> {
        let (spec, mut theta) = match truth {
            TrendTruth::Distinct => (self.separate_spec()?, self.distinct_theta.clone()),
            TrendTruth::Shared => (self.shared_spec()?, self.shared_theta.clone()),
        };
        theta.push(self.log_cross_gamma);
        if theta.len() != spec.parameter_dim() {
            return Err(Error::Dimension {
                expected: spec.parameter_dim(),
                found: theta.len(),
                context: "trend study truth",
            });
        }
        Ok((spec, theta))
    }

    /// Envelope grid over the vertical extent of the window.
    pub fn envelope_grid(&self) -> Vec<f64> {
        let (lo, hi) = (self.window.ymin(), self.window.ymax());
        let m = self.envelope_points.max(2);
        (0..m)
            .map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Parameter("replicates must be >= 1".into()));
        }
        if !(self.prior_variance > 0.0) {
            return Err(Error::Parameter("prior variance must be > 0".into()));
        }
        if self.envelope_samples == 0 {
            return Err(Error::Parameter("envelope samples must be >= 1".into()));
        }
        self.truth(TrendTruth::Distinct)?;
        self.truth(TrendTruth::Shared)?;
        self.fit.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReplicate {
    pub truth: TrendTruth,
    pub replicate: usize,
    pub seed: u64,
    pub n_data: [usize; 2],
    pub elbo_separate: f64,
    pub elbo_shared: f64,
    pub bayes_factor: f64,
    /// Iterations of the slower of the two fits.
    pub iterations: usize,
    pub converged: bool,
    pub elbo_monotone: bool,
    pub separate_mean: Vec<f64>,
    pub separate_sd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendStudy {
    pub config: TrendStudyConfig,
    pub replicates: Vec<TrendReplicate>,
    /// Separate-model envelopes (without intercept) of the first replicate
    /// of each scenario, one per type.
    pub envelopes: Vec<(TrendTruth, Vec<CurveEnvelope>)>,
}

pub fn run_trend_study(config: &TrendStudyConfig) -> Result<TrendStudy> {
    config.validate()?;
    let reps = config.replicates;
    let scenarios = [TrendTruth::Distinct, TrendTruth::Shared];
    let results = run_pool(config.workers, 2 * reps, |job| {
        let truth = scenarios[job / reps];
        trend_replicate(
            config,
            truth,
            job % reps,
            replicate_seed(config.seed, job as u64),
        )
    })?;
    let mut replicates = Vec::with_capacity(results.len());
    let mut envelopes = Vec::new();
    for (rec, env) in results {
        if let Some(env) = env {
            envelopes.push((rec.truth, env));
        }
        replicates.push(rec);
    }
    Ok(TrendStudy {
        config: config.clone(),
        replicates,
        envelopes,
    })
}

fn trend_replicate(
    config: &TrendStudyConfig,
    truth: TrendTruth,
    replicate: usize,
    seed: u64,
) -> Result<(TrendReplicate, Option<Vec<CurveEnvelope>>)> {
    let (truth_spec, theta) = config.truth(truth)?;
    let rep = simulate_replicate(
        &truth_spec,
        &theta,
        config.window,
        config.cross_range,
        config.burn_in_steps,
        seed,
    )?;
    let separate = config.separate_spec()?;
    let shared = config.shared_spec()?;
    let fit_model = |spec: &ModelSpec| -> Result<VariationalState> {
        let design = rep.design(spec)?;
        let p = spec.parameter_dim();
        let prior = GaussianDistribution::diagonal(&vec![0.0; p], &vec![config.prior_variance; p])?;
        vb::fit(&prior, &design, &config.fit)
    };
    let sep = fit_model(&separate)?;
    let sha = fit_model(&shared)?;
    let mut n_data = [0usize; 2];
    for i in 0..rep.data.n() {
        if config.window.contains(rep.data.points()[i]) {
            n_data[rep.data.mark(i).unwrap_or(0).min(1)] += 1;
        }
    }
    let envelopes = if replicate == 0 {
        Some(trend_envelope(
            &separate,
            &sep.posterior,
            &config.envelope_grid(),
            config.level,
            config.envelope_samples,
            dummy_seed(seed).wrapping_add(1),
            false,
        )?)
    } else {
        None
    };
    Ok((
        TrendReplicate {
            truth,
            replicate,
            seed,
            n_data,
            elbo_separate: sep.elbo,
            elbo_shared: sha.elbo,
            bayes_factor: bayes_factor(sep.elbo, sha.elbo),
            iterations: sep.iteration.max(sha.iteration),
            converged: sep.converged && sha.converged,
            elbo_monotone: sep.elbo_monotone(1e-8) && sha.elbo_monotone(1e-8),
            separate_mean: sep.posterior.mean().iter().copied().collect(),
            separate_sd: sep.posterior.std_devs(),
        },
        envelopes,
    ))
}

impl TrendStudy {
    pub fn bayes_factors(&self, truth: TrendTruth) -> Vec<f64> {
        self.replicates
            .iter()
            .filter(|r| r.truth == truth)
            .map(|r| r.bayes_factor)
            .collect()
    }

    /// Fraction of replicates with a Bayes factor above one.
    pub fn fraction_favouring_separate(&self, truth: TrendTruth) -> f64 {
        let bf = self.bayes_factors(truth);
        bf.iter().filter(|&&b| b > 1.0).count() as f64 / bf.len() as f64
    }

    pub fn median_log_bayes_factor(&self, truth: TrendTruth) -> f64 {
        let logs: Vec<f64> = self
            .replicates
            .iter()
            .filter(|r| r.truth == truth)
            .map(|r| r.elbo_separate - r.elbo_shared)
            .collect();
        median(&logs)
    }

    /// True trend without intercept for `mark` in the given scenario, on `grid`.
    pub fn true_trend_curve(
        &self,
        truth: TrendTruth,
        mark: usize,
        grid: &[f64],
    ) -> Result<Vec<f64>> {
        let (spec, theta) = self.config.truth(truth)?;
        let x = spec.trend.frame.center().x;
        let intercepts = spec.trend.intercept_columns(spec.mark_levels);
        let mut row = vec![0.0; spec.trend_dim()];
        Ok(grid
            .iter()
            .map(|&y| {
                spec.trend
                    .fill_row(crate::geometry::Point::new(x, y), mark, 2, &mut row);
                row.iter()
                    .enumerate()
                    .filter(|(c, _)| !intercepts.contains(c))
                    .map(|(c, v)| v * theta[c])
                    .sum()
            })
            .collect())
    }

    /// Writes `bayes_factors.csv`, `summary.csv`, one envelope CSV per
    /// scenario and type, and `plot.gp` into `dir`.
    pub fn write_results(&self, dir: &Path, preamble: &[String]) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut out = create_file(dir, "bayes_factors.csv")?;
        write_preamble(&mut out, preamble)?;
        writeln!(
            out,
            "truth,replicate,seed,n_type0,n_type1,elbo_separate,elbo_shared,log_bf,bf,converged,elbo_monotone"
        )?;
        for r in &self.replicates {
            writeln!(
                out,
                "{},{},{},{},{},{:?},{:?},{:?},{:?},{},{}",
                r.truth,
                r.replicate,
                r.seed,
                r.n_data[0],
                r.n_data[1],
                r.elbo_separate,
                r.elbo_shared,
                r.elbo_separate - r.elbo_shared,
                r.bayes_factor,
                r.converged,
                r.elbo_monotone
            )?;
        }
        out.flush()?;

        let mut out = create_file(dir, "summary.csv")?;
        write_preamble(&mut out, preamble)?;
        writeln!(out, "truth,replicates,fraction_bf_above_1,median_log_bf")?;
        for truth in [TrendTruth::Distinct, TrendTruth::Shared] {
            writeln!(
                out,
                "{},{},{:?},{:?}",
                truth,
                self.bayes_factors(truth).len(),
                self.fraction_favouring_separate(truth),
                self.median_log_bayes_factor(truth)
            )?;
        }
        out.flush()?;

        let mut gp = create_file(dir, "plot.gp")?;
        write_preamble(&mut gp, preamble)?;
        writeln!(gp, "set datafile separator ','")?;
        writeln!(gp, "set xlabel 'y'")?;
        writeln!(gp, "set ylabel 'trend without intercept'")?;
        let mut plots = Vec::new();
        for (truth, envs) in &self.envelopes {
            for (mark, env) in envs.iter().enumerate() {
                let name = format!("envelope_{truth}_type{mark}.csv");
                let mut f = create_file(dir, &name)?;
                let truth_curve = self.true_trend_curve(*truth, mark, &env.grid)?;
                write_preamble(&mut f, preamble)?;
                writeln!(f, "grid,lower,mean,upper,truth")?;
                for i in 0..env.grid.len() {
                    writeln!(
                        f,
                        "{:?},{:?},{:?},{:?},{:?}",
                        env.grid[i], env.lower[i], env.mean[i], env.upper[i], truth_curve[i]
                    )?;
                }
                f.flush()?;
                plots.push(format!(
                    "'{name}' using 1:2:4 with filledcurves title '{truth} type {mark}', '{name}' using 1:5 with lines notitle"
                ));
            }
        }
        writeln!(gp, "plot {}", plots.join(", \\\n     "))?;
        gp.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Interaction study

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionStudyConfig {
    pub seed: u64,
    pub window: Window,
    pub log_beta: f64,
    pub epsilon: f64,
    /// Distance at which the true interaction function peaks.
    pub true_range: f64,
    pub step_k: usize,
    pub basis_k: usize,
    pub r_max: f64,
    /// Bandwidth of the smooth basis, in units of the centre spacing.
    pub bandwidth_spacings: f64,
    pub kernel_scale: f64,
    /// Length scale of the smoothing prior, in units of the grid spacing.
    pub length_spacings: f64,
    pub pin_first: bool,
    pub burn_in_steps: usize,
    pub samples: usize,
    /// Curve evaluation points per unit of `r_max`.
    pub curve_resolution: usize,
    pub fit: FitOptions,
}

impl Default for InteractionStudyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            window: Window::new(0.0, 2.0, 0.0, 2.0).expect("valid window"),
            log_beta: 200f64.ln(),
            epsilon: 1.0,
            true_range: 0.06,
            step_k: 20,
            basis_k: 50,
            r_max: 0.15,
            bandwidth_spacings: 2.0,
            kernel_scale: 4.0,
            length_spacings: 2.0,
            pin_first: true,
            burn_in_steps: 1_000_000,
            samples: 1000,
            curve_resolution: 2000,
            fit: FitOptions::default(),
        }
    }
}

/// A fitted interaction model with its curve summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionFit {
    pub spec: ModelSpec,
    pub layout: PinnedLayout,
    /// Posterior mean of the full coefficient vector (pinned entries included).
    pub mean: Vec<f64>,
    pub elbo: f64,
    pub iterations: usize,
    pub converged: bool,
    pub elbo_monotone: bool,
    pub curve: CurveEnvelope,
    pub range: RangeEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionStudy {
    pub config: InteractionStudyConfig,
    pub n_data: usize,
    pub step: InteractionFit,
    pub basis: InteractionFit,
    pub true_curve: Vec<(f64, f64)>,
}

impl InteractionStudyConfig {
    pub fn sigma(&self) -> f64 {
        lennard_jones_sigma_for_peak(self.true_range)
    }

    pub fn truth_spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(
            TrendBasis::constant(self.window),
            InteractionSpec::lennard_jones(self.epsilon, self.sigma()),
            None,
            1,
        )
    }

    pub fn step_spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(
            TrendBasis::constant(self.window),
            InteractionSpec::step_function(self.step_k, self.r_max)?,
            None,
            1,
        )
    }

    pub fn basis_spec(&self) -> Result<ModelSpec> {
        let spacing = self.r_max / (self.basis_k.max(2) - 1) as f64;
        ModelSpec::new(
            TrendBasis::constant(self.window),
            InteractionSpec::smooth_basis(
                self.basis_k,
                self.r_max,
                self.bandwidth_spacings * spacing,
            )?,
            None,
            1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.curve_resolution == 0 {
            return Err(Error::Parameter(
                "samples and resolution must be >= 1".into(),
            ));
        }
        if !(self.true_range > 0.0 && self.true_range < self.r_max) {
            return Err(Error::Parameter("true range must lie in (0, r_max)".into()));
        }
        self.truth_spec()?;
        self.step_spec()?;
        self.basis_spec()?;
        self.fit.validate()
    }
}

/// Locations of the weights on the distance axis: bin midpoints for a step
/// function, centres for a smooth basis.
fn weight_locations(spec: &InteractionSpec) -> Vec<f64> {
    match spec {
        InteractionSpec::StepFunction { grid } => {
            grid.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
        }
        InteractionSpec::SmoothBasis { centers, .. } => centers.clone(),
        _ => Vec::new(),
    }
}

/// Evaluation grid on `[0, r_max]`. For a step function every bin is
/// subdivided so that each bin edge is itself a grid point.
fn curve_grid(spec: &InteractionSpec, r_max: f64, resolution: usize) -> Vec<f64> {
    match spec {
        InteractionSpec::StepFunction { grid } => {
            let per_bin = (resolution / (grid.len() - 1)).max(1);
            let mut out: Vec<f64> = grid
                .windows(2)
                .flat_map(|w| {
                    (0..per_bin).map(move |j| w[0] + (w[1] - w[0]) * j as f64 / per_bin as f64)
                })
                .collect();
            out.push(*grid.last().unwrap());
            out
        }
        _ => (0..=resolution)
            .map(|i| r_max * i as f64 / resolution as f64)
            .collect(),
    }
}

pub fn run_interaction_study(config: &InteractionStudyConfig) -> Result<InteractionStudy> {
    config.validate()?;
    let truth = config.truth_spec()?;
    let step = config.step_spec()?;
    let basis = config.basis_spec()?;
    let margin = step.reach().max(basis.reach());
    let rep = simulate_replicate(
        &truth,
        &[config.log_beta],
        config.window,
        margin,
        config.burn_in_steps,
        config.seed,
    )?;
    let step_fit = fit_interaction(config, &rep, step, config.seed.wrapping_add(1))?;
    let basis_fit = fit_interaction(config, &rep, basis, config.seed.wrapping_add(2))?;
    let grid = &basis_fit.curve.grid;
    let true_curve = grid
        .iter()
        .map(|&r| {
            let phi = if r > 0.0 {
                lennard_jones_curve(config.epsilon, config.sigma(), &[r])?[0]
            } else {
                0.0
            };
            Ok((r, phi))
        })
        .collect::<Result<_>>()?;
    Ok(InteractionStudy {
        config: config.clone(),
        n_data: rep
            .data
            .points()
            .iter()
            .filter(|&&u| config.window.contains(u))
            .count(),
        step: step_fit,
        basis: basis_fit,
        true_curve,
    })
}

fn fit_interaction(
    config: &InteractionStudyConfig,
    rep: &Replicate,
    spec: ModelSpec,
    sample_seed: u64,
) -> Result<InteractionFit> {
    let locations = weight_locations(&spec.interaction);
    let mut smoothing = SmoothingPrior::default_for(&locations);
    smoothing.kernel_scale = config.kernel_scale;
    smoothing.length_scale *= config.length_spacings / 2.0;
    if config.pin_first {
        smoothing = smoothing.with_short_range_pin();
    }
    let weights = build_smoothing_prior(&locations, &smoothing)?;
    let intercept = GaussianDistribution::diagonal(&[0.0], &[FLAT_PRIOR_VARIANCE])?;
    let (prior, layout) = weights.join_with_trend(&intercept)?;
    let design = layout.reduce_design(&rep.design(&spec)?)?;
    let state = vb::fit(&prior, &design, &config.fit)?;
    let draws = layout.expand_samples(&sample_theta(
        &state.posterior,
        config.samples,
        sample_seed,
    )?);
    let grid = curve_grid(&spec.interaction, config.r_max, config.curve_resolution);
    let curves = interaction_curves(&spec, &draws, &grid)?;
    let curve = envelope_from_curves(&grid, &curves, 0.95)?;
    let range = characteristic_range(&grid, &curves)?;
    Ok(InteractionFit {
        mean: layout.expand_mean(&state.posterior),
        layout,
        spec,
        elbo: state.elbo,
        iterations: state.iteration,
        converged: state.converged,
        elbo_monotone: state.elbo_monotone(1e-8),
        curve,
        range,
    })
}

impl InteractionStudy {
    /// Writes `summary.csv`, `curve_step.csv`, `curve_basis.csv`,
    /// `true_curve.csv` and `plot.gp` into `dir`.
    pub fn write_results(&self, dir: &Path, preamble: &[String]) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut out = create_file(dir, "summary.csv")?;
        write_preamble(&mut out, preamble)?;
        writeln!(
            out,
            "model,n_data,range_mean,range_lo,range_hi,boundary_flag,elbo,iterations,converged,elbo_monotone"
        )?;
        for (name, fit) in [("step", &self.step), ("basis", &self.basis)] {
            writeln!(
                out,
                "{},{},{:?},{:?},{:?},{},{:?},{},{},{}",
                name,
                self.n_data,
                fit.range.mean,
                fit.range.lo,
                fit.range.hi,
                fit.range.boundary_flag,
                fit.elbo,
                fit.iterations,
                fit.converged,
                fit.elbo_monotone
            )?;
        }
        out.flush()?;
        for (name, fit) in [
            ("curve_step.csv", &self.step),
            ("curve_basis.csv", &self.basis),
        ] {
            fit.curve.write_csv(create_file(dir, name)?, preamble)?;
        }
        let mut out = create_file(dir, "true_curve.csv")?;
        write_preamble(&mut out, preamble)?;
        writeln!(out, "r,phi")?;
        for (r, v) in &self.true_curve {
            writeln!(out, "{r:?},{v:?}")?;
        }
        out.flush()?;

        let mut gp = create_file(dir, "plot.gp")?;
        write_preamble(&mut gp, preamble)?;
        writeln!(gp, "set datafile separator ','")?;
        writeln!(gp, "set key autotitle columnhead")?;
        writeln!(gp, "set xlabel 'r'")?;
        writeln!(gp, "set ylabel 'interaction'")?;
        writeln!(gp, "set yrange [0:4]")?;
        writeln!(
            gp,
            "plot 'curve_step.csv' using 1:2:4 with filledcurves title 'step 95%', \\\n     \
             'curve_basis.csv' using 1:2:4 with filledcurves title 'basis 95%', \\\n     \
             'curve_step.csv' using 1:3 with lines title 'step mean', \\\n     \
             'curve_basis.csv' using 1:3 with lines title 'basis mean', \\\n     \
             'true_curve.csv' using 1:2 with lines title 'truth'"
        )?;
        gp.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strauss_ranges_round_to_grid() {
        assert_eq!(strauss_range(100.0), 0.06);
        assert_eq!(strauss_range(1000.0), 0.02);
    }

    #[test]
    fn prior_kinds() {
        let truth = [100f64.ln(), 0.05f64.ln()];
        let flat = PriorKind::Flat.prior(truth, 0.05).unwrap();
        assert_eq!(flat.covariance()[(1, 1)], FLAT_PRIOR_VARIANCE);
        let right = PriorKind::TightCorrect.prior(truth, 0.05).unwrap();
        assert_eq!(right.covariance()[(1, 1)], 0.01);
        assert_eq!(right.mean()[1], truth[1]);
        let wrong = PriorKind::TightWrong
            .prior([truth[0], 0.4f64.ln()], 0.4)
            .unwrap();
        assert_eq!(wrong.covariance()[(1, 1)], 0.001);
        assert!((wrong.mean()[1] - 0.8f64.ln()).abs() < 1e-12);
        for k in PriorKind::ALL {
            assert_eq!(k.to_string().parse::<PriorKind>().unwrap(), k);
        }
    }

    #[test]
    fn step_curve_grid_hits_edges() {
        let s = InteractionSpec::step_function(20, 0.15).unwrap();
        let g = curve_grid(&s, 0.15, 2000);
        if let InteractionSpec::StepFunction { grid } = &s {
            assert!(grid.iter().all(|e| g.contains(e)));
        }
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(g.len(), 2001);
    }

    #[test]
    fn study_configs_validate() {
        assert!(StraussStudyConfig::default().validate().is_ok());
        assert!(TrendStudyConfig::default().validate().is_ok());
        assert!(InteractionStudyConfig::default().validate().is_ok());
        let bad = StraussStudyConfig {
            replicates: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let grid = TrendStudyConfig::default().envelope_grid();
        assert_eq!(grid[0], 0.05);
        assert!((grid[grid.len() - 1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn small_strauss_study_is_reproducible_across_pool_sizes() {
        let config = StraussStudyConfig {
            beta_levels: vec![100.0],
            gamma_levels: vec![0.4],
            replicates: 3,
            burn_in_steps: 20_000,
            ..Default::default()
        };
        let a = run_strauss_study(&config).unwrap();
        let b = run_strauss_study(&StraussStudyConfig {
            workers: 3,
            ..config.clone()
        })
        .unwrap();
        assert_eq!(a.replicates, b.replicates);
        assert_eq!(a.replicates.len(), 3);
        for r in &a.replicates {
            assert_eq!(r.fits.len(), 3);
            assert!(r.fits.iter().all(|f| f.elbo_monotone));
        }
        let seeds: Vec<u64> = a.replicates.iter().map(|r| r.seed).collect();
        assert_eq!(seeds, vec![0, 1, 2]);
    }
}
