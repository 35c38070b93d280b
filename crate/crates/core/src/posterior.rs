//! Using a fitted posterior: draws, pointwise envelopes, Bayes factors,
//! smoothing priors for interaction weights and characteristic ranges.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::model::{InteractionSpec, ModelSpec};
use crate::quadrature::LogisticDesign;
use crate::vb::GaussianDistribution;

/// Pointwise summary of a family of curves on a common grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveEnvelope {
    pub grid: Vec<f64>,
    pub lower: Vec<f64>,
    pub mean: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
}

impl CurveEnvelope {
    /// CSV `grid,lower,mean,upper`.
    pub fn write_csv<W: Write>(&self, mut out: W, preamble: &[String]) -> Result<()> {
        for line in preamble {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "grid,lower,mean,upper")?;
        for i in 0..self.grid.len() {
            writeln!(
                out,
                "{:?},{:?},{:?},{:?}",
                self.grid[i], self.lower[i], self.mean[i], self.upper[i]
            )?;
        }
        Ok(())
    }

    pub fn contains(&self, i: usize, v: f64) -> bool {
        self.lower[i] <= v && v <= self.upper[i]
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "level must be in (0, 1), got {level}"
        )))
    }
}

/// Pointwise mean and central `level` quantile band of `curves[sample][grid]`.
pub fn envelope_from_curves(
    grid: &[f64],
    curves: &[Vec<f64>],
    level: f64,
) -> Result<CurveEnvelope> {
    check_level(level)?;
    if curves.is_empty() {
        return Err(Error::Parameter("no curves to summarise".into()));
    }
    let m = grid.len();
    let (qlo, qhi) = ((1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0);
    let mut lower = Vec::with_capacity(m);
    let mut mean = Vec::with_capacity(m);
    let mut upper = Vec::with_capacity(m);
    let mut column = Vec::with_capacity(curves.len());
    for g in 0..m {
        column.clear();
        column.extend(curves.iter().map(|c| c[g]));
        let avg = column.iter().sum::<f64>() / column.len() as f64;
        column.sort_by(f64::total_cmp);
        let (lo, hi) = (quantile_sorted(&column, qlo), quantile_sorted(&column, qhi));
        lower.push(lo);
        upper.push(hi);
        // keep lower <= mean <= upper under rounding
        mean.push(
            avg.clamp(column[0], column[column.len() - 1])
                .clamp(lo.min(avg), hi.max(avg)),
        );
    }
    Ok(CurveEnvelope {
        grid: grid.to_vec(),
        lower,
        mean,
        upper,
        level,
    })
}

/// `count` independent draws from the Gaussian, one per row.
pub fn sample_theta(
    posterior: &GaussianDistribution,
    count: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if count == 0 {
        return Err(Error::Parameter("sample count must be >= 1".into()));
    }
    let p = posterior.dim();
    let chol = match posterior.cholesky() {
        Ok(c) => c,
        Err(_) => {
            let mut c = posterior.covariance().clone();
            let eps = 1e-12 * (c.trace() / p as f64).abs().max(1e-300);
            for i in 0..p {
                c[(i, i)] += eps;
            }
            Cholesky::new(c).ok_or_else(|| {
                Error::Numerical("posterior covariance cannot be factorized".into())
            })?
        }
    };
    let l = chol.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(count, p);
    let mut z = DVector::zeros(p);
    for s in 0..count {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let draw = &l * &z + posterior.mean();
        out.row_mut(s).copy_from(&draw.transpose());
    }
    Ok(out)
}

/// Pointwise envelopes of the trend linear predictor along the vertical
/// coordinate, one per mark level. Curves are evaluated at the horizontal
/// centre of the trend frame.
pub fn trend_envelope(
    spec: &ModelSpec,
    posterior: &GaussianDistribution,
    grid: &[f64],
    level: f64,
    count: usize,
    seed: u64,
    include_intercept: bool,
) -> Result<Vec<CurveEnvelope>> {
    check_level(level)?;
    let td = spec.trend_dim();
    if posterior.dim() != spec.parameter_dim() {
        return Err(Error::Dimension {
            expected: spec.parameter_dim(),
            found: posterior.dim(),
            context: "posterior vs model",
        });
    }
    let draws = sample_theta(posterior, count, seed)?;
    let intercepts = spec.trend.intercept_columns(spec.mark_levels);
    let x = spec.trend.frame.center().x;
    let mut envelopes = Vec::with_capacity(spec.mark_levels);
    let mut row = vec![0.0; td];
    for mark in 0..spec.mark_levels {
        // basis rows for each grid value
        let rows: Vec<Vec<f64>> = grid
            .iter()
            .map(|&y| {
                spec.trend
                    .fill_row(Point::new(x, y), mark, spec.mark_levels, &mut row);
                if !include_intercept {
                    for &c in &intercepts {
                        row[c] = 0.0;
                    }
                }
                row.clone()
            })
            .collect();
        let curves: Vec<Vec<f64>> = (0..count)
            .map(|s| {
                let theta = draws.row(s);
                rows.iter()
                    .map(|r| r.iter().zip(theta.iter()).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect();
        envelopes.push(envelope_from_curves(grid, &curves, level)?);
    }
    Ok(envelopes)
}

/// Approximate Bayes factor `exp(elbo_1 - elbo_0)` from evidence lower bounds.
pub fn bayes_factor(elbo_model_1: f64, elbo_model_0: f64) -> f64 {
    (elbo_model_1 - elbo_model_0).exp()
}

/// Squared-exponential smoothing prior for interaction weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingPrior {
    /// Marginal variance `sigma^2` of each weight.
    pub kernel_scale: f64,
    pub length_scale: f64,
    /// `(grid index, value)` pairs the weights are conditioned on.
    pub boundary_conditions: Vec<(usize, f64)>,
}

/// Default weight pinned at the smallest range when requested.
pub const SHORT_RANGE_PIN: f64 = -10.0;

impl SmoothingPrior {
    /// `sigma^2 = 4`, length scale twice the mean grid spacing, last weight
    /// pinned at zero.
    pub fn default_for(grid: &[f64]) -> Self {
        let k = grid.len();
        let spacing = if k > 1 {
            (grid[k - 1] - grid[0]) / (k - 1) as f64
        } else {
            1.0
        };
        Self {
            kernel_scale: 4.0,
            length_scale: 2.0 * spacing,
            boundary_conditions: vec![(k - 1, 0.0)],
        }
    }

    /// Adds a pin of the first weight at [`SHORT_RANGE_PIN`].
    pub fn with_short_range_pin(mut self) -> Self {
        if !self.boundary_conditions.iter().any(|&(i, _)| i == 0) {
            self.boundary_conditions.insert(0, (0, SHORT_RANGE_PIN));
        }
        self
    }
}

/// Conditional Gaussian over interaction weights after pinning.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPrior {
    /// Conditional mean of all `K` weights (pinned entries equal their values).
    pub mean: DVector<f64>,
    /// Conditional covariance of all `K` weights (pinned rows and columns are zero).
    pub covariance: DMatrix<f64>,
    pub pinned: Vec<(usize, f64)>,
    pub free: Vec<usize>,
}

const SMOOTHING_JITTER: f64 = 1e-8;

/// Kernel `K(r_k, r_l) = sigma^2 exp(-(r_k - r_l)^2 / (2 l^2))` conditioned on the pins.
pub fn build_smoothing_prior(grid: &[f64], prior: &SmoothingPrior) -> Result<WeightPrior> {
    if grid.is_empty() || !grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Parameter("grid must be strictly increasing".into()));
    }
    if !(prior.kernel_scale > 0.0 && prior.length_scale > 0.0) {
        return Err(Error::Parameter(
            "kernel and length scales must be > 0".into(),
        ));
    }
    let k = grid.len();
    let mut pinned = prior.boundary_conditions.clone();
    pinned.sort_by_key(|p| p.0);
    pinned.dedup_by_key(|p| p.0);
    if pinned.iter().any(|&(i, _)| i >= k) {
        return Err(Error::Parameter("pinned index outside grid".into()));
    }
    let free: Vec<usize> = (0..k)
        .filter(|i| !pinned.iter().any(|p| p.0 == *i))
        .collect();
    let two_l2 = 2.0 * prior.length_scale * prior.length_scale;
    let kern = DMatrix::from_fn(k, k, |a, b| {
        prior.kernel_scale * (-(grid[a] - grid[b]).powi(2) / two_l2).exp()
    });

    let mut mean = DVector::zeros(k);
    let mut cov = DMatrix::zeros(k, k);
    for &(i, v) in &pinned {
        mean[i] = v;
    }
    if pinned.is_empty() {
        cov = kern;
    } else if !free.is_empty() {
        let pi: Vec<usize> = pinned.iter().map(|p| p.0).collect();
        let mut kpp = kern.select_rows(&pi).select_columns(&pi);
        for d in 0..pi.len() {
            kpp[(d, d)] += SMOOTHING_JITTER * prior.kernel_scale;
        }
        let chol = Cholesky::new(kpp)
            .ok_or_else(|| Error::Numerical("pinned kernel block not positive definite".into()))?;
        let kfp = kern.select_rows(&free).select_columns(&pi);
        let kff = kern.select_rows(&free).select_columns(&free);
        let values = DVector::from_iterator(pi.len(), pinned.iter().map(|p| p.1));
        let cond_mean = &kfp * chol.solve(&values);
        let cond_cov = &kff - &kfp * chol.solve(&kfp.transpose());
        let cond_cov = (&cond_cov + cond_cov.transpose()) * 0.5;
        for (a, &fa) in free.iter().enumerate() {
            mean[fa] = cond_mean[a];
            for (b, &fb) in free.iter().enumerate() {
                cov[(fa, fb)] = cond_cov[(a, b)];
            }
        }
    }
    let out = WeightPrior {
        mean,
        covariance: cov,
        pinned,
        free,
    };
    out.free_distribution()?;
    Ok(out)
}

impl WeightPrior {
    /// Gaussian over the free weights, with `1e-8 sigma^2` diagonal jitter.
    pub fn free_distribution(&self) -> Result<GaussianDistribution> {
        let f = &self.free;
        let mean = DVector::from_iterator(f.len(), f.iter().map(|&i| self.mean[i]));
        let mut cov = self.covariance.select_rows(f).select_columns(f);
        let scale = cov.diagonal().max().max(f64::MIN_POSITIVE);
        for d in 0..f.len() {
            cov[(d, d)] += SMOOTHING_JITTER * scale.max(1e-300);
        }
        GaussianDistribution::new(mean, cov)
    }

    /// Block-diagonal prior `[trend | free weights]`, with the layout that
    /// maps reduced parameters back to the full coefficient vector.
    pub fn join_with_trend(
        &self,
        trend: &GaussianDistribution,
    ) -> Result<(GaussianDistribution, PinnedLayout)> {
        let w = self.free_distribution()?;
        let (t, f) = (trend.dim(), w.dim());
        let mut mean = DVector::zeros(t + f);
        mean.rows_mut(0, t).copy_from(trend.mean());
        mean.rows_mut(t, f).copy_from(w.mean());
        let mut cov = DMatrix::zeros(t + f, t + f);
        cov.view_mut((0, 0), (t, t)).copy_from(trend.covariance());
        cov.view_mut((t, t), (f, f)).copy_from(w.covariance());
        let layout = PinnedLayout {
            full_dim: t + self.mean.len(),
            pinned: self.pinned.iter().map(|&(i, v)| (t + i, v)).collect(),
        };
        Ok((GaussianDistribution::new(mean, cov)?, layout))
    }
}

/// Map between a full coefficient vector and one with some coordinates fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedLayout {
    pub full_dim: usize,
    /// `(full index, value)`, sorted by index.
    pub pinned: Vec<(usize, f64)>,
}

impl PinnedLayout {
    pub fn none(full_dim: usize) -> Self {
        Self {
            full_dim,
            pinned: Vec::new(),
        }
    }

    pub fn reduced_dim(&self) -> usize {
        self.full_dim - self.pinned.len()
    }

    /// Moves pinned columns into the offsets.
    pub fn reduce_design(&self, design: &LogisticDesign) -> Result<LogisticDesign> {
        if design.dim() != self.full_dim {
            return Err(Error::Dimension {
                expected: self.full_dim,
                found: design.dim(),
                context: "design columns",
            });
        }
        design.fix_columns(&self.pinned)
    }

    pub fn expand(&self, reduced: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.full_dim);
        let mut it = reduced.iter();
        let mut pins = self.pinned.iter().peekable();
        for i in 0..self.full_dim {
            match pins.peek() {
                Some(&&(j, v)) if j == i => {
                    out.push(v);
                    pins.next();
                }
                _ => out.push(*it.next().expect("reduced vector too short")),
            }
        }
        out
    }

    pub fn expand_samples(&self, reduced: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(reduced.nrows(), self.full_dim);
        for s in 0..reduced.nrows() {
            let row: Vec<f64> = reduced.row(s).iter().copied().collect();
            let full = self.expand(&row);
            for (k, v) in full.into_iter().enumerate() {
                out[(s, k)] = v;
            }
        }
        out
    }

    /// Full-dimensional Gaussian with zero variance on pinned coordinates is
    /// not representable; this returns the full mean only.
    pub fn expand_mean(&self, reduced: &GaussianDistribution) -> Vec<f64> {
        let m: Vec<f64> = reduced.mean().iter().copied().collect();
        self.expand(&m)
    }
}

fn interaction_weights<'a>(spec: &ModelSpec, theta: &'a [f64]) -> Result<&'a [f64]> {
    let k = spec.interaction_dim();
    match theta.len() {
        n if n == spec.parameter_dim() => Ok(&theta[spec.trend_dim()..]),
        n if n == k => Ok(theta),
        n => Err(Error::Dimension {
            expected: spec.parameter_dim(),
            found: n,
            context: "theta samples",
        }),
    }
}

/// Interaction function `exp(sum_k h_k(r) w_k)` of each sample on `r_grid`.
pub fn interaction_curves(
    spec: &ModelSpec,
    theta_samples: &DMatrix<f64>,
    r_grid: &[f64],
) -> Result<Vec<Vec<f64>>> {
    match spec.interaction {
        InteractionSpec::StepFunction { .. } | InteractionSpec::SmoothBasis { .. } => {}
        ref other => {
            return Err(Error::WrongSpec {
                expected: "step_function or smooth_basis",
                found: other.name(),
            })
        }
    }
    let basis: Vec<Vec<f64>> = r_grid
        .iter()
        .map(|&r| spec.interaction.basis_at(r))
        .collect::<Result<_>>()?;
    (0..theta_samples.nrows())
        .map(|s| {
            let row: Vec<f64> = theta_samples.row(s).iter().copied().collect();
            let w = interaction_weights(spec, &row)?;
            Ok(basis
                .iter()
                .map(|h| h.iter().zip(w).map(|(a, b)| a * b).sum::<f64>().exp())
                .collect())
        })
        .collect()
}

/// Pointwise 95% envelope of the interaction function over posterior draws.
pub fn interaction_curve(
    spec: &ModelSpec,
    theta_samples: &DMatrix<f64>,
    r_grid: &[f64],
) -> Result<CurveEnvelope> {
    let curves = interaction_curves(spec, theta_samples, r_grid)?;
    envelope_from_curves(r_grid, &curves, 0.95)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeEstimate {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    /// More than half of the samples peak at an end of the grid.
    pub boundary_flag: bool,
}

/// Per-sample argmax location (first maximum) summarised by its mean and
/// central 95% interval.
pub fn characteristic_range(r_grid: &[f64], curve_samples: &[Vec<f64>]) -> Result<RangeEstimate> {
    if r_grid.is_empty() || curve_samples.is_empty() {
        return Err(Error::Parameter("empty grid or sample set".into()));
    }
    let last = r_grid.len() - 1;
    let mut at_boundary = 0usize;
    let mut peaks: Vec<f64> = curve_samples
        .iter()
        .map(|c| {
            let mut best = 0;
            for (i, &v) in c.iter().enumerate() {
                if v > c[best] {
                    best = i;
                }
            }
            if best == 0 || best == last {
                at_boundary += 1;
            }
            r_grid[best]
        })
        .collect();
    let mean = peaks.iter().sum::<f64>() / peaks.len() as f64;
    peaks.sort_by(f64::total_cmp);
    Ok(RangeEstimate {
        mean,
        lo: quantile_sorted(&peaks, 0.025),
        hi: quantile_sorted(&peaks, 0.975),
        boundary_flag: 2 * at_boundary > peaks.len(),
    })
}
