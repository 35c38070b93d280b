//! Variational Bayes for logistic regression with offsets.
//!
//! Each `-log(1 + e^eta)` term of the log-likelihood is replaced by the
//! quadratic tangent bound `lambda(xi) eta^2 - eta/2 + gamma(xi)`, which is
//! exact at `|eta| = xi`. With a Gaussian prior the bounded joint density is
//! Gaussian in `theta`, giving a closed-form posterior and evidence lower
//! bound. The variational parameters `xi` are refined by EM.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::LogisticDesign;

/// Variance used for the "flat" prior.
pub const FLAT_PRIOR_VARIANCE: f64 = 1e9;

/// Multivariate normal with dense covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct GaussianDistribution {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

impl From<GaussianDistribution> for GaussianRepr {
    fn from(g: GaussianDistribution) -> Self {
        let p = g.dim();
        GaussianRepr {
            mean: g.mean.iter().copied().collect(),
            covariance: (0..p)
                .map(|i| (0..p).map(|j| g.covariance[(i, j)]).collect())
                .collect(),
        }
    }
}

impl TryFrom<GaussianRepr> for GaussianDistribution {
    type Error = Error;

    fn try_from(r: GaussianRepr) -> Result<Self> {
        let p = r.mean.len();
        if r.covariance.len() != p || r.covariance.iter().any(|row| row.len() != p) {
            return Err(Error::Dimension {
                expected: p,
                found: r.covariance.len(),
                context: "covariance rows",
            });
        }
        let cov = DMatrix::from_fn(p, p, |i, j| r.covariance[i][j]);
        GaussianDistribution::new(DVector::from_vec(r.mean), cov)
    }
}

impl GaussianDistribution {
    /// Validates symmetry (1e-10, relative to the largest entry) and
    /// positive definiteness.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        if covariance.nrows() != p || covariance.ncols() != p {
            return Err(Error::Dimension {
                expected: p,
                found: covariance.nrows(),
                context: "covariance",
            });
        }
        let scale = covariance.amax().max(1.0);
        for i in 0..p {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::Numerical(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite Gaussian parameters".into()));
        }
        if Cholesky::new(covariance.clone()).is_none() {
            return Err(Error::Numerical(
                "covariance is not positive definite".into(),
            ));
        }
        Ok(Self { mean, covariance })
    }

    pub fn diagonal(mean: &[f64], variances: &[f64]) -> Result<Self> {
        if mean.len() != variances.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                found: variances.len(),
                context: "prior variances",
            });
        }
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
        )
    }

    /// Zero mean, covariance `1e9 I`.
    pub fn flat(p: usize) -> Self {
        Self {
            mean: DVector::zeros(p),
            covariance: DMatrix::from_diagonal_element(p, p, FLAT_PRIOR_VARIANCE),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn std_devs(&self) -> Vec<f64> {
        self.covariance
            .diagonal()
            .iter()
            .map(|v| v.sqrt())
            .collect()
    }

    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.covariance.clone())
            .ok_or_else(|| Error::Numerical("covariance factorization failed".into()))
    }

    pub fn precision(&self) -> Result<DMatrix<f64>> {
        Ok(symmetrize(self.cholesky()?.inverse()))
    }

    pub fn log_det_covariance(&self) -> Result<f64> {
        Ok(log_det(&self.cholesky()?))
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

/// Numerically stable `log(1 + e^x)`.
#[inline]
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `lambda(xi) = -tanh(xi/2) / (4 xi)`, with the limit `-1/8` at zero.
#[inline]
pub fn lambda_xi(xi: f64) -> f64 {
    let z = 0.5 * xi.abs();
    let tanh_ratio = if z < 1e-4 {
        1.0 - z * z / 3.0
    } else {
        z.tanh() / z
    };
    -0.125 * tanh_ratio
}

/// `gamma(xi) = xi/2 - log(1 + e^xi) + (xi/4) tanh(xi/2)`, the constant that
/// makes the tangent bound exact at `|eta| = xi`.
#[inline]
pub fn gamma_xi(xi: f64) -> f64 {
    let xi = xi.abs();
    // xi/2 - (xi + log1p(e^-xi)) = -xi/2 - log1p(e^-xi)
    -0.5 * xi - (-xi).exp().ln_1p() + 0.25 * xi * (0.5 * xi).tanh()
}

/// Quadratic lower bound on `-log(1 + e^eta)` tangent at `|eta| = xi`.
#[inline]
pub fn log_bound(eta: f64, xi: f64) -> f64 {
    lambda_xi(xi) * eta * eta - 0.5 * eta + gamma_xi(xi)
}

/// Exact logistic log-likelihood with offsets.
pub fn log_likelihood(design: &LogisticDesign, theta: &DVector<f64>) -> f64 {
    let eta = design.linear_predictor(theta);
    eta.iter()
        .zip(design.y.iter())
        .map(|(&e, &y)| y * e - log1p_exp(e))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiInit {
    /// All variational parameters start at 1.
    Ones,
    /// `xi_i = |o_i|`.
    FromOffsets,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub elbo_rel_tolerance: f64,
    pub xi_init: XiInit,
    /// Relative diagonal jitter tried when the posterior precision fails to factor.
    pub jitter: f64,
    /// Safeguarded squared extrapolation of the EM map.
    pub accelerate: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            elbo_rel_tolerance: 1e-8,
            xi_init: XiInit::Ones,
            jitter: 1e-10,
            accelerate: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Parameter("max_iterations must be >= 1".into()));
        }
        if !(self.elbo_rel_tolerance > 0.0) {
            return Err(Error::Parameter("elbo tolerance must be > 0".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Parameter("jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// Output of the EM loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub xi: Vec<f64>,
    pub posterior: GaussianDistribution,
    pub elbo: f64,
    /// Number of ELBO evaluations in the trace.
    pub iteration: usize,
    /// Evaluations of the EM map `xi -> xi'`.
    pub em_updates: usize,
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
}

impl VariationalState {
    /// True if the ELBO trace never drops by more than `rel_slack` (relative).
    pub fn elbo_monotone(&self, rel_slack: f64) -> bool {
        self.elbo_trace
            .windows(2)
            .all(|w| w[1] >= w[0] - rel_slack * w[0].abs().max(1.0))
    }
}

/// Prior quantities reused every iteration.
struct PriorTerms {
    precision: DMatrix<f64>,
    precision_mean: DVector<f64>,
    log_det_cov: f64,
    mean_quad: f64,
}

impl PriorTerms {
    fn new(prior: &GaussianDistribution) -> Result<Self> {
        let chol = prior.cholesky()?;
        let precision = symmetrize(chol.inverse());
        let precision_mean = chol.solve(prior.mean());
        let mean_quad = prior.mean().dot(&precision_mean);
        Ok(Self {
            precision,
            precision_mean,
            log_det_cov: log_det(&chol),
            mean_quad,
        })
    }
}

struct PosteriorParts {
    dist: GaussianDistribution,
    log_det_precision: f64,
    /// `mu^T Sigma^{-1} mu`
    mean_quad: f64,
    lambdas: DVector<f64>,
}

fn check_dims(
    prior: &GaussianDistribution,
    design: &LogisticDesign,
    xi: Option<&[f64]>,
) -> Result<()> {
    if prior.dim() != design.dim() {
        return Err(Error::Dimension {
            expected: design.dim(),
            found: prior.dim(),
            context: "prior dimension",
        });
    }
    if let Some(xi) = xi {
        if xi.len() != design.n_rows() {
            return Err(Error::Dimension {
                expected: design.n_rows(),
                found: xi.len(),
                context: "variational parameters",
            });
        }
    }
    Ok(())
}

fn factor_with_jitter(a: &DMatrix<f64>, jitter: f64) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let p = a.nrows();
    let scale = (a.trace() / p.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut eps = jitter.max(1e-14);
    for _ in 0..8 {
        let mut b = a.clone();
        for i in 0..p {
            b[(i, i)] += eps * scale;
        }
        if let Some(c) = Cholesky::new(b) {
            return Ok(c);
        }
        eps *= 100.0;
    }
    let diag = a.diagonal();
    Err(Error::Numerical(format!(
        "posterior precision not positive definite after jitter (diagonal range {:.3e}..{:.3e})",
        diag.min(),
        diag.max()
    )))
}

fn posterior_parts(
    terms: &PriorTerms,
    design: &LogisticDesign,
    xi: &[f64],
    jitter: f64,
) -> Result<PosteriorParts> {
    let n = design.n_rows();
    let lambdas = DVector::from_iterator(n, xi.iter().map(|&v| lambda_xi(v)));
    // Sigma^{-1} = Sigma_0^{-1} - 2 X^T Lambda X
    let mut weighted = design.x.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= -2.0 * lambdas[i];
    }
    let precision = symmetrize(&terms.precision + design.x.tr_mul(&weighted));
    // (y - 1/2 + 2 Lambda o)^T X + mu_0^T Sigma_0^{-1}
    let resid = DVector::from_fn(n, |i, _| {
        design.y[i] - 0.5 + 2.0 * lambdas[i] * design.offset[i]
    });
    let rhs = design.x.tr_mul(&resid) + &terms.precision_mean;
    let chol = factor_with_jitter(&precision, jitter)?;
    let mean = chol.solve(&rhs);
    let covariance = symmetrize(chol.inverse());
    let mean_quad = mean.dot(&rhs);
    let log_det_precision = log_det(&chol);
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite posterior mean".into()));
    }
    Ok(PosteriorParts {
        dist: GaussianDistribution { mean, covariance },
        log_det_precision,
        mean_quad,
        lambdas,
    })
}

fn elbo_from_parts(
    terms: &PriorTerms,
    design: &LogisticDesign,
    xi: &[f64],
    parts: &PosteriorParts,
) -> f64 {
    let gamma_sum: f64 = xi.iter().map(|&v| gamma_xi(v)).sum();
    let mut offset_terms = 0.0;
    for i in 0..design.n_rows() {
        let o = design.offset[i];
        offset_terms += parts.lambdas[i] * o * o + (design.y[i] - 0.5) * o;
    }
    -0.5 * parts.log_det_precision - 0.5 * terms.log_det_cov + gamma_sum + 0.5 * parts.mean_quad
        - 0.5 * terms.mean_quad
        + offset_terms
}

/// Closed-form Gaussian posterior of the bounded model for fixed `xi`.
pub fn update_posterior(
    prior: &GaussianDistribution,
    design: &LogisticDesign,
    xi: &[f64],
) -> Result<GaussianDistribution> {
    check_dims(prior, design, Some(xi))?;
    let terms = PriorTerms::new(prior)?;
    Ok(posterior_parts(&terms, design, xi, FitOptions::default().jitter)?.dist)
}

/// EM update `xi_i = sqrt(x_i^T Sigma x_i + (x_i^T mu + o_i)^2)`, row by row.
pub fn update_xi(design: &LogisticDesign, posterior: &GaussianDistribution) -> Result<Vec<f64>> {
    if posterior.dim() != design.dim() {
        return Err(Error::Dimension {
            expected: design.dim(),
            found: posterior.dim(),
            context: "posterior dimension",
        });
    }
    let xs = &design.x * posterior.covariance();
    let eta = design.linear_predictor(posterior.mean());
    Ok((0..design.n_rows())
        .map(|i| {
            let var = design.x.row(i).dot(&xs.row(i)).max(0.0);
            (var + eta[i] * eta[i]).sqrt()
        })
        .collect())
}

/// Evidence lower bound for the state's `xi` (the posterior is recomputed
/// from `xi`, so the value is the bound the EM loop maximises).
pub fn elbo(
    prior: &GaussianDistribution,
    design: &LogisticDesign,
    state: &VariationalState,
) -> Result<f64> {
    elbo_at(prior, design, &state.xi)
}

/// Evidence lower bound as a function of `xi`.
pub fn elbo_at(prior: &GaussianDistribution, design: &LogisticDesign, xi: &[f64]) -> Result<f64> {
    check_dims(prior, design, Some(xi))?;
    let terms = PriorTerms::new(prior)?;
    let parts = posterior_parts(&terms, design, xi, FitOptions::default().jitter)?;
    Ok(elbo_from_parts(&terms, design, xi, &parts))
}

/// Runs the EM loop until the relative ELBO increase falls below the
/// tolerance or the iteration cap is reached.
///
/// With `accelerate`, each iteration takes two EM updates and then tries a
/// squared extrapolation of `xi` (followed by one more EM update). The
/// extrapolated point is kept only if its ELBO beats the plain double step,
/// so the trace stays non-decreasing and the fixed points are those of EM.
pub fn fit(
    prior: &GaussianDistribution,
    design: &LogisticDesign,
    options: &FitOptions,
) -> Result<VariationalState> {
    options.validate()?;
    check_dims(prior, design, None)?;
    let terms = PriorTerms::new(prior)?;
    let mut em_updates = 0usize;
    let eval = |xi: &[f64]| -> Result<(PosteriorParts, f64)> {
        let parts = posterior_parts(&terms, design, xi, options.jitter)?;
        let value = elbo_from_parts(&terms, design, xi, &parts);
        if !value.is_finite() {
            return Err(Error::Numerical("non-finite ELBO".into()));
        }
        Ok((parts, value))
    };
    let mut xi: Vec<f64> = match options.xi_init {
        XiInit::Ones => vec![1.0; design.n_rows()],
        XiInit::FromOffsets => design.offset.iter().map(|o| o.abs()).collect(),
    };
    let (mut parts, mut value) = eval(&xi)?;
    let mut trace = vec![value];
    let mut converged = false;
    while trace.len() < options.max_iterations {
        let xi1 = update_xi(design, &parts.dist)?;
        em_updates += 1;
        let (parts1, value1) = eval(&xi1)?;
        let (next_xi, next_parts, next_value) = if options.accelerate {
            let xi2 = update_xi(design, &parts1.dist)?;
            em_updates += 1;
            let (parts2, value2) = eval(&xi2)?;
            let mut best = (xi2, parts2, value2);
            if let Some(xe) = extrapolate(&xi, &xi1, &best.0) {
                if let Ok((pe, _)) = eval(&xe) {
                    let xs = update_xi(design, &pe.dist)?;
                    em_updates += 1;
                    if let Ok((ps, vs)) = eval(&xs) {
                        if vs > best.2 {
                            best = (xs, ps, vs);
                        }
                    }
                }
            }
            best
        } else {
            (xi1, parts1, value1)
        };
        let rel = (next_value - value) / value.abs().max(f64::MIN_POSITIVE);
        xi = next_xi;
        parts = next_parts;
        value = next_value;
        trace.push(value);
        if rel < options.elbo_rel_tolerance {
            converged = true;
            break;
        }
    }
    Ok(VariationalState {
        xi,
        posterior: parts.dist,
        elbo: value,
        iteration: trace.len(),
        em_updates,
        elbo_trace: trace,
        converged,
    })
}

/// Squared extrapolation `x0 - 2 a r + a^2 v` with `r = x1 - x0`,
/// `v = x2 - 2 x1 + x0` and step `a = -max(1, |r| / |v|)`.
fn extrapolate(x0: &[f64], x1: &[f64], x2: &[f64]) -> Option<Vec<f64>> {
    let (mut rr, mut vv) = (0.0, 0.0);
    for i in 0..x0.len() {
        let r = x1[i] - x0[i];
        let v = x2[i] - 2.0 * x1[i] + x0[i];
        rr += r * r;
        vv += v * v;
    }
    if !(vv > 0.0) {
        return None;
    }
    let a = -(rr / vv).sqrt().max(1.0);
    if a == -1.0 {
        return None;
    }
    // the bound depends on xi only through |xi|
    Some(
        (0..x0.len())
            .map(|i| {
                let r = x1[i] - x0[i];
                let v = x2[i] - 2.0 * x1[i] + x0[i];
                (x0[i] - 2.0 * a * r + a * a * v).abs()
            })
            .collect(),
    )
}

/// Maximum-likelihood fit by iteratively reweighted least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrlsFit {
    pub theta: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    pub diagnostic: Option<String>,
}

/// A column vanishing on one response class and one-signed on the other
/// pushes its coefficient to infinity.
fn one_sided_column(design: &LogisticDesign) -> Option<usize> {
    (0..design.dim()).find(|&c| {
        let col = design.x.column(c);
        [0.0, 1.0].iter().any(|&cls| {
            let (mut pos, mut neg, mut other) = (false, false, false);
            for (i, &v) in col.iter().enumerate() {
                if design.y[i] == cls {
                    other |= v != 0.0;
                } else {
                    pos |= v > 0.0;
                    neg |= v < 0.0;
                }
            }
            !other && (pos != neg)
        })
    })
}

/// Newton/IRLS for logistic regression with offsets, with step halving.
/// Perfect separation, or a coefficient whose MLE is infinite, is reported
/// through `converged = false` and a diagnostic.
pub fn irls_fit(design: &LogisticDesign) -> Result<IrlsFit> {
    const MAX_ITER: usize = 100;
    const TOL: f64 = 1e-12;
    const DIVERGED_NORM: f64 = 1e6;
    let (n, p) = (design.n_rows(), design.dim());
    if n <= p {
        return Err(Error::Parameter(format!(
            "IRLS needs more rows than parameters ({n} <= {p})"
        )));
    }
    let mut theta = DVector::zeros(p);
    let mut ll = log_likelihood(design, &theta);
    let mut converged = false;
    let mut diagnostic = None;
    let mut iterations = 0;
    let mut information = DMatrix::identity(p, p);
    for it in 1..=MAX_ITER {
        iterations = it;
        let eta = design.linear_predictor(&theta);
        let prob = eta.map(logistic);
        let mut wx = design.x.clone();
        for (i, mut row) in wx.row_iter_mut().enumerate() {
            row *= prob[i] * (1.0 - prob[i]);
        }
        information = symmetrize(design.x.tr_mul(&wx));
        let score = design.x.tr_mul(&(&design.y - &prob));
        let Some(chol) = Cholesky::new(information.clone()) else {
            diagnostic = Some(format!(
                "information matrix singular at iteration {it} (|theta| = {:.3e}); possible separation",
                theta.norm()
            ));
            break;
        };
        let step = chol.solve(&score);
        let mut scale = 1.0;
        let mut next = &theta + &step;
        let mut next_ll = log_likelihood(design, &next);
        let mut halvings = 0;
        while !(next_ll >= ll - 1e-12 * ll.abs()) && halvings < 40 {
            scale *= 0.5;
            next = &theta + &step * scale;
            next_ll = log_likelihood(design, &next);
            halvings += 1;
        }
        let change = (next_ll - ll).abs() / (ll.abs() + 0.1);
        theta = next;
        ll = next_ll;
        if theta.norm() > DIVERGED_NORM || !ll.is_finite() {
            diagnostic = Some(format!(
                "coefficient norm diverging ({:.3e}); likely perfect separation",
                theta.norm()
            ));
            break;
        }
        if change < TOL {
            converged = true;
            break;
        }
    }
    if converged {
        let eta = design.linear_predictor(&theta);
        let worst = eta
            .iter()
            .zip(design.y.iter())
            .map(|(&e, &y)| (y - logistic(e)).abs())
            .fold(0.0, f64::max);
        if worst < 1e-8 {
            converged = false;
            diagnostic = Some(format!(
                "every row fitted exactly (|theta| = {:.3e} and growing); perfect separation",
                theta.norm()
            ));
        }
    }
    if let Some(c) = one_sided_column(design) {
        if converged || diagnostic.is_none() {
            diagnostic = Some(format!(
                "column {c} is zero on every y = 1 row and one-signed elsewhere; \
                 the MLE of coefficient {c} is infinite (quasi-separation)"
            ));
        }
        converged = false;
    }
    let std_errors = match Cholesky::new(information) {
        Some(c) => c.inverse().diagonal().iter().map(|v| v.sqrt()).collect(),
        None => vec![f64::NAN; p],
    };
    Ok(IrlsFit {
        theta: theta.iter().copied().collect(),
        std_errors,
        converged,
        iterations,
        log_likelihood: ll,
        diagnostic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// The bound constant as printed with tanh(xi/4).
    fn gamma_printed(xi: f64) -> f64 {
        xi / 2.0 - log1p_exp(xi) + xi / 4.0 * (xi / 4.0).tanh()
    }

    fn design(y: &[f64], x: DMatrix<f64>, o: &[f64]) -> LogisticDesign {
        LogisticDesign::new(
            DVector::from_column_slice(y),
            x,
            DVector::from_column_slice(o),
        )
        .unwrap()
    }

    fn synthetic(n: usize, theta: &[f64], seed: u64) -> LogisticDesign {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = theta.len();
        let x = DMatrix::from_fn(n, p, |_, j| {
            if j == 0 {
                1.0
            } else {
                rng.sample::<f64, _>(StandardNormal)
            }
        });
        let o: Vec<f64> = (0..n)
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let t = DVector::from_column_slice(theta);
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let e = x.row(i).dot(&t.transpose()) + o[i];
                if rng.random::<f64>() < logistic(e) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        design(&y, x, &o)
    }

    #[test]
    fn lambda_values() {
        assert_eq!(lambda_xi(0.0), -0.125);
        assert!((lambda_xi(1e-9) + 0.125).abs() < 1e-15);
        assert!((lambda_xi(2.0) - (-(1f64.tanh()) / 8.0)).abs() < 1e-15);
        assert!((lambda_xi(2.0) + 0.0951985).abs() < 1e-6);
        assert!((lambda_xi(1e6) + 2.5e-7).abs() < 1e-15);
        let mut prev = lambda_xi(0.0);
        for k in 1..200 {
            let v = lambda_xi(k as f64 * 0.1);
            assert!(v > prev && v < 0.0 && v > -0.125);
            prev = v;
        }
    }

    #[test]
    fn gamma_values_and_tangency() {
        assert!((gamma_xi(0.0) + 2f64.ln()).abs() < 1e-15);
        assert!(gamma_xi(50.0).is_finite());
        assert!(gamma_xi(1e6).is_finite());
        let xi = 1.3;
        assert!((log_bound(xi, xi) + log1p_exp(xi)).abs() < 1e-12);
        assert!((log_bound(-xi, xi) + log1p_exp(-xi)).abs() < 1e-12);
        assert!((log_bound(0.0, 0.0) + 2f64.ln()).abs() < 1e-15);
        assert!(log_bound(3.0, 1.0) < -log1p_exp(3.0));
        assert!((-log1p_exp(3.0) + 3.0486).abs() < 1e-4);
    }

    #[test]
    fn printed_gamma_is_not_tangent() {
        let xi: f64 = 1.3;
        let printed = lambda_xi(xi) * xi * xi - 0.5 * xi + gamma_printed(xi);
        assert!((printed + log1p_exp(xi)).abs() > 1e-3);
    }

    #[test]
    fn bound_is_sound_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            let eta: f64 = rng.random_range(-20.0..20.0);
            let xi: f64 = rng.random_range(0.0..20.0);
            assert!(log_bound(eta, xi) <= -log1p_exp(eta) + 1e-12);
        }
    }

    #[test]
    fn posterior_without_information_is_prior() {
        let prior = GaussianDistribution::diagonal(&[1.0, -2.0], &[2.0, 3.0]).unwrap();
        let d = design(&[1.0, 0.0, 1.0], DMatrix::zeros(3, 2), &[0.0, 0.0, 0.0]);
        let post = update_posterior(&prior, &d, &[0.3, 1.0, 2.0]).unwrap();
        assert!((post.mean() - prior.mean()).amax() < 1e-12);
        assert!((post.covariance() - prior.covariance()).amax() < 1e-12);
        assert_eq!(
            update_xi(
                &d,
                &GaussianDistribution::diagonal(&[0.0, 0.0], &[1.0, 1.0]).unwrap()
            )
            .unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn posterior_hand_evaluation() {
        let prior = GaussianDistribution::diagonal(&[0.0], &[1e6]).unwrap();
        let d = design(&[1.0], DMatrix::from_element(1, 1, 1.0), &[0.0]);
        let post = update_posterior(&prior, &d, &[0.0]).unwrap();
        let prec = 1e-6 + 0.25;
        assert!((post.covariance()[(0, 0)] - 1.0 / prec).abs() < 1e-12);
        assert!((post.mean()[0] - 0.5 / prec).abs() < 1e-12);
        assert!((post.mean()[0] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn posterior_covariance_contracts() {
        let d = synthetic(60, &[0.2, -1.0, 0.5], 3);
        let prior = GaussianDistribution::diagonal(&[0.0, 0.0, 0.0], &[4.0, 1.0, 9.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xi: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..5.0)).collect();
        let post = update_posterior(&prior, &d, &xi).unwrap();
        let diff = prior.covariance() - post.covariance();
        let eig = diff.symmetric_eigenvalues();
        assert!(eig.min() >= -1e-10);
    }

    #[test]
    fn per_row_xi_matches_dense_formula() {
        let d = synthetic(7, &[0.3, 0.8], 5);
        let post = GaussianDistribution::new(
            DVector::from_vec(vec![0.4, -0.2]),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
        )
        .unwrap();
        let xi = update_xi(&d, &post).unwrap();
        let (x, o, mu, s) = (&d.x, &d.offset, post.mean(), post.covariance());
        let dense = x * (s + mu * mu.transpose()) * x.transpose()
            + o * o.transpose()
            + (x * mu) * o.transpose() * 2.0;
        for i in 0..7 {
            assert!((xi[i] * xi[i] - dense[(i, i)]).abs() < 1e-12);
        }
        // point-mass posterior gives the tangency condition
        let tiny = GaussianDistribution::diagonal(&[0.4, -0.2], &[1e-300, 1e-300]).unwrap();
        let xi = update_xi(&d, &tiny).unwrap();
        let eta = d.linear_predictor(tiny.mean());
        for i in 0..7 {
            assert!((xi[i] - eta[i].abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn elbo_of_uninformative_design_is_exact() {
        let prior = GaussianDistribution::diagonal(&[0.3], &[2.0]).unwrap();
        let d = design(&[1.0, 0.0, 0.0, 1.0, 1.0], DMatrix::zeros(5, 1), &[0.0; 5]);
        let v = elbo_at(&prior, &d, &[0.0; 5]).unwrap();
        assert!((v + 5.0 * 2f64.ln()).abs() < 1e-12);
    }

    /// log of the exact evidence by trapezoidal quadrature over a 1-D grid.
    fn log_evidence_1d(d: &LogisticDesign, prior_mean: f64, prior_var: f64) -> f64 {
        let (lo, hi, m) = (-10.0, 10.0, 20_001);
        let h = (hi - lo) / (m - 1) as f64;
        let logs: Vec<f64> = (0..m)
            .map(|k| {
                let t = lo + k as f64 * h;
                let lp = -0.5 * (t - prior_mean).powi(2) / prior_var
                    - 0.5 * (2.0 * std::f64::consts::PI * prior_var).ln();
                log_likelihood(d, &DVector::from_element(1, t)) + lp
            })
            .collect();
        let mx = logs.iter().cloned().fold(f64::MIN, f64::max);
        let s: f64 = logs
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let w = if k == 0 || k == m - 1 { 0.5 } else { 1.0 };
                w * (l - mx).exp()
            })
            .sum();
        mx + (s * h).ln()
    }

    #[test]
    fn elbo_below_quadrature_evidence() {
        let d = synthetic(40, &[0.7], 6);
        let prior = GaussianDistribution::diagonal(&[0.0], &[4.0]).unwrap();
        let truth = log_evidence_1d(&d, 0.0, 4.0);
        let state = fit(&prior, &d, &FitOptions::default()).unwrap();
        assert!(state.elbo <= truth);
        assert!(truth - state.elbo < 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let xi: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..4.0)).collect();
            assert!(elbo_at(&prior, &d, &xi).unwrap() <= truth);
        }
    }

    #[test]
    fn fit_is_monotone_and_close_to_mle() {
        let d = synthetic(500, &[-0.5, 1.0, -0.7], 8);
        let state = fit(&GaussianDistribution::flat(3), &d, &FitOptions::default()).unwrap();
        assert!(state.converged);
        assert!(state.elbo_monotone(1e-8));
        assert!(state.elbo >= state.elbo_trace[0]);
        let ml = irls_fit(&d).unwrap();
        assert!(ml.converged);
        for k in 0..3 {
            let rel = (state.posterior.mean()[k] - ml.theta[k]).abs() / ml.theta[k].abs();
            assert!(rel < 0.05, "coordinate {k}: {rel}");
        }
        let again = fit(&GaussianDistribution::flat(3), &d, &FitOptions::default()).unwrap();
        assert_eq!(again, state);
    }

    #[test]
    fn tight_prior_dominates() {
        let d = synthetic(300, &[0.5, -1.0], 9);
        let prior = GaussianDistribution::diagonal(&[2.0, 3.0], &[1e-6, 1e-6]).unwrap();
        let state = fit(&prior, &d, &FitOptions::default()).unwrap();
        assert!((state.posterior.mean()[0] - 2.0).abs() < 1e-2);
        assert!((state.posterior.mean()[1] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn irls_intercept_only_closed_form() {
        let y = [1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let d = design(&y, DMatrix::from_element(8, 1, 1.0), &[0.0; 8]);
        let f = irls_fit(&d).unwrap();
        let m = 5.0 / 8.0;
        assert!(f.converged);
        assert!((f.theta[0] - (m / (1.0 - m) as f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn irls_recovers_truth_within_standard_errors() {
        let truth = [0.4, -0.9];
        let d = synthetic(2000, &truth, 10);
        let f = irls_fit(&d).unwrap();
        for k in 0..2 {
            assert!((f.theta[k] - truth[k]).abs() < 3.0 * f.std_errors[k]);
        }
    }

    #[test]
    fn irls_flags_separation() {
        let x = DMatrix::from_row_slice(
            6,
            2,
            &[
                1.0, -3.0, 1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0,
            ],
        );
        let d = design(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], x, &[0.0; 6]);
        let f = irls_fit(&d).unwrap();
        assert!(!f.converged);
        assert!(f.diagnostic.is_some());
    }

    #[test]
    fn irls_flags_one_sided_column() {
        // second column counts neighbours: zero on every data row
        let x = DMatrix::from_row_slice(
            8,
            2,
            &[
                1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0,
            ],
        );
        let d = design(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0], x, &[0.0; 8]);
        let f = irls_fit(&d).unwrap();
        assert!(!f.converged);
        assert!(f.diagnostic.unwrap().contains("column 1"));
        let ok = synthetic(500, &[0.2, -0.5], 3);
        assert!(irls_fit(&ok).unwrap().converged);
    }

    #[test]
    fn gaussian_validation_and_serde() {
        assert!(GaussianDistribution::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0])
        )
        .is_err());
        assert!(GaussianDistribution::diagonal(&[0.0], &[-1.0]).is_err());
        let g = GaussianDistribution::new(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        let s = serde_json::to_string(&g).unwrap();
        let back: GaussianDistribution = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn dimension_errors() {
        let d = design(&[1.0], DMatrix::from_element(1, 1, 1.0), &[0.0]);
        let prior = GaussianDistribution::flat(2);
        assert!(matches!(
            fit(&prior, &d, &FitOptions::default()),
            Err(Error::Dimension { .. })
        ));
        assert!(update_posterior(&GaussianDistribution::flat(1), &d, &[1.0, 2.0]).is_err());
        let bad = FitOptions {
            max_iterations: 0,
            ..FitOptions::default()
        };
        assert!(fit(&GaussianDistribution::flat(1), &d, &bad).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bound_tight_at_abs_eta(eta in -20.0f64..20.0) {
                prop_assert!((log_bound(eta, eta.abs()) + log1p_exp(eta)).abs() < 1e-10);
            }

            #[test]
            fn bound_below_truth(eta in -30.0f64..30.0, xi in 0.0f64..30.0) {
                prop_assert!(log_bound(eta, xi) <= -log1p_exp(eta) + 1e-12);
            }
        }
    }
}
