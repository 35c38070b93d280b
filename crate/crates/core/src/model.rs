//! Canonical statistics and conditional intensities of exponential-family
//! Gibbs models.
//!
//! A model's coefficient vector is laid out as `[trend block | interaction
//! block]`. The trend block is ordered mark-level major, basis function minor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{parse_reals, NeighborIndex, Point, PointPattern, Window};

/// Squared-exponential basis functions are treated as zero beyond
/// `last centre + SMOOTH_REACH_BANDWIDTHS * bandwidth` (weight < e^-50).
const SMOOTH_REACH_BANDWIDTHS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrendKind {
    Constant,
    /// Monomials in the rescaled vertical coordinate.
    PolyY {
        degree: usize,
    },
    /// All monomials `x^i y^j` with `i + j <= degree`.
    PolyXY {
        degree: usize,
    },
}

impl TrendKind {
    pub fn basis_len(&self) -> usize {
        match *self {
            TrendKind::Constant => 1,
            TrendKind::PolyY { degree } => degree + 1,
            TrendKind::PolyXY { degree } => (degree + 1) * (degree + 2) / 2,
        }
    }
}

impl fmt::Display for TrendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrendKind::Constant => write!(f, "constant"),
            TrendKind::PolyY { degree } => write!(f, "poly-y:{degree}"),
            TrendKind::PolyXY { degree } => write!(f, "poly-xy:{degree}"),
        }
    }
}

impl FromStr for TrendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = s.split_once(':').unwrap_or((s, ""));
        let degree = || {
            arg.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad trend degree in '{s}'")))
        };
        match head.trim() {
            "constant" => Ok(TrendKind::Constant),
            "poly-y" => Ok(TrendKind::PolyY { degree: degree()? }),
            "poly-xy" => Ok(TrendKind::PolyXY { degree: degree()? }),
            _ => Err(Error::Parse(format!(
                "unknown trend '{s}' (constant|poly-y:D|poly-xy:D)"
            ))),
        }
    }
}

/// How the trend is shared between mark levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkTrend {
    /// One trend for all marks.
    Pooled,
    /// Separate intercept per mark, shared non-constant terms
    /// (intensities proportional across marks).
    Proportional,
    /// A full coefficient block per mark.
    Separate,
}

impl fmt::Display for MarkTrend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MarkTrend::Pooled => "pooled",
            MarkTrend::Proportional => "proportional",
            MarkTrend::Separate => "separate",
        })
    }
}

impl FromStr for MarkTrend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pooled" => Ok(MarkTrend::Pooled),
            "proportional" => Ok(MarkTrend::Proportional),
            "separate" => Ok(MarkTrend::Separate),
            _ => Err(Error::Parse(format!(
                "unknown mark trend '{s}' (pooled|proportional|separate)"
            ))),
        }
    }
}

/// First-order (trend) part of the canonical statistic.
///
/// Coordinates are affinely mapped to `[-1, 1]` over `frame` before the
/// monomials are taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendBasis {
    pub kind: TrendKind,
    pub marks: MarkTrend,
    pub frame: Window,
}

impl TrendBasis {
    pub fn constant(frame: Window) -> Self {
        Self {
            kind: TrendKind::Constant,
            marks: MarkTrend::Pooled,
            frame,
        }
    }

    pub fn basis_len(&self) -> usize {
        self.kind.basis_len()
    }

    pub fn row_len(&self, mark_levels: usize) -> usize {
        let b = self.basis_len();
        match self.marks {
            MarkTrend::Pooled => b,
            MarkTrend::Separate => b * mark_levels,
            MarkTrend::Proportional => mark_levels + b - 1,
        }
    }

    fn rescale(v: f64, lo: f64, hi: f64) -> f64 {
        2.0 * (v - lo) / (hi - lo) - 1.0
    }

    /// Basis function values at `u`; the first entry is the constant 1.
    pub fn basis_values(&self, u: Point) -> Vec<f64> {
        let y = Self::rescale(u.y, self.frame.ymin(), self.frame.ymax());
        match self.kind {
            TrendKind::Constant => vec![1.0],
            TrendKind::PolyY { degree } => (0..=degree).map(|k| y.powi(k as i32)).collect(),
            TrendKind::PolyXY { degree } => {
                let x = Self::rescale(u.x, self.frame.xmin(), self.frame.xmax());
                let mut v = Vec::with_capacity(self.basis_len());
                for total in 0..=degree {
                    for j in 0..=total {
                        v.push(x.powi((total - j) as i32) * y.powi(j as i32));
                    }
                }
                v
            }
        }
    }

    /// Writes the trend row for a point of mark `mark` into `out`
    /// (length [`row_len`](Self::row_len)); unrelated blocks are zeroed.
    pub fn fill_row(&self, u: Point, mark: usize, mark_levels: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.row_len(mark_levels));
        out.iter_mut().for_each(|v| *v = 0.0);
        let b = self.basis_values(u);
        match self.marks {
            MarkTrend::Pooled => out.copy_from_slice(&b),
            MarkTrend::Separate => {
                let n = b.len();
                out[mark * n..(mark + 1) * n].copy_from_slice(&b);
            }
            MarkTrend::Proportional => {
                out[mark] = b[0];
                out[mark_levels..].copy_from_slice(&b[1..]);
            }
        }
    }

    /// Columns holding intercept coefficients.
    pub fn intercept_columns(&self, mark_levels: usize) -> Vec<usize> {
        match self.marks {
            MarkTrend::Pooled => vec![0],
            MarkTrend::Separate => (0..mark_levels).map(|m| m * self.basis_len()).collect(),
            MarkTrend::Proportional => (0..mark_levels).collect(),
        }
    }
}

/// Pairwise interaction part of the canonical statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InteractionSpec {
    None,
    /// Count of neighbours within `r`.
    Strauss {
        r: f64,
    },
    /// Count of opposite-mark neighbours within `r`.
    CrossStrauss {
        r: f64,
    },
    /// Step function on the bins `[r_{k-1}, r_k)` of `grid` (`grid[0] == 0`).
    StepFunction {
        grid: Vec<f64>,
    },
    /// Squared-exponential bumps `exp(-(r - c_k)^2 / (2 bandwidth^2))`.
    SmoothBasis {
        centers: Vec<f64>,
        bandwidth: f64,
    },
    /// Lennard-Jones pair potential; simulation only.
    LennardJones {
        epsilon: f64,
        sigma: f64,
        cutoff: f64,
    },
}

impl InteractionSpec {
    /// Step function with `k` equal bins on `[0, r_max)`.
    pub fn step_function(k: usize, r_max: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidSpec("step function needs K >= 1".into()));
        }
        let grid = (0..=k).map(|i| r_max * i as f64 / k as f64).collect();
        let s = InteractionSpec::StepFunction { grid };
        s.validate()?;
        Ok(s)
    }

    /// `k` squared-exponential bumps with centres spread evenly over `[0, r_max]`.
    pub fn smooth_basis(k: usize, r_max: f64, bandwidth: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidSpec("smooth basis needs K >= 2".into()));
        }
        let centers = (0..k).map(|i| r_max * i as f64 / (k - 1) as f64).collect();
        let s = InteractionSpec::SmoothBasis { centers, bandwidth };
        s.validate()?;
        Ok(s)
    }

    /// Lennard-Jones with the conventional truncation at 2.5 sigma.
    pub fn lennard_jones(epsilon: f64, sigma: f64) -> Self {
        InteractionSpec::LennardJones {
            epsilon,
            sigma,
            cutoff: 2.5 * sigma,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InteractionSpec::None => "none",
            InteractionSpec::Strauss { .. } => "strauss",
            InteractionSpec::CrossStrauss { .. } => "cross_strauss",
            InteractionSpec::StepFunction { .. } => "step_function",
            InteractionSpec::SmoothBasis { .. } => "smooth_basis",
            InteractionSpec::LennardJones { .. } => "lennard_jones",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidSpec(format!("{what} must be > 0, got {v}")))
            }
        };
        let increasing = |g: &[f64], what: &str| {
            if g.windows(2).all(|w| w[0] < w[1]) && g.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(Error::InvalidSpec(format!(
                    "{what} must be strictly increasing"
                )))
            }
        };
        match self {
            InteractionSpec::None => Ok(()),
            InteractionSpec::Strauss { r } | InteractionSpec::CrossStrauss { r } => {
                positive(*r, "interaction range")
            }
            InteractionSpec::StepFunction { grid } => {
                if grid.len() < 2 || grid[0] != 0.0 {
                    return Err(Error::InvalidSpec(
                        "step grid must start at 0 and have at least one bin".into(),
                    ));
                }
                increasing(grid, "step grid")
            }
            InteractionSpec::SmoothBasis { centers, bandwidth } => {
                positive(*bandwidth, "bandwidth")?;
                if centers.is_empty() {
                    return Err(Error::InvalidSpec("smooth basis needs centres".into()));
                }
                increasing(centers, "basis centres")
            }
            InteractionSpec::LennardJones {
                epsilon,
                sigma,
                cutoff,
            } => {
                positive(*epsilon, "epsilon")?;
                positive(*sigma, "sigma")?;
                positive(*cutoff, "cutoff")
            }
        }
    }

    /// Length of the interaction block of the coefficient vector.
    pub fn row_len(&self) -> usize {
        match self {
            InteractionSpec::None | InteractionSpec::LennardJones { .. } => 0,
            InteractionSpec::Strauss { .. } | InteractionSpec::CrossStrauss { .. } => 1,
            InteractionSpec::StepFunction { grid } => grid.len() - 1,
            InteractionSpec::SmoothBasis { centers, .. } => centers.len(),
        }
    }

    /// Distance beyond which a pair contributes nothing.
    pub fn reach(&self) -> f64 {
        match self {
            InteractionSpec::None => 0.0,
            InteractionSpec::Strauss { r } | InteractionSpec::CrossStrauss { r } => *r,
            InteractionSpec::StepFunction { grid } => *grid.last().unwrap(),
            InteractionSpec::SmoothBasis { centers, bandwidth } => {
                centers.last().unwrap() + SMOOTH_REACH_BANDWIDTHS * bandwidth
            }
            InteractionSpec::LennardJones { cutoff, .. } => *cutoff,
        }
    }

    /// Basis values `h_k(r)` of the step or smooth expansions.
    pub fn basis_at(&self, r: f64) -> Result<Vec<f64>> {
        let mut row = vec![0.0; self.row_len()];
        match self {
            InteractionSpec::StepFunction { .. } | InteractionSpec::SmoothBasis { .. } => {
                self.accumulate(r, false, &mut row);
                Ok(row)
            }
            other => Err(Error::WrongSpec {
                expected: "step_function or smooth_basis",
                found: other.name(),
            }),
        }
    }

    /// Adds the contribution of one neighbour at distance `d` to `row`.
    /// `same_mark` is only consulted by the cross-type interaction.
    #[inline]
    pub fn accumulate(&self, d: f64, same_mark: bool, row: &mut [f64]) {
        match self {
            InteractionSpec::None | InteractionSpec::LennardJones { .. } => {}
            InteractionSpec::Strauss { r } => {
                if d < *r {
                    row[0] += 1.0;
                }
            }
            InteractionSpec::CrossStrauss { r } => {
                if d < *r && !same_mark {
                    row[0] += 1.0;
                }
            }
            InteractionSpec::StepFunction { grid } => {
                let edges_at_or_below = grid.partition_point(|&g| g <= d);
                if edges_at_or_below >= 1 && edges_at_or_below < grid.len() {
                    row[edges_at_or_below - 1] += 1.0;
                }
            }
            InteractionSpec::SmoothBasis { centers, bandwidth } => {
                let s = 2.0 * bandwidth * bandwidth;
                for (v, c) in row.iter_mut().zip(centers) {
                    *v += (-(d - c) * (d - c) / s).exp();
                }
            }
        }
    }
}

impl fmt::Display for InteractionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InteractionSpec::None => write!(f, "none"),
            InteractionSpec::Strauss { r } => write!(f, "strauss:{r:?}"),
            InteractionSpec::CrossStrauss { r } => write!(f, "cross-strauss:{r:?}"),
            InteractionSpec::StepFunction { grid } => {
                write!(f, "step:{},{:?}", grid.len() - 1, grid.last().unwrap())
            }
            InteractionSpec::SmoothBasis { centers, bandwidth } => write!(
                f,
                "smooth:{},{:?},{:?}",
                centers.len(),
                centers.last().unwrap(),
                bandwidth
            ),
            InteractionSpec::LennardJones {
                epsilon,
                sigma,
                cutoff,
            } => write!(f, "lj:{epsilon:?},{sigma:?},{cutoff:?}"),
        }
    }
}

impl FromStr for InteractionSpec {
    type Err = Error;

    /// `none`, `strauss:R`, `cross-strauss:R`, `step:K,RMAX`,
    /// `smooth:K,RMAX,BW`, `lj:EPS,SIGMA[,CUTOFF]`.
    fn from_str(s: &str) -> Result<Self> {
        let (head, args) = s.split_once(':').unwrap_or((s, ""));
        let nums = || parse_reals(args);
        let arity = |v: &[f64], n: &[usize]| {
            if n.contains(&v.len()) {
                Ok(())
            } else {
                Err(Error::Parse(format!("wrong number of arguments in '{s}'")))
            }
        };
        let count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Parse(format!("bad basis count in '{s}'")))
            }
        };
        let spec = match head.trim() {
            "none" => InteractionSpec::None,
            "strauss" => {
                let v = nums()?;
                arity(&v, &[1])?;
                InteractionSpec::Strauss { r: v[0] }
            }
            "cross-strauss" => {
                let v = nums()?;
                arity(&v, &[1])?;
                InteractionSpec::CrossStrauss { r: v[0] }
            }
            "step" => {
                let v = nums()?;
                arity(&v, &[2])?;
                InteractionSpec::step_function(count(v[0])?, v[1])?
            }
            "smooth" => {
                let v = nums()?;
                arity(&v, &[3])?;
                InteractionSpec::smooth_basis(count(v[0])?, v[1], v[2])?
            }
            "lj" => {
                let v = nums()?;
                arity(&v, &[2, 3])?;
                let mut spec = InteractionSpec::lennard_jones(v[0], v[1]);
                if let (Some(c), InteractionSpec::LennardJones { cutoff, .. }) =
                    (v.get(2), &mut spec)
                {
                    *cutoff = *c;
                }
                spec
            }
            _ => {
                return Err(Error::Parse(format!(
                    "unknown interaction '{s}' (none|strauss:R|cross-strauss:R|step:K,RMAX|smooth:K,RMAX,BW|lj:EPS,SIGMA)"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Full model: trend, interaction, optional hard core and number of marks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub trend: TrendBasis,
    pub interaction: InteractionSpec,
    pub hardcore_radius: Option<f64>,
    pub mark_levels: usize,
}

impl ModelSpec {
    pub fn new(
        trend: TrendBasis,
        interaction: InteractionSpec,
        hardcore_radius: Option<f64>,
        mark_levels: usize,
    ) -> Result<Self> {
        let spec = Self {
            trend,
            interaction,
            hardcore_radius,
            mark_levels,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.interaction.validate()?;
        if self.mark_levels == 0 {
            return Err(Error::InvalidSpec("mark_levels must be >= 1".into()));
        }
        if let Some(h) = self.hardcore_radius {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "hard-core radius must be > 0, got {h}"
                )));
            }
        }
        if matches!(self.interaction, InteractionSpec::CrossStrauss { .. }) && self.mark_levels < 2
        {
            return Err(Error::InvalidSpec(
                "cross-type interaction needs at least two mark levels".into(),
            ));
        }
        if self.mark_levels == 1 && self.trend.marks != MarkTrend::Pooled {
            return Err(Error::InvalidSpec(
                "per-mark trend needs at least two mark levels".into(),
            ));
        }
        Ok(())
    }

    pub fn trend_dim(&self) -> usize {
        self.trend.row_len(self.mark_levels)
    }

    pub fn interaction_dim(&self) -> usize {
        self.interaction.row_len()
    }

    pub fn parameter_dim(&self) -> usize {
        self.trend_dim() + self.interaction_dim()
    }

    /// Distance within which data points influence `t(u; omega)` or `H`.
    pub fn reach(&self) -> f64 {
        self.interaction
            .reach()
            .max(self.hardcore_radius.unwrap_or(0.0))
    }

    pub(crate) fn fitting_check(&self) -> Result<()> {
        match self.interaction {
            InteractionSpec::LennardJones { .. } => {
                Err(Error::UnsupportedForFitting("lennard_jones"))
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn resolve_mark(&self, mark: Option<usize>) -> Result<usize> {
        match mark {
            Some(m) if m < self.mark_levels => Ok(m),
            Some(m) => Err(Error::InvalidSpec(format!(
                "mark {m} out of range for {} levels",
                self.mark_levels
            ))),
            None if self.mark_levels == 1 => Ok(0),
            None => Err(Error::InvalidSpec(
                "a mark is required for multi-type models".into(),
            )),
        }
    }
}

/// Lennard-Jones potential `4 eps [(sigma/r)^12 - (sigma/r)^6]`.
#[inline]
pub fn lennard_jones_potential(epsilon: f64, sigma: f64, r: f64) -> f64 {
    let s6 = (sigma / r).powi(6);
    4.0 * epsilon * (s6 * s6 - s6)
}

/// Interaction function `exp(-potential)` of the Lennard-Jones model on `r_grid`.
pub fn lennard_jones_curve(epsilon: f64, sigma: f64, r_grid: &[f64]) -> Result<Vec<f64>> {
    if !(epsilon > 0.0 && sigma > 0.0) {
        return Err(Error::Domain(format!(
            "epsilon and sigma must be > 0 (got {epsilon}, {sigma})"
        )));
    }
    r_grid
        .iter()
        .map(|&r| {
            if r > 0.0 {
                Ok((-lennard_jones_potential(epsilon, sigma, r)).exp())
            } else {
                Err(Error::Domain(format!("distance must be > 0, got {r}")))
            }
        })
        .collect()
}

/// Distance at which the Lennard-Jones interaction function peaks.
pub fn lennard_jones_peak(sigma: f64) -> f64 {
    2f64.powf(1.0 / 6.0) * sigma
}

/// `sigma` placing the Lennard-Jones peak at `range`.
pub fn lennard_jones_sigma_for_peak(range: f64) -> f64 {
    range / 2f64.powf(1.0 / 6.0)
}

/// Evaluates statistic rows against a fixed data pattern, using a cell grid
/// when the model has finite interaction reach.
pub struct StatisticEvaluator<'a> {
    spec: &'a ModelSpec,
    pattern: &'a PointPattern,
    index: Option<NeighborIndex<'a>>,
}

impl<'a> StatisticEvaluator<'a> {
    pub fn new(spec: &'a ModelSpec, pattern: &'a PointPattern) -> Result<Self> {
        spec.validate()?;
        let reach = spec.reach();
        let index = if reach > 0.0 && !pattern.is_empty() {
            Some(NeighborIndex::build(pattern, reach)?)
        } else {
            None
        };
        Ok(Self {
            spec,
            pattern,
            index,
        })
    }

    fn neighbours<F: FnMut(usize, f64)>(&self, u: Point, r: f64, f: F) {
        if let Some(idx) = &self.index {
            idx.for_each_within(u, r, f);
        }
    }

    /// `H(u; omega)` for the pairwise hard core: false if some other data
    /// point lies strictly within the hard-core radius.
    pub fn hardcore_ok(&self, u: Point, self_index: Option<usize>) -> bool {
        let Some(h) = self.spec.hardcore_radius else {
            return true;
        };
        let mut ok = true;
        self.neighbours(u, h, |j, _| {
            if Some(j) != self_index {
                ok = false;
            }
        });
        ok
    }

    /// Writes `t(u; omega)` into `out`.
    pub fn row_into(
        &self,
        u: Point,
        u_mark: Option<usize>,
        self_index: Option<usize>,
        out: &mut [f64],
    ) -> Result<()> {
        self.spec.fitting_check()?;
        let p = self.spec.parameter_dim();
        if out.len() != p {
            return Err(Error::Dimension {
                expected: p,
                found: out.len(),
                context: "statistic row",
            });
        }
        let mark = self.spec.resolve_mark(u_mark)?;
        let td = self.spec.trend_dim();
        let (trend, inter) = out.split_at_mut(td);
        self.spec
            .trend
            .fill_row(u, mark, self.spec.mark_levels, trend);
        inter.iter_mut().for_each(|v| *v = 0.0);
        let reach = self.spec.interaction.reach();
        if reach > 0.0 {
            self.neighbours(u, reach, |j, d| {
                if Some(j) != self_index {
                    let same = self.pattern.mark(j) == u_mark;
                    self.spec.interaction.accumulate(d, same, inter);
                }
            });
        }
        Ok(())
    }

    pub fn row(
        &self,
        u: Point,
        u_mark: Option<usize>,
        self_index: Option<usize>,
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.spec.parameter_dim()];
        self.row_into(u, u_mark, self_index, &mut out)?;
        Ok(out)
    }
}

/// `t(u; omega) = t(omega ∪ u) - t(omega \ u)`. `self_index` marks `u` as the
/// pattern point of that index.
pub fn statistic_row(
    spec: &ModelSpec,
    pattern: &PointPattern,
    u: Point,
    u_mark: Option<usize>,
    self_index: Option<usize>,
) -> Result<Vec<f64>> {
    StatisticEvaluator::new(spec, pattern)?.row(u, u_mark, self_index)
}

/// The `psi` row of a step or smooth-basis interaction: entry `k` sums
/// `h_k(d_uj)` over data points `j` other than `self_index`.
pub fn interaction_row(
    spec: &ModelSpec,
    pattern: &PointPattern,
    u: Point,
    self_index: Option<usize>,
) -> Result<Vec<f64>> {
    match spec.interaction {
        InteractionSpec::StepFunction { .. } | InteractionSpec::SmoothBasis { .. } => {}
        ref other => {
            return Err(Error::WrongSpec {
                expected: "step_function or smooth_basis",
                found: other.name(),
            })
        }
    }
    let reach = spec.interaction.reach();
    let mut row = vec![0.0; spec.interaction_dim()];
    for (j, p) in pattern.points().iter().enumerate() {
        if Some(j) == self_index {
            continue;
        }
        let d = u.distance(p);
        if d < reach {
            spec.interaction.accumulate(d, false, &mut row);
        }
    }
    Ok(row)
}

/// Papangelou conditional intensity `lambda(u; omega)` with `u` not in the pattern.
pub fn conditional_intensity(
    spec: &ModelSpec,
    theta: &[f64],
    pattern: &PointPattern,
    u: Point,
    u_mark: Option<usize>,
) -> Result<f64> {
    conditional_intensity_excluding(spec, theta, pattern, u, u_mark, None)
}

/// `lambda(u; omega \ {self_index})`.
pub fn conditional_intensity_excluding(
    spec: &ModelSpec,
    theta: &[f64],
    pattern: &PointPattern,
    u: Point,
    u_mark: Option<usize>,
    self_index: Option<usize>,
) -> Result<f64> {
    let p = spec.parameter_dim();
    if theta.len() != p {
        return Err(Error::Dimension {
            expected: p,
            found: theta.len(),
            context: "theta",
        });
    }
    let mark = spec.resolve_mark(u_mark)?;
    let others = pattern
        .points()
        .iter()
        .enumerate()
        .filter(|&(j, _)| Some(j) != self_index);
    if let Some(h) = spec.hardcore_radius {
        if others.clone().any(|(_, q)| u.distance(q) < h) {
            return Ok(0.0);
        }
    }
    let td = spec.trend_dim();
    let mut trend = vec![0.0; td];
    spec.trend.fill_row(u, mark, spec.mark_levels, &mut trend);
    let mut eta: f64 = trend.iter().zip(theta).map(|(a, b)| a * b).sum();
    match &spec.interaction {
        InteractionSpec::LennardJones {
            epsilon,
            sigma,
            cutoff,
        } => {
            for (_, q) in others {
                let d = u.distance(q);
                if d < *cutoff {
                    if d == 0.0 {
                        return Ok(0.0);
                    }
                    eta -= lennard_jones_potential(*epsilon, *sigma, d);
                }
            }
        }
        inter => {
            let reach = inter.reach();
            let mut row = vec![0.0; inter.row_len()];
            for (j, q) in others {
                let d = u.distance(q);
                if d < reach {
                    inter.accumulate(d, pattern.mark(j) == u_mark, &mut row);
                }
            }
            eta += row
                .iter()
                .zip(&theta[td..])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
    }
    Ok(eta.exp())
}
