//! Poisson and pairwise-interaction Gibbs pattern simulation.
//!
//! Gibbs patterns come from a birth-death Metropolis-Hastings chain driven by
//! the Papangelou conditional intensity. Replicate `k` of a study with root
//! seed `s` uses seed [`replicate_seed`]`(s, k)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pair_distance, Point, PointPattern, Window};
use crate::model::{lennard_jones_potential, InteractionSpec, ModelSpec};
use crate::quadrature::uniform_points;

/// Seed of replicate `index` derived from `root`.
pub fn replicate_seed(root: u64, index: u64) -> u64 {
    root.wrapping_add(index)
}

/// Interaction range `0.7 * R_max` from the hard-packing limit
/// `R_max = 2 sqrt(2 / (pi^2 lambda))`.
pub fn pack_range_rule(intensity_guess: f64) -> f64 {
    0.7 * 2.0 * (2.0 / (std::f64::consts::PI.powi(2) * intensity_guess)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialPattern {
    /// Poisson pattern with intensity `exp(theta[0])`.
    Poisson,
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcOptions {
    pub burn_in_steps: usize,
    pub initial_pattern: InitialPattern,
    pub seed: u64,
}

impl Default for McmcOptions {
    fn default() -> Self {
        Self {
            burn_in_steps: 100_000,
            initial_pattern: InitialPattern::Poisson,
            seed: 0,
        }
    }
}

fn poisson_count<R: Rng>(rng: &mut R, mean: f64) -> Result<usize> {
    if mean == 0.0 {
        return Ok(0);
    }
    Ok(Poisson::new(mean)
        .map_err(|e| Error::Parameter(format!("poisson mean {mean}: {e}")))?
        .sample(rng) as usize)
}

/// Homogeneous Poisson pattern.
pub fn sample_poisson(window: &Window, intensity: f64, seed: u64) -> Result<PointPattern> {
    if !(intensity > 0.0 && intensity.is_finite()) {
        return Err(Error::Parameter(format!(
            "intensity must be > 0, got {intensity}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = poisson_count(&mut rng, intensity * window.volume())?;
    PointPattern::new(uniform_points(&mut rng, window, n), None, *window)
}

/// Mutable cell grid used by the chain.
struct DynamicGrid {
    xmin: f64,
    ymin: f64,
    cell: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<usize>>,
}

impl DynamicGrid {
    fn new(window: &Window, reach: f64) -> Self {
        let (nx, ny) = if reach > 0.0 {
            (
                ((window.width() / reach).floor() as usize).clamp(1, 1024),
                ((window.height() / reach).floor() as usize).clamp(1, 1024),
            )
        } else {
            (1, 1)
        };
        let cell = (window.width() / nx as f64).max(window.height() / ny as f64);
        Self {
            xmin: window.xmin(),
            ymin: window.ymin(),
            cell,
            nx,
            ny,
            cells: vec![Vec::new(); nx * ny],
        }
    }

    fn axis(&self, v: f64, lo: f64, n: usize) -> usize {
        let c = ((v - lo) / self.cell).floor();
        if c <= 0.0 {
            0
        } else {
            (c as usize).min(n - 1)
        }
    }

    fn cell_of(&self, p: Point) -> usize {
        self.axis(p.y, self.ymin, self.ny) * self.nx + self.axis(p.x, self.xmin, self.nx)
    }

    fn for_each_near<F: FnMut(usize)>(&self, u: Point, r: f64, mut f: F) {
        let x0 = self.axis(u.x - r, self.xmin, self.nx);
        let x1 = self.axis(u.x + r, self.xmin, self.nx);
        let y0 = self.axis(u.y - r, self.ymin, self.ny);
        let y1 = self.axis(u.y + r, self.ymin, self.ny);
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                for &j in &self.cells[cy * self.nx + cx] {
                    f(j);
                }
            }
        }
    }
}

/// Birth-death Metropolis-Hastings sampler for a Gibbs model.
pub struct GibbsSampler<'a> {
    spec: &'a ModelSpec,
    theta: &'a [f64],
    window: Window,
    rng: ChaCha8Rng,
    points: Vec<Point>,
    marks: Vec<usize>,
    grid: DynamicGrid,
    scratch: Vec<f64>,
    trend: Vec<f64>,
}

impl<'a> GibbsSampler<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        theta: &'a [f64],
        window: Window,
        options: &McmcOptions,
    ) -> Result<Self> {
        spec.validate()?;
        let p = spec.parameter_dim();
        if theta.len() != p {
            return Err(Error::Dimension {
                expected: p,
                found: theta.len(),
                context: "theta",
            });
        }
        check_stability(spec, theta)?;
        let mut sampler = Self {
            spec,
            theta,
            window,
            rng: ChaCha8Rng::seed_from_u64(options.seed),
            points: Vec::new(),
            marks: Vec::new(),
            grid: DynamicGrid::new(&window, spec.reach()),
            scratch: vec![0.0; spec.interaction_dim()],
            trend: vec![0.0; spec.trend_dim()],
        };
        if options.initial_pattern == InitialPattern::Poisson {
            let mean = theta.first().map_or(0.0, |t| t.exp()) * window.volume();
            let n = poisson_count(&mut sampler.rng, mean)?;
            for _ in 0..n {
                let u = sampler.uniform_location();
                let m = sampler.rng.random_range(0..spec.mark_levels);
                sampler.insert(u, m);
            }
        }
        Ok(sampler)
    }

    fn uniform_location(&mut self) -> Point {
        let w = self.window;
        Point::new(
            w.xmin() + self.rng.random::<f64>() * w.width(),
            w.ymin() + self.rng.random::<f64>() * w.height(),
        )
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    fn insert(&mut self, u: Point, mark: usize) {
        let idx = self.points.len();
        self.points.push(u);
        self.marks.push(mark);
        let c = self.grid.cell_of(u);
        self.grid.cells[c].push(idx);
    }

    fn remove(&mut self, i: usize) {
        let c = self.grid.cell_of(self.points[i]);
        let pos = self.grid.cells[c].iter().position(|&j| j == i).unwrap();
        self.grid.cells[c].swap_remove(pos);
        let last = self.points.len() - 1;
        if i != last {
            let cl = self.grid.cell_of(self.points[last]);
            let pos = self.grid.cells[cl].iter().position(|&j| j == last).unwrap();
            self.grid.cells[cl][pos] = i;
        }
        self.points.swap_remove(i);
        self.marks.swap_remove(i);
    }

    /// `lambda(u, mark; omega \ skip)`.
    fn intensity(&mut self, u: Point, mark: usize, skip: Option<usize>) -> f64 {
        let spec = self.spec;
        if let Some(h) = spec.hardcore_radius {
            let mut blocked = false;
            let pts = &self.points;
            self.grid.for_each_near(u, h, |j| {
                if Some(j) != skip && pair_distance(u, pts[j]) < h {
                    blocked = true;
                }
            });
            if blocked {
                return 0.0;
            }
        }
        spec.trend
            .fill_row(u, mark, spec.mark_levels, &mut self.trend);
        let td = self.trend.len();
        let mut eta: f64 = self.trend.iter().zip(self.theta).map(|(a, b)| a * b).sum();
        let reach = spec.interaction.reach();
        let (pts, marks) = (&self.points, &self.marks);
        match &spec.interaction {
            InteractionSpec::None => {}
            InteractionSpec::LennardJones { epsilon, sigma, .. } => {
                let mut energy = 0.0;
                self.grid.for_each_near(u, reach, |j| {
                    if Some(j) != skip {
                        let d = pair_distance(u, pts[j]);
                        if d < reach {
                            energy += if d > 0.0 {
                                lennard_jones_potential(*epsilon, *sigma, d)
                            } else {
                                f64::INFINITY
                            };
                        }
                    }
                });
                eta -= energy;
            }
            inter => {
                let row = &mut self.scratch;
                row.iter_mut().for_each(|v| *v = 0.0);
                self.grid.for_each_near(u, reach, |j| {
                    if Some(j) != skip {
                        let d = pair_distance(u, pts[j]);
                        if d < reach {
                            inter.accumulate(d, marks[j] == mark, row);
                        }
                    }
                });
                eta += row
                    .iter()
                    .zip(&self.theta[td..])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
        }
        eta.exp()
    }

    /// One birth or death proposal. Returns whether it was accepted.
    pub fn step(&mut self) -> Result<bool> {
        let v = self.window.volume();
        let levels = self.spec.mark_levels as f64;
        let n = self.points.len();
        if self.rng.random::<f64>() < 0.5 {
            let u = self.uniform_location();
            let mark = self.rng.random_range(0..self.spec.mark_levels);
            let lam = self.intensity(u, mark, None);
            if !lam.is_finite() {
                return Err(Error::Numerical(format!(
                    "conditional intensity {lam} at ({}, {})",
                    u.x, u.y
                )));
            }
            let ratio = lam * v * levels / (n + 1) as f64;
            if self.rng.random::<f64>() < ratio {
                self.insert(u, mark);
                return Ok(true);
            }
        } else if n > 0 {
            let i = self.rng.random_range(0..n);
            let (u, mark) = (self.points[i], self.marks[i]);
            let lam = self.intensity(u, mark, Some(i));
            if lam.is_nan() {
                return Err(Error::Numerical("conditional intensity is NaN".into()));
            }
            let ratio = n as f64 / (v * levels * lam);
            if self.rng.random::<f64>() < ratio {
                self.remove(i);
                return Ok(true);
            }
        }
        Ok(false)
    }

    pub fn run(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    /// Current state, in the chain's internal order.
    pub fn pattern(&self) -> Result<PointPattern> {
        let marks = (self.spec.mark_levels > 1).then(|| self.marks.clone());
        PointPattern::new(self.points.clone(), marks, self.window)
    }
}

fn check_stability(spec: &ModelSpec, theta: &[f64]) -> Result<()> {
    let inter = &theta[spec.trend_dim()..];
    match spec.interaction {
        InteractionSpec::Strauss { .. } | InteractionSpec::CrossStrauss { .. }
            if inter[0] > 0.0 =>
        {
            Err(Error::UnstableModel(format!(
                "interaction parameter {} > 0 has no valid Strauss density",
                inter[0]
            )))
        }
        InteractionSpec::StepFunction { .. } | InteractionSpec::SmoothBasis { .. }
            if spec.hardcore_radius.is_none() && inter.iter().any(|&w| w > 0.0) =>
        {
            Err(Error::UnstableModel(
                "attractive interaction weights need a hard core".into(),
            ))
        }
        _ => Ok(()),
    }
}

/// Final state of a birth-death chain run for `options.burn_in_steps` proposals.
pub fn sample_gibbs(
    spec: &ModelSpec,
    theta: &[f64],
    window: &Window,
    options: &McmcOptions,
) -> Result<PointPattern> {
    let mut sampler = GibbsSampler::new(spec, theta, *window, options)?;
    sampler.run(options.burn_in_steps)?;
    sampler.pattern()
}
