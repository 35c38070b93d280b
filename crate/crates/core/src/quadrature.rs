//! Dummy points and the logistic-regression design `(y, X, o)`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{parse_reals, Point, PointPattern, Window};
use crate::model::{ModelSpec, StatisticEvaluator};

/// Process generating the dummy points, with known intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DummyScheme {
    /// Homogeneous Poisson process of intensity `rho`.
    Poisson { rho: f64 },
    /// One uniform point in each cell of an `nx` by `ny` grid.
    Stratified { nx: usize, ny: usize },
}

impl DummyScheme {
    /// About four dummy points per data point, at least 100 in total.
    pub fn default_for(n_data: usize, window: &Window) -> Self {
        let v = window.volume();
        DummyScheme::Poisson {
            rho: (4.0 * n_data as f64 / v).max(100.0 / v),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DummyScheme::Poisson { rho } if rho > 0.0 && rho.is_finite() => Ok(()),
            DummyScheme::Stratified { nx, ny } if nx >= 1 && ny >= 1 => Ok(()),
            _ => Err(Error::Parameter(format!("invalid dummy scheme {self}"))),
        }
    }

    /// Intensity `rho(u)` of the dummy process on `window` (constant).
    pub fn intensity(&self, window: &Window) -> f64 {
        match *self {
            DummyScheme::Poisson { rho } => rho,
            DummyScheme::Stratified { nx, ny } => (nx * ny) as f64 / window.volume(),
        }
    }
}

impl fmt::Display for DummyScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DummyScheme::Poisson { rho } => write!(f, "poisson:{rho:?}"),
            DummyScheme::Stratified { nx, ny } => write!(f, "stratified:{nx},{ny}"),
        }
    }
}

impl FromStr for DummyScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, args) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("dummy scheme '{s}' needs a ':'")))?;
        let v = parse_reals(args)?;
        let scheme = match (head.trim(), v.as_slice()) {
            ("poisson", [rho]) => DummyScheme::Poisson { rho: *rho },
            ("stratified", [nx, ny])
                if nx.fract() == 0.0 && ny.fract() == 0.0 && *nx >= 1.0 && *ny >= 1.0 =>
            {
                DummyScheme::Stratified {
                    nx: *nx as usize,
                    ny: *ny as usize,
                }
            }
            _ => {
                return Err(Error::Parse(format!(
                    "bad dummy scheme '{s}' (poisson:RHO|stratified:NX,NY)"
                )))
            }
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

/// Uniform points on `window`.
pub(crate) fn uniform_points<R: Rng>(rng: &mut R, window: &Window, count: usize) -> Vec<Point> {
    (0..count)
        .map(|_| {
            Point::new(
                window.xmin() + rng.random::<f64>() * window.width(),
                window.ymin() + rng.random::<f64>() * window.height(),
            )
        })
        .collect()
}

pub fn generate_dummy(window: &Window, scheme: &DummyScheme, seed: u64) -> Result<PointPattern> {
    scheme.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = match *scheme {
        DummyScheme::Poisson { rho } => {
            let mean = rho * window.volume();
            let count = Poisson::new(mean)
                .map_err(|e| Error::Parameter(format!("poisson mean {mean}: {e}")))?
                .sample(&mut rng) as usize;
            uniform_points(&mut rng, window, count)
        }
        DummyScheme::Stratified { nx, ny } => {
            let (dx, dy) = (window.width() / nx as f64, window.height() / ny as f64);
            let mut pts = Vec::with_capacity(nx * ny);
            for j in 0..ny {
                for i in 0..nx {
                    let x = window.xmin() + (i as f64 + rng.random::<f64>()) * dx;
                    let y = window.ymin() + (j as f64 + rng.random::<f64>()) * dy;
                    pts.push(Point::new(x.min(window.xmax()), y.min(window.ymax())));
                }
            }
            pts
        }
    };
    PointPattern::new(points, None, *window)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    pub location: Point,
    pub mark: Option<usize>,
    pub is_data: bool,
}

/// Response, statistic rows and offsets of the logistic approximation.
/// Data rows come first, in pattern order, followed by dummy rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticDesign {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub rows: Vec<RowMeta>,
}

impl LogisticDesign {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        let n = x.nrows();
        for (len, what) in [(y.len(), "response"), (offset.len(), "offsets")] {
            if len != n {
                return Err(Error::Dimension {
                    expected: n,
                    found: len,
                    context: what,
                });
            }
        }
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Parameter("response must be 0/1".into()));
        }
        let rows = y
            .iter()
            .map(|&v| RowMeta {
                location: Point::new(0.0, 0.0),
                mark: None,
                is_data: v == 1.0,
            })
            .collect();
        Ok(Self { y, x, offset, rows })
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_data(&self) -> usize {
        self.rows.iter().filter(|r| r.is_data).count()
    }

    /// Linear predictor `X theta + o`.
    pub fn linear_predictor(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.x * theta + &self.offset
    }

    /// Removes the columns in `fixed`, folding `x_ik * value` into the offsets.
    pub fn fix_columns(&self, fixed: &[(usize, f64)]) -> Result<LogisticDesign> {
        let p = self.dim();
        let mut offset = self.offset.clone();
        for &(c, v) in fixed {
            if c >= p {
                return Err(Error::Dimension {
                    expected: p,
                    found: c,
                    context: "fixed column",
                });
            }
            offset.axpy(v, &self.x.column(c), 1.0);
        }
        let keep: Vec<usize> = (0..p)
            .filter(|c| !fixed.iter().any(|&(f, _)| f == *c))
            .collect();
        let x = self.x.select_columns(&keep);
        Ok(LogisticDesign {
            y: self.y.clone(),
            x,
            offset,
            rows: self.rows.clone(),
        })
    }

    /// CSV with header `y,o,x1..xp`.
    pub fn write_csv<W: Write>(&self, mut out: W, preamble: &[String]) -> Result<()> {
        for line in preamble {
            writeln!(out, "# {line}")?;
        }
        let mut header = String::from("y,o");
        for k in 1..=self.dim() {
            header.push_str(&format!(",x{k}"));
        }
        writeln!(out, "{header}")?;
        for i in 0..self.n_rows() {
            write!(out, "{},{:?}", self.y[i], self.offset[i])?;
            for k in 0..self.dim() {
                write!(out, ",{:?}", self.x[(i, k)])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Assembles the logistic design from data and dummy points.
///
/// Statistics are always evaluated against the full data pattern. With
/// `fit_window`, rows located outside it are dropped (border correction).
/// Dummy rows with a hard-core violation are dropped; a violation between
/// two data points is an error. Unmarked dummy points are replicated over
/// all mark levels of a multi-type model.
pub fn build_design(
    spec: &ModelSpec,
    data: &PointPattern,
    dummy: &PointPattern,
    scheme: &DummyScheme,
    fit_window: Option<&Window>,
) -> Result<LogisticDesign> {
    spec.validate()?;
    scheme.validate()?;
    if let Some(fw) = fit_window {
        if !data.window().contains_window(fw) {
            return Err(Error::InvalidWindow(format!(
                "fit window {fw} not inside data window {}",
                data.window()
            )));
        }
    }
    let rho = scheme.intensity(dummy.window());
    let eval = StatisticEvaluator::new(spec, data)?;
    for i in 0..data.n() {
        if !eval.hardcore_ok(data.points()[i], Some(i)) {
            let h = spec.hardcore_radius.unwrap_or(0.0);
            let j = (0..data.n())
                .find(|&j| j != i && data.points()[i].distance(&data.points()[j]) < h)
                .unwrap_or(i);
            return Err(Error::InfeasibleData(i.min(j), i.max(j)));
        }
    }

    let keep = |u: Point| fit_window.is_none_or(|w| w.contains(u));
    let mut rows: Vec<(RowMeta, Option<usize>)> = Vec::new();
    for i in 0..data.n() {
        let u = data.points()[i];
        if keep(u) {
            let meta = RowMeta {
                location: u,
                mark: data.mark(i),
                is_data: true,
            };
            rows.push((meta, Some(i)));
        }
    }
    let replicate = spec.mark_levels > 1 && dummy.marks().is_none();
    for i in 0..dummy.n() {
        let u = dummy.points()[i];
        if !keep(u) || !eval.hardcore_ok(u, None) {
            continue;
        }
        if replicate {
            for m in 0..spec.mark_levels {
                rows.push((
                    RowMeta {
                        location: u,
                        mark: Some(m),
                        is_data: false,
                    },
                    None,
                ));
            }
        } else {
            rows.push((
                RowMeta {
                    location: u,
                    mark: dummy.mark(i),
                    is_data: false,
                },
                None,
            ));
        }
    }

    let p = spec.parameter_dim();
    let n = rows.len();
    let mut x = DMatrix::zeros(n, p);
    let mut buf = vec![0.0; p];
    for (r, (meta, self_index)) in rows.iter().enumerate() {
        eval.row_into(meta.location, meta.mark, *self_index, &mut buf)?;
        for k in 0..p {
            x[(r, k)] = buf[k];
        }
    }
    let y = DVector::from_iterator(
        n,
        rows.iter().map(|(m, _)| if m.is_data { 1.0 } else { 0.0 }),
    );
    let offset = DVector::from_element(n, -rho.ln());
    if x.iter().any(|v| !v.is_finite()) || offset.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "non-finite entry in logistic design".into(),
        ));
    }
    Ok(LogisticDesign {
        y,
        x,
        offset,
        rows: rows.into_iter().map(|(m, _)| m).collect(),
    })
}
