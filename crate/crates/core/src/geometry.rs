//! Planar windows, point patterns and fixed-radius neighbour queries.
//!
//! Neighbourhoods are open balls: a point at distance exactly `r` from the
//! query location is not a neighbour. All statistics in [`crate::model`]
//! share this convention.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangular observation window.
///
/// A window remembers how far it has been dilated from its base rectangle,
/// so `w.dilate(r).erode(r) == w` holds exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    base: [f64; 4],
    margin: f64,
}

impl Window {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Result<Self> {
        let finite = [xmin, xmax, ymin, ymax].iter().all(|v| v.is_finite());
        if !finite || xmax <= xmin || ymax <= ymin {
            return Err(Error::InvalidWindow(format!(
                "[{xmin}, {xmax}] x [{ymin}, {ymax}]"
            )));
        }
        Ok(Self {
            base: [xmin, xmax, ymin, ymax],
            margin: 0.0,
        })
    }

    pub fn unit_square() -> Self {
        Self {
            base: [0.0, 1.0, 0.0, 1.0],
            margin: 0.0,
        }
    }

    pub fn xmin(&self) -> f64 {
        self.base[0] - self.margin
    }

    pub fn xmax(&self) -> f64 {
        self.base[1] + self.margin
    }

    pub fn ymin(&self) -> f64 {
        self.base[2] - self.margin
    }

    pub fn ymax(&self) -> f64 {
        self.base[3] + self.margin
    }

    pub fn width(&self) -> f64 {
        self.xmax() - self.xmin()
    }

    pub fn height(&self) -> f64 {
        self.ymax() - self.ymin()
    }

    pub fn volume(&self) -> f64 {
        self.width() * self.height()
    }

    /// Closed-boundary containment.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.xmin() && p.x <= self.xmax() && p.y >= self.ymin() && p.y <= self.ymax()
    }

    pub fn contains_window(&self, other: &Window) -> bool {
        other.xmin() >= self.xmin()
            && other.xmax() <= self.xmax()
            && other.ymin() >= self.ymin()
            && other.ymax() <= self.ymax()
    }

    /// Expand by `r` on all four sides.
    pub fn dilate(&self, r: f64) -> Window {
        assert!(r >= 0.0 && r.is_finite(), "dilation radius must be >= 0");
        Window {
            base: self.base,
            margin: self.margin + r,
        }
    }

    /// Shrink by `r` on all four sides; fails if nothing is left.
    pub fn erode(&self, r: f64) -> Result<Window> {
        let w = Window {
            base: self.base,
            margin: self.margin - r,
        };
        if r < 0.0 || !r.is_finite() || w.width() <= 0.0 || w.height() <= 0.0 {
            return Err(Error::InvalidWindow(format!("cannot erode {self} by {r}")));
        }
        Ok(w)
    }

    pub fn center(&self) -> Point {
        Point::new(
            0.5 * (self.xmin() + self.xmax()),
            0.5 * (self.ymin() + self.ymax()),
        )
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?},{:?},{:?},{:?}",
            self.xmin(),
            self.xmax(),
            self.ymin(),
            self.ymax()
        )
    }
}

impl FromStr for Window {
    type Err = Error;

    /// Parses `x0,x1,y0,y1`.
    fn from_str(s: &str) -> Result<Self> {
        let v = parse_reals(s)?;
        if v.len() != 4 {
            return Err(Error::Parse(format!(
                "window needs 4 comma-separated values, got '{s}'"
            )));
        }
        Window::new(v[0], v[1], v[2], v[3])
    }
}

pub(crate) fn parse_reals(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("not a number: '{t}' in '{s}'")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn distance(&self, other: &Point) -> f64 {
        pair_distance(*self, *other)
    }
}

/// Euclidean distance.
#[inline]
pub fn pair_distance(a: Point, b: Point) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Ordered planar point configuration, optionally marked, inside a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPattern {
    points: Vec<Point>,
    marks: Option<Vec<usize>>,
    window: Window,
}

impl PointPattern {
    pub fn new(points: Vec<Point>, marks: Option<Vec<usize>>, window: Window) -> Result<Self> {
        if let Some(m) = &marks {
            if m.len() != points.len() {
                return Err(Error::InvalidPattern(format!(
                    "{} marks for {} points",
                    m.len(),
                    points.len()
                )));
            }
        }
        for (i, p) in points.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::InvalidPattern(format!("point {i} is not finite")));
            }
            if !window.contains(*p) {
                return Err(Error::InvalidPattern(format!(
                    "point {i} ({}, {}) outside window {window}",
                    p.x, p.y
                )));
            }
        }
        Ok(Self {
            points,
            marks,
            window,
        })
    }

    pub fn empty(window: Window) -> Self {
        Self {
            points: Vec::new(),
            marks: None,
            window,
        }
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn marks(&self) -> Option<&[usize]> {
        self.marks.as_deref()
    }

    pub fn mark(&self, i: usize) -> Option<usize> {
        self.marks.as_ref().map(|m| m[i])
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    /// Number of distinct mark levels (`max mark + 1`), or 1 if unmarked.
    pub fn mark_levels(&self) -> usize {
        match &self.marks {
            Some(m) => m.iter().max().map_or(1, |&x| x + 1),
            None => 1,
        }
    }

    /// Points falling inside `window`, keeping order, with `window` as the new window.
    pub fn restrict(&self, window: Window) -> PointPattern {
        let keep: Vec<usize> = (0..self.n())
            .filter(|&i| window.contains(self.points[i]))
            .collect();
        PointPattern {
            points: keep.iter().map(|&i| self.points[i]).collect(),
            marks: self
                .marks
                .as_ref()
                .map(|m| keep.iter().map(|&i| m[i]).collect()),
            window,
        }
    }

    /// Reads `x,y` or `x,y,mark` CSV. Lines starting with `#` are skipped.
    pub fn read_csv<R: Read>(reader: R, window: Window) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        let marked = match cols.as_slice() {
            ["x", "y"] => false,
            ["x", "y", "mark"] => true,
            _ => {
                return Err(Error::Parse(format!(
                    "expected header 'x,y' or 'x,y,mark', got '{}'",
                    cols.join(",")
                )))
            }
        };
        let mut points = Vec::new();
        let mut marks = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = |k: usize| -> Result<&str> {
                rec.get(k)
                    .ok_or_else(|| Error::Parse(format!("short record {:?}", rec)))
            };
            let x: f64 = field(0)?
                .parse()
                .map_err(|_| Error::Parse(format!("bad x in {:?}", rec)))?;
            let y: f64 = field(1)?
                .parse()
                .map_err(|_| Error::Parse(format!("bad y in {:?}", rec)))?;
            points.push(Point::new(x, y));
            if marked {
                let m: usize = field(2)?
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad mark in {:?}", rec)))?;
                marks.push(m);
            }
        }
        PointPattern::new(points, marked.then_some(marks), window)
    }

    pub fn read_csv_path(path: &Path, window: Window) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(f, window)
    }

    /// Writes CSV with shortest round-trip float formatting. `preamble` lines
    /// are emitted as `#` comments.
    pub fn write_csv<W: Write>(&self, mut out: W, preamble: &[String]) -> Result<()> {
        for line in preamble {
            writeln!(out, "# {line}")?;
        }
        match &self.marks {
            Some(m) => {
                writeln!(out, "x,y,mark")?;
                for (p, k) in self.points.iter().zip(m) {
                    writeln!(out, "{:?},{:?},{}", p.x, p.y, k)?;
                }
            }
            None => {
                writeln!(out, "x,y")?;
                for p in &self.points {
                    writeln!(out, "{:?},{:?}", p.x, p.y)?;
                }
            }
        }
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path, preamble: &[String]) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f, preamble)
    }
}

fn check_radius(r: f64) -> Result<()> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidRadius(r))
    }
}

/// Naive O(n) count of pattern points strictly within `r` of `u`.
pub fn count_neighbors(
    pattern: &PointPattern,
    u: Point,
    r: f64,
    exclude_index: Option<usize>,
    mark_filter: Option<usize>,
) -> Result<usize> {
    check_radius(r)?;
    Ok(pattern
        .points
        .iter()
        .enumerate()
        .filter(|&(j, p)| {
            Some(j) != exclude_index
                && mark_filter.is_none_or(|m| pattern.mark(j) == Some(m))
                && pair_distance(u, *p) < r
        })
        .count())
}

/// Uniform cell grid over a pattern's window for fixed-radius queries.
#[derive(Debug, Clone)]
pub struct NeighborIndex<'a> {
    pattern: &'a PointPattern,
    radius: f64,
    origin: Point,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

/// Builds a [`NeighborIndex`] with cell side at least `r`.
pub fn build_cell_grid(pattern: &PointPattern, r: f64) -> Result<NeighborIndex<'_>> {
    NeighborIndex::build(pattern, r)
}

impl<'a> NeighborIndex<'a> {
    pub fn build(pattern: &'a PointPattern, r: f64) -> Result<Self> {
        check_radius(r)?;
        let w = pattern.window();
        let nx = ((w.width() / r).floor() as usize).clamp(1, 4096);
        let ny = ((w.height() / r).floor() as usize).clamp(1, 4096);
        // cell side >= r because nx <= width / r
        let cell = (w.width() / nx as f64).max(w.height() / ny as f64);
        let mut index = Self {
            pattern,
            radius: r,
            origin: Point::new(w.xmin(), w.ymin()),
            cell,
            nx,
            ny,
            buckets: vec![Vec::new(); nx * ny],
        };
        for (i, p) in pattern.points.iter().enumerate() {
            let (cx, cy) = index.cell_of(*p);
            index.buckets[cy * index.nx + cx].push(i);
        }
        Ok(index)
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn pattern(&self) -> &'a PointPattern {
        self.pattern
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    fn axis_cell(&self, v: f64, lo: f64, n: usize) -> usize {
        let c = ((v - lo) / self.cell).floor();
        if c <= 0.0 {
            0
        } else {
            (c as usize).min(n - 1)
        }
    }

    fn cell_of(&self, p: Point) -> (usize, usize) {
        (
            self.axis_cell(p.x, self.origin.x, self.nx),
            self.axis_cell(p.y, self.origin.y, self.ny),
        )
    }

    /// Calls `f(j, d)` for every point `j` with `d = |u - p_j| < r`.
    /// `r` must not exceed the radius the index was built for.
    pub fn for_each_within<F: FnMut(usize, f64)>(&self, u: Point, r: f64, mut f: F) {
        debug_assert!(r <= self.radius * (1.0 + 1e-12));
        let x0 = self.axis_cell(u.x - r, self.origin.x, self.nx);
        let x1 = self.axis_cell(u.x + r, self.origin.x, self.nx);
        let y0 = self.axis_cell(u.y - r, self.origin.y, self.ny);
        let y1 = self.axis_cell(u.y + r, self.origin.y, self.ny);
        let pts = self.pattern.points();
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                for &j in &self.buckets[cy * self.nx + cx] {
                    let d = pair_distance(u, pts[j]);
                    if d < r {
                        f(j, d);
                    }
                }
            }
        }
    }

    pub fn count(
        &self,
        u: Point,
        exclude_index: Option<usize>,
        mark_filter: Option<usize>,
    ) -> usize {
        let mut n = 0;
        self.for_each_within(u, self.radius, |j, _| {
            if Some(j) != exclude_index
                && mark_filter.is_none_or(|m| self.pattern.mark(j) == Some(m))
            {
                n += 1;
            }
        });
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pattern(n: usize, seed: u64) -> PointPattern {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| Point::new(rng.random(), rng.random()))
            .collect();
        PointPattern::new(pts, None, Window::unit_square()).unwrap()
    }

    #[test]
    fn distances() {
        assert_eq!(
            pair_distance(Point::new(0.0, 0.0), Point::new(0.0, 0.0)),
            0.0
        );
        assert_eq!(
            pair_distance(Point::new(0.0, 0.0), Point::new(3.0, 4.0)),
            5.0
        );
        let d = pair_distance(Point::new(0.5, 0.5), Point::new(0.5, 0.55));
        assert!((d - 0.05).abs() < 1e-15);
    }

    #[test]
    fn counting_basics() {
        let w = Window::unit_square();
        let pat = PointPattern::new(vec![Point::new(0.5, 0.5)], None, w).unwrap();
        assert_eq!(
            count_neighbors(&pat, Point::new(0.5, 0.55), 0.06, None, None).unwrap(),
            1
        );
        assert_eq!(
            count_neighbors(&pat, Point::new(0.5, 0.55), 0.06, Some(0), None).unwrap(),
            0
        );
        let empty = PointPattern::empty(w);
        assert_eq!(
            count_neighbors(&empty, Point::new(0.1, 0.2), 0.1, None, None).unwrap(),
            0
        );
        assert!(matches!(
            count_neighbors(&pat, Point::new(0.1, 0.2), 0.0, None, None),
            Err(Error::InvalidRadius(_))
        ));
        assert!(build_cell_grid(&pat, -1.0).is_err());
    }

    #[test]
    fn open_ball_excludes_boundary() {
        let pat =
            PointPattern::new(vec![Point::new(0.0, 0.0)], None, Window::unit_square()).unwrap();
        assert_eq!(
            count_neighbors(&pat, Point::new(0.5, 0.0), 0.5, None, None).unwrap(),
            0
        );
        let idx = NeighborIndex::build(&pat, 0.5).unwrap();
        assert_eq!(idx.count(Point::new(0.5, 0.0), None, None), 0);
    }

    #[test]
    fn grid_matches_naive_scan() {
        let pat = random_pattern(1000, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &r in &[0.01, 0.05, 0.2, 0.7] {
            let idx = NeighborIndex::build(&pat, r).unwrap();
            for _ in 0..100 {
                let u = Point::new(rng.random(), rng.random());
                assert_eq!(
                    idx.count(u, None, None),
                    count_neighbors(&pat, u, r, None, None).unwrap()
                );
            }
        }
    }

    #[test]
    fn degenerate_grids() {
        let w = Window::new(0.0, 0.05, 0.0, 0.05).unwrap();
        let pat = PointPattern::new(
            vec![Point::new(0.01, 0.01), Point::new(0.04, 0.04)],
            None,
            w,
        )
        .unwrap();
        let idx = NeighborIndex::build(&pat, 0.1).unwrap();
        assert_eq!(idx.bucket_count(), 1);
        assert_eq!(idx.count(Point::new(0.02, 0.02), None, None), 2);

        let empty = PointPattern::empty(Window::unit_square());
        let idx = NeighborIndex::build(&empty, 0.1).unwrap();
        assert_eq!(idx.count(Point::new(0.5, 0.5), None, None), 0);
    }

    #[test]
    fn marks_filter() {
        let pat = PointPattern::new(
            vec![Point::new(0.5, 0.5), Point::new(0.51, 0.5)],
            Some(vec![0, 1]),
            Window::unit_square(),
        )
        .unwrap();
        let u = Point::new(0.505, 0.5);
        assert_eq!(count_neighbors(&pat, u, 0.1, None, Some(1)).unwrap(), 1);
        let idx = NeighborIndex::build(&pat, 0.1).unwrap();
        assert_eq!(idx.count(u, None, Some(0)), 1);
        assert_eq!(pat.mark_levels(), 2);
    }

    #[test]
    fn dilation() {
        let w = Window::unit_square();
        assert_eq!(w.dilate(0.0), w);
        let d = w.dilate(0.06);
        assert_eq!(
            (d.xmin(), d.xmax(), d.ymin(), d.ymax()),
            (-0.06, 1.06, -0.06, 1.06)
        );
        let side = 1.0;
        let r = 0.06;
        assert!((d.volume() - w.volume() - (4.0 * r * side + 4.0 * r * r)).abs() < 1e-12);
        assert_eq!(d.erode(0.06).unwrap(), w);
        assert!(w.erode(0.6).is_err());
    }

    #[test]
    fn window_parsing() {
        let w: Window = "0,1,0.05,0.75".parse().unwrap();
        assert_eq!(w.ymax(), 0.75);
        assert!("1,0,0,1".parse::<Window>().is_err());
        assert!("0,1,0".parse::<Window>().is_err());
    }

    #[test]
    fn pattern_rejects_outside_points() {
        let r = PointPattern::new(vec![Point::new(1.5, 0.5)], None, Window::unit_square());
        assert!(matches!(r, Err(Error::InvalidPattern(_))));
    }

    #[test]
    fn csv_round_trip_marked() {
        let pat = PointPattern::new(
            vec![
                Point::new(0.1234567890123456, 0.9),
                Point::new(1.0 / 3.0, 0.0),
            ],
            Some(vec![1, 0]),
            Window::unit_square(),
        )
        .unwrap();
        let mut buf = Vec::new();
        pat.write_csv(&mut buf, &["provenance".to_string()])
            .unwrap();
        let back = PointPattern::read_csv(buf.as_slice(), Window::unit_square()).unwrap();
        assert_eq!(back, pat);
        assert!(PointPattern::read_csv("a,b\n1,2\n".as_bytes(), Window::unit_square()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn csv_round_trip(coords in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 0..50)) {
                let pts = coords.into_iter().map(|(x, y)| Point::new(x, y)).collect();
                let pat = PointPattern::new(pts, None, Window::unit_square()).unwrap();
                let mut buf = Vec::new();
                pat.write_csv(&mut buf, &[]).unwrap();
                let back = PointPattern::read_csv(buf.as_slice(), Window::unit_square()).unwrap();
                prop_assert_eq!(back, pat);
            }

            #[test]
            fn triangle_inequality(a in (-5.0f64..5.0, -5.0f64..5.0), b in (-5.0f64..5.0, -5.0f64..5.0), c in (-5.0f64..5.0, -5.0f64..5.0)) {
                let (a, b, c) = (Point::new(a.0, a.1), Point::new(b.0, b.1), Point::new(c.0, c.1));
                prop_assert!(pair_distance(a, c) <= pair_distance(a, b) + pair_distance(b, c) + 1e-12);
                prop_assert_eq!(pair_distance(a, b), pair_distance(b, a));
            }

            #[test]
            fn count_monotone_in_radius(seed in 0u64..1000, r1 in 0.001f64..0.5, dr in 0.0f64..0.5, x in 0.0f64..1.0, y in 0.0f64..1.0) {
                let pat = random_pattern(60, seed);
                let u = Point::new(x, y);
                let a = count_neighbors(&pat, u, r1, None, None).unwrap();
                let b = count_neighbors(&pat, u, r1 + dr, None, None).unwrap();
                prop_assert!(a <= b);
            }

            #[test]
            fn dilate_erode_identity(x0 in -10.0f64..10.0, w in 0.01f64..10.0, h in 0.01f64..10.0, r in 0.0f64..5.0) {
                let win = Window::new(x0, x0 + w, -x0, -x0 + h).unwrap();
                prop_assert_eq!(win.dilate(r).erode(r).unwrap(), win);
            }
        }
    }
}
