//! Error metrics, regional breakdowns and velocity statistics.
//!
//! Point errors are the mean over both coordinates of the absolute
//! difference, so a path MAE is the mean of its point errors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flow::Bounds;
use crate::geom::Vec2;
#[allow(unused_imports)] // test builds link std, whose inherent methods take precedence
use num_traits::Float;

pub const MAE_BINS: usize = 20;
pub const SPEED_BINS: usize = 40;
pub const VELOCITY_BINS: usize = 32;

/// Mean absolute coordinate error between two points.
pub fn point_error(a: Vec2, b: Vec2) -> f64 {
    0.5 * ((a.x - b.x).abs() + (a.y - b.y).abs())
}

/// Mean over steps and components of `|pred - truth|`.
pub fn mae(pred: &[Vec2], truth: &[Vec2]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    if pred.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| point_error(*p, *t)).sum::<f64>() / pred.len() as f64)
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::NonFinite { component: what.into(), detail: alloc::format!("sample {v}") }),
        None => Ok(()),
    }
}

/// Range `[lo, hi]` covering `values` for `n` bins. When the extent is at
/// roundoff level the range is widened so the values sit mid-bin.
fn span(values: impl Iterator<Item = f64>, n: usize) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let scale = lo.abs().max(hi.abs()).max(1.0);
    if !(hi - lo > 1e-9 * scale) {
        let mid = if lo.is_finite() { 0.5 * (lo + hi) } else { 0.0 };
        let b = mid.abs().max(1.0) / n.max(1) as f64;
        let lo = mid - b * ((n / 2) as f64 + 0.5);
        return (lo, lo + b * n as f64);
    }
    (lo, hi)
}

/// Bin of `v` among `n` equal bins on `[lo, hi]`; the top edge belongs to the last bin.
fn bin_index(v: f64, lo: f64, hi: f64, n: usize) -> usize {
    (((v - lo) / (hi - lo) * n as f64).floor().max(0.0) as usize).min(n - 1)
}

/// Equal-width histogram with explicit edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `counts.len() + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Histogram over the sample range.
    pub fn from_samples(samples: &[f64], n_bins: usize) -> Result<Self> {
        let (lo, hi) = span(samples.iter().copied(), n_bins);
        Self::with_range(samples, n_bins, lo, hi)
    }

    /// Histogram on `[lo, hi]`; samples outside are an error.
    pub fn with_range(samples: &[f64], n_bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::InvalidInput("histogram needs at least one bin".into()));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::DegenerateBounds(alloc::format!("histogram range [{lo}, {hi}]")));
        }
        check_finite(samples, "histogram")?;
        if let Some(v) = samples.iter().find(|v| **v < lo || **v > hi) {
            return Err(Error::InvalidInput(alloc::format!("sample {v} lies outside [{lo}, {hi}]")));
        }
        let mut counts = vec![0u64; n_bins];
        for &v in samples {
            counts[bin_index(v, lo, hi, n_bins)] += 1;
        }
        let edges = (0..=n_bins).map(|i| lo + (hi - lo) * i as f64 / n_bins as f64).collect();
        Ok(Self { edges, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }
}

/// Joint histogram; `counts[ix * ny + iy]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2d {
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram2d {
    pub fn from_samples(samples: &[Vec2], nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidInput("histogram needs at least one bin per axis".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { component: "histogram".into(), detail: "non-finite sample".into() });
        }
        let (x0, x1) = span(samples.iter().map(|v| v.x), nx);
        let (y0, y1) = span(samples.iter().map(|v| v.y), ny);
        let mut counts = vec![0u64; nx * ny];
        for v in samples {
            counts[bin_index(v.x, x0, x1, nx) * ny + bin_index(v.y, y0, y1, ny)] += 1;
        }
        let edges = |lo: f64, hi: f64, n: usize| (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
        Ok(Self { x_edges: edges(x0, x1, nx), y_edges: edges(y0, y1, ny), counts })
    }

    pub fn nx(&self) -> usize {
        self.x_edges.len() - 1
    }

    pub fn ny(&self) -> usize {
        self.y_edges.len() - 1
    }

    pub fn get(&self, ix: usize, iy: usize) -> u64 {
        self.counts[ix * self.ny() + iy]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Median of finite values; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalPositionMae {
    /// Error of the ensemble-mean final position, one per trajectory.
    pub per_trajectory: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub histogram: Histogram,
}

impl FinalPositionMae {
    pub fn from_errors(per_trajectory: Vec<f64>) -> Result<Self> {
        check_finite(&per_trajectory, "final_position_mae")?;
        let mean = mean(&per_trajectory).ok_or(Error::EmptyEnsemble)?;
        let median = median(&per_trajectory).ok_or(Error::EmptyEnsemble)?;
        let histogram = Histogram::from_samples(&per_trajectory, MAE_BINS)?;
        Ok(Self { per_trajectory, mean, median, histogram })
    }
}

/// Mean of a set of points.
pub fn centroid(points: &[Vec2]) -> Result<Vec2> {
    if points.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let s = points.iter().fold(Vec2::ZERO, |a, p| a + *p);
    Ok(s * (1.0 / points.len() as f64))
}

/// Final-position error of each trajectory's ensemble mean.
///
/// `finals[i]` holds the final positions of every ensemble member for
/// trajectory `i`; `truth[i]` is its observed final position.
pub fn final_position_mae(finals: &[Vec<Vec2>], truth: &[Vec2]) -> Result<FinalPositionMae> {
    if finals.len() != truth.len() {
        return Err(Error::LengthMismatch { left: finals.len(), right: truth.len() });
    }
    let errors = finals.iter().zip(truth).map(|(f, t)| Ok(point_error(centroid(f)?, *t))).collect::<Result<Vec<_>>>()?;
    FinalPositionMae::from_errors(errors)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub bounds: Bounds,
}

impl GridSpec {
    /// `nx × ny` cells over the bounding box of `points`.
    pub fn covering(points: &[Vec2], nx: usize, ny: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySequence);
        }
        let min = points.iter().fold(Vec2::new(f64::INFINITY, f64::INFINITY), |m, p| Vec2::new(m.x.min(p.x), m.y.min(p.y)));
        let max = points.iter().fold(Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY), |m, p| Vec2::new(m.x.max(p.x), m.y.max(p.y)));
        let g = Self { nx, ny, bounds: Bounds::new(min, max) };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::InvalidInput("grid needs at least one cell per axis".into()));
        }
        if self.bounds.is_degenerate() {
            let (a, b) = (self.bounds.min, self.bounds.max);
            return Err(Error::DegenerateBounds(alloc::format!("grid [{}, {}] × [{}, {}]", a.x, b.x, a.y, b.y)));
        }
        Ok(())
    }

    /// Cell `(ix, iy)` holding `p`, or `None` outside the bounds.
    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let b = &self.bounds;
        if !b.contains(p) {
            return None;
        }
        Some((bin_index(p.x, b.min.x, b.max.x, self.nx), bin_index(p.y, b.min.y, b.max.y, self.ny)))
    }
}

/// Mean point error per cell; `cells[ix * ny + iy]`, `None` where no truth point falls.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionalMae {
    pub grid: GridSpec,
    pub cells: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl RegionalMae {
    pub fn get(&self, ix: usize, iy: usize) -> Option<f64> {
        self.cells[ix * self.grid.ny + iy]
    }

    /// Occupancy-weighted mean over cells.
    pub fn weighted_mean(&self) -> Option<f64> {
        let n: usize = self.counts.iter().sum();
        let s: f64 = self.cells.iter().zip(&self.counts).filter_map(|(c, &k)| c.map(|c| c * k as f64)).sum();
        (n > 0).then(|| s / n as f64)
    }
}

/// Errors binned by the location of the true point.
pub fn regional_mae(pred: &[Vec2], truth: &[Vec2], grid: GridSpec) -> Result<RegionalMae> {
    grid.validate()?;
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    let n = grid.nx * grid.ny;
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for (p, t) in pred.iter().zip(truth) {
        let (ix, iy) = grid
            .cell_of(*t)
            .ok_or_else(|| Error::InvalidInput(alloc::format!("point ({}, {}) lies outside the grid", t.x, t.y)))?;
        sums[ix * grid.ny + iy] += point_error(*p, *t);
        counts[ix * grid.ny + iy] += 1;
    }
    let cells = sums.iter().zip(&counts).map(|(s, &k)| (k > 0).then(|| s / k as f64)).collect();
    Ok(RegionalMae { grid, cells, counts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityStats {
    pub joint: Histogram2d,
    pub speed: Histogram,
    pub mean_speed: f64,
    pub n_samples: usize,
}

/// Finite-difference velocities of every step of every path.
pub fn velocities(paths: &[Vec<Vec2>], dt: f64) -> Result<Vec<Vec2>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput(alloc::format!("time step must be > 0, got {dt}")));
    }
    if paths.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut out = Vec::new();
    for p in paths {
        if p.len() < 2 {
            return Err(Error::PathTooShort { need: 2, got: p.len() });
        }
        out.extend(p.windows(2).map(|w| (w[1] - w[0]) * (1.0 / dt)));
    }
    Ok(out)
}

pub fn velocity_stats(paths: &[Vec<Vec2>], dt: f64) -> Result<VelocityStats> {
    let v = velocities(paths, dt)?;
    let speeds: Vec<f64> = v.iter().map(|v| v.norm()).collect();
    Ok(VelocityStats {
        joint: Histogram2d::from_samples(&v, VELOCITY_BINS, VELOCITY_BINS)?,
        speed: Histogram::from_samples(&speeds, SPEED_BINS)?,
        mean_speed: mean(&speeds).ok_or(Error::EmptySequence)?,
        n_samples: v.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelComparison {
    pub cnf: FinalPositionMae,
    pub vsde: FinalPositionMae,
    /// `100 (cnf - vsde) / cnf`; absent when the baseline error is zero.
    pub reduction_pct: Option<f64>,
    /// Per-trajectory `cnf - vsde`.
    pub paired_diffs: Vec<f64>,
}

/// Relative error reduction in percent.
pub fn reduction_pct(baseline: f64, model: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 100.0 * (baseline - model) / baseline)
}

pub fn compare_models(cnf: &[Vec<Vec2>], vsde: &[Vec<Vec2>], truth: &[Vec2]) -> Result<ModelComparison> {
    if cnf.len() != vsde.len() {
        return Err(Error::LengthMismatch { left: cnf.len(), right: vsde.len() });
    }
    let a = final_position_mae(cnf, truth)?;
    let b = final_position_mae(vsde, truth)?;
    let paired_diffs = a.per_trajectory.iter().zip(&b.per_trajectory).map(|(x, y)| x - y).collect();
    Ok(ModelComparison { reduction_pct: reduction_pct(a.mean, b.mean), cnf: a, vsde: b, paired_diffs })
}

/// `(max - min) / mean` of positive values.
pub fn relative_spread(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    (m > 0.0).then(|| (hi - lo) / m)
}
