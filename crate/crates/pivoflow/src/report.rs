//! Evaluation reports: metric tables as CSV, figures as SVG, and a manifest
//! listing every emitted file with its checksum.

use std::path::Path;

use pivoflow_core::eval::{
    compare_models, final_position_mae, reduction_pct, regional_mae, relative_spread, velocities, velocity_stats, GridSpec, Histogram,
    ModelComparison, RegionalMae, VelocityStats,
};
use pivoflow_core::flow::TrajectoryBundle;
use pivoflow_core::integrate::StepMethod;
use pivoflow_core::Vec2;

use crate::config::EvalSection;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::manifest::Manifest;
use crate::predictions::Predictions;
use crate::svg::{self, Figure};

pub const FORMAT_VERSION: &str = "1";
pub const MANIFEST: &str = "manifest.txt";

/// Velocity samples kept per source for the phase-space scatter.
const SCATTER_POINTS: usize = 1500;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
    Absent,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => format_float(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Absent => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Absent, Cell::Num)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

/// 17 significant digits, enough to round-trip any double.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    /// File stem.
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.to_string(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        w.into_inner().map_err(|e| Error::Io { path: self.file_name().into(), source: e.into_error() })
    }
}

/// Header and string records of a CSV file.
pub fn read_csv(bytes: &[u8]) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new().from_reader(bytes);
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r.records().map(|rec| rec.map(|r| r.iter().map(str::to_string).collect())).collect::<Result<_, _>>()?;
    Ok((header, rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorRow {
    pub method: StepMethod,
    pub cnf_mae: f64,
    pub vsde_mae: f64,
    pub reduction_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionalPair {
    pub cnf: RegionalMae,
    pub vsde: RegionalMae,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySummary {
    pub label: String,
    pub stats: VelocityStats,
    /// Evenly thinned velocity samples.
    pub scatter: Vec<Vec2>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub trajectory: usize,
    pub truth: Vec<Vec2>,
    pub vsde: Vec<Vec2>,
    pub cnf: Vec<Vec2>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub flow_regime: String,
    pub comparison: Option<ModelComparison>,
    pub regional: Option<RegionalPair>,
    pub velocity: Vec<VelocitySummary>,
    pub integrators: Vec<IntegratorRow>,
    /// Relative spread of the controller MAE across integrators.
    pub integrator_spread: Option<f64>,
    pub overlays: Vec<Overlay>,
}

fn thin(points: Vec<Vec2>, n: usize) -> Vec<Vec2> {
    if points.len() <= n {
        return points;
    }
    (0..n).map(|i| points[i * points.len() / n]).collect()
}

fn velocity_summary(label: &str, paths: &[Vec<Vec2>], dt: f64) -> Result<VelocitySummary> {
    Ok(VelocitySummary {
        label: label.to_string(),
        stats: velocity_stats(paths, dt)?,
        scatter: thin(velocities(paths, dt)?, SCATTER_POINTS),
    })
}

impl EvalReport {
    /// Scores predictions against the validation bundle they were made for.
    pub fn build(flow_regime: &str, val: &TrajectoryBundle, preds: &Predictions, opts: &EvalSection) -> Result<Self> {
        let truth: Vec<Vec2> = preds.trajectory_ids.iter().map(|&i| val.final_position(i)).collect();
        let comparison = compare_models(&preds.cnf_finals, &preds.vsde_finals, &truth)?;

        let grid = GridSpec::covering(&truth, opts.regional_nx, opts.regional_ny)?;
        let means = |sets: &[Vec<Vec2>]| -> Result<Vec<Vec2>> { sets.iter().map(|s| Ok(pivoflow_core::eval::centroid(s)?)).collect() };
        let regional = RegionalPair {
            cnf: regional_mae(&means(&preds.cnf_finals)?, &truth, grid)?,
            vsde: regional_mae(&means(&preds.vsde_finals)?, &truth, grid)?,
        };

        let truth_paths: Vec<Vec<Vec2>> = preds.trajectory_ids.iter().map(|&i| val.trajectory(i).to_vec()).collect();
        let vsde_paths: Vec<Vec<Vec2>> = preds.vsde_mean_paths.iter().filter(|p| p.len() >= 2).cloned().collect();
        let velocity =
            vec![velocity_summary("truth", &truth_paths, val.dt)?, velocity_summary("vsde_mean", &vsde_paths, preds.step_dt())?];

        let mut integrators = Vec::new();
        for c in &preds.comparisons {
            let t = &truth[..c.vsde.len()];
            let cnf_mae = final_position_mae(&c.cnf, t)?.mean;
            let vsde_mae = final_position_mae(&c.vsde, t)?.mean;
            integrators.push(IntegratorRow { method: c.method, cnf_mae, vsde_mae, reduction_pct: reduction_pct(cnf_mae, vsde_mae) });
        }
        let integrator_spread = relative_spread(&integrators.iter().map(|r| r.vsde_mae).collect::<Vec<_>>());

        let overlays = (0..opts.overlay_trajectories.min(truth.len()))
            .map(|k| Overlay {
                trajectory: preds.trajectory_ids[k],
                truth: truth_paths[k].clone(),
                vsde: preds.vsde_mean_paths[k].clone(),
                cnf: preds.cnf_mean_paths[k].clone(),
            })
            .collect();

        Ok(Self {
            flow_regime: flow_regime.to_string(),
            comparison: Some(comparison),
            regional: Some(regional),
            velocity,
            integrators,
            integrator_spread,
            overlays,
        })
    }

    pub fn tables(&self) -> Vec<Table> {
        let mut out = Vec::new();
        if let Some(c) = &self.comparison {
            let mut t = Table::new("summary", &["Flow Regime", "CNF MAE", "VSDE MAE", "Red. %"]);
            t.push(vec![self.flow_regime.as_str().into(), c.cnf.mean.into(), c.vsde.mean.into(), c.reduction_pct.into()]);
            out.push(t);

            let mut t = Table::new("final_position_mae", &["trajectory", "cnf_mae", "vsde_mae", "difference"]);
            for (i, ((a, b), d)) in c.cnf.per_trajectory.iter().zip(&c.vsde.per_trajectory).zip(&c.paired_diffs).enumerate() {
                t.push(vec![i.into(), (*a).into(), (*b).into(), (*d).into()]);
            }
            out.push(t);

            let mut t = Table::new("final_position_mae_stats", &["model", "mean", "median"]);
            t.push(vec!["cnf".into(), c.cnf.mean.into(), c.cnf.median.into()]);
            t.push(vec!["vsde".into(), c.vsde.mean.into(), c.vsde.median.into()]);
            out.push(t);

            let mut t = Table::new("mae_histogram", &["model", "bin_lo", "bin_hi", "count"]);
            for (label, h) in [("cnf", &c.cnf.histogram), ("vsde", &c.vsde.histogram)] {
                push_histogram(&mut t, label, h);
            }
            out.push(t);
        }
        if let Some(r) = &self.regional {
            let g = r.vsde.grid;
            let (w, h) = ((g.bounds.max.x - g.bounds.min.x) / g.nx as f64, (g.bounds.max.y - g.bounds.min.y) / g.ny as f64);
            let mut t = Table::new("regional_mae", &["ix", "iy", "x_lo", "x_hi", "y_lo", "y_hi", "count", "cnf_mae", "vsde_mae"]);
            for ix in 0..g.nx {
                for iy in 0..g.ny {
                    let x_lo = g.bounds.min.x + ix as f64 * w;
                    let y_lo = g.bounds.min.y + iy as f64 * h;
                    t.push(vec![
                        ix.into(),
                        iy.into(),
                        x_lo.into(),
                        (x_lo + w).into(),
                        y_lo.into(),
                        (y_lo + h).into(),
                        r.vsde.counts[ix * g.ny + iy].into(),
                        r.cnf.get(ix, iy).into(),
                        r.vsde.get(ix, iy).into(),
                    ]);
                }
            }
            out.push(t);
        }
        if !self.velocity.is_empty() {
            let mut s = Table::new("velocity_summary", &["source", "mean_speed", "samples"]);
            let mut sp = Table::new("speed_histogram", &["source", "bin_lo", "bin_hi", "count"]);
            let mut j = Table::new("velocity_histogram", &["source", "ix", "iy", "vx_lo", "vx_hi", "vy_lo", "vy_hi", "count"]);
            for v in &self.velocity {
                s.push(vec![v.label.as_str().into(), v.stats.mean_speed.into(), v.stats.n_samples.into()]);
                push_histogram(&mut sp, &v.label, &v.stats.speed);
                let jh = &v.stats.joint;
                for ix in 0..jh.nx() {
                    for iy in 0..jh.ny() {
                        j.push(vec![
                            v.label.as_str().into(),
                            ix.into(),
                            iy.into(),
                            jh.x_edges[ix].into(),
                            jh.x_edges[ix + 1].into(),
                            jh.y_edges[iy].into(),
                            jh.y_edges[iy + 1].into(),
                            jh.get(ix, iy).into(),
                        ]);
                    }
                }
            }
            out.extend([s, sp, j]);
        }
        if !self.integrators.is_empty() {
            let mut t = Table::new("integrators", &["integrator", "cnf_mae", "vsde_mae", "red_pct"]);
            for r in &self.integrators {
                t.push(vec![r.method.name().into(), r.cnf_mae.into(), r.vsde_mae.into(), r.reduction_pct.into()]);
            }
            out.push(t);
            let mut t = Table::new("integrator_spread", &["metric", "value"]);
            t.push(vec!["vsde_relative_spread".into(), self.integrator_spread.into()]);
            out.push(t);
        }
        out
    }

    pub fn figures(&self) -> Vec<Figure> {
        let mut out = Vec::new();
        if !self.overlays.is_empty() {
            out.push(svg::overlay(&self.overlays));
        }
        if let Some(r) = &self.regional {
            out.push(svg::regional_heatmap(&r.cnf, &r.vsde));
        }
        if let Some(c) = &self.comparison {
            out.push(svg::mae_histograms(&c.cnf.per_trajectory, &c.vsde.per_trajectory));
        }
        if !self.velocity.is_empty() {
            let sets: Vec<(&str, &[Vec2])> = self.velocity.iter().map(|v| (v.label.as_str(), v.scatter.as_slice())).collect();
            out.push(svg::phase_space(&sets));
        }
        out
    }
}

fn push_histogram(t: &mut Table, label: &str, h: &Histogram) {
    for (k, &count) in h.counts.iter().enumerate() {
        t.push(vec![label.into(), h.edges[k].into(), h.edges[k + 1].into(), count.into()]);
    }
}

/// Emitted file names with their SHA-256, in emission order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportManifest {
    pub files: Vec<(String, String)>,
}

/// Writes every table and figure into `dir`, replacing it atomically.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<ReportManifest> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    for t in report.tables() {
        files.push((t.file_name(), t.to_csv()?));
    }
    for f in report.figures() {
        files.push((f.file_name(), f.svg.into_bytes()));
    }
    let listing: Vec<(String, String)> = files.iter().map(|(n, b)| (n.clone(), fsutil::sha256_hex(b))).collect();
    let mut m = Manifest::new();
    m.push("format_version", FORMAT_VERSION).push("flow_regime", &report.flow_regime).push("n_files", files.len());
    for (i, (name, sha)) in listing.iter().enumerate() {
        m.push(format!("file.{i}.name"), name);
        m.push(format!("file.{i}.sha256"), sha);
    }
    fsutil::replace_dir(dir, |stage| {
        for (name, bytes) in &files {
            fsutil::write_atomic(&stage.join(name), bytes)?;
        }
        m.write(&stage.join(MANIFEST))
    })?;
    Ok(ReportManifest { files: listing })
}

/// Reads a report manifest and verifies every listed file.
pub fn verify_report(dir: &Path) -> Result<ReportManifest> {
    let mpath = dir.join(MANIFEST);
    let m = Manifest::read(&mpath)?;
    crate::bundle_io::check_version(&m, &mpath, FORMAT_VERSION)?;
    let n: usize = m.parse_value("n_files")?;
    let mut files = Vec::with_capacity(n);
    for i in 0..n {
        let name = m.get(&format!("file.{i}.name"))?.to_string();
        let sha = m.get(&format!("file.{i}.sha256"))?.to_string();
        crate::bundle_io::read_checked(&dir.join(&name), &sha)?;
        files.push((name, sha));
    }
    Ok(ReportManifest { files })
}
