//! Minimal static SVG plots.

use std::fmt::Write;

use pivoflow_core::eval::{Histogram, RegionalMae, MAE_BINS};
use pivoflow_core::Vec2;

use crate::report::Overlay;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub name: String,
    pub svg: String,
}

impl Figure {
    pub fn file_name(&self) -> String {
        format!("{}.svg", self.name)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Data-to-pixel mapping for one rectangular panel.
#[derive(Debug, Clone, Copy)]
struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    lo: Vec2,
    hi: Vec2,
}

impl Frame {
    fn new(x0: f64, y0: f64, w: f64, h: f64, points: impl Iterator<Item = Vec2>) -> Self {
        let (mut lo, mut hi) = (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
        for p in points.filter(|p| p.is_finite()) {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        if !lo.is_finite() {
            (lo, hi) = (Vec2::new(0.0, 0.0), Vec2::new(1.0, 1.0));
        }
        for (l, h) in [(&mut lo.x, &mut hi.x), (&mut lo.y, &mut hi.y)] {
            if *h - *l <= 1e-12 * (1.0 + l.abs()) {
                *l -= 0.5;
                *h += 0.5;
            }
        }
        Self { x0, y0, w, h, lo, hi }
    }

    fn px(&self, p: Vec2) -> (f64, f64) {
        let fx = (p.x - self.lo.x) / (self.hi.x - self.lo.x);
        let fy = (p.y - self.lo.y) / (self.hi.y - self.lo.y);
        (self.x0 + fx * self.w, self.y0 + (1.0 - fy) * self.h)
    }

    fn axes(&self, out: &mut String, x_label: &str, y_label: &str) {
        let (x0, y0, w, h) = (self.x0, self.y0, self.w, self.h);
        let _ = writeln!(out, r##"<rect x="{x0:.2}" y="{y0:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="#333"/>"##);
        let by = y0 + h + 16.0;
        let _ = writeln!(out, r#"<text x="{x0:.2}" y="{by:.2}" font-size="10">{}</text>"#, fmt_tick(self.lo.x));
        let _ = writeln!(out, r#"<text x="{:.2}" y="{by:.2}" font-size="10" text-anchor="end">{}</text>"#, x0 + w, fmt_tick(self.hi.x));
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{}</text>"#, x0 - 4.0, y0 + h, fmt_tick(self.lo.y));
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{}</text>"#, x0 - 4.0, y0 + 10.0, fmt_tick(self.hi.y));
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#, x0 + w / 2.0, by + 14.0, escape(x_label));
        let (lx, ly) = (x0 - 36.0, y0 + h / 2.0);
        let _ = writeln!(out, r#"<text x="{lx:.2}" y="{ly:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 {lx:.2} {ly:.2})">{}</text>"#, escape(y_label));
    }

    fn polyline(&self, out: &mut String, pts: &[Vec2], color: &str, dash: Option<&str>) {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> = pts.iter().filter(|p| p.is_finite()).map(|p| self.px(*p)).map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let dash = dash.map_or(String::new(), |d| format!(r#" stroke-dasharray="{d}""#));
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.2"{dash}/>"#, coords.join(" "));
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (1e-3..1e4).contains(&v.abs()) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

fn document(title: &str, width: f64, body: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{H}\" viewBox=\"0 0 {width} {H}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"{:.1}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n{body}</svg>\n",
        width / 2.0,
        escape(title)
    )
}

fn legend(out: &mut String, x: f64, y: f64, entries: &[(&str, &str, Option<&str>)]) {
    for (k, (label, color, dash)) in entries.iter().enumerate() {
        let yy = y + 16.0 * k as f64;
        let dash = dash.map_or(String::new(), |d| format!(r#" stroke-dasharray="{d}""#));
        let _ = writeln!(out, r#"<line x1="{x:.1}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="{color}" stroke-width="2"{dash}/>"#, x + 20.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#, x + 26.0, yy + 4.0, escape(label));
    }
}

/// Observed trajectories with the controller and flow-only mean paths.
pub fn overlay(overlays: &[Overlay]) -> Figure {
    let all = overlays.iter().flat_map(|o| o.truth.iter().chain(&o.vsde).chain(&o.cnf).copied());
    let f = Frame::new(MARGIN, MARGIN, W - 2.0 * MARGIN, H - 2.0 * MARGIN, all);
    let mut body = String::new();
    f.axes(&mut body, "x", "y");
    for (k, o) in overlays.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        f.polyline(&mut body, &o.cnf, "#999", Some("2,3"));
        f.polyline(&mut body, &o.truth, c, None);
        f.polyline(&mut body, &o.vsde, c, Some("6,3"));
    }
    legend(&mut body, W - MARGIN - 130.0, MARGIN + 14.0, &[("observed", "#333", None), ("VSDE mean", "#333", Some("6,3")), ("CNF mean", "#999", Some("2,3"))]);
    Figure { name: "overlay".into(), svg: document("Trajectories: observed vs predicted mean paths", W, &body) }
}

fn color_ramp(f: f64) -> String {
    let f = f.clamp(0.0, 1.0);
    let (a, b) = ([68.0, 1.0, 84.0], [253.0, 231.0, 37.0]);
    let c: Vec<u8> = (0..3).map(|i| (a[i] + f * (b[i] - a[i])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Side-by-side regional MAE maps on a shared color scale.
pub fn regional_heatmap(cnf: &RegionalMae, vsde: &RegionalMae) -> Figure {
    let vmax = cnf.cells.iter().chain(&vsde.cells).flatten().fold(0.0f64, |m, v| m.max(*v));
    let width = 2.0 * W - MARGIN;
    let mut body = String::new();
    for (p, (label, r)) in [("CNF", cnf), ("VSDE", vsde)].into_iter().enumerate() {
        let g = r.grid;
        let f = Frame::new(MARGIN + p as f64 * (W - MARGIN), MARGIN, W - 2.0 * MARGIN, H - 2.0 * MARGIN, [g.bounds.min, g.bounds.max].into_iter());
        let (cw, ch) = (f.w / g.nx as f64, f.h / g.ny as f64);
        for ix in 0..g.nx {
            for iy in 0..g.ny {
                let fill = r.get(ix, iy).map_or("#dddddd".to_string(), |v| color_ramp(if vmax > 0.0 { v / vmax } else { 0.0 }));
                let x = f.x0 + ix as f64 * cw;
                let y = f.y0 + f.h - (iy + 1) as f64 * ch;
                let _ = writeln!(body, r#"<rect x="{x:.2}" y="{y:.2}" width="{cw:.2}" height="{ch:.2}" fill="{fill}"/>"#);
            }
        }
        f.axes(&mut body, "final x", "final y");
        let _ = writeln!(body, r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{label}</text>"#, f.x0 + f.w / 2.0, f.y0 - 8.0);
    }
    let _ = writeln!(body, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">color scale 0 to {} (grey: no data)</text>"#, width / 2.0, H - 8.0, fmt_tick(vmax));
    Figure { name: "regional_mae".into(), svg: document("Regional final-position MAE", width, &body) }
}

/// Distributions of per-trajectory final-position MAE on shared bins.
pub fn mae_histograms(cnf: &[f64], vsde: &[f64]) -> Figure {
    let all: Vec<f64> = cnf.iter().chain(vsde).copied().collect();
    let mut body = String::new();
    if let Ok(shared) = Histogram::from_samples(&all, MAE_BINS) {
        let (lo, hi) = (shared.edges[0], shared.edges[MAE_BINS]);
        let hists: Vec<Histogram> = [cnf, vsde].iter().filter_map(|s| Histogram::with_range(s, MAE_BINS, lo, hi).ok()).collect();
        let cmax = hists.iter().flat_map(|h| h.counts.iter()).copied().max().unwrap_or(1).max(1) as f64;
        let f = Frame::new(MARGIN, MARGIN, W - 2.0 * MARGIN, H - 2.0 * MARGIN, [Vec2::new(lo, 0.0), Vec2::new(hi, cmax)].into_iter());
        for (h, color) in hists.iter().zip(["#999999", PALETTE[0]]) {
            for (k, &c) in h.counts.iter().enumerate() {
                let (x1, y1) = f.px(Vec2::new(h.edges[k], c as f64));
                let (x2, y2) = f.px(Vec2::new(h.edges[k + 1], 0.0));
                let _ = writeln!(body, r#"<rect x="{x1:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.55"/>"#, x2 - x1, y2 - y1);
            }
        }
        f.axes(&mut body, "final-position MAE", "trajectories");
        legend(&mut body, W - MARGIN - 110.0, MARGIN + 14.0, &[("CNF", "#999999", None), ("VSDE", PALETTE[0], None)]);
    }
    Figure { name: "mae_histogram".into(), svg: document("Distribution of final-position MAE", W, &body) }
}

/// Scatter of finite-difference velocities in the (v_x, v_y) plane.
pub fn phase_space(sets: &[(&str, &[Vec2])]) -> Figure {
    let f = Frame::new(MARGIN, MARGIN, W - 2.0 * MARGIN, H - 2.0 * MARGIN, sets.iter().flat_map(|(_, p)| p.iter().copied()));
    let mut body = String::new();
    for (k, (_, pts)) in sets.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        for p in pts.iter().filter(|p| p.is_finite()) {
            let (x, y) = f.px(*p);
            let _ = writeln!(body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.4" fill="{c}" fill-opacity="0.5"/>"#);
        }
    }
    f.axes(&mut body, "v_x", "v_y");
    let entries: Vec<(&str, &str, Option<&str>)> = sets.iter().enumerate().map(|(k, (l, _))| (*l, PALETTE[k % PALETTE.len()], None)).collect();
    legend(&mut body, W - MARGIN - 110.0, MARGIN + 14.0, &entries);
    Figure { name: "phase_space".into(), svg: document("Velocity phase space", W, &body) }
}
