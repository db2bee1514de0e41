//! Self-contained experiment reports: JSON (every per-record datum plus
//! aggregates), CSV flat tables, and hand-rolled SVG plots with no plotting
//! runtime dependency.
//!
//! A report file alone suffices to recompute every aggregate and redraw every
//! plot; the wall-clock field is the only thing that varies between identical
//! runs.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt::Write as _;
use std::path::Path;

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub tool_version: String,
    pub experiment: String,
    /// Echo of the configuration that produced this report.
    pub config: Value,
    /// Seconds of wall clock; excluded from determinism comparisons.
    pub wall_clock_secs: f64,
    /// Per-record data, enough to recompute every aggregate.
    pub records: Value,
    pub aggregates: Value,
}

impl Report {
    pub fn new(experiment: &str, config: Value, records: Value, aggregates: Value) -> Self {
        Report {
            format_version: REPORT_FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            experiment: experiment.to_string(),
            config,
            wall_clock_secs: 0.0,
            records,
            aggregates,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        atomic_write(path, &json)
    }
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Minimal CSV assembly; floats are written with Rust's shortest-round-trip
/// formatting, so identical data yields identical bytes.
pub struct Csv {
    out: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut out = String::new();
        out.push_str(&header.join(","));
        out.push('\n');
        Csv { out }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.out.push_str(&fields.join(","));
        self.out.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.out.as_bytes())
    }

    pub fn as_str(&self) -> &str {
        &self.out
    }
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "nan".to_string()
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| "".to_string())
}

// ─── SVG plotting ─────────────────────────────────────────────────────────────

const W: f64 = 760.0;
const H: f64 = 480.0;
const ML: f64 = 70.0; // left margin
const MR: f64 = 30.0;
const MT: f64 = 44.0;
const MB: f64 = 64.0;

const PALETTE: [&str; 6] = ["#c0392b", "#2980b9", "#e67e22", "#27ae60", "#8e44ad", "#7f8c8d"];

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"Helvetica,Arial,sans-serif\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick positions on a 1-2-5 progression covering [min, max].
fn nice_ticks(min: f64, max: f64) -> Vec<f64> {
    let range = (max - min).abs().max(1e-12);
    let raw = range / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm <= 1.5 {
        mag
    } else if norm <= 3.5 {
        2.0 * mag
    } else if norm <= 7.5 {
        5.0 * mag
    } else {
        10.0 * mag
    };
    let start = (min / step).floor() * step;
    let mut ticks = Vec::new();
    let mut t = start;
    while t <= max + step * 0.5 {
        if t >= min - step * 0.5 {
            ticks.push(t);
        }
        t += step;
    }
    ticks
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1000.0 || a < 0.01 {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        ML + (v - self.x_min) / (self.x_max - self.x_min) * (W - ML - MR)
    }

    fn y(&self, v: f64) -> f64 {
        H - MB - (v - self.y_min) / (self.y_max - self.y_min) * (H - MT - MB)
    }

    fn pad(y_min: f64, y_max: f64) -> (f64, f64) {
        if (y_max - y_min).abs() < 1e-12 {
            (y_min - 1.0, y_max + 1.0)
        } else {
            let pad = (y_max - y_min) * 0.08;
            (y_min - pad, y_max + pad)
        }
    }

    fn axes(&self, svg: &mut String, x_label: &str, y_label: &str) {
        let x0 = ML;
        let x1 = W - MR;
        let y0 = H - MB;
        let y1 = MT;
        let _ = write!(
            svg,
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
             <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
        );
        for t in nice_ticks(self.y_min, self.y_max) {
            let y = self.y(t);
            let _ = write!(
                svg,
                "<line x1=\"{}\" y1=\"{y:.2}\" x2=\"{x0}\" y2=\"{y:.2}\" stroke=\"black\"/>\n\
                 <line x1=\"{x0}\" y1=\"{y:.2}\" x2=\"{x1}\" y2=\"{y:.2}\" stroke=\"#eeeeee\"/>\n\
                 <text x=\"{}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
                x0 - 5.0,
                x0 - 8.0,
                y + 4.0,
                fmt_tick(t)
            );
        }
        for t in nice_ticks(self.x_min, self.x_max) {
            let x = self.x(t);
            let _ = write!(
                svg,
                "<line x1=\"{x:.2}\" y1=\"{y0}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"black\"/>\n\
                 <text x=\"{x:.2}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
                y0 + 5.0,
                y0 + 20.0,
                fmt_tick(t)
            );
        }
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n\
             <text x=\"16\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" \
             transform=\"rotate(-90 16 {})\">{}</text>\n",
            (ML + W - MR) / 2.0,
            H - 18.0,
            xml_escape(x_label),
            (MT + H - MB) / 2.0,
            (MT + H - MB) / 2.0,
            xml_escape(y_label)
        );
    }
}

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
    /// Optional symmetric error bars per point.
    pub err: Option<Vec<f64>>,
}

/// Multi-series line chart with error bars and a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut svg = svg_header(title);
    let all: Vec<(f64, f64, f64)> = series
        .iter()
        .flat_map(|s| {
            s.points.iter().enumerate().map(|(i, &(x, y))| {
                let e = s.err.as_ref().map(|e| e[i]).unwrap_or(0.0);
                (x, y - e, y + e)
            })
        })
        .collect();
    let x_min = all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y_lo = all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y_hi = all.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
    let (y_min, y_max) = Frame::pad(y_lo, y_hi);
    let frame = Frame {
        x_min,
        x_max: if (x_max - x_min).abs() < 1e-12 { x_min + 1.0 } else { x_max },
        y_min,
        y_max,
    };
    frame.axes(&mut svg, x_label, y_label);
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.x(x), frame.y(y)))
            .collect();
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            path.join(" ")
        );
        for (i, &(x, y)) in s.points.iter().enumerate() {
            let (px, py) = (frame.x(x), frame.y(y));
            let _ = write!(svg, "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2.6\" fill=\"{color}\"/>\n");
            if let Some(err) = &s.err {
                if err[i] > 0.0 {
                    let (ylo, yhi) = (frame.y(y - err[i]), frame.y(y + err[i]));
                    let _ = write!(
                        svg,
                        "<line x1=\"{px:.2}\" y1=\"{ylo:.2}\" x2=\"{px:.2}\" y2=\"{yhi:.2}\" \
                         stroke=\"{color}\" stroke-width=\"1\"/>\n"
                    );
                }
            }
        }
        let lx = ML + 12.0;
        let ly = MT + 14.0 + 16.0 * si as f64;
        let _ = write!(
            svg,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"11\">{}</text>\n",
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            xml_escape(s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Vertical bar chart with optional error bars.
pub fn bar_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    labels: &[String],
    values: &[f64],
    err: Option<&[f64]>,
) -> String {
    let mut svg = svg_header(title);
    let y_lo = values
        .iter()
        .enumerate()
        .map(|(i, &v)| v - err.map(|e| e[i]).unwrap_or(0.0))
        .fold(0.0f64, f64::min);
    let y_hi = values
        .iter()
        .enumerate()
        .map(|(i, &v)| v + err.map(|e| e[i]).unwrap_or(0.0))
        .fold(0.0f64, f64::max);
    let (y_min, y_max) = Frame::pad(y_lo, y_hi);
    let frame = Frame { x_min: 0.0, x_max: values.len() as f64, y_min, y_max };
    frame.axes(&mut svg, x_label, y_label);
    let slot = (W - ML - MR) / values.len() as f64;
    let bar_w = slot * 0.7;
    let y_zero = frame.y(0.0);
    for (i, &v) in values.iter().enumerate() {
        let x = ML + slot * i as f64 + (slot - bar_w) / 2.0;
        let y = frame.y(v);
        let (top, height) = if v >= 0.0 { (y, y_zero - y) } else { (y_zero, y - y_zero) };
        let _ = write!(
            svg,
            "<rect x=\"{x:.2}\" y=\"{top:.2}\" width=\"{bar_w:.2}\" height=\"{:.2}\" \
             fill=\"#2980b9\" fill-opacity=\"0.8\"/>\n",
            height.max(0.0)
        );
        if let Some(e) = err {
            let cx = x + bar_w / 2.0;
            let (ylo, yhi) = (frame.y(v - e[i]), frame.y(v + e[i]));
            let _ = write!(
                svg,
                "<line x1=\"{cx:.2}\" y1=\"{ylo:.2}\" x2=\"{cx:.2}\" y2=\"{yhi:.2}\" \
                 stroke=\"#1a1a1a\" stroke-width=\"1\"/>\n"
            );
        }
        if labels.len() <= 40 {
            let cx = x + bar_w / 2.0;
            let _ = write!(
                svg,
                "<text x=\"{cx:.2}\" y=\"{}\" font-size=\"9\" text-anchor=\"end\" \
                 transform=\"rotate(-45 {cx:.2} {})\">{}</text>\n",
                H - MB + 14.0,
                H - MB + 14.0,
                xml_escape(&labels[i])
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Heatmap over a rows × cols matrix, diverging palette centered at zero.
pub fn heatmap(
    title: &str,
    row_labels: &[String],
    col_labels: &[String],
    matrix: &[Vec<f64>],
) -> String {
    let mut svg = svg_header(title);
    let rows = matrix.len();
    let cols = matrix[0].len();
    let extent = matrix
        .iter()
        .flatten()
        .map(|v| v.abs())
        .fold(1e-12f64, f64::max);
    let cw = (W - ML - MR) / cols as f64;
    let ch = (H - MT - MB) / rows as f64;
    for (r, row) in matrix.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let t = (v / extent).clamp(-1.0, 1.0);
            // Blue (negative) → white → red (positive).
            let (rr, gg, bb) = if t >= 0.0 {
                (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
            } else {
                (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
            };
            let _ = write!(
                svg,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{cw:.2}\" height=\"{ch:.2}\" \
                 fill=\"rgb({rr:.0},{gg:.0},{bb:.0})\" stroke=\"#cccccc\" stroke-width=\"0.4\"/>\n",
                ML + cw * c as f64,
                MT + ch * r as f64
            );
        }
    }
    for (r, label) in row_labels.iter().enumerate() {
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
            ML - 6.0,
            MT + ch * (r as f64 + 0.5) + 3.0,
            xml_escape(label)
        );
    }
    for (c, label) in col_labels.iter().enumerate() {
        let _ = write!(
            svg,
            "<text x=\"{:.2}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            ML + cw * (c as f64 + 0.5),
            H - MB + 16.0,
            xml_escape(label)
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">max |value| = {}</text>\n",
        W / 2.0,
        H - 18.0,
        fmt_tick(extent)
    );
    svg.push_str("</svg>\n");
    svg
}

/// Box plot: median, quartile box, min/max whiskers, and jittered points.
pub fn box_plot(title: &str, y_label: &str, groups: &[(String, Vec<f64>)]) -> String {
    let mut svg = svg_header(title);
    let y_lo = groups
        .iter()
        .flat_map(|(_, v)| v.iter().cloned())
        .fold(f64::INFINITY, f64::min);
    let y_hi = groups
        .iter()
        .flat_map(|(_, v)| v.iter().cloned())
        .fold(f64::NEG_INFINITY, f64::max);
    let (y_min, y_max) = Frame::pad(y_lo, y_hi);
    let frame = Frame { x_min: 0.0, x_max: groups.len() as f64, y_min, y_max };
    frame.axes(&mut svg, "", y_label);
    let slot = (W - ML - MR) / groups.len() as f64;
    for (gi, (label, values)) in groups.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let q = |f: f64| {
            let idx = f * (sorted.len() - 1) as f64;
            let lo = idx.floor() as usize;
            let hi = idx.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (idx - lo as f64)
        };
        let (q1, med, q3) = (q(0.25), q(0.5), q(0.75));
        let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
        let cx = ML + slot * (gi as f64 + 0.5);
        let bw = slot * 0.4;
        let _ = write!(
            svg,
            "<line x1=\"{cx:.2}\" y1=\"{:.2}\" x2=\"{cx:.2}\" y2=\"{:.2}\" stroke=\"{color}\"/>\n\
             <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{bw:.2}\" height=\"{:.2}\" fill=\"{color}\" \
             fill-opacity=\"0.25\" stroke=\"{color}\"/>\n\
             <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            frame.y(lo),
            frame.y(hi),
            cx - bw / 2.0,
            frame.y(q3),
            (frame.y(q1) - frame.y(q3)).max(0.5),
            cx - bw / 2.0,
            frame.y(med),
            cx + bw / 2.0,
            frame.y(med),
        );
        // Deterministic jitter from the value index.
        for (i, &v) in values.iter().enumerate() {
            let jitter = ((i * 2654435761) % 1000) as f64 / 1000.0 - 0.5;
            let _ = write!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.6\" fill=\"{color}\" fill-opacity=\"0.5\"/>\n",
                cx + jitter * bw * 0.8,
                frame.y(v)
            );
        }
        let _ = write!(
            svg,
            "<text x=\"{cx:.2}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 18.0,
            xml_escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Scatter with an identity line, for paired per-prompt comparisons.
pub fn scatter_identity(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let mut svg = svg_header(title);
    let lo = points
        .iter()
        .flat_map(|&(x, y)| [x, y])
        .fold(f64::INFINITY, f64::min);
    let hi = points
        .iter()
        .flat_map(|&(x, y)| [x, y])
        .fold(f64::NEG_INFINITY, f64::max);
    let (y_min, y_max) = Frame::pad(lo, hi);
    let frame = Frame { x_min: y_min, x_max: y_max, y_min, y_max };
    frame.axes(&mut svg, x_label, y_label);
    let _ = write!(
        svg,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#888888\" \
         stroke-dasharray=\"5,4\"/>\n",
        frame.x(y_min),
        frame.y(y_min),
        frame.x(y_max),
        frame.y(y_max)
    );
    for &(x, y) in points {
        let _ = write!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#c0392b\" fill-opacity=\"0.7\"/>\n",
            frame.x(x),
            frame.y(y)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips() {
        let r = Report::new(
            "demo",
            serde_json::json!({"n": 3}),
            serde_json::json!([1, 2, 3]),
            serde_json::json!({"mean": 2.0}),
        );
        let dir = std::env::temp_dir().join("triglab-report-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("r.json");
        r.write_json(&path).unwrap();
        let back: Report = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(back.experiment, "demo");
        assert_eq!(back.aggregates["mean"], 2.0);
    }

    #[test]
    fn csv_bytes_are_deterministic() {
        let build = || {
            let mut c = Csv::new(&["a", "b"]);
            c.row(&[fmt_f64(1.5), fmt_f64(-0.25)]);
            c.row(&[fmt_f64(f64::NAN), fmt_opt(None)]);
            c.out
        };
        assert_eq!(build(), build());
        assert_eq!(build(), "a,b\n1.5,-0.25\nnan,\n");
    }

    #[test]
    fn svg_plots_are_well_formed() {
        let s = line_chart(
            "t",
            "x",
            "y",
            &[Series { label: "a", points: vec![(0.0, 1.0), (1.0, 2.0)], err: Some(vec![0.1, 0.2]) }],
        );
        assert!(s.starts_with("<svg"));
        assert!(s.ends_with("</svg>\n"));
        let b = bar_chart(
            "t",
            "x",
            "y",
            &["one".into(), "two".into()],
            &[1.0, -0.5],
            Some(&[0.1, 0.1]),
        );
        assert!(b.contains("<rect"));
        let h = heatmap("t", &["r0".into()], &["c0".into(), "c1".into()], &[vec![0.5, -0.5]]);
        assert!(h.contains("rgb("));
        let bx = box_plot("t", "y", &[("g".into(), vec![1.0, 2.0, 3.0, 4.0])]);
        assert!(bx.contains("<circle"));
        let sc = scatter_identity("t", "x", "y", &[(1.0, 1.1), (2.0, 1.9)]);
        assert!(sc.contains("stroke-dasharray"));
    }

    #[test]
    fn ticks_cover_range() {
        let t = nice_ticks(0.0, 100.0);
        assert!(t.first().copied().unwrap() <= 1.0);
        assert!(t.last().copied().unwrap() >= 99.0);
        let t = nice_ticks(-3.3, 7.7);
        assert!(t.iter().any(|&v| v == 0.0));
    }
}
