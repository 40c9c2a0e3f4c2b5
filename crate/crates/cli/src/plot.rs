//! SVG line charts of metrics logs.
//!
//! Rows are grouped into series by method, arm and scaling magnitude, and
//! averaged over seeds at each epoch. Warm-start accuracy charts also draw a
//! dashed horizontal line at every series' final value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use swr_core::protocols::{ProtocolKind, RunRecord};

use crate::error::{CliError, Result};
use crate::metrics_log::read_metrics;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantity {
    Accuracy,
    Balance,
}

impl Quantity {
    pub fn label(self) -> &'static str {
        match self {
            Quantity::Accuracy => "test accuracy",
            Quantity::Balance => "mean balance",
        }
    }

    fn of(self, r: &RunRecord) -> f64 {
        match self {
            Quantity::Accuracy => r.test_acc,
            Quantity::Balance => r.balance_mean,
        }
    }
}

impl std::str::FromStr for Quantity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "accuracy" => Ok(Quantity::Accuracy),
            "balance" => Ok(Quantity::Balance),
            other => Err(format!("unknown quantity `{other}` (accuracy or balance)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    /// `(epoch, mean over seeds)`, ordered by epoch.
    pub points: Vec<(f64, f64)>,
}

pub fn series(rows: &[RunRecord], quantity: Quantity) -> Vec<Series> {
    let mut groups: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in rows {
        let mut name = r.method.clone();
        if r.arm != "main" {
            name = format!("{name} {}", r.arm);
        }
        if let Some(m) = r.magnitude {
            name = format!("{name} x{m}");
        }
        let slot = groups.entry(name).or_default().entry(r.epoch).or_insert((0.0, 0));
        slot.0 += quantity.of(r);
        slot.1 += 1;
    }
    groups
        .into_iter()
        .map(|(name, pts)| Series {
            name,
            points: pts.into_iter().map(|(e, (s, n))| (e as f64, s / n as f64)).collect(),
        })
        .collect()
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(f64::EPSILON);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders the rows as an SVG document.
pub fn render(rows: &[RunRecord], quantity: Quantity, title: &str) -> Result<String> {
    let all = series(rows, quantity);
    let all: Vec<Series> = all.into_iter().filter(|s| !s.points.is_empty()).collect();
    if all.is_empty() {
        return Err(CliError::Other("nothing to plot: the metrics log is empty".into()));
    }
    let dashed = quantity == Quantity::Accuracy && rows.iter().any(|r| r.protocol == ProtocolKind::WarmStart);

    let points = all.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        if y.is_finite() {
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !y0.is_finite() {
        return Err(CliError::Other("nothing to plot: no finite values".into()));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let (y0, y1) = (y0 - pad, y1 + pad);

    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for t in ticks(x0, x1) {
        let x = sx(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#ddd"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"##,
            TOP,
            TOP + ph,
            TOP + ph + 16.0,
            fmt_tick(t)
        );
    }
    for t in ticks(y0, y1) {
        let y = sy(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        TOP + ph / 2.0,
        quantity.label()
    );

    for (k, s) in all.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(_, y)| y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
            pts.join(" "),
            escape(&s.name)
        );
        if dashed {
            if let Some(&(_, last)) = s.points.iter().rev().find(|(_, y)| y.is_finite()) {
                let y = sy(last);
                let _ = writeln!(
                    svg,
                    r#"<line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="{color}" stroke-dasharray="6 4"/>"#,
                    LEFT + pw
                );
            }
        }
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = LEFT + pw + 14.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Reads metrics logs and writes a chart to `out`.
pub fn emit_plot(metrics: &[&Path], out: &Path, quantity: Quantity) -> Result<()> {
    let mut rows = Vec::new();
    for p in metrics {
        rows.extend(read_metrics(p)?);
    }
    let title = metrics
        .iter()
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect::<Vec<_>>()
        .join(", ");
    let svg = render(&rows, quantity, &title)?;
    std::fs::write(out, svg).map_err(|e| CliError::Other(format!("{}: {e}", out.display())))
}
