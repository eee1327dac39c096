//! Plain SVG line, bar and heat-map charts, and the chart set rendered from
//! an experiment's metrics table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::experiment::{read_metrics_csv, scenario_label, MetricsRow, BASELINE_LABEL};

#[derive(Debug, Error)]
pub enum ChartError {
    #[error("cannot read metrics table: {0}")]
    Schema(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 30.0, 50.0, 60.0); // left, right, top, bottom

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

pub struct BarChart {
    pub title: String,
    pub y_label: String,
    pub categories: Vec<String>,
    /// One bar per category for each group; `None` leaves a gap.
    pub groups: Vec<(String, Vec<Option<f64>>)>,
}

pub struct Heatmap {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `values[y][x]`.
    pub values: Vec<Vec<f64>>,
    /// Values above the pivot shade green, below shade red.
    pub pivot: f64,
    pub curve: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.1 } else { 1.0 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    left: f64,
    top: f64,
    w: f64,
    h: f64,
}

impl Frame {
    fn new(left: f64, top: f64, w: f64, h: f64, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) -> Self {
        Self { x0, x1, y0, y1, left, top, w, h }
    }

    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x0) / (self.x1 - self.x0) * self.w
    }

    fn py(&self, y: f64) -> f64 {
        self.top + self.h - (y - self.y0) / (self.y1 - self.y0) * self.h
    }

    fn axes(&self, out: &mut String, x_label: &str, y_label: &str, x_ticks: bool) {
        let (l, t, w, h) = (self.left, self.top, self.w, self.h);
        let _ = writeln!(out, r##"<rect x="{l}" y="{t}" width="{w}" height="{h}" fill="none" stroke="#333"/>"##);
        for k in 0..=4 {
            let v = self.y0 + (self.y1 - self.y0) * k as f64 / 4.0;
            let y = self.py(v);
            let _ = writeln!(
                out,
                r##"<line x1="{l}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"##,
                l + w,
                l - 6.0,
                y + 4.0,
                num(v)
            );
            if x_ticks {
                let v = self.x0 + (self.x1 - self.x0) * k as f64 / 4.0;
                let _ = writeln!(
                    out,
                    r##"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"##,
                    self.px(v),
                    t + h + 16.0,
                    num(v)
                );
            }
        }
        let _ = writeln!(
            out,
            r##"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"##,
            l + w / 2.0,
            t + h + 36.0,
            esc(x_label)
        );
        let (yx, yy) = (l - 50.0, t + h / 2.0);
        let _ = writeln!(
            out,
            r##"<text x="{yx:.1}" y="{yy:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 {yx:.1} {yy:.1})">{}</text>"##,
            esc(y_label)
        );
    }
}

fn open(out: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"##
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="white"/>"##);
    let _ = writeln!(
        out,
        r##"<text x="{:.1}" y="24" font-size="15" text-anchor="middle">{}</text>"##,
        width / 2.0,
        esc(title)
    );
}

fn legend(out: &mut String, labels: &[&str], x: f64, y: f64) {
    for (i, label) in labels.iter().enumerate() {
        let yy = y + i as f64 * 16.0;
        let _ = writeln!(
            out,
            r##"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"##,
            yy - 9.0,
            PALETTE[i % PALETTE.len()],
            x + 14.0,
            yy,
            esc(label)
        );
    }
}

pub struct Svg;

impl Svg {
    pub fn line_chart(chart: &LineChart) -> String {
        let mut out = String::new();
        open(&mut out, WIDTH, HEIGHT, &chart.title);
        let pts = || chart.series.iter().flat_map(|s| s.points.iter());
        let frame = Frame::new(
            MARGIN.0,
            MARGIN.2,
            WIDTH - MARGIN.0 - MARGIN.1 - 110.0,
            HEIGHT - MARGIN.2 - MARGIN.3,
            padded_range(pts().map(|p| p.0)),
            padded_range(pts().map(|p| p.1)),
        );
        frame.axes(&mut out, &chart.x_label, &chart.y_label, true);
        for (i, s) in chart.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let path: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", frame.px(x), frame.py(y))).collect();
            let _ = writeln!(out, r##"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"##, path.join(" "));
            for &(x, y) in &s.points {
                let _ = writeln!(out, r##"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"##, frame.px(x), frame.py(y));
            }
        }
        let labels: Vec<&str> = chart.series.iter().map(|s| s.label.as_str()).collect();
        legend(&mut out, &labels, WIDTH - 130.0, MARGIN.2 + 10.0);
        out.push_str("</svg>\n");
        out
    }

    pub fn bar_chart(chart: &BarChart) -> String {
        let mut out = String::new();
        open(&mut out, WIDTH, HEIGHT, &chart.title);
        let values = || chart.groups.iter().flat_map(|g| g.1.iter().flatten().copied());
        let (lo, hi) = padded_range(values().chain([0.0]));
        let frame = Frame::new(MARGIN.0, MARGIN.2, WIDTH - MARGIN.0 - MARGIN.1 - 110.0, HEIGHT - MARGIN.2 - MARGIN.3, (0.0, 1.0), (lo, hi));
        frame.axes(&mut out, "", &chart.y_label, false);
        let n_cat = chart.categories.len().max(1) as f64;
        let slot = frame.w / n_cat;
        let bar = slot * 0.8 / chart.groups.len().max(1) as f64;
        let zero = frame.py(0.0);
        let _ = writeln!(out, r##"<line x1="{}" y1="{zero:.1}" x2="{}" y2="{zero:.1}" stroke="#333"/>"##, frame.left, frame.left + frame.w);
        for (c, cat) in chart.categories.iter().enumerate() {
            let cx = frame.left + slot * (c as f64 + 0.5);
            let _ = writeln!(
                out,
                r##"<text x="{cx:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"##,
                frame.top + frame.h + 16.0,
                esc(cat)
            );
            for (g, (_, vals)) in chart.groups.iter().enumerate() {
                let x = frame.left + slot * c as f64 + slot * 0.1 + bar * g as f64;
                match vals.get(c).copied().flatten() {
                    Some(v) => {
                        let y = frame.py(v);
                        let _ = writeln!(
                            out,
                            r##"<rect x="{x:.1}" y="{:.1}" width="{bar:.1}" height="{:.1}" fill="{}"><title>{}</title></rect>"##,
                            y.min(zero),
                            (y - zero).abs(),
                            PALETTE[g % PALETTE.len()],
                            num(v)
                        );
                    }
                    None => {
                        let _ = writeln!(
                            out,
                            r##"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="middle">n/a</text>"##,
                            x + bar / 2.0,
                            zero - 4.0
                        );
                    }
                }
            }
        }
        let labels: Vec<&str> = chart.groups.iter().map(|g| g.0.as_str()).collect();
        legend(&mut out, &labels, WIDTH - 130.0, MARGIN.2 + 10.0);
        out.push_str("</svg>\n");
        out
    }

    pub fn heatmap_panels(title: &str, panels: &[Heatmap]) -> String {
        let panel_w = 300.0;
        let width = MARGIN.0 + panels.len() as f64 * (panel_w + MARGIN.0) + MARGIN.1;
        let mut out = String::new();
        open(&mut out, width, HEIGHT, title);
        for (i, p) in panels.iter().enumerate() {
            let edges = |v: &[f64]| -> Vec<f64> {
                if v.len() == 1 {
                    return vec![v[0] - 0.5, v[0] + 0.5];
                }
                let mut e = vec![v[0] - (v[1] - v[0]) / 2.0];
                e.extend(v.windows(2).map(|w| (w[0] + w[1]) / 2.0));
                e.push(v[v.len() - 1] + (v[v.len() - 1] - v[v.len() - 2]) / 2.0);
                e
            };
            let (xe, ye) = (edges(&p.xs), edges(&p.ys));
            let left = MARGIN.0 + i as f64 * (panel_w + MARGIN.0);
            let frame = Frame::new(
                left,
                MARGIN.2,
                panel_w,
                HEIGHT - MARGIN.2 - MARGIN.3,
                (xe[0], xe[xe.len() - 1]),
                (ye[0], ye[ye.len() - 1]),
            );
            let spread = p.values.iter().flatten().map(|v| (v - p.pivot).abs()).fold(1e-12, f64::max);
            for (yi, row) in p.values.iter().enumerate() {
                for (xi, &v) in row.iter().enumerate() {
                    let a = ((v - p.pivot).abs() / spread * 0.85 + 0.1).min(1.0);
                    let color = if v >= p.pivot { "#2ca02c" } else { "#d62728" };
                    let (x0, x1) = (frame.px(xe[xi]), frame.px(xe[xi + 1]));
                    let (y0, y1) = (frame.py(ye[yi + 1]), frame.py(ye[yi]));
                    let _ = writeln!(
                        out,
                        r##"<rect x="{x0:.1}" y="{y0:.1}" width="{:.1}" height="{:.1}" fill="{color}" fill-opacity="{a:.3}"><title>{}</title></rect>"##,
                        x1 - x0,
                        y1 - y0,
                        num(v)
                    );
                }
            }
            let clip = format!("clip{i}");
            let _ = writeln!(
                out,
                r##"<clipPath id="{clip}"><rect x="{}" y="{}" width="{}" height="{}"/></clipPath>"##,
                frame.left, frame.top, frame.w, frame.h
            );
            let path: Vec<String> = p.curve.iter().map(|&(x, y)| format!("{:.1},{:.1}", frame.px(x), frame.py(y))).collect();
            let _ = writeln!(
                out,
                r##"<polyline clip-path="url(#{clip})" fill="none" stroke="black" stroke-width="2" stroke-dasharray="6 3" points="{}"/>"##,
                path.join(" ")
            );
            frame.axes(&mut out, &p.x_label, &p.y_label, true);
            let _ = writeln!(
                out,
                r##"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"##,
                left + panel_w / 2.0,
                MARGIN.2 - 6.0,
                esc(&p.title)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Metrics plotted against the discount ratio, with axis labels.
pub const LINE_METRICS: [(&str, &str); 12] = [
    ("revenue", "revenue (CNY)"),
    ("service_rate", "service rate"),
    ("avg_scheduled_requests", "avg scheduled requests"),
    ("emission_factor", "g CO2 per delivered km"),
    ("mean_matching_time", "matching time (s)"),
    ("mean_pickup_time", "pickup time (s)"),
    ("mean_waiting_time", "waiting time (s)"),
    ("ssr", "SSR"),
    ("sdr", "SDR"),
    ("ddr", "DDR"),
    ("mean_saved_distance", "saved distance (m)"),
    ("mean_saved_co2", "saved CO2 (g)"),
];

/// Metrics compared against the pure-solo baseline.
pub const CHANGE_METRICS: [(&str, &str); 5] = [
    ("service_rate", "service rate"),
    ("emission_factor", "emission factor"),
    ("avg_scheduled_requests", "occupancy"),
    ("mean_waiting_time", "waiting time"),
    ("revenue", "revenue"),
];

/// The discount and detour at which the baseline comparison is drawn.
pub const REFERENCE_CELL: (f64, f64) = (0.2, 0.3);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChartReport {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

fn write(path: PathBuf, body: String, report: &mut ChartReport) -> Result<(), ChartError> {
    std::fs::write(&path, body).map_err(|source| ChartError::Io { path: path.clone(), source })?;
    report.files.push(path);
    Ok(())
}

/// Line charts per metric and detour guarantee, the change-versus-baseline
/// bar chart and the zone-class panel.
pub fn render_charts(rows: &[MetricsRow], out_dir: &Path) -> Result<ChartReport, ChartError> {
    std::fs::create_dir_all(out_dir).map_err(|source| ChartError::Io { path: out_dir.into(), source })?;
    let mut report = ChartReport::default();
    let mut profiles: Vec<&str> = rows.iter().map(|r| r.profile.as_str()).collect();
    profiles.sort();
    profiles.dedup();
    let mut detours: Vec<f64> = rows.iter().filter_map(|r| r.detour).collect();
    detours.sort_by(f64::total_cmp);
    detours.dedup();

    for &detour in &detours {
        let label = scenario_label(detour);
        for (metric, axis) in LINE_METRICS {
            let series = profiles
                .iter()
                .map(|&profile| {
                    let mut by_theta: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
                    for r in rows.iter().filter(|r| r.profile == profile) {
                        if r.scenario == BASELINE_LABEL || r.detour.is_some_and(|d| same(d, detour)) {
                            if let Some(v) = r.metric(metric) {
                                by_theta.entry((r.discount * 1e6).round() as i64).or_default().push(v);
                            }
                        }
                    }
                    Series {
                        label: profile.to_string(),
                        points: by_theta.into_iter().filter_map(|(t, v)| Some((t as f64 / 1e6, mean(&v)?))).collect(),
                    }
                })
                .collect();
            let chart = LineChart {
                title: format!("{axis} vs discount, {label}"),
                x_label: "discount ratio".into(),
                y_label: axis.into(),
                series,
            };
            write(out_dir.join(format!("{metric}_{}.svg", label.to_lowercase())), Svg::line_chart(&chart), &mut report)?;
        }
    }

    let (theta, detour) = REFERENCE_CELL;
    let mut groups = Vec::new();
    for &profile in &profiles {
        let base: BTreeMap<u64, &MetricsRow> = rows
            .iter()
            .filter(|r| r.profile == profile && r.scenario == BASELINE_LABEL)
            .map(|r| (r.seed, r))
            .collect();
        let cells: Vec<&MetricsRow> = rows
            .iter()
            .filter(|r| r.profile == profile && same(r.discount, theta) && r.detour.is_some_and(|d| same(d, detour)))
            .collect();
        let paired: Vec<(&MetricsRow, &MetricsRow)> = cells.iter().filter_map(|c| Some((base.get(&c.seed).copied()?, *c))).collect();
        if paired.is_empty() {
            report.warnings.push(format!("profile {profile}: no baseline paired with discount {theta}, detour {detour}"));
            continue;
        }
        let values = CHANGE_METRICS
            .iter()
            .map(|(m, _)| {
                let changes: Vec<f64> = paired
                    .iter()
                    .filter_map(|(b, c)| {
                        let (b, c) = (b.metric(m)?, c.metric(m)?);
                        (b != 0.0).then(|| 100.0 * (c - b) / b)
                    })
                    .collect();
                mean(&changes)
            })
            .collect();
        groups.push((profile.to_string(), values));
    }
    if groups.is_empty() {
        report.warnings.push("baseline missing; percentage-change chart skipped".into());
    } else {
        let chart = BarChart {
            title: format!("change vs pure solo at discount {theta}, {}", scenario_label(detour)),
            y_label: "change (%)".into(),
            categories: CHANGE_METRICS.iter().map(|(_, l)| l.to_string()).collect(),
            groups,
        };
        write(out_dir.join("change_vs_baseline.svg"), Svg::bar_chart(&chart), &mut report)?;
    }

    for &profile in &profiles {
        let cells: Vec<&MetricsRow> = rows
            .iter()
            .filter(|r| r.profile == profile && same(r.discount, theta) && r.detour.is_some_and(|d| same(d, detour)))
            .collect();
        if cells.is_empty() {
            report.warnings.push(format!("profile {profile}: no discount {theta}, detour {detour} rows; zone panel skipped"));
            continue;
        }
        let classes = ["cold", "normal", "hot"];
        let groups = ["ssr", "sdr", "ddr"]
            .iter()
            .map(|stat| {
                let vals = classes
                    .iter()
                    .map(|class| {
                        let v: Vec<f64> = cells.iter().filter_map(|r| r.metric(&format!("{stat}_{class}"))).collect();
                        mean(&v)
                    })
                    .collect();
                (stat.to_uppercase(), vals)
            })
            .collect();
        let chart = BarChart {
            title: format!("{profile}: ride-sharing by zone class"),
            y_label: "ratio".into(),
            categories: classes.iter().map(|c| c.to_string()).collect(),
            groups,
        };
        write(out_dir.join(format!("zones_{profile}.svg")), Svg::bar_chart(&chart), &mut report)?;
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(report)
}

pub fn render_charts_from_csv(metrics_csv: &Path, out_dir: &Path) -> Result<ChartReport, ChartError> {
    let rows = read_metrics_csv(metrics_csv).map_err(|e| ChartError::Schema(e.to_string()))?;
    render_charts(&rows, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_format() {
        assert_eq!(num(1.0), "1");
        assert_eq!(num(0.125), "0.125");
        assert_eq!(num(-0.0001), "0");
        assert_eq!(num(2.5), "2.5");
    }

    #[test]
    fn line_chart_has_one_marker_per_point() {
        let chart = LineChart {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series { label: "a".into(), points: vec![(0.0, 1.0)] }],
        };
        let svg = Svg::line_chart(&chart);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn bar_gaps_are_labelled() {
        let chart = BarChart {
            title: "t".into(),
            y_label: "y".into(),
            categories: vec!["a".into(), "b".into()],
            groups: vec![("g".into(), vec![Some(-3.0), None])],
        };
        let svg = Svg::bar_chart(&chart);
        assert_eq!(svg.matches("n/a").count(), 1);
        assert_eq!(svg.matches("<title>").count(), 1);
    }
}
