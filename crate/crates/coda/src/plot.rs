//! SVG line charts and CSV curve exports for metrics streams.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use coda_core::probe::{KnnAccuracy, MetricsRecord};

use crate::error::{Error, Result};
use crate::metrics::read_jsonl;

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 400.0;
pub const MARGIN: f64 = 50.0;

const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Data-to-pixel transform of a chart's plotting area.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Frame {
    /// Bounds covering every point; degenerate ranges are widened by one unit.
    pub fn fit(series: &[Series], y_fixed: Option<(f64, f64)>) -> Self {
        let pts = || series.iter().flat_map(|s| s.points.iter());
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        let x = span(&mut pts().map(|p| p.0));
        let y = y_fixed.unwrap_or_else(|| span(&mut pts().map(|p| p.1)));
        Self { x, y }
    }

    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let w = WIDTH - 2.0 * MARGIN;
        let h = HEIGHT - 2.0 * MARGIN;
        let px = MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * w;
        let py = MARGIN + (1.0 - (y - self.y.0) / (self.y.1 - self.y.0)) * h;
        (px, py)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn line_chart(title: &str, x_label: &str, series: &[Series], y_fixed: Option<(f64, f64)>) -> String {
    let f = Frame::fit(series, y_fixed);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, y0) = f.map(f.x.0, f.y.0);
    let (x1, y1) = f.map(f.x.1, f.y.1);
    let _ = writeln!(
        s,
        r#"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y0 - y1
    );
    let _ = writeln!(s, r#"<text x="{:.2}" y="30" text-anchor="middle" font-size="16">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    for (v, anchor, px, py) in [
        (f.x.0, "start", x0, y0 + 15.0),
        (f.x.1, "end", x1, y0 + 15.0),
        (f.y.0, "end", x0 - 4.0, y0),
        (f.y.1, "end", x0 - 4.0, y1 + 4.0),
    ] {
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{py:.2}" text-anchor="{anchor}" font-size="11">{v}</text>"#);
    }
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| {
                let (px, py) = f.map(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" data-series="{}" points="{}"/>"#,
            escape(&ser.name),
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" fill="{color}">{}</text>"#,
            x1 - 110.0,
            y1 + 16.0 + 14.0 * i as f64,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Extracts polyline vertices per series from a chart written by `line_chart`.
pub fn polylines(svg: &str) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut out = Vec::new();
    for line in svg.lines().filter(|l| l.starts_with("<polyline")) {
        let attr = |key: &str| {
            let start = line.find(&format!("{key}=\""))? + key.len() + 2;
            let end = start + line[start..].find('"')?;
            Some(&line[start..end])
        };
        let (Some(name), Some(points)) = (attr("data-series"), attr("points")) else {
            continue;
        };
        let pts = points
            .split_whitespace()
            .filter_map(|p| {
                let (x, y) = p.split_once(',')?;
                Some((x.parse().ok()?, y.parse().ok()?))
            })
            .collect();
        out.push((name.to_string(), pts));
    }
    out
}

type Column = (&'static str, fn(&MetricsRecord) -> Option<f64>);

const CURVES: [Column; 5] = [
    ("acc_tgt_1", |r| Some(r.acc_tgt_1)),
    ("acc_tgt_2", |r| r.acc_tgt_2),
    ("acc_src_1", |r| Some(r.acc_src_1)),
    ("acc_src_2", |r| r.acc_src_2),
    ("agree", |r| r.agree),
];

pub fn accuracy_series(records: &[MetricsRecord]) -> Vec<Series> {
    CURVES
        .iter()
        .filter_map(|(name, get)| {
            let points: Vec<(f64, f64)> = records.iter().filter_map(|r| Some((r.iter as f64, get(r)?))).collect();
            (!points.is_empty()).then(|| Series {
                name: (*name).into(),
                points,
            })
        })
        .collect()
}

pub fn knn_series(knn: &[KnnAccuracy]) -> Series {
    Series {
        name: "knn_acc".into(),
        points: knn.iter().map(|k| (k.k as f64, k.acc)).collect(),
    }
}

#[derive(Debug, Default, PartialEq)]
pub struct PlotReport {
    pub written: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn write(path: PathBuf, body: &str, report: &mut PlotReport) -> Result<()> {
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    report.written.push(path);
    Ok(())
}

fn csv_text(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(&r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `accuracy.svg` + `curves.csv`, and `knn.svg` + `knn.csv` when the
/// stream carries probe results (the last such record is used).
pub fn emit_plots(records: &[MetricsRecord], out_dir: &Path) -> Result<PlotReport> {
    let mut report = PlotReport::default();
    if records.is_empty() {
        report.warnings.push("empty metrics stream; no plot written".into());
        return Ok(report);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let series = accuracy_series(records);
    write(
        out_dir.join("accuracy.svg"),
        &line_chart("accuracy and agreement", "iteration", &series, Some((0.0, 1.0))),
        &mut report,
    )?;
    let mut header = vec!["iter"];
    header.extend(CURVES.iter().map(|c| c.0));
    let rows = records.iter().map(|r| {
        let mut row = vec![r.iter.to_string()];
        row.extend(CURVES.iter().map(|(_, g)| opt(g(r))));
        row
    });
    write(out_dir.join("curves.csv"), &csv_text(&header, rows), &mut report)?;

    if let Some(knn) = records.iter().rev().find_map(|r| r.knn.as_ref()) {
        let s = knn_series(knn);
        write(out_dir.join("knn.svg"), &line_chart("kNN target accuracy", "k", &[s], Some((0.0, 1.0))), &mut report)?;
        let rows = knn.iter().map(|k| vec![k.k.to_string(), k.acc.to_string()]);
        write(out_dir.join("knn.csv"), &csv_text(&["k", "acc"], rows), &mut report)?;
    }
    Ok(report)
}

pub fn plot_file(metrics: &Path, out_dir: &Path) -> Result<PlotReport> {
    emit_plots(&read_jsonl(metrics)?, out_dir)
}
