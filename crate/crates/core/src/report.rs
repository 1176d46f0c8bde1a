//! Merges benchmark outputs into tables and draws simple SVG line plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bench::{self, BenchResult};
use crate::error::{Error, Result};
use crate::prune::PruneSummary;

/// One input to the report: benchmark results or a prune summary.
#[derive(Debug, Clone)]
pub enum ReportInput {
    Bench(Vec<BenchResult>),
    Prune(PruneSummary),
}

/// Loads a `.csv` benchmark table, a JSON benchmark array or a prune summary.
pub fn load_input(path: impl AsRef<Path>) -> Result<ReportInput> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "csv") {
        return bench::read_csv(path).map(ReportInput::Bench);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if value.is_array() {
        serde_json::from_value(value)
            .map(ReportInput::Bench)
            .map_err(|e| Error::json(path, e))
    } else {
        serde_json::from_value(value)
            .map(ReportInput::Prune)
            .map_err(|e| Error::json(path, e))
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReportFiles {
    pub written: Vec<PathBuf>,
}

/// Benchmark results sorted by `(shape, pattern, p)`.
pub fn merge_bench(inputs: impl IntoIterator<Item = BenchResult>) -> Vec<BenchResult> {
    let mut all: Vec<BenchResult> = inputs.into_iter().collect();
    all.sort_by(|a, b| {
        let (ka, kb) = (a.sort_key(), b.sort_key());
        ka.0.cmp(&kb.0)
            .then_with(|| ka.1.cmp(&kb.1))
            .then_with(|| a.p.total_cmp(&b.p))
            .then_with(|| (ka.3, ka.4, ka.5).cmp(&(kb.3, kb.4, kb.5)))
    });
    all
}

/// A named polyline for [`line_plot`].
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Minimal SVG line chart with axes, ticks and a legend.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;

    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= 0.0 {
        y1 = 1.0;
    }
    let y1 = y1 * 1.05;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - y / y1 * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y1 * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(fx),
            top + ph + 18.0,
            trim_num(fx)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(fy) + 4.0,
            trim_num(fy)
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            left + pw,
            sy(fy),
            sy(fy)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{:.1}" width="12" height="12" fill="{color}"/><text x="{}" y="{:.1}">{}</text>"#,
            w - right + 16.0,
            ly - 10.0,
            w - right + 34.0,
            ly,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn trim_num(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Latency-vs-rate series per executor (and `N` for 1xN) of one shape.
pub fn latency_series(results: &[BenchResult]) -> BTreeMap<String, Vec<Series>> {
    let mut by_shape: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in results {
        let label = match r.pattern {
            crate::pattern::Pattern::Block1xN => format!("{} {}x{} {}t", r.executor, 1, r.block, r.threads),
            p => format!("{} {p} {}t", r.executor, r.threads),
        };
        by_shape
            .entry(r.shape.to_string())
            .or_default()
            .entry(label)
            .or_default()
            .push((r.p, r.median_ns as f64 / 1e6));
    }
    by_shape
        .into_iter()
        .map(|(shape, lines)| {
            let series = lines
                .into_iter()
                .map(|(label, mut points)| {
                    points.sort_by(|a, b| a.0.total_cmp(&b.0));
                    Series { label, points }
                })
                .collect();
            (shape, series)
        })
        .collect()
}

/// Per-layer retained l1 fraction with and without rearrangement.
#[derive(Debug, Clone, PartialEq)]
pub struct RetainedRow {
    pub model: String,
    pub layer: String,
    pub p: f64,
    pub block: usize,
    pub total_l1: f64,
    pub without_rearrange: f64,
    pub with_rearrange: f64,
}

/// Rows from summaries produced with rearrangement enabled; other
/// summaries carry no comparison and are skipped.
pub fn retained_rows(summaries: &[PruneSummary]) -> Vec<RetainedRow> {
    summaries
        .iter()
        .flat_map(|s| {
            s.layers.iter().filter_map(move |l| {
                Some(RetainedRow {
                    model: s.model.clone(),
                    layer: l.id.clone(),
                    p: l.rate,
                    block: l.block,
                    total_l1: l.total_l1,
                    without_rearrange: l.retained_l1_without_rearrange?,
                    with_rearrange: l.retained_l1,
                })
            })
        })
        .collect()
}

/// Sorted fractions of retained mass, without and with rearrangement, drawn
/// as two curves over layer rank.
fn retained_plot(rows: &[RetainedRow]) -> String {
    let frac = |f: fn(&RetainedRow) -> f64| {
        let mut v: Vec<f64> = rows
            .iter()
            .map(|r| if r.total_l1 > 0.0 { f(r) / r.total_l1 } else { 0.0 })
            .collect();
        v.sort_by(f64::total_cmp);
        v.into_iter().enumerate().map(|(i, y)| (i as f64, y)).collect()
    };
    line_plot(
        "Retained l1 mass per layer",
        "layer rank",
        "retained fraction",
        &[
            Series {
                label: "without rearrangement".into(),
                points: frac(|r| r.without_rearrange),
            },
            Series {
                label: "with rearrangement".into(),
                points: frac(|r| r.with_rearrange),
            },
        ],
    )
}

fn write_file(path: PathBuf, contents: &str, files: &mut ReportFiles) -> Result<()> {
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    files.written.push(path);
    Ok(())
}

fn file_stem(shape: &str) -> String {
    shape.replace('@', "_s")
}

/// Writes `bench.csv`, one `latency_<shape>.svg` per shape and, when prune
/// summaries with rearrangement are given, `retained_l1.csv` and
/// `retained_l1.svg` into `out_dir`.
pub fn build_report(inputs: &[PathBuf], out_dir: impl AsRef<Path>) -> Result<ReportFiles> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no report inputs given".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut results = Vec::new();
    let mut summaries = Vec::new();
    for path in inputs {
        match load_input(path)? {
            ReportInput::Bench(r) => results.extend(r),
            ReportInput::Prune(s) => summaries.push(s),
        }
    }

    let mut files = ReportFiles::default();
    if !results.is_empty() {
        let merged = merge_bench(results);
        let path = out_dir.join("bench.csv");
        bench::write_csv(&merged, &path)?;
        files.written.push(path);
        for (shape, series) in latency_series(&merged) {
            let svg = line_plot(
                &format!("Latency vs pruning rate, {shape}"),
                "pruning rate p",
                "median latency (ms)",
                &series,
            );
            write_file(out_dir.join(format!("latency_{}.svg", file_stem(&shape))), &svg, &mut files)?;
        }
    }

    let rows = retained_rows(&summaries);
    if !rows.is_empty() {
        let mut csv = String::from("model,layer,p,N,total_l1,retained_without_rearrange,retained_with_rearrange\n");
        for r in &rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                r.model, r.layer, r.p, r.block, r.total_l1, r.without_rearrange, r.with_rearrange
            );
        }
        write_file(out_dir.join("retained_l1.csv"), &csv, &mut files)?;
        write_file(out_dir.join("retained_l1.svg"), &retained_plot(&rows), &mut files)?;
    }
    Ok(files)
}
