//! Result serialization: CSV tables and self-contained SVG trade-off charts.
//!
//! Three CSV schemas are emitted, all with a fixed column order, a header
//! row, and floats printed with six decimal places so identical inputs give
//! byte-identical files:
//!
//! - `run.csv` — one row per simulation run,
//! - `sweep.csv` — one row per sweep point, with a Pareto-membership flag,
//! - `compare.csv` — one row per (model, routing) pair: cache size as
//!   "c / N", lifetime mean/std, miss-rate percent,
//! - `ablate.csv` — one row per cache size with LRU/Belady baselines and the
//!   strategy's best point per retained-mass threshold.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::sim::{AblationTable, RunMetrics, SweepResult};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to report")]
    EmptyReport,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ReportError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// Identification and metrics for one run, as serialized into `run.csv`.
#[derive(Debug, Clone)]
pub struct RunRow {
    pub model: String,
    pub strategy: String,
    pub param: f64,
    pub top_j: usize,
    pub cache_size: usize,
    pub policy: String,
    pub phase: String,
    pub init_cache: String,
    pub renormalize: bool,
    pub delta_mode: String,
    pub seed: u64,
    pub metrics: RunMetrics,
}

pub const RUN_CSV_HEADER: &str = "model,strategy,param,top_j,cache_size,policy,phase,init_cache,renormalize,delta_mode,seed,tokens,hits,misses,inactive,miss_rate_pct,hit_rate_pct,lifetime_mean,lifetime_std,closed_samples,censored_samples,retained_mass,swap_rate,est_latency_s";

/// Emit `run.csv` rows. Returns the byte count written.
pub fn emit_run_csv(rows: &[RunRow], w: &mut impl Write) -> Result<u64, std::io::Error> {
    let mut out = String::new();
    out.push_str(RUN_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.metrics;
        let latency = m
            .est_token_latency
            .map(fmt6)
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.strategy,
            fmt6(r.param),
            r.top_j,
            r.cache_size,
            r.policy,
            r.phase,
            r.init_cache,
            r.renormalize,
            r.delta_mode,
            r.seed,
            m.num_tokens,
            m.total_hits,
            m.total_misses,
            m.total_inactive,
            fmt6(m.miss_rate * 100.0),
            fmt6(m.hit_rate * 100.0),
            fmt6(m.lifetime_mean),
            fmt6(m.lifetime_std),
            m.closed_samples,
            m.censored_samples,
            fmt6(m.retained_mass),
            fmt6(m.swap_rate),
            latency,
        )
        .expect("writing to a String cannot fail");
    }
    w.write_all(out.as_bytes())?;
    Ok(out.len() as u64)
}

pub const SWEEP_CSV_HEADER: &str = "strategy,param,miss_rate_pct,hit_rate_pct,retained_mass,swap_rate,lifetime_mean,lifetime_std,pareto";

/// Emit `sweep.csv`: one row per grid point, `pareto` true on front members.
pub fn emit_sweep_csv(sweep: &SweepResult, w: &mut impl Write) -> Result<u64, std::io::Error> {
    let mut out = String::new();
    out.push_str(SWEEP_CSV_HEADER);
    out.push('\n');
    for (i, p) in sweep.points.iter().enumerate() {
        let m = &p.metrics;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            sweep.strategy.name(),
            fmt6(p.param),
            fmt6(m.miss_rate * 100.0),
            fmt6(m.hit_rate * 100.0),
            fmt6(m.retained_mass),
            fmt6(m.swap_rate),
            fmt6(m.lifetime_mean),
            fmt6(m.lifetime_std),
            sweep.pareto.contains(&i),
        )
        .expect("writing to a String cannot fail");
    }
    w.write_all(out.as_bytes())?;
    Ok(out.len() as u64)
}

/// One row of the lifetimes/miss-rate comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub model: String,
    /// Rendered as "c / N".
    pub cache_size: String,
    pub routing: String,
    pub lifetime_mean: f64,
    pub lifetime_std: f64,
    pub miss_rate_pct: f64,
}

/// Comparison of several routing strategies at fixed parameters, one row
/// each: the lifetime/miss-rate summary shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<CompareRow>,
}

pub const COMPARE_CSV_HEADER: &str =
    "model,cache_size,routing,lifetime_mean,lifetime_std,miss_rate_pct";

pub fn emit_compare_csv(
    table: &ComparisonTable,
    w: &mut impl Write,
) -> Result<u64, std::io::Error> {
    let mut out = String::new();
    out.push_str(COMPARE_CSV_HEADER);
    out.push('\n');
    for r in &table.rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.model,
            r.cache_size,
            r.routing,
            fmt6(r.lifetime_mean),
            fmt6(r.lifetime_std),
            fmt6(r.miss_rate_pct),
        )
        .expect("writing to a String cannot fail");
    }
    w.write_all(out.as_bytes())?;
    Ok(out.len() as u64)
}

/// Emit the cache-size ablation grid. Columns expand with the thresholds.
pub fn emit_ablation_csv(
    table: &AblationTable,
    w: &mut impl Write,
) -> Result<u64, std::io::Error> {
    let mut out = String::new();
    out.push_str("cache_size,lru_miss_rate_pct,belady_miss_rate_pct");
    for th in &table.thresholds {
        write!(
            out,
            ",{0}_param_mass{1},{0}_miss_pct_mass{1}",
            table.strategy.name(),
            fmt6(*th)
        )
        .expect("writing to a String cannot fail");
    }
    out.push('\n');
    for row in &table.rows {
        write!(
            out,
            "{},{},{}",
            row.cache_size,
            fmt6(row.lru_miss_rate * 100.0),
            fmt6(row.belady_miss_rate * 100.0),
        )
        .expect("writing to a String cannot fail");
        for best in &row.strategy_best {
            match best {
                Some((param, miss)) => {
                    write!(out, ",{},{}", fmt6(*param), fmt6(miss * 100.0))
                        .expect("writing to a String cannot fail");
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    w.write_all(out.as_bytes())?;
    Ok(out.len() as u64)
}

/// Write any emitter's output to a file, adding path context to I/O errors.
pub fn write_report<F>(path: impl AsRef<Path>, emit: F) -> Result<u64, ReportError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<u64, std::io::Error>,
{
    let path = path.as_ref();
    let mut file = BufWriter::new(File::create(path).map_err(|e| ReportError::io(path, e))?);
    let n = emit(&mut file).map_err(|e| ReportError::io(path, e))?;
    file.flush().map_err(|e| ReportError::io(path, e))?;
    Ok(n)
}

// ---------------------------------------------------------------------------
// SVG trade-off chart
// ---------------------------------------------------------------------------

/// One labeled curve of (miss rate, retained mass) operating points.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// A sweep's Pareto front as a chart series.
pub fn series_from_sweep(label: impl Into<String>, sweep: &SweepResult) -> TradeoffSeries {
    TradeoffSeries {
        label: label.into(),
        points: sweep
            .pareto_points()
            .map(|p| (p.metrics.miss_rate, p.metrics.retained_mass))
            .collect(),
    }
}

const SVG_COLORS: [&str; 6] = [
    "#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2", "#b279a2",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render a standalone SVG with one polyline per series through its points,
/// sorted by miss rate, with axes and a legend. No external dependencies.
pub fn svg_tradeoff(series: &[TradeoffSeries]) -> Result<String, ReportError> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(ReportError::EmptyReport);
    }
    let (width, height) = (800.0, 560.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 20.0, 50.0);
    let plot_w = width - ml - mr;
    let plot_h = height - mt - mb;

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if x_max - x_min < 1e-12 {
        x_min -= 0.01;
        x_max += 0.01;
    }
    if y_max - y_min < 1e-12 {
        y_min -= 0.01;
        y_max += 0.01;
    }
    let sx = |x: f64| ml + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = |y: f64| mt + plot_h - (y - y_min) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    write!(
        svg,
        r#"<svg version="1.1" width="{width}" height="{height}" xmlns="http://www.w3.org/2000/svg">"#
    )
    .unwrap();
    write!(
        svg,
        r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#
    )
    .unwrap();
    // Axes.
    write!(
        svg,
        r#"<line x1="{ml}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#,
        y0 = mt + plot_h,
        x1 = ml + plot_w
    )
    .unwrap();
    write!(
        svg,
        r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{y0}" stroke="black"/>"#,
        y0 = mt + plot_h
    )
    .unwrap();
    // Ticks and grid.
    for i in 0..=4 {
        let fx = x_min + (x_max - x_min) * i as f64 / 4.0;
        let px = sx(fx);
        write!(
            svg,
            r#"<line x1="{px}" y1="{y0}" x2="{px}" y2="{y1}" stroke="black"/>"#,
            y0 = mt + plot_h,
            y1 = mt + plot_h + 5.0
        )
        .unwrap();
        write!(
            svg,
            r#"<text x="{px}" y="{ty}" font-size="12" text-anchor="middle">{v:.1}</text>"#,
            ty = mt + plot_h + 20.0,
            v = fx * 100.0
        )
        .unwrap();
        let fy = y_min + (y_max - y_min) * i as f64 / 4.0;
        let py = sy(fy);
        write!(
            svg,
            r#"<line x1="{x0}" y1="{py}" x2="{ml}" y2="{py}" stroke="black"/>"#,
            x0 = ml - 5.0
        )
        .unwrap();
        write!(
            svg,
            r#"<text x="{tx}" y="{ty}" font-size="12" text-anchor="end">{fy:.3}</text>"#,
            tx = ml - 8.0,
            ty = py + 4.0
        )
        .unwrap();
    }
    write!(
        svg,
        r#"<text x="{cx}" y="{ty}" font-size="14" text-anchor="middle">Cache miss rate (%)</text>"#,
        cx = ml + plot_w / 2.0,
        ty = height - 10.0
    )
    .unwrap();
    write!(
        svg,
        r#"<text x="16" y="{cy}" font-size="14" text-anchor="middle" transform="rotate(-90 16 {cy})">Retained probability mass</text>"#,
        cy = mt + plot_h / 2.0
    )
    .unwrap();

    for (i, s) in series.iter().enumerate() {
        let color = SVG_COLORS[i % SVG_COLORS.len()];
        let mut pts = s.points.clone();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite metrics"));
        if !pts.is_empty() {
            let path: Vec<String> = pts
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            write!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            )
            .unwrap();
            for &(x, y) in &pts {
                write!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
                    sx(x),
                    sy(y)
                )
                .unwrap();
            }
        }
        // Legend.
        let ly = mt + 16.0 + i as f64 * 20.0;
        let lx = ml + plot_w - 150.0;
        write!(
            svg,
            r#"<rect x="{lx}" y="{ry}" width="12" height="12" fill="{color}"/>"#,
            ry = ly - 10.0
        )
        .unwrap();
        write!(
            svg,
            r#"<text x="{tx}" y="{ly}" font-size="12" class="legend">{}</text>"#,
            xml_escape(&s.label),
            tx = lx + 18.0
        )
        .unwrap();
    }
    svg.push_str("</svg>");
    Ok(svg)
}

pub fn write_svg_tradeoff(
    series: &[TradeoffSeries],
    path: impl AsRef<Path>,
) -> Result<u64, ReportError> {
    let svg = svg_tradeoff(series)?;
    let path = path.as_ref();
    std::fs::write(path, &svg).map_err(|e| ReportError::io(path, e))?;
    Ok(svg.len() as u64)
}
