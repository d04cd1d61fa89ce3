//! Rendering audit reports as JSON, CSV tables and SVG bar charts.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audit::{AuditReport, CellId};
use crate::corpus::write_atomic;
use crate::downstream::MetricValues;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Structured,
    Tabular,
    Plots,
}

impl ReportFormat {
    pub fn all() -> BTreeSet<ReportFormat> {
        [ReportFormat::Structured, ReportFormat::Tabular, ReportFormat::Plots].into()
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "structured" | "json" => Ok(ReportFormat::Structured),
            "tabular" | "csv" => Ok(ReportFormat::Tabular),
            "plots" | "svg" => Ok(ReportFormat::Plots),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

pub const INTRINSIC_HEADER: [&str; 4] = ["SEAT", "SEAT-EFFECT-SIZE", "ATTRIBUTE-LPBS", "TARGET-LPBS"];
pub const PROBE_HEADER: [&str; 4] = ["GENDER-ACC", "BIAS-ACC", "MEAN-BIAS-CONFIDENCE", "P-VALUE"];

/// Section values of one report, `None` where a section is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionRows {
    pub intrinsic: Option<[Option<f64>; 4]>,
    pub probe: Option<[f64; 4]>,
    pub extrinsic: Option<MetricValues>,
}

impl SectionRows {
    pub fn of(report: &AuditReport) -> Self {
        let intrinsic = report.intrinsic.as_ref().map(|i| {
            [
                i.seat.as_ref().map(|s| s.test_statistic),
                i.seat.as_ref().map(|s| s.effect_size),
                i.attribute_lpbs.as_ref().map(|l| l.score),
                i.target_lpbs.as_ref().map(|l| l.score),
            ]
        });
        let probe = report.probe.as_ref().map(|p| {
            [
                p.gender_accuracy,
                p.stereotype_accuracy,
                p.mean_bias_confidence,
                p.randomization_p_value,
            ]
        });
        Self {
            intrinsic: intrinsic.filter(|row| row.iter().any(Option::is_some)),
            probe,
            extrinsic: report.extrinsic.as_ref().map(|e| e.mean),
        }
    }
}

/// Shortest round-trip form; switches to exponent notation for tiny values.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn fmt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn extrinsic_row(m: &MetricValues) -> Vec<String> {
    m.to_array().iter().map(|&v| num(v)).collect()
}

/// Writes the requested renderings of one report into `dir` and returns
/// the written paths. Every file is rendered before the first write.
pub fn emit_report(report: &AuditReport, dir: impl AsRef<Path>, formats: &BTreeSet<ReportFormat>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let rows = SectionRows::of(report);
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    if formats.contains(&ReportFormat::Structured) {
        files.push(("report.json", report.to_json().into_bytes()));
    }
    if formats.contains(&ReportFormat::Tabular) {
        if let Some(r) = rows.intrinsic {
            files.push(("intrinsic.csv", csv_text(&INTRINSIC_HEADER, &[r.map(fmt).to_vec()]).into_bytes()));
        }
        if let Some(r) = rows.probe {
            files.push(("probe.csv", csv_text(&PROBE_HEADER, &[r.map(num).to_vec()]).into_bytes()));
        }
        if let Some(ext) = &report.extrinsic {
            files.push(("extrinsic.csv", csv_text(&MetricValues::HEADER, &[extrinsic_row(&ext.mean)]).into_bytes()));
            files.push(("extrinsic_std.csv", csv_text(&MetricValues::HEADER, &[extrinsic_row(&ext.std)]).into_bytes()));
        }
    }
    if formats.contains(&ReportFormat::Plots) {
        let label = cell_label(report.cell);
        files.extend(section_plots(&[(label, rows)])?);
    }
    write_all(dir, files)
}

/// Merged comparison over grid cells: one row per cell and grouped bar
/// charts with one bar per cell.
pub fn emit_comparison(reports: &[AuditReport], dir: impl AsRef<Path>, formats: &BTreeSet<ReportFormat>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let labelled: Vec<(String, SectionRows)> = reports.iter().map(|r| (cell_label(r.cell), SectionRows::of(r))).collect();
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    if formats.contains(&ReportFormat::Structured) {
        let doc: Vec<serde_json::Value> = reports
            .iter()
            .zip(&labelled)
            .map(|(r, (_, rows))| {
                serde_json::json!({
                    "cell": r.cell,
                    "config_hash": r.provenance.config_hash,
                    "failed_stages": r.failed_stages,
                    "metrics": rows,
                })
            })
            .collect();
        let mut text = serde_json::to_string_pretty(&doc).expect("comparison serializes");
        text.push('\n');
        files.push(("comparison.json", text.into_bytes()));
    }
    if formats.contains(&ReportFormat::Tabular) {
        let mut header = vec!["MITIGATION", "INTERVENTION"];
        header.extend(INTRINSIC_HEADER);
        header.extend(PROBE_HEADER);
        header.extend(MetricValues::HEADER);
        let table: Vec<Vec<String>> = reports
            .iter()
            .zip(&labelled)
            .map(|(r, (_, rows))| {
                let mut row = vec![r.cell.mitigation.name().to_string(), intervention_label(r.cell)];
                row.extend(rows.intrinsic.unwrap_or([None; 4]).map(fmt));
                row.extend(rows.probe.map(|p| p.map(Some)).unwrap_or([None; 4]).map(fmt));
                row.extend(match &rows.extrinsic {
                    Some(m) => extrinsic_row(m),
                    None => vec![String::new(); 9],
                });
                row
            })
            .collect();
        files.push(("comparison.csv", csv_text(&header, &table).into_bytes()));
    }
    if formats.contains(&ReportFormat::Plots) {
        files.extend(section_plots(&labelled)?.into_iter().map(|(name, bytes)| {
            let renamed: &str = match name {
                "intrinsic.svg" => "comparison_intrinsic.svg",
                "probe.svg" => "comparison_probe.svg",
                _ => "comparison_extrinsic.svg",
            };
            (renamed, bytes)
        }));
    }
    write_all(dir, files)
}

fn cell_label(cell: CellId) -> String {
    format!("{}/{}", cell.mitigation.name(), intervention_label(cell))
}

fn intervention_label(cell: CellId) -> String {
    serde_json::to_value(cell.intervention)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn write_all(dir: &Path, files: Vec<(&str, Vec<u8>)>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-check");
    fs::write(&probe, b"").map_err(|e| Error::io(dir, e))?;
    let _ = fs::remove_file(&probe);
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(feature = "plots")]
fn section_plots(series: &[(String, SectionRows)]) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let mut out = Vec::new();
    let pick = |f: &dyn Fn(&SectionRows) -> Option<Vec<f64>>| -> Vec<(String, Vec<f64>)> {
        series.iter().filter_map(|(l, r)| f(r).map(|v| (l.clone(), v))).collect()
    };
    let intrinsic = pick(&|r| r.intrinsic.map(|row| row.iter().map(|v| v.unwrap_or(0.0)).collect()));
    if !intrinsic.is_empty() {
        out.push(("intrinsic.svg", grouped_bars("Intrinsic bias", &INTRINSIC_HEADER, &intrinsic)?.into_bytes()));
    }
    let probe = pick(&|r| r.probe.map(|row| row.to_vec()));
    if !probe.is_empty() {
        out.push(("probe.svg", grouped_bars("Probe", &PROBE_HEADER, &probe)?.into_bytes()));
    }
    let extrinsic = pick(&|r| r.extrinsic.map(|m| m.to_array().to_vec()));
    if !extrinsic.is_empty() {
        out.push(("extrinsic.svg", grouped_bars("Extrinsic bias", &MetricValues::HEADER, &extrinsic)?.into_bytes()));
    }
    Ok(out)
}

#[cfg(not(feature = "plots"))]
fn section_plots(_: &[(String, SectionRows)]) -> Result<Vec<(&'static str, Vec<u8>)>> {
    Err(Error::Config("built without plot support".into()))
}

/// Grouped bar chart: one group per metric, one bar per series.
#[cfg(feature = "plots")]
pub fn grouped_bars(title: &str, metrics: &[&str], series: &[(String, Vec<f64>)]) -> Result<String> {
    use plotters::prelude::*;

    let plot_err = |e: &dyn std::fmt::Display| Error::Format(format!("plot rendering: {e}"));
    let values = series.iter().flat_map(|s| s.1.iter().copied());
    let (lo, hi) = values.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let pad = ((hi - lo) * 0.1).max(1e-3);
    let (lo, hi) = (if lo < 0.0 { lo - pad } else { 0.0 }, hi + pad);
    let width = (120 * metrics.len() as u32).max(480);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (width, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(0f64..metrics.len() as f64, lo..hi)
            .map_err(|e| plot_err(&e))?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .disable_x_axis()
            .draw()
            .map_err(|e| plot_err(&e))?;
        let bar = 0.8 / series.len().max(1) as f64;
        for (k, (label, vals)) in series.iter().enumerate() {
            let color = Palette99::pick(k).to_rgba();
            chart
                .draw_series(vals.iter().enumerate().map(|(i, v)| {
                    let x0 = i as f64 + 0.1 + k as f64 * bar;
                    Rectangle::new([(x0, 0.0), (x0 + bar, *v)], color.filled())
                }))
                .map_err(|e| plot_err(&e))?
                .label(label.as_str())
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
        }
        for (i, name) in metrics.iter().enumerate() {
            let (px, py) = chart.backend_coord(&(i as f64 + 0.5, lo));
            root.draw(&Text::new(
                name.to_string(),
                (px - 4 * name.len() as i32, py + 8),
                ("sans-serif", 13),
            ))
            .map_err(|e| plot_err(&e))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(&e))?;
        root.present().map_err(|e| plot_err(&e))?;
    }
    Ok(svg)
}

/// Re-renders a saved structured report.
pub fn rerender(report_path: impl AsRef<Path>, dir: impl AsRef<Path>, formats: &BTreeSet<ReportFormat>) -> Result<Vec<PathBuf>> {
    let report = AuditReport::load(report_path)?;
    emit_report(&report, dir, formats)
}
