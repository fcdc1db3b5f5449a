//! CSV, JSON-lines and SVG output for analysis results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DistributionTrace, QualityMatrix};
use crate::alcore::PerformanceCurve;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "svg" => Ok(Self::Svg),
            other => Err(Error::ConfigMismatch(format!("unknown report format {other}"))),
        }
    }
}

/// Everything a report can contain. Entries are kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub curves: Vec<(String, PerformanceCurve)>,
    pub matrices: Vec<(String, QualityMatrix)>,
    pub traces: Vec<(String, DistributionTrace)>,
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Csv(e.to_string())
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn curve_rows(report: &Report) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (name, c) in &report.curves {
        if let Some(v) = c.initial {
            rows.push(vec![name.clone(), "0".into(), v.to_string()]);
        }
        for (k, v) in c.values.iter().enumerate() {
            rows.push(vec![name.clone(), (k + 1).to_string(), v.to_string()]);
        }
    }
    rows
}

fn matrix_rows(m: &QualityMatrix, values: &[Vec<f64>]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["target\\source".to_string()];
    header.extend(m.col_labels.iter().cloned());
    let rows = m
        .row_labels
        .iter()
        .zip(values)
        .map(|(label, row)| std::iter::once(label.clone()).chain(row.iter().map(|v| v.to_string())).collect())
        .collect();
    (header, rows)
}

fn trace_rows(t: &DistributionTrace) -> (Vec<String>, Vec<Vec<String>>) {
    let bins = t.reference.counts.len();
    let mut header = vec!["k".to_string()];
    header.extend((0..bins).map(|b| format!("bin{b}")));
    header.push("tv".into());
    let mut rows: Vec<Vec<String>> = (0..t.counts.len())
        .map(|k| {
            std::iter::once(k.to_string())
                .chain(t.counts[k].iter().map(|c| c.to_string()))
                .chain(std::iter::once(t.tv_distance(k).to_string()))
                .collect()
        })
        .collect();
    rows.push(
        std::iter::once("test".to_string())
            .chain(t.reference.counts.iter().map(|c| c.to_string()))
            .chain(std::iter::once("0".to_string()))
            .collect(),
    );
    (header, rows)
}

fn safe_name(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes `report` into `dir` in each requested format and returns the
/// written paths. Output is byte-identical for identical reports.
pub fn emit_report(report: &Report, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Csv) {
        let path = dir.join("curves.csv");
        write_csv(&path, &["series".into(), "k".into(), "score".into()], &curve_rows(report))?;
        written.push(path);
        for (name, m) in &report.matrices {
            let (header, rows) = matrix_rows(m, &m.cells);
            let path = dir.join(format!("matrix_{}.csv", safe_name(name)));
            write_csv(&path, &header, &rows)?;
            written.push(path);
            let (header, rows) = matrix_rows(m, &m.gaps);
            let path = dir.join(format!("matrix_{}_gap.csv", safe_name(name)));
            write_csv(&path, &header, &rows)?;
            written.push(path);
        }
        for (name, t) in &report.traces {
            let (header, rows) = trace_rows(t);
            let path = dir.join(format!("trace_{}.csv", safe_name(name)));
            write_csv(&path, &header, &rows)?;
            written.push(path);
        }
    }
    if formats.contains(&ReportFormat::Json) {
        let mut out = String::new();
        for (name, c) in &report.curves {
            out.push_str(&serde_json::to_string(&serde_json::json!({"kind": "curve", "name": name, "curve": c}))?);
            out.push('\n');
        }
        for (name, m) in &report.matrices {
            out.push_str(&serde_json::to_string(&serde_json::json!({"kind": "matrix", "name": name, "matrix": m}))?);
            out.push('\n');
        }
        for (name, t) in &report.traces {
            out.push_str(&serde_json::to_string(&serde_json::json!({"kind": "trace", "name": name, "trace": t}))?);
            out.push('\n');
        }
        let path = dir.join("report.jsonl");
        std::fs::write(&path, out)?;
        written.push(path);
    }
    if formats.contains(&ReportFormat::Svg) {
        let path = dir.join("report.svg");
        std::fs::write(&path, render_svg(report))?;
        written.push(path);
    }
    Ok(written)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn curves_panel(out: &mut String, curves: &[(String, PerformanceCurve)], y0: f64) {
    let points: Vec<Vec<(usize, f64)>> = curves
        .iter()
        .map(|(_, c)| {
            c.initial.map(|v| (0, v)).into_iter().chain(c.values.iter().enumerate().map(|(k, &v)| (k + 1, v))).collect()
        })
        .collect();
    let all = points.iter().flatten();
    let kmax = all.clone().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let lo = all.clone().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = all.map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let w = PANEL_W - 2.0 * MARGIN;
    let h = PANEL_H - 2.0 * MARGIN;
    let _ = writeln!(out, r#"<g transform="translate(0,{y0:.2})"><text x="{MARGIN}" y="20">curves</text>"#);
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{w:.2}" height="{h:.2}" fill="none" stroke="black"/>"#
    );
    for (n, (pts, (name, _))) in points.iter().zip(curves).enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(k, v)| {
                let x = MARGIN + w * k as f64 / kmax;
                let y = MARGIN + h * (1.0 - (v - lo) / (hi - lo));
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" points="{}"><title>{}</title></polyline>"#,
            path.join(" "),
            escape(name)
        );
    }
    let _ = writeln!(out, r#"<text x="{MARGIN}" y="{:.2}">{lo:.3} .. {hi:.3}</text></g>"#, PANEL_H - 10.0);
}

fn matrix_panel(out: &mut String, name: &str, m: &QualityMatrix, y0: f64) {
    let rows = m.row_labels.len().max(1) as f64;
    let cols = m.col_labels.len().max(1) as f64;
    let cw = (PANEL_W - 2.0 * MARGIN) / cols;
    let ch = (PANEL_H - 2.0 * MARGIN) / rows;
    let vals = m.gaps.iter().flatten();
    let span = vals.map(|v| v.abs()).fold(0.0_f64, f64::max).max(1e-12);
    let _ = writeln!(out, r#"<g transform="translate(0,{y0:.2})"><text x="{MARGIN}" y="20">{}</text>"#, escape(name));
    for (r, row) in m.gaps.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let t = (v / span).clamp(-1.0, 1.0);
            let (red, blue) = if t >= 0.0 { (255.0 * (1.0 - t), 255.0) } else { (255.0, 255.0 * (1.0 + t)) };
            let fill = format!("#{:02x}{:02x}{:02x}", red as u8, (255.0 * (1.0 - t.abs())) as u8, blue as u8);
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{cw:.2}" height="{ch:.2}" fill="{fill}" stroke="black"><title>{} / {}: {:.4}</title></rect>"#,
                MARGIN + c as f64 * cw,
                MARGIN + r as f64 * ch,
                escape(&m.row_labels[r]),
                escape(&m.col_labels[c]),
                m.cells[r][c]
            );
        }
    }
    let _ = writeln!(out, "</g>");
}

fn trace_panel(out: &mut String, name: &str, t: &DistributionTrace, y0: f64) {
    let bars = t.counts.len() + 1;
    let bw = (PANEL_W - 2.0 * MARGIN) / bars as f64;
    let h = PANEL_H - 2.0 * MARGIN;
    let _ = writeln!(out, r#"<g transform="translate(0,{y0:.2})"><text x="{MARGIN}" y="20">{}</text>"#, escape(name));
    let columns = (0..t.counts.len()).map(|k| t.frequencies(k)).chain(std::iter::once(t.reference.frequencies.clone()));
    for (n, freqs) in columns.enumerate() {
        let mut top = MARGIN;
        for (b, f) in freqs.iter().enumerate() {
            let bh = h * f;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{bh:.2}" fill="{}"/>"#,
                MARGIN + n as f64 * bw,
                bw * 0.9,
                PALETTE[b % PALETTE.len()]
            );
            top += bh;
        }
    }
    let _ = writeln!(out, "</g>");
}

/// One-column SVG with a curve panel, one heat grid per matrix and one
/// stacked-bar panel per trace.
pub fn render_svg(report: &Report) -> String {
    let panels = 1 + report.matrices.len() + report.traces.len();
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{:.0}" font-family="sans-serif" font-size="12">"#,
        PANEL_H * panels as f64
    );
    curves_panel(&mut out, &report.curves, 0.0);
    let mut y = PANEL_H;
    for (name, m) in &report.matrices {
        matrix_panel(&mut out, name, m, y);
        y += PANEL_H;
    }
    for (name, t) in &report.traces {
        trace_panel(&mut out, name, t, y);
        y += PANEL_H;
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmr::BinDistribution;

    fn sample() -> Report {
        let mut c = PerformanceCurve::new(vec![0.5, 0.75]);
        c.initial = Some(0.25);
        Report {
            curves: vec![("random, \"a\"".into(), c)],
            matrices: vec![(
                "seed".into(),
                QualityMatrix {
                    row_labels: vec!["r0".into(), "r1".into()],
                    col_labels: vec!["c0".into(), "c1".into()],
                    cells: vec![vec![0.8, 0.7], vec![0.6, 0.9]],
                    gaps: vec![vec![0.0, 0.1], vec![0.3, 0.0]],
                    baseline: None,
                },
            )],
            traces: vec![(
                "labels".into(),
                DistributionTrace {
                    counts: vec![vec![1, 1], vec![3, 1]],
                    reference: BinDistribution::from_counts(vec![5, 5]),
                },
            )],
        }
    }

    const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Svg];

    #[test]
    fn matrix_csv_shape_and_quoting() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&sample(), dir.path(), &ALL).unwrap();
        let mut r = csv::Reader::from_path(dir.path().join("matrix_seed.csv")).unwrap();
        assert_eq!(r.headers().unwrap().len(), 3);
        let rows: Vec<_> = r.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[1][2], "0.9");
        let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert!(curves.contains("\"random, \"\"a\"\"\",0,0.25"));
        let mut r = csv::Reader::from_path(dir.path().join("curves.csv")).unwrap();
        assert_eq!(r.records().count(), 3);
    }

    #[test]
    fn byte_stable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = emit_report(&sample(), a.path(), &ALL).unwrap();
        let pb = emit_report(&sample(), b.path(), &ALL).unwrap();
        assert_eq!(pa.len(), pb.len());
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn empty_report_has_headers() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&Report::default(), dir.path(), &ALL).unwrap();
        assert_eq!(std::fs::read_to_string(dir.path().join("curves.csv")).unwrap(), "series,k,score\n");
        assert_eq!(std::fs::read_to_string(dir.path().join("report.jsonl")).unwrap(), "");
        let svg = std::fs::read_to_string(dir.path().join("report.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn json_lines_parse() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&sample(), dir.path(), &[ReportFormat::Json]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("report.jsonl")).unwrap();
        let kinds: Vec<String> = text
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(kinds, ["curve", "matrix", "trace"]);
    }
}
