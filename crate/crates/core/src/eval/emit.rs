use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::report::{wer, EvalReport};
use crate::corpus::Mode;
use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 6] = [
    "mode",
    "noise_type",
    "snr_db",
    "count",
    "correct",
    "accuracy_pct",
];
pub const COMPARISON_HEADER: [&str; 6] = [
    "run",
    "count",
    "accuracy_pct",
    "wer_pct",
    "clean_accuracy_pct",
    "noisy_accuracy_pct",
];

fn write(dir: &Path, name: &str, body: &[u8]) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Manifest(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Manifest(e.to_string()))
}

fn fmt_pct(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_pct).unwrap_or_default()
}

/// Per-condition rows under [`METRICS_HEADER`].
pub fn metrics_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let rows: Vec<Vec<String>> = report
        .conditions
        .iter()
        .map(|c| {
            vec![
                c.condition.mode.to_string(),
                c.condition.noise_type.to_string(),
                c.condition
                    .snr_db
                    .map(|s| s.to_string())
                    .unwrap_or_default(),
                c.count.to_string(),
                c.correct.to_string(),
                fmt_pct(c.accuracy_pct()),
            ]
        })
        .collect();
    csv_bytes(&METRICS_HEADER, &rows)
}

/// Class-name header, then one row of counts per true class.
pub fn confusion_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let header: Vec<&str> = report.class_names.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = report
        .confusion
        .iter()
        .map(|r| r.iter().map(|c| c.to_string()).collect())
        .collect();
    csv_bytes(&header, &rows)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const CELL: usize = 36;
const MARGIN: usize = 70;

/// Row-normalized heat map with counts in each cell.
pub fn confusion_svg(report: &EvalReport) -> String {
    let k = report.confusion.len();
    let side = MARGIN + k * CELL + 10;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="14" text-anchor="middle">predicted</text>"#,
        MARGIN + k * CELL / 2
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{0}" text-anchor="middle" transform="rotate(-90 12 {0})">true</text>"#,
        MARGIN + k * CELL / 2
    );
    for (i, name) in report.class_names.iter().enumerate() {
        let c = MARGIN + i * CELL + CELL / 2;
        let _ = writeln!(
            s,
            r#"<text x="{c}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN - 8,
            esc(name)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN - 6,
            c + 4,
            esc(name)
        );
    }
    for (i, row) in report.confusion.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (j, &n) in row.iter().enumerate() {
            let frac = if total == 0 {
                0.0
            } else {
                n as f64 / total as f64
            };
            let shade = 255 - (frac * 200.0).round() as u8;
            let (x, y) = (MARGIN + j * CELL, MARGIN + i * CELL);
            let _ = writeln!(
                s,
                r##"<rect class="cell" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" stroke="#999"/>"##
            );
            let ink = if frac > 0.6 { "#fff" } else { "#000" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{n}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 4
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

const BAR: usize = 28;
const GROUP_GAP: usize = 30;
const PLOT_H: usize = 200;

/// Grouped WER bars: one group per run, one bar per mode present plus overall.
pub fn wer_svg(runs: &[(String, EvalReport)]) -> String {
    let bars = |r: &EvalReport| -> Vec<(&'static str, f64)> {
        let mut v = Vec::new();
        for (mode, name) in [(Mode::Clean, "clean"), (Mode::Noisy, "noisy")] {
            if let Some(acc) = r.accuracy_where(|c| c.mode == mode) {
                v.push((name, 100.0 - acc));
            }
        }
        v.push(("overall", wer(r)));
        v
    };
    let groups: Vec<_> = runs.iter().map(|(n, r)| (n, bars(r))).collect();
    let width = 60
        + groups
            .iter()
            .map(|(_, b)| b.len() * BAR + GROUP_GAP)
            .sum::<usize>()
        + 10;
    let top = groups
        .iter()
        .flat_map(|(_, b)| b.iter().map(|(_, v)| *v))
        .fold(0.0f64, f64::max)
        .max(1.0);
    let height = PLOT_H + 70;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="10" y="14">WER (%)</text>"#);
    let base = 20 + PLOT_H;
    let _ = writeln!(
        s,
        r##"<line x1="50" y1="{base}" x2="{}" y2="{base}" stroke="#000"/>"##,
        width - 10
    );
    let mut x = 60;
    for (name, b) in &groups {
        let _ = writeln!(s, r#"<g class="group" data-run="{}">"#, esc(name));
        let gx = x;
        for (mode, v) in b {
            let h = (v / top * PLOT_H as f64).round() as usize;
            let fill = match *mode {
                "clean" => "#4c78a8",
                "noisy" => "#e45756",
                _ => "#72b7b2",
            };
            let _ = writeln!(
                s,
                r#"<rect class="bar" data-mode="{mode}" x="{x}" y="{}" width="{}" height="{h}" fill="{fill}"/>"#,
                base - h,
                BAR - 4
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" font-size="9">{v:.2}</text>"#,
                x + (BAR - 4) / 2,
                base - h - 3
            );
            x += BAR;
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (gx + x) / 2,
            base + 16,
            esc(name)
        );
        s.push_str("</g>\n");
        x += GROUP_GAP;
    }
    let _ = writeln!(
        s,
        r##"<text x="60" y="{}" font-size="10"><tspan fill="#4c78a8">clean</tspan> <tspan fill="#e45756">noisy</tspan> <tspan fill="#72b7b2">overall</tspan></text>"##,
        height - 12
    );
    s.push_str("</svg>\n");
    s
}

/// Writes `metrics.csv`, `confusion.csv`, `confusion.svg`, `wer.svg` and
/// `report.json` into `out_dir`, creating it if needed.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(out_dir, "metrics.csv", &metrics_csv(report)?)?;
    write(out_dir, "confusion.csv", &confusion_csv(report)?)?;
    write(out_dir, "confusion.svg", confusion_svg(report).as_bytes())?;
    write(
        out_dir,
        "wer.svg",
        wer_svg(&[("run".into(), report.clone())]).as_bytes(),
    )?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write(out_dir, "report.json", format!("{json}\n").as_bytes())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: bad report: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub run: String,
    pub count: usize,
    pub accuracy: f64,
    pub wer: f64,
    pub clean_accuracy: Option<f64>,
    pub noisy_accuracy: Option<f64>,
}

/// One accuracy row per run, written to `comparison.csv`, plus a shared
/// `wer.svg`.
pub fn compare(runs: &[(String, EvalReport)], out_dir: &Path) -> Result<Vec<ComparisonRow>> {
    if runs.is_empty() {
        return Err(Error::Config("compare needs at least one run".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let table: Vec<ComparisonRow> = runs
        .iter()
        .map(|(name, r)| ComparisonRow {
            run: name.clone(),
            count: r.total,
            accuracy: r.accuracy,
            wer: wer(r),
            clean_accuracy: r.accuracy_where(|c| c.mode == Mode::Clean),
            noisy_accuracy: r.accuracy_where(|c| c.mode == Mode::Noisy),
        })
        .collect();
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|t| {
            vec![
                t.run.clone(),
                t.count.to_string(),
                fmt_pct(t.accuracy),
                fmt_pct(t.wer),
                fmt_opt(t.clean_accuracy),
                fmt_opt(t.noisy_accuracy),
            ]
        })
        .collect();
    write(
        out_dir,
        "comparison.csv",
        &csv_bytes(&COMPARISON_HEADER, &rows)?,
    )?;
    write(out_dir, "wer.svg", wer_svg(runs).as_bytes())?;
    Ok(table)
}
