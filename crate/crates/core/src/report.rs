//! CSV and SVG artifacts for evaluation results.
//!
//! All numbers are written with Rust's shortest round-trip float formatting,
//! so files parse back to the exact in-memory values and identical results
//! always give identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::eval::{ApKind, ApRow, ConfusionMatrix, EvalResult, IOU_THRESHOLDS};
use crate::weathersim::{WeatherClass, NUM_WEATHERS};
use crate::{Error, Result};

pub const AP_SCHEMA: &str = "# awmoe-ap schema_version=1";
pub const CONFUSION_SCHEMA: &str = "# awmoe-confusion schema_version=1";
pub const ROUTING_SCHEMA: &str = "# awmoe-routing schema_version=1";
pub const EXPERT_SCHEMA: &str = "# awmoe-experts schema_version=1";

fn weather_columns() -> String {
    WeatherClass::ALL.iter().map(|w| w.label()).collect::<Vec<_>>().join(",")
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// One row per (model, metric, IoU threshold), columns Total then the seven weathers.
pub fn ap_csv(results: &[(String, EvalResult)]) -> String {
    let mut s = format!("{AP_SCHEMA}\nmodel,metric,iou,Total,{}\n", weather_columns());
    for (name, r) in results {
        for row in &r.rows {
            let pw: Vec<String> = row.per_weather.iter().map(|v| cell(*v)).collect();
            let _ = writeln!(
                s,
                "{name},{},{},{},{}",
                row.kind.name(),
                row.threshold,
                cell(row.total),
                pw.join(",")
            );
        }
    }
    s
}

fn parse_cell(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Format(format!("bad number {s:?} in AP CSV")))
}

/// Inverse of [`ap_csv`]; models keep their first-appearance order.
pub fn parse_ap_csv(text: &str) -> Result<Vec<(String, Vec<ApRow>)>> {
    let mut lines = text.lines();
    if lines.next() != Some(AP_SCHEMA) {
        return Err(Error::Format("missing AP CSV schema line".into()));
    }
    let header = format!("model,metric,iou,Total,{}", weather_columns());
    if lines.next() != Some(header.as_str()) {
        return Err(Error::Format("unexpected AP CSV column header".into()));
    }
    let mut out: Vec<(String, Vec<ApRow>)> = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 + NUM_WEATHERS {
            return Err(Error::Format(format!("AP CSV row has {} fields: {line:?}", f.len())));
        }
        let kind = ApKind::parse(f[1]).ok_or_else(|| Error::Format(format!("unknown metric {:?}", f[1])))?;
        let threshold = parse_cell(f[2])?.ok_or_else(|| Error::Format("missing IoU threshold".into()))?;
        let mut per_weather = [None; NUM_WEATHERS];
        for (w, slot) in per_weather.iter_mut().enumerate() {
            *slot = parse_cell(f[4 + w])?;
        }
        let row = ApRow {
            kind,
            threshold,
            total: parse_cell(f[3])?,
            per_weather,
        };
        match out.iter_mut().find(|(n, _)| n == f[0]) {
            Some((_, rows)) => rows.push(row),
            None => out.push((f[0].to_string(), vec![row])),
        }
    }
    Ok(out)
}

/// Counts with true weather in rows, then per-class accuracy.
pub fn confusion_csv(m: &ConfusionMatrix) -> String {
    let mut s = format!("{CONFUSION_SCHEMA}\ntrue\\predicted,{},accuracy\n", weather_columns());
    for (t, w) in WeatherClass::ALL.iter().enumerate() {
        let counts: Vec<String> = m.counts[t].iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "{},{},{}", w.label(), counts.join(","), cell(m.class_accuracy(t)));
    }
    s
}

/// Routing accuracy per model: total then per class.
pub fn routing_csv(rows: &[(String, ConfusionMatrix)]) -> String {
    let mut s = format!("{ROUTING_SCHEMA}\nmodel,Total,{}\n", weather_columns());
    for (name, m) in rows {
        let pc: Vec<String> = (0..NUM_WEATHERS).map(|w| cell(m.class_accuracy(w))).collect();
        let _ = writeln!(s, "{name},{},{}", cell(m.accuracy()), pc.join(","));
    }
    s
}

/// AP of each expert forced on each weather: experts in rows, weathers in columns.
pub fn expert_matrix_csv(matrix: &[[Option<f64>; NUM_WEATHERS]]) -> String {
    let mut s = format!("{EXPERT_SCHEMA}\nexpert\\weather,{}\n", weather_columns());
    for (w, row) in matrix.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| cell(*v)).collect();
        let _ = writeln!(s, "{},{}", WeatherClass::ALL[w].label(), cells.join(","));
    }
    s
}

/// Writes `experts.csv` into `dir`.
pub fn emit_expert_matrix(matrix: &[[Option<f64>; NUM_WEATHERS]], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir.join("experts.csv"), &expert_matrix_csv(matrix))
}

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

/// Grouped bar chart: one group per column (Total and the weathers), one bar per model.
pub fn ap_svg(results: &[(String, EvalResult)], kind: ApKind, threshold: f64) -> String {
    let groups = 1 + NUM_WEATHERS;
    let (left, top, plot_h, group_w) = (50.0, 30.0, 200.0, 80.0);
    let width = left + group_w * groups as f64 + 20.0;
    let legend_y = top + plot_h + 40.0;
    let height = legend_y + 20.0 * results.len() as f64 + 10.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{left}" y="18" font-size="13">{} @ IoU {threshold}</text>"#, kind.name());
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#dddddd"/><text x="{}" y="{}" text-anchor="end">{v:.2}</text>"##,
            width - 20.0,
            left - 4.0,
            y + 4.0
        );
    }
    let labels: Vec<&str> = std::iter::once("Total").chain(WeatherClass::ALL.iter().map(|w| w.label())).collect();
    let bar_w = if results.is_empty() { 0.0 } else { (group_w - 16.0) / results.len() as f64 };
    for (g, label) in labels.iter().enumerate() {
        let gx = left + group_w * g as f64;
        for (m, (_, r)) in results.iter().enumerate() {
            let v = r.row(kind, threshold).and_then(|row| if g == 0 { row.total } else { row.per_weather[g - 1] });
            if let Some(v) = v {
                let h = plot_h * v.clamp(0.0, 1.0);
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.2}" y="{:.2}" width="{bar_w:.2}" height="{h:.2}" fill="{}"/>"#,
                    gx + 8.0 + bar_w * m as f64,
                    top + plot_h - h,
                    PALETTE[m % PALETTE.len()]
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
            gx + group_w / 2.0,
            top + plot_h + 16.0
        );
    }
    for (m, (name, _)) in results.iter().enumerate() {
        let y = legend_y + 20.0 * m as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{name}</text>"#,
            y - 10.0,
            PALETTE[m % PALETTE.len()],
            left + 18.0,
            y
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes `ap.csv`, `routing.csv`, one `confusion_<model>.csv` per model with
/// routing records, and one SVG per metric and threshold; returns the paths.
pub fn emit_report(results: &[(String, EvalResult)], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = vec![write(dir.join("ap.csv"), &ap_csv(results))?];
    let routed: Vec<(String, ConfusionMatrix)> = results
        .iter()
        .filter(|(_, r)| r.confusion.total() > 0)
        .map(|(n, r)| (n.clone(), r.confusion))
        .collect();
    paths.push(write(dir.join("routing.csv"), &routing_csv(&routed))?);
    for (name, m) in &routed {
        paths.push(write(dir.join(format!("confusion_{name}.csv")), &confusion_csv(m))?);
    }
    for kind in ApKind::ALL {
        for thr in IOU_THRESHOLDS {
            let file = format!("{}_{thr}.svg", kind.name().to_lowercase());
            paths.push(write(dir.join(file), &ap_svg(results, kind, thr))?);
        }
    }
    Ok(paths)
}
