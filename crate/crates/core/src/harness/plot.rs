//! SVG charts of per-epoch metric CSVs.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const WIDTH: f64 = 760.0;
const PANEL_HEIGHT: f64 = 280.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 40.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Validation-row series read from a metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCurves {
    pub accuracy: Vec<Series>,
    pub competition: Vec<Series>,
}

fn parse_cell(v: &str, col: &str, line: usize) -> Result<Option<f64>> {
    if v.is_empty() {
        return Ok(None);
    }
    v.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Config(format!("line {line}: column {col}: not a number: {v:?}")))
}

pub fn read_curves(csv_text: &str) -> Result<RunCurves> {
    let mut reader = csv::ReaderBuilder::new().from_reader(csv_text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Config(format!("unreadable CSV header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.iter().all(|h| h.is_empty()) {
        return Err(Error::Config("empty CSV".into()));
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("missing column {name}")))
    };
    let epoch = col("epoch")?;
    let split = col("split")?;
    let acc = col("acc")?;
    let wanted: Vec<(usize, bool)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            if i == acc || h.starts_with("acc_") {
                Some((i, false))
            } else if h.starts_with("d_") {
                Some((i, true))
            } else {
                None
            }
        })
        .collect();
    let mut series: Vec<Series> = wanted
        .iter()
        .map(|&(i, _)| Series { name: headers[i].clone(), points: Vec::new() })
        .collect();
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Config(format!("malformed CSV: {e}")))?;
        rows += 1;
        if record.get(split) != Some("val") {
            continue;
        }
        let line = line + 2;
        let x = parse_cell(record.get(epoch).unwrap_or(""), "epoch", line)?
            .ok_or_else(|| Error::Config(format!("line {line}: empty epoch")))?;
        for (s, &(i, _)) in series.iter_mut().zip(&wanted) {
            if let Some(y) = parse_cell(record.get(i).unwrap_or(""), &headers[i], line)? {
                s.points.push((x, y));
            }
        }
    }
    if rows == 0 {
        return Err(Error::Config("empty CSV: no data rows".into()));
    }
    let mut curves = RunCurves { accuracy: Vec::new(), competition: Vec::new() };
    for (s, &(_, is_d)) in series.into_iter().zip(&wanted) {
        if is_d {
            if !s.points.is_empty() {
                curves.competition.push(s);
            }
        } else {
            curves.accuracy.push(s);
        }
    }
    if curves.accuracy.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Config("no validation rows with accuracy values".into()));
    }
    Ok(curves)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn panel(out: &mut String, top: f64, title: &str, series: &[Series], x_range: (f64, f64)) {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = PANEL_HEIGHT - TOP - BOTTOM;
    let y0 = top + TOP;
    let (xmin, xmax) = x_range;
    let span = if xmax > xmin { xmax - xmin } else { 1.0 };
    let px = |x: f64| LEFT + (x - xmin) / span * plot_w;
    let py = |y: f64| y0 + (1.0 - y.clamp(0.0, 1.0)) * plot_h;

    writeln!(out, r#"<g class="panel">"#).unwrap();
    writeln!(out, r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">{}</text>"#, LEFT + plot_w / 2.0, top + 22.0, escape(title)).unwrap();
    writeln!(out, r##"<rect x="{LEFT}" y="{y0}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##).unwrap();
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = py(v);
        writeln!(out, r##"<line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, LEFT + plot_w).unwrap();
        writeln!(out, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{v:.2}</text>"#, LEFT - 6.0, y + 4.0).unwrap();
    }
    let ticks = (span.round() as usize).clamp(1, 6);
    for i in 0..=ticks {
        let x = xmin + span * i as f64 / ticks as f64;
        writeln!(out, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#, px(x), y0 + plot_h + 16.0, x.round()).unwrap();
    }
    writeln!(out, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">epoch</text>"#, LEFT + plot_w / 2.0, y0 + plot_h + 32.0).unwrap();
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#, pts.join(" ")).unwrap();
        let ly = y0 + 12.0 + 18.0 * i as f64;
        let lx = LEFT + plot_w + 14.0;
        writeln!(out, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#, lx + 20.0).unwrap();
        writeln!(out, r#"<text x="{}" y="{}" font-size="12">{}</text>"#, lx + 26.0, ly + 4.0, escape(&s.name)).unwrap();
    }
    writeln!(out, "</g>").unwrap();
}

/// Accuracy panel, plus a competition-strength panel when `d_` columns carry data.
pub fn render_svg(curves: &RunCurves) -> String {
    let all = curves.accuracy.iter().chain(&curves.competition).flat_map(|s| s.points.iter().map(|p| p.0));
    let (xmin, xmax) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let panels = if curves.competition.is_empty() { 1 } else { 2 };
    let height = PANEL_HEIGHT * panels as f64;
    let mut out = String::new();
    writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    panel(&mut out, 0.0, "Validation accuracy", &curves.accuracy, (xmin, xmax));
    if !curves.competition.is_empty() {
        panel(&mut out, PANEL_HEIGHT, "Competition strength", &curves.competition, (xmin, xmax));
    }
    writeln!(out, "</svg>").unwrap();
    out
}

pub fn plot_csv(csv_text: &str) -> Result<String> {
    Ok(render_svg(&read_curves(csv_text)?))
}
