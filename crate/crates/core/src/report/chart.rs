//! SVG rendering of reports: a per-layer saturation/probe chart and
//! per-position probe heatmaps.

use std::fmt::Write;

use super::build::AnalysisReport;
use super::ReportError;
use crate::probes::Heatmap;

pub const CHART_FILE: &str = "chart.svg";

const SLOT: f64 = 48.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const PLOT_H: f64 = 240.0;
const BOTTOM: f64 = 96.0;

const CELL: f64 = 40.0;
/// Heatmap ramp endpoints, low to high.
const RAMP_LOW: (f64, f64, f64) = (247.0, 251.0, 255.0);
const RAMP_HIGH: (f64, f64, f64) = (8.0, 48.0, 107.0);

pub fn heatmap_file_name(layer: &str) -> String {
    format!("heatmap_{layer}.svg")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(out: &mut String, width: f64, height: f64) {
    writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
}

/// Bars for saturation and a line for probe accuracy, both on a 0–1 axis, with
/// the tail shaded and the border layer marked.
pub fn render_chart(report: &AnalysisReport) -> Result<String, ReportError> {
    let layers = &report.layers;
    if layers.is_empty() {
        return Err(ReportError::Empty);
    }
    let n = layers.len() as f64;
    let width = LEFT + SLOT * n + RIGHT;
    let height = TOP + PLOT_H + BOTTOM;
    let y = |v: f64| TOP + PLOT_H * (1.0 - v.clamp(0.0, 1.0));
    let x0 = |i: usize| LEFT + SLOT * i as f64;
    let mut s = String::new();
    header(&mut s, width, height);
    writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{} @ {}px</text>"#,
        width / 2.0,
        escape(&report.arch),
        report.input_size
    )
    .unwrap();

    if let Some(range) = report.tail.as_ref().and_then(|t| t.tail.clone()) {
        writeln!(
            s,
            r##"<rect class="tail-region" x="{:.1}" y="{TOP:.1}" width="{:.1}" height="{PLOT_H:.1}" fill="#f4a582" fill-opacity="0.35"/>"##,
            x0(range.start),
            SLOT * range.len() as f64
        )
        .unwrap();
    }

    // Axis and gridlines.
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        writeln!(
            s,
            r##"<line class="grid" x1="{LEFT:.1}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#dddddd"/>"##,
            y(v),
            width - RIGHT
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            LEFT - 6.0,
            y(v) + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r##"<line class="axis" x1="{LEFT:.1}" y1="{TOP:.1}" x2="{LEFT:.1}" y2="{:.1}" stroke="#333333"/>"##,
        TOP + PLOT_H
    )
    .unwrap();

    for (i, l) in layers.iter().enumerate() {
        if let Some(v) = l.saturation {
            writeln!(
                s,
                r##"<rect class="bar" x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#4393c3"><title>{} saturation {v:.4}</title></rect>"##,
                x0(i) + SLOT * 0.15,
                y(v),
                SLOT * 0.7,
                TOP + PLOT_H - y(v),
                escape(&l.name)
            )
            .unwrap();
        }
        let lx = x0(i) + SLOT / 2.0;
        let ly = TOP + PLOT_H + 10.0;
        writeln!(
            s,
            r#"<text x="{lx:.1}" y="{ly:.1}" transform="rotate(45 {lx:.1} {ly:.1})">{}</text>"#,
            escape(&l.name)
        )
        .unwrap();
    }

    let points: Vec<(f64, f64, f64)> = layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.probe_accuracy.map(|a| (x0(i) + SLOT / 2.0, y(a), a)))
        .collect();
    if points.len() > 1 {
        let path: Vec<String> = points.iter().map(|(px, py, _)| format!("{px:.1},{py:.1}")).collect();
        writeln!(
            s,
            r##"<polyline class="probe-line" points="{}" fill="none" stroke="#b2182b" stroke-width="2"/>"##,
            path.join(" ")
        )
        .unwrap();
    }
    for (px, py, a) in &points {
        writeln!(
            s,
            r##"<circle class="probe-point" cx="{px:.1}" cy="{py:.1}" r="3.5" fill="#b2182b"><title>probe {a:.4}</title></circle>"##
        )
        .unwrap();
    }

    if let Some(b) = layers.iter().position(|l| l.flags.is_border) {
        let bx = x0(b);
        writeln!(
            s,
            r##"<line class="border-marker" x1="{bx:.1}" y1="{:.1}" x2="{bx:.1}" y2="{:.1}" stroke="#1a1a1a" stroke-width="2" stroke-dasharray="6,3"/>"##,
            TOP - 8.0,
            TOP + PLOT_H
        )
        .unwrap();
    }

    let ly = height - 14.0;
    writeln!(
        s,
        r##"<g class="legend"><rect x="{LEFT:.1}" y="{:.1}" width="12" height="12" fill="#4393c3"/><text x="{:.1}" y="{ly:.1}">saturation</text><circle cx="{:.1}" cy="{:.1}" r="3.5" fill="#b2182b"/><text x="{:.1}" y="{ly:.1}">probe accuracy</text></g>"##,
        ly - 10.0,
        LEFT + 16.0,
        LEFT + 100.0,
        ly - 4.0,
        LEFT + 108.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let c = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        c(RAMP_LOW.0, RAMP_HIGH.0),
        c(RAMP_LOW.1, RAMP_HIGH.1),
        c(RAMP_LOW.2, RAMP_HIGH.2)
    )
}

/// Grid of relative probe accuracies, darker for higher values, scaled between
/// the smallest and largest cell.
pub fn render_heatmap(h: &Heatmap) -> Result<String, ReportError> {
    if h.relative.is_empty() || h.relative.len() != h.height * h.width {
        return Err(ReportError::Empty);
    }
    let lo = h.relative.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = h.relative.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let t = |v: f64| if span > 0.0 { (v - lo) / span } else { 0.5 };
    let grid_w = CELL * h.width as f64;
    let width = grid_w.max(160.0) + 40.0;
    let height = 40.0 + CELL * h.height as f64 + 60.0;
    let mut s = String::new();
    header(&mut s, width, height);
    writeln!(
        s,
        r#"<text x="20" y="24" font-size="13">{} relative probe accuracy</text>"#,
        escape(&h.layer_name)
    )
    .unwrap();
    for i in 0..h.height {
        for j in 0..h.width {
            let v = h.relative[i * h.width + j];
            writeln!(
                s,
                r##"<rect class="cell" x="{:.1}" y="{:.1}" width="{CELL:.1}" height="{CELL:.1}" fill="{}" stroke="#ffffff" data-value="{v:.6}"><title>({i}, {j}) {v:.4}</title></rect>"##,
                20.0 + CELL * j as f64,
                40.0 + CELL * i as f64,
                ramp(t(v))
            )
            .unwrap();
        }
    }
    let ly = 40.0 + CELL * h.height as f64 + 16.0;
    writeln!(
        s,
        r##"<defs><linearGradient id="ramp" x1="0" x2="1" y1="0" y2="0"><stop offset="0" stop-color="{}"/><stop offset="1" stop-color="{}"/></linearGradient></defs>"##,
        ramp(0.0),
        ramp(1.0)
    )
    .unwrap();
    writeln!(
        s,
        r##"<g class="legend"><rect x="20" y="{ly:.1}" width="120" height="12" fill="url(#ramp)" stroke="#999999"/><text x="20" y="{:.1}">{lo:.3}</text><text x="140" y="{:.1}" text-anchor="end">{hi:.3}</text></g>"##,
        ly + 26.0,
        ly + 26.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}
