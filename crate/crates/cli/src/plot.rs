//! Minimal SVG scatter plots.

use std::fmt::Write as _;

pub struct Point {
    pub label: String,
    /// Points sharing a series share a colour and a legend entry.
    pub series: String,
    pub x: f64,
    pub y: f64,
}

const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

const W: f64 = 640.0;
const H: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { (hi - lo) * 0.08 } else { lo.abs().max(1.0) * 0.1 };
    (lo - pad, hi + pad)
}

/// Renders a labelled scatter plot. With `log_x` the x values must be
/// positive and are plotted on a log10 axis.
pub fn scatter(title: &str, x_label: &str, y_label: &str, points: &[Point], log_x: bool, note: &str) -> String {
    let tx = |x: f64| if log_x { x.max(1e-12).log10() } else { x };
    let (x0, x1) = range(points.iter().map(|p| tx(p.x)));
    let (y0, y1) = range(points.iter().map(|p| p.y));
    let px = |x: f64| LEFT + (tx(x) - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let py = |y: f64| H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM);

    let mut series: Vec<&str> = Vec::new();
    for p in points {
        if !series.contains(&p.series.as_str()) {
            series.push(&p.series);
        }
    }
    let colour = |s: &str| PALETTE[series.iter().position(|x| *x == s).unwrap_or(0) % PALETTE.len()];

    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, "<desc>{}</desc>", escape(note));
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let (ax0, ax1, ay0, ay1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(out, r#"<rect x="{ax0}" y="{ay0}" width="{}" height="{}" fill="none" stroke="black"/>"#, ax1 - ax0, ay1 - ay0);

    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let gx = ax0 + f * (ax1 - ax0);
        let gy = ay1 - f * (ay1 - ay0);
        let xt = if log_x { format!("{:.3}", 10f64.powf(xv)) } else { format!("{xv:.3}") };
        let _ = writeln!(out, r#"<text x="{gx:.1}" y="{:.1}" text-anchor="middle">{xt}</text>"#, ay1 + 16.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, ax0 - 6.0, gy + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (ax0 + ax1) / 2.0, H - 18.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (ay0 + ay1) / 2.0,
        (ay0 + ay1) / 2.0,
        escape(y_label)
    );

    for p in points {
        let (cx, cy) = (px(p.x), py(p.y));
        let _ = writeln!(
            out,
            r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="4" fill="{}"><title>{}</title></circle>"#,
            colour(&p.series),
            escape(&p.label)
        );
    }
    for (i, s) in series.iter().enumerate() {
        let y = TOP + 14.0 + i as f64 * 16.0;
        let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{}"/>"#, ax1 + 16.0, y - 4.0, colour(s));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, ax1 + 26.0, escape(s));
    }
    out.push_str("</svg>\n");
    out
}
