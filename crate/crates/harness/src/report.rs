//! Self-contained SVG figures. Output depends only on the inputs, so figures
//! can be compared byte for byte.

use std::fmt::Write;

use crate::error::HarnessError;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// A named sequence of (x, y) points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.into(),
            points,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        (W + LEFT - RIGHT) / 2.0,
        escape(title)
    );
}

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.5;
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    fn axes(&self, out: &mut String, x_label: &str, y_label: &str) {
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(
            out,
            r#"<path d="M{x0:.1},{y0:.1} V{y1:.1} H{x1:.1}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let (tx, ty) = (self.px(xv), self.py(yv));
            let _ = writeln!(
                out,
                r#"<line x1="{tx:.1}" y1="{y1:.1}" x2="{tx:.1}" y2="{:.1}" stroke="black"/><text x="{tx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                y1 + 5.0,
                y1 + 19.0,
                tick(xv)
            );
            let _ = writeln!(
                out,
                r#"<line x1="{:.1}" y1="{ty:.1}" x2="{x0:.1}" y2="{ty:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                x0 - 5.0,
                x0 - 8.0,
                ty + 4.0,
                tick(yv)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            H - 18.0,
            escape(x_label)
        );
        let _ = writeln!(
            out,
            r#"<text transform="translate(18,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
    }
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = W - RIGHT + 15.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            y - 10.0,
            PALETTE[i % PALETTE.len()],
            x + 18.0,
            y,
            escape(name)
        );
    }
}

fn check_series(series: &[Series]) -> Result<(), HarnessError> {
    if series.is_empty() {
        return Err(HarnessError::MissingSeries("(none)".into()));
    }
    if let Some(s) = series.iter().find(|s| s.points.is_empty()) {
        return Err(HarnessError::MissingSeries(s.name.clone()));
    }
    Ok(())
}

/// Line chart with one `class="marker"` circle per data point. `reference`
/// draws an unmarked dashed line under the data, e.g. an ideal curve.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    reference: Option<&Series>,
) -> Result<String, HarnessError> {
    check_series(series)?;
    let all = || series.iter().chain(reference).flat_map(|s| s.points.iter().copied());
    let frame = Frame {
        x: finite_range(all().map(|p| p.0)),
        y: finite_range(all().map(|p| p.1)),
    };
    let mut out = String::new();
    header(&mut out, title);
    frame.axes(&mut out, x_label, y_label);
    if let Some(r) = reference {
        let d = path_data(&frame, &r.points);
        let _ = writeln!(
            out,
            r##"<path class="reference" d="{d}" fill="none" stroke="#888888" stroke-dasharray="5,4"/>"##
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if s.points.len() > 1 {
            let d = path_data(&frame, &s.points);
            let _ = writeln!(out, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="2"/>"#);
        }
        for &(x, y) in &s.points {
            let _ = writeln!(
                out,
                r#"<circle class="marker" cx="{:.1}" cy="{:.1}" r="4" fill="{color}"/>"#,
                frame.px(x),
                frame.py(y)
            );
        }
    }
    let mut names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    if let Some(r) = reference {
        names.push(&r.name);
    }
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    Ok(out)
}

fn path_data(frame: &Frame, points: &[(f64, f64)]) -> String {
    let mut d = String::new();
    for (i, &(x, y)) in points.iter().enumerate() {
        let _ = write!(d, "{}{:.1},{:.1}", if i == 0 { "M" } else { " L" }, frame.px(x), frame.py(y));
    }
    d
}

/// Grouped bar chart: one group per category, one bar per series.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> Result<String, HarnessError> {
    if categories.is_empty() {
        return Err(HarnessError::MissingSeries("categories".into()));
    }
    if series.is_empty() {
        return Err(HarnessError::MissingSeries("(none)".into()));
    }
    if let Some((name, _)) = series.iter().find(|(_, v)| v.len() != categories.len()) {
        return Err(HarnessError::MissingSeries(name.clone()));
    }
    let (lo, hi) = finite_range(series.iter().flat_map(|(_, v)| v.iter().copied()).chain([0.0]));
    let frame = Frame {
        x: (0.0, categories.len() as f64),
        y: (lo, hi),
    };
    let mut out = String::new();
    header(&mut out, title);
    let slot = (W - LEFT - RIGHT) / categories.len() as f64;
    let bar = slot * 0.8 / series.len() as f64;
    let zero = frame.py(0.0);
    for (si, (_, values)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for (ci, &v) in values.iter().enumerate() {
            let x = LEFT + ci as f64 * slot + slot * 0.1 + si as f64 * bar;
            let y = frame.py(v);
            let _ = writeln!(
                out,
                r#"<rect class="marker" x="{x:.1}" y="{:.1}" width="{bar:.1}" height="{:.1}" fill="{color}"/>"#,
                y.min(zero),
                (y - zero).abs()
            );
        }
    }
    let (x0, x1) = (LEFT, W - RIGHT);
    let _ = writeln!(
        out,
        r#"<path d="M{x0:.1},{TOP:.1} V{:.1} M{x0:.1},{zero:.1} H{x1:.1}" fill="none" stroke="black"/>"#,
        H - BOTTOM
    );
    for i in 0..=4 {
        let yv = lo + i as f64 / 4.0 * (hi - lo);
        let ty = frame.py(yv);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 8.0,
            ty + 4.0,
            tick(yv)
        );
    }
    for (ci, c) in categories.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + (ci as f64 + 0.5) * slot,
            H - BOTTOM + 18.0,
            escape(c)
        );
    }
    let _ = writeln!(
        out,
        r#"<text transform="translate(18,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (TOP + H - BOTTOM) / 2.0,
        escape(y_label)
    );
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Heatmap of a square or rectangular matrix, rows top to bottom.
pub fn heatmap(title: &str, rows: &[String], cols: &[String], matrix: &[Vec<f64>]) -> Result<String, HarnessError> {
    if matrix.is_empty() || matrix.len() != rows.len() {
        return Err(HarnessError::MissingSeries("matrix rows".into()));
    }
    if matrix.iter().any(|r| r.len() != cols.len() || r.is_empty()) {
        return Err(HarnessError::MissingSeries("matrix columns".into()));
    }
    let (lo, hi) = finite_range(matrix.iter().flatten().copied());
    let mut out = String::new();
    header(&mut out, title);
    let cell = ((W - LEFT - RIGHT) / cols.len() as f64).min((H - TOP - BOTTOM) / rows.len() as f64);
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = if v.is_finite() { (v - lo) / (hi - lo) } else { 0.0 };
            // white to dark blue
            let c = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
            let _ = writeln!(
                out,
                r##"<rect class="marker" x="{:.1}" y="{:.1}" width="{cell:.1}" height="{cell:.1}" fill="#{:02x}{:02x}{:02x}" stroke="white"/><text x="{:.1}" y="{:.1}" text-anchor="middle" fill="{}">{}</text>"##,
                LEFT + j as f64 * cell,
                TOP + i as f64 * cell,
                c(255.0, 8.0),
                c(255.0, 48.0),
                c(255.0, 107.0),
                LEFT + (j as f64 + 0.5) * cell,
                TOP + (i as f64 + 0.5) * cell + 4.0,
                if t > 0.5 { "white" } else { "black" },
                tick(v)
            );
        }
    }
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            TOP + (i as f64 + 0.5) * cell + 4.0,
            escape(r)
        );
    }
    for (j, c) in cols.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + (j as f64 + 0.5) * cell,
            TOP + rows.len() as f64 * cell + 16.0,
            escape(c)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}
