//! SVG learning curves and per-class bar charts, plus run summaries.

use std::fmt::Write as _;

use crate::eval::PALETTE;

const W: f64 = 720.0;
const H: f64 = 360.0;
const MARGIN: f64 = 56.0;

/// Series colors, reusing the class palette.
fn color(i: usize) -> String {
    let [r, g, b] = PALETTE[i % PALETTE.len()];
    format!("rgb({r},{g},{b})")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    s
}

fn axes(s: &mut String, y_lo: f64, y_hi: f64, y_label: &str) {
    let (x0, x1, y0, y1) = (MARGIN, W - MARGIN / 2.0, H - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let y = y0 - f * (y0 - y1);
        let v = y_lo + f * (y_hi - y_lo);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            y + 3.0,
            trim(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-family="sans-serif" font-size="11" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn trim(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let x = W - MARGIN * 3.5;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#,
            y - 9.0,
            color(i)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y}" font-family="sans-serif" font-size="11">{}</text>"#,
            x + 14.0,
            escape(name)
        );
    }
}

/// Polylines of `(x, y)` series sharing both axes. Non-finite points are
/// dropped.
pub fn line_chart(title: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let pts = series
        .iter()
        .flat_map(|(_, p)| p.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut xl, mut xh, mut yl, mut yh) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        (xl, xh, yl, yh) = (xl.min(x), xh.max(x), yl.min(y), yh.max(y));
    }
    if !xl.is_finite() {
        (xl, xh, yl, yh) = (0.0, 1.0, 0.0, 1.0);
    }
    if xh <= xl {
        xh = xl + 1.0;
    }
    if yh <= yl {
        yh = yl + 1.0;
    }
    let mut s = header(title);
    axes(&mut s, yl, yh, y_label);
    let (x0, x1, y0, y1) = (MARGIN, W - MARGIN / 2.0, H - MARGIN, MARGIN);
    for (i, (_, points)) in series.iter().enumerate() {
        let coords: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| {
                let px = x0 + (x - xl) / (xh - xl) * (x1 - x0);
                let py = y0 - (y - yl) / (yh - yl) * (y0 - y1);
                format!("{px:.1},{py:.1}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#,
            color(i),
            coords.join(" ")
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{} .. {}</text>"#,
        (x0 + x1) / 2.0,
        H - MARGIN / 2.0,
        trim(xl),
        trim(xh)
    );
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

/// Grouped bars, one group per category and one bar per series, scaled to
/// `0..=100`. Missing values leave a gap.
pub fn bar_chart(
    title: &str,
    categories: &[String],
    series: &[(String, Vec<Option<f64>>)],
) -> String {
    let mut s = header(title);
    axes(&mut s, 0.0, 100.0, "IoU (%)");
    let (x0, x1, y0, y1) = (MARGIN, W - MARGIN / 2.0, H - MARGIN, MARGIN);
    let group = (x1 - x0) / categories.len().max(1) as f64;
    let bar = group * 0.8 / series.len().max(1) as f64;
    for (c, name) in categories.iter().enumerate() {
        let gx = x0 + c as f64 * group + group * 0.1;
        for (i, (_, values)) in series.iter().enumerate() {
            if let Some(Some(v)) = values.get(c) {
                let h = v.clamp(0.0, 100.0) / 100.0 * (y0 - y1);
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
                    gx + i as f64 * bar,
                    y0 - h,
                    bar,
                    color(i)
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            gx + group * 0.4,
            y0 + 14.0,
            escape(name)
        );
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

/// Trailing moving average over `window` points, for readable loss curves.
pub fn smooth(values: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &(x, y)) in values.iter().enumerate() {
        sum += y;
        if i >= w {
            sum -= values[i - w].1;
        }
        out.push((x, sum / (i + 1).min(w) as f64));
    }
    out
}
