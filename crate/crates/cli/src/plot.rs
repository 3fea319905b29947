//! Minimal SVG line plots for timecourses with significance bars.

use std::fmt::Write;

const W: f64 = 720.0;
const H: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 130.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 70.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub name: String,
    pub values: Vec<Option<f64>>,
}

/// Horizontal bar under the axes marking significant spans.
pub struct Bars {
    pub name: String,
    pub spans: Vec<(f64, f64)>,
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

pub fn timecourse_svg(title: &str, y_label: &str, time_s: &[f64], series: &[Series], bars: &[Bars]) -> String {
    let finite = series.iter().flat_map(|s| s.values.iter().flatten()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (-1.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let t0 = time_s.first().copied().unwrap_or(0.0);
    let t1 = time_s.last().copied().unwrap_or(1.0).max(t0 + 1e-9);
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let x = |t: f64| LEFT + (t - t0) / (t1 - t0) * pw;
    let y = |v: f64| TOP + (hi - v) / (hi - lo) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" font-size="13">{}</text>"#, LEFT, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    if lo < 0.0 && hi > 0.0 {
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" x2="{}" y1="{y0:.2}" y2="{y0:.2}" stroke="#999" stroke-dasharray="3,3"/>"##,
            LEFT + pw,
            y0 = y(0.0)
        );
    }
    if t0 < 0.0 && t1 > 0.0 {
        let _ = writeln!(
            s,
            r##"<line x1="{x0:.2}" x2="{x0:.2}" y1="{TOP}" y2="{}" stroke="#999" stroke-dasharray="3,3"/>"##,
            TOP + ph,
            x0 = x(0.0)
        );
    }
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 4.0, y(v) + 4.0, fmt_num(v));
        let t = t0 + (t1 - t0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, x(t), TOP + ph + 14.0, fmt_num(t));
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">time (s)</text>"#, LEFT + pw / 2.0, H - 6.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );

    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        // break the line at missing values
        let mut path = String::new();
        let mut pen_down = false;
        for (t, v) in time_s.iter().zip(&ser.values) {
            match v.filter(|v| v.is_finite()) {
                Some(v) => {
                    let _ = write!(path, "{}{:.2},{:.2} ", if pen_down { "L" } else { "M" }, x(*t), y(v));
                    pen_down = true;
                }
                None => pen_down = false,
            }
        }
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.trim_end());
        let ly = TOP + 14.0 * k as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            LEFT + pw + 28.0,
            LEFT + pw + 32.0,
            ly + 4.0,
            escape(&ser.name),
            lx = LEFT + pw + 10.0,
        );
    }
    for (k, b) in bars.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let by = TOP + ph + 22.0 + 6.0 * k as f64;
        for &(a, e) in &b.spans {
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{by}" width="{:.2}" height="4" fill="{color}"><title>{}</title></rect>"#,
                x(a),
                (x(e) - x(a)).max(1.0),
                escape(&b.name)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_well_formed_and_breaks_gaps() {
        let t = [0.0, 0.1, 0.2, 0.3];
        let svg = timecourse_svg(
            "a < b",
            "index",
            &t,
            &[Series { name: "SS".into(), values: vec![Some(0.0), None, Some(1.0), Some(2.0)] }],
            &[Bars { name: "SS".into(), spans: vec![(0.1, 0.2)] }],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a &lt; b"));
        // one move for each unbroken run
        let path = svg.lines().find(|l| l.starts_with("<path")).unwrap();
        assert_eq!(path.matches('M').count(), 2);
    }

    #[test]
    fn constant_series_do_not_divide_by_zero() {
        let svg = timecourse_svg("c", "v", &[0.0, 1.0], &[Series { name: "x".into(), values: vec![Some(1.0), Some(1.0)] }], &[]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
