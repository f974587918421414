//! Minimal SVG line charts for run metrics. No dependencies: the output is
//! a single self-contained file with axes, tick labels, and one polyline
//! per series.

use std::fmt::Write as _;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
const W: f64 = 720.0;
const H: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 48.0;

fn nice_ticks(lo: f64, hi: f64, want: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let raw = (hi - lo) / want.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = mag
        * if norm <= 1.0 {
            1.0
        } else if norm <= 2.0 {
            2.0
        } else if norm <= 5.0 {
            5.0
        } else {
            10.0
        };
    let mut ticks = Vec::new();
    let mut t = (lo / step).ceil() * step;
    while t <= hi + step * 1e-9 {
        ticks.push(t);
        t += step;
    }
    ticks
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 1000.0 || a < 0.01 {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Render the chart. Series with fewer than one point are skipped; an empty
/// chart still renders axes so the file is well-formed.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let pts: Vec<(f64, f64)> =
        series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (x_lo, x_hi) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| (lo.min(x), hi.max(x)));
    let (y_lo, y_hi) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| (lo.min(y), hi.max(y)));
    let (x_lo, x_hi) = if pts.is_empty() { (0.0, 1.0) } else { (x_lo, x_hi) };
    let (y_lo, y_hi) = if pts.is_empty() {
        (0.0, 1.0)
    } else if y_hi > y_lo {
        let pad = (y_hi - y_lo) * 0.05;
        (y_lo - pad, y_hi + pad)
    } else {
        (y_lo - 0.5, y_hi + 0.5)
    };
    let x_span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let sx = |x: f64| MARGIN_L + (x - x_lo) / x_span * (W - MARGIN_L - MARGIN_R);
    let sy = |y: f64| H - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (H - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        W / 2.0
    );
    for t in nice_ticks(x_lo, x_hi, 6) {
        let x = sx(t);
        let _ = write!(
            svg,
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"#444\">{}</text>\n",
            MARGIN_T,
            H - MARGIN_B,
            H - MARGIN_B + 16.0,
            fmt_tick(t)
        );
    }
    for t in nice_ticks(y_lo, y_hi, 6) {
        let y = sy(t);
        let _ = write!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" fill=\"#444\">{}</text>\n",
            MARGIN_L,
            W - MARGIN_R,
            MARGIN_L - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = write!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n\
         <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"#333\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"#222\">{x_label}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" fill=\"#222\" \
         transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        H - MARGIN_B,
        W - MARGIN_R,
        H - MARGIN_B,
        H - MARGIN_B,
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0
    );
    for (i, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        );
        let ly = MARGIN_T + 14.0 * i as f64;
        let _ = write!(
            svg,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n<text x=\"{}\" y=\"{}\" fill=\"#222\">{}</text>\n",
            W - MARGIN_R - 120.0,
            W - MARGIN_R - 100.0,
            W - MARGIN_R - 94.0,
            ly + 4.0,
            s.name
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Pull (step, value) series out of JSONL metrics lines.
pub fn series_from_metrics(lines: &[String], event: &str, field: &str) -> Series {
    let mut points = Vec::new();
    for line in lines {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(line) {
            if v["event"] == event {
                if let (Some(x), Some(y)) = (v["step"].as_f64(), v[field].as_f64()) {
                    points.push((x, y));
                }
            }
        }
    }
    Series { name: field.to_string(), points }
}
