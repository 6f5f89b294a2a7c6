//! Minimal deterministic SVG plotting (polylines and bar charts).

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 52.0;

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    );
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn axes(s: &mut String, x_label: &str, y_label: &str, x_range: (f64, f64), y_range: (f64, f64)) {
    let _ = write!(
        s,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN / 2.0,
        t = MARGIN / 2.0
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        H - 10.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        xml_escape(y_label)
    );
    for (v, anchor_x) in [(x_range.0, MARGIN), (x_range.1, W - MARGIN / 2.0)] {
        let _ = writeln!(
            s,
            "<text x=\"{anchor_x}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            H - MARGIN + 16.0,
            fmt_tick(v)
        );
    }
    for (v, y) in [(y_range.0, H - MARGIN), (y_range.1, MARGIN / 2.0)] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            MARGIN - 6.0,
            y + 4.0,
            fmt_tick(v)
        );
    }
}

/// Line plot of one or more named series over a shared x axis.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[(&str, &[(f64, f64)])]) -> String {
    let mut s = header(title);
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if pts.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let x_min = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y_min = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).min(0.0);
    let y_max = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let x_span = (x_max - x_min).max(1e-12);
    let y_span = (y_max - y_min).max(1e-12);
    let sx = |x: f64| MARGIN + (x - x_min) / x_span * (W - 1.5 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y_min) / y_span * (H - 1.5 * MARGIN);
    axes(&mut s, x_label, y_label, (x_min, x_max), (y_min, y_max));
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    for (k, (name, points)) in series.iter().enumerate() {
        let color = colors[k % colors.len()];
        let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            path.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" fill=\"{color}\">{}</text>",
            W - MARGIN / 2.0 - 150.0,
            MARGIN / 2.0 + 16.0 * k as f64,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bar chart from (label, value) pairs.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let mut s = header(title);
    if bars.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let y_max = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12);
    axes(&mut s, "", y_label, (0.0, bars.len() as f64), (0.0, y_max));
    let span = W - 1.5 * MARGIN;
    let bw = span / bars.len() as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = MARGIN + i as f64 * bw + 0.15 * bw;
        let h = (v / y_max) * (H - 1.5 * MARGIN);
        let y = H - MARGIN - h;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"#1f77b4\"/>",
            0.7 * bw
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            x + 0.35 * bw,
            H - MARGIN + 14.0,
            xml_escape(label)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"middle\">{v:.3}</text>",
            x + 0.35 * bw,
            y - 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_deterministic_and_wellformed() {
        let pts: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, (i as f64 * 0.3).sin())).collect();
        let a = line_plot("loss", "step", "L", &[("total", &pts)]);
        let b = line_plot("loss", "step", "L", &[("total", &pts)]);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        let bars = vec![("c0".to_string(), 0.4), ("c1".to_string(), 0.9)];
        let c = bar_chart("ap", "AP", &bars);
        assert!(c.contains("rect") && c.contains("0.900"));
    }

    #[test]
    fn empty_inputs_render_empty_plots() {
        let a = line_plot("x", "s", "v", &[]);
        assert!(a.contains("</svg>"));
        let b = bar_chart("y", "v", &[]);
        assert!(b.contains("</svg>"));
    }
}
