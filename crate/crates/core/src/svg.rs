//! Minimal SVG line plots and heatmaps for CLI reports.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One polyline per series over a shared axis box.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (x0, x1) = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut out = header(title);
    let _ = writeln!(
        out,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, esc(x_label));
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        esc(y_label)
    );
    for (v, y) in [(y0, H - PAD), (y1, PAD)] {
        let _ = writeln!(out, r#"<text x="{}" y="{y:.1}" text-anchor="end" font-size="10">{v:.3}</text>"#, PAD - 4.0);
    }
    for (v, x) in [(x0, PAD), (x1, W - PAD)] {
        let _ = writeln!(out, r#"<text x="{x:.1}" y="{}" text-anchor="middle" font-size="10">{v}</text>"#, H - PAD + 14.0);
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}" font-size="11">{}</text>"#,
            W - PAD + 4.0,
            PAD + 14.0 * (i as f64 + 1.0),
            esc(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Rows × columns grid shaded from white (min) to dark blue (max).
pub fn heatmap(title: &str, rows: &[String], cols: &[String], values: &[Vec<f64>]) -> String {
    let (lo, hi) = range(values.iter().flatten().copied());
    let left = PAD + 60.0;
    let cw = (W - left - PAD) / cols.len().max(1) as f64;
    let ch = (H - 2.0 * PAD) / rows.len().max(1) as f64;
    let mut out = header(title);
    for (r, row) in values.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#,
            left - 4.0,
            PAD + ch * (r as f64 + 0.5),
            esc(&rows[r])
        );
        for (c, v) in row.iter().enumerate() {
            let t = if v.is_finite() { (v - lo) / (hi - lo) } else { 0.0 };
            let shade = |full: f64| (255.0 - t * (255.0 - full)).round() as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({},{},{})"><title>{v:.4}</title></rect>"#,
                left + cw * c as f64,
                PAD + ch * r as f64,
                cw,
                ch,
                shade(8.0),
                shade(48.0),
                shade(107.0)
            );
        }
    }
    for (c, name) in cols.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            left + cw * (c as f64 + 0.5),
            H - PAD + 14.0,
            esc(name)
        );
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10">min {lo:.3} / max {hi:.3}</text>"#, left, H - 12.0);
    out.push_str("</svg>\n");
    out
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        esc(title)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_plot_has_one_polyline_per_series() {
        let s = vec![
            ("a".to_string(), vec![(1.0, 0.0), (2.0, 1.0)]),
            ("b<c".to_string(), vec![(1.0, 2.0), (2.0, 2.0)]),
        ];
        let svg = line_plot("t", "x", "y", &s);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;c"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn heatmap_cell_count() {
        let svg = heatmap("h", &["r1".into(), "r2".into()], &["1".into(), "2".into(), "3".into()], &[
            vec![0.0, 0.5, 1.0],
            vec![1.0, f64::NAN, 0.0],
        ]);
        assert_eq!(svg.matches("<title>").count(), 6);
        assert!(svg.contains("rgb(255,255,255)"));
    }
}
