//! Static rate-distortion plots: bpp on a log x axis, PSNR on y.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A named polyline. Points with non-finite PSNR (lossless) are drawn as
/// markers pinned to the top edge.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: &'a [(f64, f64)],
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn rd_plot(series: &[Series], title: &str) -> String {
    let finite = || {
        series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|p| p.0 > 0.0 && p.0.is_finite())
    };
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(r, d) in finite() {
        x0 = x0.min(r.log10());
        x1 = x1.max(r.log10());
        if d.is_finite() {
            y0 = y0.min(d);
            y1 = y1.max(d);
        }
    }
    if !x0.is_finite() {
        (x0, x1) = (-1.0, 1.0);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        (x0, x1) = (x0 - 0.5, x1 + 0.5);
    }
    if y1 - y0 < 1e-9 {
        (y0, y1) = (y0 - 1.0, y1 + 1.0);
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |r: f64| MARGIN + (r.log10() - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |d: f64| {
        if d.is_finite() {
            H - MARGIN - (d - y0) / (y1 - y0) * (H - 2.0 * MARGIN)
        } else {
            MARGIN - 10.0
        }
    };

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    )
    .unwrap();
    for e in (x0.floor() as i32)..=(x1.ceil() as i32) {
        let v = 10f64.powi(e);
        let x = sx(v);
        if (MARGIN - 1e-9..=W - MARGIN + 1e-9).contains(&x) {
            writeln!(s, r##"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="#ccc"/>"##, MARGIN, H - MARGIN).unwrap();
            writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{v}</text>"#, H - MARGIN + 16.0).unwrap();
        }
    }
    for i in 0..=4 {
        let d = y0 + (y1 - y0) * i as f64 / 4.0;
        writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{d:.1}</text>"#, MARGIN - 6.0, sy(d) + 4.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">bpp (log scale)</text>"#, W / 2.0, H - 15.0).unwrap();
    writeln!(s, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">D1 PSNR (dB)</text>"#, H / 2.0, H / 2.0).unwrap();

    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut pts: Vec<(f64, f64)> = ser.points.iter().copied().filter(|p| p.0 > 0.0 && p.0.is_finite()).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let line: Vec<String> = pts
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(r, d)| format!("{:.1},{:.1}", sx(r), sy(d)))
            .collect();
        if line.len() > 1 {
            writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, line.join(" ")).unwrap();
        }
        for &(r, d) in &pts {
            writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{color}"/>"#, sx(r), sy(d)).unwrap();
            if !d.is_finite() {
                writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="{color}">lossless</text>"#, sx(r), sy(d) - 6.0).unwrap();
            }
        }
        let ly = MARGIN + 16.0 + 16.0 * k as f64;
        writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, W - MARGIN - 120.0, W - MARGIN - 100.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, W - MARGIN - 95.0, ly + 4.0, escape(ser.name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_curve() {
        let a = [(0.1, 30.0), (0.5, 40.0), (2.0, 50.0)];
        let b = [(0.2, 35.0), (1.0, 45.0), (4.0, f64::INFINITY)];
        let svg = rd_plot(&[Series { name: "a", points: &a }, Series { name: "b<&>", points: &b }], "t");
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;&amp;&gt;"));
        assert!(svg.contains("lossless"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn degenerate_inputs_render() {
        let svg = rd_plot(&[Series { name: "x", points: &[(1.0, f64::INFINITY)] }], "");
        assert!(!svg.contains("NaN"));
        let svg = rd_plot(&[], "empty");
        assert!(svg.contains("</svg>"));
    }
}
