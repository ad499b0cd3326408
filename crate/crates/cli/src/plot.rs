//! Standalone SVG scatter plots.

use std::fmt::Write as _;

const SIZE: f64 = 400.0;
const MARGIN: f64 = 20.0;
const RADIUS: f64 = 4.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub fn color(label: usize) -> &'static str {
    PALETTE[label % PALETTE.len()]
}

/// One glyph per point, filled by cluster id; `outlined[i]` draws a dark ring.
pub fn scatter_svg(points: &[[f64; 2]], labels: &[usize], outlined: &[bool], title: &str) -> String {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let scale = if span > 0.0 { (SIZE - 2.0 * MARGIN) / span } else { 1.0 };
    let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(svg, "<title>{}</title>", escape(title));
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    for (i, p) in points.iter().enumerate() {
        let x = SIZE / 2.0 + (p[0] - mid[0]) * scale;
        // SVG y grows downwards.
        let y = SIZE / 2.0 - (p[1] - mid[1]) * scale;
        let stroke = if outlined.get(i).copied().unwrap_or(false) {
            r##" stroke="#000000" stroke-width="1.5""##
        } else {
            ""
        };
        let _ = writeln!(
            svg,
            r#"<circle class="point" cx="{x:.3}" cy="{y:.3}" r="{RADIUS}" fill="{}"{stroke}/>"#,
            color(labels[i])
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_points_two_colors() {
        let svg = scatter_svg(&[[0.0, 0.0], [0.1, 0.0], [1.0, 1.0], [1.1, 1.0]], &[0, 0, 1, 1], &[], "t");
        assert_eq!(svg.matches("<circle").count(), 4);
        assert_eq!(svg.matches(color(0)).count(), 2);
        assert_eq!(svg.matches(color(1)).count(), 2);
        assert!(!svg.contains("stroke="));
    }

    #[test]
    fn outlines_and_degenerate_extent() {
        let svg = scatter_svg(&[[2.0, 2.0], [2.0, 2.0]], &[0, 1], &[false, true], "a<b");
        assert_eq!(svg.matches("stroke=").count(), 1);
        assert!(svg.contains("cx=\"200.000\" cy=\"200.000\""));
        assert!(svg.contains("a&lt;b"));
    }
}
