//! Deterministic scatter plots: fixed 600×600 panels over `[−1.2, 1.2]²`.

use std::fmt::Write as _;

use crate::autodiff::Tensor;

pub const PANEL: f64 = 600.0;
pub const EXTENT: f64 = 1.2;
pub const DATA_COLOR: &str = "#1f77b4";
pub const SAMPLE_COLOR: &str = "#ff7f0e";
const TITLE_BAND: f64 = 28.0;

/// One panel: reference data in blue, model samples (if any) in orange.
#[derive(Debug, Clone, Copy)]
pub struct Panel<'a> {
    pub title: &'a str,
    pub data: &'a Tensor,
    pub samples: Option<&'a Tensor>,
}

fn to_px(v: f64) -> f64 {
    (v + EXTENT) / (2.0 * EXTENT) * PANEL
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn points(out: &mut String, x: &Tensor, color: &str, dx: f64) {
    let _ = writeln!(out, r#"<g fill="{color}">"#);
    for i in 0..x.rows() {
        let r = x.row(i);
        let (px, py) = (to_px(r[0]), PANEL - to_px(r[1]));
        // Off-canvas points are dropped rather than clamped.
        if !(0.0..=PANEL).contains(&px) || !(0.0..=PANEL).contains(&py) {
            continue;
        }
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="2" height="2"/>"#,
            dx + px - 1.0,
            TITLE_BAND + py - 1.0
        );
    }
    out.push_str("</g>\n");
}

/// Panels side by side in one row. Only the first two coordinates are drawn.
pub fn scatter_grid(panels: &[Panel]) -> String {
    let width = PANEL * panels.len().max(1) as f64;
    let height = PANEL + TITLE_BAND;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for (k, p) in panels.iter().enumerate() {
        let dx = PANEL * k as f64;
        let _ = writeln!(
            out,
            r##"<rect x="{dx}" y="{TITLE_BAND}" width="{PANEL}" height="{PANEL}" fill="none" stroke="#cccccc"/>"##
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="20" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
            dx + PANEL / 2.0,
            escape(p.title)
        );
        points(&mut out, p.data, DATA_COLOR, dx);
        if let Some(s) = p.samples {
            points(&mut out, s, SAMPLE_COLOR, dx);
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_colours() {
        let data = Tensor::matrix(&[&[0.0, 0.0], &[5.0, 0.0]]);
        let samples = Tensor::matrix(&[&[-1.2, 1.2]]);
        let svg = scatter_grid(&[
            Panel {
                title: "a<b",
                data: &data,
                samples: Some(&samples),
            },
            Panel {
                title: "b",
                data: &data,
                samples: None,
            },
        ]);
        assert!(svg.contains(r#"width="1200" height="628""#));
        assert!(svg.contains("a&lt;b"));
        // The centre maps to (300, 300); the out-of-range point is dropped.
        assert_eq!(svg.matches(r#"<rect x="299.00" y="327.00""#).count(), 1);
        assert_eq!(svg.matches(r#"<rect x="899.00" y="327.00""#).count(), 1);
        assert_eq!(svg.matches(r#"width="2" height="2""#).count(), 3);
        assert!(svg.contains(&format!(r#"fill="{SAMPLE_COLOR}""#)));
        assert_eq!(svg, scatter_grid(&[Panel { title: "a<b", data: &data, samples: Some(&samples) }, Panel { title: "b", data: &data, samples: None }]));
    }
}
