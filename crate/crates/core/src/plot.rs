//! Dependency-free SVG rendering of sample sets.

use std::fmt::Write as _;

use ndarray::ArrayView2;

use crate::error::{Error, Result};

const SIZE: f64 = 480.0;
const MARGIN: f64 = 36.0;

fn check_nonempty(samples: ArrayView2<'_, f64>) -> Result<()> {
    if samples.nrows() == 0 {
        return Err(Error::invalid("nothing to plot: sample set is empty"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("plot input".into()));
    }
    Ok(())
}

/// Scatter of the first two columns over a symmetric square window that
/// covers every point.
pub fn scatter_svg(samples: ArrayView2<'_, f64>, title: &str) -> Result<String> {
    check_nonempty(samples)?;
    if samples.ncols() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: samples.ncols() });
    }
    let extent = samples.iter().fold(1.0f64, |m, v| m.max(v.abs())) * 1.05;
    let scale = (SIZE - 2.0 * MARGIN) / (2.0 * extent);
    let px = |x: f64| MARGIN + (x + extent) * scale;
    let py = |y: f64| SIZE - MARGIN - (y + extent) * scale;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="22" font-family="sans-serif" font-size="13">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r##"<g stroke="#bbb" stroke-width="1"><line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/><line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/></g>"##,
        px(-extent),
        py(0.0),
        px(extent),
        py(0.0),
        px(0.0),
        py(-extent),
        px(0.0),
        py(extent)
    );
    let _ = writeln!(s, r##"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" fill="#666">{extent:.2}</text>"##, px(extent) - 24.0, py(0.0) - 4.0);
    let _ = writeln!(s, r##"<g fill="#1f5fa8" fill-opacity="0.35">"##);
    for row in samples.rows() {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.6"/>"#, px(row[0]), py(row[1]));
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

/// Tiles of `height x width` rasters with values in `[-1, 1]`, one tile per
/// row, at most `max_tiles` tiles.
pub fn raster_grid_svg(samples: ArrayView2<'_, f64>, height: usize, width: usize, max_tiles: usize, title: &str) -> Result<String> {
    check_nonempty(samples)?;
    if samples.ncols() != height * width {
        return Err(Error::DimensionMismatch { expected: height * width, got: samples.ncols() });
    }
    let n = samples.nrows().min(max_tiles.max(1));
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let cell = 6.0;
    let gap = 4.0;
    let tile_w = width as f64 * cell;
    let tile_h = height as f64 * cell;
    let w = cols as f64 * (tile_w + gap) + gap;
    let h = rows as f64 * (tile_h + gap) + gap + 24.0;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#222"/>"##);
    let _ = writeln!(s, r#"<text x="{gap}" y="16" font-family="sans-serif" font-size="12" fill="white">{}</text>"#, escape(title));
    for (k, row) in samples.rows().into_iter().take(n).enumerate() {
        let ox = gap + (k % cols) as f64 * (tile_w + gap);
        let oy = 24.0 + gap + (k / cols) as f64 * (tile_h + gap);
        for i in 0..height {
            for j in 0..width {
                let v = ((row[i * width + j] + 1.0) / 2.0).clamp(0.0, 1.0);
                let g = (v * 255.0).round() as u8;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})"/>"#,
                    ox + j as f64 * cell,
                    oy + i as f64 * cell
                );
            }
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn scatter_has_one_circle_per_point() {
        let x = array![[0.0, 1.0], [-2.0, 0.5], [3.0, -3.0]];
        let svg = scatter_svg(x.view(), "a < b").unwrap();
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("a &lt; b"));
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn empty_and_wrong_shapes_fail() {
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(scatter_svg(empty.view(), "").is_err());
        assert!(scatter_svg(array![[1.0, 2.0, 3.0]].view(), "").is_err());
        assert!(raster_grid_svg(array![[1.0, 2.0, 3.0]].view(), 2, 2, 4, "").is_err());
    }

    #[test]
    fn raster_tiles() {
        let x = Array2::from_elem((5, 4), -1.0);
        let svg = raster_grid_svg(x.view(), 2, 2, 3, "t").unwrap();
        assert_eq!(svg.matches("rgb(0,0,0)").count(), 12);
        assert!(svg.contains("fill=\"#222\""));
    }
}
