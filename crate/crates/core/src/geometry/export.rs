//! CSV and SVG renderings of learned window geometry.
//!
//! Coordinates are in tokens of the padded grid. A window's drawn outline
//! is its outer edge (half-extent `s/2` around the center) pushed through
//! the window's scale, offset and rotation, so identity windows tile the
//! grid exactly. The SVG uses 10 pixels per token with the origin at the
//! top-left corner.

use std::fmt::Write as _;
use std::io::{self, Write};

use super::partition::WindowGrid;
use super::transform::{WindowParams, WindowTransform};
use crate::error::{Error, Result};

pub const PIXELS_PER_TOKEN: f64 = 10.0;

pub const CSV_HEADER: &str = "layer,window_row,window_col,head,s_x,s_y,o_x,o_y,theta,\
corner_x0,corner_y0,corner_x1,corner_y1,corner_x2,corner_y2,corner_x3,corner_y3";

/// One transformed window of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryRecord {
    pub layer: usize,
    pub window_row: usize,
    pub window_col: usize,
    pub head: usize,
    pub params: WindowParams,
    /// top-left, top-right, bottom-right, bottom-left before transformation
    pub corners: [(f64, f64); 4],
}

/// Outline corners of window `(row, col)` under `params`.
pub fn window_corners(grid: &WindowGrid, row: usize, col: usize, params: &WindowParams) -> [(f64, f64); 4] {
    let (cx, cy) = grid.center(row, col);
    let e = grid.window_size as f64 / 2.0;
    [(-e, -e), (e, -e), (e, e), (-e, e)].map(|rel| {
        let (dx, dy) = params.apply(rel);
        (cx + dx, cy + dy)
    })
}

/// Records for every window and every head (or only `head_filter`).
pub fn geometry_records(
    layer: usize,
    grid: &WindowGrid,
    transform: &WindowTransform,
    head_filter: Option<usize>,
) -> Result<Vec<GeometryRecord>> {
    if transform.windows != grid.num_windows() {
        return Err(Error::dim(format!(
            "transform has {} windows, grid has {}",
            transform.windows,
            grid.num_windows()
        )));
    }
    if let Some(h) = head_filter {
        if h >= transform.heads {
            return Err(Error::config(format!("head {h} out of range 0..{}", transform.heads)));
        }
    }
    let mut out = Vec::new();
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let w = row * grid.cols + col;
            for head in (0..transform.heads).filter(|h| head_filter.is_none_or(|f| f == *h)) {
                let params = *transform.get(w, head);
                let corners = window_corners(grid, row, col, &params);
                out.push(GeometryRecord { layer, window_row: row, window_col: col, head, params, corners });
            }
        }
    }
    Ok(out)
}

pub fn write_csv(records: &[GeometryRecord], mut out: impl Write) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        let p = &r.params;
        write!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.layer, r.window_row, r.window_col, r.head, p.scale_x, p.scale_y, p.offset_x, p.offset_y, p.theta
        )?;
        for (x, y) in r.corners {
            write!(out, ",{x},{y}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn head_color(head: usize) -> String {
    // golden-angle hue steps keep neighbouring heads distinguishable
    let hue = (head as f64 * 137.508) % 360.0;
    format!("hsl({hue:.1},75%,45%)")
}

/// SVG of the token grid (padding shaded) with one outline per record.
pub fn render_svg(grid: &WindowGrid, records: &[GeometryRecord]) -> String {
    let px = |v: f64| (v + 0.5) * PIXELS_PER_TOKEN;
    let (w, h) = (grid.padded_width() as f64 * PIXELS_PER_TOKEN, grid.padded_height() as f64 * PIXELS_PER_TOKEN);
    let (iw, ih) = (grid.width as f64 * PIXELS_PER_TOKEN, grid.height as f64 * PIXELS_PER_TOKEN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{w}" height="{h}" fill="#bbbbbb"/>"##);
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{iw}" height="{ih}" fill="#ffffff"/>"##);
    for r in records {
        let pts: Vec<String> = r.corners.iter().map(|&(x, y)| format!("{:.3},{:.3}", px(x), px(y))).collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="none" stroke="{}" stroke-width="1" data-layer="{}" data-window="{},{}" data-head="{}"/>"#,
            pts.join(" "),
            head_color(r.head),
            r.layer,
            r.window_row,
            r.window_col,
            r.head
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_windows_tile_the_padded_grid() {
        let grid = WindowGrid::partition(64, 64, 7).unwrap();
        let t = WindowTransform::identity(grid.num_windows(), 2);
        let recs = geometry_records(3, &grid, &t, Some(1)).unwrap();
        assert_eq!(recs.len(), 100);
        for r in &recs {
            let (x0, y0) = r.corners[0];
            let (x2, y2) = r.corners[2];
            assert_eq!((x0 + 0.5, y0 + 0.5), ((r.window_col * 7) as f64, (r.window_row * 7) as f64));
            assert_eq!((x2 - x0, y2 - y0), (7.0, 7.0));
        }
        let svg = render_svg(&grid, &recs);
        assert_eq!(svg.matches("<polygon").count(), 100);
    }

    #[test]
    fn csv_has_header_and_one_row_per_record() {
        let grid = WindowGrid::partition(14, 14, 7).unwrap();
        let recs = geometry_records(0, &grid, &WindowTransform::identity(4, 3), None).unwrap();
        let mut buf = Vec::new();
        write_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + 12);
        assert_eq!(lines[1].split(',').count(), 17);
    }

    #[test]
    fn bad_head_filter_is_rejected() {
        let grid = WindowGrid::partition(7, 7, 7).unwrap();
        assert!(geometry_records(0, &grid, &WindowTransform::identity(1, 2), Some(2)).is_err());
    }
}
