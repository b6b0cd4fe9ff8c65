use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Zero-padded partition of an `H×W` token grid into `s×s` windows.
///
/// Padding is added on the bottom and right. Coordinates are `(x, y)` in
/// tokens of the padded grid, `x` along the width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGrid {
    pub window_size: usize,
    pub height: usize,
    pub width: usize,
    pub rows: usize,
    pub cols: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl WindowGrid {
    pub fn partition(height: usize, width: usize, window_size: usize) -> Result<Self> {
        if window_size == 0 {
            return Err(Error::config("window size must be at least 1"));
        }
        if height == 0 || width == 0 {
            return Err(Error::config(format!("empty token grid {height}x{width}")));
        }
        let rows = height.div_ceil(window_size);
        let cols = width.div_ceil(window_size);
        Ok(Self {
            window_size,
            height,
            width,
            rows,
            cols,
            pad_h: rows * window_size - height,
            pad_w: cols * window_size - width,
        })
    }

    pub fn num_windows(&self) -> usize {
        self.rows * self.cols
    }

    /// Tokens per window, `s²`.
    pub fn points(&self) -> usize {
        self.window_size * self.window_size
    }

    pub fn padded_height(&self) -> usize {
        self.rows * self.window_size
    }

    pub fn padded_width(&self) -> usize {
        self.cols * self.window_size
    }

    fn half(&self) -> f64 {
        (self.window_size as f64 - 1.0) / 2.0
    }

    /// Center `(x, y)` of window `(row, col)`.
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.window_size as f64;
        (col as f64 * s + self.half(), row as f64 * s + self.half())
    }

    /// Window centers in row-major window order.
    pub fn centers(&self) -> Vec<(f64, f64)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .map(|(r, c)| self.center(r, c))
            .collect()
    }

    /// Offsets `(x^r, y^r)` of the `s²` lattice points from the window
    /// center, row-major; components range over `±(s-1)/2` in unit steps.
    pub fn relative_offsets(&self) -> Vec<(f64, f64)> {
        let s = self.window_size;
        let h = self.half();
        (0..s)
            .flat_map(|ky| (0..s).map(move |kx| (kx as f64 - h, ky as f64 - h)))
            .collect()
    }

    /// Padded-grid token index of point `p` in window `w`.
    pub fn token(&self, window: usize, point: usize) -> usize {
        let s = self.window_size;
        let (r, c) = (window / self.cols, window % self.cols);
        let (ky, kx) = (point / s, point % s);
        (r * s + ky) * self.padded_width() + c * s + kx
    }

    /// Gather index that zero-pads an `(H·W)×C` token matrix to `(Hp·Wp)×C`.
    pub(crate) fn pad_index(&self, channels: usize) -> Arc<[Option<usize>]> {
        let (hp, wp) = (self.padded_height(), self.padded_width());
        let mut idx = Vec::with_capacity(hp * wp * channels);
        for y in 0..hp {
            for x in 0..wp {
                for ch in 0..channels {
                    let inside = y < self.height && x < self.width;
                    idx.push(inside.then(|| (y * self.width + x) * channels + ch));
                }
            }
        }
        idx.into()
    }

    /// Gather index from a padded `(Hp·Wp)×C` matrix to `[windows·heads, s², C/heads]`.
    pub(crate) fn window_index(&self, channels: usize, heads: usize) -> Arc<[Option<usize>]> {
        let per_head = channels / heads;
        let mut idx = Vec::with_capacity(self.num_windows() * self.points() * channels);
        for w in 0..self.num_windows() {
            for j in 0..heads {
                for p in 0..self.points() {
                    let t = self.token(w, p);
                    for c in 0..per_head {
                        idx.push(Some(t * channels + j * per_head + c));
                    }
                }
            }
        }
        idx.into()
    }

    /// Inverse of [`window_index`](Self::window_index) followed by cropping
    /// the padding: `[windows·heads, s², C/heads]` back to `(H·W)×C`.
    pub(crate) fn merge_index(&self, channels: usize, heads: usize) -> Arc<[Option<usize>]> {
        let per_head = channels / heads;
        let s = self.window_size;
        let mut idx = Vec::with_capacity(self.height * self.width * channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let w = (y / s) * self.cols + x / s;
                let p = (y % s) * s + x % s;
                for j in 0..heads {
                    for c in 0..per_head {
                        idx.push(Some(((w * heads + j) * self.points() + p) * per_head + c));
                    }
                }
            }
        }
        idx.into()
    }

    /// Gather index from a padded `(Hp·Wp)×C` matrix to `[windows, s², C]`.
    pub(crate) fn window_feature_index(&self, channels: usize) -> Arc<[Option<usize>]> {
        let mut idx = Vec::with_capacity(self.num_windows() * self.points() * channels);
        for w in 0..self.num_windows() {
            for p in 0..self.points() {
                let t = self.token(w, p);
                idx.extend((0..channels).map(|c| Some(t * channels + c)));
            }
        }
        idx.into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixty_four_tokens_window_seven() {
        let g = WindowGrid::partition(64, 64, 7).unwrap();
        assert_eq!(g.num_windows(), 100);
        assert_eq!((g.pad_h, g.pad_w), (6, 6));
    }

    #[test]
    fn exact_division_has_no_padding() {
        let g = WindowGrid::partition(14, 14, 7).unwrap();
        assert_eq!(g.num_windows(), 4);
        assert_eq!((g.pad_h, g.pad_w), (0, 0));
    }

    #[test]
    fn single_window_center() {
        let g = WindowGrid::partition(7, 7, 7).unwrap();
        assert_eq!(g.num_windows(), 1);
        assert_eq!(g.center(0, 0), (3.0, 3.0));
    }

    #[test]
    fn zero_window_size_is_config_error() {
        assert!(matches!(WindowGrid::partition(4, 4, 0), Err(Error::Config(_))));
        assert!(matches!(WindowGrid::partition(0, 4, 2), Err(Error::Config(_))));
    }

    #[test]
    fn centers_plus_offsets_are_token_positions() {
        let g = WindowGrid::partition(9, 5, 4).unwrap();
        let rel = g.relative_offsets();
        for (w, &(cx, cy)) in g.centers().iter().enumerate() {
            for (p, &(rx, ry)) in rel.iter().enumerate() {
                let t = g.token(w, p);
                assert_eq!(((cx + rx) as usize, (cy + ry) as usize), (t % g.padded_width(), t / g.padded_width()));
            }
        }
    }

    #[test]
    fn merge_inverts_window_gather() {
        let g = WindowGrid::partition(5, 6, 4).unwrap();
        let (c, h) = (6, 3);
        let pad = g.pad_index(c);
        let win = g.window_index(c, h);
        let merge = g.merge_index(c, h);
        for (i, m) in merge.iter().enumerate() {
            let padded = win[m.unwrap()].unwrap();
            assert_eq!(pad[padded], Some(i));
        }
    }
}
