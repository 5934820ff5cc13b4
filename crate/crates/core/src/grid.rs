//! Even partition of an image into `cols x rows` cells.
//!
//! Cell `g` along an axis of length `n` split into `k` cells spans the pixel
//! range `floor(g*n/k) .. floor((g+1)*n/k) - 1`, so every pixel belongs to
//! exactly one cell for any image size.

use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridCell {
    pub col: u32,
    pub row: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridPartition {
    pub cols: u32,
    pub rows: u32,
    pub width: u32,
    pub height: u32,
}

fn span(g: u32, n: u32, k: u32) -> Range<u32> {
    let lo = (g as u64 * n as u64 / k as u64) as u32;
    let hi = ((g as u64 + 1) * n as u64 / k as u64) as u32;
    lo..hi
}

/// Cell index along one axis for pixel `p` (`0 <= p < n`).
fn cell_along(p: u32, n: u32, k: u32) -> u32 {
    (((p as u64 + 1) * k as u64 - 1) / n as u64) as u32
}

impl GridPartition {
    pub fn new(cols: u32, rows: u32, width: u32, height: u32) -> Self {
        assert!(cols > 0 && rows > 0, "grid must have at least one cell");
        Self {
            cols,
            rows,
            width,
            height,
        }
    }

    pub fn len(&self) -> usize {
        (self.cols * self.rows) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn col_span(&self, col: u32) -> Range<u32> {
        span(col, self.width, self.cols)
    }

    pub fn row_span(&self, row: u32) -> Range<u32> {
        span(row, self.height, self.rows)
    }

    /// Cell containing integer pixel `(x, y)`.
    pub fn cell_of(&self, x: u32, y: u32) -> Option<GridCell> {
        (x < self.width && y < self.height).then(|| GridCell {
            col: cell_along(x, self.width, self.cols),
            row: cell_along(y, self.height, self.rows),
        })
    }

    /// Cell containing a sub-pixel coordinate; the pixel is `floor(u), floor(v)`.
    pub fn cell_of_point(&self, u: f64, v: f64) -> Option<GridCell> {
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let (x, y) = (u.floor(), v.floor());
        if x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        self.cell_of(x as u32, y as u32)
    }

    pub fn index(&self, cell: GridCell) -> usize {
        (cell.row * self.cols + cell.col) as usize
    }

    pub fn cell_at(&self, index: usize) -> GridCell {
        GridCell {
            col: index as u32 % self.cols,
            row: index as u32 / self.cols,
        }
    }

    /// The cell and its up-to-8 neighbours, clipped at the border.
    pub fn neighborhood(&self, cell: GridCell) -> impl Iterator<Item = GridCell> + '_ {
        let (c, r) = (cell.col as i64, cell.row as i64);
        (-1..=1).flat_map(move |dr| {
            (-1..=1).filter_map(move |dc| {
                let (cc, rr) = (c + dc, r + dr);
                (cc >= 0 && rr >= 0 && cc < self.cols as i64 && rr < self.rows as i64).then_some(GridCell {
                    col: cc as u32,
                    row: rr as u32,
                })
            })
        })
    }

    /// Per-column cell lookup table, for raster scans.
    pub fn column_lut(&self) -> Vec<u32> {
        (0..self.width)
            .map(|x| cell_along(x, self.width, self.cols))
            .collect()
    }

    pub fn row_lut(&self) -> Vec<u32> {
        (0..self.height)
            .map(|y| cell_along(y, self.height, self.rows))
            .collect()
    }
}
