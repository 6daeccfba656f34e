//! Axis-aligned boxes in feature-grid coordinates.
//!
//! Cell `(row, col)` covers `[col, col+1) × [row, row+1)` and has its
//! center at `(col + 0.5, row + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// Box covering whole cells `rows × cols` (half-open ranges).
    pub fn from_cells(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Self {
        Self::new(
            cols.start as f64,
            rows.start as f64,
            cols.end as f64,
            rows.end as f64,
        )
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x1 > self.x0 && self.y1 > self.y0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x0 <= x && x <= self.x1 && self.y0 <= y && y <= self.y1
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let ih = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// True when the box lies within an `h×w` grid.
    pub fn within_grid(&self, h: usize, w: usize) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= w as f64 && self.y1 <= h as f64
    }

    /// Row-major indices of cells whose centers lie inside the box.
    pub fn cells_inside(&self, h: usize, w: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let (cx, cy) = cell_center(r, c);
                if self.contains(cx, cy) {
                    out.push(r * w + c);
                }
            }
        }
        out
    }

    /// Cells pooled for this box: those with centers inside, else the
    /// single cell nearest the box center.
    pub fn pooling_cells(&self, h: usize, w: usize) -> Result<Vec<usize>> {
        if self.is_degenerate() {
            return Err(TensorError::InvalidArgument {
                op: "roi_mean_pool",
                msg: format!("zero-area box {self:?}"),
            });
        }
        if self.x1 <= 0.0 || self.y1 <= 0.0 || self.x0 >= w as f64 || self.y0 >= h as f64 {
            return Err(TensorError::InvalidArgument {
                op: "roi_mean_pool",
                msg: format!("box {self:?} misses the {h}x{w} grid"),
            });
        }
        let inside = self.cells_inside(h, w);
        if !inside.is_empty() {
            return Ok(inside);
        }
        let (bx, by) = self.center();
        let col = (bx.floor().max(0.0) as usize).min(w - 1);
        let row = (by.floor().max(0.0) as usize).min(h - 1);
        Ok(vec![row * w + col])
    }
}

pub fn cell_center(row: usize, col: usize) -> (f64, f64) {
    (col as f64 + 0.5, row as f64 + 0.5)
}

impl<S: Scalar> Tape<S> {
    /// Mean of an `H×W×C` map over the cells selected by `bbox`.
    pub fn roi_mean_pool(&mut self, input: Var, bbox: &BBox) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "roi_mean_pool",
                lhs: shape,
                rhs: vec![],
            });
        }
        let cells = bbox.pooling_cells(shape[0], shape[1])?;
        self.roi_mean(input, cells)
    }
}
