//! Regular 2-D grids with nodes at `(col * cell, row * cell)` in world metres.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub cell: f64,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn filled(rows: usize, cols: usize, cell: f64, value: f64) -> Self {
        Self {
            rows,
            cols,
            cell,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, cell: f64, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, cell, data }
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        let i = self.index(row, col);
        self.data[i] = v;
    }

    pub fn width(&self) -> f64 {
        (self.cols - 1) as f64 * self.cell
    }

    pub fn height(&self) -> f64 {
        (self.rows - 1) as f64 * self.cell
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= 0.0 && py >= 0.0 && px <= self.width() && py <= self.height()
    }

    /// Nearest node `(row, col)`, or `None` off the grid.
    pub fn node_of(&self, px: f64, py: f64) -> Option<(usize, usize)> {
        if !self.contains(px, py) {
            return None;
        }
        let c = (px / self.cell).round() as usize;
        let r = (py / self.cell).round() as usize;
        Some((r.min(self.rows - 1), c.min(self.cols - 1)))
    }

    pub fn position(&self, row: usize, col: usize) -> (f64, f64) {
        (col as f64 * self.cell, row as f64 * self.cell)
    }

    /// Cell containing the point and the fractional offsets inside it.
    fn locate(&self, px: f64, py: f64) -> (usize, usize, f64, f64) {
        let gx = (px / self.cell).clamp(0.0, (self.cols - 1) as f64);
        let gy = (py / self.cell).clamp(0.0, (self.rows - 1) as f64);
        let c0 = (gx.floor() as usize).min(self.cols.saturating_sub(2));
        let r0 = (gy.floor() as usize).min(self.rows.saturating_sub(2));
        (r0, c0, gx - c0 as f64, gy - r0 as f64)
    }

    /// Bilinear interpolation, `None` off the grid.
    pub fn bilinear(&self, px: f64, py: f64) -> Option<f64> {
        if !self.contains(px, py) {
            return None;
        }
        Some(self.bilinear_clamped(px, py))
    }

    /// Bilinear interpolation with the query clamped onto the grid.
    pub fn bilinear_clamped(&self, px: f64, py: f64) -> f64 {
        let (r, c, fx, fy) = self.locate(px, py);
        let v00 = self.get(r, c);
        let v01 = self.get(r, c + 1);
        let v10 = self.get(r + 1, c);
        let v11 = self.get(r + 1, c + 1);
        let top = v00 + (v01 - v00) * fx;
        let bot = v10 + (v11 - v10) * fx;
        top + (bot - top) * fy
    }

    /// The eight neighbours of a node with their step lengths in cells.
    pub fn neighbours(&self, row: usize, col: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        const STEPS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
        STEPS.iter().filter_map(move |&(dr, dc)| {
            let r = row as isize + dr;
            let c = col as isize + dc;
            if r < 0 || c < 0 || r >= self.rows as isize || c >= self.cols as isize {
                return None;
            }
            let len = if dr != 0 && dc != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
            Some((r as usize, c as usize, len))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_reproduces_affine_fields() {
        let g = Grid::from_fn(5, 7, 0.5, |r, c| 2.0 + 0.3 * c as f64 - 0.7 * r as f64);
        for &(x, y) in &[(0.0, 0.0), (1.3, 0.4), (2.99, 1.99), (3.0, 2.0)] {
            let expect = 2.0 + 0.3 * x / 0.5 - 0.7 * y / 0.5;
            assert!((g.bilinear(x, y).unwrap() - expect).abs() < 1e-12);
        }
        assert!(g.bilinear(-0.1, 0.0).is_none());
        assert!(g.bilinear(3.01, 0.0).is_none());
    }

    #[test]
    fn corner_nodes_have_three_neighbours() {
        let g = Grid::filled(4, 4, 1.0, 0.0);
        assert_eq!(g.neighbours(0, 0).count(), 3);
        assert_eq!(g.neighbours(1, 1).count(), 8);
    }
}
