//! Row-major 2-D grids and bilinear sampling, shared by every dense stage.

use crate::error::{Error, Result};

/// Dense `h x w` grid, row-major. Indexing is `(row, column)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(h: usize, w: usize, value: T) -> Self {
        Grid {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::invalid(format!(
                "grid payload holds {} values, expected {}x{}={}",
                data.len(),
                h,
                w,
                h * w
            )));
        }
        Ok(Grid { h, w, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.h && c < self.w);
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: T) {
        debug_assert!(r < self.h && c < self.w);
        self.data[r * self.w + c] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Builds a grid by evaluating `f(row, col)` over the full index range.
    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c));
            }
        }
        Grid { h, w, data }
    }
}

/// Grayscale image with intensities nominally in `[0, 1]`.
pub type Image = Grid<f32>;

/// Bilinear sample at continuous `(x, y) = (column, row)`; `None` outside
/// `[0, w-1] x [0, h-1]`. Exact (bit-equal) at integer coordinates.
pub fn bilinear<T: Copy + Into<f64>>(g: &Grid<T>, x: f64, y: f64) -> Option<f64> {
    let (h, w) = g.dims();
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let v00 = g.at(y0, x0).into();
    let v01 = g.at(y0, x1).into();
    let v10 = g.at(y1, x0).into();
    let v11 = g.at(y1, x1).into();
    Some(
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Grid::from_vec(2, 2, vec![1.0f32; 3]).is_err());
        assert!(Grid::from_vec(2, 2, vec![1.0f32; 4]).is_ok());
    }

    #[test]
    fn bilinear_is_exact_at_nodes() {
        let g = Grid::from_vec(2, 2, vec![0.125f32, 0.25, 0.5, 0.75]).unwrap();
        assert_eq!(bilinear(&g, 0.0, 0.0), Some(0.125));
        assert_eq!(bilinear(&g, 1.0, 0.0), Some(0.25));
        assert_eq!(bilinear(&g, 0.0, 1.0), Some(0.5));
        assert_eq!(bilinear(&g, 1.0, 1.0), Some(0.75));
    }

    #[test]
    fn bilinear_midpoint_and_bounds() {
        // Exactly representable nodes: the midpoint is exact.
        let g = Grid::from_vec(1, 2, vec![0.25f32, 0.75]).unwrap();
        assert_eq!(bilinear(&g, 0.5, 0.0), Some(0.5));
        // Generic nodes: midpoint equals the mean of the stored values.
        let g = Grid::from_vec(1, 2, vec![0.2f32, 0.6]).unwrap();
        let mid = bilinear(&g, 0.5, 0.0).unwrap();
        let want = (g.at(0, 0) as f64 + g.at(0, 1) as f64) / 2.0;
        assert!((mid - want).abs() < 1e-12);
        assert_eq!(bilinear(&g, -0.001, 0.0), None);
        assert_eq!(bilinear(&g, 1.001, 0.0), None);
        assert_eq!(bilinear(&g, 0.5, 0.001), None);
    }
}
