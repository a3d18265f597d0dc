//! Row-major 2-D matrices: row elements are adjacent, successive rows sit at
//! a stride equal to the row length.

use crate::error::{Error, Result};
use crate::exec::ExecConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

#[derive(Debug)]
pub struct MatRef<'a, T> {
    rows: usize,
    cols: usize,
    data: &'a [T],
}

impl<T> Clone for MatRef<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for MatRef<'_, T> {}

impl<T: Copy + Default> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::default(); rows * cols] }
    }
}

impl<T> Mat<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn view(&self) -> MatRef<'_, T> {
        MatRef { rows: self.rows, cols: self.cols, data: &self.data }
    }
}

impl<T: Copy> Mat<T> {
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(rows: usize, cols: usize, data: &'a [T]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} view over {} elements", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &'a [T] {
        self.data
    }

    pub fn row(&self, r: usize) -> &'a [T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

impl<T: Copy> MatRef<'_, T> {
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn to_owned(&self) -> Mat<T> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.to_vec() }
    }
}

const TRANSPOSE_BLOCK: usize = 16;

/// Out-of-place transpose: `out[m][k] = b[k][m]`.
pub fn transpose<T: Copy + Default + Send + Sync>(b: MatRef<'_, T>, cfg: &ExecConfig) -> Mat<T> {
    let mut out = Mat::zeros(b.cols, b.rows);
    transpose_into(b, out.as_mut_slice(), cfg);
    out
}

/// Transposes `src` into `dst` (`cols x rows`); workers split the output rows.
pub fn transpose_into<T: Copy + Send + Sync>(src: MatRef<'_, T>, dst: &mut [T], cfg: &ExecConfig) {
    let (rows, cols) = (src.rows, src.cols);
    assert_eq!(dst.len(), rows * cols);
    let s = src.data;
    cfg.split_rows(dst, rows, cols, |out_rows, chunk| {
        let base = out_rows.start;
        for c0 in (out_rows.start..out_rows.end).step_by(TRANSPOSE_BLOCK) {
            let c1 = (c0 + TRANSPOSE_BLOCK).min(out_rows.end);
            for r0 in (0..rows).step_by(TRANSPOSE_BLOCK) {
                let r1 = (r0 + TRANSPOSE_BLOCK).min(rows);
                for c in c0..c1 {
                    let drow = &mut chunk[(c - base) * rows..(c - base + 1) * rows];
                    for r in r0..r1 {
                        drow[r] = s[r * cols + c];
                    }
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_small_and_involution() {
        let cfg = ExecConfig::default();
        let b = Mat::from_vec(2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let t = transpose(b.view(), &cfg);
        assert_eq!((t.rows(), t.cols()), (3, 2));
        assert_eq!(t.as_slice(), &[1, 4, 2, 5, 3, 6]);
        assert_eq!(transpose(t.view(), &cfg), b);

        let row = Mat::from_vec(1, 5, vec![1, 2, 3, 4, 5]).unwrap();
        let col = transpose(row.view(), &cfg);
        assert_eq!((col.rows(), col.cols()), (5, 1));
        assert_eq!(col.as_slice(), row.as_slice());
    }

    #[test]
    fn transpose_across_blocks_and_workers() {
        let (r, c) = (37, 21);
        let b = Mat::from_vec(r, c, (0..r * c).collect::<Vec<_>>()).unwrap();
        let one = transpose(b.view(), &ExecConfig::default());
        for w in [2, 3, 8] {
            assert_eq!(transpose(b.view(), &ExecConfig::new(w)), one);
        }
        for i in 0..r {
            for j in 0..c {
                assert_eq!(one.get(j, i), b.get(i, j));
            }
        }
    }

    #[test]
    fn view_rejects_bad_length() {
        assert!(MatRef::new(2, 2, &[1, 2, 3]).is_err());
    }
}
