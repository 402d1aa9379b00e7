use alloc::vec;
use alloc::vec::Vec;

/// Dense row-major matrix of `f64`. Rows index batch samples throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self::from_vec(1, v.len(), v.to_vec())
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single entry of a 1×1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        debug_assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    /// `self + s · other`.
    pub fn add_scaled(&self, other: &Mat, s: f64) -> Mat {
        self.zip_map(other, |a, b| a + s * b)
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimensions differ");
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Mat { rows: n, cols: m, data: out }
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.cols, "matmul_t inner dimensions differ");
        let (n, k, m) = (self.rows, self.cols, rhs.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                out[i * m + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Mat { rows: n, cols: m, data: out }
    }

    /// `selfᵀ · rhs`.
    pub fn t_matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.rows, rhs.rows, "t_matmul inner dimensions differ");
        let (n, k, m) = (self.cols, self.rows, rhs.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a_row = &self.data[p * n..(p + 1) * n];
            let b_row = &rhs.data[p * m..(p + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Mat { rows: n, cols: m, data: out }
    }

    /// Column sums as a 1×C matrix.
    pub fn col_sums(&self) -> Mat {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += *v;
            }
        }
        Mat { rows: 1, cols: self.cols, data: out }
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Mat {
        assert!(start + len <= self.cols, "column slice out of range");
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Mat { rows: self.rows, cols: len, data }
    }

    /// Horizontal concatenation.
    pub fn hcat(parts: &[&Mat]) -> Mat {
        let rows = parts.first().map_or(0, |p| p.rows);
        assert!(parts.iter().all(|p| p.rows == rows), "hcat row counts differ");
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Mat { rows, cols, data }
    }

    /// Vertical concatenation.
    pub fn vcat(parts: &[&Mat]) -> Mat {
        let cols = parts.first().map_or(0, |p| p.cols);
        assert!(parts.iter().all(|p| p.cols == cols), "vcat column counts differ");
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Mat { rows: data.len() / cols.max(1), cols, data }
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Mat {
        assert!(start + len <= self.rows, "row slice out of range");
        Mat {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree() {
        let a = Mat::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.5 - 2.0);
        let b = Mat::from_fn(4, 2, |r, c| (r as f64 - c as f64) * 0.25);
        let ab = a.matmul(&b);
        let bt = Mat::from_fn(2, 4, |r, c| b.get(c, r));
        assert_eq!(ab, a.matmul_t(&bt));
        let at = Mat::from_fn(4, 3, |r, c| a.get(c, r));
        assert_eq!(ab, at.t_matmul(&b));
        let naive = Mat::from_fn(3, 2, |i, j| (0..4).map(|p| a.get(i, p) * b.get(p, j)).sum());
        assert_eq!(ab, naive);
    }

    #[test]
    fn concat_and_slice() {
        let a = Mat::from_fn(2, 2, |r, c| (r * 2 + c) as f64);
        let b = Mat::from_fn(2, 1, |r, _| 10.0 + r as f64);
        let h = Mat::hcat(&[&a, &b]);
        assert_eq!(h.row(1), &[2.0, 3.0, 11.0]);
        assert_eq!(h.slice_cols(2, 1), b);
        let v = Mat::vcat(&[&a, &a]);
        assert_eq!(v.slice_rows(2, 2), a);
    }
}
