//! Dense row-major `f64` matrices and the kernels the autodiff graph uses.

use std::fmt;
use std::sync::Arc;

use crate::parallel;

/// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_MATMUL_WORK: usize = 1 << 17;

/// Immutable row-major matrix. Cloning shares the buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Geometry of a strided 1-D convolution over time-major rows.
///
/// Rows of the input are laid out as `time * batch + sample`, with `channels`
/// columns. Unfolding gathers, for every output position, the `kernel`
/// neighbouring time steps into one row of `kernel * channels` values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeometry {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dGeometry {
    pub fn out_len(&self) -> usize {
        (self.len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn source_time(&self, out_t: usize, tap: usize) -> Option<usize> {
        let pos = (out_t * self.stride + tap) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < self.len).then_some(pos as usize)
    }
}

impl Tensor {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor data length does not match {rows}x{cols}"
        );
        Tensor {
            rows,
            cols,
            data: Arc::new(data),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn row(values: &[f64]) -> Self {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(rows * cols, self.len(), "reshape changes element count");
        Tensor {
            rows,
            cols,
            data: Arc::clone(&self.data),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Tensor::from_vec(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`, shapes (m x k) * (k x n).
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        let a = self.data();
        let b = other.data();
        let kernel = |i: usize, row: &mut [f64]| kernels::nn_row(&a[i * k..(i + 1) * k], b, row);
        run_rows(&mut out, m, n, m * k * n, kernel);
        Tensor::from_vec(m, n, out)
    }

    /// `self * other^T`, shapes (m x k) * (n x k)^T.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension mismatch");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * n];
        let a = self.data();
        let b = other.data();
        let kernel = |i: usize, row: &mut [f64]| kernels::nt_row(&a[i * k..(i + 1) * k], b, row);
        run_rows(&mut out, m, n, m * k * n, kernel);
        Tensor::from_vec(m, n, out)
    }

    /// `self^T * other`, shapes (k x m)^T * (k x n).
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dimension mismatch");
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        let a = self.data();
        let b = other.data();
        let kernel = |i: usize, row: &mut [f64]| kernels::tn_row(a, m, i, b, row);
        debug_assert_eq!(a.len(), k * m);
        run_rows(&mut out, m, n, m * k * n, kernel);
        Tensor::from_vec(m, n, out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor::from_vec(self.cols, self.rows, out)
    }

    /// Column sums as a 1 x cols row.
    pub fn sum_rows(&self) -> Tensor {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row_slice(r)) {
                *o += v;
            }
        }
        Tensor::from_vec(1, self.cols, out)
    }

    /// Row sums as a rows x 1 column.
    pub fn sum_cols(&self) -> Tensor {
        let out = (0..self.rows).map(|r| self.row_slice(r).iter().sum()).collect();
        Tensor::from_vec(self.rows, 1, out)
    }

    /// Repeat a 1 x n row `rows` times.
    pub fn broadcast_rows(&self, rows: usize) -> Tensor {
        assert_eq!(self.rows, 1, "broadcast_rows expects a row vector");
        let mut out = Vec::with_capacity(rows * self.cols);
        for _ in 0..rows {
            out.extend_from_slice(&self.data);
        }
        Tensor::from_vec(rows, self.cols, out)
    }

    /// Repeat an m x 1 column `cols` times.
    pub fn broadcast_cols(&self, cols: usize) -> Tensor {
        assert_eq!(self.cols, 1, "broadcast_cols expects a column vector");
        let mut out = Vec::with_capacity(self.rows * cols);
        for &v in self.data.iter() {
            out.extend(std::iter::repeat_n(v, cols));
        }
        Tensor::from_vec(self.rows, cols, out)
    }

    /// Add (or multiply by) a 1 x cols row in every row.
    pub fn row_op(&self, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(row.shape(), (1, self.cols), "row operand shape mismatch");
        let r = row.data();
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.rows {
            out.extend(self.row_slice(i).iter().zip(r).map(|(&a, &b)| f(a, b)));
        }
        Tensor::from_vec(self.rows, self.cols, out)
    }

    /// Combine every row with the matching entry of a rows x 1 column.
    pub fn col_op(&self, col: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(col.shape(), (self.rows, 1), "column operand shape mismatch");
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.rows {
            let c = col.data[i];
            out.extend(self.row_slice(i).iter().map(|&a| f(a, c)));
        }
        Tensor::from_vec(self.rows, self.cols, out)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.cols, "column slice out of range");
        let mut out = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            out.extend_from_slice(&self.row_slice(r)[start..start + len]);
        }
        Tensor::from_vec(self.rows, len, out)
    }

    /// Embed into a zero matrix with `total` columns at column offset `start`.
    pub fn pad_cols(&self, start: usize, total: usize) -> Tensor {
        assert!(start + self.cols <= total, "column pad out of range");
        let mut out = vec![0.0; self.rows * total];
        for r in 0..self.rows {
            out[r * total + start..r * total + start + self.cols].copy_from_slice(self.row_slice(r));
        }
        Tensor::from_vec(self.rows, total, out)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.rows, "row slice out of range");
        Tensor::from_vec(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }

    pub fn pad_rows(&self, start: usize, total: usize) -> Tensor {
        assert!(start + self.rows <= total, "row pad out of range");
        let mut out = vec![0.0; total * self.cols];
        out[start * self.cols..(start + self.rows) * self.cols].copy_from_slice(&self.data);
        Tensor::from_vec(total, self.cols, out)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        let rows = parts[0].rows;
        assert!(parts.iter().all(|p| p.rows == rows), "concat_cols row mismatch");
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(p.row_slice(r));
            }
        }
        Tensor::from_vec(rows, cols, out)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        let cols = parts[0].cols;
        assert!(parts.iter().all(|p| p.cols == cols), "concat_rows column mismatch");
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(&p.data);
        }
        Tensor::from_vec(rows, cols, out)
    }

    /// Gather convolution windows: (len*batch) x channels -> (out_len*batch) x (kernel*channels).
    pub fn unfold1d(&self, g: &Conv1dGeometry) -> Tensor {
        assert_eq!(self.shape(), (g.len * g.batch, g.channels), "unfold input shape");
        let out_len = g.out_len();
        let width = g.kernel * g.channels;
        let mut out = vec![0.0; out_len * g.batch * width];
        for t in 0..out_len {
            for tap in 0..g.kernel {
                let Some(src_t) = g.source_time(t, tap) else {
                    continue;
                };
                for b in 0..g.batch {
                    let dst = (t * g.batch + b) * width + tap * g.channels;
                    let src = (src_t * g.batch + b) * g.channels;
                    out[dst..dst + g.channels].copy_from_slice(&self.data[src..src + g.channels]);
                }
            }
        }
        Tensor::from_vec(out_len * g.batch, width, out)
    }

    /// Adjoint of [`unfold1d`](Self::unfold1d): scatter-add windows back onto time steps.
    pub fn fold1d(&self, g: &Conv1dGeometry) -> Tensor {
        let out_len = g.out_len();
        let width = g.kernel * g.channels;
        assert_eq!(self.shape(), (out_len * g.batch, width), "fold input shape");
        let mut out = vec![0.0; g.len * g.batch * g.channels];
        for t in 0..out_len {
            for tap in 0..g.kernel {
                let Some(src_t) = g.source_time(t, tap) else {
                    continue;
                };
                for b in 0..g.batch {
                    let from = (t * g.batch + b) * width + tap * g.channels;
                    let to = (src_t * g.batch + b) * g.channels;
                    for c in 0..g.channels {
                        out[to + c] += self.data[from + c];
                    }
                }
            }
        }
        Tensor::from_vec(g.len * g.batch, g.channels, out)
    }
}

/// Row kernels of the three matmul layouts.
///
/// On x86-64 an AVX2 build of each kernel is chosen at run time. The kernels
/// avoid fused multiply-add, so both builds round identically.
mod kernels {
    #[inline(always)]
    fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
        for (o, &v) in out.iter_mut().zip(x) {
            *o += a * v;
        }
    }

    /// Dot product with four interleaved partial sums.
    #[inline(always)]
    fn dot(a: &[f64], b: &[f64]) -> f64 {
        let n4 = a.len() / 4 * 4;
        let mut acc = [0.0f64; 4];
        for (ca, cb) in a[..n4].chunks_exact(4).zip(b[..n4].chunks_exact(4)) {
            for l in 0..4 {
                acc[l] += ca[l] * cb[l];
            }
        }
        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for i in n4..a.len() {
            s += a[i] * b[i];
        }
        s
    }

    #[inline(always)]
    fn nn_generic(a_row: &[f64], b: &[f64], row: &mut [f64]) {
        let n = row.len();
        for (p, &ap) in a_row.iter().enumerate() {
            if ap != 0.0 {
                axpy(row, ap, &b[p * n..(p + 1) * n]);
            }
        }
    }

    #[inline(always)]
    fn nt_generic(a_row: &[f64], b: &[f64], row: &mut [f64]) {
        let k = a_row.len();
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }

    #[inline(always)]
    fn tn_generic(a: &[f64], m: usize, i: usize, b: &[f64], row: &mut [f64]) {
        let n = row.len();
        for p in 0..a.len() / m {
            let ap = a[p * m + i];
            if ap != 0.0 {
                axpy(row, ap, &b[p * n..(p + 1) * n]);
            }
        }
    }

    #[cfg(target_arch = "x86_64")]
    mod avx2 {
        #[target_feature(enable = "avx2")]
        pub unsafe fn nn(a_row: &[f64], b: &[f64], row: &mut [f64]) {
            super::nn_generic(a_row, b, row)
        }

        #[target_feature(enable = "avx2")]
        pub unsafe fn nt(a_row: &[f64], b: &[f64], row: &mut [f64]) {
            super::nt_generic(a_row, b, row)
        }

        #[target_feature(enable = "avx2")]
        pub unsafe fn tn(a: &[f64], m: usize, i: usize, b: &[f64], row: &mut [f64]) {
            super::tn_generic(a, m, i, b, row)
        }
    }

    #[cfg(target_arch = "x86_64")]
    fn has_avx2() -> bool {
        std::arch::is_x86_feature_detected!("avx2")
    }

    pub fn nn_row(a_row: &[f64], b: &[f64], row: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: the CPU supports AVX2.
            return unsafe { avx2::nn(a_row, b, row) };
        }
        nn_generic(a_row, b, row)
    }

    pub fn nt_row(a_row: &[f64], b: &[f64], row: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: the CPU supports AVX2.
            return unsafe { avx2::nt(a_row, b, row) };
        }
        nt_generic(a_row, b, row)
    }

    pub fn tn_row(a: &[f64], m: usize, i: usize, b: &[f64], row: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: the CPU supports AVX2.
            return unsafe { avx2::tn(a, m, i, b, row) };
        }
        tn_generic(a, m, i, b, row)
    }
}

fn run_rows<F>(out: &mut [f64], rows: usize, cols: usize, work: usize, kernel: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if cols == 0 || rows == 0 {
        return;
    }
    if work >= PAR_MATMUL_WORK && rows > 1 {
        parallel::for_each_chunk_mut(out, cols, kernel);
    } else {
        for (i, row) in out.chunks_mut(cols).enumerate() {
            kernel(i, row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn matmul_variants_agree_with_transpose() {
        let a = t(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let b = t(3, 2, &[7., 8., 9., 10., 11., 12.]);
        let ab = a.matmul(&b);
        assert_eq!(ab.data(), &[58., 64., 139., 154.]);
        assert_eq!(a.matmul_nt(&b.transpose()).data(), ab.data());
        assert_eq!(a.transpose().matmul_tn(&b).data(), ab.data());
    }

    #[test]
    fn unfold_fold_are_adjoint() {
        let g = Conv1dGeometry {
            batch: 2,
            len: 7,
            channels: 3,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        assert_eq!(g.out_len(), 3);
        let x = Tensor::from_vec(14, 3, (0..42).map(|v| (v as f64 * 0.37).sin()).collect());
        let y = Tensor::from_vec(6, 12, (0..72).map(|v| (v as f64 * 0.11).cos()).collect());
        let lhs: f64 = x.unfold1d(&g).zip(&y, |a, b| a * b).sum();
        let rhs: f64 = x.zip(&y.fold1d(&g), |a, b| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn unfold_picks_time_major_neighbours() {
        // batch 1, one channel, values equal to their time index
        let g = Conv1dGeometry {
            batch: 1,
            len: 4,
            channels: 1,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        let x = t(4, 1, &[0., 1., 2., 3.]);
        let u = x.unfold1d(&g);
        assert_eq!(u.shape(), (2, 4));
        assert_eq!(u.data(), &[0., 0., 1., 2., 1., 2., 3., 0.]);
    }
}
