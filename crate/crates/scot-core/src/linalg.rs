//! Dense row-major `f64` matrices and the handful of products the tape needs.
//!
//! A `Mat` is `rows x cols`, row-major, heap-backed. Batches of points are
//! `batch x dim`; a scalar is `1 x 1`. The three GEMM entry points cover the
//! forward pass (`a · bᵀ`) and the two reverse-mode products; they delegate to
//! `matrixmultiply`, which is single-threaded and deterministic on a given
//! machine, so repeated runs stay bitwise identical.

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat { rows: rows.len(), cols, data }
    }

    /// 1x1 matrix holding a single scalar.
    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    /// Column vector (`len x 1`).
    pub fn col(values: &[f64]) -> Self {
        Mat { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Squared Frobenius norm (sum of squared entries).
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `self += alpha * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Mat, alpha: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }
}

/// `c = a · bᵀ + beta·c` where `a` is `m x k` and `b` is `n x k`; `c` is `m x n`.
///
/// This is the natural forward product when each row of `b` holds one output
/// neuron's weights.
pub fn gemm_nt(a: &Mat, b: &Mat, c: &mut Mat, beta: f64) {
    assert_eq!(a.cols, b.cols, "gemm_nt inner dims: a is {:?}, b is {:?}", a.shape(), b.shape());
    assert_eq!((c.rows, c.cols), (a.rows, b.rows), "gemm_nt output shape");
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.rows,
            1.0,
            a.data.as_ptr(),
            a.cols as isize,
            1,
            b.data.as_ptr(),
            1,
            b.cols as isize,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// `c = a · b + beta·c` where `a` is `m x k` and `b` is `k x n`; `c` is `m x n`.
pub fn gemm_nn(a: &Mat, b: &Mat, c: &mut Mat, beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm_nn inner dims: a is {:?}, b is {:?}", a.shape(), b.shape());
    assert_eq!((c.rows, c.cols), (a.rows, b.cols), "gemm_nn output shape");
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.cols as isize,
            1,
            b.data.as_ptr(),
            b.cols as isize,
            1,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// `c = aᵀ · b + beta·c` where `a` is `r x m` and `b` is `r x n`; `c` is `m x n`.
///
/// Reverse-mode weight gradients take this form (`dW = dYᵀ · X`).
pub fn gemm_tn(a: &Mat, b: &Mat, c: &mut Mat, beta: f64) {
    assert_eq!(a.rows, b.rows, "gemm_tn inner dims: a is {:?}, b is {:?}", a.shape(), b.shape());
    assert_eq!((c.rows, c.cols), (a.cols, b.cols), "gemm_tn output shape");
    unsafe {
        matrixmultiply::dgemm(
            a.cols,
            a.rows,
            b.cols,
            1.0,
            a.data.as_ptr(),
            1,
            a.cols as isize,
            b.data.as_ptr(),
            b.cols as isize,
            1,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nt(a: &Mat, b: &Mat) -> Mat {
        let mut c = Mat::zeros(a.rows(), b.rows());
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(j, k);
                }
                c.set(i, j, acc);
            }
        }
        c
    }

    #[test]
    fn gemm_nt_matches_naive() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(4, 3, (0..12).map(|i| i as f64 * 0.5 - 2.0).collect());
        let mut c = Mat::zeros(2, 4);
        gemm_nt(&a, &b, &mut c, 0.0);
        let want = naive_nt(&a, &b);
        assert_eq!(c, want);
    }

    #[test]
    fn gemm_nn_and_tn_are_consistent_with_nt() {
        // (a · b) with b = wᵀ must equal a · (wᵀ)ᵀᵀ; cross-check all three
        // wrappers on the same data.
        let a = Mat::from_vec(3, 2, vec![1.0, -1.0, 0.5, 2.0, 0.0, 3.0]);
        let w = Mat::from_vec(4, 2, (0..8).map(|i| (i as f64).sin()).collect());
        let mut via_nt = Mat::zeros(3, 4);
        gemm_nt(&a, &w, &mut via_nt, 0.0);

        // b = wᵀ laid out explicitly.
        let mut wt = Mat::zeros(2, 4);
        for i in 0..4 {
            for j in 0..2 {
                wt.set(j, i, w.get(i, j));
            }
        }
        let mut via_nn = Mat::zeros(3, 4);
        gemm_nn(&a, &wt, &mut via_nn, 0.0);
        assert_eq!(via_nt, via_nn);

        // aᵀ·a through tn vs. explicit transpose through nn.
        let mut ata_tn = Mat::zeros(2, 2);
        gemm_tn(&a, &a, &mut ata_tn, 0.0);
        let mut at = Mat::zeros(2, 3);
        for i in 0..3 {
            for j in 0..2 {
                at.set(j, i, a.get(i, j));
            }
        }
        let mut ata_nn = Mat::zeros(2, 2);
        gemm_nn(&at, &a, &mut ata_nn, 0.0);
        assert_eq!(ata_tn, ata_nn);
    }

    #[test]
    fn gemm_beta_accumulates() {
        let a = Mat::from_vec(1, 2, vec![1.0, 2.0]);
        let b = Mat::from_vec(1, 2, vec![3.0, 4.0]);
        let mut c = Mat::scalar(100.0);
        gemm_nt(&a, &b, &mut c, 1.0);
        assert_eq!(c.get(0, 0), 111.0);
    }

    #[test]
    #[should_panic(expected = "inner dims")]
    fn gemm_rejects_mismatched_shapes() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(2, 4);
        let mut c = Mat::zeros(2, 2);
        gemm_nt(&a, &b, &mut c, 0.0);
    }
}
