//! Row-major matrices over f32/f64 with the handful of dense kernels the
//! model needs. f32 is the training default; f64 backs the
//! finite-difference gradient checks.

use rayon::prelude::*;

/// Scalar type for model arithmetic.
pub trait Real:
    num_traits::Float + Send + Sync + Default + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T: Real> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Casts element-wise to little-endian f32 bytes, row-major.
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for &x in &self.data {
            out.extend_from_slice(&x.to_f32().to_le_bytes());
        }
        out
    }

    pub fn from_f32_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != rows * cols * 4 {
            return None;
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| T::from_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        Some(Matrix { rows, cols, data })
    }
}

// Parallelize matmuls only when there is real work per row.
const PAR_FLOPS_THRESHOLD: usize = 1 << 16;

/// C = A·B. Accumulation order inside each output row is fixed, so the
/// result is bit-deterministic regardless of thread count.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = Matrix::zeros(m, n);
    let body = |i: usize, c_row: &mut [T]| {
        let a_row = a.row(i);
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == T::zero() {
                continue;
            }
            let b_row = b.row(l);
            for (c_ij, &b_lj) in c_row.iter_mut().zip(b_row.iter()) {
                *c_ij = *c_ij + a_il * b_lj;
            }
        }
    };
    if m * k * n >= PAR_FLOPS_THRESHOLD && m > 1 {
        c.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for i in 0..m {
            body(i, &mut c.data[i * n..(i + 1) * n]);
        }
    }
    c
}

/// C = A·Bᵀ with B given as [n×k]; used for logits against embedding-style
/// tables and in attention backward.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut c = Matrix::zeros(m, n);
    let body = |i: usize, c_row: &mut [T]| {
        let a_row = a.row(i);
        for (j, c_ij) in c_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut acc = T::zero();
            for l in 0..k {
                acc = acc + a_row[l] * b_row[l];
            }
            *c_ij = acc;
        }
    };
    if m * k * n >= PAR_FLOPS_THRESHOLD && m > 1 {
        c.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for i in 0..m {
            body(i, &mut c.data[i * n..(i + 1) * n]);
        }
    }
    c
}

/// C = Aᵀ·B with A given as [k×m]; used for weight gradients.
pub fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dimension");
    let (m, k, n) = (a.cols, a.rows, b.cols);
    let mut c = Matrix::zeros(m, n);
    // C[i,j] = sum_l A[l,i] * B[l,j]; accumulate row-of-B at a time.
    if m * k * n >= PAR_FLOPS_THRESHOLD && m > 1 {
        c.data.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| {
            for l in 0..k {
                let a_li = a.data[l * m + i];
                if a_li == T::zero() {
                    continue;
                }
                let b_row = b.row(l);
                for (c_ij, &b_lj) in c_row.iter_mut().zip(b_row.iter()) {
                    *c_ij = *c_ij + a_li * b_lj;
                }
            }
        });
    } else {
        for l in 0..k {
            let b_row = &b.data[l * n..(l + 1) * n];
            for i in 0..m {
                let a_li = a.data[l * m + i];
                if a_li == T::zero() {
                    continue;
                }
                let c_row = &mut c.data[i * n..(i + 1) * n];
                for (c_ij, &b_lj) in c_row.iter_mut().zip(b_row.iter()) {
                    *c_ij = *c_ij + a_li * b_lj;
                }
            }
        }
    }
    c
}

pub fn add_assign<T: Real>(a: &mut Matrix<T>, b: &Matrix<T>) {
    assert_eq!(a.shape(), b.shape());
    for (x, &y) in a.data.iter_mut().zip(b.data.iter()) {
        *x = *x + y;
    }
}

pub fn axpy<T: Real>(a: &mut Matrix<T>, scale: T, b: &Matrix<T>) {
    assert_eq!(a.shape(), b.shape());
    for (x, &y) in a.data.iter_mut().zip(b.data.iter()) {
        *x = *x + scale * y;
    }
}

/// Numerically stable in-place softmax over a slice.
pub fn softmax_slice<T: Real>(xs: &mut [T]) {
    let mut max = T::neg_infinity();
    for &x in xs.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / sum;
    }
}

/// Log-softmax into a fresh vector.
pub fn log_softmax<T: Real>(xs: &[T]) -> Vec<T> {
    let mut max = T::neg_infinity();
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for &x in xs {
        sum = sum + (x - max).exp();
    }
    let log_z = max + sum.ln();
    xs.iter().map(|&x| x - log_z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.as_slice(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a = Matrix::from_vec(2, 3, vec![1.0f64, -2.0, 3.0, 0.5, 5.0, -6.0]);
        let b = Matrix::from_vec(4, 3, vec![1.0, 0.0, 2.0, -1.0, 3.0, 1.0, 0.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        // a · bᵀ vs building bᵀ explicitly
        let mut bt = Matrix::zeros(3, 4);
        for i in 0..4 {
            for j in 0..3 {
                bt.set(j, i, b.get(i, j));
            }
        }
        assert_eq!(matmul_nt(&a, &b).as_slice(), matmul(&a, &bt).as_slice());

        let c = Matrix::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let mut at = Matrix::zeros(3, 2);
        for i in 0..2 {
            for j in 0..3 {
                at.set(j, i, a.get(i, j));
            }
        }
        assert_eq!(matmul_tn(&a, &c).as_slice(), matmul(&at, &c).as_slice());
    }

    #[test]
    fn softmax_normalizes() {
        let mut xs = vec![1.0f64, 2.0, 3.0];
        softmax_slice(&mut xs);
        let sum: f64 = xs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(xs[2] > xs[1] && xs[1] > xs[0]);
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let xs = vec![0.3f64, -1.2, 2.0, 0.0];
        let mut sm = xs.clone();
        softmax_slice(&mut sm);
        let lsm = log_softmax(&xs);
        for (p, lp) in sm.iter().zip(lsm.iter()) {
            assert!((p.ln() - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn f32_bytes_roundtrip() {
        let m = Matrix::from_vec(2, 2, vec![1.5f32, -2.25, 0.0, 3.75]);
        let bytes = m.to_f32_bytes();
        let back: Matrix<f32> = Matrix::from_f32_bytes(2, 2, &bytes).unwrap();
        assert_eq!(back, m);
    }
}
