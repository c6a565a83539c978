//! Small dense linear-algebra helpers: symmetric packing, rank-3/4 tensors,
//! matrix exponential and PSD square root.

use nalgebra::{DMatrix, DVector};

/// Number of entries in the packed upper triangle of an `n x n` symmetric matrix.
pub fn sym_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Packed index of entry `(i, j)` (order: (0,0), (0,1), .., (0,n-1), (1,1), ..).
pub fn sym_index(n: usize, i: usize, j: usize) -> usize {
    let (a, b) = if i <= j { (i, j) } else { (j, i) };
    a * n - a * (a + 1) / 2 + b
}

/// Pack the upper triangle of a symmetric matrix row-major into a vector.
pub fn pack_sym(mat: &DMatrix<f64>) -> DVector<f64> {
    let n = mat.nrows();
    let mut out = DVector::zeros(sym_len(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = mat[(i, j)];
            k += 1;
        }
    }
    out
}

/// Inverse of [`pack_sym`].
pub fn unpack_sym(n: usize, packed: &DVector<f64>) -> DMatrix<f64> {
    let mut mat = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            mat[(i, j)] = packed[k];
            mat[(j, i)] = packed[k];
            k += 1;
        }
    }
    mat
}

/// Dense rank-3 tensor with fixed shape, row-major flat storage.
#[derive(Debug, Clone)]
pub struct Tensor3 {
    pub shape: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(a: usize, b: usize, c: usize) -> Self {
        Tensor3 { shape: (a, b, c), data: vec![0.0; a * b * c] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.shape.1 + j) * self.shape.2 + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.shape.1 + j) * self.shape.2 + k] = v;
    }
}

/// Dense rank-4 tensor with fixed shape, row-major flat storage.
#[derive(Debug, Clone)]
pub struct Tensor4 {
    pub shape: (usize, usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(a: usize, b: usize, c: usize, d: usize) -> Self {
        Tensor4 { shape: (a, b, c, d), data: vec![0.0; a * b * c * d] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[((i * self.shape.1 + j) * self.shape.2 + k) * self.shape.3 + l]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        self.data[((i * self.shape.1 + j) * self.shape.2 + k) * self.shape.3 + l] = v;
    }
}

/// Matrix exponential by scaling and squaring with a Taylor kernel.
///
/// Intended for the small (n <= 8) matrices appearing in the exact linear
/// smoother; accuracy is near machine precision there.
pub fn expm(mat: &DMatrix<f64>) -> DMatrix<f64> {
    let n = mat.nrows();
    let norm = mat.iter().map(|x| x.abs()).fold(0.0, f64::max) * n as f64;
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scaled = mat / 2f64.powi(s as i32);

    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=20 {
        term = &term * &scaled / k as f64;
        result += &term;
    }
    for _ in 0..s {
        result = &result * &result;
    }
    result
}

/// Symmetric square root of a PSD matrix; negative eigenvalues are clamped
/// to zero before taking the root.
pub fn psd_sqrt(mat: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (mat + mat.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|l| if l > 0.0 { l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

pub fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sym_pack_roundtrip() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 3.0, 0.2, 0.1, 0.2, 4.0]);
        let packed = pack_sym(&m);
        assert_eq!(packed.len(), 6);
        let back = unpack_sym(3, &packed);
        assert_eq!(m, back);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(packed[sym_index(3, i, j)], m[(i, j)]);
            }
        }
    }

    #[test]
    fn expm_scalar_and_rotation() {
        let a = DMatrix::from_element(1, 1, -1.5);
        assert_relative_eq!(expm(&a)[(0, 0)], (-1.5f64).exp(), max_relative = 1e-14);

        // exp of a rotation generator is a rotation matrix
        let theta = 0.7;
        let gen = DMatrix::from_row_slice(2, 2, &[0.0, -theta, theta, 0.0]);
        let r = expm(&gen);
        assert_relative_eq!(r[(0, 0)], theta.cos(), max_relative = 1e-13);
        assert_relative_eq!(r[(1, 0)], theta.sin(), max_relative = 1e-13);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let s = psd_sqrt(&a);
        assert_relative_eq!((&s * &s), a, epsilon = 1e-12);
    }
}
