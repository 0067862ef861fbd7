//! Symmetric similarity matrices with unit diagonal.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::{median, Scalar};

/// Symmetric kernel matrix: unit diagonal, entries in `(0, 1]`, exact symmetry.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix<T> {
    entries: Mat<T>,
}

impl<T: Scalar> KernelMatrix<T> {
    /// Validates and wraps a matrix.
    pub fn new(entries: Mat<T>) -> Result<Self> {
        let n = entries.rows();
        if entries.cols() != n {
            return Err(Error::Shape(format!("kernel must be square, got {}x{}", n, entries.cols())));
        }
        for i in 0..n {
            if entries[(i, i)] != T::one() {
                return Err(Error::Range(format!("kernel diagonal entry {i} is {}, expected 1", entries[(i, i)])));
            }
            for j in 0..i {
                let v = entries[(i, j)];
                if v != entries[(j, i)] {
                    return Err(Error::Range(format!("kernel not symmetric at ({i}, {j})")));
                }
                if !(v > T::zero() && v <= T::one()) {
                    return Err(Error::Range(format!("kernel entry ({i}, {j}) = {v} outside (0, 1]")));
                }
            }
        }
        Ok(KernelMatrix { entries })
    }

    /// Builds `exp(-g(i, j))` for `i < j` from a nonnegative exponent function,
    /// mirroring to the lower triangle. Underflow is clamped to the smallest
    /// positive normal value to keep entries strictly positive.
    pub fn from_exponents(n: usize, mut exponent: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Mat::identity(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = (-exponent(i, j)).exp().max(T::min_positive_value()).min(T::one());
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        KernelMatrix { entries: m }
    }

    /// Gaussian kernel `exp(-||x_i - x_j||^2 / (2 sigma^2))` on row vectors.
    pub fn gaussian(points: &[Vec<T>], sigma: T) -> Self {
        let denom = T::lit(2.0) * sigma * sigma;
        KernelMatrix::from_exponents(points.len(), |i, j| {
            crate::linalg::squared_distance(&points[i], &points[j]) / denom
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.entries.rows()
    }

    #[inline]
    pub fn matrix(&self) -> &Mat<T> {
        &self.entries
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[(i, j)]
    }

    pub fn into_matrix(self) -> Mat<T> {
        self.entries
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        KernelMatrix {
            entries: self.entries.permuted(perm),
        }
    }

    pub fn cast<U: Scalar>(&self) -> KernelMatrix<U> {
        KernelMatrix {
            entries: self.entries.cast(),
        }
    }
}

/// Median-heuristic bandwidth over the strict upper triangle of a symmetric
/// nonnegative matrix. A zero median falls back to the smallest positive
/// entry, and an all-zero matrix to 1.
pub fn median_bandwidth_of<T: Scalar>(distances: &Mat<T>) -> T {
    let n = distances.rows();
    let upper: Vec<T> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| distances[(i, j)])
        .collect();
    let med = median(&upper).unwrap_or(T::zero());
    if med > T::zero() {
        return med;
    }
    upper
        .iter()
        .copied()
        .filter(|&v| v > T::zero())
        .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.min(v))))
        .unwrap_or(T::one())
}
