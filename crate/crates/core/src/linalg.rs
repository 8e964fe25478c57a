//! Small dense linear algebra: row-major matrices and LU with partial pivoting.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense row-major square-or-rectangular matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let data: Vec<T> = rows.into_iter().flatten().collect();
        assert_eq!(data.len(), r * c, "ragged rows");
        Matrix { rows: r, cols: c, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = self.data[i * self.cols + j] + v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `x^T M` for a row vector `x`.
    pub fn left_mul(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(i)) {
                *o = *o + xi * m;
            }
        }
        out
    }

    /// `M x` for a column vector `x`.
    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(&a, &b)| a * b).sum())
            .collect()
    }
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting, followed
/// by one round of iterative refinement.
pub fn solve<T: Real>(a: &Matrix<T>, b: &[T]) -> Result<Vec<T>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::Dimension(format!(
            "solve needs square system, got {}x{} with rhs {}",
            n,
            a.cols(),
            b.len()
        )));
    }
    let lu = Lu::factor(a)?;
    let mut x = lu.solve(b);
    // one refinement step recovers the digits lost to pivot growth
    let ax = a.mul_vec(&x);
    let r: Vec<T> = b.iter().zip(&ax).map(|(&bi, &ai)| bi - ai).collect();
    let dx = lu.solve(&r);
    for (xi, d) in x.iter_mut().zip(dx) {
        *xi = *xi + d;
    }
    Ok(x)
}

struct Lu<T> {
    m: Matrix<T>,
    perm: Vec<usize>,
}

impl<T: Real> Lu<T> {
    fn factor(a: &Matrix<T>) -> Result<Self> {
        let n = a.rows();
        let mut m = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        // columns may differ in scale by many orders; judge each pivot against its own column
        let eps_n = T::epsilon() * T::lit(n.max(1) as f64);
        let col_scale: Vec<T> = (0..n)
            .map(|k| (0..n).fold(T::zero(), |s, i| s.max(a.get(i, k).abs())))
            .collect();
        for k in 0..n {
            let tiny = col_scale[k] * eps_n;
            let (p, best) =
                (k..n)
                    .map(|i| (i, m.get(i, k).abs()))
                    .fold((k, -T::one()), |acc, x| if x.1 > acc.1 { x } else { acc });
            if !(best > tiny) {
                return Err(Error::Singular(format!("zero pivot in column {k}")));
            }
            if p != k {
                for j in 0..n {
                    let t = m.get(k, j);
                    m.set(k, j, m.get(p, j));
                    m.set(p, j, t);
                }
                perm.swap(k, p);
            }
            let pivot = m.get(k, k);
            for i in (k + 1)..n {
                let f = m.get(i, k) / pivot;
                if f == T::zero() {
                    continue;
                }
                m.set(i, k, f);
                for j in (k + 1)..n {
                    let v = m.get(i, j) - f * m.get(k, j);
                    m.set(i, j, v);
                }
            }
        }
        Ok(Lu { m, perm })
    }

    fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.m.rows();
        let mut y: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s = s - self.m.get(i, j) * y[j];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in (i + 1)..n {
                s = s - self.m.get(i, j) * y[j];
            }
            y[i] = s / self.m.get(i, i);
        }
        y
    }
}
