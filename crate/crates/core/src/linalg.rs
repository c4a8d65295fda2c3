//! Small dense linear algebra: LU with partial pivoting, inverse, condition number.
//!
//! Parameter vectors here are at most a few hundred long, so a plain
//! row-major factorization is all that is needed.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::scalar::Scalar;

/// Column at which elimination met a (numerically) zero pivot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SingularPivot {
    pub column: usize,
}

#[derive(Debug, Clone)]
pub struct Lu<T> {
    factors: Array2<T>,
    perm: Vec<usize>,
}

impl<T: Scalar> Lu<T> {
    pub fn new(a: ArrayView2<'_, T>) -> Result<Self, SingularPivot> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "LU requires a square matrix");
        let mut f = a.to_owned();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let tiny = T::epsilon() * T::lit(n.max(1) as f64) * scale;
        if scale == T::zero() || !scale.is_finite() {
            return Err(SingularPivot { column: 0 });
        }
        for k in 0..n {
            let mut piv = k;
            let mut best = f[[k, k]].abs();
            for r in (k + 1)..n {
                let v = f[[r, k]].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best <= tiny || !best.is_finite() {
                return Err(SingularPivot { column: k });
            }
            if piv != k {
                for c in 0..n {
                    f.swap([k, c], [piv, c]);
                }
                perm.swap(k, piv);
            }
            let d = f[[k, k]];
            for r in (k + 1)..n {
                let m = f[[r, k]] / d;
                f[[r, k]] = m;
                if m != T::zero() {
                    for c in (k + 1)..n {
                        let u = f[[k, c]];
                        f[[r, c]] -= m * u;
                    }
                }
            }
        }
        Ok(Lu { factors: f, perm })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn solve(&self, b: ArrayView1<'_, T>) -> Array1<T> {
        let n = self.dim();
        let f = &self.factors;
        let mut x: Array1<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= f[[i, j]] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= f[[i, j]] * x[j];
            }
            x[i] = s / f[[i, i]];
        }
        x
    }

    pub fn inverse(&self) -> Array2<T> {
        let n = self.dim();
        let mut inv = Array2::zeros((n, n));
        let mut e = Array1::zeros(n);
        for c in 0..n {
            e.fill(T::zero());
            e[c] = T::one();
            inv.column_mut(c).assign(&self.solve(e.view()));
        }
        inv
    }
}

pub fn solve<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView1<'_, T>) -> Result<Array1<T>, SingularPivot> {
    Ok(Lu::new(a)?.solve(b))
}

pub fn inverse<T: Scalar>(a: ArrayView2<'_, T>) -> Result<Array2<T>, SingularPivot> {
    Ok(Lu::new(a)?.inverse())
}

pub fn norm_1<T: Scalar>(a: ArrayView2<'_, T>) -> T {
    a.columns()
        .into_iter()
        .map(|c| c.iter().fold(T::zero(), |s, v| s + v.abs()))
        .fold(T::zero(), T::max)
}

/// 1-norm condition number from a matrix and its inverse.
pub fn condition_1<T: Scalar>(a: ArrayView2<'_, T>, inv: ArrayView2<'_, T>) -> T {
    norm_1(a) * norm_1(inv)
}

pub fn max_abs<T: Scalar>(v: ArrayView1<'_, T>) -> T {
    v.iter()
        .fold(T::zero(), |m, x| if x.is_nan() { T::nan() } else { m.max(x.abs()) })
}
