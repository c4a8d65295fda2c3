//! Empirical sandwich variance `B^{-1} F B^{-T} / n` and Wald intervals.
//!
//! The bread is the *negative* mean Jacobian. The sign cancels in the
//! sandwich, and this convention keeps `B` positive definite for scores.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::{self, Lu};
use crate::scalar::Scalar;
use crate::solver::{numerical_jacobian, JacobianStep};

/// Condition numbers above this are flagged in [`SandwichResult::ill_conditioned`].
pub const CONDITION_WARNING: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichResult<T> {
    pub bread: Array2<T>,
    pub meat: Array2<T>,
    /// Covariance of the estimates, `V / n`.
    pub covariance: Array2<T>,
    pub se: Array1<T>,
    /// 1-norm condition number of the bread.
    pub condition: f64,
}

impl<T: Scalar> SandwichResult<T> {
    pub fn ill_conditioned(&self) -> bool {
        !(self.condition <= CONDITION_WARNING)
    }
}

/// `B = -d/dtheta [n^{-1} sum_i psi_i]` by central differences.
pub fn bread<T, F>(ef_mean: F, theta_hat: ArrayView1<'_, T>, step: JacobianStep) -> Result<Array2<T>>
where
    T: Scalar,
    F: FnMut(ArrayView1<'_, T>) -> Result<Array1<T>>,
{
    let j = numerical_jacobian(ef_mean, theta_hat, step)?;
    Ok(-j)
}

/// `F = n^{-1} Psi Psi'` for a `b x n` stack; exactly symmetric.
pub fn meat<T: Scalar>(stack: ArrayView2<'_, T>) -> Array2<T> {
    let (b, n) = stack.dim();
    let mut f = Array2::zeros((b, b));
    let nn = T::lit(n.max(1) as f64);
    for r in 0..b {
        let a = stack.row(r);
        for c in r..b {
            let v = a.dot(&stack.row(c)) / nn;
            f[[r, c]] = v;
            f[[c, r]] = v;
        }
    }
    f
}

/// Combines bread and meat into the covariance of `theta_hat`.
pub fn sandwich<T: Scalar>(bread: Array2<T>, meat: Array2<T>, n: usize) -> Result<SandwichResult<T>> {
    if bread.dim() != meat.dim() || bread.nrows() != bread.ncols() {
        return Err(Error::Dimension(format!("bread {:?}, meat {:?}", bread.dim(), meat.dim())));
    }
    let lu = Lu::new(bread.view()).map_err(|p| {
        let null: Vec<usize> = (0..bread.ncols())
            .filter(|&c| bread.column(c).iter().all(|v| v.abs() <= T::epsilon()))
            .collect();
        Error::Singular(format!(
            "bread not invertible: elimination broke down at parameter {}; zero columns {:?}",
            p.column, null
        ))
    })?;
    let inv = lu.inverse();
    let condition = linalg::condition_1(bread.view(), inv.view()).to_f64_lossy();
    let nn = T::lit(n as f64);
    let mut cov = inv.dot(&meat).dot(&inv.t()) / nn;
    // symmetrize away rounding
    let b = cov.nrows();
    for r in 0..b {
        for c in (r + 1)..b {
            let v = (cov[[r, c]] + cov[[c, r]]) / T::lit(2.0);
            cov[[r, c]] = v;
            cov[[c, r]] = v;
        }
    }
    let se = cov.diag().mapv(|v| v.max(T::zero()).sqrt());
    Ok(SandwichResult {
        bread,
        meat,
        covariance: cov,
        se,
        condition,
    })
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `estimate -/+ z_{(1 + level)/2} se`.
pub fn wald_ci<T: Scalar>(estimate: T, se: T, level: f64) -> Result<(T, T)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level must be in (0, 1), got {level}")));
    }
    let z = T::lit(normal_quantile((1.0 + level) / 2.0));
    Ok((estimate - z * se, estimate + z * se))
}
