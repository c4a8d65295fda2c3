//! Root finding for stacked estimating equations, plus the central-difference
//! Jacobian used both by the solver and for the sandwich bread.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::linalg::{self, Lu};
use crate::scalar::Scalar;

/// Central-difference step policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JacobianStep {
    /// `cbrt(eps) * max(1, |theta_c|)`.
    Auto,
    /// `h * max(1, |theta_c|)`.
    Relative(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Max-norm on the mean estimating function.
    pub tolerance: f64,
    /// Initial Levenberg-Marquardt damping.
    pub step_damping: f64,
    pub jacobian_step: JacobianStep,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 5000,
            tolerance: 1e-9,
            step_damping: 1e-3,
            jacobian_step: JacobianStep::Auto,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if !(self.step_damping > 0.0) {
            return Err(Error::Config("step damping must be positive".into()));
        }
        if let JacobianStep::Relative(h) = self.jacobian_step {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config("jacobian step must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub final_norm: f64,
    pub converged: bool,
    /// 1-norm condition number of the last Jacobian formed (NaN if none).
    pub condition: f64,
    pub damped_steps: usize,
}

impl fmt::Display for SolveDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} after {} iterations, |mean EF|_inf = {:.3e}, cond = {:.3e}, damped steps = {}",
            if self.converged { "converged" } else { "not converged" },
            self.iterations,
            self.final_norm,
            self.condition,
            self.damped_steps
        )
    }
}

fn step_size<T: Scalar>(policy: JacobianStep, x: T) -> T {
    let base = match policy {
        JacobianStep::Auto => T::epsilon().cbrt(),
        JacobianStep::Relative(h) => T::lit(h),
    };
    base * T::one().max(x.abs())
}

/// `J[r,c] = (f_r(theta + h e_c) - f_r(theta - h e_c)) / (2 h_c)`.
///
/// Steps are snapped so that `theta_c +/- h_c` are exactly representable.
pub fn numerical_jacobian<T, F>(mut f: F, theta: ArrayView1<'_, T>, step: JacobianStep) -> Result<Array2<T>>
where
    T: Scalar,
    F: FnMut(ArrayView1<'_, T>) -> Result<Array1<T>>,
{
    let b = theta.len();
    let mut work = theta.to_owned();
    let mut jac: Option<Array2<T>> = None;
    for c in 0..b {
        let x = theta[c];
        let h = step_size(step, x);
        let up = x + h;
        let down = x - h;
        work[c] = up;
        let f_up = f(work.view())?;
        work[c] = down;
        let f_down = f(work.view())?;
        work[c] = x;
        if f_up.iter().chain(f_down.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "estimating function not finite when perturbing coordinate {c}"
            )));
        }
        let j = jac.get_or_insert_with(|| Array2::zeros((f_up.len(), b)));
        let denom = up - down;
        for r in 0..f_up.len() {
            j[[r, c]] = (f_up[r] - f_down[r]) / denom;
        }
    }
    Ok(jac.unwrap_or_else(|| Array2::zeros((0, 0))))
}

fn sq_norm<T: Scalar>(v: &Array1<T>) -> T {
    v.iter().fold(T::zero(), |s, x| s + *x * *x)
}

fn all_finite<T: Scalar>(v: &Array1<T>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Finds `theta` with `|ef(theta)|_inf <= tolerance`.
pub fn solve_roots<T, F>(ef: F, theta0: ArrayView1<'_, T>, opts: &SolverOptions) -> Result<(Array1<T>, SolveDiagnostics)>
where
    T: Scalar,
    F: FnMut(ArrayView1<'_, T>) -> Result<Array1<T>>,
{
    solve_roots_named(ef, theta0, opts, None)
}

/// Newton iteration with a Levenberg-Marquardt fallback whenever the full
/// Newton step fails to reduce `|ef|_2`. `names` label coordinates in errors.
pub fn solve_roots_named<T, F>(
    mut ef: F,
    theta0: ArrayView1<'_, T>,
    opts: &SolverOptions,
    names: Option<&[String]>,
) -> Result<(Array1<T>, SolveDiagnostics)>
where
    T: Scalar,
    F: FnMut(ArrayView1<'_, T>) -> Result<Array1<T>>,
{
    opts.validate()?;
    let label = |c: usize| names.and_then(|n| n.get(c).cloned()).unwrap_or_else(|| format!("#{c}"));
    let tol = T::lit(opts.tolerance);
    let mut theta = theta0.to_owned();
    let mut f = ef(theta.view())?;
    if let Some(r) = f.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "estimating function row {} at the starting point",
            label(r)
        )));
    }
    if f.len() != theta.len() {
        return Err(Error::Dimension(format!(
            "{} equations for {} parameters",
            f.len(),
            theta.len()
        )));
    }
    let mut diag = SolveDiagnostics {
        iterations: 0,
        final_norm: linalg::max_abs(f.view()).to_f64_lossy(),
        converged: false,
        condition: f64::NAN,
        damped_steps: 0,
    };
    let mut lambda = T::lit(opts.step_damping);

    for it in 0..opts.max_iterations {
        let norm = linalg::max_abs(f.view());
        diag.final_norm = norm.to_f64_lossy();
        diag.iterations = it;
        if norm <= tol {
            diag.converged = all_finite(&theta);
            if diag.converged {
                return Ok((theta, diag));
            }
            break;
        }
        let jac = numerical_jacobian(&mut ef, theta.view(), opts.jacobian_step)?;
        let f_sq = sq_norm(&f);

        let newton = match Lu::new(jac.view()) {
            Ok(lu) => {
                diag.condition = linalg::condition_1(jac.view(), lu.inverse().view()).to_f64_lossy();
                Some(lu.solve(f.mapv(|v| -v).view()))
            }
            Err(p) => {
                return Err(Error::Singular(format!(
                    "jacobian singular in parameter {} (no information: separation or an interval without events?)",
                    label(p.column)
                )));
            }
        };
        if let Some(step) = newton {
            let cand = &theta + &step;
            if all_finite(&cand) {
                if let Ok(fc) = ef(cand.view()) {
                    if all_finite(&fc) && sq_norm(&fc) < f_sq {
                        theta = cand;
                        f = fc;
                        continue;
                    }
                }
            }
        }

        // damped Gauss-Newton on |ef|^2
        let jt = jac.t();
        let jtj = jt.dot(&jac);
        let grad = jt.dot(&f);
        let mut accepted = false;
        for _ in 0..60 {
            let mut a = jtj.clone();
            for d in 0..a.nrows() {
                let v = jtj[[d, d]].max(T::epsilon());
                a[[d, d]] += lambda * v;
            }
            let step = match linalg::solve(a.view(), grad.mapv(|v| -v).view()) {
                Ok(s) => s,
                Err(_) => {
                    lambda *= T::lit(10.0);
                    continue;
                }
            };
            let cand = &theta + &step;
            if all_finite(&cand) {
                if let Ok(fc) = ef(cand.view()) {
                    if all_finite(&fc) && sq_norm(&fc) < f_sq {
                        theta = cand;
                        f = fc;
                        lambda = (lambda / T::lit(3.0)).max(T::lit(1e-12));
                        accepted = true;
                        diag.damped_steps += 1;
                        break;
                    }
                }
            }
            lambda *= T::lit(10.0);
        }
        if !accepted {
            diag.iterations = it + 1;
            return Err(Error::NotConverged {
                context: "no step reduces the estimating equations".into(),
                diagnostics: diag,
            });
        }
    }
    let norm = linalg::max_abs(f.view());
    diag.final_norm = norm.to_f64_lossy();
    diag.iterations = opts.max_iterations;
    if norm <= tol && all_finite(&theta) {
        diag.converged = true;
        return Ok((theta, diag));
    }
    Err(Error::NotConverged {
        context: String::new(),
        diagnostics: diag,
    })
}
