//! Stacked estimating functions for the pooled logistic model and the
//! g-computation risk parameters.
//!
//! Two evaluation strategies produce the same numbers:
//!
//! * **vectorized** materializes the `K x n` matrices `Yhat`, `P = (Y - Yhat) (.) R`
//!   and reduces them (`1'P (.) X`, `S'P`);
//! * **loop** walks each unit's own risk set and keeps only `O(n (p + q + 3))`
//!   values alive.
//!
//! Both accumulate in the same order, so their outputs agree to the last bit.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::data::{indicator_matrices_on, IndicatorMatrices, SurvivalDataset};
use crate::design::TimeDesignMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Numerically stable logistic function.
#[inline]
pub fn expit<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn logit<T: Scalar>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

/// How estimating functions are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EfMode {
    Vectorized,
    Loop,
}

impl std::str::FromStr for EfMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vectorized" => Ok(EfMode::Vectorized),
            "loop" => Ok(EfMode::Loop),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// Named slices of a stacked parameter vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    pub names: Vec<String>,
    pub blocks: Vec<(String, Range<usize>)>,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn push_block(&mut self, label: impl Into<String>, names: impl IntoIterator<Item = String>) -> Range<usize> {
        let start = self.names.len();
        self.names.extend(names);
        let range = start..self.names.len();
        self.blocks.push((label.into(), range.clone()));
        range
    }

    pub fn block(&self, label: &str) -> Option<Range<usize>> {
        self.blocks.iter().find(|(l, _)| l == label).map(|(_, r)| r.clone())
    }

    /// `"block:name"` for coordinate `i`.
    pub fn describe(&self, i: usize) -> String {
        match self.blocks.iter().find(|(_, r)| r.contains(&i)) {
            Some((label, _)) => format!("{label}:{}", self.names[i]),
            None => self.names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
        }
    }
}

/// Estimating-function values, one column per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct EfStack<T> {
    pub matrix: Array2<T>,
    pub layout: ParamLayout,
}

impl<T: Scalar> EfStack<T> {
    pub fn row_sums(&self) -> Array1<T> {
        self.matrix.sum_axis(Axis(1))
    }
}

/// Discrete-time hazards `Yhat[k,i] = expit(x_i beta_X + S_k beta_S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardMatrix<T> {
    pub values: Array2<T>,
    pub row_times: Vec<usize>,
}

#[inline]
fn dot_row<T: Scalar>(row: ArrayView1<'_, T>, beta: ArrayView1<'_, T>) -> T {
    let mut s = T::zero();
    for (a, b) in row.iter().zip(beta.iter()) {
        s += *a * *b;
    }
    s
}

/// `X beta_X`, accumulated left to right.
pub fn linear_predictor<T: Scalar>(x: ArrayView2<'_, T>, beta_x: ArrayView1<'_, T>) -> Array1<T> {
    x.rows().into_iter().map(|r| dot_row(r, beta_x)).collect()
}

/// `Yhat = expit(X beta_X (+) S beta_S)` for every design row and unit.
pub fn hazard_matrix<T: Scalar>(
    x_linpred: ArrayView1<'_, T>,
    design: &TimeDesignMatrix<T>,
    beta_s: ArrayView1<'_, T>,
) -> Result<HazardMatrix<T>> {
    if beta_s.len() != design.q() {
        return Err(Error::Dimension(format!(
            "beta_S has {} entries, time design has {} columns",
            beta_s.len(),
            design.q()
        )));
    }
    let time_lp = linear_predictor(design.matrix.view(), beta_s);
    let mut values = Array2::zeros((design.rows(), x_linpred.len()));
    for (mut row, &s) in values.rows_mut().into_iter().zip(time_lp.iter()) {
        for (v, &xb) in row.iter_mut().zip(x_linpred.iter()) {
            *v = expit(xb + s);
        }
    }
    Ok(HazardMatrix {
        values,
        row_times: design.row_times.clone(),
    })
}

/// `P = (Y - Yhat) (.) R`; exactly zero outside the risk set.
pub fn residual_matrix<T: Scalar>(indicators: &IndicatorMatrices, yhat: &HazardMatrix<T>) -> Result<Array2<T>> {
    if indicators.risk_set.dim() != yhat.values.dim() {
        return Err(Error::Dimension(format!(
            "indicators {:?} vs hazards {:?}",
            indicators.risk_set.dim(),
            yhat.values.dim()
        )));
    }
    let mut p = Array2::zeros(yhat.values.dim());
    ndarray::Zip::from(&mut p)
        .and(&indicators.events)
        .and(&indicators.risk_set)
        .and(&yhat.values)
        .for_each(|p, &y, &r, &h| {
            if r == 1 {
                *p = if y == 1 { T::one() - h } else { -h };
            }
        });
    Ok(p)
}

/// Clamp keeping `1 - h` strictly inside `(0, 1)` for cumulative products.
fn hazard_clamp<T: Scalar>() -> T {
    T::lit(1e-12).max(T::epsilon())
}

/// Column-wise cumulative product of `1 - Yhat`.
pub fn survival_from_hazards<T: Scalar>(yhat: &HazardMatrix<T>) -> Array2<T> {
    let c = hazard_clamp::<T>();
    let hi = T::one() - c;
    let mut s = Array2::zeros(yhat.values.dim());
    for (mut out, col) in s.columns_mut().into_iter().zip(yhat.values.columns()) {
        let mut surv = T::one();
        for (o, &h) in out.iter_mut().zip(col.iter()) {
            surv *= T::one() - h.max(c).min(hi);
            *o = surv;
        }
    }
    s
}

/// Index of the last row at or before `time`, if any.
fn last_row_at_or_before(row_times: &[usize], time: usize) -> Option<usize> {
    match row_times.partition_point(|&t| t <= time) {
        0 => None,
        k => Some(k - 1),
    }
}

/// Per-unit risks `1 - prod_{t_j <= t}(1 - Yhat[j,i])` at each target time (`r x n`).
/// Between design rows the last survival value is carried forward.
pub fn unit_risks<T: Scalar>(yhat: &HazardMatrix<T>, target_times: &[usize]) -> Array2<T> {
    let surv = survival_from_hazards(yhat);
    let n = yhat.values.ncols();
    let mut out = Array2::zeros((target_times.len(), n));
    for (r, &t) in target_times.iter().enumerate() {
        if let Some(k) = last_row_at_or_before(&yhat.row_times, t) {
            for i in 0..n {
                out[[r, i]] = T::one() - surv[[k, i]];
            }
        }
    }
    out
}

/// Risk estimating functions: `unit risk at s_k - gamma_k`, one row per target time.
pub fn risk_ef<T: Scalar>(yhat_a: &HazardMatrix<T>, target_times: &[usize], gamma: ArrayView1<'_, T>) -> Result<Array2<T>> {
    if gamma.len() != target_times.len() {
        return Err(Error::Dimension(format!(
            "{} gamma values for {} target times",
            gamma.len(),
            target_times.len()
        )));
    }
    let mut r = unit_risks(yhat_a, target_times);
    for (mut row, &g) in r.rows_mut().into_iter().zip(gamma.iter()) {
        row.mapv_inplace(|v| v - g);
    }
    Ok(r)
}

/// Memory-model categories for [`estimate_elements`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementModel {
    /// Long person-period table.
    Standard,
    Vectorized,
    VectorizedDisjoint,
    Loop,
}

/// Number of stored elements for each implementation.
///
/// * standard: `(p + q + 1) K n`
/// * vectorized: `n + 5 K n + K q`
/// * vectorized disjoint: `n + 5 K* n + K* q`
/// * loop: `n (p + q + 3)`
pub fn estimate_elements(n: usize, k: usize, k_star: usize, p: usize, q: usize, model: ElementModel) -> usize {
    match model {
        ElementModel::Standard => (p + q + 1) * k * n,
        ElementModel::Vectorized => n + 5 * k * n + k * q,
        ElementModel::VectorizedDisjoint => n + 5 * k_star * n + k_star * q,
        ElementModel::Loop => n * (p + q + 3),
    }
}

/// Picks vectorized evaluation when its working set fits `budget_bytes`.
pub fn choose_mode<T>(n: usize, rows: usize, p: usize, q: usize, budget_bytes: usize) -> EfMode {
    let elems = estimate_elements(n, rows, rows, p, q, ElementModel::Vectorized);
    if elems.saturating_mul(std::mem::size_of::<T>()) <= budget_bytes {
        EfMode::Vectorized
    } else {
        EfMode::Loop
    }
}

/// Default memory budget for automatic mode selection: 2 GiB.
pub const DEFAULT_MEMORY_BUDGET: usize = 2 << 30;

/// Pooled logistic score for one dataset, covariate design and time design.
#[derive(Debug, Clone)]
pub struct PooledScore<'a, T> {
    dataset: &'a SurvivalDataset<T>,
    x: Array2<T>,
    design: &'a TimeDesignMatrix<T>,
    mode: EfMode,
    indicators: Option<IndicatorMatrices>,
}

impl<'a, T: Scalar> PooledScore<'a, T> {
    pub fn new(dataset: &'a SurvivalDataset<T>, x: Array2<T>, design: &'a TimeDesignMatrix<T>, mode: EfMode) -> Result<Self> {
        if x.nrows() != dataset.n() {
            return Err(Error::Dimension(format!(
                "covariate design has {} rows for {} units",
                x.nrows(),
                dataset.n()
            )));
        }
        if !design.disjoint && design.row_times.last().copied().unwrap_or(0) < dataset.max_time() {
            return Err(Error::Dimension(format!(
                "time design covers {} intervals, data reach {}",
                design.rows(),
                dataset.max_time()
            )));
        }
        let indicators = match mode {
            EfMode::Vectorized => Some(indicator_matrices_on(dataset, &design.row_times)),
            EfMode::Loop => None,
        };
        Ok(PooledScore {
            dataset,
            x,
            design,
            mode,
            indicators,
        })
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.design.q()
    }

    pub fn dim(&self) -> usize {
        self.p() + self.q()
    }

    pub fn n(&self) -> usize {
        self.dataset.n()
    }

    pub fn mode(&self) -> EfMode {
        self.mode
    }

    pub fn dataset(&self) -> &SurvivalDataset<T> {
        self.dataset
    }

    pub fn design(&self) -> &TimeDesignMatrix<T> {
        self.design
    }

    pub fn covariate_design(&self) -> ArrayView2<'_, T> {
        self.x.view()
    }

    fn check_beta(&self, beta: ArrayView1<'_, T>) -> Result<()> {
        if beta.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "beta has {} entries, expected {}",
                beta.len(),
                self.dim()
            )));
        }
        if let Some(j) = beta.iter().position(|b| !b.is_finite()) {
            return Err(Error::NonFinite(format!("beta[{j}]")));
        }
        Ok(())
    }

    /// Weighted residual matrix `P (.) W` (vectorized path).
    fn weighted_residuals(&self, beta: ArrayView1<'_, T>) -> Result<Array2<T>> {
        let p = self.p();
        let xb = linear_predictor(self.x.view(), beta.slice(ndarray::s![..p]));
        let yhat = hazard_matrix(xb.view(), self.design, beta.slice(ndarray::s![p..]))?;
        let ind = self.indicators.as_ref().expect("vectorized mode keeps indicators");
        let mut res = residual_matrix(ind, &yhat)?;
        if let Some(w) = self.dataset.weights() {
            for (r, mut row) in res.rows_mut().into_iter().enumerate() {
                let t = self.design.row_times[r];
                for (i, v) in row.iter_mut().enumerate() {
                    if ind.risk_set[[r, i]] == 1 {
                        *v *= w.at(t, i);
                    }
                }
            }
        }
        Ok(res)
    }

    /// Per-unit estimating functions, `(p + q) x n`.
    pub fn stack(&self, beta: ArrayView1<'_, T>) -> Result<Array2<T>> {
        self.check_beta(beta)?;
        match self.mode {
            EfMode::Vectorized => self.stack_vectorized(beta),
            EfMode::Loop => Ok(self.stack_loop(beta)),
        }
    }

    fn stack_vectorized(&self, beta: ArrayView1<'_, T>) -> Result<Array2<T>> {
        let (p, q, n) = (self.p(), self.q(), self.n());
        let res = self.weighted_residuals(beta)?;
        let mut out = Array2::zeros((p + q, n));
        // 1'P, summed down each column in row order
        let mut col_sums = Array1::<T>::zeros(n);
        for row in res.rows() {
            for (acc, &v) in col_sums.iter_mut().zip(row.iter()) {
                *acc += v;
            }
        }
        for i in 0..n {
            for j in 0..p {
                out[[j, i]] = col_sums[i] * self.x[[i, j]];
            }
        }
        if self.design.disjoint {
            for (k, prow) in res.rows().into_iter().enumerate() {
                out.row_mut(p + self.design.disjoint_column_of_row(k)).assign(&prow);
            }
        } else {
            // S'P with k as the outer (summation) index
            let s = &self.design.matrix;
            for (k, prow) in res.rows().into_iter().enumerate() {
                for c in 0..q {
                    let skc = s[[k, c]];
                    let mut orow = out.row_mut(p + c);
                    for (o, &v) in orow.iter_mut().zip(prow.iter()) {
                        *o += skc * v;
                    }
                }
            }
        }
        Ok(out)
    }

    fn stack_loop(&self, beta: ArrayView1<'_, T>) -> Array2<T> {
        let (p, q, n) = (self.p(), self.q(), self.n());
        let beta_x = beta.slice(ndarray::s![..p]);
        let beta_s = beta.slice(ndarray::s![p..]);
        let s = &self.design.matrix;
        let mut out = Array2::zeros((p + q, n));
        let mut acc_s = vec![T::zero(); q];
        let time_lp: Vec<T> = (0..s.nrows()).map(|k| dot_row(s.row(k), beta_s)).collect();
        for i in 0..n {
            let xb = dot_row(self.x.row(i), beta_x);
            let ti = self.dataset.times()[i];
            let di = self.dataset.events()[i];
            let mut acc_x = T::zero();
            acc_s.iter_mut().for_each(|a| *a = T::zero());
            for (k, &t) in self.design.row_times.iter().enumerate() {
                if t > ti {
                    break;
                }
                let h = expit(xb + time_lp[k]);
                let mut resid = if di && t == ti { T::one() - h } else { -h };
                if self.dataset.weights().is_some() {
                    resid *= self.dataset.weight(t, i);
                }
                acc_x += resid;
                if self.design.disjoint {
                    out[[p + self.design.disjoint_column_of_row(k), i]] = resid;
                } else {
                    for (c, a) in acc_s.iter_mut().enumerate() {
                        *a += s[[k, c]] * resid;
                    }
                }
            }
            for j in 0..p {
                out[[j, i]] = acc_x * self.x[[i, j]];
            }
            if !self.design.disjoint {
                for c in 0..q {
                    out[[p + c, i]] = acc_s[c];
                }
            }
        }
        out
    }

    /// `sum_i psi_i(beta)` without forming the per-unit stack.
    pub fn sum(&self, beta: ArrayView1<'_, T>) -> Result<Array1<T>> {
        self.check_beta(beta)?;
        let (p, q, n) = (self.p(), self.q(), self.n());
        let mut out = Array1::zeros(p + q);
        match self.mode {
            EfMode::Vectorized => {
                let res = self.weighted_residuals(beta)?;
                let mut col_sums = Array1::<T>::zeros(n);
                for row in res.rows() {
                    for (acc, &v) in col_sums.iter_mut().zip(row.iter()) {
                        *acc += v;
                    }
                }
                for i in 0..n {
                    for j in 0..p {
                        out[j] += col_sums[i] * self.x[[i, j]];
                    }
                }
                let row_sums = res.sum_axis(Axis(1));
                if self.design.disjoint {
                    for (k, &rs) in row_sums.iter().enumerate() {
                        out[p + self.design.disjoint_column_of_row(k)] = rs;
                    }
                } else {
                    for (k, &rs) in row_sums.iter().enumerate() {
                        for c in 0..q {
                            out[p + c] += self.design.matrix[[k, c]] * rs;
                        }
                    }
                }
            }
            EfMode::Loop => {
                let st = self.stack_loop(beta);
                for (o, row) in out.iter_mut().zip(st.rows()) {
                    *o = row.sum();
                }
            }
        }
        Ok(out)
    }

    /// `n^{-1} sum_i psi_i(beta)`.
    pub fn mean(&self, beta: ArrayView1<'_, T>) -> Result<Array1<T>> {
        let n = T::lit(self.n() as f64);
        Ok(self.sum(beta)? / n)
    }

    /// Row `k` of `P` summed over units: the number of events minus expected
    /// events in design row `k`. Used to detect rows with no events.
    pub fn events_per_row(&self) -> Vec<usize> {
        let mut out = vec![0; self.design.rows()];
        for (&t, &d) in self.dataset.times().iter().zip(self.dataset.events()) {
            if d {
                if let Ok(k) = self.design.row_times.binary_search(&t) {
                    out[k] += 1;
                }
            }
        }
        out
    }
}

/// Convenience wrapper: per-unit pooled logistic EF stack.
pub fn score_stack<T: Scalar>(
    dataset: &SurvivalDataset<T>,
    x: ArrayView2<'_, T>,
    design: &TimeDesignMatrix<T>,
    beta: ArrayView1<'_, T>,
    mode: EfMode,
) -> Result<EfStack<T>> {
    let score = PooledScore::new(dataset, x.to_owned(), design, mode)?;
    let matrix = score.stack(beta)?;
    let mut layout = ParamLayout::default();
    layout.push_block(
        "beta_x",
        (0..x.ncols()).map(|j| dataset.covariate_names().get(j).cloned().unwrap_or_else(|| format!("x{j}"))),
    );
    layout.push_block("beta_s", design.column_names.iter().cloned());
    Ok(EfStack { matrix, layout })
}

/// Predicts per-unit risks for a fixed covariate design (e.g. with treatment
/// set to `a`) under a fitted pooled model.
#[derive(Debug, Clone)]
pub struct RiskPredictor<'a, T> {
    x: Array2<T>,
    design: &'a TimeDesignMatrix<T>,
    mode: EfMode,
}

impl<'a, T: Scalar> RiskPredictor<'a, T> {
    pub fn new(x: Array2<T>, design: &'a TimeDesignMatrix<T>, mode: EfMode) -> Self {
        RiskPredictor { x, design, mode }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// `r x n` matrix of unit risks at `target_times`.
    pub fn unit_risks(&self, beta: ArrayView1<'_, T>, target_times: &[usize]) -> Result<Array2<T>> {
        let p = self.x.ncols();
        if beta.len() != p + self.design.q() {
            return Err(Error::Dimension(format!(
                "beta has {} entries, expected {}",
                beta.len(),
                p + self.design.q()
            )));
        }
        let horizon = target_times.iter().copied().max().unwrap_or(0);
        let rows = self.design.row_times.partition_point(|&t| t <= horizon);
        let beta_x = beta.slice(ndarray::s![..p]);
        let beta_s = beta.slice(ndarray::s![p..]);
        match self.mode {
            EfMode::Vectorized => {
                let xb = linear_predictor(self.x.view(), beta_x);
                let head = TimeDesignMatrix {
                    matrix: self.design.matrix.slice(ndarray::s![..rows, ..]).to_owned(),
                    column_names: Vec::new(),
                    row_times: self.design.row_times[..rows].to_vec(),
                    disjoint: self.design.disjoint,
                    reference_row: self.design.reference_row,
                };
                let yhat = hazard_matrix(xb.view(), &head, beta_s)?;
                Ok(unit_risks(&yhat, target_times))
            }
            EfMode::Loop => {
                let c = hazard_clamp::<T>();
                let hi = T::one() - c;
                let time_lp: Vec<T> = (0..rows).map(|k| dot_row(self.design.matrix.row(k), beta_s)).collect();
                let mut order: Vec<usize> = (0..target_times.len()).collect();
                order.sort_by_key(|&r| target_times[r]);
                let n = self.n();
                let mut out = Array2::zeros((target_times.len(), n));
                for i in 0..n {
                    let xb = dot_row(self.x.row(i), beta_x);
                    let mut surv = T::one();
                    let mut k = 0;
                    for &r in &order {
                        let t = target_times[r];
                        while k < rows && self.design.row_times[k] <= t {
                            surv *= T::one() - expit(xb + time_lp[k]).max(c).min(hi);
                            k += 1;
                        }
                        out[[r, i]] = if k == 0 { T::zero() } else { T::one() - surv };
                    }
                }
                Ok(out)
            }
        }
    }
}
