//! Long person-period implementation: expansion, IRLS logistic fit, point
//! g-computation, and the person-block bootstrap.
//!
//! Shares no numerical kernels with the estimating-equation path beyond the
//! design builders, so it serves as an oracle.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::statistics::{Data, OrderStatistics, Statistics};

use crate::data::SurvivalDataset;
use crate::design::{build_design, CovariateFormula, TimeDesignMatrix, TimeForm};
use crate::error::{Error, Result};
use crate::gcomp::{ArmStrategy, GComputationSpec};
use crate::inference;
use crate::linalg::Lu;
use crate::scalar::Scalar;

/// Person-period table: one row per unit per design row at or before `T*`.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTable<T> {
    pub unit: Vec<usize>,
    pub interval: Vec<usize>,
    pub y: Vec<u8>,
    pub weight: Vec<T>,
    /// `[x_i, S_k]` per row.
    pub z: Array2<T>,
    pub column_names: Vec<String>,
    pub n_units: usize,
}

impl<T: Scalar> LongTable<T> {
    pub fn rows(&self) -> usize {
        self.unit.len()
    }

    /// Stored numeric elements, `rows x (p + q + 1)`.
    pub fn elements(&self) -> usize {
        self.rows() * (self.z.ncols() + 1)
    }
}

/// Expands `ds` over the rows of `design`. Smooth designs give the full
/// person-period table (`sum_i T*_i` rows); disjoint designs on unique event
/// times give the table restricted to those times.
pub fn expand_long<T: Scalar>(
    ds: &SurvivalDataset<T>,
    x: ArrayView2<'_, T>,
    x_names: &[String],
    design: &TimeDesignMatrix<T>,
) -> Result<LongTable<T>> {
    if x.nrows() != ds.n() {
        return Err(Error::Dimension(format!(
            "covariate design has {} rows for {} units",
            x.nrows(),
            ds.n()
        )));
    }
    let p = x.ncols();
    let q = design.q();
    let mut unit = Vec::new();
    let mut interval = Vec::new();
    let mut y = Vec::new();
    let mut weight = Vec::new();
    let mut flat = Vec::new();
    for i in 0..ds.n() {
        let ti = ds.times()[i];
        for (k, &t) in design.row_times.iter().enumerate() {
            if t > ti {
                break;
            }
            unit.push(i);
            interval.push(t);
            y.push(u8::from(ds.events()[i] && t == ti));
            weight.push(ds.weight(t, i));
            flat.extend(x.row(i).iter().copied());
            flat.extend(design.matrix.row(k).iter().copied());
        }
    }
    let rows = unit.len();
    let z = Array2::from_shape_vec((rows, p + q), flat).map_err(|e| Error::Dimension(e.to_string()))?;
    let mut column_names = x_names.to_vec();
    column_names.extend(design.column_names.iter().cloned());
    Ok(LongTable {
        unit,
        interval,
        y,
        weight,
        z,
        column_names,
        n_units: ds.n(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrlsOptions {
    pub max_iterations: usize,
    /// Max-norm of the score divided by the number of units.
    pub tolerance: f64,
    /// Columns held at a given value (offsets), e.g. event-free disjoint intervals.
    pub fixed: Vec<(usize, f64)>,
    /// Coefficients beyond this magnitude are reported as separation.
    pub divergence_bound: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions {
            max_iterations: 100,
            tolerance: 1e-9,
            fixed: Vec::new(),
            divergence_bound: 1e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongFit<T> {
    pub beta: Array1<T>,
    pub iterations: usize,
    pub score_norm: f64,
}

/// Weighted row-level logistic regression by iteratively reweighted least
/// squares with step halving.
pub fn fit_long_logistic<T: Scalar>(long: &LongTable<T>, opts: &IrlsOptions) -> Result<LongFit<T>> {
    let m = long.z.ncols();
    if !long.y.iter().any(|&v| v == 1) {
        return Err(Error::NoEvents(" in the long table".into()));
    }
    let free: Vec<usize> = (0..m).filter(|c| !opts.fixed.iter().any(|f| f.0 == *c)).collect();
    let mut beta = Array1::<T>::zeros(m);
    for &(c, v) in &opts.fixed {
        beta[c] = T::lit(v);
    }
    // column scaling keeps the normal equations well conditioned
    let scale: Vec<T> = (0..m)
        .map(|c| {
            let mx = long.z.column(c).iter().fold(T::zero(), |a, &v| a.max(v.abs()));
            if mx > T::zero() {
                mx
            } else {
                T::one()
            }
        })
        .collect();
    let nu = T::lit(long.n_units.max(1) as f64);
    let tol = T::lit(opts.tolerance);
    let loglik = |b: &Array1<T>| -> T {
        let mut ll = T::zero();
        for r in 0..long.rows() {
            let eta = long.z.row(r).dot(b);
            // log(1 + e^eta) computed stably
            let sp = if eta > T::zero() {
                eta + (-eta).exp().ln_1p()
            } else {
                eta.exp().ln_1p()
            };
            let yv = if long.y[r] == 1 { eta } else { T::zero() };
            ll += long.weight[r] * (yv - sp);
        }
        ll
    };
    let mut ll = loglik(&beta);
    for it in 0..opts.max_iterations {
        let mut score = Array1::<T>::zeros(free.len());
        let mut info = Array2::<T>::zeros((free.len(), free.len()));
        for r in 0..long.rows() {
            let zr = long.z.row(r);
            let mu = logistic(zr.dot(&beta));
            let w = long.weight[r];
            let resid = w * (T::lit(f64::from(long.y[r])) - mu);
            let v = w * mu * (T::one() - mu);
            for (a, &ca) in free.iter().enumerate() {
                let za = zr[ca] / scale[ca];
                score[a] += za * resid;
                for (b, &cb) in free.iter().enumerate().skip(a) {
                    info[[a, b]] += za * zr[cb] / scale[cb] * v;
                }
            }
        }
        for a in 0..free.len() {
            for b in 0..a {
                info[[a, b]] = info[[b, a]];
            }
        }
        let norm = free
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (a, &c)| acc.max((score[a] * scale[c] / nu).abs()));
        if norm <= tol {
            return Ok(LongFit {
                beta,
                iterations: it,
                score_norm: norm.to_f64_lossy(),
            });
        }
        let lu = Lu::new(info.view()).map_err(|p| {
            Error::LogisticFit(format!(
                "information matrix singular: column '{}' is aliased or has no variation",
                long.column_names[free[p.column]]
            ))
        })?;
        let step = lu.solve(score.view());
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..30 {
            let mut cand = beta.clone();
            for (a, &c) in free.iter().enumerate() {
                cand[c] += t * step[a] / scale[c];
            }
            let llc = loglik(&cand);
            if llc.is_finite() && llc >= ll - T::lit(1e-12) * ll.abs().max(T::one()) {
                beta = cand;
                ll = llc;
                accepted = true;
                break;
            }
            t *= T::lit(0.5);
        }
        if !accepted {
            return Err(Error::LogisticFit("no step increases the likelihood".into()));
        }
        if let Some(c) = free.iter().find(|&&c| beta[c].abs().to_f64_lossy() > opts.divergence_bound) {
            return Err(Error::LogisticFit(format!(
                "coefficient '{}' diverging: separation",
                long.column_names[*c]
            )));
        }
    }
    Err(Error::LogisticFit(format!(
        "IRLS did not converge in {} iterations (separation?)",
        opts.max_iterations
    )))
}

fn logistic<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Risks at `target_times` for every unit from a long-table fit, computed by
/// expanding each unit over all design rows up to the last target.
pub fn predict_risks_long<T: Scalar>(
    x: ArrayView2<'_, T>,
    design: &TimeDesignMatrix<T>,
    beta: &Array1<T>,
    target_times: &[usize],
) -> Array2<T> {
    let p = x.ncols();
    let horizon = target_times.iter().copied().max().unwrap_or(0);
    let mut out = Array2::zeros((target_times.len(), x.nrows()));
    for i in 0..x.nrows() {
        let mut surv = T::one();
        let mut cum = Vec::new();
        for (k, &t) in design.row_times.iter().enumerate() {
            if t > horizon {
                break;
            }
            let mut eta = T::zero();
            for j in 0..p {
                eta += x[[i, j]] * beta[j];
            }
            for c in 0..design.q() {
                eta += design.matrix[[k, c]] * beta[p + c];
            }
            surv *= T::one() - logistic(eta);
            cum.push((t, surv));
        }
        for (r, &tt) in target_times.iter().enumerate() {
            let s = cum.iter().rev().find(|(t, _)| *t <= tt).map_or(T::one(), |v| v.1);
            out[[r, i]] = T::one() - s;
        }
    }
    out
}

/// Long-table fit of one model for `ds`, returning the coefficients and the
/// realised designs.
pub fn fit_standard_model<T: Scalar>(
    ds: &SurvivalDataset<T>,
    formula: &CovariateFormula,
    time_form: &TimeForm,
    floor: f64,
) -> Result<(Array1<T>, TimeDesignMatrix<T>)> {
    if ds.event_count() == 0 {
        return Err(Error::NoEvents(String::new()));
    }
    let x = formula.build(ds)?;
    let uet = ds.unique_event_times();
    let design = build_design::<T>(time_form, &ds.grid(), Some(&uet))?;
    let long = expand_long(ds, x.view(), &formula.column_names(), &design)?;
    let mut opts = IrlsOptions::default();
    if design.disjoint {
        let mut events = vec![0usize; design.rows()];
        let mut rows = vec![0usize; design.rows()];
        for r in 0..long.rows() {
            if let Ok(k) = design.row_times.binary_search(&long.interval[r]) {
                rows[k] += 1;
                events[k] += usize::from(long.y[r]);
            }
        }
        for (k, (&e, &m)) in events.iter().zip(&rows).enumerate() {
            let c = x.ncols() + design.disjoint_column_of_row(k);
            if e == 0 {
                opts.fixed.push((c, floor));
            } else if e == m && k != design.reference_row {
                opts.fixed.push((c, -floor));
            }
        }
    }
    let fit = fit_long_logistic(&long, &opts)?;
    Ok((fit.beta, design))
}

/// Point estimates `[risk1(t), risk0(t), rd(t)]` over the target times using
/// the long-table pipeline.
pub fn standard_gcomp<T: Scalar>(spec: &GComputationSpec, ds: &SurvivalDataset<T>) -> Result<Array1<T>> {
    let trt = ds.column(&spec.treatment_column)?.to_owned();
    let r = spec.target_times.len();
    let floor = spec.fit.disjoint_floor;
    let mut risks = [Array1::<T>::zeros(r), Array1::<T>::zeros(r)];
    let n = T::lit(ds.n() as f64);
    match spec.arm_strategy {
        ArmStrategy::SeparateModelsPerArm => {
            let formula = spec.covariates.without(&spec.treatment_column);
            let xall = formula.build(ds)?;
            for (g, a) in [(0usize, T::one()), (1, T::zero())] {
                let idx: Vec<usize> = (0..ds.n()).filter(|&i| trt[i] == a).collect();
                if idx.is_empty() {
                    return Err(Error::Validation("an arm has no units".into()));
                }
                let (beta, design) = fit_standard_model(&ds.select(&idx), &formula, &spec.time_form, floor)?;
                let ur = predict_risks_long(xall.view(), &design, &beta, &spec.target_times);
                for k in 0..r {
                    risks[g][k] = ur.row(k).sum() / n;
                }
            }
        }
        ArmStrategy::SingleModelWithTreatmentTerm => {
            let mut formula = spec.covariates.clone();
            if !formula.uses(&spec.treatment_column) {
                formula
                    .terms
                    .insert(0, crate::design::CovariateTerm::Linear(spec.treatment_column.clone()));
            }
            let (beta, design) = fit_standard_model(ds, &formula, &spec.time_form, floor)?;
            for (g, a) in [(0usize, T::one()), (1, T::zero())] {
                let xa = formula.build(&ds.with_column_value(&spec.treatment_column, a)?)?;
                let ur = predict_risks_long(xa.view(), &design, &beta, &spec.target_times);
                for k in 0..r {
                    risks[g][k] = ur.row(k).sum() / n;
                }
            }
        }
    }
    let mut out = Array1::zeros(3 * r);
    for k in 0..r {
        out[k] = risks[0][k];
        out[r + k] = risks[1][k];
        out[2 * r + k] = risks[0][k] - risks[1][k];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
    /// Worker threads; results do not depend on this.
    pub jobs: usize,
    pub ci_level: f64,
    /// Largest tolerated fraction of failed replicates.
    pub max_failure_rate: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            replicates: 1000,
            seed: 0,
            jobs: 1,
            ci_level: 0.95,
            max_failure_rate: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub estimate: Array1<f64>,
    /// `B x m`; rows of failed replicates are NaN.
    pub replicates: Array2<f64>,
    pub se: Array1<f64>,
    pub wald: Vec<(f64, f64)>,
    pub percentile: Vec<(f64, f64)>,
    pub failures: usize,
    pub first_failure: Option<String>,
}

/// Unit indices drawn with replacement for replicate `rep`. Each replicate has
/// its own stream of a generator seeded once, so draws are independent of the
/// order in which replicates are evaluated.
pub fn resample_indices(n: usize, seed: u64, rep: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Person-block bootstrap of `estimator`: whole units are resampled, so every
/// replicate keeps each unit's person-periods together.
pub fn bootstrap<T, F>(ds: &SurvivalDataset<T>, estimator: F, opts: &BootstrapOptions) -> Result<BootstrapResult>
where
    T: Scalar,
    F: Fn(&SurvivalDataset<T>) -> Result<Array1<T>> + Sync,
{
    if opts.replicates == 0 {
        return Err(Error::Bootstrap("at least one replicate is required".into()));
    }
    if opts.jobs == 0 {
        return Err(Error::Bootstrap("jobs must be at least 1".into()));
    }
    let estimate: Array1<f64> = estimator(ds)
        .map_err(|e| e.context("bootstrap estimate on the original data"))?
        .mapv(|v| v.to_f64_lossy());
    let m = estimate.len();
    let n = ds.n();
    let run = |rep: usize| -> std::result::Result<Array1<f64>, String> {
        let idx = resample_indices(n, opts.seed, rep as u64);
        let rs = ds.resample(&idx);
        match estimator(&rs) {
            Ok(v) if v.len() == m && v.iter().all(|x| x.is_finite()) => Ok(v.mapv(|x| x.to_f64_lossy())),
            Ok(_) => Err(format!("replicate {rep}: non-finite or mis-sized estimate")),
            Err(e) => Err(format!("replicate {rep}: {e}")),
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::Bootstrap(e.to_string()))?;
    let results: Vec<std::result::Result<Array1<f64>, String>> =
        pool.install(|| (0..opts.replicates).into_par_iter().map(run).collect());

    let mut reps = Array2::from_elem((opts.replicates, m), f64::NAN);
    let mut failures = 0;
    let mut first_failure = None;
    for (b, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => reps.row_mut(b).assign(&v),
            Err(msg) => {
                failures += 1;
                first_failure.get_or_insert(msg);
            }
        }
    }
    let rate = failures as f64 / opts.replicates as f64;
    if rate > opts.max_failure_rate {
        return Err(Error::Bootstrap(format!(
            "{failures} of {} replicates failed (first: {})",
            opts.replicates,
            first_failure.unwrap_or_default()
        )));
    }
    let alpha = 1.0 - opts.ci_level;
    let mut se = Array1::zeros(m);
    let mut wald = Vec::with_capacity(m);
    let mut percentile = Vec::with_capacity(m);
    for j in 0..m {
        let ok: Vec<f64> = reps.column(j).iter().copied().filter(|v| v.is_finite()).collect();
        let sd = if ok.len() > 1 { ok.iter().std_dev() } else { f64::NAN };
        se[j] = sd;
        wald.push(inference::wald_ci(estimate[j], sd, opts.ci_level)?);
        let mut data = Data::new(ok);
        percentile.push((data.quantile(alpha / 2.0), data.quantile(1.0 - alpha / 2.0)));
    }
    Ok(BootstrapResult {
        estimate,
        replicates: reps,
        se,
        wald,
        percentile,
        failures,
        first_failure,
    })
}
