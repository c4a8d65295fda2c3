//! Pooled logistic fits and g-computation risk curves with a joint sandwich.
//!
//! Every fit runs in an internally column-scaled parameterisation (each design
//! column divided by its largest absolute value). Estimates, covariances and
//! the reported bread are mapped back to the original scale; the sandwich is
//! equivariant under this linear map, so only numerical accuracy changes.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::data::SurvivalDataset;
use crate::design::{build_design, CovariateFormula, TimeDesignMatrix, TimeForm};
use crate::ee::{choose_mode, EfMode, ParamLayout, PooledScore, RiskPredictor, DEFAULT_MEMORY_BUDGET};
use crate::error::{Error, Result};
use crate::inference::{self, SandwichResult};
use crate::scalar::Scalar;
use crate::solver::{numerical_jacobian, solve_roots_named, JacobianStep, SolveDiagnostics, SolverOptions};

/// Coordinate assigned to disjoint time indicators whose interval has no events.
pub const DEFAULT_DISJOINT_FLOOR: f64 = -500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArmStrategy {
    #[default]
    SeparateModelsPerArm,
    SingleModelWithTreatmentTerm,
}

impl FromStr for ArmStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separate" => Ok(ArmStrategy::SeparateModelsPerArm),
            "single" => Ok(ArmStrategy::SingleModelWithTreatmentTerm),
            other => Err(Error::Config(format!(
                "arm strategy must be 'separate' or 'single', got '{other}'"
            ))),
        }
    }
}

impl fmt::Display for ArmStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArmStrategy::SeparateModelsPerArm => "separate",
            ArmStrategy::SingleModelWithTreatmentTerm => "single",
        })
    }
}

/// Treatment plan under which risks are predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intervention {
    Treated,
    Untreated,
    /// Treatment left as observed.
    NaturalCourse,
}

impl Intervention {
    fn value(self) -> Option<f64> {
        match self {
            Intervention::Treated => Some(1.0),
            Intervention::Untreated => Some(0.0),
            Intervention::NaturalCourse => None,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Intervention::Treated => "risk1",
            Intervention::Untreated => "risk0",
            Intervention::NaturalCourse => "risk_nc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub solver: SolverOptions,
    /// `None` picks a mode from the memory budget.
    pub mode: Option<EfMode>,
    pub memory_budget: usize,
    pub disjoint_floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            solver: SolverOptions::default(),
            mode: None,
            memory_budget: DEFAULT_MEMORY_BUDGET,
            disjoint_floor: DEFAULT_DISJOINT_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GComputationSpec {
    pub treatment_column: String,
    pub arm_strategy: ArmStrategy,
    pub time_form: TimeForm,
    pub covariates: CovariateFormula,
    /// Ascending grid times.
    pub target_times: Vec<usize>,
    pub ci_level: f64,
    pub fit: FitOptions,
}

impl GComputationSpec {
    pub fn new(treatment_column: &str, time_form: TimeForm, covariates: CovariateFormula, target_times: Vec<usize>) -> Self {
        GComputationSpec {
            treatment_column: treatment_column.to_string(),
            arm_strategy: ArmStrategy::default(),
            time_form,
            covariates,
            target_times,
            ci_level: 0.95,
            fit: FitOptions::default(),
        }
    }

    pub fn with_strategy(mut self, strategy: ArmStrategy) -> Self {
        self.arm_strategy = strategy;
        self
    }
}

/// A fitted pooled logistic model.
#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub label: String,
    /// `[beta_X, beta_S]` on the original scale.
    pub coefficients: Array1<T>,
    pub names: Vec<String>,
    pub p: usize,
    /// Indices of coordinates held fixed: disjoint intervals without events
    /// (at the floor) or where every unit at risk fails (at minus the floor).
    pub fixed: Vec<usize>,
    pub diagnostics: SolveDiagnostics,
    pub mode: EfMode,
    pub formula: CovariateFormula,
    pub design: TimeDesignMatrix<T>,
    /// Units used in the fit.
    pub n: usize,
    /// Sandwich covariance of the free coordinates, when requested.
    pub covariance: Option<Array2<T>>,
    scale: Vec<T>,
    scaled_design: TimeDesignMatrix<T>,
    jacobian_step: JacobianStep,
}

impl<T: Scalar> FitResult<T> {
    pub fn free(&self) -> Vec<usize> {
        (0..self.coefficients.len()).filter(|c| !self.fixed.contains(c)).collect()
    }

    /// Standard errors on the original scale; NaN for fixed coordinates or
    /// when no covariance has been computed.
    pub fn standard_errors(&self) -> Array1<T> {
        let mut se = Array1::from_elem(self.coefficients.len(), T::nan());
        if let Some(cov) = &self.covariance {
            for (k, &c) in self.free().iter().enumerate() {
                se[c] = cov[[k, k]].max(T::zero()).sqrt();
            }
        }
        se
    }

    fn scaled_coefficients(&self) -> Array1<T> {
        let mut b = self.coefficients.clone();
        for (v, &sc) in b.iter_mut().zip(&self.scale) {
            *v *= sc;
        }
        b
    }

    fn scaled_x(&self, ds: &SurvivalDataset<T>) -> Result<Array2<T>> {
        let mut x = self.formula.build(ds)?;
        for (mut col, &sc) in x.columns_mut().into_iter().zip(&self.scale) {
            col.mapv_inplace(|v| v / sc);
        }
        Ok(x)
    }
}

fn column_scales<T: Scalar>(m: ArrayView2<'_, T>) -> Vec<T> {
    m.columns()
        .into_iter()
        .map(|c| {
            let mx = c.iter().fold(T::zero(), |a, &v| a.max(v.abs()));
            if mx > T::zero() && mx.is_finite() {
                mx
            } else {
                T::one()
            }
        })
        .collect()
}

/// Fits `logit Pr(Y_k = 1 | T* >= k, X) = X beta_X + S_k beta_S` by solving the
/// pooled score equations.
pub fn fit_pooled_logistic<T: Scalar>(
    dataset: &SurvivalDataset<T>,
    formula: &CovariateFormula,
    time_form: &TimeForm,
    opts: &FitOptions,
) -> Result<FitResult<T>> {
    let ctx = format!("pooled logistic fit with {} time", time_form.label());
    fit_inner(dataset, formula, time_form, opts, "model").map_err(|e| e.context(ctx))
}

fn fit_inner<T: Scalar>(
    ds: &SurvivalDataset<T>,
    formula: &CovariateFormula,
    time_form: &TimeForm,
    opts: &FitOptions,
    label: &str,
) -> Result<FitResult<T>> {
    if ds.event_count() == 0 {
        return Err(Error::NoEvents(String::new()));
    }
    let x = formula.build(ds)?;
    let p = x.ncols();
    let uet = ds.unique_event_times();
    let design = build_design::<T>(time_form, &ds.grid(), Some(&uet))?;
    let q = design.q();
    let mut scale = column_scales(x.view());
    scale.extend(column_scales(design.matrix.view()));
    let mut xs = x;
    for (mut col, &sc) in xs.columns_mut().into_iter().zip(&scale) {
        col.mapv_inplace(|v| v / sc);
    }
    let scaled_design = design.scaled(&scale[p..]);
    let mode = opts
        .mode
        .unwrap_or_else(|| choose_mode::<T>(ds.n(), design.rows(), p, q, opts.memory_budget));
    let score = PooledScore::new(ds, xs, &scaled_design, mode)?;

    let mut fixed = Vec::new();
    let mut ceiling = Vec::new();
    if design.disjoint {
        let at_risk = at_risk_per_row(ds, &design.row_times);
        for (r, &e) in score.events_per_row().iter().enumerate() {
            let c = p + design.disjoint_column_of_row(r);
            if e == 0 {
                fixed.push(c);
            } else if e == at_risk[r] {
                // every unit at risk fails: the MLE is at +infinity
                if r == design.reference_row {
                    return Err(Error::Singular(format!(
                        "every unit at risk at the reference time {} has an event",
                        design.row_times[r]
                    )));
                }
                fixed.push(c);
                ceiling.push(c);
            }
        }
        fixed.sort_unstable();
    }
    let free: Vec<usize> = (0..p + q).filter(|c| !fixed.contains(c)).collect();
    let mut names = formula.column_names();
    names.extend(design.column_names.iter().cloned());
    let floor = T::lit(opts.disjoint_floor);
    let mut template = Array1::<T>::zeros(p + q);
    for &c in &fixed {
        let v = if ceiling.contains(&c) { -floor } else { floor };
        template[c] = v * scale[c];
    }
    let free_names: Vec<String> = free.iter().map(|&c| names[c].clone()).collect();
    let ef = |tf: ArrayView1<'_, T>| -> Result<Array1<T>> {
        let mut full = template.clone();
        for (&c, &v) in free.iter().zip(tf.iter()) {
            full[c] = v;
        }
        let m = score.mean(full.view())?;
        Ok(free.iter().map(|&c| m[c]).collect())
    };
    let (theta, diagnostics) = solve_roots_named(ef, Array1::zeros(free.len()).view(), &opts.solver, Some(&free_names))?;
    let mut coefficients = template;
    for (&c, &v) in free.iter().zip(theta.iter()) {
        coefficients[c] = v;
    }
    for (v, &sc) in coefficients.iter_mut().zip(&scale) {
        *v /= sc;
    }
    Ok(FitResult {
        label: label.to_string(),
        coefficients,
        names,
        p,
        fixed,
        diagnostics,
        mode,
        formula: formula.clone(),
        design,
        n: ds.n(),
        covariance: None,
        scale,
        scaled_design,
        jacobian_step: opts.solver.jacobian_step,
    })
}

/// Units with `T* >= t` for each design row time.
pub(crate) fn at_risk_per_row<T: Scalar>(ds: &SurvivalDataset<T>, row_times: &[usize]) -> Vec<usize> {
    let mut sorted = ds.times().to_vec();
    sorted.sort_unstable();
    row_times
        .iter()
        .map(|&t| sorted.len() - sorted.partition_point(|&x| x < t))
        .collect()
}

/// Point estimates of marginal risks under an intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskEstimate<T> {
    pub target_times: Vec<usize>,
    /// `gamma_k = n^{-1} sum_i mu(s_k, W_i)`.
    pub gamma: Array1<T>,
    /// Per-unit risks, `r x n`.
    pub unit_risks: Array2<T>,
}

impl<T: Scalar> RiskEstimate<T> {
    /// Risk estimating-function rows `mu(s_k, W_i) - gamma_k`.
    pub fn ef_rows(&self) -> Array2<T> {
        let mut ef = self.unit_risks.clone();
        for (mut row, &g) in ef.rows_mut().into_iter().zip(self.gamma.iter()) {
            row.mapv_inplace(|v| v - g);
        }
        ef
    }
}

fn check_targets(targets: &[usize], k_max: usize) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::Config("at least one target time is required".into()));
    }
    if targets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("target times must be strictly ascending".into()));
    }
    for &t in targets {
        if t == 0 || t > k_max {
            return Err(Error::TargetTime { time: t, max: k_max });
        }
    }
    Ok(())
}

/// Marginal risks from one fitted model, standardised over `dataset`.
///
/// With [`Intervention::Treated`] or [`Intervention::Untreated`] the
/// treatment column is set for every unit; it has no effect on a model whose
/// formula omits the treatment.
pub fn estimate_risks<T: Scalar>(
    fit: &FitResult<T>,
    dataset: &SurvivalDataset<T>,
    intervention: Intervention,
    treatment_column: &str,
    target_times: &[usize],
) -> Result<RiskEstimate<T>> {
    check_targets(target_times, dataset.grid().intervals())?;
    let ds = match intervention.value() {
        Some(a) if fit.formula.uses(treatment_column) => dataset.with_column_value(treatment_column, T::lit(a))?,
        _ => dataset.clone(),
    };
    let x = fit.scaled_x(&ds)?;
    let pred = RiskPredictor::new(x, &fit.scaled_design, fit.mode);
    let unit_risks = pred.unit_risks(fit.scaled_coefficients().view(), target_times)?;
    let gamma = unit_risks
        .mean_axis(Axis(1))
        .unwrap_or_else(|| Array1::zeros(target_times.len()));
    Ok(RiskEstimate {
        target_times: target_times.to_vec(),
        gamma,
        unit_risks,
    })
}

/// Sandwich covariance of a single fit's free coefficients (original scale).
pub fn fit_sandwich<T: Scalar>(fit: &FitResult<T>, dataset: &SurvivalDataset<T>) -> Result<SandwichResult<T>> {
    let problem = JointProblem::new(
        vec![ModelBlock::new(fit, dataset, (0..dataset.n()).collect())?],
        Vec::new(),
        false,
        dataset.n(),
    )?;
    problem.sandwich(&[fit.scaled_coefficients()], &[])
}

impl<T: Scalar> FitResult<T> {
    /// Returns the fit with its sandwich covariance attached.
    pub fn with_sandwich(mut self, dataset: &SurvivalDataset<T>) -> Result<Self> {
        let sw = fit_sandwich(&self, dataset)?;
        self.covariance = Some(sw.covariance);
        Ok(self)
    }
}

/// One row of a risk curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskCurveRow<T> {
    /// Time on the original scale (`grid time x width`).
    pub time: f64,
    pub risk1: T,
    pub se1: T,
    pub lcl1: T,
    pub ucl1: T,
    pub risk0: T,
    pub se0: T,
    pub lcl0: T,
    pub ucl0: T,
    pub rd: T,
    pub se_rd: T,
    pub lcl_rd: T,
    pub ucl_rd: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskCurve<T> {
    pub ci_level: f64,
    pub rows: Vec<RiskCurveRow<T>>,
}

pub const RISK_CURVE_HEADER: [&str; 13] = [
    "time", "risk1", "se1", "lcl1", "ucl1", "risk0", "se0", "lcl0", "ucl0", "rd", "se_rd", "lcl_rd", "ucl_rd",
];

impl<T: Scalar> RiskCurve<T> {
    pub fn at(&self, time: f64) -> Option<&RiskCurveRow<T>> {
        self.rows.iter().find(|r| (r.time - time).abs() < 1e-9)
    }

    pub fn last(&self) -> Option<&RiskCurveRow<T>> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(RISK_CURVE_HEADER)?;
        for r in &self.rows {
            let vals = [
                r.risk1, r.se1, r.lcl1, r.ucl1, r.risk0, r.se0, r.lcl0, r.ucl0, r.rd, r.se_rd, r.lcl_rd, r.ucl_rd,
            ];
            let mut rec = vec![r.time.to_string()];
            rec.extend(vals.iter().map(|v| v.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| Error::Io {
            path: "<risk curve>".into(),
            source: e,
        })?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub fit: Duration,
    pub risks: Duration,
    pub variance: Duration,
}

#[derive(Debug, Clone)]
pub struct GCompResult<T> {
    pub curve: RiskCurve<T>,
    pub fits: Vec<FitResult<T>>,
    /// Free `beta` blocks, then `gamma^1`, `gamma^0`, `delta`; original scale.
    pub theta: Array1<T>,
    pub layout: ParamLayout,
    pub sandwich: SandwichResult<T>,
    pub warnings: Vec<String>,
    pub timings: StageTimings,
}

impl<T: Scalar> GCompResult<T> {
    pub fn rd(&self) -> Array1<T> {
        self.curve.rows.iter().map(|r| r.rd).collect()
    }
}

/// Fits the outcome model(s), stacks risk and contrast estimating functions,
/// and computes the joint sandwich over the complete stack.
pub fn causal_contrast<T: Scalar>(spec: &GComputationSpec, dataset: &SurvivalDataset<T>) -> Result<GCompResult<T>> {
    if !(spec.ci_level > 0.0 && spec.ci_level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level must be in (0, 1), got {}",
            spec.ci_level
        )));
    }
    check_targets(&spec.target_times, dataset.grid().intervals())?;
    let trt = dataset.column(&spec.treatment_column)?;
    let mut arm1 = Vec::new();
    let mut arm0 = Vec::new();
    for (i, &a) in trt.iter().enumerate() {
        if a == T::one() {
            arm1.push(i);
        } else if a == T::zero() {
            arm0.push(i);
        } else {
            return Err(Error::Row {
                row: i,
                message: format!("treatment '{}' must be 0 or 1, got {a}", spec.treatment_column),
            });
        }
    }
    let form = spec.time_form.label();
    let t_fit = Instant::now();
    let fits: Vec<(FitResult<T>, Vec<usize>)> = match spec.arm_strategy {
        ArmStrategy::SeparateModelsPerArm => {
            let formula = spec.covariates.without(&spec.treatment_column);
            let fit_arm = |idx: &Vec<usize>, a: u8| -> Result<FitResult<T>> {
                if idx.is_empty() {
                    return Err(Error::Validation(format!("arm a={a} has no units")));
                }
                let sub = dataset.select(idx);
                fit_inner(&sub, &formula, &spec.time_form, &spec.fit, &format!("a={a}"))
                    .map_err(|e| e.context(format!("arm a={a}, {form} time")))
            };
            let (f1, f0) = rayon::join(|| fit_arm(&arm1, 1), || fit_arm(&arm0, 0));
            vec![(f1?, arm1.clone()), (f0?, arm0.clone())]
        }
        ArmStrategy::SingleModelWithTreatmentTerm => {
            let mut formula = spec.covariates.clone();
            if !formula.uses(&spec.treatment_column) {
                formula
                    .terms
                    .insert(0, crate::design::CovariateTerm::Linear(spec.treatment_column.clone()));
            }
            let f = fit_inner(dataset, &formula, &spec.time_form, &spec.fit, "pooled")
                .map_err(|e| e.context(format!("single model, {form} time")))?;
            vec![(f, (0..dataset.n()).collect())]
        }
    };
    let fit_time = t_fit.elapsed();

    let t_risk = Instant::now();
    let mut blocks = Vec::with_capacity(fits.len());
    for (f, idx) in &fits {
        blocks.push(ModelBlock::new(f, dataset, idx.clone())?);
    }
    let all: Vec<usize> = (0..dataset.n()).collect();
    let targets = [Intervention::Treated, Intervention::Untreated];
    let mut terms = Vec::new();
    for (g, &iv) in targets.iter().enumerate() {
        let a = iv.value().unwrap_or(0.0);
        let (model, fit) = match spec.arm_strategy {
            ArmStrategy::SeparateModelsPerArm => (g, &fits[g].0),
            ArmStrategy::SingleModelWithTreatmentTerm => (0, &fits[0].0),
        };
        let ds_a = if fit.formula.uses(&spec.treatment_column) {
            dataset.with_column_value(&spec.treatment_column, T::lit(a))?
        } else {
            dataset.clone()
        };
        terms.push(RiskTerm {
            model,
            target: g,
            x: fit.scaled_x(&ds_a)?,
            units: all.clone(),
        });
    }
    let problem = JointProblem::new(blocks, terms, true, dataset.n())?.with_targets(&spec.target_times, 2);
    let betas: Vec<Array1<T>> = fits.iter().map(|(f, _)| f.scaled_coefficients()).collect();
    let gammas = problem.gammas(&betas)?;
    let risk_time = t_risk.elapsed();

    let t_var = Instant::now();
    let sw = problem.sandwich(&betas, &gammas)?;
    let var_time = t_var.elapsed();

    let r = spec.target_times.len();
    let nb = problem.beta_len();
    let mut theta = Array1::zeros(nb + 3 * r);
    let mut off = 0;
    for (f, _) in &fits {
        for c in f.free() {
            theta[off] = f.coefficients[c];
            off += 1;
        }
    }
    for k in 0..r {
        theta[nb + k] = gammas[0][k];
        theta[nb + r + k] = gammas[1][k];
        theta[nb + 2 * r + k] = gammas[0][k] - gammas[1][k];
    }
    let width = dataset.grid().width();
    let mut rows = Vec::with_capacity(r);
    for (k, &t) in spec.target_times.iter().enumerate() {
        let est = |j: usize| -> Result<(T, T, T, T)> {
            let (lo, hi) = inference::wald_ci(theta[j], sw.se[j], spec.ci_level)?;
            Ok((theta[j], sw.se[j], lo, hi))
        };
        let (risk1, se1, lcl1, ucl1) = est(nb + k)?;
        let (risk0, se0, lcl0, ucl0) = est(nb + r + k)?;
        let (rd, se_rd, lcl_rd, ucl_rd) = est(nb + 2 * r + k)?;
        rows.push(RiskCurveRow {
            time: t as f64 * width,
            risk1,
            se1,
            lcl1,
            ucl1,
            risk0,
            se0,
            lcl0,
            ucl0,
            rd,
            se_rd,
            lcl_rd,
            ucl_rd,
        });
    }
    let mut warnings = Vec::new();
    if sw.ill_conditioned() {
        warnings.push(format!(
            "bread condition number {:.3e} exceeds {:.0e}",
            sw.condition,
            inference::CONDITION_WARNING
        ));
    }
    for (f, _) in &fits {
        if !f.fixed.is_empty() {
            warnings.push(format!(
                "model {}: {} time coefficient(s) without events fixed at {}",
                f.label,
                f.fixed.len(),
                spec.fit.disjoint_floor
            ));
        }
    }
    let layout = problem.layout(&spec.target_times, &targets);
    Ok(GCompResult {
        curve: RiskCurve {
            ci_level: spec.ci_level,
            rows,
        },
        fits: fits.into_iter().map(|(f, _)| f).collect(),
        theta,
        layout,
        sandwich: sw,
        warnings,
        timings: StageTimings {
            fit: fit_time,
            risks: risk_time,
            variance: var_time,
        },
    })
}

/// Score equations of one fitted model over a subset of the analysis units.
struct ModelBlock<'a, T> {
    fit: &'a FitResult<T>,
    sub: SurvivalDataset<T>,
    x: Array2<T>,
    units: Vec<usize>,
    free: Vec<usize>,
}

impl<'a, T: Scalar> ModelBlock<'a, T> {
    fn new(fit: &'a FitResult<T>, dataset: &SurvivalDataset<T>, units: Vec<usize>) -> Result<Self> {
        let sub = dataset.select(&units);
        let x = fit.scaled_x(&sub)?;
        Ok(ModelBlock {
            fit,
            sub,
            x,
            units,
            free: fit.free(),
        })
    }

    fn score(&self) -> Result<PooledScore<'_, T>> {
        PooledScore::new(&self.sub, self.x.clone(), &self.fit.scaled_design, self.fit.mode)
    }

    fn full(&self, base: &Array1<T>, free_vals: ArrayView1<'_, T>) -> Array1<T> {
        let mut b = base.clone();
        for (&c, &v) in self.free.iter().zip(free_vals.iter()) {
            b[c] = v;
        }
        b
    }
}

/// Contribution of one model's predictions to one risk target over `units`.
struct RiskTerm<T> {
    model: usize,
    target: usize,
    /// Scaled covariate design for `units` under the intervention.
    x: Array2<T>,
    units: Vec<usize>,
}

struct JointProblem<'a, T> {
    blocks: Vec<ModelBlock<'a, T>>,
    terms: Vec<RiskTerm<T>>,
    contrast: bool,
    n: usize,
    targets: Vec<usize>,
    n_targets: usize,
}

impl<'a, T: Scalar> JointProblem<'a, T> {
    fn new(blocks: Vec<ModelBlock<'a, T>>, terms: Vec<RiskTerm<T>>, contrast: bool, n: usize) -> Result<Self> {
        Ok(JointProblem {
            blocks,
            terms,
            contrast,
            n,
            targets: Vec::new(),
            n_targets: 0,
        })
    }

    fn with_targets(mut self, times: &[usize], n_targets: usize) -> Self {
        self.targets = times.to_vec();
        self.n_targets = n_targets;
        self
    }

    fn beta_len(&self) -> usize {
        self.blocks.iter().map(|b| b.free.len()).sum()
    }

    fn dim(&self) -> usize {
        let r = self.targets.len();
        self.beta_len() + r * self.n_targets + if self.contrast { r } else { 0 }
    }

    fn term_risks(&self, term: &RiskTerm<T>, beta: ArrayView1<'_, T>) -> Result<Array2<T>> {
        let fit = self.blocks[term.model].fit;
        RiskPredictor::new(term.x.clone(), &fit.scaled_design, fit.mode).unit_risks(beta, &self.targets)
    }

    fn gammas(&self, betas: &[Array1<T>]) -> Result<Vec<Array1<T>>> {
        let r = self.targets.len();
        let mut g = vec![Array1::<T>::zeros(r); self.n_targets];
        let nn = T::lit(self.n as f64);
        for term in &self.terms {
            let risks = self.term_risks(term, betas[term.model].view())?;
            let sums = risks.sum_axis(Axis(1));
            for k in 0..r {
                g[term.target][k] += sums[k] / nn;
            }
        }
        Ok(g)
    }

    /// Per-unit stacked estimating functions at `(betas, gammas)`.
    fn stack(&self, betas: &[Array1<T>], gammas: &[Array1<T>]) -> Result<Array2<T>> {
        let r = self.targets.len();
        let nb = self.beta_len();
        let mut out = Array2::<T>::zeros((self.dim(), self.n));
        let mut off = 0;
        for (b, beta) in self.blocks.iter().zip(betas) {
            let st = b.score()?.stack(beta.view())?;
            for (k, &c) in b.free.iter().enumerate() {
                for (j, &i) in b.units.iter().enumerate() {
                    out[[off + k, i]] = st[[c, j]];
                }
            }
            off += b.free.len();
        }
        for term in &self.terms {
            let risks = self.term_risks(term, betas[term.model].view())?;
            for k in 0..r {
                let row = nb + term.target * r + k;
                for (j, &i) in term.units.iter().enumerate() {
                    out[[row, i]] = risks[[k, j]] - gammas[term.target][k];
                }
            }
        }
        if self.contrast {
            let base = nb + self.n_targets * r;
            // (gamma^1 - gamma^0) - delta with delta at its closed-form root
            for k in 0..r {
                out.row_mut(base + k).fill(T::zero());
            }
        }
        Ok(out)
    }

    /// Bread `-d/dtheta mean EF`, assembled blockwise: each model's score and
    /// risk rows are differentiated numerically in that model's coefficients;
    /// the risk and contrast rows are linear in `gamma` and `delta`.
    fn bread(&self, betas: &[Array1<T>]) -> Result<Array2<T>> {
        let r = self.targets.len();
        let nb = self.beta_len();
        let dim = self.dim();
        let nn = T::lit(self.n as f64);
        let mut b = Array2::<T>::zeros((dim, dim));
        let mut off = 0;
        for (m, blk) in self.blocks.iter().enumerate() {
            let score = blk.score()?;
            let nf = blk.free.len();
            let my_terms: Vec<&RiskTerm<T>> = self.terms.iter().filter(|t| t.model == m).collect();
            let f = |tf: ArrayView1<'_, T>| -> Result<Array1<T>> {
                let full = blk.full(&betas[m], tf);
                let sc = score.sum(full.view())?;
                let mut v = Array1::<T>::zeros(nf + my_terms.len() * r);
                for (k, &c) in blk.free.iter().enumerate() {
                    v[k] = sc[c] / nn;
                }
                for (j, term) in my_terms.iter().enumerate() {
                    let risks = self.term_risks(term, full.view())?;
                    let sums = risks.sum_axis(Axis(1));
                    for k in 0..r {
                        v[nf + j * r + k] = sums[k] / nn;
                    }
                }
                Ok(v)
            };
            let theta: Array1<T> = blk.free.iter().map(|&c| betas[m][c]).collect();
            let jac = numerical_jacobian(f, theta.view(), blk.fit.jacobian_step)?;
            b.slice_mut(s![off..off + nf, off..off + nf])
                .assign(&jac.slice(s![..nf, ..]).mapv(|v| -v));
            for (j, term) in my_terms.iter().enumerate() {
                let row = nb + term.target * r;
                let mut dst = b.slice_mut(s![row..row + r, off..off + nf]);
                dst -= &jac.slice(s![nf + j * r..nf + (j + 1) * r, ..]);
            }
            off += nf;
        }
        for g in 0..self.n_targets * r {
            b[[nb + g, nb + g]] = T::one();
        }
        if self.contrast {
            let base = nb + self.n_targets * r;
            for k in 0..r {
                b[[base + k, nb + k]] = -T::one();
                b[[base + k, nb + r + k]] = T::one();
                b[[base + k, base + k]] = T::one();
            }
        }
        Ok(b)
    }

    /// Joint sandwich, mapped back to the original coefficient scale.
    fn sandwich(&self, betas: &[Array1<T>], gammas: &[Array1<T>]) -> Result<SandwichResult<T>> {
        let bread = self.bread(betas)?;
        let stack = self.stack(betas, gammas)?;
        let meat = inference::meat(stack.view());
        let mut sw = inference::sandwich(bread, meat, self.n)?;
        // theta_s = D theta and psi_s = D^{-1} psi on the score rows, so
        // B = D B_s D, F = D F_s D and V = D^{-1} V_s D^{-1}
        let mut d = Vec::with_capacity(self.dim());
        for blk in &self.blocks {
            d.extend(blk.free.iter().map(|&c| blk.fit.scale[c]));
        }
        d.resize(self.dim(), T::one());
        for ((i, j), v) in sw.bread.indexed_iter_mut() {
            *v = *v * d[i] * d[j];
        }
        for ((i, j), v) in sw.meat.indexed_iter_mut() {
            *v = *v * d[i] * d[j];
        }
        for ((i, j), v) in sw.covariance.indexed_iter_mut() {
            *v = *v / (d[i] * d[j]);
        }
        for (s, &dc) in sw.se.iter_mut().zip(&d) {
            *s /= dc;
        }
        Ok(sw)
    }

    fn layout(&self, times: &[usize], targets: &[Intervention]) -> ParamLayout {
        let mut l = ParamLayout::default();
        for blk in &self.blocks {
            let f = blk.fit;
            l.push_block(format!("beta[{}]", f.label), blk.free.iter().map(|&c| f.names[c].clone()));
        }
        for iv in targets.iter().take(self.n_targets) {
            l.push_block(iv.label(), times.iter().map(|t| format!("{}(t={t})", iv.label())));
        }
        if self.contrast {
            l.push_block("rd", times.iter().map(|t| format!("rd(t={t})")));
        }
        l
    }
}
