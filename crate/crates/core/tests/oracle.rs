mod common;

use common::{micro, random_instance};
use ndarray::{Array1, Array2};
use poolsurv::ee::{EfMode, PooledScore};
use poolsurv::gcomp::FitOptions;
use poolsurv::standard::{expand_long, fit_long_logistic, IrlsOptions, LongTable};
use poolsurv::{build_design, fit_pooled_logistic, CovariateFormula, SurvivalDataset, TimeForm};
use proptest::prelude::*;

fn long_score(long: &LongTable<f64>, beta: &Array1<f64>) -> Array1<f64> {
    let mut s = Array1::zeros(long.z.ncols());
    for r in 0..long.rows() {
        let z = long.z.row(r);
        let mu = 1.0 / (1.0 + (-z.dot(beta)).exp());
        s.scaled_add(long.weight[r] * (f64::from(long.y[r]) - mu), &z);
    }
    s
}

fn formula_for(ds: &SurvivalDataset<f64>) -> CovariateFormula {
    CovariateFormula::linear(ds.covariate_names())
}

fn ee_score_on_design(
    ds: &SurvivalDataset<f64>,
    form: &TimeForm,
    beta: &Array1<f64>,
    mode: EfMode,
) -> (Array1<f64>, Array2<f64>) {
    let f = formula_for(ds);
    let x = f.build(ds).unwrap();
    let design = build_design::<f64>(form, &ds.grid(), Some(&ds.unique_event_times())).unwrap();
    let score = PooledScore::new(ds, x, &design, mode).unwrap();
    let sum = score.sum(beta.view()).unwrap();
    let p = ds.covariate_names().len();
    let mut out = sum.clone();
    if design.disjoint {
        // P itself is an invertible transform of S'P; compare on the S'P scale
        let sp = design.matrix.t().dot(&sum.slice(ndarray::s![p..]));
        out.slice_mut(ndarray::s![p..]).assign(&sp);
    }
    (out, score.stack(beta.view()).unwrap())
}

#[test]
fn intercept_only_matches_closed_form() {
    let ds = SurvivalDataset::from_columns(
        &[] as &[&str],
        Array2::zeros((6, 0)),
        micro().times().to_vec(),
        micro().events().to_vec(),
    )
    .unwrap();
    let fit: poolsurv::Fit = fit_pooled_logistic(
        &ds,
        &CovariateFormula::default(),
        &TimeForm::InterceptOnly,
        &FitOptions::default(),
    )
    .unwrap();
    let expect = (3.0f64 / 15.0).ln();
    assert_eq!(ds.person_periods(), 18);
    assert!(
        (fit.coefficients[0] - expect).abs() < 1e-8,
        "{} vs {expect}",
        fit.coefficients[0]
    );
}

#[test]
fn worked_example_fit_matches_irls() {
    let ds = micro();
    let f = formula_for(&ds);
    let fit = fit_pooled_logistic(&ds, &f, &TimeForm::Linear, &FitOptions::default()).unwrap();
    let x = f.build(&ds).unwrap();
    let long = expand_long(&ds, x.view(), &f.column_names(), &fit.design).unwrap();
    assert_eq!(long.rows(), 18);
    let irls = fit_long_logistic(&long, &IrlsOptions::default()).unwrap();
    for (a, b) in fit.coefficients.iter().zip(irls.beta.iter()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn long_expansion_rows() {
    let ds = micro();
    let f = formula_for(&ds);
    let design = build_design::<f64>(&TimeForm::Linear, &ds.grid(), None).unwrap();
    let long = expand_long(&ds, f.build(&ds).unwrap().view(), &f.column_names(), &design).unwrap();
    let unit0: Vec<u8> = (0..long.rows()).filter(|&r| long.unit[r] == 0).map(|r| long.y[r]).collect();
    let unit2: Vec<u8> = (0..long.rows()).filter(|&r| long.unit[r] == 2).map(|r| long.y[r]).collect();
    assert_eq!(unit0, vec![1]);
    assert_eq!(unit2, vec![0, 0]);
}

#[test]
fn zero_variance_covariate_is_reported() {
    let mut ds = micro();
    ds = ds.with_column_value("x", 1.0).unwrap();
    let f = formula_for(&ds);
    let design = build_design::<f64>(&TimeForm::InterceptOnly, &ds.grid(), None).unwrap();
    let long = expand_long(&ds, f.build(&ds).unwrap().view(), &f.column_names(), &design).unwrap();
    let err = fit_long_logistic(&long, &IrlsOptions::default()).unwrap_err();
    assert!(err.to_string().contains("aliased"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn vectorized_score_equals_long_score(seed in 0u64..10_000, form in 0usize..5, weighted in any::<bool>(), b0 in -0.5f64..0.5) {
        let inst = random_instance(seed, form, weighted);
        let ds = &inst.ds;
        let f = formula_for(ds);
        let x = f.build(ds).unwrap();
        let design = build_design::<f64>(&inst.form, &ds.grid(), Some(&ds.unique_event_times())).unwrap();
        let dim = x.ncols() + design.q();
        let beta: Array1<f64> = (0..dim).map(|j| b0 / (1.0 + j as f64) - if j == x.ncols() { 2.0 } else { 0.0 }).collect();
        let (ee, _) = ee_score_on_design(ds, &inst.form, &beta, EfMode::Vectorized);
        let long = expand_long(ds, x.view(), &f.column_names(), &design).unwrap();
        let ls = long_score(&long, &beta);
        for (a, b) in ee.iter().zip(ls.iter()) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn loop_equals_vectorized(seed in 0u64..10_000, form in 0usize..5, weighted in any::<bool>()) {
        let inst = random_instance(seed, form, weighted);
        let ds = &inst.ds;
        let p = ds.covariate_names().len();
        let design = build_design::<f64>(&inst.form, &ds.grid(), Some(&ds.unique_event_times())).unwrap();
        let beta: Array1<f64> = (0..p + design.q()).map(|j| 0.1 * j as f64 - 1.5).collect();
        let (_, sv) = ee_score_on_design(ds, &inst.form, &beta, EfMode::Vectorized);
        let (_, sl) = ee_score_on_design(ds, &inst.form, &beta, EfMode::Loop);
        for (a, b) in sv.iter().zip(sl.iter()) {
            prop_assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn unit_permutation_leaves_fit_unchanged(seed in 0u64..10_000, form in 0usize..5) {
        let inst = random_instance(seed, form, false);
        let ds = &inst.ds;
        let f = formula_for(ds);
        let opts = FitOptions::default();
        let Ok(a) = fit_pooled_logistic(ds, &f, &inst.form, &opts) else { return Ok(()); };
        let mut idx: Vec<usize> = (0..ds.n()).collect();
        idx.reverse();
        let b = fit_pooled_logistic(&ds.select(&idx), &f, &inst.form, &opts).unwrap();
        for (u, v) in a.coefficients.iter().zip(b.coefficients.iter()) {
            prop_assert!((u - v).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn sandwich_ignores_the_sign_of_the_estimating_functions(
        entries in proptest::collection::vec(-1.0f64..1.0, 9),
        psi in proptest::collection::vec(-2.0f64..2.0, 30),
    ) {
        // psi -> -psi flips the bread and leaves the outer-product meat alone
        let bread = Array2::from_shape_fn((3, 3), |(r, c)| entries[3 * r + c] * 0.3 + if r == c { 2.0 } else { 0.0 });
        let stack = Array2::from_shape_vec((3, 10), psi).unwrap();
        let meat = stack.dot(&stack.t()) / 10.0;
        let a = poolsurv::sandwich(bread.clone(), meat.clone(), 10).unwrap();
        let b = poolsurv::sandwich(-bread, meat, 10).unwrap();
        for (x, y) in a.covariance.iter().zip(b.covariance.iter()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}
