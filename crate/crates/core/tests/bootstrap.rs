use ndarray::Array1;
use poolsurv::simulation::generate_cohort;
use poolsurv::standard::{bootstrap, expand_long, resample_indices, standard_gcomp, BootstrapOptions};
use poolsurv::{build_design, CovariateFormula, Dataset, Error, GComputationSpec, TimeForm};

fn setup() -> (Dataset, GComputationSpec) {
    let ds = generate_cohort(120, 3).unwrap().dataset.truncated(30).unwrap();
    let spec = GComputationSpec::new("a", TimeForm::LogLinear, CovariateFormula::linear(&["w"]), vec![10, 20]);
    (ds, spec)
}

fn opts(replicates: usize, seed: u64, jobs: usize) -> BootstrapOptions {
    BootstrapOptions {
        replicates,
        seed,
        jobs,
        ..BootstrapOptions::default()
    }
}

#[test]
fn zero_replicates_is_an_error() {
    let (ds, spec) = setup();
    let err = bootstrap(&ds, |d: &Dataset| standard_gcomp(&spec, d), &opts(0, 1, 1)).unwrap_err();
    assert!(matches!(err, Error::Bootstrap(_)), "{err}");
}

#[test]
fn same_seed_gives_identical_results() {
    let (ds, spec) = setup();
    let a = bootstrap(&ds, |d: &Dataset| standard_gcomp(&spec, d), &opts(25, 7, 1)).unwrap();
    let b = bootstrap(&ds, |d: &Dataset| standard_gcomp(&spec, d), &opts(25, 7, 1)).unwrap();
    assert_eq!(a.se, b.se);
    assert_eq!(a.percentile, b.percentile);
    let c = bootstrap(&ds, |d: &Dataset| standard_gcomp(&spec, d), &opts(25, 8, 1)).unwrap();
    assert_ne!(a.se, c.se);
}

#[test]
fn worker_count_does_not_change_results() {
    let (ds, spec) = setup();
    let seq = bootstrap(&ds, |d: &Dataset| standard_gcomp(&spec, d), &opts(30, 11, 1)).unwrap();
    let par = bootstrap(&ds, |d: &Dataset| standard_gcomp(&spec, d), &opts(30, 11, 3)).unwrap();
    let bits = |a: &ndarray::Array2<f64>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&seq.replicates), bits(&par.replicates));
    assert_eq!(seq.se, par.se);
}

#[test]
fn intervals_summarise_replicates() {
    let (ds, spec) = setup();
    let r = bootstrap(&ds, |d: &Dataset| standard_gcomp(&spec, d), &opts(40, 2, 1)).unwrap();
    assert_eq!(r.replicates.dim(), (40, 6));
    for j in 0..6 {
        let (lo, hi) = r.wald[j];
        assert!(((lo + hi) / 2.0 - r.estimate[j]).abs() < 1e-12);
        assert!(r.percentile[j].0 <= r.percentile[j].1);
        assert!(r.se[j] > 0.0);
    }
}

#[test]
fn resamples_keep_whole_person_blocks() {
    let (ds, _) = setup();
    let f = CovariateFormula::linear(&["w"]);
    let design = build_design::<f64>(&TimeForm::Linear, &ds.grid(), None).unwrap();
    for rep in 0..5 {
        let idx = resample_indices(ds.n(), 13, rep);
        let rs = ds.resample(&idx);
        let long = expand_long(&rs, f.build(&rs).unwrap().view(), &f.column_names(), &design).unwrap();
        for (u, &src) in idx.iter().enumerate() {
            let ks: Vec<usize> = (0..long.rows())
                .filter(|&r| long.unit[r] == u)
                .map(|r| long.interval[r])
                .collect();
            let expect: Vec<usize> = (1..=ds.times()[src]).collect();
            assert_eq!(ks, expect, "unit {u} (source {src}) in replicate {rep}");
            let ys: u8 = (0..long.rows()).filter(|&r| long.unit[r] == u).map(|r| long.y[r]).sum();
            assert_eq!(ys, u8::from(ds.events()[src]));
        }
    }
}

#[test]
fn frequent_replicate_failures_fail_the_bootstrap() {
    let (ds, _) = setup();
    let small = ds.select(&[0, 1, 2]);
    let tag = format!("{}#", small.ids()[0]);
    let size = |d: &Dataset| Ok(Array1::from(vec![d.n() as f64]));
    assert!(bootstrap(&small, size, &opts(50, 1, 1)).is_ok());
    // replicates fail whenever the first unit is not drawn, about 30% of them;
    // the full-sample estimate (ids without a draw suffix) always succeeds
    let needs_first = |d: &Dataset| {
        if d.ids().iter().any(|id| id.starts_with(&tag) || !id.contains('#')) {
            size(d)
        } else {
            Err(Error::Validation("unit missing".into()))
        }
    };
    let err = bootstrap(&small, needs_first, &opts(200, 1, 1)).unwrap_err();
    assert!(err.to_string().contains("replicates failed"), "{err}");
}
