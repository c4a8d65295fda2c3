use poolsurv::simulation::{generate_cohort, generate_cohort_stream, quadrature_risk, run_experiment, true_effect, SimConfig};

#[test]
fn confounder_is_strictly_inside_the_unit_interval() {
    let c = generate_cohort(5000, 1).unwrap();
    assert!(c.w.iter().all(|&w| -1.0 < w && w < 1.0));
    let treated = c.a.iter().filter(|&&a| a == 1).count() as f64 / 5000.0;
    assert!((treated - 0.5).abs() < 0.05, "{treated}");
}

#[test]
fn event_indicator_follows_its_definition() {
    let c = generate_cohort(2000, 2).unwrap();
    let ds = &c.dataset;
    for i in 0..ds.n() {
        let t = if c.a[i] == 1 { c.t1[i] } else { c.t0[i] };
        if ds.events()[i] {
            assert!(ds.times()[i] == t && t <= c.censor[i]);
        } else {
            assert!(ds.times()[i] == c.censor[i] && c.censor[i] < t);
        }
    }
}

#[test]
fn fixed_seed_gives_identical_cohorts() {
    let a = generate_cohort(300, 42).unwrap();
    let b = generate_cohort(300, 42).unwrap();
    assert_eq!(a.w, b.w);
    assert_eq!(a.t1, b.t1);
    assert_eq!(a.dataset.times(), b.dataset.times());
    let c = generate_cohort_stream(300, 42, 1).unwrap();
    assert_ne!(a.w, c.w);
}

#[test]
fn truth_matches_quadrature() {
    let times = [0, 10, 20, 30, 100_000];
    let truth = true_effect(&times, 1_000_000, 7).unwrap();
    assert_eq!(truth.rd[0], 0.0);
    assert!(truth.rd[4].abs() < 1e-12);
    for (k, &t) in times.iter().enumerate() {
        let exact = quadrature_risk(1, t) - quadrature_risk(0, t);
        // four Monte Carlo standard errors at a million draws
        assert!((truth.rd[k] - exact).abs() < 2e-3, "t={t}: {} vs {exact}", truth.rd[k]);
    }
    assert!((quadrature_risk(1, 20) - quadrature_risk(0, 20) - 0.1142).abs() < 1e-3);
}

#[test]
fn follow_up_ends_at_the_horizon() {
    let c = generate_cohort(500, 5).unwrap();
    let t = c.dataset.truncated(30).unwrap();
    assert_eq!(t.grid().intervals(), 30);
    for i in 0..t.n() {
        if c.dataset.times()[i] > 30 {
            assert_eq!(t.times()[i], 30);
            assert!(!t.events()[i]);
        } else {
            assert_eq!(t.times()[i], c.dataset.times()[i]);
            assert_eq!(t.events()[i], c.dataset.events()[i]);
        }
    }
}

#[test]
fn metrics_are_internally_consistent() {
    let cfg = SimConfig {
        sample_sizes: vec![200],
        iterations: 6,
        time_models: vec!["loglinear".into(), "disjoint".into()],
        truth_draws: 100_000,
        ..SimConfig::default()
    };
    let rep = run_experiment(&cfg).unwrap();
    assert_eq!(rep.rows.len(), 6);
    for r in &rep.rows {
        assert!((r.ser - r.ase / r.ese).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&r.coverage));
        assert_eq!(r.iterations + r.failures, 6);
    }
    let again = run_experiment(&cfg).unwrap();
    assert_eq!(rep.rows, again.rows);
}

#[test]
fn config_is_validated() {
    assert!(SimConfig::from_json(r#"{"iterations": 0}"#).is_err());
    assert!(SimConfig::from_json(r#"{"unknown": 1}"#).is_err());
    assert!(SimConfig::from_json(r#"{"follow_up": 20}"#).is_err());
    assert!(SimConfig::from_json(r#"{"time_models": ["cubic"]}"#).is_err());
    let c = SimConfig::from_json(r#"{"sample_sizes": [250], "follow_up": null}"#).unwrap();
    assert_eq!(c.sample_sizes, vec![250]);
    assert_eq!(c.follow_up, None);
}
