mod common;

use common::*;
use kato_core::benchmarks::*;
use proptest::prelude::*;
use rand::Rng;
use std::time::Instant;

fn shell(script: &str, timeout_secs: f64) -> SubprocessSpec {
    SubprocessSpec {
        command: "/bin/sh".into(),
        args: vec!["-c".into(), script.into()],
        timeout_secs,
    }
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn echo_evaluator_round_trips_first_coordinate() {
    let spec = shell(
        r#"read line; v=$(echo "$line" | sed 's/.*\[\([^],]*\).*/\1/'); echo "{\"metrics\":{\"m\":$v}}""#,
        10.0,
    );
    for x in [[0.25, 3.0], [-1.5, 0.0], [7.125, 1.0]] {
        assert_eq!(subprocess_evaluate(&spec, &names(&["m"]), &x).unwrap(), vec![x[0]]);
    }
}

#[test]
fn non_numeric_metric_is_malformed() {
    for out in [r#"{"metrics":{"m":NaN}}"#, r#"{"metrics":{"m":"NaN"}}"#, "garbage"] {
        let spec = shell(&format!("read line; echo '{out}'"), 10.0);
        let e = subprocess_evaluate(&spec, &names(&["m"]), &[0.5]).unwrap_err();
        assert!(matches!(e, EvalError::Malformed { .. }), "{out}: {e}");
    }
}

#[test]
fn missing_metric_is_reported_by_name() {
    let spec = shell(r#"read line; echo '{"metrics":{"a":1.0}}'"#, 10.0);
    match subprocess_evaluate(&spec, &names(&["a", "b"]), &[0.5]) {
        Err(EvalError::MissingMetric { metric, transcript }) => {
            assert_eq!(metric, "b");
            assert!(transcript.request.contains("0.5"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn slow_evaluator_times_out() {
    let spec = shell("read line; sleep 30; echo '{}'", 0.3);
    let t = Instant::now();
    let e = subprocess_evaluate(&spec, &names(&["m"]), &[0.5]).unwrap_err();
    assert!(matches!(e, EvalError::Timeout { .. }), "{e}");
    assert!(t.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn missing_program_is_an_io_error() {
    let spec = SubprocessSpec {
        command: "/nonexistent/evaluator".into(),
        args: vec![],
        timeout_secs: 1.0,
    };
    assert!(matches!(subprocess_evaluate(&spec, &names(&["m"]), &[0.0]), Err(EvalError::Io(_))));
}

#[test]
fn recorded_feasible_fractions_are_reproducible() {
    for name in ProblemSpec::builtin_names() {
        let p = ProblemSpec::builtin(name).unwrap();
        let recorded = p.feasible_fraction.expect("shipped specs record their feasible fraction");
        let measured = p.measure_feasible_fraction(20_000, 0).unwrap();
        assert!((recorded - measured).abs() < 5e-5, "{name}: recorded {recorded}, measured {measured}");
        assert!(measured > 0.001, "{name}: {measured}");
    }
}

#[test]
fn sources_are_shifted_affine_copies_of_their_targets() {
    for (target, source) in [
        ("two_stage", "two_stage_source"),
        ("two_stage", "two_stage_adversarial"),
        ("three_stage", "three_stage_source"),
        ("bandgap", "bandgap_source"),
    ] {
        let (t, s) = (ProblemSpec::builtin(target).unwrap(), ProblemSpec::builtin(source).unwrap());
        let (EvaluatorSpec::Analytic(ta), EvaluatorSpec::Analytic(sa)) = (&t.evaluator, &s.evaluator) else {
            panic!("analytic pair expected");
        };
        assert_eq!(ta.family, sa.family);
        assert_eq!((t.lower.clone(), t.upper.clone()), (s.lower.clone(), s.upper.clone()));
        let k = s.objective_index();
        let mut r = rng(1);
        for _ in 0..200 {
            let z: Vec<f64> = (0..s.dim()).map(|_| r.random()).collect();
            let u: Vec<f64> = z.iter().zip(&sa.shift).map(|(a, b)| a - b).collect();
            let mut want = sa.family.eval(&u);
            want[k] = sa.objective_scale * want[k] + sa.objective_offset;
            let got = s.evaluate(&s.to_physical(&z)).unwrap();
            assert!(rel_err(&got, &want) < 1e-12, "{source}: {got:?} vs {want:?}");
            // The target evaluated at the shifted point reproduces the
            // source's constraint metrics exactly.
            if u.iter().all(|v| (0.0..=1.0).contains(v)) && ta.shift.iter().all(|v| *v == 0.0) {
                let tv = t.evaluate(&t.to_physical(&u)).unwrap();
                for (m, (a, b)) in tv.iter().zip(&want).enumerate() {
                    if m != k {
                        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
                    }
                }
            }
        }
    }
}

#[test]
fn two_stage_has_a_feasible_point_meeting_the_thresholds() {
    let p = ProblemSpec::builtin("two_stage").unwrap();
    let mut r = rng(2);
    let found = (0..5000).find_map(|_| {
        let z: Vec<f64> = (0..10).map(|_| r.random()).collect();
        let f = p.evaluate(&p.to_physical(&z)).unwrap();
        p.is_feasible(&f).then_some(f)
    });
    let f = found.expect("dense sampling finds a feasible point");
    assert!(f[1] >= 60.0 && f[2] >= 4.0 && f[3] >= 60.0, "{f:?}");
    assert_eq!(p.total_violation(&f), 0.0);
}

#[test]
fn branin_corners_match_closed_form() {
    let p = ProblemSpec::builtin("branin").unwrap();
    for x in [[-5.0, 0.0], [10.0, 0.0], [-5.0, 15.0], [10.0, 15.0]] {
        let f = p.evaluate(&x).unwrap();
        let b = 5.1 / (4.0 * std::f64::consts::PI.powi(2));
        let c = 5.0 / std::f64::consts::PI;
        let t = 1.0 / (8.0 * std::f64::consts::PI);
        let want = (x[1] - b * x[0] * x[0] + c * x[0] - 6.0).powi(2) + 10.0 * (1.0 - t) * x[0].cos() + 10.0;
        assert!((f[0] - want).abs() < 1e-12);
        assert!((f[1] - ((x[0] - 2.5).powi(2) + (x[1] - 7.5).powi(2))).abs() < 1e-12);
    }
}

#[test]
fn fom_spec_is_reproducible_and_cached() {
    let p = ProblemSpec::builtin("bandgap").unwrap();
    let a = build_fom_spec(&p, 1000, 3).unwrap();
    assert_eq!(a, build_fom_spec(&p, 1000, 3).unwrap());
    assert_ne!(a, build_fom_spec(&p, 1000, 4).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let cached = build_fom_spec_cached(&p, 1000, 3, dir.path()).unwrap();
    assert_eq!(a, cached);
    assert!(fom::fom_cache_path(dir.path(), "bandgap", 1000, 3).exists());
    assert_eq!(a, build_fom_spec_cached(&p, 1000, 3, dir.path()).unwrap());
}

#[test]
fn fom_of_empirical_maximum_is_one() {
    let p = ProblemSpec::builtin("two_stage").unwrap();
    let spec = build_fom_spec(&p, 500, 0).unwrap();
    let gain = spec.terms.iter().find(|t| t.metric == "Gain").unwrap().clone();
    assert_eq!(gain.weight, 1.0);
    let single = FomSpec { terms: vec![gain.clone()] };
    assert_eq!(compute_fom(&[gain.max], &single), 1.0);
    assert_eq!(compute_fom(&[gain.min], &single), 0.0);
}

#[test]
fn constant_metric_fails_fom_build() {
    let p = ProblemSpec {
        name: "constant".into(),
        lower: vec![0.0],
        upper: vec![1.0],
        metrics: vec![MetricSpec { name: "m".into(), unit: String::new(), constraint: None }],
        objective: "m".into(),
        direction: Direction::Maximize,
        evaluator: EvaluatorSpec::Subprocess(shell(r#"read line; echo '{"metrics":{"m":2.0}}'"#, 10.0)),
        feasible_fraction: None,
    };
    p.validate().unwrap();
    assert!(build_fom_spec(&p, 100, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn unit_mapping_round_trips(idx in 0usize..8, seed in 0u64..10_000) {
        let name = ProblemSpec::builtin_names()[idx];
        let p = ProblemSpec::builtin(name).unwrap();
        let mut r = rng(seed);
        let x: Vec<f64> = (0..p.dim()).map(|i| r.random_range(p.lower[i]..=p.upper[i])).collect();
        let back = p.to_physical(&p.to_unit(&x));
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        prop_assert!(p.in_box(&x));
    }
}
