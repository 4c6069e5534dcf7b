use proptest::prelude::*;

use super::*;

fn v(data: &[f64]) -> Tensor {
    Tensor::new(&[data.len()], data.to_vec())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn perfect_forecast() {
    let t = v(&[1.0, -2.0, 0.5, 3.0]);
    let m = compute_metrics(&t, &t).unwrap();
    assert_eq!((m.mse, m.mae), (0.0, 0.0));
    assert!(close(m.pcc.unwrap(), 1.0, 1e-15));
    assert_eq!(m.r2, Some(1.0));
    assert_eq!(m.expvar, Some(1.0));
}

#[test]
fn known_correlations() {
    let m = compute_metrics(&v(&[1.0, 2.0, 3.0, 4.0]), &v(&[1.0, 3.0, 2.0, 4.0])).unwrap();
    assert!(close(m.pcc.unwrap(), 0.8, 1e-15));
    assert!(close(m.mse, 0.5, 1e-15));
    let m = compute_metrics(&v(&[3.0, 2.0, 1.0]), &v(&[1.0, 2.0, 3.0])).unwrap();
    assert!(close(m.pcc.unwrap(), -1.0, 1e-15));
}

#[test]
fn constant_truth_flags_instead_of_nan() {
    let m = compute_metrics(&v(&[1.0, 2.0]), &v(&[3.0, 3.0])).unwrap();
    assert_eq!((m.pcc, m.r2, m.expvar), (None, None, None));
    assert!(m.mse.is_finite());
}

#[test]
fn metric_preconditions() {
    assert!(compute_metrics(&v(&[1.0]), &v(&[1.0])).is_err());
    assert!(compute_metrics(&v(&[1.0, 2.0]), &v(&[1.0, 2.0, 3.0])).is_err());
}

#[test]
fn improvement_ratios() {
    assert!(close(improvement_ratio(0.367, 0.118).unwrap(), 0.6785, 1e-4));
    assert_eq!(improvement_ratio(0.3, 0.3).unwrap(), 0.0);
    assert_eq!(improvement_ratio(0.2, 0.4).unwrap(), -1.0);
    assert!(improvement_ratio(0.0, 0.1).is_err());
    assert!(improvement_ratio(-1.0, 0.1).is_err());
}

proptest! {
    #[test]
    fn row_order_does_not_matter(
        rows in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40),
        seed in any::<u64>(),
    ) {
        let mut perm: Vec<usize> = (0..rows.len()).collect();
        let mut s = seed;
        for i in (1..perm.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let (p, t): (Vec<f64>, Vec<f64>) = rows.iter().copied().unzip();
        let a = compute_metrics(&v(&p), &v(&t)).unwrap();
        let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let tp: Vec<f64> = perm.iter().map(|&i| t[i]).collect();
        let b = compute_metrics(&v(&pp), &v(&tp)).unwrap();
        prop_assert!(close(a.mse, b.mse, 1e-12) && close(a.mae, b.mae, 1e-12));
        for name in ["pcc", "r2", "expvar"] {
            match (a.get(name), b.get(name)) {
                (Some(x), Some(y)) => prop_assert!(close(x, y, 1e-10)),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn pcc_ignores_positive_affine(
        rows in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40),
        a in 0.1f64..10.0,
        b in -10.0f64..10.0,
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = rows.iter().copied().unzip();
        let base = compute_metrics(&v(&p), &v(&t)).unwrap();
        let moved: Vec<f64> = p.iter().map(|x| a * x + b).collect();
        let m = compute_metrics(&v(&moved), &v(&t)).unwrap();
        if let (Some(x), Some(y)) = (base.pcc, m.pcc) {
            prop_assert!(close(x, y, 1e-12), "{} vs {}", x, y);
        }
    }

    #[test]
    fn r2_equals_expvar_for_unbiased_residuals(
        rows in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40),
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = rows.iter().copied().unzip();
        let bias = t.iter().zip(&p).map(|(a, b)| a - b).sum::<f64>() / p.len() as f64;
        let centered: Vec<f64> = p.iter().map(|x| x + bias).collect();
        let m = compute_metrics(&v(&centered), &v(&t)).unwrap();
        if let (Some(r2), Some(ev)) = (m.r2, m.expvar) {
            prop_assert!(close(r2, ev, 1e-9 * (1.0 + r2.abs())));
        }
    }
}

fn run(method: &str, target: &str, seed: u64, mse: f64) -> RunResult {
    RunResult {
        method: method.into(),
        target: target.into(),
        seed,
        eval: Evaluation {
            metrics: Metrics {
                mse,
                mae: mse.sqrt(),
                pcc: Some(0.5),
                r2: None,
                expvar: Some(0.1),
            },
            per_step: vec![mse, 2.0 * mse],
            pair_hash: "h".into(),
        },
    }
}

fn meta() -> ReportMeta {
    ReportMeta {
        seeds: vec![0, 1],
        config_hash: "abc".into(),
    }
}

#[test]
fn empty_results_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = emit_report(&[], meta(), dir.path()).unwrap_err();
    assert!(err.to_string().contains("no results"));
}

#[test]
fn single_seed_has_no_std() {
    let r = build_report(&[run("hypergpa", "gru", 0, 0.5)], meta()).unwrap();
    let s = &r.per_method["hypergpa"]["gru"]["mse"];
    assert_eq!(s.mean, Some(0.5));
    assert_eq!(s.std, None);
    let json = serde_json::to_string(&r).unwrap();
    assert!(!json.contains("\"std\""));
    assert!(r.improvements.is_empty());
}

#[test]
fn report_summaries_and_improvements() {
    let results = [
        run("vanilla", "gru", 1, 0.4),
        run("vanilla", "gru", 0, 0.2),
        run("hypergpa", "gru", 0, 0.1),
        run("hypergpa", "gru", 1, 0.2),
    ];
    let r = build_report(&results, meta()).unwrap();
    let v = &r.per_method["vanilla"]["gru"]["mse"];
    assert!(close(v.mean.unwrap(), 0.3, 1e-15));
    assert!(close(v.std.unwrap(), 0.02f64.sqrt(), 1e-15));
    assert_eq!(v.per_seed, vec![Some(0.2), Some(0.4)]);
    assert_eq!(r.per_method["vanilla"]["gru"]["r2"].mean, None);
    assert!(close(r.improvements["hypergpa"]["gru"], 0.5, 1e-12));
}

#[test]
fn emitted_files_are_canonical() {
    let results = [run("vanilla", "gru", 0, 0.2), run("hypergpa", "gru", 0, 0.1)];
    let reversed = [results[1].clone(), results[0].clone()];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = emit_report(&results, meta(), a.path()).unwrap();
    let fb = emit_report(&reversed, meta(), b.path()).unwrap();
    for (x, y) in [
        (&fa.report, &fb.report),
        (&fa.per_seed, &fb.per_seed),
        (&fa.per_step, &fb.per_step),
    ] {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    let steps = fs::read_to_string(&fa.per_step).unwrap();
    assert_eq!(steps.lines().next(), Some("t,method,mse"));
    assert!(steps.contains("1,vanilla/gru,0.4"));
    let csv = fs::read_to_string(&fa.per_seed).unwrap();
    assert!(csv.contains("hypergpa,gru,0,0.1,"));
}
