use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::softmax;

fn pred(id: usize, probs: [f64; 3], label: usize) -> Prediction {
    Prediction::new(format!("s{id}"), probs.to_vec(), Some(label))
}

fn fixture() -> Vec<Prediction> {
    vec![
        pred(1, [0.7, 0.2, 0.1], 0),
        pred(2, [0.4, 0.5, 0.1], 0),
        pred(3, [0.2, 0.6, 0.2], 1),
        pred(4, [0.3, 0.3, 0.4], 1),
        pred(5, [0.1, 0.3, 0.6], 2),
        pred(6, [0.5, 0.2, 0.3], 2),
    ]
}

#[test]
fn six_subject_fixture_matches_hand_computation() {
    let (m, per_class) = compute_metrics(&fixture()).unwrap();
    assert_eq!(m.accuracy, 0.5);
    for c in &per_class {
        assert_eq!((c.precision, c.recall, c.f1, c.support), (0.5, 0.5, 0.5, 2));
    }
    let aucs: Vec<f64> = per_class.iter().map(|c| c.auc.unwrap()).collect();
    assert_eq!(aucs, vec![0.875, 0.8125, 0.875]);
    assert!((m.auc.unwrap() - 2.5625 / 3.0).abs() < 1e-12);
}

#[test]
fn perfect_and_uninformative_predictions() {
    let perfect: Vec<Prediction> = (0..9)
        .map(|i| {
            let mut p = [0.1; 3];
            p[i % 3] = 0.8;
            pred(i, p, i % 3)
        })
        .collect();
    let (m, _) = compute_metrics(&perfect).unwrap();
    assert_eq!((m.accuracy, m.f1, m.auc), (1.0, 1.0, Some(1.0)));

    let constant: Vec<Prediction> = (0..9).map(|i| pred(i, [0.3, 0.4, 0.3], i % 3)).collect();
    let (_, per_class) = compute_metrics(&constant).unwrap();
    assert!(per_class.iter().all(|c| c.auc == Some(0.5)));
}

#[test]
fn absent_class_has_no_auc() {
    let preds = vec![pred(0, [0.6, 0.3, 0.1], 0), pred(1, [0.2, 0.7, 0.1], 1)];
    let (m, per_class) = compute_metrics(&preds).unwrap();
    assert_eq!(per_class[2].auc, None);
    assert_eq!(m.auc, Some(1.0));
}

#[test]
fn auc_examples() {
    let labels = [false, false, true, true];
    assert_eq!(auc_binary(&[0.1, 0.4, 0.35, 0.8], &labels).unwrap(), 0.75);
    assert_eq!(auc_binary(&[0.1, 0.2, 0.3, 0.4], &labels).unwrap(), 1.0);
    assert_eq!(auc_binary(&[0.4, 0.3, 0.2, 0.1], &labels).unwrap(), 0.0);
    assert!(auc_binary(&[0.1, 0.2], &[true, true]).is_err());
}

#[test]
fn midrank_ties() {
    assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
}

#[test]
fn spearman_examples() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    assert!(spearman(&[1.0, 2.0], &[1.0, 1.0]).is_err());
}

#[test]
fn mcnemar_examples() {
    let r = mcnemar_counts(5, 5);
    assert!(r.exact);
    assert_eq!(r.p, 1.0);
    let r = mcnemar_counts(10, 0);
    assert!((r.p - 2.0 * 0.5f64.powi(10)).abs() < 1e-12);
    let r = mcnemar_counts(40, 20);
    assert!(!r.exact);
    assert!((r.statistic - 361.0 / 60.0).abs() < 1e-12);
    assert!((r.p - 0.0142).abs() < 5e-4, "{}", r.p);
    assert_eq!(mcnemar_counts(0, 0).p, 1.0);
}

#[test]
fn mcnemar_branches_agree_at_boundary() {
    for (b, c) in [(12, 13), (11, 14), (10, 15)] {
        let chi = mcnemar_counts(b, c);
        let n = (b + c) as u64;
        let exact = {
            use statrs::distribution::{Binomial, DiscreteCDF};
            (2.0 * Binomial::new(0.5, n).unwrap().cdf(b.min(c) as u64)).min(1.0)
        };
        assert!(!chi.exact);
        assert!((chi.p - exact).abs() < 0.02, "b={b} c={c}: {} vs {exact}", chi.p);
    }
}

#[test]
fn mcnemar_from_vectors() {
    let a = [true, true, false, true];
    let b = [false, true, true, false];
    let r = mcnemar_test(&a, &b).unwrap();
    assert_eq!((r.b, r.c), (2, 1));
}

#[test]
fn ci_examples() {
    let iv = ci_over_runs(&[0.60, 0.62, 0.64, 0.66, 0.68]).unwrap();
    assert!((iv.mean - 0.64).abs() < 1e-12);
    assert!((iv.half_width() - 0.0393).abs() < 5e-5, "{}", iv.half_width());
    assert!((iv.lo - 0.6007).abs() < 5e-5 && (iv.hi - 0.6793).abs() < 5e-5);
    let flat = ci_over_runs(&[0.7; 4]).unwrap();
    assert_eq!((flat.lo, flat.hi), (0.7, 0.7));
    assert!(ci_over_runs(&[0.5]).is_err());
}

#[test]
fn delong_identity_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labels: Vec<bool> = (0..80).map(|i| i % 3 == 0).collect();
    let a: Vec<f64> = labels.iter().map(|&l| rng.gen::<f64>() + if l { 0.5 } else { 0.0 }).collect();
    let b: Vec<f64> = labels.iter().map(|&l| rng.gen::<f64>() + if l { 0.2 } else { 0.0 }).collect();
    let same = delong_test(&a, &a, &labels).unwrap();
    assert_eq!((same.z, same.p), (0.0, 1.0));
    let ab = delong_test(&a, &b, &labels).unwrap();
    let ba = delong_test(&b, &a, &labels).unwrap();
    assert!((ab.z + ba.z).abs() < 1e-12);
    assert!((ab.p - ba.p).abs() < 1e-12);
    assert!(ab.p > 0.0 && ab.p < 1.0);
}

#[test]
fn delong_degenerate_variance() {
    let labels = [false, false, true, true];
    let r = delong_test(&[0.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 0.0, 0.0], &labels).unwrap();
    assert!(r.degenerate);
    assert_eq!(r.p, 0.0);
}

fn synthetic_pair(n: usize, seed: u64, b_quality: [f64; 3]) -> (Vec<Prediction>, Vec<Prediction>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..n {
        let label = i % 3;
        let mut la = [0.0f64; 3];
        la[label] = 6.0;
        let lb: Vec<f64> = (0..3)
            .map(|k| rng.gen_range(-1.0..1.0) + if k == label { b_quality[k] } else { 0.0 })
            .collect();
        a.push(Prediction::new(format!("s{i}"), softmax(&la), Some(label)));
        b.push(Prediction::new(format!("s{i}"), softmax(&lb), Some(label)));
    }
    (a, b)
}

#[test]
fn multiclass_delong_perfect_vs_random() {
    let (a, b) = synthetic_pair(300, 7, [0.0; 3]);
    let r = delong_multiclass(&a, &b).unwrap();
    assert!(r.significant);
    assert!(r.per_class.iter().all(|c| c.p < 0.001), "{:?}", r.per_class);
    let same = delong_multiclass(&a, &a).unwrap();
    assert!(!same.significant);
    assert!(same.per_class.iter().all(|c| c.p == 1.0));
}

#[test]
fn multiclass_delong_single_differing_class() {
    // B ranks classes 0 and 1 exactly as A does; only the class-2 scores lose information.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..240 {
        let label = i % 3;
        let s0 = if label == 0 { 0.3 } else { 0.1 } + rng.gen_range(0.0..0.05);
        let s1 = if label == 1 { 0.3 } else { 0.1 } + rng.gen_range(0.0..0.05);
        let s2a = if label == 2 { 0.3 } else { 0.1 } + rng.gen_range(0.0..0.05);
        let s2b = rng.gen_range(0.1..0.35);
        a.push(Prediction::new(format!("s{i}"), vec![s0, s1, s2a], Some(label)));
        b.push(Prediction::new(format!("s{i}"), vec![s0, s1, s2b], Some(label)));
    }
    let r = delong_multiclass(&a, &b).unwrap();
    assert!(r.significant);
    assert_eq!(r.per_class[0].p, 1.0);
    assert_eq!(r.per_class[1].p, 1.0);
    assert!(r.per_class[2].significant);
}

#[test]
fn paired_tests_require_same_subjects() {
    let a = fixture();
    let mut b = fixture();
    b.swap(0, 1);
    assert!(delong_multiclass(&a, &b).is_err());
    assert!(mcnemar_predictions(&a, &b).is_err());
}

#[test]
fn metrics_invariant_under_reordering() {
    let mut f = fixture();
    let base = MetricReport::from_predictions(&f).unwrap();
    f.reverse();
    assert_eq!(MetricReport::from_predictions(&f).unwrap(), base);
}

#[test]
fn report_json_has_fixed_keys_and_aggregates() {
    let r = MetricReport::from_predictions(&fixture()).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys, vec!["ci", "metrics", "n_runs", "per_class"]);
    let mut runs = Vec::new();
    for (i, acc) in [0.60, 0.62, 0.64, 0.66, 0.68].into_iter().enumerate() {
        let mut run = r.clone();
        run.metrics.insert("accuracy".into(), acc);
        run.metrics.insert("auc".into(), 0.8 + 0.01 * i as f64);
        runs.push(run);
    }
    let agg = MetricReport::aggregate(&runs).unwrap();
    assert_eq!(agg.n_runs, 5);
    let [lo, hi] = agg.ci["accuracy"];
    assert!(((hi - lo) / 2.0 - 0.0393).abs() < 5e-5);
    assert_eq!(agg.cell("accuracy"), "0.640 [0.601–0.679]");
    assert_eq!(r.cell("accuracy"), "0.500");
}

#[test]
fn comparison_report_serializes() {
    let (a, b) = synthetic_pair(60, 2, [1.0; 3]);
    let c = compare_predictions(&a, &b).unwrap();
    assert!(c.metric_deltas["accuracy"] > 0.0);
    let v: serde_json::Value = serde_json::to_value(&c).unwrap();
    for key in ["test", "statistic", "p", "significant"] {
        assert!(v["mcnemar"].get(key).is_some(), "{key}");
    }
}
