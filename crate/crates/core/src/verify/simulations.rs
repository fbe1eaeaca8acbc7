use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::stats::{auc_binary, delong_test};

/// AUC by counting all positive/negative pairs (ties count one half).
pub fn auc_pair_count(scores: &[f64], labels: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1;
            total += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    total / pairs as f64
}

/// Shared latent score plus independent noise for two readers.
fn correlated_scores(n: usize, separation: f64, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let shared: Vec<f64> = labels
        .iter()
        .map(|&l| rng.sample::<f64, _>(StandardNormal) + if l { separation } else { 0.0 })
        .collect();
    let a = shared.iter().map(|s| s + noise * rng.sample::<f64, _>(StandardNormal)).collect();
    let b = shared.iter().map(|s| s + noise * rng.sample::<f64, _>(StandardNormal)).collect();
    (a, b, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapComparison {
    pub delong_variance: f64,
    pub bootstrap_variance: f64,
    pub relative_difference: f64,
}

/// DeLong variance of `AUC_A - AUC_B` against a paired bootstrap estimate.
pub fn delong_bootstrap_comparison(n: usize, resamples: usize, seed: u64) -> Result<BootstrapComparison> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Different noise levels so the two AUCs genuinely differ.
    let (a, _, labels) = correlated_scores(n, 1.0, 0.5, &mut rng);
    let b: Vec<f64> = a.iter().map(|s| s + 0.8 * rng.sample::<f64, _>(StandardNormal)).collect();
    let d = delong_test(&a, &b, &labels)?;
    let mut diffs = Vec::with_capacity(resamples);
    let (mut ra, mut rb, mut rl) = (vec![0.0; n], vec![0.0; n], vec![false; n]);
    while diffs.len() < resamples {
        for i in 0..n {
            let k = rng.gen_range(0..n);
            ra[i] = a[k];
            rb[i] = b[k];
            rl[i] = labels[k];
        }
        if let (Ok(x), Ok(y)) = (auc_binary(&ra, &rl), auc_binary(&rb, &rl)) {
            diffs.push(x - y);
        }
    }
    let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let boot = diffs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (diffs.len() as f64 - 1.0);
    Ok(BootstrapComparison {
        delong_variance: d.variance,
        bootstrap_variance: boot,
        relative_difference: (d.variance - boot).abs() / boot,
    })
}

/// Fraction of null simulations (equal-quality readers) with `p < 0.05`.
pub fn delong_null_rejection_rate(simulations: usize, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejections = 0;
    for _ in 0..simulations {
        let (a, b, labels) = correlated_scores(n, 1.0, 0.7, &mut rng);
        if delong_test(&a, &b, &labels)?.p < 0.05 {
            rejections += 1;
        }
    }
    Ok(rejections as f64 / simulations as f64)
}
