use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, Graph, OpKind, ParameterSet, Tensor, Var};
use crate::error::Result;
use crate::fusion::{BackboneStyle, FusionConfig, FusionModel, ImageFeatDim, ImageInput, ModelKind};

pub const GRADCHECK_EPS: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const FULL_MODEL_CHECK: &str = "fusion_model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub fault: Option<String>,
    pub checks: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

/// Values bounded away from zero (keeps relu off its kink).
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Distinct values with gaps far above the step (no max-pool ties).
fn distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    v.shuffle(rng);
    v
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).expect("consistent test shapes")
}

/// Max error over every parameter of `params`.
fn check_all<F>(params: &mut ParameterSet<f64>, fault: Option<OpKind>, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParameterSet<f64>) -> Result<Var>,
{
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for name in names {
        worst = worst.max(finite_diff_check(params, &name, GRADCHECK_EPS, fault, &mut build)?);
    }
    Ok(worst)
}

/// Reduces a tensor to a scalar with fixed random weights.
fn project(g: &mut Graph<f64>, x: Var, rng_seed: u64) -> Result<Var> {
    let n = g.value(x).len();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    g.weighted_sum(x, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn check_op(op: OpKind, seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParameterSet::new();
    let proj_seed = seed.wrapping_mul(31).wrapping_add(7);
    match op {
        OpKind::Conv2d => {
            let (c, o) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(4..=7), rng.gen_range(4..=7));
            let k = *[1usize, 3].choose(&mut rng).expect("non-empty");
            let stride = rng.gen_range(1..=2);
            let padding = rng.gen_range(0..=1);
            ps.insert("x", tensor(vec![c, h, w], away_from_zero(&mut rng, c * h * w)));
            ps.insert("k", tensor(vec![o, c, k, k], away_from_zero(&mut rng, o * c * k * k)));
            ps.insert("b", tensor(vec![o], away_from_zero(&mut rng, o)));
            check_all(&mut ps, fault, |g, p| {
                let (x, k, b) = (g.param(p, "x")?, g.param(p, "k")?, g.param(p, "b")?);
                let y = g.conv2d(x, k, b, stride, padding)?;
                project(g, y, proj_seed)
            })
        }
        OpKind::Dense => {
            let (n, m) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
            ps.insert("x", tensor(vec![n], away_from_zero(&mut rng, n)));
            ps.insert("w", tensor(vec![m, n], away_from_zero(&mut rng, m * n)));
            ps.insert("b", tensor(vec![m], away_from_zero(&mut rng, m)));
            check_all(&mut ps, fault, |g, p| {
                let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
                let y = g.dense(x, w, b)?;
                project(g, y, proj_seed)
            })
        }
        OpKind::Add => {
            let shape = vec![rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)];
            let n = shape.iter().product();
            ps.insert("a", tensor(shape.clone(), away_from_zero(&mut rng, n)));
            ps.insert("b", tensor(shape, away_from_zero(&mut rng, n)));
            check_all(&mut ps, fault, |g, p| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                let y = g.add(a, b)?;
                project(g, y, proj_seed)
            })
        }
        OpKind::Relu => {
            let n = rng.gen_range(1..=16);
            ps.insert("x", tensor(vec![n], away_from_zero(&mut rng, n)));
            check_all(&mut ps, fault, |g, p| {
                let x = g.param(p, "x")?;
                let y = g.relu(x);
                project(g, y, proj_seed)
            })
        }
        OpKind::MaxPool2d => {
            let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(2..=7), rng.gen_range(2..=7));
            ps.insert("x", tensor(vec![c, h, w], distinct(&mut rng, c * h * w)));
            check_all(&mut ps, fault, |g, p| {
                let x = g.param(p, "x")?;
                let y = g.max_pool2d(x, 2)?;
                project(g, y, proj_seed)
            })
        }
        OpKind::GlobalAvgPool => {
            let (c, h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=5));
            ps.insert("x", tensor(vec![c, h, w], away_from_zero(&mut rng, c * h * w)));
            check_all(&mut ps, fault, |g, p| {
                let x = g.param(p, "x")?;
                let y = g.global_avg_pool(x)?;
                project(g, y, proj_seed)
            })
        }
        OpKind::Concat => {
            let parts = rng.gen_range(1..=3);
            for i in 0..parts {
                let n = rng.gen_range(1..=6);
                ps.insert(format!("p{i}"), tensor(vec![n], away_from_zero(&mut rng, n)));
            }
            check_all(&mut ps, fault, |g, p| {
                let vars = (0..parts).map(|i| g.param(p, &format!("p{i}"))).collect::<Result<Vec<_>>>()?;
                let y = g.concat(&vars)?;
                project(g, y, proj_seed)
            })
        }
        OpKind::Dropout => {
            let n = rng.gen_range(2..=16);
            let rate = rng.gen_range(0.1..0.6);
            ps.insert("x", tensor(vec![n], away_from_zero(&mut rng, n)));
            check_all(&mut ps, fault, |g, p| {
                let x = g.param(p, "x")?;
                let mut mask_rng = ChaCha8Rng::seed_from_u64(proj_seed);
                let y = g.dropout(x, rate, true, &mut mask_rng)?;
                project(g, y, proj_seed)
            })
        }
        OpKind::SoftmaxCe => {
            let k = rng.gen_range(2..=5);
            let label = rng.gen_range(0..k);
            let alpha = rng.gen_range(0.3..2.0);
            ps.insert("z", tensor(vec![k], away_from_zero(&mut rng, k)));
            check_all(&mut ps, fault, |g, p| {
                let z = g.param(p, "z")?;
                g.weighted_softmax_ce(z, label, alpha)
            })
        }
        OpKind::WeightedSum => {
            let n = rng.gen_range(1..=10);
            ps.insert("x", tensor(vec![n], away_from_zero(&mut rng, n)));
            check_all(&mut ps, fault, |g, p| {
                let x = g.param(p, "x")?;
                project(g, x, proj_seed)
            })
        }
        OpKind::Mean => {
            let parts = rng.gen_range(1..=4);
            for i in 0..parts {
                ps.insert(format!("s{i}"), tensor(vec![1], away_from_zero(&mut rng, 1)));
            }
            check_all(&mut ps, fault, |g, p| {
                let vars = (0..parts).map(|i| g.param(p, &format!("s{i}"))).collect::<Result<Vec<_>>>()?;
                g.mean(&vars)
            })
        }
        OpKind::Leaf => Ok(0.0),
    }
}

/// Slim fusion network on an 8x8 input so every coordinate can be checked.
pub fn check_full_model(style: BackboneStyle, seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let mut cfg = FusionConfig::new(ModelKind::Fusion, style, 8, 3, seed);
    cfg.backbone.widths = [2, 3, 4, 8];
    cfg.image_feat_dim = ImageFeatDim::Native;
    cfg.head_hidden = [4, 3];
    let mut model = FusionModel::<f64>::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let image = tensor(vec![3, 8, 8], away_from_zero(&mut rng, 192));
    let clinical = vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    let label = rng.gen_range(0..3);
    let alpha = rng.gen_range(0.5..1.5);
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    // Zero biases behind a dead layer park pre-activations exactly on the relu kink.
    for name in names.iter().filter(|n| n.ends_with("/b")) {
        let b = &mut model.params.get_mut(name).expect("listed").value;
        let fresh = away_from_zero(&mut rng, b.len());
        b.data_mut().copy_from_slice(&fresh);
    }
    let mut worst = 0.0f64;
    for name in names {
        let template = model.clone();
        let err = finite_diff_check(&mut model.params, &name, GRADCHECK_EPS, fault, |g, p| {
            let m = FusionModel {
                params: p.clone(),
                ..template.clone()
            };
            let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
            let f = m.forward_graph(g, Some(ImageInput::Pixels(&image)), Some(&clinical), true, &mut drop_rng)?;
            g.weighted_softmax_ce(f.logits, label, alpha)
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Every layer op over `seeds` random instances plus the full model.
pub fn gradcheck_suite(seeds: usize, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let mut checks = Vec::new();
    let mut record = |op: &str, errs: Vec<f64>| {
        let max = errs.iter().copied().fold(0.0, f64::max);
        checks.push(OpCheck {
            op: op.to_string(),
            seeds: errs.len(),
            max_rel_error: max,
            passed: max < GRADCHECK_TOLERANCE,
        });
    };
    for op in OpKind::LAYERS {
        let errs = (0..seeds as u64).map(|s| check_op(op, s, fault)).collect::<Result<Vec<_>>>()?;
        record(op.name(), errs);
    }
    let errs = (0..seeds as u64)
        .map(|s| check_full_model(BackboneStyle::ALL[s as usize % 3], s, fault))
        .collect::<Result<Vec<_>>>()?;
    record(FULL_MODEL_CHECK, errs);
    Ok(GradcheckReport {
        eps: GRADCHECK_EPS,
        tolerance: GRADCHECK_TOLERANCE,
        fault: fault.map(|f| f.name().to_string()),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_op_passes_on_a_few_seeds() {
        for op in OpKind::LAYERS {
            for s in 0..3 {
                let e = check_op(op, s, None).unwrap();
                assert!(e < GRADCHECK_TOLERANCE, "{} seed {s}: {e}", op.name());
            }
        }
    }

    #[test]
    fn full_model_passes_for_every_style() {
        for (i, style) in BackboneStyle::ALL.into_iter().enumerate() {
            let e = check_full_model(style, i as u64, None).unwrap();
            assert!(e < GRADCHECK_TOLERANCE, "{style:?}: {e}");
        }
    }

    #[test]
    fn sign_flip_is_detected() {
        for op in [OpKind::Conv2d, OpKind::Dense, OpKind::SoftmaxCe, OpKind::Relu] {
            let e = check_op(op, 1, Some(op)).unwrap();
            assert!(e > 0.5, "{}: {e}", op.name());
        }
        assert!(check_full_model(BackboneStyle::Plain, 0, Some(OpKind::Conv2d)).unwrap() > 0.5);
    }
}
