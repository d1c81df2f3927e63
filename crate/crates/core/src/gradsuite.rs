//! Finite-difference sweep over every taped op and every objective.

use serde::Serialize;

use crate::nn::{conv2d, pool2d, upsample_nearest, BatchNorm2d, BnMode, Dense, InstanceNorm2d, PoolKind};
use crate::objectives::{
    cross_entropy_loss, depth_regression_loss, entropy_classifier, entropy_depth, perceptual_loss,
    stat_consistency_loss, total_loss, LayerStats, LossTerms, LossWeights, StoredStats,
};
use crate::rng::SplitMix64;
use crate::spectrum::{dft2_im, dft2_re, phase_consistency_loss};
use crate::tensor::{check_gradient, Result, Tape, Tensor, Var};

/// Largest relative error a rule may show against central differences.
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_TRIALS: usize = 20;
const STEP: f64 = 1e-5;

type Body = for<'t> fn(&'t Tape, Var<'t>, &[Tensor]) -> Result<Var<'t>>;

#[derive(Clone, Copy)]
enum Domain {
    Gaussian,
    /// Values bounded away from zero.
    NonZero,
    Positive,
    /// Values kept off the clamp bounds ±0.5.
    OffBounds,
}

struct Check {
    name: &'static str,
    shape: &'static [usize],
    domain: Domain,
    aux: &'static [&'static [usize]],
    body: Body,
}

fn sample(shape: &[usize], domain: Domain, rng: &mut SplitMix64) -> Tensor {
    Tensor::gaussian(shape, 0.0, 1.0, rng.next_u64()).map(|v| match domain {
        Domain::Gaussian => v,
        Domain::NonZero => v + 0.2 * v.signum(),
        Domain::Positive => 0.2 + v.abs(),
        Domain::OffBounds => {
            if (v.abs() - 0.5).abs() < 0.05 {
                v * 1.2
            } else {
                v
            }
        }
    })
}

/// `Σ y ⊙ w` for a fixed weight tensor, so every output element matters.
fn weighted<'t>(y: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    Ok(y.mul(y.tape().constant(w.clone()))?.sum_all())
}

fn positive(t: &Tensor) -> Tensor {
    t.map(|v| 0.2 + v.abs())
}

fn channel_stats<'t>(x: Var<'t>) -> Result<LayerStats<'t>> {
    let c = x.shape()[1];
    let mean = x.mean_keepdim(&[0, 2, 3])?;
    let var = x.sub(mean)?.square().mean(&[0, 2, 3])?;
    Ok(LayerStats {
        mean: mean.reshape(&[c])?,
        var,
    })
}

fn checks() -> Vec<Check> {
    use Domain::*;
    const X: &[usize] = &[2, 3, 4];
    const IMG: &[usize] = &[2, 3, 5, 5];
    vec![
        Check { name: "relu", shape: X, domain: NonZero, aux: &[X], body: |_, x, a| weighted(x.relu(), &a[0]) },
        Check { name: "exp", shape: X, domain: Gaussian, aux: &[X], body: |_, x, a| weighted(x.exp(), &a[0]) },
        Check { name: "log", shape: X, domain: Positive, aux: &[X], body: |_, x, a| weighted(x.log(), &a[0]) },
        Check { name: "sqrt", shape: X, domain: Positive, aux: &[X], body: |_, x, a| weighted(x.sqrt(), &a[0]) },
        Check { name: "tanh", shape: X, domain: Gaussian, aux: &[X], body: |_, x, a| weighted(x.tanh(), &a[0]) },
        Check { name: "sigmoid", shape: X, domain: Gaussian, aux: &[X], body: |_, x, a| weighted(x.sigmoid(), &a[0]) },
        Check { name: "neg", shape: X, domain: Gaussian, aux: &[X], body: |_, x, a| weighted(x.neg(), &a[0]) },
        Check { name: "square", shape: X, domain: Gaussian, aux: &[X], body: |_, x, a| weighted(x.square(), &a[0]) },
        Check { name: "scale", shape: X, domain: Gaussian, aux: &[X], body: |_, x, a| weighted(x.scale(-1.7), &a[0]) },
        Check { name: "add_scalar", shape: X, domain: Gaussian, aux: &[X], body: |_, x, a| weighted(x.add_scalar(0.3).square(), &a[0]) },
        Check { name: "clamp", shape: X, domain: OffBounds, aux: &[X], body: |_, x, a| weighted(x.clamp(-0.5, 0.5), &a[0]) },
        Check { name: "add", shape: X, domain: Gaussian, aux: &[X, X], body: |t, x, a| weighted(x.add(t.constant(a[1].clone()))?.square(), &a[0]) },
        Check { name: "sub/lhs", shape: X, domain: Gaussian, aux: &[X, X], body: |t, x, a| weighted(x.sub(t.constant(a[1].clone()))?.square(), &a[0]) },
        Check { name: "sub/rhs", shape: X, domain: Gaussian, aux: &[X, X], body: |t, x, a| weighted(t.constant(a[1].clone()).sub(x)?.square(), &a[0]) },
        Check { name: "mul", shape: X, domain: Gaussian, aux: &[X, X], body: |t, x, a| weighted(x.mul(t.constant(a[1].clone()))?, &a[0]) },
        Check { name: "div/num", shape: X, domain: Gaussian, aux: &[X, X], body: |t, x, a| weighted(x.div(t.constant(positive(&a[1])))?, &a[0]) },
        Check { name: "div/den", shape: X, domain: NonZero, aux: &[X, X], body: |t, x, a| weighted(t.constant(a[1].clone()).div(x)?, &a[0]) },
        Check { name: "add/broadcast", shape: &[1, 3, 1], domain: Gaussian, aux: &[X, X], body: |t, x, a| weighted(t.constant(a[1].clone()).add(x)?.square(), &a[0]) },
        Check { name: "mul/broadcast", shape: &[2, 1, 4], domain: Gaussian, aux: &[X, X], body: |t, x, a| weighted(t.constant(a[1].clone()).mul(x)?, &a[0]) },
        Check { name: "sum_keepdim", shape: X, domain: Gaussian, aux: &[&[1, 3, 1]], body: |_, x, a| weighted(x.sum_keepdim(&[0, 2])?.square(), &a[0]) },
        Check { name: "mean_keepdim", shape: X, domain: Gaussian, aux: &[&[2, 1, 4]], body: |_, x, a| weighted(x.mean_keepdim(&[1])?.square(), &a[0]) },
        Check { name: "sum", shape: X, domain: Gaussian, aux: &[&[2, 4]], body: |_, x, a| weighted(x.sum(&[1])?.square(), &a[0]) },
        Check { name: "mean", shape: X, domain: Gaussian, aux: &[&[3]], body: |_, x, a| weighted(x.mean(&[0, 2])?.square(), &a[0]) },
        Check { name: "sum_all", shape: X, domain: Gaussian, aux: &[], body: |_, x, _| Ok(x.sum_all().square()) },
        Check { name: "mean_all", shape: X, domain: Gaussian, aux: &[], body: |_, x, _| Ok(x.mean_all().square()) },
        Check { name: "norm2", shape: X, domain: Gaussian, aux: &[], body: |_, x, _| Ok(x.norm2()) },
        Check { name: "reshape", shape: X, domain: Gaussian, aux: &[&[4, 6]], body: |_, x, a| weighted(x.reshape(&[4, 6])?.square(), &a[0]) },
        Check { name: "permute", shape: X, domain: Gaussian, aux: &[&[4, 2, 3]], body: |_, x, a| weighted(x.permute(&[2, 0, 1])?.square(), &a[0]) },
        Check { name: "transpose", shape: X, domain: Gaussian, aux: &[&[4, 3, 2]], body: |_, x, a| weighted(x.transpose(0, 2)?.square(), &a[0]) },
        Check { name: "slice", shape: X, domain: Gaussian, aux: &[&[2, 2, 4]], body: |_, x, a| weighted(x.slice(1, 1, 3)?.square(), &a[0]) },
        Check { name: "pad", shape: X, domain: Gaussian, aux: &[&[3, 3, 6]], body: |_, x, a| weighted(x.pad(&[(1, 0), (0, 0), (0, 2)])?.square(), &a[0]) },
        Check { name: "pad_all", shape: IMG, domain: Gaussian, aux: &[&[4, 5, 7, 7]], body: |_, x, a| weighted(x.pad_all(1)?.square(), &a[0]) },
        Check { name: "matmul/lhs", shape: &[3, 4], domain: Gaussian, aux: &[&[3, 5], &[4, 5]], body: |t, x, a| weighted(x.matmul(t.constant(a[1].clone()))?, &a[0]) },
        Check { name: "matmul/rhs", shape: &[4, 5], domain: Gaussian, aux: &[&[3, 5], &[3, 4]], body: |t, x, a| weighted(t.constant(a[1].clone()).matmul(x)?, &a[0]) },
        Check { name: "softmax", shape: &[3, 5], domain: Gaussian, aux: &[&[3, 5]], body: |_, x, a| weighted(x.softmax()?, &a[0]) },
        Check { name: "log_softmax", shape: &[3, 5], domain: Gaussian, aux: &[&[3, 5]], body: |_, x, a| weighted(x.log_softmax()?, &a[0]) },
        Check {
            name: "conv2d/x",
            shape: IMG,
            domain: Gaussian,
            aux: &[&[2, 4, 3, 3], &[4, 3, 3, 3], &[4]],
            body: |t, x, a| {
                let y = conv2d(x, t.constant(a[1].clone()), Some(t.constant(a[2].clone())), 2, 1)?;
                weighted(y, &a[0])
            },
        },
        Check {
            name: "conv2d/w",
            shape: &[4, 3, 3, 3],
            domain: Gaussian,
            aux: &[&[2, 4, 5, 5], IMG],
            body: |t, w, a| weighted(conv2d(t.constant(a[1].clone()), w, None, 1, 1)?, &a[0]),
        },
        Check {
            name: "conv2d/b",
            shape: &[4],
            domain: Gaussian,
            aux: &[&[2, 4, 5, 5], IMG, &[4, 3, 3, 3]],
            body: |t, b, a| {
                let y = conv2d(t.constant(a[1].clone()), t.constant(a[2].clone()), Some(b), 1, 1)?;
                weighted(y.square(), &a[0])
            },
        },
        Check { name: "max_pool", shape: &[2, 3, 4, 4], domain: Gaussian, aux: &[&[2, 3, 2, 2]], body: |_, x, a| weighted(pool2d(x, PoolKind::Max, 2, 2)?, &a[0]) },
        Check { name: "avg_pool", shape: &[2, 3, 4, 4], domain: Gaussian, aux: &[&[2, 3, 2, 2]], body: |_, x, a| weighted(pool2d(x, PoolKind::Avg, 2, 2)?, &a[0]) },
        Check { name: "upsample", shape: &[2, 3, 2, 2], domain: Gaussian, aux: &[&[2, 3, 4, 4]], body: |_, x, a| weighted(upsample_nearest(x, 2)?, &a[0]) },
        Check {
            name: "batchnorm",
            shape: IMG,
            domain: Gaussian,
            aux: &[IMG],
            body: |t, x, a| {
                let out = BatchNorm2d::new("bn", 3).forward(t, x, BnMode::Train, false)?;
                weighted(out.y, &a[0])
            },
        },
        Check { name: "instance_norm", shape: IMG, domain: Gaussian, aux: &[IMG], body: |t, x, a| weighted(InstanceNorm2d::new("in", 3).forward(t, x, false)?, &a[0]) },
        Check {
            name: "dense",
            shape: &[3, 4],
            domain: Gaussian,
            aux: &[&[3, 2]],
            body: |t, x, a| weighted(Dense::new("fc", 4, 2, &mut SplitMix64::new(5)).forward(t, x, false)?, &a[0]),
        },
        Check { name: "dft2_re", shape: &[2, 4, 6], domain: Gaussian, aux: &[&[2, 4, 6]], body: |_, x, a| weighted(dft2_re(x)?, &a[0]) },
        Check { name: "dft2_im", shape: &[2, 4, 6], domain: Gaussian, aux: &[&[2, 4, 6]], body: |_, x, a| weighted(dft2_im(x)?, &a[0]) },
        Check {
            name: "loss/stat",
            shape: IMG,
            domain: Gaussian,
            aux: &[&[3], &[3]],
            body: |_, x, a| {
                let stored = StoredStats {
                    mean: a[0].clone(),
                    var: positive(&a[1]),
                    eps: 1e-5,
                };
                let first = channel_stats(x)?;
                let second = channel_stats(x.square())?;
                stat_consistency_loss(&[first, second], &[stored.clone(), stored])
            },
        },
        Check { name: "loss/perceptual", shape: IMG, domain: Gaussian, aux: &[IMG], body: |_, x, a| perceptual_loss(x.tanh(), &a[0]) },
        Check { name: "loss/entropy_classifier", shape: &[4, 2], domain: Gaussian, aux: &[], body: |_, x, _| entropy_classifier(x.softmax()?) },
        Check { name: "loss/entropy_depth", shape: &[2, 1, 4, 4], domain: Gaussian, aux: &[], body: |_, x, _| entropy_depth(x) },
        Check { name: "loss/phase", shape: &[2, 3, 4, 4], domain: Gaussian, aux: &[&[2, 3, 4, 4]], body: |_, x, a| phase_consistency_loss(&a[0], x) },
        Check { name: "loss/cross_entropy", shape: &[4, 2], domain: Gaussian, aux: &[], body: |_, x, _| cross_entropy_loss(x, &[0, 1, 1, 0]) },
        Check { name: "loss/depth_regression", shape: &[2, 1, 4, 4], domain: Gaussian, aux: &[&[2, 1, 4, 4]], body: |_, x, a| depth_regression_loss(x.sigmoid(), &a[0]) },
        Check {
            name: "loss/total",
            shape: &[2, 3, 4, 4],
            domain: Gaussian,
            aux: &[&[2, 3, 4, 4], &[3], &[3]],
            body: |_, x, a| {
                let stored = StoredStats {
                    mean: a[1].clone(),
                    var: positive(&a[2]),
                    eps: 1e-5,
                };
                let logits = x.mean(&[2, 3])?.slice(1, 0, 2)?;
                let terms = LossTerms {
                    stat: stat_consistency_loss(&[channel_stats(x)?], &[stored])?,
                    per: perceptual_loss(x.tanh(), &a[0])?,
                    ent1: entropy_classifier(logits.softmax()?)?,
                    ent2: entropy_depth(x.slice(1, 0, 1)?)?,
                    ph: phase_consistency_loss(&a[0], x)?,
                };
                total_loss(&terms, &LossWeights { lambda_ent: 0.3, lambda_ph: 0.2 })
            },
        },
    ]
}

/// Deliberately wrong rule for `x²` whose gradient has the sign flipped;
/// a sound harness must report it.
fn sign_flipped<'t>(tape: &'t Tape, x: Var<'t>, a: &[Tensor]) -> Result<Var<'t>> {
    let saved = x.value();
    let y = tape.record("flipped_square", &[x], saved.map(|v| v * v), move |g, _| {
        vec![Some(saved.map(|v| -2.0 * v).mul(g).expect("same shape"))]
    });
    weighted(y, &a[0])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub tolerance: f64,
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&SuiteRow> {
        self.rows.iter().filter(|r| !r.passed).collect()
    }

    /// `name,trials,max_rel_error,passed`, one row per check.
    pub fn csv(&self) -> String {
        let mut s = String::from("name,trials,max_rel_error,passed\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.name, r.trials, crate::fmt9(r.max_rel_error), r.passed));
        }
        s
    }
}

/// Names of the checks in suite order.
pub fn check_names() -> Vec<&'static str> {
    checks().iter().map(|c| c.name).collect()
}

/// Runs every check on `trials` seeded random inputs. With `inject_fault`
/// a check backed by a sign-flipped rule is appended.
pub fn run_gradient_suite(seed: u64, trials: usize, inject_fault: bool) -> Result<SuiteReport> {
    let mut all = checks();
    if inject_fault {
        const S: &[usize] = &[3, 4];
        all.push(Check {
            name: "injected/sign_flip",
            shape: S,
            domain: Domain::Gaussian,
            aux: &[S],
            body: sign_flipped,
        });
    }
    let mut rows = Vec::with_capacity(all.len());
    for (k, c) in all.iter().enumerate() {
        let mut rng = SplitMix64::derive(seed, k as u64);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let x = sample(c.shape, c.domain, &mut rng);
            let aux: Vec<Tensor> = c.aux.iter().map(|s| sample(s, Domain::Gaussian, &mut rng)).collect();
            let r = check_gradient(c.name, &x, STEP, |tape, v| (c.body)(tape, v, &aux))?;
            let e = if r.rel_error.is_nan() { f64::INFINITY } else { r.rel_error };
            worst = worst.max(e);
        }
        rows.push(SuiteRow {
            name: c.name.to_string(),
            trials,
            max_rel_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(SuiteReport {
        seed,
        tolerance: TOLERANCE,
        rows,
    })
}
