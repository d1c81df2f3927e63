use std::io::Write;
use std::path::Path;

use log::{debug, info};
use serde::Serialize;

use super::{PipelineError, Result, TrainConfig};
use crate::data::{partner_permutation, BatchIterator, Samples};
use crate::fmt9;
use crate::models::{build_generator, build_source_bundle, forward_source, Generator, Module, ModelBundle};
use crate::nn::{Adam, BnMode, Param};
use crate::objectives::{
    cross_entropy_loss, depth_regression_loss, entropy_classifier, entropy_depth, perceptual_loss,
    stat_consistency_loss, total_loss, LossReport, LossTerms, StoredStats,
};
use crate::rng::SplitMix64;
use crate::spectrum::{phase_consistency_loss, specmix, LambdaSampler, SpecMixConfig};
use crate::tensor::{Tape, Tensor};

const BATCH_STREAM: u64 = 0xba7c;
const MIX_STREAM: u64 = 0x5bec;
const PARTNER_STREAM: u64 = 0x9a27;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SourceLogRow {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub depth: f64,
}

impl SourceLogRow {
    pub const CSV_HEADER: &'static str = "epoch,loss,ce,depth";
}

fn source_params(bundle: &mut ModelBundle) -> Vec<&mut Param> {
    let mut p = bundle.f.params_mut();
    p.extend(bundle.h.params_mut());
    p.extend(bundle.r.params_mut());
    p
}

/// Stage one: cross-entropy plus depth regression on labeled source data.
/// Running statistics follow every batch. Returns the bundle and one log
/// row per epoch.
pub fn train_source(cfg: &TrainConfig, data: &Samples) -> Result<(ModelBundle, Vec<SourceLogRow>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(PipelineError::Invalid("empty source set".into()));
    }
    if data.labels().is_none() {
        return Err(PipelineError::Invalid("source training needs labeled data".into()));
    }
    let mut bundle = build_source_bundle(cfg.seed);
    bundle.set_bn_alpha(cfg.bn_alpha);
    let mut adam = Adam::new(cfg.source_lr);
    let drop_last = data.len() >= cfg.batch_size;
    let mut batches = BatchIterator::new(data.len(), cfg.batch_size, cfg.seed ^ BATCH_STREAM, drop_last)?;
    let mut log = Vec::with_capacity(cfg.source_epochs);
    let mut step = 0;
    for epoch in 0..cfg.source_epochs {
        let (mut sum_ce, mut sum_depth, mut count) = (0.0, 0.0, 0);
        for idx in batches.epoch_batches() {
            let labels = data.batch_labels(&idx).expect("labeled");
            let depth = data.depths(&idx).expect("labeled");
            let tape = Tape::new();
            let x = tape.constant(data.images(&idx));
            let out = forward_source(&bundle, &tape, x, BnMode::Train)?;
            let ce = cross_entropy_loss(out.logits, &labels)?;
            let dl = depth_regression_loss(out.depth(), &depth)?;
            let loss = ce.add(dl)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(PipelineError::NonFinite {
                    stage: "source",
                    step,
                    detail: format!("ce {} depth {}", ce.value().item(), dl.value().item()),
                });
            }
            let grads = tape.backward(loss)?;
            let moments: Vec<(Tensor, Tensor)> = out
                .bn_stats
                .iter()
                .map(|s| (s.mean.value(), s.var.value()))
                .collect();
            drop(out);
            bundle.update_running(&moments)?;
            adam.step_with(&mut source_params(&mut bundle), &grads, false)?;
            sum_ce += ce.value().item();
            sum_depth += dl.value().item();
            count += 1;
            step += 1;
        }
        let row = SourceLogRow {
            epoch,
            loss: (sum_ce + sum_depth) / count as f64,
            ce: sum_ce / count as f64,
            depth: sum_depth / count as f64,
        };
        info!("source epoch {epoch}: loss {:.5} (ce {:.5}, depth {:.5})", row.loss, row.ce, row.depth);
        log.push(row);
    }
    Ok((bundle, log))
}

pub fn write_source_log(rows: &[SourceLogRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", SourceLogRow::CSV_HEADER)?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.epoch, fmt9(r.loss), fmt9(r.ce), fmt9(r.depth))?;
    }
    f.flush()?;
    Ok(())
}

/// Result of stage two.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub generator: Generator,
    /// One report per step.
    pub log: Vec<LossReport>,
    /// Exponential average of the stylized batch moments, per BN layer.
    pub stylized_ema: Vec<StoredStats>,
}

/// Originals followed by one SpecMix copy per image, each mixed with a
/// partner drawn from a random single cycle over the batch.
fn with_specmix(x: &Tensor, sampler: &mut LambdaSampler, rng: &mut SplitMix64) -> Result<Tensor> {
    let b = x.shape()[0];
    let per = x.numel() / b;
    let partner = partner_permutation(b, rng);
    let mut out = x.data().to_vec();
    out.reserve(x.numel());
    let image = |i: usize| Tensor::new(&[3, 32, 32], x.data()[i * per..(i + 1) * per].to_vec());
    for (i, &j) in partner.iter().enumerate() {
        let lambda = sampler.sample_lambda();
        out.extend_from_slice(specmix(&image(i)?, &image(j)?, lambda)?.data());
    }
    let mut shape = x.shape().to_vec();
    shape[0] = 2 * b;
    Ok(Tensor::new(&shape, out)?)
}

/// Stage two: optimizes only the generator so that stylized target images
/// reproduce the frozen source model's normalization statistics.
///
/// The source networks are bound as constants and the statistics come from
/// a pure train-mode pass, so nothing in `source` can change. Uses the
/// bundle's generator as a starting point when present.
pub fn adapt_generator(cfg: &TrainConfig, source: &ModelBundle, target: &Samples) -> Result<AdaptOutcome> {
    adapt_with(cfg, source, target, |_, _| {})
}

pub(crate) fn adapt_with(
    cfg: &TrainConfig,
    source: &ModelBundle,
    target: &Samples,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(PipelineError::Invalid("empty target set".into()));
    }
    let mut bundle = source.clone();
    bundle.freeze_source();
    let stored = bundle.stored_stats();
    if stored.is_empty() || bundle.bn_registry().iter().any(|bn| bn.num_updates == 0) {
        return Err(PipelineError::Invalid("source bundle has no trained BN statistics".into()));
    }
    let mut generator = bundle.g.take().unwrap_or_else(|| build_generator(cfg.seed));
    let weights = cfg.weights();
    let mut adam = Adam::new(cfg.lr);
    let drop_last = target.len() >= cfg.batch_size;
    let mut batches = BatchIterator::new(target.len(), cfg.batch_size, cfg.seed ^ BATCH_STREAM, drop_last)?;
    let mut sampler = SpecMixConfig::new(cfg.eta, SplitMix64::derive(cfg.seed, MIX_STREAM).next_u64())?.sampler();
    let mut partner_rng = SplitMix64::derive(cfg.seed, PARTNER_STREAM);
    let mut log = Vec::with_capacity(cfg.adapt_steps);
    let mut ema: Vec<StoredStats> = Vec::new();

    for step in 0..cfg.adapt_steps {
        let idx = batches.next_batch();
        let originals = target.images(&idx);
        // With η = 0 every copy equals its original, so the copies are skipped.
        let x = if cfg.eta > 0.0 {
            with_specmix(&originals, &mut sampler, &mut partner_rng)?
        } else {
            originals
        };
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let stylized = generator.forward(&tape, xv, true)?;
        let out = forward_source(&bundle, &tape, stylized, BnMode::Train)?;
        let stat = stat_consistency_loss(&out.bn_stats, &stored)?;
        let (per, ph) = if cfg.use_dsc {
            let reference = bundle.phi.features(&tape, xv, false)?.value();
            let per = perceptual_loss(bundle.phi.features(&tape, stylized, false)?, &reference)?;
            (per, phase_consistency_loss(&x, stylized)?)
        } else {
            let zero = tape.constant(Tensor::scalar(0.0));
            (zero, zero)
        };
        let terms = LossTerms {
            stat,
            per,
            ent1: entropy_classifier(out.logits.softmax()?)?,
            ent2: entropy_depth(out.depth_logits)?,
            ph,
        };
        let total = total_loss(&terms, &weights)?;
        let report = LossReport::from_terms(&terms, total);
        if !report.is_finite() {
            return Err(PipelineError::NonFinite {
                stage: "adapt",
                step,
                detail: format!("{report:?}"),
            });
        }
        let grads = tape.backward(total)?;
        for (l, s) in out.bn_stats.iter().enumerate() {
            let (m, v) = (s.mean.value(), s.var.value());
            if ema.len() <= l {
                ema.push(StoredStats {
                    mean: m,
                    var: v,
                    eps: stored[l].eps,
                });
            } else {
                let a = cfg.bn_alpha;
                let e = &mut ema[l];
                e.mean = e.mean.zip_with(&m, |r, b| (1.0 - a) * r + a * b)?;
                e.var = e.var.zip_with(&v, |r, b| (1.0 - a) * r + a * b)?;
            }
        }
        drop(out);
        adam.step_with(&mut generator.params_mut(), &grads, false)?;
        if step % 50 == 0 {
            debug!("adapt step {step}: {report:?}");
        }
        on_step(step, &report);
        log.push(report);
    }
    Ok(AdaptOutcome {
        generator,
        log,
        stylized_ema: ema,
    })
}

pub fn write_adapt_log(rows: &[LossReport], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", LossReport::CSV_HEADER)?;
    for (i, r) in rows.iter().enumerate() {
        writeln!(f, "{}", r.csv_row(i))?;
    }
    f.flush()?;
    Ok(())
}
