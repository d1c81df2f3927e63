use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::metrics::{eer_threshold, error_rates, hter, mmd, roc_auc, roc_curve, Kernel};
use super::{adapt_generator, PipelineError, Result, TrainConfig, Variant};
use crate::data::Samples;
use crate::fmt9;
use crate::models::{forward_source, Generator, ModelBundle};
use crate::nn::BnMode;
use crate::tensor::{Tape, Tensor};

/// Samples per forward pass during evaluation.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainMetrics {
    pub domain: String,
    pub count: usize,
    /// Absent when the domain holds a single class.
    pub auc: Option<f64>,
    pub hter: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub hter: f64,
    pub auc: f64,
    pub eer_threshold: f64,
    pub hter_at_half: f64,
    pub roc: Vec<(f64, f64)>,
    pub per_domain: Vec<DomainMetrics>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "metric,value";

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{}", Self::CSV_HEADER)?;
        writeln!(f, "hter,{}", fmt9(self.hter))?;
        writeln!(f, "auc,{}", fmt9(self.auc))?;
        writeln!(f, "eer_threshold,{}", fmt9(self.eer_threshold))?;
        writeln!(f, "hter_at_0.5,{}", fmt9(self.hter_at_half))?;
        for d in &self.per_domain {
            if let (Some(a), Some(h)) = (d.auc, d.hter) {
                writeln!(f, "{}.auc,{}", d.domain, fmt9(a))?;
                writeln!(f, "{}.hter,{}", d.domain, fmt9(h))?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn write_roc_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "far,tpr")?;
        for (far, tpr) in &self.roc {
            writeln!(f, "{},{}", fmt9(*far), fmt9(*tpr))?;
        }
        f.flush()?;
        Ok(())
    }
}

fn frozen(bundle: &ModelBundle) -> ModelBundle {
    let mut b = bundle.clone();
    b.freeze_source();
    b.freeze(&[crate::models::Net::G]);
    b
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(CHUNK).map(move |s| (s..(s + CHUNK).min(n)).collect())
}

/// Eval-mode pass over `data` in fixed chunks, handing each chunk's output
/// to `visit` in order.
fn stream(
    bundle: &ModelBundle,
    generator: Option<&Generator>,
    data: &Samples,
    mut visit: impl FnMut(&[usize], &crate::models::SourceOutput<'_>) -> Result<()>,
) -> Result<()> {
    let bundle = frozen(bundle);
    for idx in chunks(data.len()) {
        let tape = Tape::new();
        let mut x = tape.constant(data.images(&idx));
        if let Some(g) = generator {
            x = g.forward(&tape, x, false)?;
        }
        let out = forward_source(&bundle, &tape, x, BnMode::Eval)?;
        visit(&idx, &out)?;
    }
    Ok(())
}

/// Softmax live probability of every sample, through `generator` when given.
pub fn score(bundle: &ModelBundle, generator: Option<&Generator>, data: &Samples) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(data.len());
    stream(bundle, generator, data, |_, out| {
        let p = out.logits.softmax()?.value();
        scores.extend(p.data().chunks(2).map(|row| row[1]));
        Ok(())
    })?;
    Ok(scores)
}

/// HTER at the EER threshold of the evaluation scores, AUC and ROC.
pub fn evaluate(bundle: &ModelBundle, generator: Option<&Generator>, data: &Samples) -> Result<EvalReport> {
    let labels = data
        .labels()
        .ok_or_else(|| PipelineError::Invalid("evaluation needs labeled data".into()))?
        .to_vec();
    let scores = score(bundle, generator, data)?;
    let threshold = eer_threshold(&scores, &labels)?;
    let (far, frr) = error_rates(&scores, &labels, threshold)?;
    let (far_half, frr_half) = error_rates(&scores, &labels, 0.5)?;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in data.domains().iter().enumerate() {
        groups.entry(d.as_str()).or_default().push(i);
    }
    let per_domain = groups
        .into_iter()
        .map(|(domain, idx)| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let auc = roc_auc(&s, &l).ok();
            let hter = error_rates(&s, &l, threshold).ok().map(|(a, r)| hter(a, r));
            DomainMetrics {
                domain: domain.to_string(),
                count: idx.len(),
                auc,
                hter,
            }
        })
        .collect();
    Ok(EvalReport {
        hter: hter(far, frr),
        auc: roc_auc(&scores, &labels)?,
        eer_threshold: threshold,
        hter_at_half: hter(far_half, frr_half),
        roc: roc_curve(&scores, &labels)?,
        per_domain,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BnCurvePoint {
    pub layer: String,
    /// Channel average of `|μ_data − μ̄|`.
    pub d_mean: f64,
    /// Channel average of `|σ²_data − σ̄²|`.
    pub d_var: f64,
}

/// Dataset-level moments at every BN input, recomputed by streaming `data`
/// through the frozen model, against the stored running statistics.
/// Labels are not used.
pub fn bn_discrepancy(
    bundle: &ModelBundle,
    data: &Samples,
    generator: Option<&Generator>,
) -> Result<Vec<BnCurvePoint>> {
    let registry = bundle.bn_registry();
    let mut sums: Vec<Vec<f64>> = registry.iter().map(|bn| vec![0.0; bn.channels()]).collect();
    let mut sq: Vec<Vec<f64>> = sums.clone();
    let mut counts = vec![0usize; registry.len()];
    stream(bundle, generator, data, |_, out| {
        for (l, input) in out.bn_inputs.iter().enumerate() {
            let v = input.value();
            let shape = v.shape();
            let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            for n in 0..b {
                for ch in 0..c {
                    let plane = &v.data()[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                    sums[l][ch] += plane.iter().sum::<f64>();
                    sq[l][ch] += plane.iter().map(|x| x * x).sum::<f64>();
                }
            }
            counts[l] += b * hw;
        }
        Ok(())
    })?;
    Ok(registry
        .iter()
        .enumerate()
        .map(|(l, bn)| {
            let n = counts[l] as f64;
            let c = bn.channels();
            let (mut dm, mut dv) = (0.0, 0.0);
            for ch in 0..c {
                let mean = sums[l][ch] / n;
                let var = (sq[l][ch] / n - mean * mean).max(0.0);
                dm += (mean - bn.running_mean.data()[ch]).abs();
                dv += (var - bn.running_var.data()[ch]).abs();
            }
            BnCurvePoint {
                layer: bn.name.clone(),
                d_mean: dm / c as f64,
                d_var: dv / c as f64,
            }
        })
        .collect())
}

pub fn write_bn_curve_csv(points: &[BnCurvePoint], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "layer,d_mean,d_var")?;
    for p in points {
        writeln!(f, "{},{},{}", p.layer, fmt9(p.d_mean), fmt9(p.d_var))?;
    }
    f.flush()?;
    Ok(())
}

fn global_average(v: &Tensor) -> Vec<f64> {
    let shape = v.shape();
    let hw = shape[2] * shape[3];
    v.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect()
}

/// Globally pooled activations of the three feature blocks, one row per
/// sample; widths 32, 64 and 128.
pub fn block_features(
    bundle: &ModelBundle,
    generator: Option<&Generator>,
    data: &Samples,
) -> Result<[Vec<f64>; 3]> {
    let mut out: [Vec<f64>; 3] = Default::default();
    stream(bundle, generator, data, |_, o| {
        for (k, block) in o.blocks.iter().enumerate() {
            out[k].extend(global_average(&block.value()));
        }
        Ok(())
    })?;
    Ok(out)
}

pub const BLOCK_WIDTHS: [usize; 3] = [32, 64, 128];

/// MMD² per feature block between `reference` and `data` (optionally
/// stylized), shallow to deep.
pub fn mmd_curve(
    bundle: &ModelBundle,
    reference: &Samples,
    data: &Samples,
    generator: Option<&Generator>,
    kernel: Kernel,
) -> Result<[f64; 3]> {
    let a = block_features(bundle, None, reference)?;
    let b = block_features(bundle, generator, data)?;
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = mmd(&a[k], &b[k], BLOCK_WIDTHS[k], kernel)?;
    }
    Ok(out)
}

pub fn write_mmd_curve_csv(curve: &[f64], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "block,mmd")?;
    for (k, v) in curve.iter().enumerate() {
        writeln!(f, "{},{}", k + 1, fmt9(*v))?;
    }
    f.flush()?;
    Ok(())
}

/// Writes pooled features of block `block` (1..=3) with header
/// `index,label,domain,f0,..`; unlabeled samples leave `label` empty.
pub fn export_features_csv(
    bundle: &ModelBundle,
    generator: Option<&Generator>,
    data: &Samples,
    block: usize,
    path: &Path,
) -> Result<()> {
    if !(1..=3).contains(&block) {
        return Err(PipelineError::Invalid(format!("block {block} outside 1..=3")));
    }
    let feats = block_features(bundle, generator, data)?;
    let width = BLOCK_WIDTHS[block - 1];
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let names: Vec<String> = (0..width).map(|i| format!("f{i}")).collect();
    writeln!(f, "index,label,domain,{}", names.join(","))?;
    for (i, row) in feats[block - 1].chunks(width).enumerate() {
        let label = data.labels().map(|l| l[i].to_string()).unwrap_or_default();
        let values: Vec<String> = row.iter().map(|v| fmt9(*v)).collect();
        writeln!(f, "{i},{label},{},{}", data.domains()[i], values.join(","))?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub config: &'static str,
    pub hter: f64,
    pub auc: f64,
}

/// Evaluates every requested variant on `target_test` after adapting on
/// `target_train` (labels of the latter are never read).
pub fn ablation_run(
    cfg: &TrainConfig,
    source: &ModelBundle,
    target_train: &Samples,
    target_test: &Samples,
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    let unlabeled = target_train.unlabeled();
    variants
        .iter()
        .map(|&v| {
            let report = match v.configure(cfg) {
                None => evaluate(source, None, target_test)?,
                Some(c) => {
                    let g = adapt_generator(&c, source, &unlabeled)?.generator;
                    evaluate(source, Some(&g), target_test)?
                }
            };
            Ok(AblationRow {
                config: v.label(),
                hter: report.hter,
                auc: report.auc,
            })
        })
        .collect()
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "config,hter,auc")?;
    for r in rows {
        writeln!(f, "{},{},{}", r.config, fmt9(r.hter), fmt9(r.auc))?;
    }
    f.flush()?;
    Ok(())
}
