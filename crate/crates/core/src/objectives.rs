//! Adaptation objectives for the generator and the supervised losses of
//! source training.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError, Var};

/// Guard inside every logarithm of the entropy terms.
pub const LOG_EPS: f64 = 1e-8;

/// Batch moments of one normalization layer, shaped `[C]`.
#[derive(Debug, Clone, Copy)]
pub struct LayerStats<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
}

/// Stored running statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub eps: f64,
}

/// `(1/L)·Σ_l ‖μ^l − μ̄^l‖₂ + ‖σ^l − σ̄^l‖₂` with `σ = √(σ² + ε)` on both
/// sides. Differentiable wrt the batch moments.
pub fn stat_consistency_loss<'t>(batch: &[LayerStats<'t>], stored: &[StoredStats]) -> Result<Var<'t>> {
    if batch.len() != stored.len() || batch.is_empty() {
        return Err(TensorError::Invalid(format!(
            "{} batch-statistic layers against {} stored layers",
            batch.len(),
            stored.len()
        )));
    }
    let tape = batch[0].mean.tape();
    let mut total: Option<Var<'t>> = None;
    for (b, s) in batch.iter().zip(stored) {
        let mu = b.mean.sub(tape.constant(s.mean.clone()))?.norm2();
        let std = b.var.add_scalar(s.eps).sqrt();
        let stored_std = tape.constant(s.var.map(|v| (v + s.eps).sqrt()));
        let sigma = std.sub(stored_std)?.norm2();
        let layer = mu.add(sigma)?;
        total = Some(match total {
            Some(t) => t.add(layer)?,
            None => layer,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / batch.len() as f64))
}

/// Mean squared difference between perceptual features of the generated and
/// the original images; the reference side carries no gradient.
pub fn perceptual_loss<'t>(feat_gen: Var<'t>, feat_tgt: &Tensor) -> Result<Var<'t>> {
    if feat_gen.shape() != feat_tgt.shape() {
        return Err(TensorError::ShapeMismatch(feat_gen.shape(), feat_tgt.shape().to_vec()));
    }
    let target = feat_gen.tape().constant(feat_tgt.clone());
    Ok(feat_gen.sub(target)?.square().mean_all())
}

/// Batch mean of `Σ_c −p_c·log(p_c + ε)` over probability rows `[B, C]`.
pub fn entropy_classifier(p: Var<'_>) -> Result<Var<'_>> {
    let shape = p.shape();
    if shape.len() != 2 {
        return Err(TensorError::Invalid(format!("expected [B, C] probabilities, got {shape:?}")));
    }
    let b = shape[0] as f64;
    Ok(p.mul(p.add_scalar(LOG_EPS).log())?.sum_all().scale(-1.0 / b))
}

/// Per-pixel binary entropy of `sigmoid(logits)`, averaged over all pixels.
pub fn entropy_depth(depth_logits: Var<'_>) -> Result<Var<'_>> {
    let r = depth_logits.sigmoid();
    let q = r.neg().add_scalar(1.0);
    let h = r
        .mul(r.add_scalar(LOG_EPS).log())?
        .add(q.mul(q.add_scalar(LOG_EPS).log())?)?;
    Ok(h.mean_all().neg())
}

/// Softmax cross-entropy with integer labels, averaged over the batch.
pub fn cross_entropy_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    let [b, c] = shape[..] else {
        return Err(TensorError::Invalid(format!("expected [B, C] logits, got {shape:?}")));
    };
    if labels.len() != b {
        return Err(TensorError::Invalid(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut onehot = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(TensorError::Invalid(format!("label {y} with {c} classes")));
        }
        onehot[i * c + y] = 1.0;
    }
    let onehot = logits.tape().constant(Tensor::new(&[b, c], onehot)?);
    Ok(logits.log_softmax()?.mul(onehot)?.sum_all().scale(-1.0 / b as f64))
}

/// Mean squared error over all pixels.
pub fn depth_regression_loss<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch(pred.shape(), target.shape().to_vec()));
    }
    let target = pred.tape().constant(target.clone());
    Ok(pred.sub(target)?.square().mean_all())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ent: f64,
    pub lambda_ph: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ent: 0.01,
            lambda_ph: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ent >= 0.0 && self.lambda_ph >= 0.0) {
            return Err(TensorError::Invalid(format!("negative loss weight in {self:?}")));
        }
        Ok(())
    }
}

/// Taped components of one adaptation step.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'t> {
    pub stat: Var<'t>,
    pub per: Var<'t>,
    pub ent1: Var<'t>,
    pub ent2: Var<'t>,
    pub ph: Var<'t>,
}

/// `stat + per + λ_ent·(ent1 + ent2) + λ_ph·ph`.
pub fn total_loss<'t>(terms: &LossTerms<'t>, weights: &LossWeights) -> Result<Var<'t>> {
    let ent = terms.ent1.add(terms.ent2)?.scale(weights.lambda_ent);
    terms
        .stat
        .add(terms.per)?
        .add(ent)?
        .add(terms.ph.scale(weights.lambda_ph))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stat: f64,
    pub per: f64,
    pub ent1: f64,
    pub ent2: f64,
    pub ph: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,stat,per,ent1,ent2,ph,total";

    pub fn from_components(stat: f64, per: f64, ent1: f64, ent2: f64, ph: f64, weights: &LossWeights) -> Self {
        Self {
            stat,
            per,
            ent1,
            ent2,
            ph,
            total: stat + per + weights.lambda_ent * (ent1 + ent2) + weights.lambda_ph * ph,
        }
    }

    pub fn from_terms(terms: &LossTerms<'_>, total: Var<'_>) -> Self {
        Self {
            stat: terms.stat.value().item(),
            per: terms.per.value().item(),
            ent1: terms.ent1.value().item(),
            ent2: terms.ent2.value().item(),
            ph: terms.ph.value().item(),
            total: total.value().item(),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.stat, self.per, self.ent1, self.ent2, self.ph, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn csv_row(&self, step: usize) -> String {
        let f = crate::fmt9;
        format!(
            "{step},{},{},{},{},{},{}",
            f(self.stat),
            f(self.per),
            f(self.ent1),
            f(self.ent2),
            f(self.ph),
            f(self.total)
        )
    }
}
