use crate::tensor::{Gradients, Result, Tensor, TensorError};

use super::Param;

pub const ADAM_LR: f64 = 1e-4;

/// Bias-corrected Adam. Moments are created lazily on the first step and
/// are shaped like the parameters they track, in the order passed to
/// [`Adam::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(ADAM_LR)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// One update. A missing gradient counts as zero. With `frozen` set
    /// nothing changes, including the step counter.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Option<&Tensor>], frozen: bool) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::Invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(TensorError::ShapeMismatch(
                        p.value.shape().to_vec(),
                        g.shape().to_vec(),
                    ));
                }
            }
        }
        if frozen {
            return Ok(());
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.value.shape())
        {
            return Err(TensorError::Invalid(
                "parameter set changed between Adam steps".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let n = p.value.numel();
            let gd: &[f64] = g.map(|g| g.data()).unwrap_or(&[]);
            let mut md = m.to_vec();
            let mut vd = v.to_vec();
            let mut pd = p.value.to_vec();
            for i in 0..n {
                let gi = gd.get(i).copied().unwrap_or(0.0);
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            let shape = p.value.shape().to_vec();
            *m = Tensor::new(&shape, md)?;
            *v = Tensor::new(&shape, vd)?;
            p.value = Tensor::new(&shape, pd)?;
        }
        Ok(())
    }

    /// Convenience wrapper looking gradients up by parameter name.
    pub fn step_with(&mut self, params: &mut [&mut Param], grads: &Gradients, frozen: bool) -> Result<()> {
        let owned: Vec<Option<Tensor>> = params.iter().map(|p| grads.param(&p.name).cloned()).collect();
        let refs: Vec<Option<&Tensor>> = owned.iter().map(|g| g.as_ref()).collect();
        self.step(params, &refs, frozen)
    }
}
