use crate::rng::SplitMix64;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

use super::functional::conv2d;

/// A named learnable tensor. Names are globally unique within a model
/// bundle (`"F.conv1.weight"`) and double as checkpoint keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Var<'t> {
        tape.param(&self.name, &self.value, trainable)
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::gaussian(shape, 0.0, std, rng.next_u64())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-initialized square-kernel convolution with zero bias.
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut SplitMix64,
    ) -> Self {
        let weight = he_normal(&[c_out, c_in, k, k], c_in * k * k, rng);
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out]))),
            stride,
            pad,
        }
    }

    /// Rescales the initial weights, e.g. to start an output head near zero.
    pub fn with_weight_scale(mut self, s: f64) -> Self {
        self.weight.value = self.weight.value.scale(s);
        self
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, trainable: bool) -> Result<Var<'t>> {
        let w = self.weight.bind(tape, trainable);
        let b = self.bias.as_ref().map(|b| b.bind(tape, trainable));
        conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// `y = x · W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut SplitMix64) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::gaussian(&[d_in, d_out], 0.0, std, rng.next_u64()),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, trainable: bool) -> Result<Var<'t>> {
        let w = self.weight.bind(tape, trainable);
        let b = self.bias.bind(tape, trainable);
        x.matmul(w)?.add(b)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the batch moments.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_ALPHA: f64 = 0.1;

/// Batch normalization over `[B,C,H,W]` with exponential running statistics:
///
/// ```text
/// μ̄ ← (1 − α)·μ̄ + α·μ        σ̄² ← (1 − α)·σ̄² + α·σ²
/// ```
///
/// Batch variance is the biased (divide-by-N) estimate in both the
/// normalization and the running update.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub alpha: f64,
    pub eps: f64,
    pub num_updates: u64,
}

/// Output of [`BatchNorm2d::forward`]. The batch moments are shaped `[C]`
/// and stay differentiable wrt the layer input.
pub struct BnOutput<'t> {
    pub y: Var<'t>,
    pub input: Var<'t>,
    pub batch_mean: Option<Var<'t>>,
    pub batch_var: Option<Var<'t>>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            alpha: BN_ALPHA,
            eps: BN_EPS,
            num_updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.numel()
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        mode: BnMode,
        trainable: bool,
    ) -> Result<BnOutput<'t>> {
        let shape = x.shape();
        let [b, c, h, w] = shape[..] else {
            return Err(TensorError::Invalid(format!(
                "batchnorm expects [B,C,H,W], got {shape:?}"
            )));
        };
        if c != self.channels() {
            return Err(TensorError::ShapeMismatch(shape.clone(), vec![self.channels()]));
        }
        let gamma = self.gamma.bind(tape, trainable).reshape(&[1, c, 1, 1])?;
        let beta = self.beta.bind(tape, trainable).reshape(&[1, c, 1, 1])?;
        match mode {
            BnMode::Train => {
                if b * h * w < 2 {
                    return Err(TensorError::Invalid(format!(
                        "{}: train mode needs at least 2 values per channel",
                        self.name
                    )));
                }
                let mean = x.mean_keepdim(&[0, 2, 3])?;
                let centered = x.sub(mean)?;
                let var = centered.square().mean_keepdim(&[0, 2, 3])?;
                let std = var.add_scalar(self.eps).sqrt();
                let y = centered.div(std)?.mul(gamma)?.add(beta)?;
                Ok(BnOutput {
                    y,
                    input: x,
                    batch_mean: Some(mean.reshape(&[c])?),
                    batch_var: Some(var.reshape(&[c])?),
                })
            }
            BnMode::Eval => {
                if self.num_updates == 0 {
                    return Err(TensorError::Invalid(format!(
                        "{}: eval mode before any running-statistics update",
                        self.name
                    )));
                }
                let mean = tape.constant(self.running_mean.reshape(&[1, c, 1, 1])?);
                let inv_std = tape.constant(
                    self.running_var
                        .map(|v| 1.0 / (v + self.eps).sqrt())
                        .reshape(&[1, c, 1, 1])?,
                );
                let y = x.sub(mean)?.mul(inv_std)?.mul(gamma)?.add(beta)?;
                Ok(BnOutput {
                    y,
                    input: x,
                    batch_mean: None,
                    batch_var: None,
                })
            }
        }
    }

    /// One step of the running-statistics recurrence with detached moments.
    pub fn update_running(&mut self, batch_mean: &Tensor, batch_var: &Tensor) -> Result<()> {
        if batch_mean.shape() != self.running_mean.shape() || batch_var.shape() != self.running_var.shape()
        {
            return Err(TensorError::ShapeMismatch(
                batch_mean.shape().to_vec(),
                self.running_mean.shape().to_vec(),
            ));
        }
        let a = self.alpha;
        self.running_mean = self.running_mean.zip_with(batch_mean, |r, m| (1.0 - a) * r + a * m)?;
        self.running_var = self
            .running_var
            .zip_with(batch_var, |r, v| ((1.0 - a) * r + a * v).max(0.0))?;
        self.num_updates += 1;
        Ok(())
    }

    /// Forward plus, in train mode, the running-statistics update.
    pub fn batchnorm<'t>(
        &mut self,
        tape: &'t Tape,
        x: Var<'t>,
        mode: BnMode,
        trainable: bool,
    ) -> Result<BnOutput<'t>> {
        let out = self.forward(tape, x, mode, trainable)?;
        if let (Some(m), Some(v)) = (out.batch_mean, out.batch_var) {
            self.update_running(&m.value(), &v.value())?;
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Per-sample, per-channel normalization followed by a channel affine.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl InstanceNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            eps: BN_EPS,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, trainable: bool) -> Result<Var<'t>> {
        let c = self.gamma.value.numel();
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != c {
            return Err(TensorError::ShapeMismatch(shape, vec![c]));
        }
        let gamma = self.gamma.bind(tape, trainable).reshape(&[1, c, 1, 1])?;
        let beta = self.beta.bind(tape, trainable).reshape(&[1, c, 1, 1])?;
        let centered = x.sub(x.mean_keepdim(&[2, 3])?)?;
        let std = centered
            .square()
            .mean_keepdim(&[2, 3])?
            .add_scalar(self.eps)
            .sqrt();
        centered.div(std)?.mul(gamma)?.add(beta)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
