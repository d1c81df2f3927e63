//! Desk-scale networks: feature extractor F, classifier head H, depth
//! estimator R, perceptual network φ and the generator G.
//!
//! All networks take `[B,3,32,32]` images in `[0,1]`.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, load_generator, read_tensors, save_checkpoint, save_generator, write_tensors,
    CheckpointError, CHECKPOINT_VERSION,
};

use std::collections::HashMap;

use crate::nn::{upsample_nearest, BatchNorm2d, BnMode, Conv2d, Dense, InstanceNorm2d, Param};
use crate::objectives::{LayerStats, StoredStats};
use crate::rng::SplitMix64;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

pub const IMAGE_SIZE: usize = 32;
pub const DEPTH_SIZE: usize = 8;

/// Parameters and normalization layers of one network.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
    fn bn_layers(&self) -> Vec<&BatchNorm2d> {
        Vec::new()
    }
    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        Vec::new()
    }

    /// Every tensor a checkpoint stores: parameters, then running statistics.
    fn state(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for bn in self.bn_layers() {
            out.push((format!("{}.running_mean", bn.name), bn.running_mean.clone()));
            out.push((format!("{}.running_var", bn.name), bn.running_var.clone()));
            out.push((
                format!("{}.num_updates", bn.name),
                Tensor::scalar(bn.num_updates as f64),
            ));
        }
        out
    }

    fn load_state(&mut self, table: &mut HashMap<String, Tensor>) -> std::result::Result<(), CheckpointError> {
        fn take(
            table: &mut HashMap<String, Tensor>,
            name: &str,
            like: &Tensor,
        ) -> std::result::Result<Tensor, CheckpointError> {
            let t = table
                .remove(name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
            if t.shape() != like.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected: like.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            Ok(t)
        }
        for p in self.params_mut() {
            p.value = take(table, &p.name, &p.value)?;
        }
        for bn in self.bn_layers_mut() {
            bn.running_mean = take(table, &format!("{}.running_mean", bn.name), &bn.running_mean)?;
            bn.running_var = take(table, &format!("{}.running_var", bn.name), &bn.running_var)?;
            let n = take(table, &format!("{}.num_updates", bn.name), &Tensor::scalar(0.0))?;
            bn.num_updates = n.item().max(0.0).round() as u64;
        }
        Ok(())
    }

    /// Rounds every stored tensor to single precision, the checkpoint
    /// resolution.
    fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            p.value = p.value.to_f32_precision();
        }
        for bn in self.bn_layers_mut() {
            bn.running_mean = bn.running_mean.to_f32_precision();
            bn.running_var = bn.running_var.to_f32_precision();
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_bn_relu<'t>(
    conv: &Conv2d,
    bn: &BatchNorm2d,
    tape: &'t Tape,
    x: Var<'t>,
    mode: BnMode,
    trainable: bool,
    stats: &mut Vec<LayerStats<'t>>,
    inputs: &mut Vec<Var<'t>>,
) -> Result<Var<'t>> {
    let out = bn.forward(tape, conv.forward(tape, x, trainable)?, mode, trainable)?;
    inputs.push(out.input);
    if let (Some(mean), Some(var)) = (out.batch_mean, out.batch_var) {
        stats.push(LayerStats { mean, var });
    }
    Ok(out.y.relu())
}

/// Three stride-2 conv/BN/relu blocks: 3→32→64→128 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub conv3: Conv2d,
    pub bn3: BatchNorm2d,
}

impl FeatureExtractor {
    pub fn new(rng: &mut SplitMix64) -> Self {
        Self {
            conv1: Conv2d::new("F.conv1", 3, 32, 3, 2, 1, false, rng),
            bn1: BatchNorm2d::new("F.bn1", 32),
            conv2: Conv2d::new("F.conv2", 32, 64, 3, 2, 1, false, rng),
            bn2: BatchNorm2d::new("F.bn2", 64),
            conv3: Conv2d::new("F.conv3", 64, 128, 3, 2, 1, false, rng),
            bn3: BatchNorm2d::new("F.bn3", 128),
        }
    }

    /// Returns the three block outputs `[B,32,16,16]`, `[B,64,8,8]`,
    /// `[B,128,4,4]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        mode: BnMode,
        trainable: bool,
        stats: &mut Vec<LayerStats<'t>>,
        inputs: &mut Vec<Var<'t>>,
    ) -> Result<[Var<'t>; 3]> {
        let b1 = conv_bn_relu(&self.conv1, &self.bn1, tape, x, mode, trainable, stats, inputs)?;
        let b2 = conv_bn_relu(&self.conv2, &self.bn2, tape, b1, mode, trainable, stats, inputs)?;
        let b3 = conv_bn_relu(&self.conv3, &self.bn3, tape, b2, mode, trainable, stats, inputs)?;
        Ok([b1, b2, b3])
    }
}

impl Module for FeatureExtractor {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        p.extend(self.conv3.params());
        p.extend(self.bn3.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        p.extend(self.conv3.params_mut());
        p.extend(self.bn3.params_mut());
        p
    }
    fn bn_layers(&self) -> Vec<&BatchNorm2d> {
        vec![&self.bn1, &self.bn2, &self.bn3]
    }
    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        vec![&mut self.bn1, &mut self.bn2, &mut self.bn3]
    }
}

/// Global average pool followed by a dense layer to two logits
/// (index 1 = live).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub fc: Dense,
}

impl ClassifierHead {
    pub fn new(rng: &mut SplitMix64) -> Self {
        Self {
            fc: Dense::new("H.fc", 128, 2, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, features: Var<'t>, trainable: bool) -> Result<Var<'t>> {
        self.fc.forward(tape, features.mean(&[2, 3])?, trainable)
    }
}

impl Module for ClassifierHead {
    fn params(&self) -> Vec<&Param> {
        self.fc.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.fc.params_mut()
    }
}

/// Depth branch on the second feature block: two conv/BN/relu blocks and a
/// 1×1 projection to `[B,1,8,8]` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthEstimator {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub head: Conv2d,
}

impl DepthEstimator {
    pub fn new(rng: &mut SplitMix64) -> Self {
        Self {
            conv1: Conv2d::new("R.conv1", 64, 32, 3, 1, 1, false, rng),
            bn1: BatchNorm2d::new("R.bn1", 32),
            conv2: Conv2d::new("R.conv2", 32, 16, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new("R.bn2", 16),
            head: Conv2d::new("R.head", 16, 1, 1, 1, 0, true, rng),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        block2: Var<'t>,
        mode: BnMode,
        trainable: bool,
        stats: &mut Vec<LayerStats<'t>>,
        inputs: &mut Vec<Var<'t>>,
    ) -> Result<Var<'t>> {
        let h = conv_bn_relu(&self.conv1, &self.bn1, tape, block2, mode, trainable, stats, inputs)?;
        let h = conv_bn_relu(&self.conv2, &self.bn2, tape, h, mode, trainable, stats, inputs)?;
        self.head.forward(tape, h, trainable)
    }
}

impl Module for DepthEstimator {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        p.extend(self.head.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        p.extend(self.head.params_mut());
        p
    }
    fn bn_layers(&self) -> Vec<&BatchNorm2d> {
        vec![&self.bn1, &self.bn2]
    }
    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        vec![&mut self.bn1, &mut self.bn2]
    }
}

/// Fixed random conv/relu stack standing in for a pretrained perceptual
/// network. Features are read after the second stage (`[B,16,16,16]`).
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualNet {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
}

impl PerceptualNet {
    pub fn new(rng: &mut SplitMix64) -> Self {
        Self {
            conv1: Conv2d::new("phi.conv1", 3, 8, 3, 1, 1, true, rng),
            conv2: Conv2d::new("phi.conv2", 8, 16, 3, 2, 1, true, rng),
            conv3: Conv2d::new("phi.conv3", 16, 32, 3, 2, 1, true, rng),
        }
    }

    pub fn features<'t>(&self, tape: &'t Tape, x: Var<'t>, trainable: bool) -> Result<Var<'t>> {
        let h = self.conv1.forward(tape, x, trainable)?.relu();
        Ok(self.conv2.forward(tape, h, trainable)?.relu())
    }

    /// All three stages.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, trainable: bool) -> Result<Var<'t>> {
        let h = self.features(tape, x, trainable)?;
        Ok(self.conv3.forward(tape, h, trainable)?.relu())
    }
}

impl Module for PerceptualNet {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p.extend(self.conv3.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        p.extend(self.conv3.params_mut());
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv_a: Conv2d,
    pub norm_a: InstanceNorm2d,
    pub conv_b: Conv2d,
    pub norm_b: InstanceNorm2d,
}

impl ResBlock {
    fn new(name: &str, c: usize, rng: &mut SplitMix64) -> Self {
        Self {
            conv_a: Conv2d::new(&format!("{name}.conv_a"), c, c, 3, 1, 1, true, rng),
            norm_a: InstanceNorm2d::new(&format!("{name}.norm_a"), c),
            conv_b: Conv2d::new(&format!("{name}.conv_b"), c, c, 3, 1, 1, true, rng),
            norm_b: InstanceNorm2d::new(&format!("{name}.norm_b"), c),
        }
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, trainable: bool) -> Result<Var<'t>> {
        let h = self.conv_a.forward(tape, x, trainable)?;
        let h = self.norm_a.forward(tape, h, trainable)?.relu();
        let h = self.conv_b.forward(tape, h, trainable)?;
        x.add(self.norm_b.forward(tape, h, trainable)?)
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv_a.params();
        p.extend(self.norm_a.params());
        p.extend(self.conv_b.params());
        p.extend(self.norm_b.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv_a.params_mut();
        p.extend(self.norm_a.params_mut());
        p.extend(self.conv_b.params_mut());
        p.extend(self.norm_b.params_mut());
        p
    }
}

/// Encoder (two stride-2 conv + instance norm), two residual blocks and an
/// upsample/conv decoder. The last decoder conv also sees the input image
/// and its output is added to the input's logit before the final sigmoid,
/// so a freshly built generator is close to the identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub enc1: Conv2d,
    pub enc1_norm: InstanceNorm2d,
    pub enc2: Conv2d,
    pub enc2_norm: InstanceNorm2d,
    pub res: [ResBlock; 2],
    pub dec1: Conv2d,
    pub dec1_norm: InstanceNorm2d,
    pub dec2: Conv2d,
}

const LOGIT_CLAMP: f64 = 1e-3;
const HEAD_INIT_SCALE: f64 = 0.01;

impl Generator {
    pub fn new(rng: &mut SplitMix64) -> Self {
        Self {
            enc1: Conv2d::new("G.enc1", 3, 16, 3, 2, 1, true, rng),
            enc1_norm: InstanceNorm2d::new("G.enc1_norm", 16),
            enc2: Conv2d::new("G.enc2", 16, 32, 3, 2, 1, true, rng),
            enc2_norm: InstanceNorm2d::new("G.enc2_norm", 32),
            res: [ResBlock::new("G.res1", 32, rng), ResBlock::new("G.res2", 32, rng)],
            dec1: Conv2d::new("G.dec1", 32, 16, 3, 1, 1, true, rng),
            dec1_norm: InstanceNorm2d::new("G.dec1_norm", 16),
            dec2: Conv2d::new("G.dec2", 19, 3, 3, 1, 1, true, rng).with_weight_scale(HEAD_INIT_SCALE),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, trainable: bool) -> Result<Var<'t>> {
        check_image_batch(&x.shape())?;
        let h = self.enc1.forward(tape, x, trainable)?;
        let h = self.enc1_norm.forward(tape, h, trainable)?.relu();
        let h = self.enc2.forward(tape, h, trainable)?;
        let mut h = self.enc2_norm.forward(tape, h, trainable)?.relu();
        for block in &self.res {
            h = block.forward(tape, h, trainable)?;
        }
        let h = self.dec1.forward(tape, upsample_nearest(h, 2)?, trainable)?;
        let h = self.dec1_norm.forward(tape, h, trainable)?.relu();
        let h = Var::concat(&[upsample_nearest(h, 2)?, x], 1)?;
        let residual = self.dec2.forward(tape, h, trainable)?;
        let c = x.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
        let logit = c.log().sub(c.neg().add_scalar(1.0).log())?;
        Ok(logit.add(residual)?.sigmoid())
    }

    /// Untaped convenience forward.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.forward(&tape, tape.constant(x.clone()), false)?.value())
    }
}

impl Module for Generator {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.enc1.params();
        p.extend(self.enc1_norm.params());
        p.extend(self.enc2.params());
        p.extend(self.enc2_norm.params());
        for r in &self.res {
            p.extend(r.params());
        }
        p.extend(self.dec1.params());
        p.extend(self.dec1_norm.params());
        p.extend(self.dec2.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.enc1.params_mut();
        p.extend(self.enc1_norm.params_mut());
        p.extend(self.enc2.params_mut());
        p.extend(self.enc2_norm.params_mut());
        for r in &mut self.res {
            p.extend(r.params_mut());
        }
        p.extend(self.dec1.params_mut());
        p.extend(self.dec1_norm.params_mut());
        p.extend(self.dec2.params_mut());
        p
    }
}

fn check_image_batch(shape: &[usize]) -> Result<()> {
    match shape {
        [b, 3, IMAGE_SIZE, IMAGE_SIZE] if *b > 0 => Ok(()),
        _ => Err(TensorError::ShapeMismatch(
            shape.to_vec(),
            vec![0, 3, IMAGE_SIZE, IMAGE_SIZE],
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Net {
    F,
    H,
    R,
    Phi,
    G,
}

impl Net {
    pub const ALL: [Net; 5] = [Net::F, Net::H, Net::R, Net::Phi, Net::G];
}

/// Per-network trainable flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub f: bool,
    pub h: bool,
    pub r: bool,
    pub phi: bool,
    pub g: bool,
}

impl Trainable {
    pub fn get(&self, net: Net) -> bool {
        match net {
            Net::F => self.f,
            Net::H => self.h,
            Net::R => self.r,
            Net::Phi => self.phi,
            Net::G => self.g,
        }
    }

    pub fn set(&mut self, net: Net, value: bool) {
        match net {
            Net::F => self.f = value,
            Net::H => self.h = value,
            Net::R => self.r = value,
            Net::Phi => self.phi = value,
            Net::G => self.g = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub f: FeatureExtractor,
    pub h: ClassifierHead,
    pub r: DepthEstimator,
    pub phi: PerceptualNet,
    pub g: Option<Generator>,
    pub trainable: Trainable,
}

/// Everything one pass through F, H and R produces.
pub struct SourceOutput<'t> {
    pub logits: Var<'t>,
    pub depth_logits: Var<'t>,
    /// Batch moments of every BN layer in registry order; train mode only.
    pub bn_stats: Vec<LayerStats<'t>>,
    /// Input of every BN layer in registry order, both modes.
    pub bn_inputs: Vec<Var<'t>>,
    pub blocks: [Var<'t>; 3],
}

impl<'t> SourceOutput<'t> {
    /// Predicted depth in `[0,1]`.
    pub fn depth(&self) -> Var<'t> {
        self.depth_logits.sigmoid()
    }
}

const PHI_STREAM: u64 = 0x7068_69;
const GENERATOR_STREAM: u64 = 0x47;

/// F, H and R initialized from `seed`; φ seeded and frozen; no generator.
pub fn build_source_bundle(seed: u64) -> ModelBundle {
    let mut rng = SplitMix64::new(seed);
    let f = FeatureExtractor::new(&mut rng);
    let h = ClassifierHead::new(&mut rng);
    let r = DepthEstimator::new(&mut rng);
    let phi = PerceptualNet::new(&mut SplitMix64::derive(seed, PHI_STREAM));
    ModelBundle {
        f,
        h,
        r,
        phi,
        g: None,
        trainable: Trainable {
            f: true,
            h: true,
            r: true,
            phi: false,
            g: false,
        },
    }
}

pub fn build_generator(seed: u64) -> Generator {
    Generator::new(&mut SplitMix64::derive(seed, GENERATOR_STREAM))
}

impl ModelBundle {
    /// Marks the listed networks frozen. Idempotent.
    pub fn freeze(&mut self, nets: &[Net]) -> &mut Self {
        for &n in nets {
            self.trainable.set(n, false);
        }
        self
    }

    pub fn unfreeze(&mut self, nets: &[Net]) -> &mut Self {
        for &n in nets {
            self.trainable.set(n, true);
        }
        self
    }

    /// Adaptation setting: only the generator learns.
    pub fn freeze_source(&mut self) -> &mut Self {
        self.freeze(&[Net::F, Net::H, Net::R, Net::Phi]).unfreeze(&[Net::G])
    }

    pub fn module(&self, net: Net) -> Option<&dyn Module> {
        match net {
            Net::F => Some(&self.f),
            Net::H => Some(&self.h),
            Net::R => Some(&self.r),
            Net::Phi => Some(&self.phi),
            Net::G => self.g.as_ref().map(|g| g as &dyn Module),
        }
    }

    /// BN layers of F then R, in definition order.
    pub fn bn_registry(&self) -> Vec<&BatchNorm2d> {
        let mut v = self.f.bn_layers();
        v.extend(self.r.bn_layers());
        v
    }

    pub fn bn_registry_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut v = self.f.bn_layers_mut();
        v.extend(self.r.bn_layers_mut());
        v
    }

    pub fn stored_stats(&self) -> Vec<StoredStats> {
        self.bn_registry()
            .into_iter()
            .map(|bn| StoredStats {
                mean: bn.running_mean.clone(),
                var: bn.running_var.clone(),
                eps: bn.eps,
            })
            .collect()
    }

    pub fn set_bn_alpha(&mut self, alpha: f64) {
        for bn in self.bn_registry_mut() {
            bn.alpha = alpha;
        }
    }

    /// Applies the running-statistics update from a train-mode pass.
    pub fn update_running(&mut self, stats: &[(Tensor, Tensor)]) -> Result<()> {
        let mut layers = self.bn_registry_mut();
        if layers.len() != stats.len() {
            return Err(TensorError::Invalid(format!(
                "{} statistics for {} BN layers",
                stats.len(),
                layers.len()
            )));
        }
        for (bn, (m, v)) in layers.iter_mut().zip(stats) {
            bn.update_running(m, v)?;
        }
        Ok(())
    }

    /// Checkpoint table of every present network.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        Net::ALL
            .iter()
            .filter_map(|&n| self.module(n))
            .flat_map(|m| m.state())
            .collect()
    }

    pub fn round_to_f32(&mut self) {
        self.f.round_to_f32();
        self.h.round_to_f32();
        self.r.round_to_f32();
        self.phi.round_to_f32();
        if let Some(g) = &mut self.g {
            g.round_to_f32();
        }
    }
}

/// F, H and R on a `[B,3,32,32]` batch. Train mode normalizes with batch
/// moments and reports them without touching the running statistics.
pub fn forward_source<'t>(
    bundle: &ModelBundle,
    tape: &'t Tape,
    x: Var<'t>,
    mode: BnMode,
) -> Result<SourceOutput<'t>> {
    check_image_batch(&x.shape())?;
    let t = bundle.trainable;
    let mut bn_stats = Vec::new();
    let mut bn_inputs = Vec::new();
    let blocks = bundle.f.forward(tape, x, mode, t.f, &mut bn_stats, &mut bn_inputs)?;
    let logits = bundle.h.forward(tape, blocks[2], t.h)?;
    let depth_logits = bundle.r.forward(tape, blocks[1], mode, t.r, &mut bn_stats, &mut bn_inputs)?;
    Ok(SourceOutput {
        logits,
        depth_logits,
        bn_stats,
        bn_inputs,
        blocks,
    })
}
