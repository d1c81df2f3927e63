use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;
use crate::spectrum::dft2d_naive;
use crate::tensor::Tensor;

const SIZE: usize = 32;
const DEPTH: usize = 8;
const AMP_LO: f64 = 0.05;
const AMP_HI: f64 = 0.1;
pub const BANDING_FREQ: f64 = 0.375;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Live,
    Spoof,
}

impl Class {
    pub fn label(self) -> u8 {
        match self {
            Class::Live => 1,
            Class::Spoof => 0,
        }
    }
}

/// Capture style of a domain: `clamp(gain_c · blur(x) + offset + noise)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Style {
    pub gain: [f64; 3],
    pub offset: f64,
    #[serde(default)]
    pub blur_radius: usize,
    pub noise_std: f64,
    /// Upper bound of the per-image amplitude of vertical banding at
    /// [`BANDING_FREQ`] cycles/px; the phase is random per image.
    #[serde(default)]
    pub pattern: f64,
}

impl Style {
    pub fn source() -> Self {
        Self {
            gain: [1.0, 1.0, 1.0],
            offset: 0.0,
            blur_radius: 0,
            noise_std: 0.01,
            pattern: 0.0,
        }
    }

    pub fn target() -> Self {
        Self {
            gain: [0.75, 0.9, 1.2],
            offset: 0.2,
            blur_radius: 0,
            noise_std: 0.01,
            pattern: 0.15,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !self.gain.iter().all(|g| g.is_finite() && *g > 0.0) {
            return Err(format!("gains must be positive, got {:?}", self.gain));
        }
        if !self.offset.is_finite() || self.offset.abs() > 1.0 {
            return Err(format!("offset {} outside [-1, 1]", self.offset));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(format!("noise_std {} must be nonnegative", self.noise_std));
        }
        if !(self.pattern.is_finite() && self.pattern.abs() <= 0.5) {
            return Err(format!("pattern amplitude {} outside [-0.5, 0.5]", self.pattern));
        }
        if self.blur_radius > 4 {
            return Err(format!("blur_radius {} exceeds 4", self.blur_radius));
        }
        Ok(())
    }

    fn apply(&self, planes: &mut [f64], rng: &mut SplitMix64) {
        if self.blur_radius > 0 {
            for plane in planes.chunks_mut(SIZE * SIZE) {
                box_blur(plane, self.blur_radius);
            }
        }
        let amp = self.pattern * rng.next_f64();
        let phase = rng.uniform(0.0, 2.0 * PI);
        for (c, plane) in planes.chunks_mut(SIZE * SIZE).enumerate() {
            for (i, v) in plane.iter_mut().enumerate() {
                let band = amp * (2.0 * PI * BANDING_FREQ * (i % SIZE) as f64 + phase).sin();
                let noisy = self.gain[c] * *v + self.offset + band + self.noise_std * rng.normal();
                *v = noisy.clamp(0.0, 1.0);
            }
        }
    }
}

/// Separable box blur with edge clamping.
fn box_blur(plane: &mut [f64], radius: usize) {
    let r = radius as isize;
    let n = SIZE as isize;
    let norm = 1.0 / (2 * r + 1) as f64;
    let at = |i: isize| i.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0; SIZE * SIZE];
    for y in 0..SIZE {
        for x in 0..n {
            tmp[y * SIZE + x as usize] = (-r..=r).map(|d| plane[y * SIZE + at(x + d)]).sum::<f64>() * norm;
        }
    }
    for y in 0..n {
        for x in 0..SIZE {
            plane[y as usize * SIZE + x] = (-r..=r).map(|d| tmp[at(y + d) * SIZE + x]).sum::<f64>() * norm;
        }
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Face {
    bg: [f64; 3],
    grad: (f64, f64),
    center: (f64, f64),
    radii: (f64, f64),
    skin: [f64; 3],
}

impl Face {
    fn draw(rng: &mut SplitMix64) -> Self {
        let bg = [rng.uniform(0.25, 0.45), rng.uniform(0.25, 0.45), rng.uniform(0.25, 0.45)];
        let grad = (rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1));
        let center = (16.0 + rng.uniform(-3.0, 3.0), 16.0 + rng.uniform(-3.0, 3.0));
        let rx = rng.uniform(9.0, 12.0);
        let radii = (rx, rx * rng.uniform(1.0, 1.2));
        let skin = [rng.uniform(0.6, 0.8), rng.uniform(0.45, 0.6), rng.uniform(0.35, 0.5)];
        Self {
            bg,
            grad,
            center,
            radii,
            skin,
        }
    }

    /// Squared normalized radius at a point.
    fn r2(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.center.0) / self.radii.0;
        let dy = (y - self.center.1) / self.radii.1;
        dx * dx + dy * dy
    }
}

/// Renders one `[3,32,32]` image and its `[1,8,8]` depth target.
///
/// Both classes share the face drawn from `seed`; a spoof adds a
/// high-frequency grating over the whole frame and has zero depth.
pub fn render_sample(class: Class, style: &Style, seed: u64) -> (Tensor, Tensor) {
    let face = Face::draw(&mut SplitMix64::derive(seed, 0));
    let mut planes = vec![0.0; 3 * SIZE * SIZE];
    for y in 0..SIZE {
        for x in 0..SIZE {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let r2 = face.r2(px, py);
            let mask = smoothstep(1.0, 0.85, r2.sqrt());
            let dome = (1.0 - r2).max(0.0).sqrt();
            let ramp = face.grad.0 * (px / SIZE as f64 - 0.5) + face.grad.1 * (py / SIZE as f64 - 0.5);
            for c in 0..3 {
                let skin = face.skin[c] * (0.65 + 0.35 * dome);
                let bg = face.bg[c] + ramp;
                planes[c * SIZE * SIZE + y * SIZE + x] = mask * skin + (1.0 - mask) * bg;
            }
        }
    }
    if class == Class::Spoof {
        let mut rng = SplitMix64::derive(seed, 1);
        let amp = rng.uniform(AMP_LO, AMP_HI);
        let freq = rng.uniform(0.3, 0.42);
        let theta = rng.uniform(0.0, PI);
        let phase = rng.uniform(0.0, 2.0 * PI);
        let (kx, ky) = (2.0 * PI * freq * theta.cos(), 2.0 * PI * freq * theta.sin());
        for y in 0..SIZE {
            for x in 0..SIZE {
                let g = amp * (kx * x as f64 + ky * y as f64 + phase).sin();
                for c in 0..3 {
                    planes[c * SIZE * SIZE + y * SIZE + x] += g;
                }
            }
        }
    }
    style.apply(&mut planes, &mut SplitMix64::derive(seed, 2));

    let scale = SIZE as f64 / DEPTH as f64;
    let mut depth = vec![0.0; DEPTH * DEPTH];
    if class == Class::Live {
        for i in 0..DEPTH {
            for j in 0..DEPTH {
                let r2 = face.r2((j as f64 + 0.5) * scale, (i as f64 + 0.5) * scale);
                depth[i * DEPTH + j] = (1.0 - r2).max(0.0).sqrt();
            }
        }
        let max = depth.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            depth.iter_mut().for_each(|d| *d /= max);
        }
    }
    (
        Tensor::new(&[3, SIZE, SIZE], planes).expect("image"),
        Tensor::new(&[1, DEPTH, DEPTH], depth).expect("depth"),
    )
}

/// Spectral energy at frequency radius above `H/4`, via the direct DFT.
pub fn high_frequency_energy(image: &Tensor) -> f64 {
    let s = dft2d_naive(image).expect("image tensor");
    let shape = image.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let cutoff = h as f64 / 4.0;
    let mut energy = 0.0;
    for (i, (re, im)) in s.re.data().iter().zip(s.im.data()).enumerate() {
        let u = (i / w) % h;
        let v = i % w;
        let fu = u.min(h - u) as f64;
        let fv = v.min(w - v) as f64;
        if (fu * fu + fv * fv).sqrt() > cutoff {
            energy += re * re + im * im;
        }
    }
    energy
}
