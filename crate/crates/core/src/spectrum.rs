//! Per-channel 2-D Fourier analysis of images, amplitude/phase
//! decomposition, amplitude-spectrum mixup and the phase-consistency loss.
//!
//! Forward transform convention:
//!
//! ```text
//! F(u, v) = Σ_h Σ_w x(h, w) · exp(−j·2π·(h·u/H + w·v/W))
//! ```
//!
//! The untaped transforms here are used for augmentation and analysis; the
//! phase loss uses the taped [`dft2_re`] / [`dft2_im`] so gradients reach the
//! generator.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::rng::SplitMix64;
use crate::tensor::kernels::gemm;
use crate::tensor::{Result, Tensor, TensorError, Var};

/// Bins whose magnitude falls below this are skipped by the phase loss and
/// treated as phase-less by the phase-preservation checks.
pub const PHASE_EPS: f64 = 1e-8;

/// Real and imaginary planes of a `[C,H,W]` image's spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub re: Tensor,
    pub im: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmpPhase {
    pub amp: Tensor,
    pub phase: Tensor,
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        _ => Err(TensorError::Invalid(format!(
            "expected an image [C,H,W] or [H,W], got {:?}",
            t.shape()
        ))),
    }
}

fn fft_1d_strided(buf: &mut [Complex<f64>], len: usize, count: usize, stride: usize, step: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(len)
    } else {
        planner.plan_fft_forward(len)
    };
    let mut line = vec![Complex::new(0.0, 0.0); len];
    for k in 0..count {
        let base = k * step;
        for i in 0..len {
            line[i] = buf[base + i * stride];
        }
        fft.process(&mut line);
        for i in 0..len {
            buf[base + i * stride] = line[i];
        }
    }
}

fn transform_plane(plane: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    if h.is_power_of_two() && w.is_power_of_two() {
        fft_1d_strided(plane, w, h, 1, w, inverse);
        fft_1d_strided(plane, h, w, w, 1, inverse);
    } else {
        let out = naive_plane(plane, h, w, inverse);
        plane.copy_from_slice(&out);
    }
}

/// Direct double sum over one `[H,W]` plane (no normalization).
fn naive_plane(plane: &[Complex<f64>], h: usize, w: usize, inverse: bool) -> Vec<Complex<f64>> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = vec![Complex::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    // Reduce the index product first to keep the angle small.
                    let theta = 2.0 * PI * (((y * u) % h) as f64 / h as f64 + ((x * v) % w) as f64 / w as f64);
                    acc += plane[y * w + x] * Complex::from_polar(1.0, sign * theta);
                }
            }
            out[u * w + v] = acc;
        }
    }
    out
}

fn to_spectrum(buf: Vec<Complex<f64>>, shape: &[usize]) -> Spectrum {
    let re = buf.iter().map(|z| z.re).collect();
    let im = buf.iter().map(|z| z.im).collect();
    Spectrum {
        re: Tensor::from_parts(shape.to_vec(), re),
        im: Tensor::from_parts(shape.to_vec(), im),
    }
}

/// Forward 2-D DFT of every channel independently. Uses a fast transform
/// when both sides are powers of two and the direct sum otherwise.
pub fn dft2d(image: &Tensor) -> Result<Spectrum> {
    let (c, h, w) = chw(image)?;
    let mut buf: Vec<Complex<f64>> = image.data().iter().map(|&x| Complex::new(x, 0.0)).collect();
    for plane in buf.chunks_mut(h * w).take(c) {
        transform_plane(plane, h, w, false);
    }
    Ok(to_spectrum(buf, image.shape()))
}

/// Reference transform by direct summation, whatever the size.
pub fn dft2d_naive(image: &Tensor) -> Result<Spectrum> {
    let (_, h, w) = chw(image)?;
    let buf: Vec<Complex<f64>> = image.data().iter().map(|&x| Complex::new(x, 0.0)).collect();
    let out: Vec<Complex<f64>> = buf
        .chunks(h * w)
        .flat_map(|plane| naive_plane(plane, h, w, false))
        .collect();
    Ok(to_spectrum(out, image.shape()))
}

fn inverse_complex(spec: &Spectrum) -> Result<(Vec<Complex<f64>>, usize, usize)> {
    if spec.re.shape() != spec.im.shape() {
        return Err(TensorError::ShapeMismatch(
            spec.re.shape().to_vec(),
            spec.im.shape().to_vec(),
        ));
    }
    let (_, h, w) = chw(&spec.re)?;
    let mut buf: Vec<Complex<f64>> = spec
        .re
        .data()
        .iter()
        .zip(spec.im.data())
        .map(|(&r, &i)| Complex::new(r, i))
        .collect();
    let norm = 1.0 / (h * w) as f64;
    for plane in buf.chunks_mut(h * w) {
        transform_plane(plane, h, w, true);
        plane.iter_mut().for_each(|z| *z *= norm);
    }
    Ok((buf, h, w))
}

/// Inverse transform; the imaginary residue is dropped.
pub fn idft2d(spec: &Spectrum) -> Result<Tensor> {
    let (buf, _, _) = inverse_complex(spec)?;
    Ok(Tensor::from_parts(
        spec.re.shape().to_vec(),
        buf.iter().map(|z| z.re).collect(),
    ))
}

/// Inverse transform returning both parts, for residue checks.
pub fn idft2d_complex(spec: &Spectrum) -> Result<Spectrum> {
    let (buf, _, _) = inverse_complex(spec)?;
    Ok(to_spectrum(buf, spec.re.shape()))
}

/// `A = √(R² + I²)`, `P = atan2(I, R)` ∈ (−π, π].
pub fn amp_phase(spec: &Spectrum) -> AmpPhase {
    let amp = spec
        .re
        .zip_with(&spec.im, |r, i| r.hypot(i))
        .expect("spectrum parts share a shape");
    let phase = spec
        .re
        .zip_with(&spec.im, |r, i| {
            let p = i.atan2(r);
            // atan2(-0.0, -1) = -π; fold onto the half-open interval.
            if p <= -PI {
                PI
            } else {
                p
            }
        })
        .expect("spectrum parts share a shape");
    AmpPhase { amp, phase }
}

/// `R = A·cos P`, `I = A·sin P`, the exact inverse of [`amp_phase`].
pub fn reconstruct(amp: &Tensor, phase: &Tensor) -> Result<Spectrum> {
    Ok(Spectrum {
        re: amp.zip_with(phase, |a, p| a * p.cos())?,
        im: amp.zip_with(phase, |a, p| a * p.sin())?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecMixConfig {
    /// Mixing ratios are drawn from `U[0, eta)`.
    pub eta: f64,
    pub seed: u64,
}

impl SpecMixConfig {
    pub fn new(eta: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(TensorError::Invalid(format!("eta {eta} outside [0, 1]")));
        }
        Ok(Self { eta, seed })
    }

    pub fn sampler(&self) -> LambdaSampler {
        LambdaSampler {
            eta: self.eta,
            rng: SplitMix64::new(self.seed),
        }
    }
}

/// Seeded stream of mixing ratios, one per image.
#[derive(Debug, Clone)]
pub struct LambdaSampler {
    eta: f64,
    rng: SplitMix64,
}

impl LambdaSampler {
    pub fn sample_lambda(&mut self) -> f64 {
        self.eta * self.rng.next_f64()
    }
}

fn check_mix_inputs(x: &Tensor, x_ref: &Tensor) -> Result<()> {
    if x.shape() != x_ref.shape() {
        return Err(TensorError::ShapeMismatch(x.shape().to_vec(), x_ref.shape().to_vec()));
    }
    if let Some(v) = x
        .data()
        .iter()
        .chain(x_ref.data())
        .find(|v| !(0.0..=1.0).contains(*v))
    {
        return Err(TensorError::Invalid(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Amplitude mixup before clamping: `Â = (1−λ)·A(x) + λ·A(x_ref)` combined
/// with the phase of `x`.
pub fn specmix_unclamped(x: &Tensor, x_ref: &Tensor, lambda: f64) -> Result<Tensor> {
    check_mix_inputs(x, x_ref)?;
    let AmpPhase { amp, phase } = amp_phase(&dft2d(x)?);
    let ref_amp = amp_phase(&dft2d(x_ref)?).amp;
    let mixed = amp.zip_with(&ref_amp, |a, b| (1.0 - lambda) * a + lambda * b)?;
    idft2d(&reconstruct(&mixed, &phase)?)
}

/// SpecMix of one image, clamped back into the displayable range.
pub fn specmix(x: &Tensor, x_ref: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok(specmix_unclamped(x, x_ref, lambda)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Cosine and sine tables `cos(2π·u·n/N)`, `sin(2π·u·n/N)` as `[N,N]`.
fn trig_tables(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut cos = vec![0.0; n * n];
    let mut sin = vec![0.0; n * n];
    for u in 0..n {
        for k in 0..n {
            let theta = 2.0 * PI * ((u * k) % n) as f64 / n as f64;
            cos[u * n + k] = theta.cos();
            sin[u * n + k] = theta.sin();
        }
    }
    (cos, sin)
}

/// `out = Σ_i sign_i · L_i · X · R_i` for every `[H,W]` plane of `x`.
fn sandwich(x: &[f64], h: usize, w: usize, terms: &[(f64, &[f64], &[f64])]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut tmp = vec![0.0; h * w];
    let mut prod = vec![0.0; h * w];
    for (plane, dst) in x.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for &(sign, left, right) in terms {
            gemm(h, h, w, left, false, plane, false, &mut tmp, false);
            gemm(h, w, w, &tmp, false, right, false, &mut prod, false);
            dst.iter_mut().zip(&prod).for_each(|(d, p)| *d += sign * p);
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Part {
    Re,
    Im,
}

fn dft2_part(x: Var<'_>, part: Part) -> Result<Var<'_>> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(TensorError::Invalid(format!("dft2 needs [..., H, W], got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let (ch, sh) = trig_tables(h);
    let (cw, sw) = trig_tables(w);
    // The transform matrices are symmetric, so each part is self-adjoint
    // in structure and the backward rule reuses the same sandwich.
    let apply = move |data: &[f64]| match part {
        Part::Re => sandwich(data, h, w, &[(1.0, &ch, &cw), (-1.0, &sh, &sw)]),
        Part::Im => sandwich(data, h, w, &[(-1.0, &sh, &cw), (-1.0, &ch, &sw)]),
    };
    let y = Tensor::from_parts(shape.clone(), apply(x.value().data()));
    let name = match part {
        Part::Re => "dft2_re",
        Part::Im => "dft2_im",
    };
    Ok(x.tape().record(name, &[x], y, move |g, _| {
        vec![Some(Tensor::from_parts(shape.clone(), apply(g.data())))]
    }))
}

/// Real part of the 2-D DFT over the last two axes, taped.
pub fn dft2_re(x: Var<'_>) -> Result<Var<'_>> {
    dft2_part(x, Part::Re)
}

/// Imaginary part of the 2-D DFT over the last two axes, taped.
pub fn dft2_im(x: Var<'_>) -> Result<Var<'_>> {
    dft2_part(x, Part::Im)
}

/// Negative sum of per-bin cosine similarities between the spectra of the
/// reference `x_t` and the generated `x_gen`, each bin read as a 2-vector
/// (re, im). Bins where either magnitude is below [`PHASE_EPS`] contribute
/// nothing. Inputs are `[C,H,W]` or `[B,C,H,W]`; batches are averaged.
pub fn phase_consistency_loss<'t>(x_t: &Tensor, x_gen: Var<'t>) -> Result<Var<'t>> {
    let shape = x_gen.shape();
    if x_t.shape() != shape.as_slice() {
        return Err(TensorError::ShapeMismatch(x_t.shape().to_vec(), shape));
    }
    let batch = if shape.len() == 4 { shape[0] } else { 1 };
    let tape = x_gen.tape();
    let reference = tape.constant(x_t.clone());
    let (rt, it) = (dft2_re(reference)?.value(), dft2_im(reference)?.value());
    let rs = dft2_re(x_gen)?;
    let is = dft2_im(x_gen)?;
    let (rs_v, is_v) = (rs.value(), is.value());
    // Constant per-bin weight 1/|F(x_t)|, zero where either side is degenerate.
    let weight: Vec<f64> = (0..rt.numel())
        .map(|i| {
            let nt = rt.data()[i].hypot(it.data()[i]);
            let ns = rs_v.data()[i].hypot(is_v.data()[i]);
            if nt < PHASE_EPS || ns < PHASE_EPS {
                0.0
            } else {
                1.0 / nt
            }
        })
        .collect();
    let weight = tape.constant(Tensor::from_parts(shape.clone(), weight));
    let dot = rs
        .mul(tape.constant(rt))?
        .add(is.mul(tape.constant(it))?)?;
    let norm_s = rs.square().add(is.square())?.sqrt();
    let cosine = dot.mul(weight)?.div(norm_s)?;
    Ok(cosine.sum_all().scale(-1.0 / batch as f64))
}
