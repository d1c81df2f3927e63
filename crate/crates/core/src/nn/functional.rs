//! Taped convolution, pooling and resampling kernels.

use crate::tensor::kernels::{col2im_from, gemm, im2col_into, recycle, scratch, ConvGeom};
use crate::tensor::{Result, Tensor, TensorError, Var};

/// Column-matrix size, in values, that a convolution works on at once.
const COLUMN_BUDGET: usize = 1 << 18;

fn dims4(x: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(TensorError::Invalid(format!(
            "{what} expects [B,C,H,W], got {:?}",
            x.shape()
        ))),
    }
}

/// 2-D cross-correlation. `weight` is `[C_out, C_in, kh, kw]`, `bias` is
/// `[C_out]`.
pub fn conv2d<'t>(
    x: Var<'t>,
    weight: Var<'t>,
    bias: Option<Var<'t>>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t>> {
    let xv = x.value();
    let wv = weight.value();
    let [b, c, h, w] = dims4(&xv, "conv2d")?;
    let [co, ci, kh, kw] = dims4(&wv, "conv2d weight")?;
    if ci != c {
        return Err(TensorError::ShapeMismatch(xv.shape().to_vec(), wv.shape().to_vec()));
    }
    let bv = bias.map(|v| v.value());
    if let Some(bt) = &bv {
        if bt.shape() != [co] {
            return Err(TensorError::ShapeMismatch(bt.shape().to_vec(), vec![co]));
        }
    }
    let g = ConvGeom::new(c, h, w, kh, kw, stride, pad)?;
    let (p, n) = (g.patch(), g.out_pixels());
    // Samples per column matrix, keeping it around 2 MB.
    let per_chunk = (COLUMN_BUDGET / (p * n)).clamp(1, b);
    let chunks: Vec<(usize, usize)> = (0..b).step_by(per_chunk).map(|s| (s, (s + per_chunk).min(b))).collect();
    // Columns of samples s0..s1 side by side: [p, (s1−s0)·n].
    let chunk_cols = move |xd: &[f64], (s0, s1): (usize, usize)| {
        let width = (s1 - s0) * n;
        let mut cols = scratch(p * width);
        for s in s0..s1 {
            im2col_into(&xd[s * c * h * w..(s + 1) * c * h * w], &g, &mut cols, width, (s - s0) * n);
        }
        cols
    };
    let mut out = vec![0.0; b * co * n];
    for &(s0, s1) in &chunks {
        let width = (s1 - s0) * n;
        let mut prod = scratch(co * width);
        let cols = chunk_cols(xv.data(), (s0, s1));
        gemm(co, p, width, wv.data(), false, &cols, false, &mut prod, false);
        recycle(cols);
        for s in s0..s1 {
            for o in 0..co {
                let bias = bv.as_ref().map_or(0.0, |bt| bt.data()[o]);
                let src = &prod[o * width + (s - s0) * n..o * width + (s - s0 + 1) * n];
                let dst = &mut out[(s * co + o) * n..(s * co + o + 1) * n];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + bias;
                }
            }
        }
        recycle(prod);
    }
    let y = Tensor::from_parts(vec![b, co, g.ho, g.wo], out);
    let mut parents = vec![x, weight];
    parents.extend(bias);
    Ok(x.tape().record("conv2d", &parents, y, move |grad, needs| {
        let gd = grad.data();
        let mut gx = needs[0].then(|| vec![0.0; b * c * h * w]);
        let mut gw = needs[1].then(|| vec![0.0; co * p]);
        for &(s0, s1) in &chunks {
            let width = (s1 - s0) * n;
            // Gradient of this chunk as [co, width].
            let mut gt = scratch(co * width);
            for s in s0..s1 {
                for o in 0..co {
                    gt[o * width + (s - s0) * n..o * width + (s - s0 + 1) * n]
                        .copy_from_slice(&gd[(s * co + o) * n..(s * co + o + 1) * n]);
                }
            }
            if let Some(gx) = gx.as_mut() {
                let mut cols = scratch(p * width);
                gemm(p, co, width, wv.data(), true, &gt, false, &mut cols, false);
                for s in s0..s1 {
                    col2im_from(&cols, &g, &mut gx[s * c * h * w..(s + 1) * c * h * w], width, (s - s0) * n);
                }
                recycle(cols);
            }
            if let Some(gw) = gw.as_mut() {
                let cols = chunk_cols(xv.data(), (s0, s1));
                gemm(co, width, p, &gt, false, &cols, true, gw, true);
                recycle(cols);
            }
            recycle(gt);
        }
        let mut result = vec![
            gx.map(|v| Tensor::from_parts(vec![b, c, h, w], v)),
            gw.map(|v| Tensor::from_parts(vec![co, ci, kh, kw], v)),
        ];
        if needs.len() > 2 {
            let gb = needs[2].then(|| {
                let mut gb = vec![0.0; co];
                for (i, plane) in gd.chunks(n).enumerate() {
                    gb[i % co] += plane.iter().sum::<f64>();
                }
                Tensor::from_parts(vec![co], gb)
            });
            result.push(gb);
        }
        result
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Unpadded pooling with a square window.
pub fn pool2d<'t>(x: Var<'t>, kind: PoolKind, k: usize, stride: usize) -> Result<Var<'t>> {
    let xv = x.value();
    let [b, c, h, w] = dims4(&xv, "pool2d")?;
    if k == 0 || stride == 0 || k > h || k > w {
        return Err(TensorError::Invalid(format!(
            "pool window {k} (stride {stride}) does not fit {h}x{w}"
        )));
    }
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let planes = b * c;
    let mut out = vec![0.0; planes * ho * wo];
    let mut argmax = vec![0usize; if kind == PoolKind::Max { out.len() } else { 0 }];
    let d = xv.data();
    for pl in 0..planes {
        let src = &d[pl * h * w..(pl + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let o = pl * ho * wo + i * wo + j;
                match kind {
                    PoolKind::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for di in 0..k {
                            for dj in 0..k {
                                let idx = (i * stride + di) * w + j * stride + dj;
                                if src[idx] > best {
                                    best = src[idx];
                                    at = idx;
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = pl * h * w + at;
                    }
                    PoolKind::Avg => {
                        let mut sum = 0.0;
                        for di in 0..k {
                            for dj in 0..k {
                                sum += src[(i * stride + di) * w + j * stride + dj];
                            }
                        }
                        out[o] = sum / (k * k) as f64;
                    }
                }
            }
        }
    }
    let y = Tensor::from_parts(vec![b, c, ho, wo], out);
    Ok(x.tape().record(
        match kind {
            PoolKind::Max => "max_pool2d",
            PoolKind::Avg => "avg_pool2d",
        },
        &[x],
        y,
        move |g, _| {
            let gd = g.data();
            let mut gx = vec![0.0; planes * h * w];
            match kind {
                PoolKind::Max => {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += gd[o];
                    }
                }
                PoolKind::Avg => {
                    let share = 1.0 / (k * k) as f64;
                    for pl in 0..planes {
                        for i in 0..ho {
                            for j in 0..wo {
                                let v = gd[pl * ho * wo + i * wo + j] * share;
                                for di in 0..k {
                                    for dj in 0..k {
                                        gx[pl * h * w + (i * stride + di) * w + j * stride + dj] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![b, c, h, w], gx))]
        },
    ))
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: Var<'_>, factor: usize) -> Result<Var<'_>> {
    let xv = x.value();
    let [b, c, h, w] = dims4(&xv, "upsample_nearest")?;
    if factor == 0 {
        return Err(TensorError::Invalid("upsample factor 0".into()));
    }
    let (ho, wo) = (h * factor, w * factor);
    let planes = b * c;
    let d = xv.data();
    let mut out = vec![0.0; planes * ho * wo];
    for pl in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                out[pl * ho * wo + i * wo + j] = d[pl * h * w + (i / factor) * w + j / factor];
            }
        }
    }
    let y = Tensor::from_parts(vec![b, c, ho, wo], out);
    Ok(x.tape().record("upsample_nearest", &[x], y, move |g, _| {
        let gd = g.data();
        let mut gx = vec![0.0; planes * h * w];
        for pl in 0..planes {
            for i in 0..ho {
                for j in 0..wo {
                    gx[pl * h * w + (i / factor) * w + j / factor] += gd[pl * ho * wo + i * wo + j];
                }
            }
        }
        vec![Some(Tensor::from_parts(vec![b, c, h, w], gx))]
    }))
}
