//! Untaped numeric kernels shared by the forward and backward rules.

use super::{Result, Tensor, TensorError};

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::ShapeMismatch(a.to_vec(), b.to_vec())),
        };
    }
    Ok(out)
}

/// Strides of `input` expressed in the index space of `out` (right-aligned,
/// zero along broadcast axes).
fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(input);
    let offset = out.len() - input.len();
    (0..out.len())
        .map(|i| {
            if i < offset || input[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Walks every index of `shape` in row-major order, calling
/// `f(linear, offset_a, offset_b)` where the offsets follow `sa` and `sb`.
fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = shape.len();
    let inner = shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut linear = 0;
    for _ in 0..outer {
        for j in 0..inner {
            f(linear, oa + j * ia, ob + j * ib);
            linear += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    let (ad, bd) = (a.data(), b.data());
    walk2(&shape, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
    Ok(Tensor::from_parts(shape, out))
}

/// Sums `g` down to `target`, the inverse of broadcasting `target` up to
/// `g.shape()`.
pub(crate) fn sum_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let n: usize = target.iter().product();
    let mut out = vec![0.0; n];
    let st = broadcast_strides(target, g.shape());
    let own = contiguous_strides(g.shape());
    let gd = g.data();
    walk2(g.shape(), &own, &st, |_, ig, it| out[it] += gd[ig]);
    Tensor::from_parts(target.to_vec(), out)
}

pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut out = shape.to_vec();
    for (i, &ax) in axes.iter().enumerate() {
        if ax >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis: ax,
                rank: shape.len(),
            });
        }
        if axes[..i].contains(&ax) {
            return Err(TensorError::Invalid(format!("duplicate axis {ax}")));
        }
        out[ax] = 1;
    }
    Ok(out)
}

pub(crate) fn permute(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return Err(TensorError::Invalid(format!(
            "permutation {axes:?} does not match rank {rank}"
        )));
    }
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(TensorError::Invalid(format!("invalid permutation {axes:?}")));
        }
        seen[a] = true;
    }
    let own = contiguous_strides(t.shape());
    let shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
    let src: Vec<usize> = axes.iter().map(|&a| own[a]).collect();
    let zeros = vec![0; rank];
    let mut out = vec![0.0; t.numel()];
    let d = t.data();
    walk2(&shape, &src, &zeros, |o, i, _| out[o] = d[i]);
    Ok(Tensor::from_parts(shape, out))
}

/// `c (+)= op(a) · op(b)` for row-major matrices; `op` optionally transposes.
/// `a` is `[m,k]` (or `[k,m]` when `ta`), `b` is `[k,n]` (or `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(TensorError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn slice(t: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: t.rank(),
        });
    }
    let size = t.shape()[axis];
    if start >= end || end > size {
        return Err(TensorError::OutOfRange { start, end, size });
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let len = end - start;
    let mut out = Vec::with_capacity(outer * len * inner);
    let d = t.data();
    for o in 0..outer {
        let base = (o * size + start) * inner;
        out.extend_from_slice(&d[base..base + len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Writes `g` (shaped like a slice) into a zero tensor of `full` shape.
pub(crate) fn unslice(g: &Tensor, full: &[usize], axis: usize, start: usize) -> Tensor {
    let outer: usize = full[..axis].iter().product();
    let inner: usize = full[axis + 1..].iter().product();
    let len = g.shape()[axis];
    let size = full[axis];
    let mut out = vec![0.0; full.iter().product()];
    let gd = g.data();
    for o in 0..outer {
        let dst = (o * size + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
    }
    Tensor::from_parts(full.to_vec(), out)
}

pub(crate) fn concat(ts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = ts
        .first()
        .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: first.rank(),
        });
    }
    for t in ts {
        let ok = t.rank() == first.rank()
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(TensorError::ShapeMismatch(
                first.shape().to_vec(),
                t.shape().to_vec(),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = ts.iter().map(|t| t.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in ts {
            let block = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

/// Zero padding; `widths[i] = (before, after)` for axis `i`.
pub(crate) fn pad(t: &Tensor, widths: &[(usize, usize)]) -> Result<Tensor> {
    if widths.len() != t.rank() {
        return Err(TensorError::Invalid(format!(
            "pad widths for {} axes on rank-{} tensor",
            widths.len(),
            t.rank()
        )));
    }
    let shape: Vec<usize> = t
        .shape()
        .iter()
        .zip(widths)
        .map(|(d, (b, a))| d + b + a)
        .collect();
    let out_strides = contiguous_strides(&shape);
    let base: usize = widths.iter().zip(&out_strides).map(|((b, _), s)| b * s).sum();
    let own = contiguous_strides(t.shape());
    let mut out = vec![0.0; shape.iter().product()];
    let d = t.data();
    walk2(t.shape(), &own, &out_strides, |_, i, o| out[base + o] = d[i]);
    Ok(Tensor::from_parts(shape, out))
}

/// Inverse of [`pad`] for gradients: crops the interior region.
pub(crate) fn crop(g: &Tensor, inner_shape: &[usize], widths: &[(usize, usize)]) -> Tensor {
    let g_strides = contiguous_strides(g.shape());
    let base: usize = widths.iter().zip(&g_strides).map(|((b, _), s)| b * s).sum();
    let own = contiguous_strides(inner_shape);
    let mut out = vec![0.0; inner_shape.iter().product()];
    let gd = g.data();
    walk2(inner_shape, &own, &g_strides, |_, i, o| out[i] = gd[base + o]);
    Tensor::from_parts(inner_shape.to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::Invalid(format!(
                "kernel {kh}x{kw} (stride {stride}, pad {pad}) does not fit input {h}x{w}"
            )));
        }
        Ok(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<Vec<f64>>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// A reusable buffer of exactly `len` values with unspecified contents;
/// callers overwrite it completely. Return it with [`recycle`].
pub(crate) fn scratch(len: usize) -> Vec<f64> {
    let mut v = SCRATCH.with(|s| s.borrow_mut().pop()).unwrap_or_default();
    if v.len() < len {
        v.resize(len, 0.0);
    }
    v.truncate(len);
    v
}

pub(crate) fn recycle(v: Vec<f64>) {
    SCRATCH.with(|s| {
        let mut pool = s.borrow_mut();
        if pool.len() < 8 {
            pool.push(v);
        }
    });
}

/// One sample `[C,H,W]` to columns `[C*kh*kw, Ho*Wo]`.
#[cfg(test)]
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    im2col_into(x, g, cols, g.out_pixels(), 0);
}

/// Like [`im2col`], writing row `r` at `cols[r*row_stride + offset..]`, so
/// several samples can share one column matrix.
pub(crate) fn im2col_into(x: &[f64], g: &ConvGeom, cols: &mut [f64], row_stride: usize, offset: usize) {
    let npix = g.out_pixels();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let start = row * row_stride + offset;
                let dst = &mut cols[start..start + npix];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    // Output columns whose input column lies inside the row.
                    let lo = (g.pad.saturating_sub(kj)).div_ceil(g.stride).min(g.wo);
                    let hi = ((g.w + g.pad - kj).div_ceil(g.stride)).clamp(lo, g.wo);
                    line[..lo].iter_mut().for_each(|v| *v = 0.0);
                    line[hi..].iter_mut().for_each(|v| *v = 0.0);
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (v, jj) in line[lo..hi].iter_mut().zip((first..).step_by(g.stride)) {
                            *v = src[jj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add of columns back into one `[C,H,W]` sample.
#[cfg(test)]
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    col2im_from(cols, g, x, g.out_pixels(), 0);
}

/// Adjoint of [`im2col_into`].
pub(crate) fn col2im_from(cols: &[f64], g: &ConvGeom, x: &mut [f64], row_stride: usize, offset: usize) {
    let npix = g.out_pixels();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let start = row * row_stride + offset;
                let src = &cols[start..start + npix];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let lo = (g.pad.saturating_sub(kj)).div_ceil(g.stride).min(g.wo);
                    let hi = ((g.w + g.pad - kj).div_ceil(g.stride)).clamp(lo, g.wo);
                    let first = lo * g.stride + kj - g.pad;
                    let line = &src[oi * g.wo + lo..oi * g.wo + hi];
                    for (v, jj) in line.iter().zip((first..).step_by(g.stride)) {
                        dst[jj] += v;
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[1], &[2, 2]).unwrap(), vec![2, 2]);
        assert_eq!(broadcast_shape(&[4, 1, 3], &[5, 1]).unwrap(), vec![4, 5, 3]);
        assert!(broadcast_shape(&[3], &[2]).is_err());
    }

    #[test]
    fn sum_to_shape_inverts_broadcast() {
        let g = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(sum_to_shape(&g, &[1, 3]).data(), &[5.0, 7.0, 9.0]);
        assert_eq!(sum_to_shape(&g, &[2, 1]).data(), &[6.0, 15.0]);
        assert_eq!(sum_to_shape(&g, &[3]).data(), &[5.0, 7.0, 9.0]);
        assert_eq!(sum_to_shape(&g, &[1]).data(), &[21.0]);
    }

    #[test]
    fn permute_transposes() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = permute(&t, &[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        // aᵀ·b = [[1,3],[2,4]]·b
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        // a·bᵀ
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let g = ConvGeom::new(2, 5, 4, 3, 3, 2, 1).unwrap();
        let x = Tensor::gaussian(&[2 * 5 * 4], 0.0, 1.0, 1);
        let y = Tensor::gaussian(&[g.patch() * g.out_pixels()], 0.0, 1.0, 2);
        let mut cols = vec![0.0; g.patch() * g.out_pixels()];
        im2col(x.data(), &g, &mut cols);
        let mut back = vec![0.0; 40];
        col2im(y.data(), &g, &mut back);
        let lhs: f64 = cols.iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
