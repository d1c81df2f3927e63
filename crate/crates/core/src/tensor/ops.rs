//! Differentiable operations on [`Var`].

use super::kernels::{self, broadcast_binary, sum_to_shape};
use super::{Result, Tensor, TensorError, Var, CLAMP_EPS};

fn guard_denominator(d: f64) -> f64 {
    if d.abs() < CLAMP_EPS {
        if d < 0.0 {
            -CLAMP_EPS
        } else {
            CLAMP_EPS
        }
    } else {
        d
    }
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    broadcast_binary(a, b, f).expect("shapes checked at record time")
}

impl<'t> Var<'t> {
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = x.map(f);
        let saved_y = y.clone();
        self.tape().record(op, &[self], y, move |g, _| {
            let d = zip_same(&x, &saved_y, &df);
            vec![Some(zip_same(g, &d, |a, b| a * b))]
        })
    }

    pub fn relu(self) -> Var<'t> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    /// Natural log with inputs clamped to at least [`CLAMP_EPS`].
    pub fn log(self) -> Var<'t> {
        self.unary(
            "log",
            |x| x.max(CLAMP_EPS).ln(),
            |x, _| if x > CLAMP_EPS { 1.0 / x } else { 0.0 },
        )
    }

    /// Square root with inputs clamped to at least [`CLAMP_EPS`].
    pub fn sqrt(self) -> Var<'t> {
        self.unary(
            "sqrt",
            |x| x.max(CLAMP_EPS).sqrt(),
            |x, y| if x > CLAMP_EPS { 0.5 / y } else { 0.0 },
        )
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary("scale", move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        grads: impl Fn(&Tensor, &Tensor, &Tensor, &[bool]) -> (Option<Tensor>, Option<Tensor>) + 'static,
    ) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let y = broadcast_binary(&a, &b, f)?;
        Ok(self.tape().record(op, &[self, other], y, move |g, needs| {
            let (ga, gb) = grads(g, &a, &b, needs);
            vec![
                ga.map(|t| sum_to_shape(&t, a.shape())),
                gb.map(|t| sum_to_shape(&t, b.shape())),
            ]
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, |g, _, _, n| {
            (n[0].then(|| g.clone()), n[1].then(|| g.clone()))
        })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _, n| {
            (n[0].then(|| g.clone()), n[1].then(|| g.scale(-1.0)))
        })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, |g, a, b, n| {
            (
                n[0].then(|| zip_same(g, b, |g, b| g * b)),
                n[1].then(|| zip_same(g, a, |g, a| g * a)),
            )
        })
    }

    /// Division with the denominator's magnitude clamped to [`CLAMP_EPS`].
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "div",
            |a, b| a / guard_denominator(b),
            |g, a, b, n| {
                let ga = n[0].then(|| zip_same(g, b, |g, b| g / guard_denominator(b)));
                let gb = n[1].then(|| {
                    let q = zip_same(a, b, |a, b| -a / (guard_denominator(b) * guard_denominator(b)));
                    zip_same(g, &q, |g, q| g * q)
                });
                (ga, gb)
            },
        )
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keepdim(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.sum_axes_keepdim(axes)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape().record("sum", &[self], y, move |g, _| {
            let ones = Tensor::full(&in_shape, 1.0);
            vec![Some(zip_same(&ones, g, |_, g| g))]
        }))
    }

    pub fn mean_keepdim(self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        kernels::reduced_shape(&shape, axes)?;
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        Ok(self.sum_keepdim(axes)?.scale(1.0 / count as f64))
    }

    fn drop_axes(self, reduced: Var<'t>, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut kept: Vec<usize> = (0..shape.len())
            .filter(|i| !axes.contains(i))
            .map(|i| shape[i])
            .collect();
        if kept.is_empty() {
            kept.push(1);
        }
        reduced.reshape(&kept)
    }

    /// Sum over `axes`, removing them.
    pub fn sum(self, axes: &[usize]) -> Result<Var<'t>> {
        let r = self.sum_keepdim(axes)?;
        self.drop_axes(r, axes)
    }

    pub fn mean(self, axes: &[usize]) -> Result<Var<'t>> {
        let r = self.mean_keepdim(axes)?;
        self.drop_axes(r, axes)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        self.tape()
            .record("sum_all", &[self], Tensor::scalar(x.sum()), move |g, _| {
                vec![Some(Tensor::full(&in_shape, g.item()))]
            })
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Euclidean norm of all elements as a `[1]` tensor. The value is exact
    /// at the origin, where the subgradient 0 is used.
    pub fn norm2(self) -> Var<'t> {
        let x = self.value();
        let n = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.tape().record("norm2", &[self], Tensor::scalar(n), move |g, _| {
            let s = if n > CLAMP_EPS { g.item() / n } else { 0.0 };
            vec![Some(x.scale(s))]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape().record("reshape", &[self], y, move |g, _| {
            vec![Some(g.reshape(&in_shape).expect("same element count"))]
        }))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let y = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.tape().record("permute", &[self], y, move |g, _| {
            vec![Some(g.permute(&inverse).expect("valid permutation"))]
        }))
    }

    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if a >= rank || b >= rank {
            return Err(TensorError::InvalidAxis { axis: a.max(b), rank });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        let y = kernels::slice(&x, axis, start, end)?;
        let full = x.shape().to_vec();
        Ok(self.tape().record("slice", &[self], y, move |g, _| {
            vec![Some(kernels::unslice(g, &full, axis, start))]
        }))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().collect();
        let y = kernels::concat(&refs, axis)?;
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        Ok(first.tape().record("concat", parts, y, move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let s = start;
                    start += len;
                    need.then(|| kernels::slice(g, axis, s, s + len).expect("in range"))
                })
                .collect()
        }))
    }

    /// Zero padding; `widths[i] = (before, after)` for axis `i`.
    pub fn pad(self, widths: &[(usize, usize)]) -> Result<Var<'t>> {
        let x = self.value();
        let y = kernels::pad(&x, widths)?;
        let inner = x.shape().to_vec();
        let widths = widths.to_vec();
        Ok(self.tape().record("pad", &[self], y, move |g, _| {
            vec![Some(kernels::crop(g, &inner, &widths))]
        }))
    }

    /// Pads every axis by `p` on both sides.
    pub fn pad_all(self, p: usize) -> Result<Var<'t>> {
        let widths = vec![(p, p); self.shape().len()];
        self.pad(&widths)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let y = kernels::matmul(&a, &b)?;
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Ok(self.tape().record("matmul", &[self, other], y, move |g, needs| {
            let ga = needs[0].then(|| {
                let mut out = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), false, b.data(), true, &mut out, false);
                Tensor::from_parts(vec![m, k], out)
            });
            let gb = needs[1].then(|| {
                let mut out = vec![0.0; k * n];
                kernels::gemm(k, m, n, a.data(), true, g.data(), false, &mut out, false);
                Tensor::from_parts(vec![k, n], out)
            });
            vec![ga, gb]
        }))
    }

    /// Row-wise softmax of a `[B, C]` tensor (max-subtracted).
    pub fn softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = rows_cols(&x)?;
        let y = Tensor::from_parts(x.shape().to_vec(), softmax_rows(x.data(), rows, cols));
        let saved = y.clone();
        Ok(self.tape().record("softmax", &[self], y, move |g, _| {
            let (s, gd) = (saved.data(), g.data());
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = r * cols..(r + 1) * cols;
                let dot: f64 = s[row.clone()].iter().zip(&gd[row.clone()]).map(|(a, b)| a * b).sum();
                for i in row {
                    out[i] = s[i] * (gd[i] - dot);
                }
            }
            vec![Some(Tensor::from_parts(saved.shape().to_vec(), out))]
        }))
    }

    /// Row-wise log-softmax of a `[B, C]` tensor.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = rows_cols(&x)?;
        let p = softmax_rows(x.data(), rows, cols);
        let d = x.data();
        let mut y = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for c in 0..cols {
                y[r * cols + c] = row[c] - lse;
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.tape().record(
            "log_softmax",
            &[self],
            Tensor::from_parts(shape.clone(), y),
            move |g, _| {
                let gd = g.data();
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gs: f64 = gd[r * cols..(r + 1) * cols].iter().sum();
                    for c in 0..cols {
                        let i = r * cols + c;
                        out[i] = gd[i] - p[i] * gs;
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), out))]
            },
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rows_cols(x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(TensorError::Invalid(format!(
            "expected [rows, cols], got {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

fn softmax_rows(d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &d[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..cols {
            let e = (row[c] - m).exp();
            out[r * cols + c] = e;
            z += e;
        }
        out[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v /= z);
    }
    out
}
