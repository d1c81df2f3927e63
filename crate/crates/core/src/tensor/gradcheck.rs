//! Central finite differences, the oracle for every backward rule.

use super::{Result, Tape, Tensor, TensorError, Var};

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_diff_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()));
        probe[i] = orig - h;
        let minus = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()));
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
    pub max_abs_error: f64,
}

/// Compares the taped gradient of `f` at `x` with central differences.
pub fn check_gradient<F>(name: &str, x: &Tensor, h: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let input = tape.leaf(x.clone(), true);
    let loss = f(&tape, input)?;
    if loss.value().numel() != 1 {
        return Err(TensorError::NotScalar(loss.shape()));
    }
    let analytic = tape.backward(loss)?.wrt(input);
    let eval = |t: &Tensor| {
        let tape = Tape::new();
        let v = tape.leaf(t.clone(), false);
        f(&tape, v).map(|l| l.value().item()).unwrap_or(f64::NAN)
    };
    let numeric = finite_diff_gradient(eval, x, h);
    Ok(GradCheck {
        name: name.to_string(),
        rel_error: relative_error(&analytic, &numeric),
        max_abs_error: analytic.max_abs_diff(&numeric),
    })
}
