//! Central finite-difference verification of [`Graph::backward`].

use crate::autodiff::{Graph, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::precise::Dd;
use crate::tensor::Tensor;

/// Max relative error between reverse-mode and central-difference
/// gradients of the scalar built by `f` from a single input `x`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    finite_difference_check_many(|g, ids| f(g, ids[0]), std::slice::from_ref(x), h)
}

/// As [`finite_difference_check`], over several inputs at once.
pub fn finite_difference_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("step h = {h} must be positive")));
    }

    let mut g = Graph::new();
    let ids = xs
        .iter()
        .enumerate()
        .map(|(i, x)| g.param(ParamId(i), x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &ids)?;
    let analytic = g.backward(loss)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids = inputs
            .iter()
            .map(|x| g.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &ids)?;
        let v = g.scalar_value(out)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("finite-difference objective".into()))
        }
    };

    let mut worst: f64 = 0.0;
    let mut probe = xs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for j in 0..xs[which].len() {
            let orig = xs[which].data()[j];
            probe[which].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[which].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[which].data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = grad.value.data()[j];
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Central differences of an extended-precision objective against given
/// analytic gradients (one tensor per input, same shapes as `xs`).
///
/// Each probe `x ± h e_i` is represented exactly, and `f` is evaluated in
/// double-double arithmetic, so the only error left is the O(h²)
/// truncation of the difference quotient.
pub fn finite_difference_check_precise<F>(f: F, xs: &[Tensor], analytic: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&[Vec<Dd>]) -> Dd,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("step h = {h} must be positive")));
    }
    if xs.len() != analytic.len() || xs.iter().zip(analytic).any(|(x, a)| x.shape() != a.shape()) {
        return Err(Error::shape("finite_difference_check", "gradients do not match inputs"));
    }
    let mut probe: Vec<Vec<Dd>> = xs
        .iter()
        .map(|x| x.data().iter().map(|&v| Dd::new(v)).collect())
        .collect();
    let two_h = Dd::new(2.0 * h);
    let mut worst: f64 = 0.0;
    for (which, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = xs[which].data()[j];
            probe[which][j] = Dd::sum_exact(orig, h);
            let up = f(&probe);
            probe[which][j] = Dd::sum_exact(orig, -h);
            let down = f(&probe);
            probe[which][j] = Dd::new(orig);
            let numeric = ((up - down) / two_h).to_f64();
            if !numeric.is_finite() {
                return Err(Error::NonFinite("finite-difference objective".into()));
            }
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
    }
    Ok(worst)
}
