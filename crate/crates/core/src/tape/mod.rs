//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records operations as they are evaluated. Every op returns a
//! [`Var`] handle; [`Graph::backward`] walks the record in reverse and
//! accumulates gradients into the trainable leaves created by
//! [`Graph::param`].
//!
//! Kinks use subgradient 0: `abs`, `sign`, `relu`, `max_scalar` and the
//! soft-threshold dead zone. `clamp` has zero gradient outside its interval.

mod graph;
mod tensor;

pub use graph::{threshold_scalar, BinaryKind, Frozen, Gradients, Graph, Var};
pub(crate) use graph::{sigmoid, sign0};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck<T: Scalar> {
    /// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_err: T,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor<T>>,
    pub numeric: Vec<Tensor<T>>,
}

/// Single-input gradient check. See [`grad_check_many`].
pub fn grad_check<T, F>(f: F, x0: &Tensor<T>, h: T) -> Result<GradCheck<T>>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, Var<'g, T>) -> Result<Var<'g, T>>,
{
    grad_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x0), h)
}

/// Compares reverse-mode gradients of a scalar `f` with central differences
/// using per-coordinate step `h * max(1, |x_i|)`.
///
/// Inputs blocked by `stop_gradient` report analytic zeros; the resulting
/// mismatch is returned, not treated as an error.
pub fn grad_check_many<T, F>(f: F, inputs: &[Tensor<T>], h: T) -> Result<GradCheck<T>>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    check(f, inputs, h, false)
}

/// Like [`grad_check_many`], but every stop-gradient argument (including
/// those inside the straight-through ops and Gamma samples) and the
/// max-ELBO sample choice are held at their values at `inputs`, so the
/// differences measure the surrogate objective the estimators
/// differentiate. `f` must draw the same noise on every call.
pub fn grad_check_surrogate<T, F>(f: F, inputs: &[Tensor<T>], h: T) -> Result<GradCheck<T>>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    check(f, inputs, h, true)
}

fn check<T, F>(f: F, inputs: &[Tensor<T>], h: T, surrogate: bool) -> Result<GradCheck<T>>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let (analytic, frozen): (Vec<Tensor<T>>, Frozen<T>) = {
        let g = if surrogate { Graph::recording() } else { Graph::new() };
        let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&g, &vars)?;
        let grads = g.backward(loss)?;
        (vars.iter().map(|&v| grads.wrt_or_zero(v)).collect(), g.frozen())
    };

    let eval = |xs: &[Tensor<T>]| -> Result<T> {
        let g = if surrogate { Graph::replaying(frozen.clone()) } else { Graph::new() };
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?.item();
        if !out.is_finite() {
            return Err(Error::NonFinite { op: "grad_check probe".into() });
        }
        Ok(out)
    };

    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_err = T::zero();
    let mut worst = (0, 0);
    let two = T::c(2.0);
    for (k, input) in inputs.iter().enumerate() {
        let mut num = Tensor::zeros(input.shape());
        for i in 0..input.numel() {
            let x = input.data()[i];
            let step = h * x.abs().max(T::one());
            probe[k].data_mut()[i] = x + step;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = x - step;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = x;
            let nd = (fp - fm) / (two * step);
            num.data_mut()[i] = nd;
            let err = (analytic[k].data()[i] - nd).abs() / nd.abs().max(T::one());
            if err > max_rel_err {
                max_rel_err = err;
                worst = (k, i);
            }
        }
        numeric.push(num);
    }
    Ok(GradCheck { max_rel_err, worst, analytic, numeric })
}
