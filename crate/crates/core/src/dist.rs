//! Reparameterizable distributions, their KL divergences, and the shifted
//! soft-threshold that turns base samples into exactly sparse codes.
//!
//! Parameters live on a [`Graph`](crate::tape::Graph) so samples and KL terms are differentiable.
//! Noise is drawn separately (see the `*_noise` helpers) so that sampling is a
//! pure function of `(params, noise)`.

use rand::Rng;
use rand_distr::{Open01, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::special;
use crate::tape::{Tensor, Var};

/// Lower bound on the argument of the log in the Laplace inverse CDF.
pub const LAPLACE_LOG_FLOOR: f64 = 1e-6;
/// Natural-parameter range for inferred Gamma concentration and rate.
pub const GAMMA_CLAMP: (f64, f64) = (1e-6, 1e6);
const GAMMA_MAX_TRIES: usize = 10_000;

#[derive(Clone, Copy, Debug)]
pub struct GaussianParams<'g, T: Scalar> {
    pub mu: Var<'g, T>,
    /// `2 log sigma`
    pub log_var: Var<'g, T>,
}

#[derive(Clone, Copy, Debug)]
pub struct LaplacianParams<'g, T: Scalar> {
    pub mu: Var<'g, T>,
    pub log_b: Var<'g, T>,
}

/// Gamma(alpha, rate beta) posterior over thresholds.
#[derive(Clone, Copy, Debug)]
pub struct GammaParams<'g, T: Scalar> {
    pub alpha: Var<'g, T>,
    pub beta: Var<'g, T>,
}

impl<'g, T: Scalar> GammaParams<'g, T> {
    /// Builds natural parameters from log-space head outputs, clamped to
    /// [`GAMMA_CLAMP`]. Clamping in log space first keeps `exp` finite; the
    /// result and its gradient equal clamping after `exp`.
    pub fn from_logs(log_alpha: Var<'g, T>, log_beta: Var<'g, T>) -> Result<Self> {
        let (lo, hi) = (T::c(GAMMA_CLAMP.0), T::c(GAMMA_CLAMP.1));
        let (llo, lhi) = (lo.ln(), hi.ln());
        let nat = |v: Var<'g, T>| -> Result<Var<'g, T>> { v.clamp(llo, lhi)?.exp()?.clamp(lo, hi) };
        Ok(GammaParams { alpha: nat(log_alpha)?, beta: nat(log_beta)? })
    }

    /// Posterior mean `alpha / beta`.
    pub fn mean(&self) -> Result<Var<'g, T>> {
        self.alpha.div(self.beta)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SpikeSlabParams<'g, T: Scalar> {
    /// Logit of the slab (nonzero) probability.
    pub spike_logit: Var<'g, T>,
    pub slab: GaussianParams<'g, T>,
    pub temperature: T,
}

/// Shifted soft-threshold, differentiated by its subgradient.
pub fn shifted_soft_threshold<'g, T: Scalar>(s: Var<'g, T>, lambda: Var<'g, T>, mu: Var<'g, T>) -> Result<Var<'g, T>> {
    s.soft_threshold(lambda, mu)
}

/// Straight-through shifted soft-threshold `s + T(sg[s]) - sg[s]`.
pub fn st_threshold<'g, T: Scalar>(s: Var<'g, T>, lambda: Var<'g, T>, mu: Var<'g, T>) -> Result<Var<'g, T>> {
    s.st_threshold(lambda, mu)
}

/// `mu + sigma * eps`.
pub fn sample_gaussian<'g, T: Scalar>(p: &GaussianParams<'g, T>, eps: &Tensor<T>) -> Result<Var<'g, T>> {
    let g = p.mu.graph();
    let sigma = p.log_var.scale(T::c(0.5))?.exp()?;
    sigma.mul(g.constant(eps.clone()))?.add(p.mu)
}

/// Per-dimension `KL(N(mu, sigma^2) || N(0, sigma0^2))`.
pub fn kl_gaussian<'g, T: Scalar>(p: &GaussianParams<'g, T>, sigma0: T) -> Result<Var<'g, T>> {
    if sigma0 <= T::zero() {
        return Err(Error::invalid("kl_gaussian: sigma0 must be positive"));
    }
    let inv = T::one() / (T::c(2.0) * sigma0 * sigma0);
    let quad = p.mu.square()?.add(p.log_var.exp()?)?.scale(inv)?;
    quad.sub(p.log_var.scale(T::c(0.5))?)?.add_scalar(sigma0.ln() - T::c(0.5))
}

/// Inverse-CDF Laplace sample `mu - b sign(eps) log(1 - 2|eps|)` with the
/// log argument floored at [`LAPLACE_LOG_FLOOR`].
pub fn sample_laplacian<'g, T: Scalar>(p: &LaplacianParams<'g, T>, eps: &Tensor<T>) -> Result<Var<'g, T>> {
    let g = p.mu.graph();
    let floor = T::c(LAPLACE_LOG_FLOOR);
    let dir = eps.map(|e| -crate::tape::sign0(e) * (T::one() - T::c(2.0) * e.abs()).max(floor).ln());
    p.log_b.exp()?.mul(g.constant(dir))?.add(p.mu)
}

/// Per-dimension `KL(Laplace(mu, b) || Laplace(0, b0))`.
pub fn kl_laplacian<'g, T: Scalar>(p: &LaplacianParams<'g, T>, b0: T) -> Result<Var<'g, T>> {
    if b0 <= T::zero() {
        return Err(Error::invalid("kl_laplacian: b0 must be positive"));
    }
    let inv = T::one() / b0;
    let abs_mu = p.mu.abs()?;
    let b = p.log_b.exp()?;
    let tail = b.mul(abs_mu.div(b)?.neg()?.exp()?)?.scale(inv)?;
    abs_mu.scale(inv)?.add(tail)?.sub(p.log_b)?.add_scalar(b0.ln() - T::one())
}

/// Mass collapsed to zero when thresholding `Laplace(mu, b)` at `lambda`.
pub fn spike_probability<T: Scalar>(lambda: T, b: T) -> T {
    T::one() - (-lambda / b).exp()
}

/// Threshold giving spike probability `p` for a Laplace base of scale `b`.
pub fn laplace_threshold_for_spike<T: Scalar>(p: T, b: T) -> T {
    -b * (T::one() - p).ln()
}

/// Threshold giving spike probability `p` for a zero-mean Gaussian base of
/// standard deviation `sigma`.
pub fn gaussian_threshold_for_spike<T: Scalar>(p: T, sigma: T) -> T {
    sigma * T::c(special::normal_quantile(0.5 + 0.5 * p.f64()))
}

/// Draws `z ~ Gamma(alpha, rate beta)` elementwise and records the pathwise
/// gradient: `dz/dalpha` by implicit differentiation of the CDF, and
/// `dz/dbeta = -z/beta`.
pub fn sample_gamma<'g, T: Scalar, R: Rng + ?Sized>(p: &GammaParams<'g, T>, rng: &mut R) -> Result<Var<'g, T>> {
    let (z, dz) = {
        let (a, b) = (p.alpha.value(), p.beta.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("sample_gamma", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let mut z = Vec::with_capacity(a.numel());
        let mut dz = Vec::with_capacity(a.numel());
        for (&al, &be) in a.data().iter().zip(b.data()) {
            let (al, be) = (al.f64(), be.f64());
            let unit = gamma_draw(al, rng)?;
            z.push(T::c(unit / be));
            dz.push(T::c(unit_gamma_dz_dalpha(al, unit) / be));
        }
        (Tensor::new(a.shape().to_vec(), z)?, dz)
    };
    Var::gamma_sample(p.alpha, p.beta, z, dz)
}

/// `dz/dalpha` of a unit-rate Gamma sample at fixed CDF level.
pub fn unit_gamma_dz_dalpha(alpha: f64, z: f64) -> f64 {
    let dens = special::gamma_pdf(alpha, z);
    if !(dens > 0.0) || !dens.is_finite() {
        return 0.0;
    }
    let d = -special::gamma_p_da(alpha, z) / dens;
    if d.is_finite() {
        d
    } else {
        0.0
    }
}

/// Unit-rate Gamma draw by Marsaglia-Tsang rejection; shapes below one are
/// boosted with `U^(1/alpha)`.
pub fn gamma_draw<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Sampler(format!("gamma shape {alpha} out of range")));
    }
    if alpha < 1.0 {
        let u: f64 = rng.sample(Open01);
        return Ok(gamma_draw(alpha + 1.0, rng)? * u.powf(1.0 / alpha));
    }
    let d = alpha - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    for _ in 0..GAMMA_MAX_TRIES {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.sample(Open01);
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return Ok(d * v);
        }
    }
    Err(Error::Sampler(format!("gamma rejection sampler exhausted {GAMMA_MAX_TRIES} tries at shape {alpha}")))
}

/// Per-dimension `KL(Gamma(alpha, beta) || Gamma(alpha0, beta0))`, rates.
pub fn kl_gamma<'g, T: Scalar>(p: &GammaParams<'g, T>, alpha0: T, beta0: T) -> Result<Var<'g, T>> {
    if alpha0 <= T::zero() || beta0 <= T::zero() {
        return Err(Error::invalid("kl_gamma: prior parameters must be positive"));
    }
    let (a, b) = (p.alpha, p.beta);
    let t1 = a.add_scalar(-alpha0)?.mul(a.digamma()?)?;
    let t2 = a.lgamma()?.neg()?.add_scalar(T::c(special::ln_gamma(alpha0.f64())))?;
    let t3 = b.log()?.add_scalar(-beta0.ln())?.scale(alpha0)?;
    let t4 = a.mul(b.graph().scalar(beta0).div(b)?.add_scalar(-T::one())?)?;
    t1.add(t2)?.add(t3)?.add(t4)
}

/// Spike-and-Slab sample with a straight-through Gumbel-sigmoid gate:
/// `z = 1[(logit + L)/tau > 0] * (mu + sigma eps)`, gradient through the
/// soft gate `sigmoid((logit + L)/tau)`.
pub fn sample_spike_slab<'g, T: Scalar>(p: &SpikeSlabParams<'g, T>, eps_logistic: &Tensor<T>, eps_normal: &Tensor<T>) -> Result<Var<'g, T>> {
    if p.temperature <= T::zero() {
        return Err(Error::invalid("spike-and-slab temperature must be positive"));
    }
    let g = p.spike_logit.graph();
    let gate = p
        .spike_logit
        .add(g.constant(eps_logistic.clone()))?
        .scale(T::one() / p.temperature)?
        .st_gate()?;
    gate.mul(sample_gaussian(&p.slab, eps_normal)?)
}

/// `gamma_hat KL_slab + KL(Bern(gamma_hat) || Bern(gamma0))` per dimension.
pub fn kl_spike_slab<'g, T: Scalar>(p: &SpikeSlabParams<'g, T>, gamma0: T, sigma0: T) -> Result<Var<'g, T>> {
    if !(gamma0 > T::zero() && gamma0 < T::one()) {
        return Err(Error::invalid("kl_spike_slab: gamma0 must lie in (0, 1)"));
    }
    let gam = p.spike_logit.sigmoid()?;
    let not_gam = p.spike_logit.neg()?.sigmoid()?;
    let log_gam = p.spike_logit.log_sigmoid()?;
    let log_not = p.spike_logit.neg()?.log_sigmoid()?;
    let slab = gam.mul(kl_gaussian(&p.slab, sigma0)?)?;
    let on = gam.mul(log_gam.add_scalar(-gamma0.ln())?)?;
    let off = not_gam.mul(log_not.add_scalar(-(T::one() - gamma0).ln())?)?;
    slab.add(on)?.add(off)
}

pub fn standard_normal_noise<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::c(rng.sample::<f64, _>(StandardNormal)))
}

/// Uniform noise on `(-1/2, 1/2)`.
pub fn centered_uniform_noise<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::c(rng.sample::<f64, _>(Open01) - 0.5))
}

/// Standard logistic noise `log u - log(1 - u)`, the difference of two
/// Gumbel variables.
pub fn logistic_noise<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let u: f64 = rng.sample(Open01);
        T::c(u.ln() - (-u).ln_1p())
    })
}

/// Log densities on plain values, used for importance weights.
pub mod density {
    use std::f64::consts::{LN_2, PI};

    pub fn log_normal(x: f64, mu: f64, sigma: f64) -> f64 {
        let z = (x - mu) / sigma;
        -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * PI).ln()
    }

    pub fn log_laplace(x: f64, mu: f64, b: f64) -> f64 {
        -(x - mu).abs() / b - b.ln() - LN_2
    }

    /// Log density of Gamma(alpha, rate beta).
    pub fn log_gamma(x: f64, alpha: f64, beta: f64) -> f64 {
        alpha * beta.ln() + (alpha - 1.0) * x.ln() - beta * x - crate::special::ln_gamma(alpha)
    }

    pub fn laplace_cdf(x: f64, mu: f64, b: f64) -> f64 {
        if x < mu {
            0.5 * ((x - mu) / b).exp()
        } else {
            1.0 - 0.5 * (-(x - mu) / b).exp()
        }
    }
}
