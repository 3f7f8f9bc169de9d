//! Per-sample ELBO, average and max aggregation over samples, and the
//! importance-weighted bound.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{self, density};
use crate::encoder::{Base, EncoderConfig, PosteriorParams, PosteriorValues, PriorKind, WarmupState};
use crate::error::{Error, Result};
use crate::generator;
use crate::scalar::Scalar;
use crate::tape::{Graph, Tensor, Var};

/// How gradients pass through the threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    StraightThrough,
    Subgradient,
}

/// How the J per-sample losses of a datum are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// KL weight on the base distribution.
    pub beta: f64,
    /// KL weight on the Gamma threshold posterior.
    pub beta_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta: 1e-2, beta_gamma: 1e-3 }
    }
}

/// Prior KL terms of a batch, each `[batch]`. They do not depend on the
/// sample, so one set serves all J samples.
#[derive(Clone, Copy, Debug)]
pub struct KlTerms<'g, T: Scalar> {
    pub base: Var<'g, T>,
    pub gamma: Option<Var<'g, T>>,
    /// `beta * base (+ beta_gamma * gamma)`, with the Spike-and-Slab ramp applied.
    pub weighted: Var<'g, T>,
}

pub fn kl_terms<'g, T: Scalar>(post: &PosteriorParams<'g, T>, cfg: &EncoderConfig, w: &LossWeights, warmup: &WarmupState) -> Result<KlTerms<'g, T>> {
    let s0 = T::c(cfg.prior_scale);
    let per_dim = match (post.kind, post.kind.base()) {
        (PriorKind::SpikeSlab, _) => dist::kl_spike_slab(&post.spike_slab().expect("spike head"), T::c(cfg.spike_prior), s0)?,
        (_, Base::Gaussian) => dist::kl_gaussian(&post.gaussian(), s0)?,
        (_, Base::Laplacian) => dist::kl_laplacian(&post.laplacian(), s0)?,
    };
    let base = per_dim.sum_rows()?;
    let mut beta = w.beta;
    if post.kind == PriorKind::SpikeSlab {
        beta *= warmup.kl_ramp;
    }
    let mut weighted = base.scale(T::c(beta))?;
    let gamma = match &post.gamma {
        Some(gp) => {
            let k = dist::kl_gamma(gp, T::c(cfg.alpha0), T::c(cfg.beta0()))?.sum_rows()?;
            weighted = weighted.add(k.scale(T::c(w.beta_gamma))?)?;
            Some(k)
        }
        None => None,
    };
    Ok(KlTerms { base, gamma, weighted })
}

/// One posterior sample for a batch.
#[derive(Clone, Copy, Debug)]
pub struct ElboSample<'g, T: Scalar> {
    /// Per-datum ELBO `[batch]`.
    pub total: Var<'g, T>,
    /// Per-datum `-||x - A z||^2`.
    pub recon: Var<'g, T>,
    /// Base sample `s` (the slab sample for Spike-and-Slab).
    pub s: Var<'g, T>,
    /// Sampled threshold, Gamma variants only.
    pub lambda: Option<Var<'g, T>>,
    /// Spike-and-Slab gate.
    pub gate: Option<Var<'g, T>>,
    /// Code passed to the generator.
    pub z: Var<'g, T>,
}

/// Draws one sample per datum and assembles its ELBO
/// `log p(x|z) - beta KL_base - beta_gamma KL_gamma`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_sample<'g, T: Scalar, R: Rng + ?Sized>(
    x: Var<'g, T>,
    post: &PosteriorParams<'g, T>,
    a: Var<'g, T>,
    cfg: &EncoderConfig,
    kl: &KlTerms<'g, T>,
    estimator: Estimator,
    rng: &mut R,
) -> Result<ElboSample<'g, T>> {
    let g = x.graph();
    let shape = post.shift.shape();
    let (s, gate, z, lambda) = match post.kind {
        PriorKind::SpikeSlab => {
            let sp = post.spike_slab().expect("spike head");
            let el = dist::logistic_noise(rng, &shape);
            let en = dist::standard_normal_noise(rng, &shape);
            let slab = dist::sample_gaussian(&sp.slab, &en)?;
            let gate = sp.spike_logit.add(g.constant(el))?.scale(T::one() / sp.temperature)?.st_gate()?;
            (slab, Some(gate), gate.mul(slab)?, None)
        }
        kind => {
            let s = match kind.base() {
                Base::Gaussian => dist::sample_gaussian(&post.gaussian(), &dist::standard_normal_noise(rng, &shape))?,
                Base::Laplacian => dist::sample_laplacian(&post.laplacian(), &dist::centered_uniform_noise(rng, &shape))?,
            };
            if !kind.thresholded() {
                (s, None, s, None)
            } else {
                let lambda = match &post.gamma {
                    Some(gp) => dist::sample_gamma(gp, rng)?,
                    None => g.scalar(T::c(cfg.lambda0)),
                };
                let z = match estimator {
                    Estimator::StraightThrough => dist::st_threshold(s, lambda, post.shift)?,
                    Estimator::Subgradient => dist::shifted_soft_threshold(s, lambda, post.shift)?,
                };
                (s, None, z, post.gamma.map(|_| lambda))
            }
        }
    };
    let recon = generator::log_likelihood_per_datum(a, x, z)?;
    let total = recon.sub(kl.weighted)?;
    Ok(ElboSample { total, recon, s, lambda, gate, z })
}

/// Scalar summary of a batch of samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub kl_base: f64,
    pub kl_gamma: Option<f64>,
    pub total: f64,
    /// Batch-mean ELBO of each of the J samples.
    pub per_sample: Vec<f64>,
}

impl ElboBreakdown {
    /// Batch means; `recon` is averaged over the J samples.
    pub fn from_samples<T: Scalar>(samples: &[ElboSample<'_, T>], kl: &KlTerms<'_, T>) -> Self {
        let mean = |v: &Var<'_, T>| v.value().mean().f64();
        let per_sample: Vec<f64> = samples.iter().map(|s| mean(&s.total)).collect();
        let j = samples.len().max(1) as f64;
        ElboBreakdown {
            recon: samples.iter().map(|s| mean(&s.recon)).sum::<f64>() / j,
            kl_base: mean(&kl.base),
            kl_gamma: kl.gamma.as_ref().map(mean),
            total: per_sample.iter().sum::<f64>() / j,
            per_sample,
        }
    }
}

pub fn aggregate_avg<T: Scalar>(losses: &[T]) -> Result<T> {
    if losses.is_empty() {
        return Err(Error::invalid("aggregate_avg of an empty list"));
    }
    Ok(losses.iter().fold(T::zero(), |a, &b| a + b) / T::c(losses.len() as f64))
}

/// Largest value and its index; ties go to the lowest index.
pub fn aggregate_max<T: Scalar>(losses: &[T]) -> Result<(T, usize)> {
    let mut best: Option<(T, usize)> = None;
    for (i, &v) in losses.iter().enumerate() {
        if best.map_or(true, |(b, _)| v > b) {
            best = Some((v, i));
        }
    }
    best.ok_or_else(|| Error::invalid("aggregate_max of an empty list"))
}

/// Per-datum combination of the J sample ELBOs (each `[batch]`). For `Max`
/// the gradient flows only through each datum's selected sample; the
/// returned indices name that sample.
pub fn aggregate<'g, T: Scalar>(totals: &[Var<'g, T>], sampling: Sampling) -> Result<(Var<'g, T>, Vec<usize>)> {
    if totals.is_empty() {
        return Err(Error::invalid("aggregate over zero samples"));
    }
    match sampling {
        Sampling::Avg => Ok((Var::mean_of(totals)?, Vec::new())),
        Sampling::Max => {
            // the choice is held fixed like a stop-gradient under replay
            let (held, _) = totals[0].graph().freeze(|| Tensor::vector(argmax_per_column(totals).into_iter().map(|c| T::c(c as f64)).collect()))?;
            let choice: Vec<usize> = held.data().iter().map(|c| c.f64() as usize).collect();
            Ok((Var::pick_per_column(totals, &choice)?, choice))
        }
    }
}

fn argmax_per_column<T: Scalar>(totals: &[Var<'_, T>]) -> Vec<usize> {
    let vals: Vec<Tensor<T>> = totals.iter().map(|v| v.to_tensor()).collect();
    (0..vals[0].numel())
        .map(|b| {
            let col: Vec<T> = vals.iter().map(|v| v.data()[b]).collect();
            aggregate_max(&col).expect("nonempty").1
        })
        .collect()
}

/// Everything the training step needs from one batch.
pub struct BatchObjective<'g, T: Scalar> {
    /// `-mean_b(aggregated ELBO) + kappa ||A||_F^2`, to be minimized.
    pub loss: Var<'g, T>,
    pub samples: Vec<ElboSample<'g, T>>,
    pub kl: KlTerms<'g, T>,
    /// Code of the selected (max) or first (avg) sample per datum, `[latent, batch]`.
    pub codes: Tensor<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn batch_objective<'g, T: Scalar, R: Rng + ?Sized>(
    x: Var<'g, T>,
    post: &PosteriorParams<'g, T>,
    a: Var<'g, T>,
    kappa: T,
    cfg: &EncoderConfig,
    weights: &LossWeights,
    warmup: &WarmupState,
    estimator: Estimator,
    sampling: Sampling,
    j: usize,
    rng: &mut R,
) -> Result<BatchObjective<'g, T>> {
    if j == 0 {
        return Err(Error::invalid("at least one sample per datum is required"));
    }
    let kl = kl_terms(post, cfg, weights, warmup)?;
    let samples = (0..j).map(|_| elbo_sample(x, post, a, cfg, &kl, estimator, rng)).collect::<Result<Vec<_>>>()?;
    let totals: Vec<_> = samples.iter().map(|s| s.total).collect();
    let (agg, choice) = aggregate(&totals, sampling)?;
    let loss = agg.mean()?.neg()?.add(generator::frobenius_penalty(a, kappa)?)?;
    let codes = select_codes(&samples, &choice);
    Ok(BatchObjective { loss, samples, kl, codes })
}

fn select_codes<T: Scalar>(samples: &[ElboSample<'_, T>], choice: &[usize]) -> Tensor<T> {
    if choice.is_empty() {
        return samples[0].z.to_tensor();
    }
    let zs: Vec<Tensor<T>> = samples.iter().map(|s| s.z.to_tensor()).collect();
    let (rows, cols) = (zs[0].rows(), zs[0].cols());
    Tensor::from_fn(&[rows, cols], |i| zs[choice[i % cols]].data()[i])
}

/// Codes for `x` (`[data_dim, batch]`): per datum the best of `j` posterior
/// samples by ELBO, with deterministic noise from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn sample_codes<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    post: &PosteriorValues<T>,
    a: &Tensor<T>,
    cfg: &EncoderConfig,
    weights: &LossWeights,
    warmup: &WarmupState,
    j: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let p = post.bind(&g);
    let obj = batch_objective(g.constant(x.clone()), &p, g.constant(a.clone()), T::zero(), cfg, weights, warmup, Estimator::StraightThrough, Sampling::Max, j, rng)?;
    Ok(obj.codes)
}

/// Importance-weighted bound with `k` samples, averaged over the batch.
///
/// Weights are `exp(-||x - A z||^2) p(s) / q(s|x)` with densities on the base
/// variables; Gamma variants also weight the sampled threshold and
/// Spike-and-Slab the Bernoulli gate.
pub fn iwae_bound<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, post: &PosteriorValues<T>, a: &Tensor<T>, cfg: &EncoderConfig, k: usize, rng: &mut R) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("iwae_bound needs K >= 1"));
    }
    let batch = x.cols();
    let mut logw = vec![Vec::with_capacity(k); batch];
    let mu = post.shift.cast::<f64>();
    let scale = post.scale().cast::<f64>();
    let s0 = cfg.prior_scale;
    let nil = LossWeights { beta: 0.0, beta_gamma: 0.0 };
    for _ in 0..k {
        let g = Graph::new();
        let p = post.bind(&g);
        let kl = kl_terms(&p, cfg, &nil, &WarmupState::settled())?;
        let smp = elbo_sample(g.constant(x.clone()), &p, g.constant(a.clone()), cfg, &kl, Estimator::StraightThrough, rng)?;
        let recon = smp.recon.to_tensor().cast::<f64>();
        let s = smp.s.to_tensor().cast::<f64>();
        let lam = smp.lambda.map(|v| v.to_tensor().cast::<f64>());
        let gate = smp.gate.map(|v| v.to_tensor().cast::<f64>());
        let cols = s.cols();
        let mut lw: Vec<f64> = recon.data().to_vec();
        for (i, &si) in s.data().iter().enumerate() {
            let b = i % cols;
            let (m, sc) = (mu.data()[i], scale.data()[i]);
            lw[b] += match post.kind.base() {
                Base::Gaussian => density::log_normal(si, 0.0, s0) - density::log_normal(si, m, sc),
                Base::Laplacian => density::log_laplace(si, 0.0, s0) - density::log_laplace(si, m, sc),
            };
            if let (Some(l), Some(al), Some(be)) = (&lam, &post.alpha, &post.beta) {
                let (lv, al, be) = (l.data()[i], al.data()[i].f64(), be.data()[i].f64());
                lw[b] += density::log_gamma(lv, cfg.alpha0, cfg.beta0()) - density::log_gamma(lv, al, be);
            }
            if let (Some(gt), Some(lg)) = (&gate, &post.spike_logit) {
                let l = lg.data()[i].f64();
                let (p0, lq) = if gt.data()[i] > 0.0 { (cfg.spike_prior, log_sigmoid(l)) } else { (1.0 - cfg.spike_prior, log_sigmoid(-l)) };
                lw[b] += p0.ln() - lq;
            }
        }
        for (b, v) in lw.into_iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { op: "iwae log weight".into() });
            }
            logw[b].push(v);
        }
    }
    let ln_k = (k as f64).ln();
    Ok(logw.iter().map(|w| log_sum_exp(w) - ln_k).sum::<f64>() / batch as f64)
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::PosteriorValues;
    use crate::rng::{stream, Stream};

    fn prior_post(kind: PriorKind, cfg: &EncoderConfig, batch: usize) -> PosteriorValues<f64> {
        let d = cfg.latent_dim;
        let log_scale = match kind.base() {
            Base::Gaussian => 2.0 * cfg.prior_scale.ln(),
            Base::Laplacian => cfg.prior_scale.ln(),
        };
        PosteriorValues {
            kind,
            tau: 0.5,
            shift: Tensor::zeros(&[d, batch]),
            log_scale: Tensor::full(&[d, batch], log_scale),
            alpha: kind.gamma().then(|| Tensor::full(&[d, batch], cfg.alpha0)),
            beta: kind.gamma().then(|| Tensor::full(&[d, batch], cfg.beta0())),
            spike_logit: (kind == PriorKind::SpikeSlab).then(|| Tensor::full(&[d, batch], (cfg.spike_prior / (1.0 - cfg.spike_prior)).ln())),
        }
    }

    fn run<'g>(g: &'g Graph<f64>, kind: PriorKind, cfg: &EncoderConfig, x: &Tensor<f64>, a: &Tensor<f64>, seed: u64) -> (ElboSample<'g, f64>, KlTerms<'g, f64>) {
        let post = prior_post(kind, cfg, x.cols()).bind(g);
        let kl = kl_terms(&post, cfg, &LossWeights::default(), &WarmupState::settled()).unwrap();
        let mut rng = stream(seed, Stream::Noise);
        let s = elbo_sample(g.constant(x.clone()), &post, g.constant(a.clone()), cfg, &kl, Estimator::StraightThrough, &mut rng).unwrap();
        (s, kl)
    }

    #[test]
    fn encoder_at_prior_and_zero_dictionary() {
        let x = Tensor::from_fn(&[5, 3], |i| (i as f64).sin());
        let a = Tensor::zeros(&[5, 4]);
        let want: Vec<f64> = x.column_sq_norms().iter().map(|v| -v).collect();
        for kind in PriorKind::ALL {
            let cfg = EncoderConfig::new(5, 4, kind);
            let g = Graph::new();
            let (s, kl) = run(&g, kind, &cfg, &x, &a, 1);
            for (t, w) in s.total.to_tensor().data().iter().zip(&want) {
                assert!((t - w).abs() < 1e-12, "{kind}: {t} vs {w}");
            }
            assert!(kl.base.to_tensor().max_abs() < 1e-12);
            if let Some(k) = kl.gamma {
                assert!(k.to_tensor().max_abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infinite_threshold_zeroes_codes() {
        let mut cfg = EncoderConfig::new(5, 4, PriorKind::ThreshLaplacian);
        cfg.lambda0 = 1e300;
        let x = Tensor::from_fn(&[5, 3], |i| (i as f64).cos());
        let a = Tensor::from_fn(&[5, 4], |i| i as f64 * 0.1);
        let g = Graph::new();
        let (s, _) = run(&g, cfg.prior_kind, &cfg, &x, &a, 2);
        assert!(s.z.to_tensor().data().iter().all(|&v| v == 0.0));
        for (r, n) in s.recon.to_tensor().data().iter().zip(x.column_sq_norms()) {
            assert!((r + n).abs() < 1e-12);
        }
    }

    #[test]
    fn thresholded_laplacian_sparsity_matches_spike_probability() {
        let cfg = EncoderConfig::new(2, 50, PriorKind::ThreshLaplacian);
        let x = Tensor::zeros(&[2, 2000]);
        let a = Tensor::zeros(&[2, 50]);
        let g = Graph::new();
        let (s, _) = run(&g, cfg.prior_kind, &cfg, &x, &a, 3);
        let z = s.z.to_tensor();
        let frac = z.data().iter().filter(|&&v| v != 0.0).count() as f64 / z.numel() as f64;
        let want = 1.0 - dist::spike_probability(0.25f64, 0.1);
        assert!((want - 0.0821).abs() < 1e-4);
        assert!((frac - want).abs() < 0.005, "{frac}");
    }

    #[test]
    fn gamma_branch_samples_threshold_and_fixed_branch_does_not() {
        let x = Tensor::zeros(&[2, 4]);
        let a = Tensor::zeros(&[2, 3]);
        for kind in [PriorKind::ThreshLaplacian, PriorKind::ThreshLaplacianGamma] {
            let cfg = EncoderConfig::new(2, 3, kind);
            let g = Graph::new();
            let (s, kl) = run(&g, kind, &cfg, &x, &a, 4);
            assert_eq!(s.lambda.is_some(), kind.gamma());
            assert_eq!(kl.gamma.is_some(), kind.gamma());
        }
    }

    #[test]
    fn beta_scales_kl_linearly() {
        let cfg = EncoderConfig::new(3, 4, PriorKind::ThreshLaplacian);
        let mut post = prior_post(cfg.prior_kind, &cfg, 2);
        post.shift = Tensor::from_fn(&[4, 2], |i| i as f64 * 0.2 - 0.5);
        let weighted = |beta: f64| {
            let g = Graph::new();
            let p = post.bind(&g);
            let w = LossWeights { beta, beta_gamma: 0.0 };
            kl_terms(&p, &cfg, &w, &WarmupState::settled()).unwrap().weighted.to_tensor()
        };
        let (one, two) = (weighted(0.01), weighted(0.02));
        for (a, b) in one.data().iter().zip(two.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(aggregate_avg(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(aggregate_avg(&[4.5]).unwrap(), 4.5);
        assert_eq!(aggregate_max(&[1.0, 2.0, 3.0]).unwrap(), (3.0, 2));
        assert_eq!(aggregate_max(&[2.0, 5.0, 5.0, 1.0]).unwrap(), (5.0, 1));
        assert_eq!(aggregate_max(&[7.0, 7.0]).unwrap().0, aggregate_avg(&[7.0, 7.0]).unwrap());
        assert!(aggregate_avg::<f64>(&[]).is_err());
        assert!(aggregate_max::<f64>(&[]).is_err());
    }

    #[test]
    fn max_gradient_skips_unselected_samples() {
        let g = Graph::<f64>::new();
        let e: Vec<_> = (0..3).map(|j| g.param(Tensor::vector(vec![j as f64, 2.0 - j as f64, 0.5]))).collect();
        let totals: Vec<_> = e.iter().map(|v| v.square().unwrap()).collect();
        let (agg, choice) = aggregate(&totals, Sampling::Max).unwrap();
        assert_eq!(choice, vec![2, 0, 0]);
        let gr = g.backward(agg.sum().unwrap()).unwrap();
        assert_eq!(gr.wrt_or_zero(e[0]).data(), &[0.0, 4.0, 1.0]);
        assert_eq!(gr.wrt_or_zero(e[1]).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(gr.wrt_or_zero(e[2]).data(), &[4.0, 0.0, 0.0]);
    }

    #[test]
    fn iwae_at_prior_with_zero_dictionary() {
        let cfg = EncoderConfig::new(4, 3, PriorKind::Gaussian);
        let x = Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.3).sin());
        let post = prior_post(PriorKind::Gaussian, &cfg, 5);
        let want = -x.sum_sq() / 5.0;
        for k in [1, 7] {
            let b = iwae_bound(&x, &post, &Tensor::zeros(&[4, 3]), &cfg, k, &mut stream(0, Stream::Eval)).unwrap();
            assert!((b - want).abs() < 1e-10, "{k}: {b} vs {want}");
        }
        assert!(iwae_bound(&x, &post, &Tensor::zeros(&[4, 3]), &cfg, 0, &mut stream(0, Stream::Eval)).is_err());
    }

    #[test]
    fn iwae_single_sample_is_elbo_estimate() {
        // K = 1 is the plain single-sample bound: the log weight itself.
        let cfg = EncoderConfig::new(2, 2, PriorKind::Laplacian);
        let mut post = prior_post(PriorKind::Laplacian, &cfg, 1);
        post.shift = Tensor::matrix(2, 1, vec![0.3, -0.2]).unwrap();
        let x = Tensor::matrix(2, 1, vec![1.0, 0.5]).unwrap();
        let a = Tensor::eye(2);
        let b = iwae_bound(&x, &post, &a, &cfg, 1, &mut stream(9, Stream::Eval)).unwrap();
        let g = Graph::new();
        let p = post.bind(&g);
        let kl = kl_terms(&p, &cfg, &LossWeights { beta: 0.0, beta_gamma: 0.0 }, &WarmupState::settled()).unwrap();
        let s = elbo_sample(g.constant(x.clone()), &p, g.constant(a), &cfg, &kl, Estimator::StraightThrough, &mut stream(9, Stream::Eval)).unwrap();
        let sv = s.s.to_tensor();
        let mut want = s.recon.item();
        for i in 0..2 {
            want += density::log_laplace(sv.data()[i], 0.0, 0.1) - density::log_laplace(sv.data()[i], post.shift.data()[i], 0.1);
        }
        assert!((b - want).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[-1e308, f64::NEG_INFINITY]), -1e308);
    }
}
