//! Stochastic variational EM: one simultaneous gradient step on the encoder
//! and the dictionary per batch.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::PatchDataset;
use crate::encoder::{Encoder, EncoderConfig, WarmupState};
use crate::error::{Error, Result};
use crate::generator::{init_dictionary, Dictionary};
use crate::objective::{batch_objective, sample_codes, ElboBreakdown, Estimator, LossWeights, Sampling};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::tape::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Posterior samples per datum (J).
    pub samples: usize,
    pub dict_lr: f64,
    /// Per-epoch multiplicative decay of the dictionary learning rate.
    pub dict_decay: f64,
    pub enc_lr_max: f64,
    pub momentum: f64,
    pub kappa: f64,
    pub beta: f64,
    pub beta_gamma: f64,
    pub seed: u64,
    pub estimator: Estimator,
    pub sampling: Sampling,
    /// L1 weight of the validation objective.
    pub eval_lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 100,
            samples: 1,
            dict_lr: 0.5,
            dict_decay: 0.99,
            enc_lr_max: 1e-2,
            momentum: 0.9,
            kappa: 1e-4,
            beta: 1e-2,
            beta_gamma: 1e-3,
            seed: 0,
            estimator: Estimator::StraightThrough,
            sampling: Sampling::Max,
            eval_lambda: 20.0,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { beta: self.beta, beta_gamma: self.beta_gamma }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.samples == 0 {
            return bad("batch_size and samples must be at least 1");
        }
        if !(self.dict_lr > 0.0 && self.enc_lr_max > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.dict_decay > 0.0 && self.dict_decay <= 1.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("dict_decay must lie in (0, 1] and momentum in [0, 1)");
        }
        if !(self.kappa >= 0.0 && self.beta >= 0.0 && self.beta_gamma >= 0.0 && self.eval_lambda >= 0.0) {
            return bad("kappa, beta, beta_gamma and eval_lambda must be nonnegative");
        }
        Ok(())
    }

    pub fn iterations_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// `(dict_lr, enc_lr)`: exponential per-epoch decay for the dictionary; a
/// one-cycle policy for the encoder, rising linearly from `max/10` to `max`
/// over the first 30% of iterations and then cosine-annealing to `max/100`
/// at the final iteration.
pub fn schedule_lr(iteration: usize, epoch: usize, total_iterations: usize, cfg: &TrainConfig) -> (f64, f64) {
    let dict = cfg.dict_lr * cfg.dict_decay.powi(epoch as i32);
    let max = cfg.enc_lr_max;
    let t = if total_iterations > 1 { (iteration as f64 / (total_iterations - 1) as f64).min(1.0) } else { 0.0 };
    let enc = if t < 0.3 {
        max / 10.0 + (max - max / 10.0) * t / 0.3
    } else {
        let p = (t - 0.3) / 0.7;
        let lo = max / 100.0;
        lo + (max - lo) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    };
    (dict, enc)
}

/// Trained state: encoder, dictionary, and the warm-up reached.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    pub encoder: Encoder<T>,
    pub dictionary: Dictionary<T>,
    pub warmup: WarmupState,
    pub train: TrainConfig,
}

impl<T: Scalar> Model<T> {
    pub fn init(enc_cfg: EncoderConfig, train: TrainConfig) -> Result<Self> {
        enc_cfg.validate()?;
        train.validate()?;
        let encoder = Encoder::init(enc_cfg.clone(), train.seed)?;
        let dictionary = init_dictionary(enc_cfg.input_dim, enc_cfg.latent_dim, T::c(train.kappa), train.seed)?;
        Ok(Model { encoder, dictionary, warmup: WarmupState::start(), train })
    }

    pub fn enc_cfg(&self) -> &EncoderConfig {
        &self.encoder.cfg
    }

    /// Codes for `x` (`[data_dim, n]`): best of `samples` posterior draws per
    /// datum, with the evaluation noise stream of `seed`.
    pub fn infer_codes(&self, x: &Tensor<T>, samples: usize, seed: u64) -> Result<Tensor<T>> {
        let post = self.encoder.encode_values(x, &self.warmup)?;
        let mut rng = stream(seed, Stream::Eval);
        sample_codes(x, &post, &self.dictionary.a, self.enc_cfg(), &self.train.weights(), &self.warmup, samples, &mut rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub iteration: usize,
    /// Mean minimized loss over the epoch's batches.
    pub train_loss: f64,
    pub recon: f64,
    pub kl_base: f64,
    pub kl_gamma: Option<f64>,
    /// Sparse-coding objective on validation codes.
    pub val_loss: f64,
    pub dict_lr: f64,
    pub enc_lr: f64,
    pub omega: f64,
    pub tau: f64,
    pub kl_ramp: f64,
    /// Share of nonzero entries among the training codes.
    pub nonzero_fraction: f64,
    pub dict_norm: f64,
}

/// Nesterov momentum in the `v = mu v + g; p -= lr (g + mu v)` form.
struct Nesterov<T: Scalar> {
    velocity: Vec<Tensor<T>>,
    momentum: T,
}

impl<T: Scalar> Nesterov<T> {
    fn new(params: &[Tensor<T>], momentum: f64) -> Self {
        Nesterov { velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(), momentum: T::c(momentum) }
    }

    fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: T) {
        let mu = self.momentum;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv;
                *pv -= lr * (gv + mu * *vv);
            }
        }
    }
}

/// Mean sparse-coding objective `||x - A z||^2 + lambda ||z||_1` over the
/// columns, plus `kappa ||A||_F^2`.
pub fn sparse_coding_loss<T: Scalar>(a: &Tensor<T>, z: &Tensor<T>, x: &Tensor<T>, lambda: f64, kappa: f64) -> Result<f64> {
    let d = Dictionary { a: a.clone(), kappa: T::zero() };
    let resid = d.residual_sq(x, z)?;
    let n = x.cols().max(1) as f64;
    let rec: f64 = resid.iter().map(|v| v.f64()).sum();
    let l1: f64 = z.data().iter().map(|v| v.f64().abs()).sum();
    Ok((rec + lambda * l1) / n + kappa * a.sum_sq().f64())
}

pub fn nonzero_fraction<T: Scalar>(z: &Tensor<T>) -> f64 {
    z.data().iter().filter(|v| **v != T::zero()).count() as f64 / z.numel().max(1) as f64
}

/// Runs training from a fresh initialization. See [`train_from`].
pub fn train<T: Scalar>(
    train_set: &PatchDataset<T>,
    val_set: &PatchDataset<T>,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog, &Model<T>) -> Result<()>,
) -> Result<(Model<T>, Vec<EpochLog>)> {
    let model = Model::init(enc_cfg.clone(), cfg.clone())?;
    train_from(model, train_set, val_set, on_epoch)
}

/// Trains `model` for `model.train.epochs` epochs. Each batch draws J noise
/// sets, forms thresholded samples, aggregates the per-sample ELBOs, and
/// takes one gradient step on encoder and dictionary together.
///
/// A non-finite value anywhere in the step aborts with
/// [`Error::NumericalAbort`] naming the iteration and the offending term.
pub fn train_from<T: Scalar>(
    mut model: Model<T>,
    train_set: &PatchDataset<T>,
    val_set: &PatchDataset<T>,
    mut on_epoch: impl FnMut(&EpochLog, &Model<T>) -> Result<()>,
) -> Result<(Model<T>, Vec<EpochLog>)> {
    let cfg = model.train.clone();
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if train_set.dim() != model.enc_cfg().input_dim {
        return Err(Error::shape("train", format!("data dim {} vs encoder input {}", train_set.dim(), model.enc_cfg().input_dim)));
    }
    let weights = cfg.weights();
    let kappa = T::c(cfg.kappa);
    let per_epoch = cfg.iterations_per_epoch(train_set.len());
    let total = per_epoch * cfg.epochs;
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let mut noise = stream(cfg.seed, Stream::Noise);
    let mut opt = Nesterov::new(model.encoder.params.tensors(), cfg.momentum);
    let mut iteration = model.warmup.iteration as usize;
    let val_x = val_set.columns();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut rec_sum, mut kl_sum, mut klg_sum) = (0.0, 0.0, 0.0, 0.0);
        let (mut nnz, mut entries) = (0usize, 0usize);
        let mut lrs = (0.0, 0.0);
        let mut has_gamma = false;
        for idx in order.chunks(cfg.batch_size) {
            let x = train_set.batch(idx);
            lrs = schedule_lr(iteration, epoch, total, &cfg);
            let abort = |e: Error| match e {
                Error::NonFinite { op } => Error::NumericalAbort { iteration, term: op },
                other => other,
            };
            let (enc_grads, dict_grad, loss, summary, codes) = {
                let g = Graph::new();
                let enc_vars = model.encoder.params.bind(&g);
                let a = g.param(model.dictionary.a.clone());
                let xv = g.constant(x);
                let post = model.encoder.encode(&enc_vars, xv, &model.warmup).map_err(abort)?;
                let obj = batch_objective(xv, &post, a, kappa, model.enc_cfg(), &weights, &model.warmup, cfg.estimator, cfg.sampling, cfg.samples, &mut noise)
                    .map_err(abort)?;
                let summary = ElboBreakdown::from_samples(&obj.samples, &obj.kl);
                let grads = g.backward(obj.loss).map_err(abort)?;
                let enc: Vec<Tensor<T>> = enc_vars.iter().map(|&v| grads.wrt_or_zero(v)).collect();
                (enc, grads.wrt_or_zero(a), obj.loss.item().f64(), summary, obj.codes)
            };
            opt.step(model.encoder.params.tensors_mut(), &enc_grads, T::c(lrs.1));
            let dlr = T::c(lrs.0);
            model.dictionary.a.data_mut().iter_mut().zip(dict_grad.data()).for_each(|(p, &g)| *p -= dlr * g);
            if !model.encoder.params.is_finite() {
                return Err(Error::NumericalAbort { iteration, term: "encoder parameters".into() });
            }
            if !model.dictionary.a.is_finite() {
                return Err(Error::NumericalAbort { iteration, term: "dictionary".into() });
            }
            loss_sum += loss;
            rec_sum += summary.recon;
            kl_sum += summary.kl_base;
            if let Some(k) = summary.kl_gamma {
                klg_sum += k;
                has_gamma = true;
            }
            nnz += codes.data().iter().filter(|v| **v != T::zero()).count();
            entries += codes.numel();
            iteration += 1;
            model.warmup.advance();
        }
        let val_loss = if val_set.is_empty() {
            f64::NAN
        } else {
            let z = model.infer_codes(&val_x, cfg.samples, cfg.seed)?;
            sparse_coding_loss(&model.dictionary.a, &z, &val_x, cfg.eval_lambda, cfg.kappa)?
        };
        let nb = per_epoch as f64;
        let log = EpochLog {
            epoch,
            iteration,
            train_loss: loss_sum / nb,
            recon: rec_sum / nb,
            kl_base: kl_sum / nb,
            kl_gamma: has_gamma.then_some(klg_sum / nb),
            val_loss,
            dict_lr: lrs.0,
            enc_lr: lrs.1,
            omega: model.warmup.omega,
            tau: model.warmup.tau,
            kl_ramp: model.warmup.kl_ramp,
            nonzero_fraction: nnz as f64 / entries.max(1) as f64,
            dict_norm: model.dictionary.frobenius_sq().f64().sqrt(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val {:.4} nnz {:.3} |A| {:.3}",
            log.train_loss,
            log.val_loss,
            log.nonzero_fraction,
            log.dict_norm
        );
        on_epoch(&log, &model)?;
        logs.push(log);
    }
    Ok((model, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SyntheticSpec};
    use crate::encoder::PriorKind;

    fn tiny() -> (PatchDataset<f64>, PatchDataset<f64>) {
        let ds = synthesize(&SyntheticSpec { data_dim: 9, latent_dim: 6, sparsity: 2, coef_scale: 1.0, noise_sigma: 0.01, count: 240, seed: 1 }).unwrap();
        ds.split(0)
    }

    fn enc_cfg(kind: PriorKind) -> EncoderConfig {
        let mut c = EncoderConfig::new(9, 6, kind);
        c.hidden = Some(vec![12, 6]);
        c
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(schedule_lr(0, 0, 1000, &cfg).0, 0.5);
        assert!((schedule_lr(0, 100, 1000, &cfg).0 - 0.5 * 0.99f64.powi(100)).abs() < 1e-15);
        assert!((schedule_lr(0, 100, 1000, &cfg).0 - 0.183).abs() < 1e-3);
        let (_, last) = schedule_lr(999, 0, 1000, &cfg);
        assert!((last - 1e-4).abs() < 1e-18);
        assert!((schedule_lr(0, 0, 1000, &cfg).1 - 1e-3).abs() < 1e-18);
        let peak = schedule_lr(300, 0, 1001, &cfg).1;
        assert!((peak - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (tr, va) = tiny();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (m, logs) = train(&tr, &va, &enc_cfg(PriorKind::ThreshLaplacian), &cfg, |_, _| Ok(())).unwrap();
        assert!(logs.is_empty());
        assert_eq!(m, Model::init(enc_cfg(PriorKind::ThreshLaplacian), cfg).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_finite_for_every_prior() {
        let (tr, va) = tiny();
        let cfg = TrainConfig { epochs: 2, batch_size: 20, samples: 3, ..TrainConfig::default() };
        for kind in PriorKind::ALL {
            let run = || train(&tr, &va, &enc_cfg(kind), &cfg, |_, _| Ok(())).unwrap();
            let (m1, l1) = run();
            let (m2, l2) = run();
            assert_eq!(m1, m2, "{kind}");
            assert_eq!(l1, l2);
            assert!(l1.iter().all(|l| l.train_loss.is_finite() && l.val_loss.is_finite()));
            assert_eq!(m1.warmup.iteration, 20);
        }
    }

    #[test]
    fn training_lowers_the_loss() {
        let (tr, va) = tiny();
        let cfg = TrainConfig { epochs: 15, batch_size: 20, samples: 4, ..TrainConfig::default() };
        let mut model = Model::init(enc_cfg(PriorKind::ThreshLaplacian), cfg).unwrap();
        model.warmup = WarmupState::at(5000);
        let (_, logs) = train_from(model, &tr, &va, |_, _| Ok(())).unwrap();
        assert!(logs.last().unwrap().recon > logs[0].recon, "{:?}", logs.iter().map(|l| l.recon).collect::<Vec<_>>());
    }

    #[test]
    fn subgradient_dead_zone_blocks_recon_but_not_kl() {
        use crate::dist;
        let g = Graph::<f64>::new();
        let mu = g.param(Tensor::vector(vec![0.0, 0.0]));
        let log_b = g.param(Tensor::vector(vec![0.0, 0.0]));
        // eps = 0.1 gives a draw inside the dead zone for lambda = 1; 0.45 lands outside it
        let s = dist::sample_laplacian(&dist::LaplacianParams { mu, log_b }, &Tensor::vector(vec![0.1, 0.45])).unwrap();
        let z = dist::shifted_soft_threshold(s, g.scalar(1.0), mu).unwrap();
        let recon = z.square().unwrap().sum().unwrap();
        let gr = g.backward(recon).unwrap();
        assert_eq!(gr.wrt_or_zero(log_b).data()[0], 0.0);
        assert!(gr.wrt_or_zero(log_b).data()[1] != 0.0);
        let g2 = Graph::<f64>::new();
        let lb = g2.param(Tensor::vector(vec![0.0]));
        let kl = dist::kl_laplacian(&dist::LaplacianParams { mu: g2.constant(Tensor::vector(vec![0.0])), log_b: lb }, 0.1).unwrap().sum().unwrap();
        assert!(g2.backward(kl).unwrap().wrt_or_zero(lb).data()[0] != 0.0);
        // live entry: dz/ds = 1
        let g3 = Graph::<f64>::new();
        let sv = g3.param(Tensor::vector(vec![2.0]));
        let z = dist::shifted_soft_threshold(sv, g3.scalar(1.0), g3.scalar(0.0)).unwrap();
        assert_eq!(g3.backward(z.sum().unwrap()).unwrap().wrt_or_zero(sv).data(), &[1.0]);
    }

    #[test]
    fn sparse_coding_loss_examples() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0);
        let a = Tensor::from_fn(&[3, 2], |i| i as f64);
        let z0 = Tensor::zeros(&[2, 4]);
        let want = x.sum_sq() / 4.0 + 1e-3 * a.sum_sq();
        assert!((sparse_coding_loss(&a, &z0, &x, 20.0, 1e-3).unwrap() - want).abs() < 1e-12);
        assert_eq!(sparse_coding_loss(&Tensor::eye(3), &x, &x, 0.0, 0.0).unwrap(), 0.0);
    }
}
