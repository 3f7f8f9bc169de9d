//! MAP sparse coding with FISTA, and alternating dictionary learning for
//! `||x - A z||^2 + lambda ||z||_1 + kappa ||A||_F^2`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::PatchDataset;
use crate::error::{Error, Result};
use crate::generator::{init_dictionary, Dictionary};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::tape::Tensor;
use crate::trainer::{nonzero_fraction, schedule_lr, sparse_coding_loss, EpochLog, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FistaConfig {
    pub lambda: f64,
    pub kappa: f64,
    pub max_iters: usize,
    /// Stop when the relative objective change falls below this.
    pub tol: f64,
    pub warmup_start: f64,
    pub warmup_step: f64,
}

impl Default for FistaConfig {
    fn default() -> Self {
        FistaConfig { lambda: 20.0, kappa: 1e-3, max_iters: 200, tol: 1e-4, warmup_start: 0.1, warmup_step: 1e-4 }
    }
}

impl FistaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.kappa >= 0.0 && self.tol >= 0.0) || self.max_iters == 0 {
            return Err(Error::Config("fista needs lambda, kappa, tol >= 0 and max_iters >= 1".into()));
        }
        if !(self.warmup_start > 0.0 && self.warmup_start <= 1.0 && self.warmup_step >= 0.0) {
            return Err(Error::Config("fista warm-up needs start in (0, 1] and a nonnegative step".into()));
        }
        Ok(())
    }

    /// Effective L1 weight at training iteration `t`.
    pub fn lambda_at(&self, t: usize) -> f64 {
        self.lambda * (self.warmup_start + self.warmup_step * t as f64).min(1.0)
    }
}

const POWER_ITERS: usize = 20;
/// Margin on the power-iteration estimate, which approaches the top
/// eigenvalue from below.
const LIPSCHITZ_MARGIN: f64 = 1.01;

/// Lipschitz constant `2 lambda_max(A^T A)` of the smooth part's gradient.
pub fn lipschitz<T: Scalar>(a: &Tensor<T>) -> f64 {
    let (rows, cols) = (a.rows(), a.cols());
    let a64 = a.cast::<f64>();
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut est = 0.0;
    for _ in 0..POWER_ITERS {
        let av: Vec<f64> = (0..rows).map(|r| a64.row(r).iter().zip(&v).map(|(p, q)| p * q).sum()).collect();
        let mut w = vec![0.0; cols];
        for (r, &s) in av.iter().enumerate() {
            for (wi, &ai) in w.iter_mut().zip(a64.row(r)) {
                *wi += ai * s;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = w.iter().zip(&v).map(|(p, q)| p * q).sum::<f64>();
        v = w.into_iter().map(|x| x / norm).collect();
        let done = (next - est).abs() <= 1e-6 * next.abs();
        est = next;
        if done {
            break;
        }
    }
    2.0 * est * LIPSCHITZ_MARGIN
}

#[derive(Clone, Debug)]
pub struct FistaResult<T: Scalar> {
    /// `[latent, batch]`
    pub z: Tensor<T>,
    pub iterations: usize,
    /// Summed objective over the batch.
    pub objective: f64,
}

/// Summed `||x - A z||^2 + lambda ||z||_1` over columns.
pub fn objective<T: Scalar>(a: &Tensor<T>, x: &Tensor<T>, z: &Tensor<T>, lambda: f64) -> Result<f64> {
    let r = x.zip_map(&a.matmul(z)?, |p, q| p - q)?;
    Ok(r.sum_sq().f64() + lambda * z.data().iter().map(|v| v.f64().abs()).sum::<f64>())
}

/// FISTA from `z = 0` on every column of `x` (`[data_dim, batch]`).
pub fn fista_infer<T: Scalar>(a: &Tensor<T>, x: &Tensor<T>, lambda: f64, max_iters: usize, tol: f64) -> Result<FistaResult<T>> {
    fista_from(a, x, &Tensor::zeros(&[a.cols(), x.cols()]), lambda, max_iters, tol)
}

/// FISTA started at `z0`.
pub fn fista_from<T: Scalar>(a: &Tensor<T>, x: &Tensor<T>, z0: &Tensor<T>, lambda: f64, max_iters: usize, tol: f64) -> Result<FistaResult<T>> {
    if a.shape().len() != 2 || x.shape().len() != 2 || a.rows() != x.rows() || z0.shape() != [a.cols(), x.cols()] {
        return Err(Error::shape("fista_infer", format!("A {:?}, x {:?}, z0 {:?}", a.shape(), x.shape(), z0.shape())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda must be nonnegative"));
    }
    let (dd, d, b) = (a.rows(), a.cols(), x.cols());
    let l = lipschitz(a);
    if l == 0.0 {
        return Ok(FistaResult { z: Tensor::zeros(&[d, b]), iterations: 0, objective: objective(a, x, &Tensor::zeros(&[d, b]), lambda)? });
    }
    let step = 1.0 / l;
    let thr = T::c(lambda * step);
    let two_step = T::c(2.0 * step);
    let mut z = z0.clone();
    let mut y = z.clone();
    let mut t = 1.0f64;
    let mut prev = objective(a, x, &z, lambda)?;
    let mut resid = vec![T::zero(); dd * b];
    let mut grad = vec![T::zero(); d * b];
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        // resid = A y - x
        resid.copy_from_slice(x.data());
        T::gemm(dd, d, b, T::one(), a.data(), d as isize, 1, y.data(), b as isize, 1, -T::one(), &mut resid, b as isize, 1);
        // grad = A^T resid (the factor 2 lives in two_step)
        T::gemm(d, dd, b, T::one(), a.data(), 1, d as isize, &resid, b as isize, 1, T::zero(), &mut grad, b as isize, 1);
        let z_next: Vec<T> = y
            .data()
            .iter()
            .zip(&grad)
            .map(|(&yv, &gv)| {
                let u = yv - two_step * gv;
                if u > thr {
                    u - thr
                } else if u < -thr {
                    u + thr
                } else {
                    T::zero()
                }
            })
            .collect();
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let mom = T::c((t - 1.0) / t_next);
        let y_next: Vec<T> = z_next.iter().zip(z.data()).map(|(&zn, &zo)| zn + mom * (zn - zo)).collect();
        z = Tensor::new(vec![d, b], z_next)?;
        y = Tensor::new(vec![d, b], y_next)?;
        t = t_next;
        if !z.is_finite() {
            return Err(Error::NonFinite { op: "fista iterate".into() });
        }
        let obj = objective(a, x, &z, lambda)?;
        let done = (prev - obj).abs() <= tol * prev.abs().max(f64::MIN_POSITIVE);
        prev = obj;
        if done {
            break;
        }
    }
    Ok(FistaResult { z, iterations, objective: prev })
}

/// Alternates FISTA inference (with the warmed-up L1 weight) and one
/// gradient step on `A`, using the trainer's dictionary learning-rate
/// schedule. `train.epochs`, `batch_size`, `dict_lr`, `dict_decay` and `seed`
/// are honored.
pub fn fista_dictionary_learn<T: Scalar>(
    train_set: &PatchDataset<T>,
    val_set: &PatchDataset<T>,
    latent_dim: usize,
    cfg: &FistaConfig,
    train: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Dictionary<T>) -> Result<()>,
) -> Result<(Dictionary<T>, Vec<EpochLog>)> {
    cfg.validate()?;
    train.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut dict = init_dictionary(train_set.dim(), latent_dim, T::c(cfg.kappa), train.seed)?;
    let mut shuffle = stream(train.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let per_epoch = train.iterations_per_epoch(train_set.len());
    let total = per_epoch * train.epochs;
    let val_x = val_set.columns();
    let mut iteration = 0usize;
    let mut logs = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut rec_sum, mut nnz_sum) = (0.0, 0.0, 0.0);
        let mut dict_lr = 0.0;
        let (dd, d) = (dict.data_dim(), dict.latent_dim());
        for idx in order.chunks(train.batch_size) {
            let x = train_set.batch(idx);
            let lam = cfg.lambda_at(iteration);
            let res = fista_infer(&dict.a, &x, lam, cfg.max_iters, cfg.tol).map_err(|e| match e {
                Error::NonFinite { op } => Error::NumericalAbort { iteration, term: op },
                other => other,
            })?;
            let z = res.z;
            let b = x.cols();
            // grad = -(2/B) (x - A z) z^T + 2 kappa A
            let mut resid = x.data().to_vec();
            T::gemm(dd, d, b, -T::one(), dict.a.data(), d as isize, 1, z.data(), b as isize, 1, T::one(), &mut resid, b as isize, 1);
            let rec: f64 = resid.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / b as f64;
            let mut grad = dict.a.map(|v| T::c(2.0 * cfg.kappa) * v).into_data();
            T::gemm(dd, b, d, T::c(-2.0 / b as f64), &resid, b as isize, 1, z.data(), 1, b as isize, T::one(), &mut grad, d as isize, 1);
            dict_lr = schedule_lr(iteration, epoch, total, train).0;
            let lr = T::c(dict_lr);
            dict.a.data_mut().iter_mut().zip(&grad).for_each(|(p, &g)| *p -= lr * g);
            if !dict.a.is_finite() {
                return Err(Error::NumericalAbort { iteration, term: "dictionary".into() });
            }
            loss_sum += rec + lam * z.data().iter().map(|v| v.f64().abs()).sum::<f64>() / b as f64 + cfg.kappa * dict.frobenius_sq().f64();
            rec_sum += rec;
            nnz_sum += nonzero_fraction(&z);
            iteration += 1;
        }
        let val_loss = if val_set.is_empty() {
            f64::NAN
        } else {
            let z = fista_infer(&dict.a, &val_x, cfg.lambda, cfg.max_iters, cfg.tol)?.z;
            sparse_coding_loss(&dict.a, &z, &val_x, cfg.lambda, cfg.kappa)?
        };
        let nb = per_epoch as f64;
        let omega = (cfg.warmup_start + cfg.warmup_step * iteration as f64).min(1.0);
        let log = EpochLog {
            epoch,
            iteration,
            train_loss: loss_sum / nb,
            recon: -rec_sum / nb,
            kl_base: 0.0,
            kl_gamma: None,
            val_loss,
            dict_lr,
            enc_lr: 0.0,
            omega,
            tau: 0.0,
            kl_ramp: 0.0,
            nonzero_fraction: nnz_sum / nb,
            dict_norm: dict.frobenius_sq().f64().sqrt(),
        };
        log::info!("fista epoch {epoch}: loss {:.4} val {:.4} nnz {:.3} |A| {:.3}", log.train_loss, log.val_loss, log.nonzero_fraction, log.dict_norm);
        on_epoch(&log, &dict)?;
        logs.push(log);
    }
    Ok((dict, logs))
}
