//! Evaluation metrics for trained sparse coding models.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist;
use crate::encoder::{Base, EncoderConfig, PosteriorValues, PriorKind, WarmupState};
use crate::error::{Error, Result};
use crate::objective::{batch_objective, iwae_bound, Estimator, Sampling};
use crate::scalar::Scalar;
use crate::special;
use crate::tape::{Graph, Tensor};
use crate::checkpoint::Checkpoint;
use crate::fista::fista_infer;
use crate::rng::{stream, Stream};
use crate::trainer::{nonzero_fraction, sparse_coding_loss, Model};

/// Mean `||x - A z||^2 + lambda ||z||_1` over the columns of `x`, plus
/// `kappa ||A||_F^2`.
pub fn validation_loss<T: Scalar>(a: &Tensor<T>, z: &Tensor<T>, x: &Tensor<T>, lambda: f64, kappa: f64) -> Result<f64> {
    sparse_coding_loss(a, z, x, lambda, kappa)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiInformation {
    pub nats: f64,
    /// Constant dimensions left out of the estimate.
    pub excluded: Vec<usize>,
}

const KNN_K: usize = 3;

/// Kozachenko-Leonenko entropy from the k-th neighbour distances of `n` points in `d` dims.
fn kl_entropy(kth_dist: &[f64], d: usize) -> f64 {
    let n = kth_dist.len();
    let df = d as f64;
    let log_unit_ball = 0.5 * df * std::f64::consts::PI.ln() - special::ln_gamma(0.5 * df + 1.0);
    let mean_log = kth_dist.iter().map(|r| r.ln()).sum::<f64>() / n as f64;
    special::digamma(n as f64) - special::digamma(KNN_K as f64) + log_unit_ball + df * mean_log
}

/// k-th neighbour distance of every point on a line, from the sorted order.
fn kth_dist_1d(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| v[i]).collect();
    let n = sorted.len();
    let mut out = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        // merge outward from `rank` until k neighbours are taken
        let (mut lo, mut hi) = (rank, rank);
        let mut last = 0.0;
        for _ in 0..KNN_K {
            let left = if lo > 0 { Some(sorted[rank] - sorted[lo - 1]) } else { None };
            let right = if hi + 1 < n { Some(sorted[hi + 1] - sorted[rank]) } else { None };
            last = match (left, right) {
                (Some(l), Some(r)) if l <= r => {
                    lo -= 1;
                    l
                }
                (Some(l), None) => {
                    lo -= 1;
                    l
                }
                (_, Some(r)) => {
                    hi += 1;
                    r
                }
                (None, None) => unreachable!("fewer than k+1 points"),
            };
        }
        out[i] = last;
    }
    out
}

fn kth_dist_nd(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = [f64::INFINITY; KNN_K];
            for (j, q) in rows.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best[KNN_K - 1] {
                    let mut at = KNN_K - 1;
                    while at > 0 && best[at - 1] > d2 {
                        best[at] = best[at - 1];
                        at -= 1;
                    }
                    best[at] = d2;
                }
            }
            best[KNN_K - 1].sqrt()
        })
        .collect()
}

/// `sum_i h(z_i) - h(z)` in nats for codes `z` of shape `[n, d]`.
///
/// Exact zeros are jittered with uniform noise of width `1e-4` times the
/// dimension's range before the k-nearest-neighbour entropies are taken.
pub fn multi_information<T: Scalar, R: Rng + ?Sized>(z: &Tensor<T>, rng: &mut R) -> Result<MultiInformation> {
    let (n, d) = (z.rows(), z.cols());
    if n <= KNN_K {
        return Err(Error::invalid(format!("multi_information needs more than {KNN_K} points, got {n}")));
    }
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut excluded = Vec::new();
    for j in 0..d {
        let mut c: Vec<f64> = (0..n).map(|i| z.at(i, j).f64()).collect();
        let (lo, hi) = c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let range = hi - lo;
        if !(range > 0.0) {
            excluded.push(j);
            continue;
        }
        let width = 1e-4 * range;
        for v in c.iter_mut().filter(|v| **v == 0.0) {
            *v = width * (rng.gen::<f64>() - 0.5);
        }
        cols.push(c);
    }
    if !excluded.is_empty() {
        log::warn!("multi_information: {} constant dimension(s) excluded", excluded.len());
    }
    if cols.is_empty() {
        return Ok(MultiInformation { nats: 0.0, excluded });
    }
    let marginals: f64 = cols.par_iter().map(|c| kl_entropy(&kth_dist_1d(c), 1)).collect::<Vec<_>>().iter().sum();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
    let joint = kl_entropy(&kth_dist_nd(&rows), cols.len());
    Ok(MultiInformation { nats: marginals - joint, excluded })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSnr {
    /// Mean SNR over encoder parameters; `None` when every one was excluded.
    pub encoder: Option<f64>,
    pub generator: Option<f64>,
    pub excluded_encoder: usize,
    pub excluded_generator: usize,
}

/// Running mean and variance per scalar.
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(len: usize) -> Self {
        Welford { n: 0.0, mean: vec![0.0; len], m2: vec![0.0; len] }
    }

    fn push(&mut self, xs: impl Iterator<Item = f64>) {
        self.n += 1.0;
        for ((m, s), x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(xs) {
            let delta = x - *m;
            *m += delta / self.n;
            *s += delta * (x - *m);
        }
    }

    /// Mean `|mean| / std` over scalars with `std >= 1e-12`, and the excluded count.
    fn snr(&self) -> (Option<f64>, usize) {
        let mut sum = 0.0;
        let mut used = 0usize;
        for (m, s) in self.mean.iter().zip(&self.m2) {
            let sd = (s / (self.n - 1.0)).sqrt();
            if sd >= 1e-12 {
                sum += m.abs() / sd;
                used += 1;
            }
        }
        let excluded = self.mean.len() - used;
        ((used > 0).then(|| sum / used as f64), excluded)
    }
}

/// Gradient SNR of the training loss over `draws` independent noise draws
/// on fixed data `x` (`[data_dim, n]`), using the model's estimator,
/// sample count and aggregation.
pub fn grad_snr<T: Scalar, R: Rng + ?Sized>(model: &Model<T>, x: &Tensor<T>, draws: usize, rng: &mut R) -> Result<GradSnr> {
    if draws < 2 {
        return Err(Error::invalid("grad_snr needs at least two draws"));
    }
    let cfg = &model.train;
    let mut enc = Welford::new(model.encoder.params.numel());
    let mut gen = Welford::new(model.dictionary.a.numel());
    for _ in 0..draws {
        let g = Graph::new();
        let vars = model.encoder.params.bind(&g);
        let a = g.param(model.dictionary.a.clone());
        let xv = g.constant(x.clone());
        let post = model.encoder.encode(&vars, xv, &model.warmup)?;
        let obj = batch_objective(xv, &post, a, T::c(cfg.kappa), model.enc_cfg(), &cfg.weights(), &model.warmup, cfg.estimator, cfg.sampling, cfg.samples, rng)?;
        let grads = g.backward(obj.loss)?;
        enc.push(vars.iter().flat_map(|&v| grads.wrt_or_zero(v).into_data()).map(|v| v.f64()));
        gen.push(grads.wrt_or_zero(a).data().iter().map(|v| v.f64()));
    }
    let (encoder, excluded_encoder) = enc.snr();
    let (generator, excluded_generator) = gen.snr();
    Ok(GradSnr { encoder, generator, excluded_encoder, excluded_generator })
}

/// `|S ∩ S'| / |S ∪ S'|`, with two empty supports scoring 1.
pub fn jaccard(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean Jaccard index over the ordered pairs of `supports`.
pub fn mean_pairwise_jaccard(supports: &[Vec<bool>]) -> Result<f64> {
    let j = supports.len();
    if j < 2 {
        return Err(Error::invalid("pairwise Jaccard needs at least two supports"));
    }
    let mut total = 0.0;
    for m in 0..j {
        for n in 0..j {
            if m != n {
                total += jaccard(&supports[m], &supports[n]);
            }
        }
    }
    Ok(total / (j * (j - 1)) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardReport {
    pub mean: f64,
    /// Counts of per-datum means over ten equal bins of `[0, 1]`.
    pub histogram: Vec<usize>,
}

/// Sample consistency: `j` posterior draws per datum, supports restricted to
/// features with `||a_i||^2 > norm_threshold`.
pub fn jaccard_consistency<T: Scalar, R: Rng + ?Sized>(
    post: &PosteriorValues<T>,
    x: &Tensor<T>,
    a: &Tensor<T>,
    cfg: &EncoderConfig,
    j: usize,
    norm_threshold: f64,
    rng: &mut R,
) -> Result<JaccardReport> {
    if j < 2 {
        return Err(Error::invalid("jaccard_consistency needs J >= 2"));
    }
    let live: Vec<bool> = a.column_sq_norms().iter().map(|v| v.f64() > norm_threshold).collect();
    let g = Graph::new();
    let p = post.bind(&g);
    let obj = batch_objective(
        g.constant(x.clone()),
        &p,
        g.constant(a.clone()),
        T::zero(),
        cfg,
        &Default::default(),
        &WarmupState::settled(),
        Estimator::StraightThrough,
        Sampling::Avg,
        j,
        rng,
    )?;
    let codes: Vec<Tensor<T>> = obj.samples.iter().map(|s| s.z.to_tensor()).collect();
    let (latent, batch) = (codes[0].rows(), codes[0].cols());
    let mut histogram = vec![0usize; 10];
    let mut sum = 0.0;
    for b in 0..batch {
        let supports: Vec<Vec<bool>> = codes.iter().map(|z| (0..latent).map(|i| live[i] && z.at(i, b) != T::zero()).collect()).collect();
        let m = mean_pairwise_jaccard(&supports)?;
        histogram[((m * 10.0) as usize).min(9)] += 1;
        sum += m;
    }
    Ok(JaccardReport { mean: sum / batch.max(1) as f64, histogram })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Collapse {
    pub posterior_pct: f64,
    pub feature_pct: f64,
}

/// Per-dimension collapse rates over the batch of `post`.
///
/// A dimension is posterior-collapsed when its base KL is at most `eps` for
/// at least a `1 - delta` share of the data, and feature-collapsed when the
/// posterior mean code is within `eps` of zero that often.
pub fn collapse_metrics<T: Scalar>(post: &PosteriorValues<T>, cfg: &EncoderConfig, eps: f64, delta: f64) -> Result<Collapse> {
    let g = Graph::new();
    let p = post.bind(&g);
    let s0 = T::c(cfg.prior_scale);
    let kl = match (post.kind, post.kind.base()) {
        (PriorKind::SpikeSlab, _) => dist::kl_spike_slab(&p.spike_slab().expect("spike head"), T::c(cfg.spike_prior), s0)?,
        (_, Base::Gaussian) => dist::kl_gaussian(&p.gaussian(), s0)?,
        (_, Base::Laplacian) => dist::kl_laplacian(&p.laplacian(), s0)?,
    }
    .to_tensor();
    let mean = post.mean_code(T::c(cfg.lambda0));
    let (latent, batch) = (kl.rows(), kl.cols());
    let need = (1.0 - delta) * batch as f64;
    let share = |t: &Tensor<T>, i: usize, pred: &dyn Fn(f64) -> bool| (0..batch).filter(|&b| pred(t.at(i, b).f64())).count() as f64;
    let mut posterior = 0usize;
    let mut feature = 0usize;
    for i in 0..latent {
        if share(&kl, i, &|v| v <= eps) >= need {
            posterior += 1;
        }
        if share(&mean, i, &|v| v.abs() <= eps) >= need {
            feature += 1;
        }
    }
    let pct = |c: usize| 100.0 * c as f64 / latent.max(1) as f64;
    Ok(Collapse { posterior_pct: pct(posterior), feature_pct: pct(feature) })
}

/// Least-squares dictionary `X Z^T (Z Z^T + ridge I)^-1` for `x` `[D, n]`
/// and `z` `[d, n]`.
pub fn estimate_dictionary<T: Scalar>(x: &Tensor<T>, z: &Tensor<T>, ridge: f64) -> Result<Tensor<T>> {
    if x.cols() != z.cols() {
        return Err(Error::shape("estimate_dictionary", format!("{} data columns vs {} code columns", x.cols(), z.cols())));
    }
    let to_na = |t: &Tensor<T>| DMatrix::from_row_iterator(t.rows(), t.cols(), t.data().iter().map(|v| v.f64()));
    let (xm, zm) = (to_na(x), to_na(z));
    let d = zm.nrows();
    let gram = &zm * zm.transpose() + DMatrix::identity(d, d) * ridge;
    let chol = gram.cholesky().ok_or_else(|| Error::invalid("estimate_dictionary: code Gram matrix is not positive definite"))?;
    // A = X Z^T G^-1, i.e. G A^T = Z X^T with G symmetric
    let at = chol.solve(&(&zm * xm.transpose()));
    let a = at.transpose();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "estimate_dictionary".into() });
    }
    Ok(Tensor::from_fn(&[a.nrows(), a.ncols()], |i| T::c(a[(i / a.ncols(), i % a.ncols())])))
}

/// `(M1 - M0) / s_N * sqrt(n1 n0) / N` with the population standard deviation.
pub fn point_biserial(y: &[bool], z: &[f64]) -> Result<f64> {
    if y.len() != z.len() {
        return Err(Error::shape("point_biserial", format!("{} labels vs {} values", y.len(), z.len())));
    }
    let n = z.len() as f64;
    let n1 = y.iter().filter(|&&b| b).count() as f64;
    let n0 = n - n1;
    if n1 == 0.0 || n0 == 0.0 {
        return Err(Error::invalid("point_biserial needs both classes"));
    }
    let m1 = y.iter().zip(z).filter(|(b, _)| **b).map(|(_, v)| v).sum::<f64>() / n1;
    let m0 = y.iter().zip(z).filter(|(b, _)| !**b).map(|(_, v)| v).sum::<f64>() / n0;
    let mean = z.iter().sum::<f64>() / n;
    let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return Ok(0.0);
    }
    Ok((m1 - m0) / sd * (n1 * n0).sqrt() / n)
}

/// One-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_test(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    let stat = samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let t = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * stat;
    (stat, kolmogorov_survival(t))
}

fn kolmogorov_survival(t: f64) -> f64 {
    if t < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * t * t).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// All evaluation numbers of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub validation_loss: f64,
    pub multi_information: f64,
    pub iwae_loss: Option<f64>,
    pub snr_encoder: Option<f64>,
    pub snr_generator: Option<f64>,
    pub jaccard_mean: Option<f64>,
    pub jaccard_histogram: Vec<usize>,
    pub posterior_collapse_pct: Option<f64>,
    pub feature_collapse_pct: Option<f64>,
    pub nonzero_fraction: f64,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    method: &'a str,
    seed: u64,
    config_hash: &'a str,
    validation_loss: f64,
    multi_information: f64,
    iwae_loss: Option<f64>,
    snr_encoder: Option<f64>,
    snr_generator: Option<f64>,
    jaccard_mean: Option<f64>,
    jaccard_histogram: String,
    posterior_collapse_pct: Option<f64>,
    feature_collapse_pct: Option<f64>,
    nonzero_fraction: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// One CSV row, with a header line first when `header` is set.
    pub fn to_csv(&self, header: bool) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(Vec::new());
        let hist = self.jaccard_histogram.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";");
        w.serialize(CsvRow {
            method: &self.method,
            seed: self.seed,
            config_hash: &self.config_hash,
            validation_loss: self.validation_loss,
            multi_information: self.multi_information,
            iwae_loss: self.iwae_loss,
            snr_encoder: self.snr_encoder,
            snr_generator: self.snr_generator,
            jaccard_mean: self.jaccard_mean,
            jaccard_histogram: hist,
            posterior_collapse_pct: self.posterior_collapse_pct,
            feature_collapse_pct: self.feature_collapse_pct,
            nonzero_fraction: self.nonzero_fraction,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Knobs of [`evaluate`]. Point counts cap how many validation columns a
/// metric uses; `0` turns the metric off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub lambda: f64,
    pub iwae_k: usize,
    pub iwae_points: usize,
    pub snr_draws: usize,
    pub snr_points: usize,
    pub jaccard_j: usize,
    pub jaccard_threshold: f64,
    pub collapse_eps: f64,
    pub collapse_delta: f64,
    pub mi_points: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            lambda: 20.0,
            iwae_k: 200,
            iwae_points: 1000,
            snr_draws: 1000,
            snr_points: 100,
            jaccard_j: 20,
            jaccard_threshold: 1e-1,
            collapse_eps: 1e-2,
            collapse_delta: 5e-2,
            mi_points: 2000,
            seed: 0,
        }
    }
}

fn first_columns<T: Scalar>(x: &Tensor<T>, n: usize) -> Tensor<T> {
    let idx: Vec<usize> = (0..n.min(x.cols())).collect();
    x.select_columns(&idx)
}

/// Scores a saved model on validation data `x` (`[data_dim, n]`).
pub fn evaluate<T: Scalar>(ck: &Checkpoint<T>, x: &Tensor<T>, opts: &EvalOptions, config_hash: &str) -> Result<MetricsReport> {
    let mut rng = stream(opts.seed, Stream::Eval);
    let a = &ck.dictionary().a;
    let (method, seed, kappa, codes) = match ck {
        Checkpoint::Variational(m) => (m.enc_cfg().prior_kind.name().to_string(), m.train.seed, m.train.kappa, m.infer_codes(x, m.train.samples, opts.seed)?),
        Checkpoint::Fista { fista, train, .. } => ("fista".to_string(), train.seed, fista.kappa, fista_infer(a, x, opts.lambda, fista.max_iters, fista.tol)?.z),
    };
    let validation_loss = validation_loss(a, &codes, x, opts.lambda, kappa)?;
    let mi_codes = first_columns(&codes, opts.mi_points).transpose();
    let multi_information = multi_information(&mi_codes, &mut rng)?.nats;
    let mut report = MetricsReport {
        method,
        seed,
        config_hash: config_hash.to_string(),
        validation_loss,
        multi_information,
        iwae_loss: None,
        snr_encoder: None,
        snr_generator: None,
        jaccard_mean: None,
        jaccard_histogram: Vec::new(),
        posterior_collapse_pct: None,
        feature_collapse_pct: None,
        nonzero_fraction: nonzero_fraction(&codes),
    };
    let Checkpoint::Variational(model) = ck else {
        return Ok(report);
    };
    let cfg = model.enc_cfg();
    let post = model.encoder.encode_values(x, &model.warmup)?;
    if opts.iwae_k > 0 && opts.iwae_points > 0 {
        let xi = first_columns(x, opts.iwae_points);
        let pi = model.encoder.encode_values(&xi, &model.warmup)?;
        report.iwae_loss = Some(-iwae_bound(&xi, &pi, a, cfg, opts.iwae_k, &mut rng)?);
    }
    if opts.snr_draws > 0 && opts.snr_points > 0 {
        let snr = grad_snr(model, &first_columns(x, opts.snr_points), opts.snr_draws, &mut rng)?;
        report.snr_encoder = snr.encoder;
        report.snr_generator = snr.generator;
    }
    if opts.jaccard_j > 1 {
        let j = jaccard_consistency(&post, x, a, cfg, opts.jaccard_j, opts.jaccard_threshold, &mut rng)?;
        report.jaccard_mean = Some(j.mean);
        report.jaccard_histogram = j.histogram;
    }
    let c = collapse_metrics(&post, cfg, opts.collapse_eps, opts.collapse_delta)?;
    report.posterior_collapse_pct = Some(c.posterior_pct);
    report.feature_collapse_pct = Some(c.feature_pct);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, Stream::Data);
        Tensor::from_fn(&[n, d], |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn validation_loss_of_zero_codes_is_data_energy_plus_penalty() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = Tensor::<f64>::eye(2);
        let z = Tensor::zeros(&[2, 2]);
        let want = (1.0 + 9.0 + 4.0 + 16.0) / 2.0 + 0.5 * 2.0;
        assert!((validation_loss(&a, &z, &x, 20.0, 0.5).unwrap() - want).abs() < 1e-12);
        assert_eq!(validation_loss(&a, &x, &x, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn knn_distances_on_a_line() {
        let v = [0.0, 1.0, 3.0, 6.0, 10.0];
        // third neighbour of each point
        assert_eq!(kth_dist_1d(&v), vec![6.0, 5.0, 3.0, 5.0, 9.0]);
        let rows: Vec<Vec<f64>> = v.iter().map(|&x| vec![x]).collect();
        assert_eq!(kth_dist_nd(&rows), vec![6.0, 5.0, 3.0, 5.0, 9.0]);
    }

    #[test]
    fn entropy_of_a_standard_normal() {
        let z = normals(20000, 1, 3);
        let h = kl_entropy(&kth_dist_1d(z.data()), 1);
        let want = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((h - want).abs() < 0.03, "{h} vs {want}");
    }

    #[test]
    fn independent_normals_have_no_multi_information() {
        let z = normals(50000, 4, 7);
        let mi = multi_information(&z, &mut stream(0, Stream::Eval)).unwrap();
        assert!(mi.nats.abs() < 0.05, "{}", mi.nats);
        assert!(mi.excluded.is_empty());
    }

    #[test]
    fn duplicated_dimension_has_large_multi_information() {
        let base = normals(5000, 2, 8);
        let z = Tensor::from_fn(&[5000, 3], |i| {
            let (r, c) = (i / 3, i % 3);
            if c == 2 { base.at(r, 0) } else { base.at(r, c) }
        });
        let mi = multi_information(&z, &mut stream(0, Stream::Eval)).unwrap();
        assert!(mi.nats > 2.0, "{}", mi.nats);
    }

    #[test]
    fn multi_information_ignores_affine_rescaling() {
        let base = normals(4000, 2, 9);
        let mixed = Tensor::from_fn(&[4000, 2], |i| {
            let r = i / 2;
            if i % 2 == 0 { base.at(r, 0) } else { 0.6 * base.at(r, 0) + 0.8 * base.at(r, 1) }
        });
        let scaled = Tensor::from_fn(&[4000, 2], |i| if i % 2 == 0 { 5.0 * mixed.data()[i] + 1.0 } else { 0.1 * mixed.data()[i] - 3.0 });
        let a = multi_information(&mixed, &mut stream(0, Stream::Eval)).unwrap().nats;
        let b = multi_information(&scaled, &mut stream(0, Stream::Eval)).unwrap().nats;
        // Gaussian MI of correlation 0.6 is -0.5 ln(1 - 0.36)
        assert!((a - 0.2231).abs() < 0.08, "{a}");
        assert!((a - b).abs() < 0.05, "{a} vs {b}");
    }

    #[test]
    fn constant_dimensions_are_excluded() {
        let base = normals(500, 2, 4);
        let z = Tensor::from_fn(&[500, 3], |i| if i % 3 == 1 { 0.0 } else { base.data()[(i / 3) * 2 + (i % 3) / 2] });
        let mi = multi_information(&z, &mut stream(0, Stream::Eval)).unwrap();
        assert_eq!(mi.excluded, vec![1]);
    }

    #[test]
    fn constant_gradients_have_no_snr() {
        let mut w = Welford::new(3);
        for _ in 0..5 {
            w.push([1.0, -2.0, 0.0].into_iter());
        }
        assert_eq!(w.snr(), (None, 3));
    }

    #[test]
    fn snr_of_averaged_estimates_grows_with_root_s() {
        let mut rng = stream(2, Stream::Noise);
        let mut snr_at = |s: usize| {
            let mut w = Welford::new(1);
            for _ in 0..4000 {
                let m: f64 = (0..s).map(|_| { let e: f64 = StandardNormal.sample(&mut rng); 0.5 + e }).sum::<f64>() / s as f64;
                w.push(std::iter::once(m));
            }
            w.snr().0.unwrap()
        };
        let (one, sixteen) = (snr_at(1), snr_at(16));
        assert!((one - 0.5).abs() < 0.05, "{one}");
        assert!((sixteen / one - 4.0).abs() < 0.4, "{}", sixteen / one);
    }

    #[test]
    fn grad_snr_on_a_small_model() {
        use crate::encoder::EncoderConfig;
        use crate::trainer::TrainConfig;
        let mut cfg = EncoderConfig::new(4, 3, PriorKind::ThreshLaplacian);
        cfg.hidden = Some(vec![8]);
        let model = Model::<f64>::init(cfg, TrainConfig { samples: 2, ..TrainConfig::default() }).unwrap();
        let x = normals(4, 6, 1);
        let r = grad_snr(&model, &x, 20, &mut stream(0, Stream::Eval)).unwrap();
        assert!(r.encoder.unwrap() > 0.0 && r.generator.unwrap() > 0.0);
        assert!(grad_snr(&model, &x, 1, &mut stream(0, Stream::Eval)).is_err());
    }

    #[test]
    fn jaccard_examples() {
        let s = |idx: &[usize]| (0..6).map(|i| idx.contains(&i)).collect::<Vec<_>>();
        assert_eq!(jaccard(&s(&[1, 2, 3]), &s(&[2, 3, 4])), 0.5);
        assert_eq!(jaccard(&s(&[1, 2]), &s(&[1, 2])), 1.0);
        assert_eq!(jaccard(&s(&[]), &s(&[])), 1.0);
        assert!(mean_pairwise_jaccard(&[s(&[1])]).is_err());
    }

    proptest! {
        #[test]
        fn pairwise_jaccard_is_bounded_and_order_free(sup in prop::collection::vec(prop::collection::vec(any::<bool>(), 8), 2..6)) {
            let m = mean_pairwise_jaccard(&sup).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
            let mut rev = sup.clone();
            rev.reverse();
            prop_assert!((mean_pairwise_jaccard(&rev).unwrap() - m).abs() < 1e-12);
        }

        #[test]
        fn point_biserial_is_pearson_on_binary_labels(z in prop::collection::vec(-10.0f64..10.0, 4..40), bits in prop::collection::vec(any::<bool>(), 40)) {
            let y: Vec<bool> = bits[..z.len()].to_vec();
            prop_assume!(y.iter().any(|&b| b) && y.iter().any(|&b| !b));
            let r = point_biserial(&y, &z).unwrap();
            let yf: Vec<f64> = y.iter().map(|&b| b as u8 as f64).collect();
            let n = z.len() as f64;
            let (my, mz) = (yf.iter().sum::<f64>() / n, z.iter().sum::<f64>() / n);
            let cov: f64 = yf.iter().zip(&z).map(|(a, b)| (a - my) * (b - mz)).sum();
            let sy = yf.iter().map(|a| (a - my).powi(2)).sum::<f64>().sqrt();
            let sz = z.iter().map(|b| (b - mz).powi(2)).sum::<f64>().sqrt();
            prop_assume!(sz > 1e-9);
            prop_assert!((r - cov / (sy * sz)).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn point_biserial_examples() {
        assert_eq!(point_biserial(&[true, false, true, false], &[2.0, 2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert!(point_biserial(&[true, true], &[1.0, 2.0]).is_err());
        // the median split maximizes the coefficient among splits with three positives
        let z = [0.3, -1.2, 2.5, 0.9, -0.4, 1.7];
        let mut sorted = z;
        sorted.sort_by(f64::total_cmp);
        let median = 0.5 * (sorted[2] + sorted[3]);
        let y: Vec<bool> = z.iter().map(|&v| v > median).collect();
        let best = point_biserial(&y, &z).unwrap();
        for mask in 0u32..64 {
            let yy: Vec<bool> = (0..6).map(|i| mask >> i & 1 == 1).collect();
            if yy.iter().filter(|&&b| b).count() == 3 {
                assert!(point_biserial(&yy, &z).unwrap() <= best + 1e-12);
            }
        }
    }

    #[test]
    fn estimate_dictionary_is_exact_on_linear_data() {
        let mut rng = stream(5, Stream::Data);
        let a = Tensor::<f64>::from_fn(&[6, 4], |_| StandardNormal.sample(&mut rng));
        let z = Tensor::<f64>::from_fn(&[4, 200], |_| StandardNormal.sample(&mut rng));
        let x = a.matmul(&z).unwrap();
        let est = estimate_dictionary(&x, &z, 1e-12).unwrap();
        let err = est.zip_map(&a, |p, q| p - q).unwrap().sum_sq().sqrt() / a.sum_sq().sqrt();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn estimate_dictionary_zero_row_gives_zero_column() {
        let mut rng = stream(6, Stream::Data);
        let z = Tensor::<f64>::from_fn(&[3, 50], |i| if i / 50 == 1 { 0.0 } else { StandardNormal.sample(&mut rng) });
        let x = Tensor::<f64>::from_fn(&[2, 50], |_| StandardNormal.sample(&mut rng));
        let est = estimate_dictionary(&x, &z, 1e-6).unwrap();
        assert!(est.is_finite());
        assert!(est.column(1).iter().all(|v| v.abs() < 1e-12));
    }

    fn posterior(kind: PriorKind, shift: f64, log_scale: f64) -> (PosteriorValues<f64>, EncoderConfig) {
        let cfg = EncoderConfig::new(4, 3, kind);
        let post = PosteriorValues {
            kind,
            tau: 0.5,
            shift: Tensor::full(&[3, 100], shift),
            log_scale: Tensor::full(&[3, 100], log_scale),
            alpha: None,
            beta: None,
            spike_logit: None,
        };
        (post, cfg)
    }

    #[test]
    fn prior_matching_posterior_is_fully_collapsed() {
        let (post, cfg) = posterior(PriorKind::Laplacian, 0.0, 0.1f64.ln());
        let c = collapse_metrics(&post, &cfg, 1e-2, 5e-2).unwrap();
        assert_eq!((c.posterior_pct, c.feature_pct), (100.0, 100.0));
        let (post, cfg) = posterior(PriorKind::Gaussian, 3.0, 0.0);
        let c = collapse_metrics(&post, &cfg, 1e-2, 5e-2).unwrap();
        assert_eq!((c.posterior_pct, c.feature_pct), (0.0, 0.0));
    }

    #[test]
    fn collapse_grows_with_eps() {
        let (mut post, cfg) = posterior(PriorKind::Laplacian, 0.0, 0.1f64.ln());
        post.shift = Tensor::from_fn(&[3, 100], |i| 0.01 * (i / 100) as f64);
        let mut last = (0.0, 0.0);
        for eps in [1e-6, 1e-4, 1e-3, 1e-2, 1e-1] {
            let c = collapse_metrics(&post, &cfg, eps, 5e-2).unwrap();
            assert!(c.posterior_pct >= last.0 && c.feature_pct >= last.1);
            last = (c.posterior_pct, c.feature_pct);
        }
    }

    #[test]
    fn ks_accepts_the_true_law_and_rejects_a_shift() {
        let mut rng = stream(12, Stream::Eval);
        let mut xs: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (_, p) = ks_test(&mut xs.clone(), special::normal_cdf);
        assert!(p > 0.01, "{p}");
        let (_, p) = ks_test(&mut xs, |x| special::normal_cdf(x - 0.1));
        assert!(p < 0.01, "{p}");
    }

    #[test]
    fn report_round_trips_and_writes_csv() {
        let r = MetricsReport {
            method: "gaussian".into(),
            seed: 3,
            config_hash: "abc".into(),
            validation_loss: 1.5,
            multi_information: 0.25,
            iwae_loss: Some(2.0),
            snr_encoder: None,
            snr_generator: Some(0.5),
            jaccard_mean: Some(1.0),
            jaccard_histogram: vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 4],
            posterior_collapse_pct: Some(0.0),
            feature_collapse_pct: Some(12.5),
            nonzero_fraction: 1.0,
        };
        let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = r.to_csv(true).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("method,seed,config_hash,validation_loss"));
        assert!(lines[1].contains("0;0;0;0;0;0;0;0;0;4"));
        assert_eq!(r.to_csv(false).unwrap().lines().count(), 1);
    }
}
