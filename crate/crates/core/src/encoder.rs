//! Amortized inference network: an MLP backbone with one linear head per
//! posterior parameter.
//!
//! Batches are laid out `[features, batch]`: each column is one datum.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{self, GammaParams, GaussianParams, LaplacianParams, SpikeSlabParams};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::tape::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Gaussian,
    Laplacian,
    ThreshGaussian,
    ThreshLaplacian,
    ThreshGaussianGamma,
    ThreshLaplacianGamma,
    SpikeSlab,
}

/// Family of the base distribution the encoder parameterizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Base {
    Gaussian,
    Laplacian,
}

impl PriorKind {
    pub const ALL: [PriorKind; 7] = [
        PriorKind::Gaussian,
        PriorKind::Laplacian,
        PriorKind::ThreshGaussian,
        PriorKind::ThreshLaplacian,
        PriorKind::ThreshGaussianGamma,
        PriorKind::ThreshLaplacianGamma,
        PriorKind::SpikeSlab,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PriorKind::Gaussian => "gaussian",
            PriorKind::Laplacian => "laplacian",
            PriorKind::ThreshGaussian => "thresh_gaussian",
            PriorKind::ThreshLaplacian => "thresh_laplacian",
            PriorKind::ThreshGaussianGamma => "thresh_gaussian_gamma",
            PriorKind::ThreshLaplacianGamma => "thresh_laplacian_gamma",
            PriorKind::SpikeSlab => "spike_slab",
        }
    }

    pub fn base(self) -> Base {
        match self {
            PriorKind::Laplacian | PriorKind::ThreshLaplacian | PriorKind::ThreshLaplacianGamma => Base::Laplacian,
            _ => Base::Gaussian,
        }
    }

    pub fn thresholded(self) -> bool {
        matches!(
            self,
            PriorKind::ThreshGaussian | PriorKind::ThreshLaplacian | PriorKind::ThreshGaussianGamma | PriorKind::ThreshLaplacianGamma
        )
    }

    /// Whether the threshold is inferred with a Gamma posterior.
    pub fn gamma(self) -> bool {
        matches!(self, PriorKind::ThreshGaussianGamma | PriorKind::ThreshLaplacianGamma)
    }

    pub fn head_names(self) -> &'static [&'static str] {
        if self.gamma() {
            &["shift", "log_scale", "log_alpha", "log_beta"]
        } else if self == PriorKind::SpikeSlab {
            &["shift", "log_scale", "spike_logit"]
        } else {
            &["shift", "log_scale"]
        }
    }

    /// Threshold that leaves a fraction `keep` of prior samples nonzero.
    pub fn calibrated_lambda(self, prior_scale: f64, keep: f64) -> f64 {
        match self.base() {
            Base::Laplacian => dist::laplace_threshold_for_spike(1.0 - keep, prior_scale),
            Base::Gaussian => dist::gaussian_threshold_for_spike(1.0 - keep, prior_scale),
        }
    }

    /// Default fixed threshold: 0.25 for Laplacian bases, and the 10%-nonzero
    /// threshold for Gaussian bases.
    pub fn default_lambda(self, prior_scale: f64) -> f64 {
        match self.base() {
            Base::Laplacian => 0.25,
            Base::Gaussian => self.calibrated_lambda(prior_scale, 0.1),
        }
    }
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PriorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PriorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown prior kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Backbone widths; `None` scales 512-1024-512-256 by `latent_dim / 256`.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    pub latent_dim: usize,
    pub prior_kind: PriorKind,
    pub prior_scale: f64,
    pub lambda0: f64,
    pub alpha0: f64,
    /// Prior slab probability for the Spike-and-Slab variant.
    pub spike_prior: f64,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, latent_dim: usize, prior_kind: PriorKind) -> Self {
        let prior_scale = 0.1;
        EncoderConfig {
            input_dim,
            hidden: None,
            latent_dim,
            prior_kind,
            prior_scale,
            lambda0: prior_kind.default_lambda(prior_scale),
            alpha0: 3.0,
            spike_prior: 0.1,
        }
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        match &self.hidden {
            Some(h) => h.clone(),
            None => [2, 4, 2, 1].iter().map(|m| m * self.latent_dim).collect(),
        }
    }

    /// Gamma prior rate `alpha0 / lambda0`, so the prior mean threshold is `lambda0`.
    pub fn beta0(&self) -> f64 {
        self.alpha0 / self.lambda0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.input_dim == 0 || self.latent_dim == 0 {
            return bad("encoder dims must be at least 1");
        }
        if self.hidden_dims().iter().any(|&h| h == 0) {
            return bad("hidden widths must be at least 1");
        }
        if !(self.prior_scale > 0.0 && self.prior_scale.is_finite()) {
            return bad("prior_scale must be positive");
        }
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return bad("lambda0 must be nonnegative");
        }
        if self.prior_kind.gamma() && !(self.lambda0 > 0.0 && self.alpha0 > 0.0) {
            return bad("Gamma threshold prior needs lambda0 > 0 and alpha0 > 0");
        }
        if !(self.spike_prior > 0.0 && self.spike_prior < 1.0) {
            return bad("spike_prior must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Per-iteration warm-up schedules, stored as closed forms of the iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupState {
    pub iteration: u64,
    /// Multiplier on the inferred scale.
    pub omega: f64,
    /// Gumbel-sigmoid temperature.
    pub tau: f64,
    /// Spike-and-Slab KL weight multiplier.
    pub kl_ramp: f64,
}

impl WarmupState {
    pub fn at(t: u64) -> Self {
        let tf = t as f64;
        WarmupState {
            iteration: t,
            omega: (0.1 + 2e-4 * tf).min(1.0),
            tau: 0.9995f64.powf(tf).max(0.5),
            kl_ramp: (2e-4 * (tf - 1500.0).max(0.0)).min(1.0),
        }
    }

    pub fn start() -> Self {
        Self::at(0)
    }

    /// All schedules at their final values.
    pub fn settled() -> Self {
        Self::at(1_000_000)
    }

    pub fn advance(&mut self) {
        *self = Self::at(self.iteration + 1);
    }
}

/// Posterior parameters on a graph. `log_scale` already includes the warm-up
/// factor; for a Gaussian base it is `2 log sigma`, for a Laplacian `log b`.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorParams<'g, T: Scalar> {
    pub kind: PriorKind,
    pub shift: Var<'g, T>,
    pub log_scale: Var<'g, T>,
    pub gamma: Option<GammaParams<'g, T>>,
    pub spike_logit: Option<Var<'g, T>>,
    pub tau: T,
}

impl<'g, T: Scalar> PosteriorParams<'g, T> {
    pub fn gaussian(&self) -> GaussianParams<'g, T> {
        GaussianParams { mu: self.shift, log_var: self.log_scale }
    }

    pub fn laplacian(&self) -> LaplacianParams<'g, T> {
        LaplacianParams { mu: self.shift, log_b: self.log_scale }
    }

    pub fn spike_slab(&self) -> Option<SpikeSlabParams<'g, T>> {
        self.spike_logit.map(|l| SpikeSlabParams { spike_logit: l, slab: self.gaussian(), temperature: self.tau })
    }

    /// Plain values, detached from the graph.
    pub fn values(&self) -> PosteriorValues<T> {
        PosteriorValues {
            kind: self.kind,
            tau: self.tau,
            shift: self.shift.to_tensor(),
            log_scale: self.log_scale.to_tensor(),
            alpha: self.gamma.map(|g| g.alpha.to_tensor()),
            beta: self.gamma.map(|g| g.beta.to_tensor()),
            spike_logit: self.spike_logit.map(|v| v.to_tensor()),
        }
    }
}

/// Detached posterior parameters, each `[latent, batch]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorValues<T: Scalar> {
    pub kind: PriorKind,
    pub tau: T,
    pub shift: Tensor<T>,
    pub log_scale: Tensor<T>,
    pub alpha: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
    pub spike_logit: Option<Tensor<T>>,
}

impl<T: Scalar> PosteriorValues<T> {
    /// Places the values on `g` as constants.
    pub fn bind<'g>(&self, g: &'g Graph<T>) -> PosteriorParams<'g, T> {
        let c = |t: &Tensor<T>| g.constant(t.clone());
        PosteriorParams {
            kind: self.kind,
            shift: c(&self.shift),
            log_scale: c(&self.log_scale),
            gamma: match (&self.alpha, &self.beta) {
                (Some(a), Some(b)) => Some(GammaParams { alpha: c(a), beta: c(b) }),
                _ => None,
            },
            spike_logit: self.spike_logit.as_ref().map(c),
            tau: self.tau,
        }
    }

    pub fn batch(&self) -> usize {
        self.shift.cols()
    }

    /// Standard deviation (Gaussian base) or scale `b` (Laplacian base).
    pub fn scale(&self) -> Tensor<T> {
        match self.kind.base() {
            Base::Gaussian => self.log_scale.map(|v| (T::c(0.5) * v).exp()),
            Base::Laplacian => self.log_scale.map(|v| v.exp()),
        }
    }

    /// Threshold per entry: the Gamma posterior mean when inferred, else `lambda0`.
    pub fn threshold(&self, lambda0: T) -> Tensor<T> {
        match (&self.alpha, &self.beta) {
            (Some(a), Some(b)) => a.zip_map(b, |a, b| a / b).expect("alpha and beta share a shape"),
            _ => Tensor::full(self.shift.shape(), lambda0),
        }
    }

    /// Posterior mean of the code `E_q[z]`.
    ///
    /// A thresholded sample is nonzero with probability `gamma` and its
    /// nonzero part is symmetric about the shift, so the mean is `gamma * mu`.
    pub fn mean_code(&self, lambda0: T) -> Tensor<T> {
        let mu = &self.shift;
        if self.kind == PriorKind::SpikeSlab {
            let l = self.spike_logit.as_ref().expect("spike-and-slab posterior has logits");
            return mu.zip_map(l, |m, l| m * crate::tape::sigmoid(l)).unwrap();
        }
        if !self.kind.thresholded() {
            return mu.clone();
        }
        let lam = self.threshold(lambda0);
        let scale = self.scale();
        let keep = lam.zip_map(&scale, |l, s| keep_probability(self.kind.base(), l, s)).unwrap();
        mu.zip_map(&keep, |m, k| m * k).unwrap()
    }
}

/// Probability that a base sample survives thresholding at `lambda`.
pub fn keep_probability<T: Scalar>(base: Base, lambda: T, scale: T) -> T {
    match base {
        Base::Laplacian => (-lambda / scale).exp(),
        Base::Gaussian => T::c(statrs::function::erf::erfc(lambda.f64() / (scale.f64() * std::f64::consts::SQRT_2))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T: Scalar> {
    pub cfg: EncoderConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Encoder<T> {
    /// Fan-in uniform initialization `U(+-1/sqrt(fan_in))` for weights and
    /// backbone biases. Head biases start at the prior: zero shift, log prior
    /// scale, the Gamma prior, and the prior slab logit.
    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, Stream::EncoderInit);
        let mut params = ParamSet::new();
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let shape: Vec<usize> = if cols == 0 { vec![rows] } else { vec![rows, cols] };
            Tensor::from_fn(&shape, |_| T::c(rng.gen_range(-bound..=bound)))
        };
        let mut fan_in = cfg.input_dim;
        for (i, &h) in cfg.hidden_dims().iter().enumerate() {
            params.push(format!("backbone.{i}.weight"), uniform(h, fan_in, fan_in));
            params.push(format!("backbone.{i}.bias"), uniform(h, 0, fan_in));
            fan_in = h;
        }
        let d = cfg.latent_dim;
        for &name in cfg.prior_kind.head_names() {
            params.push(format!("head.{name}.weight"), uniform(d, fan_in, fan_in));
            let b = match name {
                // the first forward pass multiplies the scale by omega(0)
                "log_scale" => {
                    let start = if cfg.prior_kind == PriorKind::SpikeSlab { 1.0 } else { WarmupState::start().omega };
                    let ln_scale = (cfg.prior_scale / start).ln();
                    match cfg.prior_kind.base() {
                        Base::Gaussian => 2.0 * ln_scale,
                        Base::Laplacian => ln_scale,
                    }
                }
                "log_alpha" => cfg.alpha0.ln(),
                "log_beta" => cfg.beta0().ln(),
                "spike_logit" => (cfg.spike_prior / (1.0 - cfg.spike_prior)).ln(),
                _ => 0.0,
            };
            params.push(format!("head.{name}.bias"), Tensor::full(&[d], T::c(b)));
        }
        Ok(Encoder { cfg, params })
    }

    /// Wraps existing parameters after checking their shapes.
    pub fn from_params(cfg: EncoderConfig, params: ParamSet<T>) -> Result<Self> {
        let reference = Encoder::<T>::init(cfg.clone(), 0)?;
        let same = reference.params.names() == params.names()
            && reference.params.tensors().iter().zip(params.tensors()).all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::Format("encoder parameters do not match the configuration".into()));
        }
        Ok(Encoder { cfg, params })
    }

    /// Forward pass. `vars` are this encoder's parameters bound to the graph
    /// of `x`, which is `[input_dim, batch]`.
    pub fn encode<'g>(&self, vars: &[Var<'g, T>], x: Var<'g, T>, warmup: &WarmupState) -> Result<PosteriorParams<'g, T>> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid("encode: parameter count mismatch"));
        }
        let xs = x.shape();
        if xs.len() != 2 || xs[0] != self.cfg.input_dim {
            return Err(Error::shape("encode", format!("input {:?}, expected [{}, batch]", xs, self.cfg.input_dim)));
        }
        let layers = self.cfg.hidden_dims().len();
        let mut h = x;
        for i in 0..layers {
            h = vars[2 * i].matmul(h)?.add_col_bias(vars[2 * i + 1])?.relu()?;
        }
        let heads = &vars[2 * layers..];
        let head = |i: usize| -> Result<Var<'g, T>> { heads[2 * i].matmul(h)?.add_col_bias(heads[2 * i + 1]) };
        let kind = self.cfg.prior_kind;
        let shift = head(0)?;
        let mut log_scale = head(1)?;
        if kind != PriorKind::SpikeSlab {
            let w = T::c(warmup.omega.ln());
            let w = if kind.base() == Base::Gaussian { w + w } else { w };
            if w != T::zero() {
                log_scale = log_scale.add_scalar(w)?;
            }
        }
        let gamma = if kind.gamma() { Some(GammaParams::from_logs(head(2)?, head(3)?)?) } else { None };
        let spike_logit = if kind == PriorKind::SpikeSlab { Some(head(2)?) } else { None };
        Ok(PosteriorParams { kind, shift, log_scale, gamma, spike_logit, tau: T::c(warmup.tau) })
    }

    /// Forward pass on plain values; `x` is `[input_dim, batch]`.
    pub fn encode_values(&self, x: &Tensor<T>, warmup: &WarmupState) -> Result<PosteriorValues<T>> {
        let g = Graph::new();
        let vars = self.params.bind_const(&g);
        Ok(self.encode(&vars, g.constant(x.clone()), warmup)?.values())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check_many;

    fn small(kind: PriorKind) -> EncoderConfig {
        let mut c = EncoderConfig::new(4, 3, kind);
        c.hidden = Some(vec![5, 4]);
        c
    }

    #[test]
    fn zero_network_gives_zero_heads() {
        let mut enc = Encoder::<f64>::init(small(PriorKind::ThreshLaplacian), 1).unwrap();
        enc.params.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let x = Tensor::from_fn(&[4, 6], |i| i as f64 - 3.0);
        let p = enc.encode_values(&x, &WarmupState::settled()).unwrap();
        assert!(p.shift.data().iter().all(|&v| v == 0.0));
        assert!(p.log_scale.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_shapes() {
        for kind in PriorKind::ALL {
            let enc = Encoder::<f64>::init(small(kind), 1).unwrap();
            let p = enc.encode_values(&Tensor::zeros(&[4, 7]), &WarmupState::start()).unwrap();
            assert_eq!(p.shift.shape(), &[3, 7]);
            assert_eq!(p.log_scale.shape(), &[3, 7]);
            assert_eq!(p.alpha.is_some(), kind.gamma());
            assert_eq!(p.spike_logit.is_some(), kind == PriorKind::SpikeSlab);
            if let Some(a) = &p.alpha {
                assert_eq!(a.shape(), &[3, 7]);
            }
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = small(PriorKind::Gaussian);
        let a = Encoder::<f64>::init(cfg.clone(), 3).unwrap();
        let b = Encoder::<f64>::init(cfg.clone(), 3).unwrap();
        let c = Encoder::<f64>::init(cfg, 4).unwrap();
        assert_eq!(a.params.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.params.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_ne!(a.params.flatten(), c.params.flatten());
        for (name, t) in a.params.names().iter().zip(a.params.tensors()) {
            if name.ends_with("weight") {
                let bound = 1.0 / (t.cols() as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn scale_head_starts_at_prior_after_warmup_factor() {
        for (kind, want) in [(PriorKind::ThreshLaplacian, 0.0), (PriorKind::Gaussian, 0.0), (PriorKind::SpikeSlab, 2.0 * 0.1f64.ln())] {
            let enc = Encoder::<f64>::init(small(kind), 0).unwrap();
            let bias = enc.params.get("head.log_scale.bias").unwrap();
            assert!(bias.data().iter().all(|v| (v - want).abs() < 1e-12), "{kind}");
        }
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        for kind in [PriorKind::ThreshLaplacianGamma, PriorKind::SpikeSlab] {
            let enc = Encoder::<f64>::init(small(kind), 2).unwrap();
            let mut inputs: Vec<Tensor<f64>> = enc.params.tensors().to_vec();
            inputs.push(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin()));
            let n = enc.params.len();
            let rep = grad_check_many(
                |_, v| {
                    let p = enc.encode(&v[..n], v[n], &WarmupState::at(100))?;
                    let mut acc = p.shift.square()?.sum()?.add(p.log_scale.scale(0.3)?.exp()?.sum()?)?;
                    if let Some(gm) = p.gamma {
                        acc = acc.add(gm.alpha.mul(gm.beta)?.sum()?)?;
                    }
                    if let Some(l) = p.spike_logit {
                        acc = acc.add(l.sigmoid()?.sum()?)?;
                    }
                    Ok(acc)
                },
                &inputs,
                1e-6,
            )
            .unwrap();
            assert!(rep.max_rel_err < 1e-5, "{kind}: {}", rep.max_rel_err);
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let enc = Encoder::<f64>::init(small(PriorKind::ThreshGaussianGamma), 5).unwrap();
        let x = Tensor::from_fn(&[4, 5], |i| (i as f64).cos());
        let w = WarmupState::at(17);
        assert_eq!(enc.encode_values(&x, &w).unwrap(), enc.encode_values(&x, &w).unwrap());
    }

    #[test]
    fn omega_scales_inferred_scale() {
        let enc = Encoder::<f64>::init(small(PriorKind::Laplacian), 5).unwrap();
        let x = Tensor::from_fn(&[4, 2], |i| i as f64);
        let full = enc.encode_values(&x, &WarmupState::settled()).unwrap().scale();
        let early = enc.encode_values(&x, &WarmupState::start()).unwrap().scale();
        for (f, e) in full.data().iter().zip(early.data()) {
            assert!((e / f - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn warmup_closed_forms() {
        let w = WarmupState::start();
        assert_eq!((w.omega, w.tau, w.kl_ramp), (0.1, 1.0, 0.0));
        let mut s = WarmupState::start();
        for t in 1..=8000u64 {
            s.advance();
            assert_eq!(s, WarmupState::at(t));
            assert!((s.omega - (0.1 + 2e-4 * t as f64).min(1.0)).abs() < 1e-15);
            assert!((s.tau - 0.9995f64.powi(t as i32).max(0.5)).abs() < 1e-12);
        }
        assert_eq!(WarmupState::at(1500).kl_ramp, 0.0);
        assert!((WarmupState::at(1501).kl_ramp - 2e-4).abs() < 1e-15);
        assert_eq!(WarmupState::at(6500).kl_ramp, 1.0);
        assert_eq!(WarmupState::at(4500).omega, 1.0);
        assert_eq!(WarmupState::at(5000).tau, 0.5);
    }

    #[test]
    fn config_validation() {
        let mut c = small(PriorKind::ThreshLaplacian);
        assert!(c.validate().is_ok());
        c.prior_scale = 0.0;
        assert!(c.validate().is_err());
        let mut c = small(PriorKind::ThreshLaplacian);
        c.lambda0 = -1.0;
        assert!(c.validate().is_err());
        let mut c = small(PriorKind::Gaussian);
        c.latent_dim = 0;
        assert!(c.validate().is_err());
        assert_eq!(EncoderConfig::new(256, 256, PriorKind::Gaussian).hidden_dims(), vec![512, 1024, 512, 256]);
        assert_eq!("spike_slab".parse::<PriorKind>().unwrap(), PriorKind::SpikeSlab);
        assert!("nope".parse::<PriorKind>().is_err());
    }

    #[test]
    fn default_thresholds_give_expected_sparsity() {
        let lap = PriorKind::ThreshLaplacian.default_lambda(0.1);
        assert_eq!(lap, 0.25);
        let gau = PriorKind::ThreshGaussian.default_lambda(0.1);
        assert!((keep_probability(Base::Gaussian, gau, 0.1) - 0.1).abs() < 1e-9);
        assert!((keep_probability(Base::Laplacian, lap, 0.1) - (-2.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn mean_code_of_thresholded_posterior() {
        let v = PosteriorValues {
            kind: PriorKind::ThreshLaplacian,
            tau: 1.0,
            shift: Tensor::vector(vec![2.0, -1.0]),
            log_scale: Tensor::vector(vec![0.0, 0.0]),
            alpha: None,
            beta: None,
            spike_logit: None,
        };
        let m = v.mean_code(0.5);
        assert!((m.data()[0] - 2.0 * (-0.5f64).exp()).abs() < 1e-15);
        assert!((m.data()[1] + (-0.5f64).exp()).abs() < 1e-15);
    }
}
