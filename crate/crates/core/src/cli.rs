//! Command-line front end: TOML run configs, the `vsc` subcommands, and
//! artifact writing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{load_dataset, read_csv, save_dataset, synthesize, PatchDataset, SyntheticSpec};
use crate::encoder::{EncoderConfig, PriorKind};
use crate::error::{Error, Result};
use crate::fista::{fista_dictionary_learn, FistaConfig};
use crate::metrics::{evaluate, EvalOptions, MetricsReport};
use crate::tape::Tensor;
use crate::trainer::{train, EpochLog, TrainConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Format(_) | Error::Shape { .. } => EXIT_DATA,
        Error::NonFinite { .. } | Error::NumericalAbort { .. } | Error::NonScalarLoss(_) | Error::Sampler(_) => EXIT_NUMERICAL,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// VSCD file; split into train and validation unless `val_path` is set.
    pub path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    /// Generated in memory instead of read from `path`.
    pub synthetic: Option<SyntheticSpec>,
}

/// Encoder settings; unset values resolve to the prior's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub prior: PriorKind,
    pub latent_dim: usize,
    pub hidden: Option<Vec<usize>>,
    pub prior_scale: Option<f64>,
    pub lambda0: Option<f64>,
    pub alpha0: Option<f64>,
    pub spike_prior: Option<f64>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            prior: PriorKind::ThreshLaplacian,
            latent_dim: 256,
            hidden: None,
            prior_scale: None,
            lambda0: None,
            alpha0: None,
            spike_prior: None,
        }
    }
}

impl EncoderSection {
    fn resolve(&mut self, input_dim: usize) -> EncoderConfig {
        let mut cfg = EncoderConfig::new(input_dim, self.latent_dim, self.prior);
        cfg.hidden = self.hidden.clone();
        if let Some(s) = self.prior_scale {
            cfg.prior_scale = s;
            cfg.lambda0 = self.prior.default_lambda(s);
        }
        cfg.lambda0 = self.lambda0.unwrap_or(cfg.lambda0);
        cfg.alpha0 = self.alpha0.unwrap_or(cfg.alpha0);
        cfg.spike_prior = self.spike_prior.unwrap_or(cfg.spike_prior);
        self.hidden = Some(cfg.hidden_dims());
        self.prior_scale = Some(cfg.prior_scale);
        self.lambda0 = Some(cfg.lambda0);
        self.alpha0 = Some(cfg.alpha0);
        self.spike_prior = Some(cfg.spike_prior);
        cfg
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `train.seed` and `eval.seed`; `VSC_SEED` overrides both.
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    /// Save a checkpoint every this many epochs; the final model is always saved.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub fista: FistaConfig,
    #[serde(default)]
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies seed overrides; `env_seed` is the value of `VSC_SEED`.
    pub fn apply_seed(&mut self, env_seed: Option<&str>) -> Result<()> {
        if let Some(s) = env_seed {
            self.seed = Some(s.trim().parse().map_err(|_| Error::Config(format!("VSC_SEED is not an integer: {s:?}")))?);
        }
        let seed = self.seed.unwrap_or(self.train.seed);
        self.seed = Some(seed);
        self.train.seed = seed;
        self.eval.seed = seed;
        Ok(())
    }

    /// SHA-256 of the resolved config without the output directory.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output = None;
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    fn output_dir(&self) -> Result<PathBuf> {
        let dir = self.output.clone().ok_or_else(|| Error::Config("no output directory configured".into()))?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    /// (train, validation) datasets.
    pub fn datasets(&self) -> Result<(PatchDataset<f64>, PatchDataset<f64>)> {
        let seed = self.seed.unwrap_or(self.train.seed);
        let pool = match (&self.data.synthetic, &self.data.path) {
            (Some(_), Some(_)) => return Err(Error::Config("data: set either path or synthetic, not both".into())),
            (Some(spec), None) => synthesize(spec)?,
            (None, Some(p)) => load_dataset(p)?,
            (None, None) => return Err(Error::Config("data: no dataset configured".into())),
        };
        match &self.data.val_path {
            Some(v) => Ok((pool, load_dataset(v)?)),
            None => Ok(pool.split(seed)),
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_epochs(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for l in logs {
        w.serialize(l).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_file(path, &bytes)
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    write_file(&dir.join("metrics.json"), report.to_json()?.as_bytes())?;
    write_file(&dir.join("metrics.csv"), report.to_csv(true)?.as_bytes())
}

fn log_epoch(l: &EpochLog) {
    log::info!(
        "epoch {:>3} loss {:.4} recon {:.4} val {:.4} nnz {:.3} |A| {:.3}",
        l.epoch,
        l.train_loss,
        l.recon,
        l.val_loss,
        l.nonzero_fraction,
        l.dict_norm
    );
}

/// Trains a variational model and writes `config.toml`, `epochs.csv`,
/// checkpoints and the final metrics into the output directory.
pub fn cmd_train(mut cfg: RunConfig) -> Result<MetricsReport> {
    cfg.apply_seed(std::env::var("VSC_SEED").ok().as_deref())?;
    let (train_set, val_set) = cfg.datasets()?;
    let enc = cfg.encoder.resolve(train_set.dim());
    enc.validate()?;
    cfg.train.validate()?;
    let dir = cfg.output_dir()?;
    write_file(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let every = cfg.checkpoint_every;
    let (model, logs) = train(&train_set, &val_set, &enc, &cfg.train, |l, m| {
        log_epoch(l);
        if every > 0 && (l.epoch + 1) % every == 0 {
            Checkpoint::Variational(m.clone()).save(&dir.join(format!("epoch-{:04}.ckpt", l.epoch + 1)))?;
        }
        Ok(())
    })?;
    write_epochs(&dir.join("epochs.csv"), &logs)?;
    let ck = Checkpoint::Variational(model);
    ck.save(&dir.join("model.ckpt"))?;
    let report = evaluate(&ck, &val_set.columns(), &cfg.eval, &cfg.hash()?)?;
    write_report(&dir, &report)?;
    Ok(report)
}

/// FISTA dictionary learning with the same artifacts as [`cmd_train`].
pub fn cmd_fista(mut cfg: RunConfig) -> Result<MetricsReport> {
    cfg.apply_seed(std::env::var("VSC_SEED").ok().as_deref())?;
    let (train_set, val_set) = cfg.datasets()?;
    cfg.fista.validate()?;
    cfg.train.validate()?;
    let dir = cfg.output_dir()?;
    write_file(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let every = cfg.checkpoint_every;
    let (fista, train_cfg) = (cfg.fista.clone(), cfg.train.clone());
    let (dictionary, logs) = fista_dictionary_learn(&train_set, &val_set, cfg.encoder.latent_dim, &cfg.fista, &cfg.train, |l, d| {
        log_epoch(l);
        if every > 0 && (l.epoch + 1) % every == 0 {
            let ck = Checkpoint::Fista { dictionary: d.clone(), fista: fista.clone(), train: train_cfg.clone() };
            ck.save(&dir.join(format!("epoch-{:04}.ckpt", l.epoch + 1)))?;
        }
        Ok(())
    })?;
    write_epochs(&dir.join("epochs.csv"), &logs)?;
    let ck = Checkpoint::Fista { dictionary, fista, train: train_cfg };
    ck.save(&dir.join("model.ckpt"))?;
    let mut eval = cfg.eval.clone();
    eval.lambda = cfg.fista.lambda;
    let report = evaluate(&ck, &val_set.columns(), &eval, &cfg.hash()?)?;
    write_report(&dir, &report)?;
    Ok(report)
}

/// Metrics for any checkpoint on a VSCD dataset.
pub fn cmd_eval(checkpoint: &Path, data: &Path, opts: &EvalOptions) -> Result<MetricsReport> {
    let ck = Checkpoint::<f64>::load(checkpoint)?;
    let ds = load_dataset::<f64>(data)?;
    if ds.dim() != ck.dictionary().data_dim() {
        return Err(Error::shape("eval", format!("data dim {} vs model {}", ds.dim(), ck.dictionary().data_dim())));
    }
    let text = format!("{}:{}", checkpoint.display(), serde_json::to_string(opts).map_err(|e| Error::Format(e.to_string()))?);
    let hash: String = Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    evaluate(&ck, &ds.columns(), opts, &hash)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AtomOrder {
    /// Descending column norm.
    Magnitude,
    /// Dictionary order.
    None,
}

/// Tiles the dictionary columns as square images into a binary PGM (P5).
///
/// Each atom is min-max scaled to 0..255 (constant atoms become mid-gray);
/// tiles are separated by one black pixel.
pub fn dictionary_pgm(a: &Tensor<f64>, order: AtomOrder) -> Result<Vec<u8>> {
    let (dd, d) = (a.rows(), a.cols());
    let side = (dd as f64).sqrt().round() as usize;
    if side * side != dd || d == 0 {
        return Err(Error::shape("export-dict", format!("atom dimension {dd} is not a square")));
    }
    let mut atoms: Vec<usize> = (0..d).collect();
    if order == AtomOrder::Magnitude {
        let norms = a.column_sq_norms();
        atoms.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    }
    let grid = (d as f64).sqrt().ceil() as usize;
    let grid_rows = d.div_ceil(grid);
    let (w, h) = (grid * side + grid - 1, grid_rows * side + grid_rows - 1);
    let mut img = vec![0u8; w * h];
    for (slot, &atom) in atoms.iter().enumerate() {
        let col = a.column(atom);
        let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let (r0, c0) = ((slot / grid) * (side + 1), (slot % grid) * (side + 1));
        for (p, &v) in col.iter().enumerate() {
            let level = if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 };
            img[(r0 + p / side) * w + c0 + p % side] = level;
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&img);
    Ok(out)
}

pub fn cmd_export_dict(checkpoint: &Path, out: &Path, order: AtomOrder) -> Result<()> {
    let ck = Checkpoint::<f64>::load(checkpoint)?;
    write_file(out, &dictionary_pgm(&ck.dictionary().a, order)?)
}

/// Laplace scale giving unit variance per data dimension for `sparsity`
/// unit-norm atoms per datum.
pub fn unit_variance_coef_scale(data_dim: usize, sparsity: usize) -> f64 {
    (data_dim as f64 / (2.0 * sparsity as f64)).sqrt()
}

#[derive(Parser, Debug)]
#[command(name = "vsc", version, about = "Variational sparse coding with thresholded samples")]
pub struct Cli {
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a variational model from a TOML config.
    Train {
        config: PathBuf,
        /// Overrides the configured output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Learn a dictionary with FISTA codes from a TOML config.
    Fista {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compute metrics for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        iwae_k: usize,
        #[arg(long, default_value_t = 1000)]
        snr_draws: usize,
        #[arg(long, default_value_t = 20)]
        jaccard_j: usize,
        #[arg(long, default_value_t = 20.0)]
        lambda: f64,
        #[arg(long, env = "VSC_SEED", default_value_t = 0)]
        seed: u64,
        /// Write metrics.json and metrics.csv here instead of printing JSON.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the dictionary as a tiled PGM image.
    ExportDict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = AtomOrder::Magnitude)]
        sort: AtomOrder,
    },
    /// Generate a synthetic dataset with a known dictionary.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        data_dim: usize,
        #[arg(long, default_value_t = 64)]
        latent_dim: usize,
        #[arg(long, default_value_t = 6)]
        sparsity: usize,
        /// Laplace scale of the coefficients; defaults to unit variance per dimension.
        #[arg(long)]
        coef_scale: Option<f64>,
        #[arg(long, default_value_t = 0.01)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 8000)]
        count: usize,
        #[arg(long, env = "VSC_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Convert a CSV of patches (one per line) to VSCD.
    Convert {
        input: PathBuf,
        out: PathBuf,
    },
}

fn with_output(path: &Path, output: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if output.is_some() {
        cfg.output = output;
    }
    Ok(cfg)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, output } => cmd_train(with_output(&config, output)?).map(|_| ()),
        Command::Fista { config, output } => cmd_fista(with_output(&config, output)?).map(|_| ()),
        Command::Eval { checkpoint, data, iwae_k, snr_draws, jaccard_j, lambda, seed, output } => {
            let opts = EvalOptions { iwae_k, snr_draws, jaccard_j, lambda, seed, ..EvalOptions::default() };
            let report = cmd_eval(&checkpoint, &data, &opts)?;
            match output {
                Some(dir) => {
                    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    write_report(&dir, &report)
                }
                None => {
                    let mut out = std::io::stdout().lock();
                    writeln!(out, "{}", report.to_json()?).map_err(|e| Error::io("stdout", e))
                }
            }
        }
        Command::ExportDict { checkpoint, out, sort } => cmd_export_dict(&checkpoint, &out, sort),
        Command::Synth { out, data_dim, latent_dim, sparsity, coef_scale, noise_sigma, count, seed } => {
            let coef_scale = coef_scale.unwrap_or_else(|| unit_variance_coef_scale(data_dim, sparsity.max(1)));
            let spec = SyntheticSpec { data_dim, latent_dim, sparsity, coef_scale, noise_sigma, count, seed };
            save_dataset(&out, &synthesize::<f64>(&spec)?)
        }
        Command::Convert { input, out } => save_dataset(&out, &read_csv::<f64>(&input)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nepochz = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.fista.lambda, 20.0);
        assert_eq!(cfg.fista.kappa, 1e-3);
        assert_eq!(cfg.train.kappa, 1e-4);
        assert_eq!(cfg.eval.iwae_k, 200);
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("lambda = 20.0"));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn encoder_section_fills_calibrated_threshold() {
        let mut s = EncoderSection { latent_dim: 8, ..EncoderSection::default() };
        let cfg = s.resolve(16);
        assert_eq!(cfg.lambda0, 0.25);
        assert_eq!(s.lambda0, Some(0.25));
        let mut s = EncoderSection { prior: PriorKind::ThreshGaussian, latent_dim: 8, ..EncoderSection::default() };
        // keeps 10% of N(0, 0.1^2) samples
        assert!((s.resolve(16).lambda0 - 0.1 * 1.6448536269514722).abs() < 1e-9);
        let mut s = EncoderSection { latent_dim: 8, lambda0: Some(0.25), ..EncoderSection::default() };
        assert_eq!(s.resolve(16).lambda0, 0.25);
    }

    #[test]
    fn seed_precedence() {
        let mut cfg = RunConfig::from_toml("[train]\nseed = 4").unwrap();
        cfg.apply_seed(None).unwrap();
        assert_eq!((cfg.train.seed, cfg.eval.seed), (4, 4));
        let mut cfg = RunConfig::from_toml("seed = 5\n[train]\nseed = 4").unwrap();
        cfg.apply_seed(None).unwrap();
        assert_eq!(cfg.train.seed, 5);
        cfg.apply_seed(Some("747")).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed), (Some(747), 747));
        assert!(matches!(cfg.apply_seed(Some("x")), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig { output: Some("a".into()), ..RunConfig::default() };
        let b = RunConfig { output: Some("b".into()), ..RunConfig::default() };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = RunConfig { seed: Some(1), ..RunConfig::default() };
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::io("p", std::io::Error::other("x"))), 3);
        assert_eq!(exit_code(&Error::NumericalAbort { iteration: 1, term: "t".into() }), 4);
    }

    #[test]
    fn pgm_tiling_arithmetic() {
        let a = Tensor::from_fn(&[256, 256], |i| (i % 7) as f64);
        let pgm = dictionary_pgm(&a, AtomOrder::Magnitude).unwrap();
        let header = b"P5\n271 271\n255\n";
        assert!(pgm.starts_with(header));
        assert_eq!(pgm.len(), header.len() + 271 * 271);
    }

    #[test]
    fn pgm_constant_atom_is_mid_gray_and_sorted_by_norm() {
        // atom 0 constant, atom 1 a ramp with the larger norm
        let a = Tensor::from_fn(&[4, 2], |i| if i % 2 == 0 { 0.1 } else { (i / 2) as f64 });
        let pgm = dictionary_pgm(&a, AtomOrder::Magnitude).unwrap();
        let header = b"P5\n5 2\n255\n";
        let px = &pgm[header.len()..];
        assert!(pgm.starts_with(header));
        // row 0: ramp tile, separator, constant tile
        assert_eq!(&px[..5], &[0, 85, 0, 128, 128]);
        assert_eq!(&px[5..], &[170, 255, 0, 128, 128]);
        assert!(dictionary_pgm(&Tensor::zeros(&[3, 2]), AtomOrder::None).is_err());
    }

    #[test]
    fn unit_variance_scale() {
        let spec = SyntheticSpec {
            data_dim: 64,
            latent_dim: 64,
            sparsity: 6,
            coef_scale: unit_variance_coef_scale(64, 6),
            noise_sigma: 0.0,
            count: 20000,
            seed: 1,
        };
        let ds = synthesize::<f64>(&spec).unwrap();
        let var = ds.patches.sum_sq() / ds.patches.numel() as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }
}
