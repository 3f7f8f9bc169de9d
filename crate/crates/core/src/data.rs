//! Patch datasets: extraction from images, whitening, synthetic data with a
//! known dictionary, and the VSCD binary format.
//!
//! VSCD layout: the bytes `VSCD`, a version byte, one JSON header line, then
//! the little-endian f64 payload of every tensor listed in the header.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::normalize_columns;
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::tape::Tensor;

const MAGIC: &[u8; 4] = b"VSCD";
const VERSION: u8 = 1;
/// Held-out share, 16k of 96k patches.
pub const VALIDATION_FRACTION: f64 = 16_000.0 / 96_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Natural,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth<T: Scalar> {
    /// `[data_dim, latent_dim]`, unit-norm columns.
    pub dictionary: Tensor<T>,
    /// `[n, latent_dim]`
    pub codes: Tensor<T>,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset<T: Scalar> {
    /// `[n, data_dim]`, one patch per row.
    pub patches: Tensor<T>,
    pub patch_size: Option<usize>,
    pub provenance: Provenance,
    pub truth: Option<GroundTruth<T>>,
}

impl<T: Scalar> PatchDataset<T> {
    pub fn new(patches: Tensor<T>, provenance: Provenance) -> Result<Self> {
        if patches.shape().len() != 2 {
            return Err(Error::shape("PatchDataset", format!("patches must be [n, dim], got {:?}", patches.shape())));
        }
        if !patches.is_finite() {
            return Err(Error::Format("dataset contains non-finite values".into()));
        }
        let patch_size = square_side(patches.shape()[1]);
        Ok(PatchDataset { patches, patch_size, provenance, truth: None })
    }

    pub fn len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.patches.shape()[1]
    }

    /// Selected patches as columns: `[data_dim, idx.len()]`.
    pub fn batch(&self, idx: &[usize]) -> Tensor<T> {
        let d = self.dim();
        let mut out = vec![T::zero(); d * idx.len()];
        for (c, &i) in idx.iter().enumerate() {
            for (r, &v) in self.patches.row(i).iter().enumerate() {
                out[r * idx.len() + c] = v;
            }
        }
        Tensor::new(vec![d, idx.len()], out).expect("sizes agree")
    }

    /// All patches as columns.
    pub fn columns(&self) -> Tensor<T> {
        self.patches.transpose()
    }

    /// Rows `idx` as a new dataset; ground-truth codes follow.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |t: &Tensor<T>| {
            let cols = t.cols();
            let data: Vec<T> = idx.iter().flat_map(|&i| t.row(i).to_vec()).collect();
            Tensor::new(vec![idx.len(), cols], data).expect("sizes agree")
        };
        PatchDataset {
            patches: pick(&self.patches),
            patch_size: self.patch_size,
            provenance: self.provenance,
            truth: self.truth.as_ref().map(|t| GroundTruth { dictionary: t.dictionary.clone(), codes: pick(&t.codes), noise_sigma: t.noise_sigma }),
        }
    }

    /// Seeded split into (train, validation) with the validation share
    /// [`VALIDATION_FRACTION`].
    pub fn split(&self, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut stream(seed, Stream::Split));
        let n_val = (self.len() as f64 * VALIDATION_FRACTION).round() as usize;
        let (val, train) = idx.split_at(n_val);
        (self.subset(train), self.subset(val))
    }
}

fn square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n && n > 0).then_some(s)
}

/// Random `patch_size` squares from `image` (`[H, W]`), flattened row-major.
pub fn extract_patches<T: Scalar>(image: &Tensor<T>, patch_size: usize, count: usize, seed: u64) -> Result<PatchDataset<T>> {
    if image.shape().len() != 2 {
        return Err(Error::shape("extract_patches", "image must be [H, W]"));
    }
    let (h, w) = (image.rows(), image.cols());
    if patch_size == 0 || h < patch_size || w < patch_size {
        return Err(Error::invalid(format!("image {h}x{w} is smaller than patch {patch_size}")));
    }
    let mut rng = stream(seed, Stream::Data);
    let d = patch_size * patch_size;
    let mut data = Vec::with_capacity(count * d);
    for _ in 0..count {
        let r0 = rng.gen_range(0..=h - patch_size);
        let c0 = rng.gen_range(0..=w - patch_size);
        for r in r0..r0 + patch_size {
            data.extend_from_slice(&image.row(r)[c0..c0 + patch_size]);
        }
    }
    let mut ds = PatchDataset::new(Tensor::new(vec![count, d], data)?, Provenance::Natural)?;
    ds.patch_size = Some(patch_size);
    Ok(ds)
}

/// Frequency-domain whitening with the filter `|f| exp(-(f/f0)^4)`,
/// `f0 = 0.4 * Nyquist`, then one variance normalization across all images.
pub fn whiten<T: Scalar>(images: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let mut planner = FftPlanner::<f64>::new();
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        if img.shape().len() != 2 || img.rows() != img.cols() {
            return Err(Error::invalid(format!("whiten needs square images, got {:?}", img.shape())));
        }
        let n = img.rows();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        let mut buf: Vec<Complex<f64>> = img.data().iter().map(|v| Complex::new(v.f64(), 0.0)).collect();
        fft2(&mut buf, n, fft.as_ref());
        let f0 = 0.4 * (n as f64 / 2.0);
        let freq = |i: usize| if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
        for r in 0..n {
            for c in 0..n {
                let f = (freq(r).powi(2) + freq(c).powi(2)).sqrt();
                buf[r * n + c] *= f * (-(f / f0).powi(4)).exp();
            }
        }
        fft2(&mut buf, n, ifft.as_ref());
        let scale = 1.0 / (n * n) as f64;
        out.push(buf.iter().map(|c| c.re * scale).collect::<Vec<f64>>());
    }
    let count: usize = out.iter().map(Vec::len).sum();
    let mean = out.iter().flatten().sum::<f64>() / count.max(1) as f64;
    let var = out.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / count.max(1) as f64;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    images
        .iter()
        .zip(out)
        .map(|(img, v)| Tensor::new(img.shape().to_vec(), v.into_iter().map(|x| T::c(x * inv)).collect()))
        .collect()
}

fn fft2(buf: &mut [Complex<f64>], n: usize, fft: &dyn rustfft::Fft<f64>) {
    for row in buf.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = buf[r * n + c];
        }
        fft.process(&mut col);
        for r in 0..n {
            buf[r * n + c] = col[r];
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub data_dim: usize,
    pub latent_dim: usize,
    /// Nonzeros per code.
    pub sparsity: usize,
    /// Laplace scale of the nonzero coefficients.
    pub coef_scale: f64,
    pub noise_sigma: f64,
    pub count: usize,
    pub seed: u64,
}

/// Data `x = A* z* + noise` with unit-norm Gaussian atoms and exactly
/// `sparsity` Laplace-distributed nonzeros per code.
pub fn synthesize<T: Scalar>(spec: &SyntheticSpec) -> Result<PatchDataset<T>> {
    let (dd, d, k) = (spec.data_dim, spec.latent_dim, spec.sparsity);
    if dd == 0 || d == 0 || k == 0 || k > d {
        return Err(Error::invalid(format!("synthetic spec needs 1 <= sparsity <= latent_dim and positive dims, got {spec:?}")));
    }
    if !(spec.coef_scale > 0.0) || !(spec.noise_sigma >= 0.0) {
        return Err(Error::invalid("coef_scale must be positive and noise_sigma nonnegative"));
    }
    let mut rng = stream(spec.seed, Stream::Data);
    let mut a = Tensor::<f64>::from_fn(&[dd, d], |_| StandardNormal.sample(&mut rng));
    normalize_columns(&mut a);
    let mut z = vec![0.0f64; spec.count * d];
    let all: Vec<usize> = (0..d).collect();
    for row in z.chunks_mut(d) {
        for &i in all.choose_multiple(&mut rng, k) {
            let u: f64 = rng.gen_range(-0.5..0.5);
            row[i] = -spec.coef_scale * u.signum() * (1.0 - 2.0 * u.abs()).max(1e-300).ln();
        }
    }
    let z = Tensor::new(vec![spec.count, d], z)?;
    let mut x = z.matmul(&a.transpose())?;
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        x.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    let mut ds = PatchDataset::new(x.cast(), Provenance::Synthetic)?;
    ds.truth = Some(GroundTruth { dictionary: a.cast(), codes: z.cast(), noise_sigma: spec.noise_sigma });
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct Header {
    provenance: Provenance,
    patch_size: Option<usize>,
    noise_sigma: Option<f64>,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn save_dataset<T: Scalar>(path: &Path, ds: &PatchDataset<T>) -> Result<()> {
    let mut tensors = vec![("patches".to_string(), &ds.patches)];
    if let Some(t) = &ds.truth {
        tensors.push(("dictionary".into(), &t.dictionary));
        tensors.push(("codes".into(), &t.codes));
    }
    let header = Header {
        provenance: ds.provenance,
        patch_size: ds.patch_size,
        noise_sigma: ds.truth.as_ref().map(|t| t.noise_sigma),
        tensors: tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
    };
    let line = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        for (_, t) in &tensors {
            for &v in t.data() {
                w.write_all(&v.f64().to_le_bytes())?;
            }
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

pub fn load_dataset<T: Scalar>(path: &Path) -> Result<PatchDataset<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| bad("file too short for a VSCD header".into()))?;
    if &magic[..4] != MAGIC {
        return Err(bad("bad magic, not a VSCD file".into()));
    }
    if magic[4] != VERSION {
        return Err(bad(format!("unsupported VSCD version {}", magic[4])));
    }
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| bad(format!("bad header: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let mut offset = 0usize;
    let mut read = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
        let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| bad(format!("shape overflow in {name}")))?;
        let bytes = n.checked_mul(8).ok_or_else(|| bad(format!("shape overflow in {name}")))?;
        let end = offset.checked_add(bytes).filter(|&e| e <= payload.len()).ok_or_else(|| bad(format!("truncated payload in {name}")))?;
        let data = payload[offset..end].chunks_exact(8).map(|c| T::c(f64::from_le_bytes(c.try_into().unwrap()))).collect();
        offset = end;
        Tensor::new(shape.to_vec(), data)
    };
    let mut patches = None;
    let mut dictionary = None;
    let mut codes = None;
    for (name, shape) in &header.tensors {
        let t = read(name, shape)?;
        match name.as_str() {
            "patches" => patches = Some(t),
            "dictionary" => dictionary = Some(t),
            "codes" => codes = Some(t),
            other => return Err(bad(format!("unknown tensor {other:?}"))),
        }
    }
    if offset != payload.len() {
        return Err(bad(format!("{} bytes beyond the declared tensors", payload.len() - offset)));
    }
    let patches = patches.ok_or_else(|| bad("no patches tensor".into()))?;
    if patches.shape().len() != 2 {
        return Err(bad("patches must be two-dimensional".into()));
    }
    let mut ds = PatchDataset::new(patches, header.provenance)?;
    ds.patch_size = header.patch_size;
    if let (Some(dictionary), Some(codes)) = (dictionary, codes) {
        ds.truth = Some(GroundTruth { dictionary, codes, noise_sigma: header.noise_sigma.unwrap_or(0.0) });
    }
    Ok(ds)
}

/// Reads comma-separated pixel rows, one patch per line. Blank lines and
/// lines starting with `#` are skipped.
pub fn read_csv<T: Scalar>(path: &Path) -> Result<PatchDataset<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0usize;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        match width {
            None => width = Some(vals.len()),
            Some(w) if w != vals.len() => {
                return Err(Error::Format(format!("{}:{}: expected {w} values, found {}", path.display(), ln + 1, vals.len())))
            }
            _ => {}
        }
        data.extend(vals.into_iter().map(T::c));
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::Format(format!("{}: no data rows", path.display())))?;
    PatchDataset::new(Tensor::new(vec![rows, width], data)?, Provenance::Natural)
}
