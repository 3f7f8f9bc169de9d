//! Named parameter tensors and the checkpoint file format.
//!
//! A checkpoint is one JSON header line followed by the little-endian f64
//! payload of every tensor in header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a trainable leaf of `g`, in order.
    pub fn bind<'g>(&self, g: &'g Graph<T>) -> Vec<Var<'g, T>> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Registers every tensor as a constant of `g`.
    pub fn bind_const<'g>(&self, g: &'g Graph<T>) -> Vec<Var<'g, T>> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Concatenation of all entries, in order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    tensors: Vec<(String, Vec<usize>)>,
    meta: serde_json::Value,
}

const FORMAT: &str = "vsc-checkpoint-1";

/// Writes `params` plus free-form metadata.
pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ParamSet<T>, meta: &serde_json::Value) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        tensors: params.names.iter().cloned().zip(params.tensors.iter().map(|t| t.shape().to_vec())).collect(),
        meta: meta.clone(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let line = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        for t in &params.tensors {
            for &v in t.data() {
                w.write_all(&v.f64().to_le_bytes())?;
            }
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamSet<T>, serde_json::Value)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("{}: bad checkpoint header: {e}", path.display())))?;
    if header.format != FORMAT {
        return Err(Error::Format(format!("{}: unknown checkpoint format {:?}", path.display(), header.format)));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut params = ParamSet::new();
    let mut expected = 0usize;
    for (name, shape) in header.tensors {
        let n = shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| Error::Format(format!("tensor {name}: shape overflow")))?;
        expected = expected.checked_add(n).ok_or_else(|| Error::Format("payload size overflow".into()))?;
        if expected.checked_mul(8).map_or(true, |b| b > payload.len()) {
            return Err(Error::Format(format!("{}: truncated payload at tensor {name}", path.display())));
        }
        let data: Vec<T> = values.by_ref().take(n).map(T::c).collect();
        params.push(name, Tensor::new(shape, data)?);
    }
    if expected * 8 != payload.len() {
        return Err(Error::Format(format!("{}: {} trailing payload bytes", path.display(), payload.len() - expected * 8)));
    }
    Ok((params, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut p = ParamSet::<f64>::new();
        p.push("a", Tensor::matrix(2, 3, vec![0.1, -2.5, 1e-300, 3.0, f64::MIN_POSITIVE, 7.0]).unwrap());
        p.push("b", Tensor::vector(vec![std::f64::consts::PI]));
        let meta = serde_json::json!({"kind": "test", "n": 3});
        save_checkpoint(&path, &p, &meta).unwrap();
        let (q, m) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(m, meta);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut p = ParamSet::<f64>::new();
        p.push("a", Tensor::vector(vec![1.0, 2.0]));
        save_checkpoint(&path, &p, &serde_json::Value::Null).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Format(_))));
    }
}
