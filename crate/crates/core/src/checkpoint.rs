//! Saved models: a variational model (encoder plus dictionary) or a FISTA
//! dictionary, in the parameter file format of [`crate::params`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, WarmupState};
use crate::error::{Error, Result};
use crate::fista::FistaConfig;
use crate::generator::Dictionary;
use crate::params::{load_checkpoint, save_checkpoint, ParamSet};
use crate::scalar::Scalar;
use crate::trainer::{Model, TrainConfig};

const DICT: &str = "dictionary";

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint<T: Scalar> {
    Variational(Model<T>),
    Fista { dictionary: Dictionary<T>, fista: FistaConfig, train: TrainConfig },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Meta {
    Variational { encoder: EncoderConfig, train: TrainConfig, warmup: WarmupState },
    Fista { fista: FistaConfig, train: TrainConfig },
}

impl<T: Scalar> Checkpoint<T> {
    pub fn dictionary(&self) -> &Dictionary<T> {
        match self {
            Checkpoint::Variational(m) => &m.dictionary,
            Checkpoint::Fista { dictionary, .. } => dictionary,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (mut params, meta) = match self {
            Checkpoint::Variational(m) => (
                m.encoder.params.clone(),
                Meta::Variational { encoder: m.encoder.cfg.clone(), train: m.train.clone(), warmup: m.warmup },
            ),
            Checkpoint::Fista { fista, train, .. } => (ParamSet::new(), Meta::Fista { fista: fista.clone(), train: train.clone() }),
        };
        params.push(DICT, self.dictionary().a.clone());
        let meta = serde_json::to_value(meta).map_err(|e| Error::Format(e.to_string()))?;
        save_checkpoint(path, &params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = load_checkpoint::<T>(path)?;
        let meta: Meta = serde_json::from_value(meta).map_err(|e| Error::Format(format!("{}: bad checkpoint metadata: {e}", path.display())))?;
        let (names, tensors) = (params.names(), params.tensors());
        let at = names.iter().position(|n| n == DICT).ok_or_else(|| Error::Format(format!("{}: no dictionary tensor", path.display())))?;
        let a = tensors[at].clone();
        let mut rest = ParamSet::new();
        for (i, (n, t)) in names.iter().zip(tensors).enumerate() {
            if i != at {
                rest.push(n.clone(), t.clone());
            }
        }
        Ok(match meta {
            Meta::Variational { encoder, train, warmup } => {
                let dictionary = Dictionary::new(a, T::c(train.kappa))?;
                Checkpoint::Variational(Model { encoder: Encoder::from_params(encoder, rest)?, dictionary, warmup, train })
            }
            Meta::Fista { fista, train } => Checkpoint::Fista { dictionary: Dictionary::new(a, T::c(fista.kappa))?, fista, train },
        })
    }
}
