//! Serialized learnable state: decoder (and adapter) tensors, optional
//! optimizer moments, and a JSON record of the configuration and progress.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::FrozenEncoder;
use crate::error::{Error, Result};
use crate::model::{Denoiser, DenoiserConfig};
use crate::optim::AdamW;
use crate::store::{self, NamedTensor, TensorMap};
use crate::train::TrainConfig;

const META_KEY: &str = "featdenoise";
const FORMAT: u32 = 1;

/// Optimizer and loss-tracking progress needed to resume training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub config: TrainConfig,
    pub optimizer_step: u64,
    /// Uncorrected exponential moving average of the batch loss.
    pub loss_ema: f64,
    pub initial_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: u32,
    pub model: DenoiserConfig,
    /// Completed training iterations.
    pub iteration: u64,
    pub seed: u64,
    /// Digest of the encoder the decoder was trained against.
    pub encoder_digest: String,
    pub training: Option<TrainingMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: TensorMap,
}

fn param_names(model: &Denoiser) -> Vec<String> {
    model
        .named_parameters()
        .into_iter()
        .flat_map(|(stem, _)| [format!("{stem}.weight"), format!("{stem}.bias")])
        .collect()
}

impl Checkpoint {
    /// Captures the learnable state of `model`, plus optimizer state when
    /// `training` is given (`optimizer` must then be `Some`).
    pub fn capture(
        model: &Denoiser,
        iteration: u64,
        seed: u64,
        training: Option<(TrainingMeta, &AdamW)>,
    ) -> Checkpoint {
        let mut tensors = TensorMap::new();
        for (stem, conv) in model.named_parameters() {
            let w = &conv.weight;
            tensors.insert(
                format!("{stem}.weight"),
                NamedTensor::new(w.shape().to_vec(), w.data().to_vec()),
            );
            let b = conv.bias.clone().expect("learnable convs carry a bias");
            tensors.insert(format!("{stem}.bias"), NamedTensor::new(vec![b.len()], b));
        }
        let meta_training = training.map(|(meta, opt)| {
            for ((name, m), v) in param_names(model).iter().zip(&opt.m).zip(&opt.v) {
                tensors.insert(format!("optim.m.{name}"), NamedTensor::new(vec![m.len()], m.clone()));
                tensors.insert(format!("optim.v.{name}"), NamedTensor::new(vec![v.len()], v.clone()));
            }
            meta
        });
        Checkpoint {
            meta: CheckpointMeta {
                format: FORMAT,
                model: model.config().clone(),
                iteration,
                seed,
                encoder_digest: model.encoder().digest().to_string(),
                training: meta_training,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_string(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        store::to_bytes(&self.tensors, Some(HashMap::from([(META_KEY.to_string(), json)])))
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(Sha256::digest(self.to_bytes()?).iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::parse(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        Checkpoint::parse(bytes, Path::new("<memory>"))
    }

    fn parse(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let (tensors, metadata) = store::parse(bytes, path)?;
        let json = metadata.get(META_KEY).ok_or_else(|| {
            Error::Checkpoint(format!("{} carries no model record; not a checkpoint", path.display()))
        })?;
        let meta: CheckpointMeta = serde_json::from_str(json)
            .map_err(|e| Error::Checkpoint(format!("{}: malformed record: {e}", path.display())))?;
        if meta.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", meta.format)));
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Rebuilds the denoiser on top of `encoder`, which must be the encoder
    /// the checkpoint was trained with.
    pub fn restore(&self, encoder: FrozenEncoder) -> Result<Denoiser> {
        if encoder.digest() != self.meta.encoder_digest {
            return Err(Error::Checkpoint(format!(
                "encoder weights differ from the ones this checkpoint was trained with (sha256 {} vs {})",
                encoder.digest(),
                self.meta.encoder_digest
            )));
        }
        let mut model = Denoiser::new(encoder, self.meta.model.clone(), 0)?;
        for (stem, conv) in model.learnable_mut() {
            let fetch = |suffix: &str, shape: &[usize]| -> Result<Vec<f32>> {
                let name = format!("{stem}.{suffix}");
                let t = self
                    .tensors
                    .get(&name)
                    .ok_or_else(|| Error::TensorMismatch {
                        name: name.clone(),
                        message: "missing from checkpoint".into(),
                    })?;
                if t.shape != shape {
                    return Err(Error::TensorMismatch {
                        name,
                        message: format!("expected shape {shape:?}, found {:?}", t.shape),
                    });
                }
                Ok(t.data.clone())
            };
            let wshape = conv.weight.shape();
            let w = fetch("weight", &wshape)?;
            conv.weight.data_mut().copy_from_slice(&w);
            let b = fetch("bias", &[conv.out_channels()])?;
            conv.bias = Some(b);
        }
        Ok(model)
    }

    /// Optimizer state saved with the checkpoint, laid out for `model`.
    pub fn optimizer(&self, model: &Denoiser) -> Result<Option<AdamW>> {
        let Some(training) = &self.meta.training else {
            return Ok(None);
        };
        let names = param_names(model);
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for name in &names {
            for (prefix, out) in [("optim.m", &mut m), ("optim.v", &mut v)] {
                let key = format!("{prefix}.{name}");
                let t = self.tensors.get(&key).ok_or_else(|| Error::TensorMismatch {
                    name: key.clone(),
                    message: "missing from checkpoint".into(),
                })?;
                out.push(t.data.clone());
            }
        }
        Ok(Some(AdamW {
            config: training.config.optimizer,
            step: training.optimizer_step,
            m,
            v,
        }))
    }
}
