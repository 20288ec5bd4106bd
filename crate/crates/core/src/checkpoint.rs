//! Checkpoints: every parameter and optimizer buffer in a tensor container,
//! with configuration, vocabularies, RNG position and metrics history in the
//! header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, Container};
use crate::data::Vocabularies;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SanModel};
use crate::optim::Adamax;
use crate::rng::RngState;
use crate::train::{EpochMetrics, TrainConfig, Trainer};

pub const CHECKPOINT_FORMAT: &str = "joint-san-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub format_version: u32,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub vocabularies: Vocabularies,
    pub epoch: usize,
    pub best_dev_f1: Option<f64>,
    pub rng: RngState,
    pub adamax_step: u64,
    pub history: Vec<EpochMetrics>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: SanModel,
    pub optimizer: Adamax,
}

pub fn encode_checkpoint(trainer: &Trainer, vocabularies: &Vocabularies) -> Vec<u8> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        format_version: CHECKPOINT_VERSION,
        train_config: trainer.config.clone(),
        model_config: trainer.model.config.clone(),
        vocabularies: vocabularies.clone(),
        epoch: trainer.epoch,
        best_dev_f1: trainer.best_dev_f1,
        rng: RngState::capture(&trainer.rng),
        adamax_step: trainer.optimizer.step,
        history: trainer.history.clone(),
    };
    let mut tensors = Vec::new();
    for entry in trainer.model.params.entries() {
        tensors.push((format!("param/{}", entry.name), entry.value.clone()));
    }
    for (k, entry) in trainer.model.params.entries().iter().enumerate() {
        if let (Some(m), Some(u)) = (&trainer.optimizer.m[k], &trainer.optimizer.u[k]) {
            tensors.push((format!("adamax.m/{}", entry.name), m.clone()));
            tensors.push((format!("adamax.u/{}", entry.name), u.clone()));
        }
    }
    codec::encode(&Container {
        meta: serde_json::to_value(&meta).expect("checkpoint metadata serializes"),
        tensors,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let container = codec::decode(bytes)?;
    let meta: CheckpointMeta = serde_path_to_error::deserialize(container.meta.clone())
        .map_err(|e| Error::parse(format!("checkpoint metadata {}", e.path()), e.inner()))?;
    if meta.format != CHECKPOINT_FORMAT || meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format {} v{} is not {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}",
            meta.format, meta.format_version
        )));
    }
    let model = SanModel::from_tensors(meta.model_config.clone(), |name| container.get(&format!("param/{name}")))?;
    let mut optimizer = Adamax::new(&model.params);
    optimizer.step = meta.adamax_step;
    for (k, entry) in model.params.entries().iter().enumerate() {
        if !entry.trainable {
            continue;
        }
        for (slot, prefix) in [(&mut optimizer.m[k], "adamax.m"), (&mut optimizer.u[k], "adamax.u")] {
            let stored = container
                .get(&format!("{prefix}/{}", entry.name))
                .ok_or_else(|| Error::Incompatible(format!("missing optimizer state {prefix}/{}", entry.name)))?;
            if stored.shape() != entry.value.shape() {
                return Err(Error::Incompatible(format!("optimizer state {prefix}/{} has the wrong shape", entry.name)));
            }
            *slot = Some(stored.clone());
        }
    }
    Ok(Checkpoint { meta, model, optimizer })
}

impl Checkpoint {
    /// Resumable trainer positioned exactly where the checkpoint was taken.
    pub fn into_trainer(self) -> Result<Trainer> {
        let rng = self
            .meta
            .rng
            .restore()
            .ok_or_else(|| Error::parse("checkpoint metadata rng", "invalid random stream state"))?;
        Ok(Trainer {
            config: self.meta.train_config,
            model: self.model,
            optimizer: self.optimizer,
            rng,
            epoch: self.meta.epoch,
            best_dev_f1: self.meta.best_dev_f1,
            history: self.meta.history,
        })
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(path: &Path, trainer: &Trainer, vocabularies: &Vocabularies) -> Result<()> {
    write_atomic(path, &encode_checkpoint(trainer, vocabularies))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
