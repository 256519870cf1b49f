use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::DenoiserConfig;
use crate::embedder::{EmbeddingTable, Vocab};
use crate::error::{Error, Result};
use crate::model::DiffusionModel;
use crate::schedule::ScheduleParams;
use crate::training::{TrainConfig, TrainerState};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const EMBEDDINGS_FILE: &str = "embeddings.safetensors";
pub const VOCAB_FILE: &str = "vocab.txt";

const EMBEDDINGS_KEY: &str = "embeddings";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub vocab_size: usize,
    pub train: Option<TrainConfig>,
    /// Step counters, importance-sampler history and RNG state.
    pub trainer: Option<TrainerState>,
    /// Most frequent token's share among sample outputs at save time.
    pub max_token_frequency: Option<f64>,
    /// SHA-256 of every component file, keyed by file name.
    pub checksums: BTreeMap<String, String>,
}

pub struct Checkpoint {
    pub model: DiffusionModel,
    pub vocab: Vocab,
    pub manifest: Manifest,
}

/// Optional training context stored alongside the model.
#[derive(Debug, Clone, Default)]
pub struct TrainingContext {
    pub train: Option<TrainConfig>,
    pub trainer: Option<TrainerState>,
    pub max_token_frequency: Option<f64>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn save_checkpoint(dir: &Path, model: &DiffusionModel, vocab: &Vocab, context: &TrainingContext) -> Result<()> {
    if vocab.len() != model.table.vocab_size() {
        return Err(Error::invalid(format!(
            "vocabulary has {} tokens but the embedding table has {} rows",
            vocab.len(),
            model.table.vocab_size()
        )));
    }
    if !model.table.rows_distinct()? {
        return Err(Error::invalid("embedding table has identical rows; clamping would be ambiguous"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.varmap().save(dir.join(WEIGHTS_FILE))?;
    let tensors = HashMap::from([(EMBEDDINGS_KEY.to_string(), model.table.weights().clone())]);
    candle_core::safetensors::save(&tensors, dir.join(EMBEDDINGS_FILE))?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    let mut checksums = BTreeMap::new();
    for name in [WEIGHTS_FILE, EMBEDDINGS_FILE, VOCAB_FILE] {
        checksums.insert(name.to_string(), sha256_file(&dir.join(name))?);
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        denoiser: *model.config(),
        schedule: model.schedule.params(),
        vocab_size: vocab.len(),
        train: context.train,
        trainer: context.trainer.clone(),
        max_token_frequency: context.max_token_frequency,
        checksums,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}

fn verify(dir: &Path, manifest: &Manifest, name: &str) -> Result<()> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::Checksum {
            component: name.to_string(),
            reason: "file is missing".into(),
        });
    }
    let want = manifest.checksums.get(name).ok_or_else(|| Error::Checksum {
        component: name.to_string(),
        reason: "no checksum recorded in the manifest".into(),
    })?;
    let got = sha256_file(&path)?;
    if &got != want {
        return Err(Error::Checksum {
            component: name.to_string(),
            reason: format!("sha256 {got} does not match manifest {want}"),
        });
    }
    Ok(())
}

/// Loads and verifies a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    for name in [WEIGHTS_FILE, EMBEDDINGS_FILE, VOCAB_FILE] {
        verify(dir, &manifest, name)?;
    }
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    let schedule = manifest.schedule.build()?;
    let mut model = DiffusionModel::new(manifest.denoiser, schedule, manifest.vocab_size, 0)?;
    model.load_weights(&dir.join(WEIGHTS_FILE))?;
    let mut tensors = candle_core::safetensors::load(dir.join(EMBEDDINGS_FILE), model.table.device())?;
    let emb = tensors.remove(EMBEDDINGS_KEY).ok_or_else(|| Error::Checksum {
        component: EMBEDDINGS_FILE.into(),
        reason: format!("no '{EMBEDDINGS_KEY}' tensor"),
    })?;
    if emb.dims() != model.table.weights().dims() {
        return Err(Error::Checksum {
            component: EMBEDDINGS_FILE.into(),
            reason: format!("shape {:?} does not match the manifest", emb.dims()),
        });
    }
    model.table = EmbeddingTable::from_tensor(emb)?;
    if vocab.len() != manifest.vocab_size {
        return Err(Error::invalid(format!(
            "vocabulary file has {} tokens, manifest says {}",
            vocab.len(),
            manifest.vocab_size
        )));
    }
    Ok(Checkpoint { model, vocab, manifest })
}
