use candle_core::{DType, Device, Var};
use candle_nn::{VarBuilder, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{init_parameters, Denoiser, DenoiserConfig};
use crate::embedder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Everything needed to run the diffusion model: schedule, embeddings and
/// the denoising network with its parameter store.
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub table: EmbeddingTable,
    pub denoiser: Denoiser,
    varmap: VarMap,
}

impl std::fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("schedule", &self.schedule.params())
            .field("denoiser", &self.denoiser)
            .finish_non_exhaustive()
    }
}

impl DiffusionModel {
    pub fn new(config: DenoiserConfig, schedule: NoiseSchedule, vocab_size: usize, seed: u64) -> Result<Self> {
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &device);
        let denoiser = Denoiser::new(config, vb)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_parameters(&varmap, &mut rng)?;
        let table = EmbeddingTable::random(vocab_size, config.embed_dim, &mut rng, &device)?;
        Ok(Self {
            schedule,
            table,
            denoiser,
            varmap,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        self.denoiser.config()
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// Network parameters followed by the embedding table.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        let mut named: Vec<(&String, &Var)> = data.iter().collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        let mut vars: Vec<Var> = named.into_iter().map(|(_, v)| v.clone()).collect();
        vars.push(self.table.var().clone());
        vars
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable_vars().iter().map(|v| v.elem_count()).sum()
    }

    /// Replaces network weights from a safetensors file written by
    /// [`VarMap::save`].
    pub(crate) fn load_weights(&mut self, path: &std::path::Path) -> Result<()> {
        self.varmap.load(path).map_err(|e| Error::Checksum {
            component: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}
