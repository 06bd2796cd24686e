//! Self-describing checkpoint container.
//!
//! ```text
//! "HCKP" | version u32 | header length u64 | header JSON | f32 LE tensor data
//! ```
//!
//! The header carries the model kind and config, the feature layout, the
//! normalizer, optional diffusion schedule and latent statistics, the
//! parameter checksum and a table of `(name, shape, offset)` entries.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::DType;
use hint_core::{FeatureLayout, Normalizer};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{ModelError, Result};
use crate::nn::{flat_f32, ParamStore};
use crate::schedule::DiffusionSchedule;
use crate::vae::{MotionVae, VaeConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const VAE_FILE: &str = "vae.ckpt";
pub const DIFFUSION_FILE: &str = "diffusion.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Per-dimension statistics used to whiten latents for diffusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Vae { config: VaeConfig },
    Diffusion {
        config: DenoiserConfig,
        schedule: DiffusionSchedule,
        latent_stats: LatentStats,
        /// Checksum of the frozen VAE this model was trained against.
        vae_checksum: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelSpec,
    pub layout: FeatureLayout,
    pub normalizer: Normalizer,
    pub checksum: String,
    pub training: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save(path: &Path, model: ModelSpec, layout: &FeatureLayout, normalizer: &Normalizer, training: serde_json::Value, params: &ParamStore) -> Result<CheckpointHeader> {
    let mut tensors = Vec::new();
    let mut data: Vec<f32> = Vec::new();
    for (name, var) in params.named() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: var.dims().to_vec(),
            offset: data.len(),
        });
        data.extend(flat_f32(var.as_tensor())?);
    }
    let header = CheckpointHeader {
        model,
        layout: layout.clone(),
        normalizer: normalizer.clone(),
        checksum: params.checksum()?,
        training,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(header)
}

pub struct RawCheckpoint {
    pub header: CheckpointHeader,
    pub data: Vec<f32>,
}

pub fn read(path: &Path) -> Result<RawCheckpoint> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| ModelError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + len])?;
    let payload = &bytes[16 + len..];
    if payload.len() % 4 != 0 {
        return Err(bad("tensor data is not a whole number of f32 values"));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let needed = header
        .tensors
        .iter()
        .map(|t| t.offset + t.shape.iter().product::<usize>())
        .max()
        .unwrap_or(0);
    if data.len() < needed {
        return Err(bad("truncated tensor data"));
    }
    Ok(RawCheckpoint { header, data })
}

/// Copies the stored tensors into `params` and verifies the checksum.
fn restore(raw: &RawCheckpoint, params: &ParamStore) -> Result<()> {
    if raw.header.tensors.len() != params.len() {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            raw.header.tensors.len(),
            params.len()
        )));
    }
    for t in &raw.header.tensors {
        let n: usize = t.shape.iter().product();
        params.assign(&t.name, &raw.data[t.offset..t.offset + n], &t.shape)?;
    }
    let sum = params.checksum()?;
    if sum != raw.header.checksum {
        return Err(ModelError::Checkpoint(format!(
            "parameter checksum {sum} does not match header {}",
            raw.header.checksum
        )));
    }
    Ok(())
}

pub struct LoadedVae {
    pub vae: MotionVae,
    pub layout: FeatureLayout,
    pub normalizer: Normalizer,
    pub header: CheckpointHeader,
}

pub struct LoadedDiffusion {
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub latent_stats: LatentStats,
    pub vae_checksum: String,
    pub layout: FeatureLayout,
    pub normalizer: Normalizer,
    pub header: CheckpointHeader,
}

pub fn load_vae(path: &Path, dtype: DType) -> Result<LoadedVae> {
    let raw = read(path)?;
    let ModelSpec::Vae { config } = &raw.header.model else {
        return Err(ModelError::Checkpoint(format!("{} is not a VAE checkpoint", path.display())));
    };
    raw.header.layout.validate()?;
    let vae = MotionVae::new(config.clone(), raw.header.layout.dim(), dtype, 0)?;
    restore(&raw, &vae.params)?;
    Ok(LoadedVae {
        vae,
        layout: raw.header.layout.clone(),
        normalizer: raw.header.normalizer.clone(),
        header: raw.header,
    })
}

pub fn load_diffusion(path: &Path, dtype: DType) -> Result<LoadedDiffusion> {
    let raw = read(path)?;
    let ModelSpec::Diffusion {
        config,
        schedule,
        latent_stats,
        vae_checksum,
    } = &raw.header.model
    else {
        return Err(ModelError::Checkpoint(format!("{} is not a diffusion checkpoint", path.display())));
    };
    raw.header.layout.validate()?;
    if schedule.steps() != config.diffusion_steps {
        return Err(ModelError::Checkpoint("schedule length disagrees with the config".into()));
    }
    let denoiser = Denoiser::new(config.clone(), raw.header.layout.dim(), dtype, 0)?;
    restore(&raw, &denoiser.params)?;
    Ok(LoadedDiffusion {
        denoiser,
        schedule: schedule.clone(),
        latent_stats: latent_stats.clone(),
        vae_checksum: vae_checksum.clone(),
        layout: raw.header.layout.clone(),
        normalizer: raw.header.normalizer.clone(),
        header: raw.header,
    })
}
