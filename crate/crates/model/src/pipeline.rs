//! Glue between world-frame motion and the latent models: condition
//! assembly, latent sampling and decoding back to feature frames.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Tensor};
use hint_core::geometry::canonical_transform_at;
use hint_core::text::{CommandToken, TextEncoder, ToyTextEncoder, WordTokens};
use hint_core::{apply_transform_frames, relative_transform, CanonicalTransform, FeatureLayout, FrameBlock, Normalizer};
use rand::Rng;

use crate::checkpoint::{load_diffusion, load_vae, LatentStats, DIFFUSION_FILE, VAE_FILE};
use crate::condition::{transform_partner_history, CondBatch, ConditionBundle, PartnerCondition};
use crate::denoiser::{sample_with_steps, Denoiser};
use crate::error::{ModelError, Result};
use crate::nn::{flat_f64, host, Ctx};
use crate::schedule::DiffusionSchedule;
use crate::vae::MotionVae;

pub type EncodedText = (WordTokens, CommandToken);

/// Canonical transform and denoiser conditions for one agent.
#[derive(Debug, Clone)]
pub struct AgentCondition {
    pub transform: CanonicalTransform,
    pub bundle: ConditionBundle,
}

/// Builds every agent's conditions from world-frame histories.
///
/// Each agent is canonicalized at its last history frame; partners appear in
/// the order given, mapped into the target frame through the relative
/// transform between the two canonical frames.
pub fn assemble_conditions(
    layout: &FeatureLayout,
    histories: &[FrameBlock],
    texts: &[&EncodedText],
    window_index: usize,
    total_frames: usize,
) -> Result<Vec<AgentCondition>> {
    if histories.len() != texts.len() {
        return Err(ModelError::shape(format!("{} texts", histories.len()), texts.len()));
    }
    let mut canon = Vec::with_capacity(histories.len());
    for h in histories {
        if h.rows() == 0 {
            return Err(ModelError::InvalidArgument("empty history".into()));
        }
        let x = canonical_transform_at(h, layout, h.rows() - 1)?;
        canon.push((x, apply_transform_frames(h, layout, &x)?));
    }
    let mut out = Vec::with_capacity(histories.len());
    for (a, (xa, ha)) in canon.iter().enumerate() {
        let mut partners = Vec::with_capacity(histories.len().saturating_sub(1));
        for (b, (xb, hb)) in canon.iter().enumerate() {
            if a == b {
                continue;
            }
            let rel = relative_transform(xa, xb);
            partners.push(PartnerCondition {
                history: transform_partner_history(hb, layout, &rel.rotation, &rel.translation)?,
                rotation: rel.rotation,
                translation: rel.translation,
            });
        }
        let (words, command) = texts[a].clone();
        out.push(AgentCondition {
            transform: *xa,
            bundle: ConditionBundle {
                target_history: ha.clone(),
                step_indices: (1..=ha.rows()).collect(),
                partners,
                words,
                command,
                window_index,
                total_frames,
            },
        });
    }
    Ok(out)
}

/// Borrowed view of a VAE and denoiser pair.
pub struct Pipeline<'a> {
    pub vae: &'a MotionVae,
    pub denoiser: &'a Denoiser,
    pub schedule: &'a DiffusionSchedule,
    pub latent_stats: &'a LatentStats,
    pub normalizer: &'a Normalizer,
}

impl Pipeline<'_> {
    pub fn dtype(&self) -> DType {
        self.denoiser.dtype()
    }

    fn stats(&self) -> Result<(Tensor, Tensor)> {
        let l = self.latent_stats.mean.len();
        Ok((
            host(self.latent_stats.mean.clone(), &[1, l], self.dtype())?,
            host(self.latent_stats.std.clone(), &[1, l], self.dtype())?,
        ))
    }

    /// Whitened latent to VAE latent.
    pub fn denormalize_latent(&self, z: &Tensor) -> Result<Tensor> {
        let (mean, std) = self.stats()?;
        Ok(z.broadcast_mul(&std)?.broadcast_add(&mean)?)
    }

    pub fn normalize_latent(&self, z: &Tensor) -> Result<Tensor> {
        let (mean, std) = self.stats()?;
        Ok(z.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    /// Decodes whitened latents into raw canonical future frames.
    pub fn decode(&self, z_norm: &Tensor, cond: &CondBatch) -> Result<Vec<FrameBlock>> {
        let z = self.denormalize_latent(z_norm)?;
        let out = self.vae.decode(&z, &cond.history, &mut Ctx::eval())?;
        split_frames(&out, self.normalizer)
    }

    /// Samples and decodes one future window per bundle.
    pub fn sample_futures(&self, bundles: &[&ConditionBundle], steps: &[usize], rng: &mut impl Rng) -> Result<Vec<FrameBlock>> {
        let cond = CondBatch::build(bundles, self.normalizer, self.dtype())?;
        let z = sample_with_steps(self.denoiser, self.schedule, &cond, steps, rng)?;
        self.decode(&z, &cond)
    }

    pub fn full_steps(&self) -> Vec<usize> {
        (0..self.schedule.steps()).rev().collect()
    }
}

/// `[B, K, d]` normalized tensor to raw frame blocks.
pub fn split_frames(t: &Tensor, normalizer: &Normalizer) -> Result<Vec<FrameBlock>> {
    let (b, k, d) = t.dims3()?;
    let flat = flat_f64(t)?;
    (0..b)
        .map(|i| {
            let block = FrameBlock::new(k, d, flat[i * k * d..(i + 1) * k * d].to_vec())?;
            Ok(normalizer.invert(&block))
        })
        .collect()
}

/// Stacks raw frame blocks into a normalized `[B, rows, d]` tensor.
pub fn stack_frames(blocks: &[&FrameBlock], normalizer: &Normalizer, dtype: DType) -> Result<Tensor> {
    let rows = blocks.first().map(|b| b.rows()).unwrap_or(0);
    let d = blocks.first().map(|b| b.dim()).unwrap_or(0);
    let mut data = Vec::with_capacity(blocks.len() * rows * d);
    for b in blocks {
        if b.rows() != rows || b.dim() != d {
            return Err(ModelError::shape(format!("{rows}×{d}"), format!("{}×{}", b.rows(), b.dim())));
        }
        data.extend(normalizer.apply(b).into_vec());
    }
    host(data, &[blocks.len(), rows, d], dtype)
}

/// Frozen VAE and denoiser loaded from a checkpoint directory.
pub struct Models {
    pub vae: MotionVae,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub latent_stats: LatentStats,
    pub normalizer: Normalizer,
    pub layout: Arc<FeatureLayout>,
    pub encoder: ToyTextEncoder,
    pub vae_checksum: String,
    pub diffusion_checksum: String,
}

impl Models {
    pub fn load(dir: &Path) -> Result<Self> {
        let vae = load_vae(&dir.join(VAE_FILE), DType::F32)?;
        let diff = load_diffusion(&dir.join(DIFFUSION_FILE), DType::F32)?;
        if vae.header.checksum != diff.vae_checksum {
            return Err(ModelError::Checkpoint(format!(
                "diffusion model was trained against VAE {} but {} holds {}",
                diff.vae_checksum,
                VAE_FILE,
                vae.header.checksum
            )));
        }
        if vae.layout != diff.layout {
            return Err(ModelError::Checkpoint("VAE and diffusion layouts differ".into()));
        }
        Self::from_parts(vae.vae, diff.denoiser, diff.schedule, diff.latent_stats, vae.normalizer, vae.layout)
    }

    pub fn from_parts(
        vae: MotionVae,
        denoiser: Denoiser,
        schedule: DiffusionSchedule,
        latent_stats: LatentStats,
        normalizer: Normalizer,
        layout: FeatureLayout,
    ) -> Result<Self> {
        if vae.config.latent_dim != denoiser.config.latent_dim || vae.config.history != denoiser.config.history {
            return Err(ModelError::Config("VAE and denoiser disagree on latent size or history".into()));
        }
        let vae_checksum = vae.checksum()?;
        let diffusion_checksum = denoiser.checksum()?;
        Ok(Self {
            encoder: ToyTextEncoder {
                dim: denoiser.config.text_dim,
            },
            vae,
            denoiser,
            schedule,
            latent_stats,
            normalizer,
            layout: Arc::new(layout),
            vae_checksum,
            diffusion_checksum,
        })
    }

    pub fn pipeline(&self) -> Pipeline<'_> {
        Pipeline {
            vae: &self.vae,
            denoiser: &self.denoiser,
            schedule: &self.schedule,
            latent_stats: &self.latent_stats,
            normalizer: &self.normalizer,
        }
    }

    pub fn history(&self) -> usize {
        self.vae.config.history
    }

    pub fn future(&self) -> usize {
        self.vae.config.future
    }

    pub fn encode_text(&self, text: &str) -> Result<EncodedText> {
        Ok(self.encoder.encode(text)?)
    }
}
