//! Per-call denoiser conditions and their batched tensor form.

use candle_core::{DType, Tensor};
use hint_core::geometry::apply_transform_frames;
use hint_core::text::{CommandToken, WordTokens};
use hint_core::{CanonicalTransform, FeatureLayout, FrameBlock, Normalizer, RotationMatrix3, Vec3};

use crate::error::{ModelError, Result};
use crate::nn::host;

#[derive(Debug, Clone, PartialEq)]
pub struct PartnerCondition {
    /// Partner history already expressed in the target's canonical frame.
    pub history: FrameBlock,
    pub rotation: RotationMatrix3,
    pub translation: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub target_history: FrameBlock,
    pub step_indices: Vec<usize>,
    pub partners: Vec<PartnerCondition>,
    pub words: WordTokens,
    pub command: CommandToken,
    pub window_index: usize,
    pub total_frames: usize,
}

/// Maps a partner's canonical history into the target frame, `h ↦ R·h + T` per channel role.
pub fn transform_partner_history(
    history: &FrameBlock,
    layout: &FeatureLayout,
    rotation: &RotationMatrix3,
    translation: &Vec3,
) -> Result<FrameBlock> {
    let x = CanonicalTransform {
        rotation: *rotation,
        translation: *translation,
    };
    Ok(apply_transform_frames(history, layout, &x)?)
}

impl ConditionBundle {
    pub fn validate(&self, history: usize, dim: usize, text_dim: usize) -> Result<()> {
        let expect = |b: &FrameBlock, what: &str| {
            if b.rows() != history || b.dim() != dim {
                Err(ModelError::shape(format!("{what} {history}×{dim}"), format!("{}×{}", b.rows(), b.dim())))
            } else {
                Ok(())
            }
        };
        expect(&self.target_history, "target history")?;
        for p in &self.partners {
            expect(&p.history, "partner history")?;
        }
        if self.step_indices != (1..=history).collect::<Vec<_>>() {
            return Err(ModelError::InvalidArgument(format!("step indices must be exactly 1..={history}")));
        }
        if self.words.is_empty() || self.words.mask.len() != self.words.len() {
            return Err(ModelError::InvalidArgument("word tokens are missing".into()));
        }
        if self.words.embeddings.iter().any(|e| e.len() != text_dim) || self.command.embedding.len() != text_dim {
            return Err(ModelError::shape(format!("text dim {text_dim}"), "other"));
        }
        Ok(())
    }
}

/// Relative transform features: flattened 6D rotation then translation.
pub fn relative_features(rotation: &RotationMatrix3, translation: &Vec3) -> [f64; 9] {
    let r = rotation.to_rot6d().0;
    [r[0], r[1], r[2], r[3], r[4], r[5], translation[0], translation[1], translation[2]]
}

/// Padded tensors for a batch of bundles.
#[derive(Debug, Clone)]
pub struct CondBatch {
    /// `[B, H, d]`, normalized.
    pub history: Tensor,
    /// `[B, P·H, d]`, normalized; at least one partner slot even when none exist.
    pub partners: Tensor,
    /// `[B, P·H]`, 1 for real partner tokens.
    pub partner_mask: Tensor,
    /// `[B, P·H, 9]`.
    pub relative: Tensor,
    /// `[B, L+1, e]`: word tokens then the command token.
    pub text: Tensor,
    pub text_mask: Tensor,
    pub window_index: Vec<usize>,
    pub total_frames: Vec<usize>,
}

impl CondBatch {
    pub fn build(bundles: &[&ConditionBundle], normalizer: &Normalizer, dtype: DType) -> Result<Self> {
        let b = bundles.len();
        if b == 0 {
            return Err(ModelError::InvalidArgument("empty condition batch".into()));
        }
        let h = bundles[0].target_history.rows();
        let d = bundles[0].target_history.dim();
        let e = bundles[0].command.embedding.len();
        for c in bundles {
            c.validate(h, d, e)?;
        }
        let p = bundles.iter().map(|c| c.partners.len()).max().unwrap_or(0).max(1);
        let l = bundles.iter().map(|c| c.words.len()).max().unwrap_or(1) + 1;

        let mut history = Vec::with_capacity(b * h * d);
        let mut partners = vec![0.0; b * p * h * d];
        let mut partner_mask = vec![0.0; b * p * h];
        let mut relative = vec![0.0; b * p * h * 9];
        let mut text = vec![0.0; b * l * e];
        let mut text_mask = vec![0.0; b * l];
        for (i, c) in bundles.iter().enumerate() {
            history.extend(normalizer.apply(&c.target_history).into_vec());
            for (k, partner) in c.partners.iter().enumerate() {
                let rel = relative_features(&partner.rotation, &partner.translation);
                let norm = normalizer.apply(&partner.history);
                for s in 0..h {
                    let token = (i * p + k) * h + s;
                    partners[token * d..(token + 1) * d].copy_from_slice(norm.row(s));
                    partner_mask[token] = 1.0;
                    relative[token * 9..(token + 1) * 9].copy_from_slice(&rel);
                }
            }
            for (w, emb) in c.words.embeddings.iter().enumerate() {
                let token = i * l + w;
                text[token * e..(token + 1) * e].copy_from_slice(emb);
                text_mask[token] = if c.words.mask[w] { 1.0 } else { 0.0 };
            }
            let token = i * l + l - 1;
            text[token * e..(token + 1) * e].copy_from_slice(&c.command.embedding);
            text_mask[token] = 1.0;
        }
        Ok(Self {
            history: host(history, &[b, h, d], dtype)?,
            partners: host(partners, &[b, p * h, d], dtype)?,
            partner_mask: host(partner_mask, &[b, p * h], dtype)?,
            relative: host(relative, &[b, p * h, 9], dtype)?,
            text: host(text, &[b, l, e], dtype)?,
            text_mask: host(text_mask, &[b, l], dtype)?,
            window_index: bundles.iter().map(|c| c.window_index).collect(),
            total_frames: bundles.iter().map(|c| c.total_frames).collect(),
        })
    }

    pub fn batch(&self) -> usize {
        self.window_index.len()
    }
}
