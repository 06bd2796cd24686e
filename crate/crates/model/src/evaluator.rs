//! Contrastive motion/text embedding used to score generations.
//!
//! Scenes are canonicalized on the first agent's first frame, cropped to a
//! fixed clip length and embedded with a per-frame MLP, mean and max pooled
//! over time. Texts go through the hashed command embedding and an MLP.
//! Both land on the unit sphere of a shared space trained with a symmetric
//! InfoNCE objective whose targets treat identical texts as positives.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use hint_core::dataset::Dataset;
use hint_core::geometry::canonical_transform_at;
use hint_core::metrics::{diversity, fid, mm_dist, r_precision, DEFAULT_DIVERSITY_PAIRS, DEFAULT_POOL_SIZE};
use hint_core::text::{TextEncoder, ToyTextEncoder};
use hint_core::{apply_transform_frames, FeatureLayout, FrameBlock, Normalizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::normal_vec;
use crate::error::{ModelError, Result};
use crate::nn::{flat_f64, host, Init, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorConfig {
    pub clip_len: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub text_dim: usize,
    pub temperature: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            clip_len: 64,
            hidden: 128,
            embed_dim: 64,
            text_dim: 64,
            temperature: 0.1,
            steps: 400,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

pub struct Evaluator {
    pub config: EvaluatorConfig,
    pub layout: FeatureLayout,
    pub agents: usize,
    pub normalizer: Normalizer,
    params: ParamStore,
    frame_in: Linear,
    frame_mid: Linear,
    time_embed: Tensor,
    motion_out: Linear,
    text_in: Linear,
    text_out: Linear,
    encoder: ToyTextEncoder,
}

/// One scene: every agent's world-frame frames.
pub type Scene = Vec<FrameBlock>;

impl Evaluator {
    fn build(config: EvaluatorConfig, layout: FeatureLayout, agents: usize, normalizer: Normalizer) -> Result<Self> {
        let mut ps = ParamStore::new(DType::F32, config.seed);
        let (h, e) = (config.hidden, config.embed_dim);
        let width = agents * layout.dim();
        let frame_in = Linear::new(&mut ps, "frame_in", width, h)?;
        let frame_mid = Linear::new(&mut ps, "frame_mid", h, h)?;
        let time_embed = ps.tensor("time_embed", &[config.clip_len, h], Init::Normal { std: 0.02 })?;
        let motion_out = Linear::new(&mut ps, "motion_out", 2 * h, e)?;
        let text_in = Linear::new(&mut ps, "text_in", config.text_dim, h)?;
        let text_out = Linear::new(&mut ps, "text_out", h, e)?;
        Ok(Self {
            encoder: ToyTextEncoder { dim: config.text_dim },
            config,
            layout,
            agents,
            normalizer,
            params: ps,
            frame_in,
            frame_mid,
            time_embed,
            motion_out,
            text_in,
            text_out,
        })
    }

    /// Canonical, cropped (or head-padded) clip as one row per frame with all agents side by side.
    pub fn clip(&self, scene: &[FrameBlock], start: usize) -> Result<FrameBlock> {
        clip_rows(&self.layout, scene, self.agents, self.config.clip_len, start)
    }

    fn motion_forward(&self, clips: &[FrameBlock]) -> Result<Tensor> {
        let (n, l) = (clips.len(), self.config.clip_len);
        let w = self.agents * self.layout.dim();
        let mut data = Vec::with_capacity(n * l * w);
        for c in clips {
            data.extend(self.normalizer.apply(c).into_vec());
        }
        let x = host(data, &[n, l, w], DType::F32)?;
        let h = self.frame_in.forward(&x)?.gelu()?.broadcast_add(&self.time_embed)?;
        let h = self.frame_mid.forward(&h)?.gelu()?;
        let pooled = Tensor::cat(&[h.mean(1)?, h.max(1)?], D::Minus1)?;
        normalize_rows(&self.motion_out.forward(&pooled)?)
    }

    fn text_forward(&self, texts: &[&str]) -> Result<Tensor> {
        let d = self.config.text_dim;
        let mut data = Vec::with_capacity(texts.len() * d);
        for t in texts {
            data.extend(self.encoder.embed_command(t)?.embedding);
        }
        let x = host(data, &[texts.len(), d], DType::F32)?;
        normalize_rows(&self.text_out.forward(&self.text_in.forward(&x)?.gelu()?)?)
    }

    /// Unit-norm embeddings of the first clip of each scene.
    pub fn embed_motion(&self, scenes: &[Scene]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(64) {
            let clips = chunk.iter().map(|s| self.clip(s, 0)).collect::<Result<Vec<_>>>()?;
            out.extend(rows(&self.motion_forward(&clips)?)?);
        }
        Ok(out)
    }

    pub fn embed_text(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(64) {
            out.extend(rows(&self.text_forward(chunk)?)?);
        }
        Ok(out)
    }

    /// Matched-shape Gaussian motions: per-channel mean and spread of the
    /// training clips with independent normal noise.
    pub fn noise_scenes(&self, count: usize, seed: u64) -> Result<Vec<Scene>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, d) = (self.config.clip_len, self.layout.dim());
        (0..count)
            .map(|_| {
                (0..self.agents)
                    .map(|a| {
                        let z = normal_vec(&mut rng, l * d);
                        let data = z
                            .iter()
                            .enumerate()
                            .map(|(i, v)| {
                                let c = a * d + i % d;
                                self.normalizer.mean[c] + self.normalizer.std[c] * v
                            })
                            .collect();
                        Ok(FrameBlock::new(l, d, data)?)
                    })
                    .collect()
            })
            .collect()
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum()
    }
}

fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let n = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.affine(1.0, 1e-12)?;
    Ok(x.broadcast_div(&n)?)
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (_, k) = t.dims2()?;
    Ok(flat_f64(t)?
        .chunks(k)
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect())
}

fn clip_rows(layout: &FeatureLayout, scene: &[FrameBlock], agents: usize, len: usize, start: usize) -> Result<FrameBlock> {
    if scene.len() != agents {
        return Err(ModelError::shape(format!("{agents} agents"), scene.len()));
    }
    if scene.iter().any(|a| a.rows() == 0 || a.rows() != scene[0].rows() || a.dim() != layout.dim()) {
        return Err(ModelError::shape("equal-length, non-empty agent tracks", "ragged scene"));
    }
    let x = canonical_transform_at(&scene[0], layout, start.min(scene[0].rows() - 1))?;
    let d = layout.dim();
    let mut out = FrameBlock::zeros(len, agents * d);
    for (a, frames) in scene.iter().enumerate() {
        let avail = frames.rows().saturating_sub(start);
        let cropped = if avail >= len {
            frames.slice_rows(start, len)
        } else {
            frames.slice_rows(frames.rows() - avail.max(1), avail.max(1)).pad_head(len)
        };
        let canon = apply_transform_frames(&cropped, layout, &x)?;
        for t in 0..len {
            out.row_mut(t)[a * d..(a + 1) * d].copy_from_slice(canon.row(t));
        }
    }
    Ok(out)
}

/// Every scene of a dataset as agent tracks plus its sequence text.
pub fn dataset_scenes(dataset: &Dataset) -> (Vec<Scene>, Vec<String>) {
    dataset
        .scenes
        .iter()
        .map(|s| (s.agents.iter().map(|a| a.frames.clone()).collect(), s.text.clone()))
        .unzip()
}

/// Symmetric contrastive loss; `same[i][j]` marks identical texts.
fn info_nce(m: &Tensor, t: &Tensor, targets: &Tensor, temperature: f64) -> Result<Tensor> {
    let logits = m.matmul(&t.t()?)?.affine(1.0 / temperature, 0.0)?;
    let side = |x: &Tensor| -> Result<Tensor> {
        let max = x.max_keepdim(D::Minus1)?.detach();
        let shifted = x.broadcast_sub(&max)?;
        let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
        let logp = shifted.broadcast_sub(&lse)?;
        Ok(logp.mul(targets)?.sum(D::Minus1)?.neg()?.mean_all()?)
    };
    Ok(side(&logits)?.add(&side(&logits.t()?)?)?.affine(0.5, 0.0)?)
}

pub fn train_evaluator(dataset: &Dataset, config: &EvaluatorConfig) -> Result<Evaluator> {
    let (scenes, texts) = dataset_scenes(dataset);
    if scenes.len() < 2 {
        return Err(ModelError::Core(hint_core::Error::InsufficientSamples {
            needed: 2,
            found: scenes.len(),
        }));
    }
    let agents = scenes[0].len();
    let layout = (*dataset.layout).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let crop = |rng: &mut ChaCha8Rng, s: &Scene| -> Result<FrameBlock> {
        let room = s[0].rows().saturating_sub(config.clip_len);
        clip_rows(&layout, s, agents, config.clip_len, rng.random_range(0..=room))
    };
    let fit_clips = scenes.iter().map(|s| crop(&mut rng, s)).collect::<Result<Vec<_>>>()?;
    let normalizer = Normalizer::fit(fit_clips.iter().flat_map(|c| c.iter_rows()))?;
    let ev = Evaluator::build(config.clone(), layout.clone(), agents, normalizer)?;
    let mut opt = AdamW::new(
        ev.params.vars(),
        ParamsAdamW {
            lr: config.lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let b = config.batch_size.min(scenes.len());
    for _ in 0..config.steps {
        let mut idx: Vec<usize> = (0..scenes.len()).collect();
        for i in 0..b {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(b);
        let clips = idx.iter().map(|&i| crop(&mut rng, &scenes[i])).collect::<Result<Vec<_>>>()?;
        let batch_texts: Vec<&str> = idx.iter().map(|&i| texts[i].as_str()).collect();
        let mut same = Vec::with_capacity(b * b);
        for i in 0..b {
            let n = batch_texts.iter().filter(|t| **t == batch_texts[i]).count() as f64;
            same.extend(batch_texts.iter().map(|t| if *t == batch_texts[i] { 1.0 / n } else { 0.0 }));
        }
        let targets = host(same, &[b, b], DType::F32)?;
        let loss = info_nce(&ev.motion_forward(&clips)?, &ev.text_forward(&batch_texts)?, &targets, config.temperature)?;
        opt.step(&loss.backward()?)?;
    }
    Ok(ev)
}

/// R@Top3, FID against the reference scenes, MM Dist and Diversity.
pub fn score(
    evaluator: &Evaluator,
    generated: &[Scene],
    texts: &[String],
    reference: &[Scene],
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    if generated.len() != texts.len() {
        return Err(ModelError::shape(format!("{} texts", generated.len()), texts.len()));
    }
    let gm = evaluator.embed_motion(generated)?;
    let rm = evaluator.embed_motion(reference)?;
    let text_refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let te = evaluator.embed_text(&text_refs)?;
    let pool = DEFAULT_POOL_SIZE.min(gm.len());
    let mut out = BTreeMap::new();
    out.insert("R@Top3".to_string(), r_precision(&gm, &te, pool, 3, seed)?);
    out.insert("FID".to_string(), fid(&gm, &rm)?);
    out.insert("MM Dist".to_string(), mm_dist(&gm, &te)?);
    out.insert("Diversity".to_string(), diversity(&gm, DEFAULT_DIVERSITY_PAIRS, seed)?);
    Ok(out)
}
