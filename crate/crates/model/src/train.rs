//! Stage I (VAE) and stage II (latent diffusion) training.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use hint_core::dataset::Dataset;
use hint_core::motion::WindowSpec;
use hint_core::text::{TextEncoder, ToyTextEncoder};
use hint_core::{
    apply_transform_frames, extract_windows, CanonicalTransform, ChannelRole, FacingRule, FeatureLayout, FrameBlock,
    Normalizer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{self, LatentStats, ModelSpec};
use crate::condition::{CondBatch, ConditionBundle};
use crate::denoiser::{normal_vec, Denoiser, DenoiserConfig};
use crate::error::{ModelError, Result};
use crate::losses::{
    diffusion_loss_rows, facing_from_joints, facing_from_rot6d, history_schedule, loss_aff, loss_dist, loss_ori,
    regularizers_active,
};
use crate::nn::{flat_f64, host, Ctx};
use crate::pipeline::{assemble_conditions, split_frames, stack_frames, AgentCondition, EncodedText, Pipeline};
use crate::schedule::{q_sample, DiffusionSchedule};
use crate::vae::{reparameterize, vae_loss, MotionVae, VaeConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lr: f64,
    /// Cosine decay of the learning rate to `lr * lr_final` over all steps; 1 keeps it constant.
    pub lr_final: f64,
    pub beta: f64,
    pub lambda_aff: f64,
    pub lambda_dist: f64,
    pub lambda_ori: f64,
    pub d1: f64,
    pub d2: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Regularizers apply for `t_diff ≤ rho · T_diff`.
    pub rho: f64,
    pub grad_clip: f64,
    /// Sampler steps for the no-gradient rollouts that produce predicted history.
    pub rollout_steps: usize,
    pub window: WindowSpec,
    pub eval_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_final: 1.0,
            beta: 1e-4,
            lambda_aff: 1e-1,
            lambda_dist: 1e-1,
            lambda_ori: 1e-4,
            d1: 1e-1,
            d2: 1.0,
            stage1_steps: 100_000,
            stage2_steps: 100_000,
            stage3_steps: 100_000,
            batch_size: 32,
            seed: 0,
            rho: 0.1,
            grad_clip: 1.0,
            rollout_steps: 10,
            window: WindowSpec::default(),
            eval_every: 500,
        }
    }
}

impl TrainingConfig {
    pub fn desk() -> Self {
        Self {
            lr: 2e-3,
            lr_final: 0.05,
            stage1_steps: 2000,
            stage2_steps: 2000,
            stage3_steps: 2000,
            ..Self::default()
        }
    }

    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps + self.stage3_steps
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let progress = step as f64 / self.total_steps().max(1) as f64;
        let scale = self.lr_final + (1.0 - self.lr_final) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * scale
    }

    /// Stage (1..=3) and within-stage progress of a global step.
    pub fn stage_at(&self, step: usize) -> (u8, f64) {
        let (s1, s2) = (self.stage1_steps, self.stage2_steps);
        if step < s1 {
            (1, step as f64 / s1.max(1) as f64)
        } else if step < s1 + s2 {
            (2, (step - s1) as f64 / s2.max(1) as f64)
        } else {
            (3, (step - s1 - s2) as f64 / self.stage3_steps.max(1) as f64)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.d1, self.d2, self.grad_clip];
        if positive.iter().any(|v| !(*v > 0.0)) || self.batch_size == 0 || self.rollout_steps == 0 {
            return Err(ModelError::Config("learning rate, thresholds, clip, batch and rollout steps must be positive".into()));
        }
        if [self.beta, self.lambda_aff, self.lambda_dist, self.lambda_ori].iter().any(|v| !(*v >= 0.0)) {
            return Err(ModelError::Config("loss weights must be non-negative".into()));
        }
        if !(self.lr_final > 0.0 && self.lr_final <= 1.0) {
            return Err(ModelError::Config("lr_final must lie in (0, 1]".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(ModelError::Config("rho must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One training window of one scene, with every agent's world-frame frames.
#[derive(Debug, Clone)]
pub struct Group {
    pub scene: usize,
    pub window: usize,
    pub total_frames: usize,
    pub text: String,
    pub histories: Vec<FrameBlock>,
    pub futures: Vec<FrameBlock>,
    /// Ground-truth conditions per agent.
    pub conditions: Vec<AgentCondition>,
    /// Ground-truth futures per agent in that agent's canonical frame.
    pub canonical_futures: Vec<FrameBlock>,
    /// Index of the previous window of the same scene in the group list.
    pub previous: Option<usize>,
}

/// Windows cut from a dataset and canonicalized per agent.
pub struct Prepared {
    pub layout: FeatureLayout,
    pub groups: Vec<Group>,
    pub texts: HashMap<String, EncodedText>,
    pub spec: WindowSpec,
}

impl Prepared {
    pub fn new(dataset: &Dataset, spec: WindowSpec, text_dim: usize) -> Result<Self> {
        let layout = (*dataset.layout).clone();
        layout.validate()?;
        let encoder = ToyTextEncoder { dim: text_dim };
        let mut texts: HashMap<String, EncodedText> = HashMap::new();
        let mut groups = Vec::new();
        for (si, scene) in dataset.scenes.iter().enumerate() {
            if scene.agents.is_empty() {
                continue;
            }
            let per_agent = scene
                .agents
                .iter()
                .map(|a| {
                    if a.layout.name != layout.name {
                        return Err(ModelError::Core(hint_core::Error::LayoutMismatch(format!(
                            "agent uses '{}' in a '{}' dataset",
                            a.layout.name, layout.name
                        ))));
                    }
                    Ok(extract_windows(&a.frames, spec, |f| scene.text_at(f).to_string())?)
                })
                .collect::<Result<Vec<_>>>()?;
            for w in 0..per_agent[0].len() {
                let text = per_agent[0][w].text.clone();
                if !texts.contains_key(&text) {
                    texts.insert(text.clone(), encoder.encode(&text)?);
                }
                let histories: Vec<FrameBlock> = per_agent.iter().map(|ws| ws[w].history.clone()).collect();
                let futures: Vec<FrameBlock> = per_agent.iter().map(|ws| ws[w].future.clone()).collect();
                let enc = &texts[&text];
                let conditions = assemble_conditions(
                    &layout,
                    &histories,
                    &vec![enc; histories.len()],
                    w,
                    per_agent[0][w].total_frames,
                )?;
                let canonical_futures = conditions
                    .iter()
                    .zip(&futures)
                    .map(|(c, f)| Ok(apply_transform_frames(f, &layout, &c.transform)?))
                    .collect::<Result<Vec<_>>>()?;
                let previous = (w > 0 && spec.stride == spec.future).then(|| groups.len() - 1);
                groups.push(Group {
                    scene: si,
                    window: w,
                    total_frames: per_agent[0][w].total_frames,
                    text,
                    histories,
                    futures,
                    conditions,
                    canonical_futures,
                    previous,
                });
            }
        }
        if groups.is_empty() {
            return Err(ModelError::Core(hint_core::Error::InsufficientSamples { needed: 1, found: 0 }));
        }
        Ok(Self { layout, groups, texts, spec })
    }

    pub fn fit_normalizer(&self) -> Result<Normalizer> {
        let rows = self.groups.iter().flat_map(|g| {
            g.conditions
                .iter()
                .zip(&g.canonical_futures)
                .flat_map(|(c, f)| c.bundle.target_history.iter_rows().chain(f.iter_rows()))
        });
        Ok(Normalizer::fit(rows)?)
    }

    /// `(group, agent)` pairs in a fixed order.
    pub fn items(&self) -> Vec<(usize, usize)> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(g, grp)| (0..grp.conditions.len()).map(move |a| (g, a)))
            .collect()
    }

    /// Re-assembles a group's conditions from substitute world-frame histories.
    pub fn regroup(&self, g: usize, histories: Vec<FrameBlock>) -> Result<(Vec<AgentCondition>, Vec<FrameBlock>)> {
        let grp = &self.groups[g];
        let enc = &self.texts[&grp.text];
        let conditions =
            assemble_conditions(&self.layout, &histories, &vec![enc; histories.len()], grp.window, grp.total_frames)?;
        let futures = conditions
            .iter()
            .zip(&grp.futures)
            .map(|(c, f)| Ok(apply_transform_frames(f, &self.layout, &c.transform)?))
            .collect::<Result<Vec<_>>>()?;
        Ok((conditions, futures))
    }
}

/// Canonical future frames back to world, keeping the last `h` rows.
fn world_tail(frames: &FrameBlock, layout: &FeatureLayout, x: &CanonicalTransform, h: usize) -> Result<FrameBlock> {
    Ok(apply_transform_frames(frames, layout, &x.inverse())?.tail(h))
}

/// MPJPE on the normalized position channels of two frame blocks.
pub fn mpjpe_normalized(layout: &FeatureLayout, normalizer: &Normalizer, a: &FrameBlock, b: &FrameBlock) -> Result<f64> {
    if a.rows() != b.rows() || a.dim() != b.dim() {
        return Err(ModelError::shape(format!("{}×{}", a.rows(), a.dim()), format!("{}×{}", b.rows(), b.dim())));
    }
    let (na, nb) = (normalizer.apply(a), normalizer.apply(b));
    let mut total = 0.0;
    let mut count = 0usize;
    for s in layout.slices_with(ChannelRole::Position) {
        for t in 0..a.rows() {
            let (ra, rb) = (&na.row(t)[s.range()], &nb.row(t)[s.range()]);
            for (pa, pb) in ra.chunks_exact(3).zip(rb.chunks_exact(3)) {
                total += pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                count += 1;
            }
        }
    }
    Ok(total / count.max(1) as f64)
}

fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for v in vars {
            if let Some(g) = grads.get(v) {
                let scaled = g.affine(scale, 0.0)?;
                grads.insert(v, scaled);
            }
        }
    }
    Ok(norm)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Append-only JSONL metrics log.
pub struct MetricsLog {
    path: Option<PathBuf>,
    pub records: Vec<serde_json::Value>,
}

impl MetricsLog {
    pub fn new(path: Option<&Path>) -> Result<Self> {
        if let Some(p) = path {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
        }
        Ok(Self {
            path: path.map(Path::to_path_buf),
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, record: serde_json::Value) -> Result<()> {
        if let Some(p) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            writeln!(f, "{record}")?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Mean of `key` over the first and last `n` step records.
    pub fn trend(&self, key: &str, n: usize) -> Option<(f64, f64)> {
        let xs: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.get("step").is_some() && r.get("eval").is_none())
            .filter_map(|r| r.get(key).and_then(|v| v.as_f64()))
            .collect();
        if xs.len() < 2 * n || n == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&xs[..n]), mean(&xs[xs.len() - n..])))
    }
}

pub struct TrainedVae {
    pub vae: MotionVae,
    pub normalizer: Normalizer,
    pub layout: FeatureLayout,
    pub config: TrainingConfig,
    pub log: MetricsLog,
}

impl TrainedVae {
    pub fn save(&self, path: &Path) -> Result<checkpoint::CheckpointHeader> {
        checkpoint::save(
            path,
            ModelSpec::Vae {
                config: self.vae.config.clone(),
            },
            &self.layout,
            &self.normalizer,
            json!({ "training": self.config }),
            &self.vae.params,
        )
    }
}

fn vae_history_batch(
    prepared: &Prepared,
    vae: &MotionVae,
    normalizer: &Normalizer,
    picks: &[(usize, usize)],
    use_predicted: &[bool],
) -> Result<Vec<(FrameBlock, FrameBlock)>> {
    let layout = &prepared.layout;
    let h = prepared.spec.history;
    // reconstruct the previous windows of every item that asks for predicted history
    let prev: Vec<(usize, usize)> = picks
        .iter()
        .zip(use_predicted)
        .filter(|(_, &u)| u)
        .map(|(&(g, a), _)| (prepared.groups[g].previous.expect("checked"), a))
        .collect();
    let mut predicted = Vec::new();
    if !prev.is_empty() {
        let hist: Vec<&FrameBlock> = prev
            .iter()
            .map(|&(g, a)| &prepared.groups[g].conditions[a].bundle.target_history)
            .collect();
        let fut: Vec<&FrameBlock> = prev.iter().map(|&(g, a)| &prepared.groups[g].canonical_futures[a]).collect();
        let ht = stack_frames(&hist, normalizer, DType::F32)?;
        let ft = stack_frames(&fut, normalizer, DType::F32)?;
        let mut ctx = Ctx::eval();
        let (mu, _) = vae.encode(&ht, &ft, &mut ctx)?;
        let recon = split_frames(&vae.decode(&mu, &ht, &mut ctx)?, normalizer)?;
        for (&(g, a), frames) in prev.iter().zip(recon) {
            let x = prepared.groups[g].conditions[a].transform;
            predicted.push(world_tail(&frames, layout, &x, h)?);
        }
    }
    let mut predicted = predicted.into_iter();
    picks
        .iter()
        .zip(use_predicted)
        .map(|(&(g, a), &u)| {
            let grp = &prepared.groups[g];
            if u {
                let world = predicted.next().expect("one prediction per flagged item");
                let x = hint_core::geometry::canonical_transform_at(&world, layout, h - 1)?;
                Ok((
                    apply_transform_frames(&world, layout, &x)?,
                    apply_transform_frames(&grp.futures[a], layout, &x)?,
                ))
            } else {
                Ok((grp.conditions[a].bundle.target_history.clone(), grp.canonical_futures[a].clone()))
            }
        })
        .collect()
}

/// Mean reconstruction MPJPE (normalized units) over items, decoding the posterior mean.
pub fn evaluate_vae(prepared: &Prepared, vae: &MotionVae, normalizer: &Normalizer, items: &[(usize, usize)]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in items.chunks(64) {
        let hist: Vec<&FrameBlock> = chunk
            .iter()
            .map(|&(g, a)| &prepared.groups[g].conditions[a].bundle.target_history)
            .collect();
        let fut: Vec<&FrameBlock> = chunk.iter().map(|&(g, a)| &prepared.groups[g].canonical_futures[a]).collect();
        let ht = stack_frames(&hist, normalizer, vae.params.dtype())?;
        let ft = stack_frames(&fut, normalizer, vae.params.dtype())?;
        let mut ctx = Ctx::eval();
        let (mu, _) = vae.encode(&ht, &ft, &mut ctx)?;
        let recon = split_frames(&vae.decode(&mu, &ht, &mut ctx)?, normalizer)?;
        for (r, f) in recon.iter().zip(&fut) {
            total += mpjpe_normalized(&prepared.layout, normalizer, r, f)?;
        }
    }
    Ok(total / items.len().max(1) as f64)
}

fn eval_subset(items: &[(usize, usize)], n: usize) -> Vec<(usize, usize)> {
    let stride = (items.len() / n.max(1)).max(1);
    items.iter().step_by(stride).take(n).copied().collect()
}

pub fn train_vae(
    dataset: &Dataset,
    config: &TrainingConfig,
    vae_config: &VaeConfig,
    log_path: Option<&Path>,
) -> Result<TrainedVae> {
    config.validate()?;
    let mut vae_config = vae_config.clone();
    vae_config.beta = config.beta;
    vae_config.history = config.window.history;
    vae_config.future = config.window.future;
    let prepared = Prepared::new(dataset, config.window, 8)?;
    let normalizer = prepared.fit_normalizer()?;
    let vae = MotionVae::new(vae_config.clone(), prepared.layout.dim(), DType::F32, config.seed)?;
    let vars = vae.params.vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: config.lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let items = prepared.items();
    let eval_items = eval_subset(&items, 64);
    let mut log = MetricsLog::new(log_path)?;
    let l = vae_config.latent_dim;
    for step in 0..config.total_steps() {
        let (stage, progress) = config.stage_at(step);
        let p = history_schedule(stage, progress)?;
        let lr = config.lr_at(step);
        opt.set_learning_rate(lr);
        let picks: Vec<(usize, usize)> = (0..config.batch_size).map(|_| items[rng.random_range(0..items.len())]).collect();
        let flags: Vec<bool> = picks
            .iter()
            .map(|&(g, _)| {
                let draw = rng.random::<f64>();
                prepared.groups[g].previous.is_some() && draw < p
            })
            .collect();
        let pairs = vae_history_batch(&prepared, &vae, &normalizer, &picks, &flags)?;
        let hist: Vec<&FrameBlock> = pairs.iter().map(|p| &p.0).collect();
        let fut: Vec<&FrameBlock> = pairs.iter().map(|p| &p.1).collect();
        let ht = stack_frames(&hist, &normalizer, DType::F32)?;
        let ft = stack_frames(&fut, &normalizer, DType::F32)?;
        let mut ctx = Ctx::train(vae_config.dropout, config.seed ^ (step as u64).wrapping_mul(0x9e37_79b9));
        let (mu, log_var) = vae.encode(&ht, &ft, &mut ctx)?;
        let noise = host(normal_vec(&mut rng, picks.len() * l), &[picks.len(), l], DType::F32)?;
        let z = reparameterize(&mu, &log_var, &noise)?;
        let recon = vae.decode(&z, &ht, &mut ctx)?;
        let loss = vae_loss(&recon, &ft, &mu, &log_var, vae_config.beta)?;
        let mut grads = loss.total.backward()?;
        let grad_norm = clip_gradients(&mut grads, &vars, config.grad_clip)?;
        opt.step(&grads)?;
        log.push(json!({
            "step": step,
            "stage": stage,
            "history_prob": p,
            "lr": lr,
            "loss": scalar(&loss.total)?,
            "recon": scalar(&loss.recon)?,
            "kl": scalar(&loss.kl)?,
            "grad_norm": grad_norm,
        }))?;
        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            let m = evaluate_vae(&prepared, &vae, &normalizer, &eval_items)?;
            log.push(json!({ "step": step, "eval": { "mpjpe": m } }))?;
        }
    }
    Ok(TrainedVae {
        vae,
        normalizer,
        layout: prepared.layout,
        config: config.clone(),
        log,
    })
}

pub struct TrainedDiffusion {
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub latent_stats: LatentStats,
    pub vae_checksum: String,
    pub normalizer: Normalizer,
    pub layout: FeatureLayout,
    pub config: TrainingConfig,
    pub log: MetricsLog,
}

impl TrainedDiffusion {
    pub fn save(&self, path: &Path) -> Result<checkpoint::CheckpointHeader> {
        checkpoint::save(
            path,
            ModelSpec::Diffusion {
                config: self.denoiser.config.clone(),
                schedule: self.schedule.clone(),
                latent_stats: self.latent_stats.clone(),
                vae_checksum: self.vae_checksum.clone(),
            },
            &self.layout,
            &self.normalizer,
            json!({ "training": self.config }),
            &self.denoiser.params,
        )
    }
}

/// Per-dimension mean and standard deviation of encoder means over all items.
pub fn latent_statistics(prepared: &Prepared, vae: &MotionVae, normalizer: &Normalizer) -> Result<LatentStats> {
    let items = prepared.items();
    let l = vae.config.latent_dim;
    let rows: Vec<Vec<f64>> = items
        .chunks(64)
        .map(|chunk| {
            let hist: Vec<&FrameBlock> = chunk
                .iter()
                .map(|&(g, a)| &prepared.groups[g].conditions[a].bundle.target_history)
                .collect();
            let fut: Vec<&FrameBlock> = chunk.iter().map(|&(g, a)| &prepared.groups[g].canonical_futures[a]).collect();
            let ht = stack_frames(&hist, normalizer, DType::F32)?;
            let ft = stack_frames(&fut, normalizer, DType::F32)?;
            let (mu, _) = vae.encode(&ht, &ft, &mut Ctx::eval())?;
            let flat = flat_f64(&mu)?;
            Ok(flat.chunks(l).map(<[f64]>::to_vec).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let n = Normalizer::fit(rows.iter().map(Vec::as_slice))?;
    Ok(LatentStats { mean: n.mean, std: n.std })
}

/// Ground-truth or rollout-predicted conditions for a set of groups.
fn diffusion_groups(
    prepared: &Prepared,
    pipeline: &Pipeline<'_>,
    picks: &[usize],
    use_predicted: &[bool],
    steps: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Vec<AgentCondition>, Vec<FrameBlock>)>> {
    let h = prepared.spec.history;
    let prev: Vec<usize> = picks
        .iter()
        .zip(use_predicted)
        .filter(|(_, &u)| u)
        .map(|(&g, _)| prepared.groups[g].previous.expect("checked"))
        .collect();
    let mut predicted: Vec<Vec<FrameBlock>> = Vec::new();
    if !prev.is_empty() {
        let bundles: Vec<&ConditionBundle> = prev
            .iter()
            .flat_map(|&g| prepared.groups[g].conditions.iter().map(|c| &c.bundle))
            .collect();
        let futures = pipeline.sample_futures(&bundles, steps, rng)?;
        let mut it = futures.into_iter();
        for &g in &prev {
            let grp = &prepared.groups[g];
            let worlds = grp
                .conditions
                .iter()
                .map(|c| world_tail(&it.next().expect("one future per agent"), &prepared.layout, &c.transform, h))
                .collect::<Result<Vec<_>>>()?;
            predicted.push(worlds);
        }
    }
    let mut predicted = predicted.into_iter();
    picks
        .iter()
        .zip(use_predicted)
        .map(|(&g, &u)| {
            if u {
                prepared.regroup(g, predicted.next().expect("one rollout per flagged group"))
            } else {
                let grp = &prepared.groups[g];
                Ok((grp.conditions.clone(), grp.canonical_futures.clone()))
            }
        })
        .collect()
}

fn positions_tensor(layout: &FeatureLayout, raw: &Tensor) -> Result<Tensor> {
    let s = layout
        .first_slice(ChannelRole::Position)
        .ok_or_else(|| ModelError::Config("layout has no position channels".into()))?;
    let (b, k, _) = raw.dims3()?;
    Ok(raw.narrow(2, s.offset, s.width)?.reshape((b, k, s.width / 3, 3))?)
}

fn facing_tensor(layout: &FeatureLayout, raw: &Tensor, positions: &Tensor) -> Result<Tensor> {
    match &layout.facing {
        FacingRule::Across { pairs } => facing_from_joints(positions, pairs),
        FacingRule::RootRotation => {
            let off = layout
                .root_rotation_offset()
                .ok_or_else(|| ModelError::Config("facing rule needs a root rotation channel".into()))?;
            facing_from_rot6d(&raw.narrow(2, off, 6)?)
        }
        FacingRule::None => Err(ModelError::Config("layout declares no facing rule".into())),
    }
}

/// Maps `[B, K, J, 3]` positions and `[B, K, 2]` facings through per-row yaw transforms.
fn transform_rows(positions: &Tensor, facing: &Tensor, xs: &[CanonicalTransform]) -> Result<(Tensor, Tensor)> {
    let (b, k, j, _) = positions.dims4()?;
    let dtype = positions.dtype();
    let mut rt = Vec::with_capacity(b * 9);
    let mut tr = Vec::with_capacity(b * 3);
    let mut rt2 = Vec::with_capacity(b * 4);
    for x in xs {
        let m = x.rotation.matrix();
        for r in 0..3 {
            for c in 0..3 {
                rt.push(m[(c, r)]);
            }
        }
        tr.extend(x.translation.iter());
        // (x, z) block of the rotation, transposed for row vectors
        rt2.extend([m[(0, 0)], m[(2, 0)], m[(0, 2)], m[(2, 2)]]);
    }
    let p = positions
        .reshape((b, k * j, 3))?
        .matmul(&host(rt, &[b, 3, 3], dtype)?)?
        .broadcast_add(&host(tr, &[b, 1, 3], dtype)?)?
        .reshape((b, k, j, 3))?;
    let f = facing.matmul(&host(rt2, &[b, 2, 2], dtype)?)?;
    Ok((p, f))
}

struct RegularizerTargets {
    gt_a: Tensor,
    gt_b: Tensor,
    face_a: Tensor,
    face_b: Tensor,
    partner_row: Vec<u32>,
    relative: Vec<CanonicalTransform>,
}

fn regularizer_targets(
    layout: &FeatureLayout,
    groups: &[(Vec<AgentCondition>, Vec<FrameBlock>)],
) -> Result<Option<RegularizerTargets>> {
    if groups.iter().any(|(c, _)| c.len() < 2) {
        return Ok(None);
    }
    let mut gt_a = Vec::new();
    let mut gt_b = Vec::new();
    let mut partner_row = Vec::new();
    let mut relative = Vec::new();
    let mut row = 0u32;
    for (conds, futures) in groups {
        let n = conds.len();
        for a in 0..n {
            let b = (a + 1) % n;
            gt_a.push(futures[a].clone());
            let rel = hint_core::relative_transform(&conds[a].transform, &conds[b].transform);
            gt_b.push(apply_transform_frames(&futures[b], layout, &rel)?);
            partner_row.push(row + b as u32);
            relative.push(rel);
        }
        row += n as u32;
    }
    let to_tensor = |blocks: &[FrameBlock]| -> Result<Tensor> {
        let (k, d) = (blocks[0].rows(), blocks[0].dim());
        let data: Vec<f64> = blocks.iter().flat_map(|b| b.as_slice().iter().copied()).collect();
        host(data, &[blocks.len(), k, d], DType::F32)
    };
    let (ra, rb) = (to_tensor(&gt_a)?, to_tensor(&gt_b)?);
    let (pa, pb) = (positions_tensor(layout, &ra)?, positions_tensor(layout, &rb)?);
    Ok(Some(RegularizerTargets {
        face_a: facing_tensor(layout, &ra, &pa)?,
        face_b: facing_tensor(layout, &rb, &pb)?,
        gt_a: pa,
        gt_b: pb,
        partner_row,
        relative,
    }))
}

pub fn train_diffusion(
    vae: &MotionVae,
    normalizer: &Normalizer,
    layout: &FeatureLayout,
    dataset: &Dataset,
    config: &TrainingConfig,
    den_config: &DenoiserConfig,
    log_path: Option<&Path>,
) -> Result<TrainedDiffusion> {
    config.validate()?;
    if dataset.layout.name != layout.name || dataset.layout.dim() != layout.dim() {
        return Err(ModelError::Core(hint_core::Error::LayoutMismatch(format!(
            "dataset layout '{}' does not match checkpoint layout '{}'",
            dataset.layout.name, layout.name
        ))));
    }
    let frozen = vae.checksum()?;
    let mut den_config = den_config.clone();
    den_config.latent_dim = vae.config.latent_dim;
    den_config.history = vae.config.history;
    let spec = WindowSpec {
        history: vae.config.history,
        future: vae.config.future,
        ..config.window
    };
    let prepared = Prepared::new(dataset, spec, den_config.text_dim)?;
    let schedule = DiffusionSchedule::cosine(den_config.diffusion_steps)?;
    let stats = latent_statistics(&prepared, vae, normalizer)?;
    let denoiser = Denoiser::new(den_config.clone(), layout.dim(), DType::F32, config.seed)?;
    let vars = denoiser.params.vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: config.lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = MetricsLog::new(log_path)?;
    let rollout = schedule.strided(config.rollout_steps);
    let t_max = schedule.steps();
    let agents = prepared.groups[0].conditions.len().max(1);
    let groups_per_batch = (config.batch_size / agents).max(1);
    for step in 0..config.total_steps() {
        let (stage, progress) = config.stage_at(step);
        let p = history_schedule(stage, progress)?;
        let lr = config.lr_at(step);
        opt.set_learning_rate(lr);
        let picks: Vec<usize> = (0..groups_per_batch).map(|_| rng.random_range(0..prepared.groups.len())).collect();
        let flags: Vec<bool> = picks
            .iter()
            .map(|&g| {
                let draw = rng.random::<f64>();
                prepared.groups[g].previous.is_some() && draw < p
            })
            .collect();
        let pipeline = Pipeline {
            vae,
            denoiser: &denoiser,
            schedule: &schedule,
            latent_stats: &stats,
            normalizer,
        };
        let groups = diffusion_groups(&prepared, &pipeline, &picks, &flags, &rollout, &mut rng)?;
        let bundles: Vec<&ConditionBundle> = groups.iter().flat_map(|(c, _)| c.iter().map(|x| &x.bundle)).collect();
        let futures: Vec<&FrameBlock> = groups.iter().flat_map(|(_, f)| f.iter()).collect();
        let b = bundles.len();
        let cond = CondBatch::build(&bundles, normalizer, DType::F32)?;
        let ft = stack_frames(&futures, normalizer, DType::F32)?;
        let (mu, _) = vae.encode(&cond.history, &ft, &mut Ctx::eval())?;
        let z0 = pipeline.normalize_latent(&mu)?.detach();
        let mut t_diff = Vec::with_capacity(b);
        for (conds, _) in &groups {
            let t = rng.random_range(0..t_max);
            t_diff.extend(std::iter::repeat_n(t, conds.len()));
        }
        let l = den_config.latent_dim;
        let eps = host(normal_vec(&mut rng, b * l), &[b, l], DType::F32)?;
        let zt = q_sample(&schedule, &z0, &t_diff, &eps)?;
        let mut ctx = Ctx::train(den_config.dropout, config.seed ^ (step as u64).wrapping_mul(0x9e37_79b9));
        let pred = denoiser.forward(&zt, &t_diff, &cond, &mut ctx)?;
        let diff_rows = diffusion_loss_rows(&pred, &z0)?;
        let gate: Vec<f64> = t_diff
            .iter()
            .map(|&t| if regularizers_active(t, t_max, config.rho) { 1.0 } else { 0.0 })
            .collect();
        let mut record = json!({ "step": step, "stage": stage, "history_prob": p, "lr": lr });
        let mut total = diff_rows.clone();
        if gate.iter().any(|&g| g > 0.0) {
            if let Some(tg) = regularizer_targets(layout, &groups)? {
                let decoded = vae.decode(&pipeline.denormalize_latent(&pred)?, &cond.history, &mut Ctx::eval())?;
                let raw = decoded
                    .broadcast_mul(&host(normalizer.std.clone(), &[1, 1, layout.dim()], DType::F32)?)?
                    .broadcast_add(&host(normalizer.mean.clone(), &[1, 1, layout.dim()], DType::F32)?)?;
                let pos = positions_tensor(layout, &raw)?;
                let face = facing_tensor(layout, &raw, &pos)?;
                let idx = Tensor::from_vec(tg.partner_row.clone(), tg.partner_row.len(), pos.device())?;
                let (pos_b, face_b) = transform_rows(&pos.index_select(&idx, 0)?, &face.index_select(&idx, 0)?, &tg.relative)?;
                let aff = loss_aff(&tg.gt_a, &tg.gt_b, &pos, &pos_b, config.d1)?;
                let dist = loss_dist(&tg.gt_a, &tg.gt_b, &pos, &pos_b, config.d2)?;
                let ori = loss_ori(&tg.face_a, &tg.face_b, &face, &face_b)?;
                let reg = aff
                    .affine(config.lambda_aff, 0.0)?
                    .add(&dist.affine(config.lambda_dist, 0.0)?)?
                    .add(&ori.affine(config.lambda_ori, 0.0)?)?;
                let g = host(gate.clone(), &[b], DType::F32)?;
                total = total.add(&reg.mul(&g)?)?;
                let gated_mean = |t: &Tensor| -> Result<f64> {
                    let v = flat_f64(t)?;
                    let n = gate.iter().sum::<f64>();
                    Ok(v.iter().zip(&gate).map(|(x, g)| x * g).sum::<f64>() / n)
                };
                record["aff"] = json!(gated_mean(&aff)?);
                record["dist"] = json!(gated_mean(&dist)?);
                record["ori"] = json!(gated_mean(&ori)?);
            }
        }
        let loss = total.mean(D::Minus1)?;
        let mut grads = loss.backward()?;
        let grad_norm = clip_gradients(&mut grads, &vars, config.grad_clip)?;
        opt.step(&grads)?;
        record["loss"] = json!(scalar(&loss)?);
        record["diff"] = json!(scalar(&diff_rows.mean(D::Minus1)?)?);
        record["grad_norm"] = json!(grad_norm);
        log.push(record)?;
    }
    let after = vae.checksum()?;
    if after != frozen {
        return Err(ModelError::FreezeViolation {
            expected: frozen,
            found: after,
        });
    }
    Ok(TrainedDiffusion {
        denoiser,
        schedule,
        latent_stats: stats,
        vae_checksum: frozen,
        normalizer: normalizer.clone(),
        layout: layout.clone(),
        config: config.clone(),
        log,
    })
}

/// Decoded-window MPJPE (normalized units) of full ancestral samples given
/// ground-truth conditions.
pub fn evaluate_diffusion(prepared: &Prepared, pipeline: &Pipeline<'_>, groups: &[usize], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = pipeline.full_steps();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in groups.chunks(16) {
        let bundles: Vec<&ConditionBundle> = chunk
            .iter()
            .flat_map(|&g| prepared.groups[g].conditions.iter().map(|c| &c.bundle))
            .collect();
        let targets: Vec<&FrameBlock> = chunk.iter().flat_map(|&g| prepared.groups[g].canonical_futures.iter()).collect();
        let out = pipeline.sample_futures(&bundles, &steps, &mut rng)?;
        for (o, t) in out.iter().zip(targets) {
            total += mpjpe_normalized(&prepared.layout, pipeline.normalizer, o, t)?;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}
