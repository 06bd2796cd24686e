//! Interaction-aware latent denoiser.
//!
//! Target tokens are the H history frames plus one token for the noisy
//! future latent, each tagged with a step embedding (history steps 1..H and
//! a separate future slot). Every block runs self-attention, cross-attention
//! over all partners' history tokens, cross-attention over word and command
//! tokens, and a feed-forward layer, each behind an adaptive layer norm
//! driven by the window index, the total frame count and the diffusion step.

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::condition::CondBatch;
use crate::error::{ModelError, Result};
use crate::nn::{host, sinusoidal, AdaLn, Attention, Ctx, FeedForward, Init, Linear, ParamStore};
use crate::schedule::DiffusionSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub blocks: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ff: usize,
    pub dropout: f64,
    pub latent_dim: usize,
    pub text_dim: usize,
    pub history: usize,
    pub diffusion_steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            blocks: 8,
            heads: 4,
            hidden: 512,
            ff: 1024,
            dropout: 0.1,
            latent_dim: 256,
            text_dim: hint_core::text::DEFAULT_EMBED_DIM,
            history: 4,
            diffusion_steps: 100,
        }
    }
}

impl DenoiserConfig {
    pub fn desk() -> Self {
        Self {
            blocks: 2,
            hidden: 64,
            ff: 128,
            dropout: 0.0,
            latent_dim: 32,
            text_dim: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.blocks, self.heads, self.hidden, self.ff, self.latent_dim, self.text_dim, self.history];
        if sizes.contains(&0) || !self.hidden.is_multiple_of(self.heads) || self.diffusion_steps == 0 {
            return Err(ModelError::Config("denoiser sizes must be positive and hidden divisible by heads".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

struct Block {
    norm_self: AdaLn,
    self_attn: Attention,
    norm_partner: AdaLn,
    partner_attn: Attention,
    norm_text: AdaLn,
    text_attn: Attention,
    norm_ff: AdaLn,
    ff: FeedForward,
}

impl Block {
    fn new(ps: &mut ParamStore, name: &str, c: &DenoiserConfig) -> Result<Self> {
        let d = c.hidden;
        Ok(Self {
            norm_self: AdaLn::new(ps, &format!("{name}.norm_self"), d, d)?,
            self_attn: Attention::new(ps, &format!("{name}.self_attn"), d, c.heads)?,
            norm_partner: AdaLn::new(ps, &format!("{name}.norm_partner"), d, d)?,
            partner_attn: Attention::new(ps, &format!("{name}.partner_attn"), d, c.heads)?,
            norm_text: AdaLn::new(ps, &format!("{name}.norm_text"), d, d)?,
            text_attn: Attention::new(ps, &format!("{name}.text_attn"), d, c.heads)?,
            norm_ff: AdaLn::new(ps, &format!("{name}.norm_ff"), d, d)?,
            ff: FeedForward::new(ps, &format!("{name}.ff"), d, c.ff)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        x: &Tensor,
        cond: &Tensor,
        partners: &Tensor,
        partner_mask: &Tensor,
        text: &Tensor,
        text_mask: &Tensor,
        ctx: &mut Ctx,
    ) -> Result<Tensor> {
        let h = self.norm_self.forward(x, cond)?;
        let a = self.self_attn.forward(&h, &h, None, ctx)?;
        let x = (x + ctx.dropout(&a)?)?;
        let h = self.norm_partner.forward(&x, cond)?;
        let a = self.partner_attn.forward(&h, partners, Some(partner_mask), ctx)?;
        let x = (&x + ctx.dropout(&a)?)?;
        let h = self.norm_text.forward(&x, cond)?;
        let a = self.text_attn.forward(&h, text, Some(text_mask), ctx)?;
        let x = (&x + ctx.dropout(&a)?)?;
        let h = self.norm_ff.forward(&x, cond)?;
        let a = self.ff.forward(&h, ctx)?;
        Ok((&x + ctx.dropout(&a)?)?)
    }
}

pub struct Denoiser {
    pub config: DenoiserConfig,
    pub feature_dim: usize,
    pub params: ParamStore,
    history_in: Linear,
    future_in: Linear,
    step_embed: Tensor,
    partner_in: Linear,
    relative_in: Linear,
    text_in: Linear,
    cond_in: Linear,
    cond_out: Linear,
    blocks: Vec<Block>,
    norm_out: AdaLn,
    out: Linear,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, feature_dim: usize, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(dtype, seed);
        let c = &config;
        let d = c.hidden;
        let history_in = Linear::new(&mut ps, "history_in", feature_dim, d)?;
        let future_in = Linear::new(&mut ps, "future_in", c.latent_dim, d)?;
        let step_embed = ps.tensor("step_embed", &[c.history + 1, d], Init::Normal { std: 0.02 })?;
        let partner_in = Linear::new(&mut ps, "partner_in", feature_dim, d)?;
        let relative_in = Linear::new(&mut ps, "relative_in", 9, d)?;
        let text_in = Linear::new(&mut ps, "text_in", c.text_dim, d)?;
        let cond_in = Linear::new(&mut ps, "cond_in", 3 * d, d)?;
        let cond_out = Linear::new(&mut ps, "cond_out", d, d)?;
        let blocks = (0..c.blocks)
            .map(|i| Block::new(&mut ps, &format!("block{i}"), c))
            .collect::<Result<Vec<_>>>()?;
        let norm_out = AdaLn::new(&mut ps, "norm_out", d, d)?;
        let out = Linear::new(&mut ps, "out", d, c.latent_dim)?;
        Ok(Self {
            config,
            feature_dim,
            params: ps,
            history_in,
            future_in,
            step_embed,
            partner_in,
            relative_in,
            text_in,
            cond_in,
            cond_out,
            blocks,
            norm_out,
            out,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn global_condition(&self, cond: &CondBatch, t_diff: &[usize]) -> Result<Tensor> {
        let d = self.config.hidden;
        let b = cond.batch();
        let mut values = Vec::with_capacity(b * 3 * d);
        for i in 0..b {
            values.extend(sinusoidal(cond.window_index[i] as f64, d));
            values.extend(sinusoidal(cond.total_frames[i] as f64, d));
            values.extend(sinusoidal(t_diff[i] as f64, d));
        }
        let x = host(values, &[b, 3 * d], self.dtype())?;
        self.cond_out.forward(&self.cond_in.forward(&x)?.gelu()?)
    }

    /// Predicts the clean latent from `z_noisy: [B, latent]` at steps `t_diff`.
    pub fn forward(&self, z_noisy: &Tensor, t_diff: &[usize], cond: &CondBatch, ctx: &mut Ctx) -> Result<Tensor> {
        let c = &self.config;
        let (b, l) = z_noisy.dims2()?;
        if b != cond.batch() || t_diff.len() != b || l != c.latent_dim {
            return Err(ModelError::shape(
                format!("z [{}, {}] with {} steps", cond.batch(), c.latent_dim, cond.batch()),
                format!("{:?} with {} steps", z_noisy.dims(), t_diff.len()),
            ));
        }
        let (_, h, fd) = cond.history.dims3()?;
        if h != c.history || fd != self.feature_dim {
            return Err(ModelError::shape(
                format!("history [B, {}, {}]", c.history, self.feature_dim),
                format!("{:?}", cond.history.dims()),
            ));
        }
        let hist_steps = self.step_embed.narrow(0, 0, h)?;
        let future_step = self.step_embed.narrow(0, h, 1)?;
        let history = self.history_in.forward(&cond.history)?.broadcast_add(&hist_steps)?;
        let future = self.future_in.forward(z_noisy)?.unsqueeze(1)?.broadcast_add(&future_step)?;
        let mut x = Tensor::cat(&[history, future], 1)?;

        let slots = cond.partners.dim(1)? / h;
        let partner_steps = Tensor::cat(&vec![hist_steps.clone(); slots], 0)?;
        let partners = self
            .partner_in
            .forward(&cond.partners)?
            .broadcast_add(&partner_steps)?
            .add(&self.relative_in.forward(&cond.relative)?)?;
        let text = self.text_in.forward(&cond.text)?;
        let g = self.global_condition(cond, t_diff)?;

        for block in &self.blocks {
            x = block.forward(&x, &g, &partners, &cond.partner_mask, &text, &cond.text_mask, ctx)?;
        }
        let token = self.norm_out.forward(&x.narrow(1, h, 1)?, &g)?.squeeze(1)?;
        self.out.forward(&token)
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum()
    }
}

/// Standard-normal host samples.
pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Reverse diffusion from pure noise over the given descending steps, using
/// the posterior mean of the predicted clean latent at every transition.
/// With all steps this is plain ancestral sampling.
pub fn sample_with_steps(
    model: &Denoiser,
    schedule: &DiffusionSchedule,
    cond: &CondBatch,
    steps: &[usize],
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let b = cond.batch();
    let l = model.config.latent_dim;
    if steps.is_empty() || steps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(ModelError::InvalidArgument("sampling steps must strictly decrease".into()));
    }
    for &t in steps {
        schedule.check(t)?;
    }
    let mut ctx = Ctx::eval();
    let mut z = host(normal_vec(rng, b * l), &[b, l], model.dtype())?;
    for (i, &t) in steps.iter().enumerate() {
        let x0 = model.forward(&z, &vec![t; b], cond, &mut ctx)?.detach();
        let Some(&s) = steps.get(i + 1) else {
            return Ok(x0);
        };
        let (c0, ct, var) = schedule.posterior(t, s);
        let mean = x0.affine(c0, 0.0)?.add(&z.affine(ct, 0.0)?)?;
        let noise = host(normal_vec(rng, b * l), &[b, l], model.dtype())?;
        z = mean.add(&noise.affine(var.sqrt(), 0.0)?)?;
    }
    unreachable!("the loop returns at its final step")
}

/// Full ancestral sampling through every diffusion step.
pub fn sample_latent(
    model: &Denoiser,
    schedule: &DiffusionSchedule,
    cond: &CondBatch,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let steps: Vec<usize> = (0..schedule.steps()).rev().collect();
    sample_with_steps(model, schedule, cond, &steps, rng)
}
