//! Windowed motion VAE.
//!
//! The encoder reads `[global tokens ∥ history ∥ future]` and summarizes the
//! future into one Gaussian latent through the first global token. The
//! decoder is encoder-only as well: `[latent ∥ history ∥ K queries]`, with the
//! query outputs read back as the K future frames.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{Ctx, EncoderLayer, Init, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub beta: f64,
    pub global_tokens: usize,
    pub history: usize,
    pub future: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 256,
            hidden_dim: 512,
            ff_dim: 1024,
            layers: 5,
            heads: 4,
            dropout: 0.1,
            beta: 1e-4,
            global_tokens: 1,
            history: 4,
            future: 16,
        }
    }
}

impl VaeConfig {
    /// Small configuration that trains on a CPU in minutes.
    pub fn desk() -> Self {
        Self {
            latent_dim: 32,
            hidden_dim: 64,
            ff_dim: 128,
            layers: 2,
            heads: 4,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.latent_dim,
            self.hidden_dim,
            self.ff_dim,
            self.layers,
            self.heads,
            self.global_tokens,
            self.history,
            self.future,
        ];
        if positive.contains(&0) || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config("VAE sizes must be positive and hidden divisible by heads".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.beta >= 0.0) {
            return Err(ModelError::Config("dropout must lie in [0, 1) and beta be non-negative".into()));
        }
        Ok(())
    }
}

pub struct MotionVae {
    pub config: VaeConfig,
    pub feature_dim: usize,
    pub params: ParamStore,
    enc_history: Linear,
    enc_future: Linear,
    enc_global: Tensor,
    enc_pos: Tensor,
    enc_layers: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    enc_out: Linear,
    dec_latent: Linear,
    dec_history: Linear,
    dec_queries: Tensor,
    dec_pos: Tensor,
    dec_layers: Vec<EncoderLayer>,
    dec_norm: LayerNorm,
    dec_out: Linear,
}

fn expand(t: &Tensor, batch: usize) -> Result<Tensor> {
    let (l, d) = t.dims2()?;
    Ok(t.unsqueeze(0)?.broadcast_as((batch, l, d))?)
}

impl MotionVae {
    pub fn new(config: VaeConfig, feature_dim: usize, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(dtype, seed);
        let c = &config;
        let (d, h) = (c.hidden_dim, feature_dim);
        let enc_tokens = c.global_tokens + c.history + c.future;
        let dec_tokens = 1 + c.history + c.future;
        let enc_history = Linear::new(&mut ps, "enc.history", h, d)?;
        let enc_future = Linear::new(&mut ps, "enc.future", h, d)?;
        let enc_global = ps.tensor("enc.global", &[c.global_tokens, d], Init::Normal { std: 0.02 })?;
        let enc_pos = ps.tensor("enc.pos", &[enc_tokens, d], Init::Normal { std: 0.02 })?;
        let enc_layers = (0..c.layers)
            .map(|i| EncoderLayer::new(&mut ps, &format!("enc.layer{i}"), d, c.ff_dim, c.heads))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = LayerNorm::new(&mut ps, "enc.norm", d)?;
        let enc_out = Linear::new(&mut ps, "enc.out", d, 2 * c.latent_dim)?;
        let dec_latent = Linear::new(&mut ps, "dec.latent", c.latent_dim, d)?;
        let dec_history = Linear::new(&mut ps, "dec.history", h, d)?;
        let dec_queries = ps.tensor("dec.queries", &[c.future, d], Init::Normal { std: 0.02 })?;
        let dec_pos = ps.tensor("dec.pos", &[dec_tokens, d], Init::Normal { std: 0.02 })?;
        let dec_layers = (0..c.layers)
            .map(|i| EncoderLayer::new(&mut ps, &format!("dec.layer{i}"), d, c.ff_dim, c.heads))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNorm::new(&mut ps, "dec.norm", d)?;
        let dec_out = Linear::new(&mut ps, "dec.out", d, h)?;
        Ok(Self {
            config,
            feature_dim,
            params: ps,
            enc_history,
            enc_future,
            enc_global,
            enc_pos,
            enc_layers,
            enc_norm,
            enc_out,
            dec_latent,
            dec_history,
            dec_queries,
            dec_pos,
            dec_layers,
            dec_norm,
            dec_out,
        })
    }

    fn check(&self, x: &Tensor, rows: usize, what: &str) -> Result<usize> {
        let (b, r, d) = x.dims3().map_err(|_| ModelError::shape(format!("{what} [B, {rows}, {}]", self.feature_dim), format!("{:?}", x.dims())))?;
        if r != rows || d != self.feature_dim {
            return Err(ModelError::shape(
                format!("{what} [B, {rows}, {}]", self.feature_dim),
                format!("{:?}", x.dims()),
            ));
        }
        Ok(b)
    }

    /// `history: [B, H, d]`, `future: [B, K, d]` → `(mu, log_var)`, each `[B, latent]`.
    pub fn encode(&self, history: &Tensor, future: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, Tensor)> {
        let c = &self.config;
        let b = self.check(history, c.history, "history")?;
        if self.check(future, c.future, "future")? != b {
            return Err(ModelError::shape(format!("batch {b}"), "different future batch"));
        }
        let tokens = Tensor::cat(
            &[
                expand(&self.enc_global, b)?,
                self.enc_history.forward(history)?,
                self.enc_future.forward(future)?,
            ],
            1,
        )?
        .broadcast_add(&self.enc_pos)?;
        let mut x = tokens;
        for layer in &self.enc_layers {
            x = layer.forward(&x, ctx)?;
        }
        let summary = self.enc_norm.forward(&x.narrow(1, 0, 1)?)?.squeeze(1)?;
        let stats = self.enc_out.forward(&summary)?;
        let l = c.latent_dim;
        Ok((stats.narrow(1, 0, l)?, stats.narrow(1, l, l)?))
    }

    /// `z: [B, latent]`, `history: [B, H, d]` → future `[B, K, d]`.
    pub fn decode(&self, z: &Tensor, history: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let c = &self.config;
        let b = self.check(history, c.history, "history")?;
        let (zb, zl) = z.dims2()?;
        if zb != b || zl != c.latent_dim {
            return Err(ModelError::shape(format!("z [{b}, {}]", c.latent_dim), format!("{:?}", z.dims())));
        }
        let tokens = Tensor::cat(
            &[
                self.dec_latent.forward(z)?.unsqueeze(1)?,
                self.dec_history.forward(history)?,
                expand(&self.dec_queries, b)?,
            ],
            1,
        )?
        .broadcast_add(&self.dec_pos)?;
        let mut x = tokens;
        for layer in &self.dec_layers {
            x = layer.forward(&x, ctx)?;
        }
        let queries = x.narrow(1, 1 + c.history, c.future)?;
        let delta = self.dec_out.forward(&self.dec_norm.forward(&queries)?)?;
        // frames are predicted as offsets from the last history frame
        let last = history.narrow(1, c.history - 1, 1)?;
        Ok(delta.broadcast_add(&last)?)
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum()
    }
}

/// `z = mu + exp(log_var / 2) · noise`.
pub fn reparameterize(mu: &Tensor, log_var: &Tensor, noise: &Tensor) -> Result<Tensor> {
    Ok(mu.add(&log_var.affine(0.5, 0.0)?.exp()?.mul(noise)?)?)
}

#[derive(Debug, Clone)]
pub struct VaeLoss {
    pub total: Tensor,
    pub recon: Tensor,
    pub kl: Tensor,
}

/// Closed-form `KL(N(mu, σ²) ‖ N(0, I))` summed over dimensions, averaged over the batch.
pub fn kl_term(mu: &Tensor, log_var: &Tensor) -> Result<Tensor> {
    let per = (mu.sqr()? + log_var.exp()?)?.sub(log_var)?.affine(0.5, -0.5)?;
    Ok(per.sum(D::Minus1)?.mean_all()?)
}

/// `recon + β·KL` with `recon` the mean squared error over all entries.
pub fn vae_loss(recon: &Tensor, target: &Tensor, mu: &Tensor, log_var: &Tensor, beta: f64) -> Result<VaeLoss> {
    if recon.dims() != target.dims() {
        return Err(ModelError::shape(format!("{:?}", target.dims()), format!("{:?}", recon.dims())));
    }
    let r = recon.sub(target)?.sqr()?.mean_all()?;
    let kl = kl_term(mu, log_var)?;
    let total = r.add(&kl.affine(beta, 0.0)?)?;
    Ok(VaeLoss { total, recon: r, kl })
}
