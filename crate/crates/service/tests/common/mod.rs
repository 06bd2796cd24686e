#![allow(dead_code)]

use std::sync::Arc;

use hint_core::synth::{synth_generate, SynthConfig};
use hint_core::{FeatureLayout, Normalizer};
use hint_model::checkpoint::LatentStats;
use hint_model::denoiser::{Denoiser, DenoiserConfig};
use hint_model::pipeline::Models;
use hint_model::schedule::DiffusionSchedule;
use hint_model::vae::{MotionVae, VaeConfig};
use hint_model::DType;
use hint_service::handler::HandlerConfig;

/// Untrained desk-size models; the protocol does not depend on their quality.
pub fn toy_models() -> Arc<Models> {
    let ds = synth_generate(&SynthConfig::default()).unwrap();
    let norm = Normalizer::fit(ds.scenes.iter().flat_map(|s| s.agents.iter().flat_map(|a| a.frames.iter_rows()))).unwrap();
    let layout = FeatureLayout::synthetic8();
    let vae_cfg = VaeConfig::desk();
    let den_cfg = DenoiserConfig::desk();
    let vae = MotionVae::new(vae_cfg.clone(), layout.dim(), DType::F32, 1).unwrap();
    let den = Denoiser::new(den_cfg.clone(), layout.dim(), DType::F32, 2).unwrap();
    let stats = LatentStats {
        mean: vec![0.0; vae_cfg.latent_dim],
        std: vec![1.0; vae_cfg.latent_dim],
    };
    let schedule = DiffusionSchedule::cosine(den_cfg.diffusion_steps).unwrap();
    Arc::new(Models::from_parts(vae, den, schedule, stats, norm, layout).unwrap())
}

pub fn fast_handler() -> HandlerConfig {
    HandlerConfig {
        sampler_steps: Some(4),
        ..HandlerConfig::default()
    }
}
