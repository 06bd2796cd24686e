#![allow(dead_code)]

use std::sync::Arc;

use hint_core::synth::{rest_pose, synth_generate, SynthConfig};
use hint_core::dataset::Dataset;
use hint_core::{FeatureLayout, FrameBlock, Normalizer};
use hint_model::checkpoint::LatentStats;
use hint_model::denoiser::{Denoiser, DenoiserConfig};
use hint_model::pipeline::Models;
use hint_model::schedule::DiffusionSchedule;
use hint_model::vae::{MotionVae, VaeConfig};
use hint_model::DType;

pub fn dataset() -> Dataset {
    synth_generate(&SynthConfig::default()).expect("synthetic data")
}

pub fn normalizer(ds: &Dataset) -> Normalizer {
    Normalizer::fit(ds.scenes.iter().flat_map(|s| s.agents.iter().flat_map(|a| a.frames.iter_rows()))).unwrap()
}

/// Untrained desk-size models: enough for contracts that do not depend on quality.
pub fn toy_models(seed: u64) -> Arc<Models> {
    let ds = dataset();
    let layout = FeatureLayout::synthetic8();
    let vae_cfg = VaeConfig::desk();
    let den_cfg = DenoiserConfig::desk();
    let vae = MotionVae::new(vae_cfg.clone(), layout.dim(), DType::F32, seed).unwrap();
    let den = Denoiser::new(den_cfg.clone(), layout.dim(), DType::F32, seed + 1).unwrap();
    let stats = LatentStats {
        mean: vec![0.0; vae_cfg.latent_dim],
        std: vec![1.0; vae_cfg.latent_dim],
    };
    let schedule = DiffusionSchedule::cosine(den_cfg.diffusion_steps).unwrap();
    Arc::new(Models::from_parts(vae, den, schedule, stats, normalizer(&ds), layout).unwrap())
}

pub fn ring(models: &Models, n: usize) -> Vec<(String, FrameBlock)> {
    (0..n)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let (x, z) = (1.5 * a.sin(), 1.5 * a.cos());
            (format!("agent{i}"), rest_pose(&models.layout, x, z, (-x).atan2(-z)).unwrap())
        })
        .collect()
}
