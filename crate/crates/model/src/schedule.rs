use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::host;

/// Cumulative signal levels `ᾱ(t)` for `t = 0..steps`, with `ᾱ(0) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub alpha_bar: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

impl DiffusionSchedule {
    /// Cosine schedule normalized so that step 0 is noise-free.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(ModelError::Config("diffusion needs at least one step".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let mut alpha_bar = vec![1.0];
        for t in 1..steps {
            let prev = alpha_bar[t - 1];
            let beta = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
            alpha_bar.push(prev * (1.0 - beta));
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            Err(ModelError::StepOutOfRange { t, steps: self.steps() })
        } else {
            Ok(())
        }
    }

    /// Posterior `q(z_s | z_t, x0)` for `s < t` as `(coef_x0, coef_zt, variance)`.
    pub fn posterior(&self, t: usize, s: usize) -> (f64, f64, f64) {
        let (at, as_) = (self.alpha_bar[t], self.alpha_bar[s]);
        let alpha = at / as_;
        let beta = 1.0 - alpha;
        let c0 = as_.sqrt() * beta / (1.0 - at);
        let ct = alpha.sqrt() * (1.0 - as_) / (1.0 - at);
        let var = beta * (1.0 - as_) / (1.0 - at);
        (c0, ct, var)
    }

    /// Evenly spaced descending steps from `steps − 1` to 0.
    pub fn strided(&self, count: usize) -> Vec<usize> {
        let n = self.steps();
        let count = count.clamp(1, n);
        let mut out: Vec<usize> = (0..count)
            .map(|i| ((n - 1) as f64 * (1.0 - i as f64 / (count.max(2) - 1) as f64)).round() as usize)
            .collect();
        if count == 1 {
            out = vec![n - 1];
        }
        out.dedup();
        out
    }
}

/// `√ᾱ(t)·z0 + √(1−ᾱ(t))·eps` with one step per batch row.
pub fn q_sample(schedule: &DiffusionSchedule, z0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
    let b = z0.dim(0)?;
    if t.len() != b {
        return Err(ModelError::shape(format!("{b} steps"), t.len()));
    }
    for &s in t {
        schedule.check(s)?;
    }
    let sig: Vec<f64> = t.iter().map(|&s| schedule.alpha_bar[s].sqrt()).collect();
    let noise: Vec<f64> = t.iter().map(|&s| (1.0 - schedule.alpha_bar[s]).sqrt()).collect();
    let sig = host(sig, &[b, 1], z0.dtype())?;
    let noise = host(noise, &[b, 1], z0.dtype())?;
    Ok(z0.broadcast_mul(&sig)?.add(&eps.broadcast_mul(&noise)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_shape() {
        let s = DiffusionSchedule::cosine(100).unwrap();
        assert_eq!(s.alpha_bar[0], 1.0);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        let last = *s.alpha_bar.last().unwrap();
        assert!(last > 0.0 && last < 0.05);
    }

    #[test]
    fn strided_ends() {
        let s = DiffusionSchedule::cosine(100).unwrap();
        let st = s.strided(10);
        assert_eq!(st.first(), Some(&99));
        assert_eq!(st.last(), Some(&0));
        assert_eq!(s.strided(100), (0..100).rev().collect::<Vec<_>>());
    }
}
