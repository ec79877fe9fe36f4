use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CktError, Result};
use crate::tensor::Tensor;

/// Log-normal noise levels: `ln σ ~ N(p_mean, p_std²)`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub p_mean: f64,
    pub p_std: f64,
    /// Per-instance loss weight as a function of σ.
    pub weight: fn(f64) -> f64,
}

fn unit_weight() -> fn(f64) -> f64 {
    |_| 1.0
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            p_mean: 1.39,
            p_std: 1.2,
            weight: unit_weight(),
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_std > 0.0) || !self.p_mean.is_finite() {
            return Err(CktError::config(format!(
                "noise schedule needs finite p_mean and p_std > 0 (got {}, {})",
                self.p_mean, self.p_std
            )));
        }
        Ok(())
    }

    pub fn sample_sigma<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<f64> {
        (0..batch)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                (self.p_mean + self.p_std * z).exp()
            })
            .collect()
    }

    pub fn weights(&self, sigma: &[f64]) -> Vec<f64> {
        sigma.iter().map(|&s| (self.weight)(s)).collect()
    }
}

/// `clean + σ_b ε` with fresh standard normal `ε`; returns both.
pub fn make_noisy<R: Rng + ?Sized>(clean: &Tensor, sigma: &[f64], rng: &mut R) -> Result<(Tensor, Tensor)> {
    let eps: Vec<f64> = (0..clean.numel()).map(|_| rng.sample(StandardNormal)).collect();
    let eps = Tensor::new(clean.shape().to_vec(), eps)?;
    Ok((add_scaled_noise(clean, sigma, &eps)?, eps))
}

/// `clean + σ_b eps` for a given `eps`.
pub fn add_scaled_noise(clean: &Tensor, sigma: &[f64], eps: &Tensor) -> Result<Tensor> {
    let b = clean.shape().first().copied().unwrap_or(0);
    if sigma.len() != b || eps.shape() != clean.shape() {
        return Err(CktError::shape("make_noisy", clean.shape(), eps.shape()));
    }
    let per = clean.numel() / b.max(1);
    let data = clean
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (c, e))| c + sigma[i / per] * e)
        .collect();
    Tensor::new(clean.shape().to_vec(), data)
}

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to
/// 0 at `total`.
pub fn lr_at(step: u64, base: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
