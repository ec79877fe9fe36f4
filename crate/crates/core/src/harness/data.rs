//! Synthetic staged manipulation task.
//!
//! Each episode passes through `stages` phases. Every observation carries a
//! small latent code that is visible to the teacher through its image tokens
//! but absent from the student's instruction tokens, which only identify the
//! stage. Clean actions and video latents are stage-specific linear
//! functions of that code, so the student can only fit them with context
//! transferred from the teacher.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{StudentConfig, TeacherConfig};
use crate::error::{CktError, Result};
use crate::injection::Observation;
use crate::tensor::Tensor;
use crate::training::Batch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub episodes: usize,
    pub stages: usize,
    pub latent_dim: usize,
    /// Std of per-observation noise added to teacher image tokens.
    pub obs_noise: f64,
    /// Up to this many trailing action tokens are masked out per instance.
    pub max_action_pad: usize,
    pub seed: u64,
}

impl DataConfig {
    pub fn desk() -> Self {
        DataConfig {
            episodes: 32,
            stages: 4,
            latent_dim: 4,
            obs_noise: 0.1,
            max_action_pad: 3,
            seed: 17,
        }
    }

    pub fn validate(&self, student: &StudentConfig) -> Result<()> {
        if self.episodes == 0 || self.stages == 0 || self.latent_dim == 0 {
            return Err(CktError::config(
                "data.episodes, stages and latent_dim must be positive",
            ));
        }
        if self.max_action_pad >= student.action_tokens() {
            return Err(CktError::config(format!(
                "data.max_action_pad={} must leave at least one of {} action tokens",
                self.max_action_pad,
                student.action_tokens()
            )));
        }
        if !(self.obs_noise >= 0.0) {
            return Err(CktError::config("data.obs_noise must be non-negative"));
        }
        Ok(())
    }
}

/// One observation with its clean targets.
#[derive(Clone, Debug)]
pub struct Sample {
    pub observation: Observation,
    pub video: Vec<f64>,
    pub action: Vec<f64>,
    /// Valid action tokens from the front.
    pub action_len: usize,
}

struct StageSpec {
    img_base: Vec<f64>,
    text_tokens: Vec<f64>,
    instruction: Vec<f64>,
    action_map: Vec<f64>,
    video_map: Vec<f64>,
}

fn gaussian(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `map [out, r] · u [r]`, rescaled so the output has unit RMS on average.
fn project(map: &[f64], u: &[f64]) -> Vec<f64> {
    let r = u.len();
    let scale = 1.0 / (r as f64).sqrt();
    map.chunks(r)
        .map(|row| scale * row.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// The full pool of episodes, flattened in episode-major, stage-minor order.
pub struct StagedTask {
    pub samples: Vec<Sample>,
    t: TeacherConfig,
    s: StudentConfig,
    stages: usize,
    seed: u64,
}

impl StagedTask {
    pub fn generate(cfg: &DataConfig, teacher: &TeacherConfig, student: &StudentConfig) -> Result<Self> {
        cfg.validate(student)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let r = cfg.latent_dim;
        let (dt, n_img, n_txt) = (teacher.d_model, teacher.n_img, teacher.n_text);
        let (n_act, n_vid) = (student.d_action, student.d_video);
        let stages: Vec<StageSpec> = (0..cfg.stages)
            .map(|_| StageSpec {
                img_base: gaussian(n_img * dt, 1.0, &mut rng),
                text_tokens: gaussian(n_txt * dt, 1.0, &mut rng),
                instruction: gaussian(student.text_len * student.text_dim, 1.0, &mut rng),
                action_map: gaussian(n_act * r, 1.0, &mut rng),
                video_map: gaussian(n_vid * r, 1.0, &mut rng),
            })
            .collect();
        // The latent code enters every image token through a shared embedding.
        let embed = gaussian(n_img * dt * r, 1.0, &mut rng);

        let mut samples = Vec::with_capacity(cfg.episodes * cfg.stages);
        for _ in 0..cfg.episodes {
            for (k, st) in stages.iter().enumerate() {
                let u = gaussian(r, 1.0, &mut rng);
                let mut img = project(&embed, &u);
                for (x, (b, n)) in
                    img.iter_mut()
                        .zip(st.img_base.iter().zip(gaussian(n_img * dt, cfg.obs_noise, &mut rng)))
                {
                    *x += b + n;
                }
                let pad = rng.gen_range(0..=cfg.max_action_pad);
                let observation = Observation::new(
                    Tensor::new(vec![1, n_img, dt], img)?,
                    Tensor::new(vec![1, n_txt, dt], st.text_tokens.clone())?,
                    Tensor::new(vec![1, student.text_len, student.text_dim], st.instruction.clone())?,
                    Some(k),
                );
                samples.push(Sample {
                    observation,
                    video: project(&st.video_map, &u).repeat(student.video_tokens()),
                    action: project(&st.action_map, &u).repeat(student.action_tokens()),
                    action_len: student.action_tokens() - pad,
                });
            }
        }
        Ok(StagedTask {
            samples,
            t: teacher.clone(),
            s: student.clone(),
            stages: cfg.stages,
            seed: cfg.seed,
        })
    }

    pub fn teacher_config(&self) -> &TeacherConfig {
        &self.t
    }

    /// Collates the given samples into a batch.
    pub fn batch_of(&self, idx: &[usize]) -> Result<Batch> {
        let s = &self.s;
        let (tv, ta) = (s.video_tokens(), s.action_tokens());
        let mut video = Vec::with_capacity(idx.len() * tv * s.d_video);
        let mut action = Vec::with_capacity(idx.len() * ta * s.d_action);
        let mut action_mask = Vec::with_capacity(idx.len() * ta);
        let mut observations = Vec::with_capacity(idx.len());
        for &i in idx {
            let x = self
                .samples
                .get(i)
                .ok_or_else(|| CktError::Range(format!("sample {i} of {}", self.samples.len())))?;
            video.extend_from_slice(&x.video);
            action.extend_from_slice(&x.action);
            action_mask.extend((0..ta).map(|t| if t < x.action_len { 1.0 } else { 0.0 }));
            observations.push(x.observation.clone());
        }
        let b = idx.len();
        Ok(Batch {
            observations,
            video: Tensor::new(vec![b, tv, s.d_video], video)?,
            action: Tensor::new(vec![b, ta, s.d_action], action)?,
            video_mask: vec![1.0; b * tv],
            action_mask,
        })
    }

    /// Batch for training step `step`. When `size` is a multiple of the
    /// stage count the batch holds whole episodes, so every stage appears
    /// equally often; otherwise samples are drawn from the pool at random.
    pub fn batch(&self, step: u64, size: usize) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ step.wrapping_mul(0x2545_f491_4f6c_dd1d));
        let stages = self.stages;
        let episodes = self.samples.len() / stages;
        let idx: Vec<usize> = if size.is_multiple_of(stages) && size / stages <= episodes {
            let mut eps: Vec<usize> = (0..episodes).collect();
            eps.shuffle(&mut rng);
            eps[..size / stages]
                .iter()
                .flat_map(|e| (0..stages).map(move |k| e * stages + k))
                .collect()
        } else {
            let mut all: Vec<usize> = (0..self.samples.len()).collect();
            all.shuffle(&mut rng);
            all.truncate(size.min(self.samples.len()));
            all
        };
        self.batch_of(&idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> StagedTask {
        StagedTask::generate(&DataConfig::desk(), &TeacherConfig::desk(), &StudentConfig::desk()).unwrap()
    }

    #[test]
    fn pool_layout() {
        let t = task();
        assert_eq!(t.samples.len(), 32 * 4);
        for (i, s) in t.samples.iter().enumerate() {
            assert_eq!(s.observation.stage, Some(i % 4));
            assert!(s.action_len >= 1);
        }
    }

    #[test]
    fn targets_have_unit_scale() {
        let t = task();
        let sq: f64 = t.samples.iter().flat_map(|s| s.action.iter()).map(|v| v * v).sum();
        let n = t.samples.len() * t.samples[0].action.len();
        let rms = (sq / n as f64).sqrt();
        assert!((0.8..1.2).contains(&rms), "rms {rms}");
    }

    #[test]
    fn batches_are_reproducible_and_masked() {
        let t = task();
        let a = t.batch(5, 8).unwrap();
        let b = t.batch(5, 8).unwrap();
        assert_eq!(a.action.data(), b.action.data());
        a.validate().unwrap();
        assert_ne!(t.batch(6, 8).unwrap().action.data(), a.action.data());
    }

    #[test]
    fn batches_cover_stages_evenly() {
        let t = task();
        let b = t.batch(3, 8).unwrap();
        let mut counts = [0; 4];
        for o in &b.observations {
            counts[o.stage.unwrap()] += 1;
        }
        assert_eq!(counts, [2; 4]);
        assert_eq!(t.batch(3, 5).unwrap().len(), 5);
    }

    #[test]
    fn observation_ids_are_distinct() {
        let t = task();
        let mut ids: Vec<u64> = t.samples.iter().map(|s| s.observation.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), t.samples.len());
    }
}
