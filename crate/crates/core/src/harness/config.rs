use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::data::DataConfig;
use crate::backbone::{StudentConfig, TeacherConfig};
use crate::ckt::CktConfig;
use crate::error::{CktError, Result};
use crate::tensor::Precision;
use crate::training::TrainConfig;

pub const PRECISION_ENV: &str = "CKTWAM_PRECISION";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_output")]
    pub output_dir: String,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub ckt: CktConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
}

fn default_output() -> String {
    "runs/latest".into()
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            output_dir: default_output(),
            teacher: TeacherConfig::desk(),
            student: StudentConfig::desk(),
            ckt: CktConfig::desk(),
            // The objective sums squared error over every token, so at this
            // scale the balance term needs far more weight than 0.01 to
            // keep the router from collapsing.
            training: TrainConfig {
                lr: 1e-3,
                warmup: 100,
                lambda_bal: 5.0,
                cache_capacity: 128,
                ..TrainConfig::paper()
            },
            data: DataConfig::desk(),
        }
    }

    /// Paper-scale transfer module with backbone shapes of the published
    /// teacher and student. Too large to instantiate here; used for
    /// parameter accounting.
    pub fn paper() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            output_dir: default_output(),
            teacher: TeacherConfig {
                layers: 40,
                d_model: 5120,
                heads: 40,
                ffn: 13824,
                n_img: 1560,
                n_text: 512,
                extract_layer: 20,
                seed: 11,
            },
            student: StudentConfig {
                blocks: 28,
                d_model: 2048,
                heads: 16,
                ffn: 8192,
                grid: [8, 30, 40],
                video_frames: 6,
                text_len: 512,
                text_dim: 1024,
                d_action: 7,
                d_video: 16,
                sigma_data: 0.5,
                rope_theta: 1e4,
                debug_rope_on_cross_attn: false,
                seed: 23,
            },
            ckt: CktConfig::paper(),
            training: TrainConfig::paper(),
            data: DataConfig::desk(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CktError::config(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    /// Reads a config, applies `key=value` overrides and the precision
    /// environment variable, then validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CktError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| CktError::config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CktError::config(format!("invalid config: {e}")))?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(PRECISION_ENV) {
            self.precision = Precision::parse(&v)
                .ok_or_else(|| CktError::config(format!("{PRECISION_ENV}={v}: expected f32 or f64")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.ckt.validate()?;
        self.training.validate()?;
        self.data.validate(&self.student)?;
        if self.ckt.d_stu != self.student.d_model {
            return Err(CktError::config(format!(
                "ckt.d_stu={} must equal student.d_model={}",
                self.ckt.d_stu, self.student.d_model
            )));
        }
        if self.ckt.d_tea != self.teacher.d_model {
            return Err(CktError::config(format!(
                "ckt.d_tea={} must equal teacher.d_model={}",
                self.ckt.d_tea, self.teacher.d_model
            )));
        }
        if self.teacher.extract_layer == 0 {
            return Err(CktError::config("teacher.extract_layer must be at least 1"));
        }
        Ok(())
    }

    /// Rough count of backbone weights, used to refuse instantiating
    /// backbones that cannot be held in memory.
    pub fn backbone_weights(&self) -> u64 {
        let t = &self.teacher;
        let s = &self.student;
        let block = |d: usize, ffn: usize| (4 * d * d + 2 * d * ffn) as u64;
        t.layers as u64 * block(t.d_model, t.ffn)
            + s.blocks as u64 * (block(s.d_model, s.ffn) + 10 * (s.d_model * s.d_model) as u64)
    }

    /// Parts of the config that determine model structure and weights.
    pub fn model_fingerprint(&self) -> Value {
        serde_json::json!({
            "seed": self.seed,
            "teacher": self.teacher,
            "student": self.student,
            "ckt": self.ckt,
            "data": self.data,
        })
    }
}

/// Sets a dotted path such as `ckt.k=9`. The value is parsed as JSON when
/// possible, otherwise taken as a string. Only existing keys may be set.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CktError::config(format!("override '{spec}' is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            CktError::config(format!(
                "override '{path}': '{}' is not an object",
                parts[..i].join(".")
            ))
        })?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(CktError::config(format!("override '{path}': unknown key '{part}'")));
            }
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| CktError::config(format!("override '{path}': unknown key '{part}'")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_roundtrips_and_validates() {
        let c = RunConfig::desk();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn paper_config_validates() {
        let c = RunConfig::paper();
        c.validate().unwrap();
        assert_eq!(c.teacher.extract_layer, 20);
        assert!(c.backbone_weights() > 10_000_000_000);
    }

    #[test]
    fn override_sets_nested_value() {
        let mut v = serde_json::to_value(RunConfig::desk()).unwrap();
        apply_override(&mut v, "ckt.k=9").unwrap();
        let c: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.ckt.top_k, 9);
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("k <= M"), "{err}");
    }

    #[test]
    fn override_rejects_unknown_keys() {
        let mut v = serde_json::to_value(RunConfig::desk()).unwrap();
        assert!(apply_override(&mut v, "ckt.bogus=1").is_err());
        assert!(apply_override(&mut v, "nokey").is_err());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut c = RunConfig::desk();
        c.ckt.d_stu = 16;
        assert!(c.validate().unwrap_err().to_string().contains("d_stu"));
    }
}
