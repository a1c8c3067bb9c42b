use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::autoencoder::AEConfig;
use crate::diffusion::{linear_schedule, DenoiserConfig, JointCondition, NoiseSchedule};
use crate::geometry::{SynthConfig, RINGS_PER_BONE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Paper,
    Desk,
}

impl FromStr for Profile {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            other => Err(PipelineError::Config(format!("unknown profile `{other}` (expected paper or desk)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from `learning_rate` down to `final_lr_ratio * learning_rate`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub lr_decay: LrDecay,
    pub final_lr_ratio: f64,
}

impl OptimizerConfig {
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        match self.lr_decay {
            LrDecay::Constant => self.learning_rate,
            LrDecay::Cosine => {
                let frac = step as f64 / self.steps.max(1) as f64;
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
                self.learning_rate * (self.final_lr_ratio + (1.0 - self.final_lr_ratio) * cos)
            }
        }
    }

    fn validate(&self, what: &str) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(format!("{what}: {m}")));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and non-negative");
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad("grad_clip must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return bad("final_lr_ratio must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSize {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub extrinsic: DenoiserSize,
    pub intrinsic: DenoiserSize,
    pub joint_condition: JointCondition,
    /// Sample with the EMA shadow instead of the live weights.
    pub sample_with_ema: bool,
    /// Optimizer of both denoising stages.
    pub optimizer: OptimizerConfig,
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule, PipelineError> {
        Ok(linear_schedule(self.steps, self.beta_1, self.beta_t)?)
    }

    pub fn extrinsic_config(&self, joints: usize) -> DenoiserConfig {
        let s = self.extrinsic;
        DenoiserConfig { mlp_ratio: s.mlp_ratio, ..DenoiserConfig::extrinsic(joints, s.width, s.blocks, s.heads) }
    }

    pub fn intrinsic_config(&self, joints: usize, d_h: usize) -> DenoiserConfig {
        let s = self.intrinsic;
        DenoiserConfig {
            mlp_ratio: s.mlp_ratio,
            joint_condition: self.joint_condition,
            ..DenoiserConfig::intrinsic(joints, d_h, s.width, s.blocks, s.heads)
        }
    }
}

/// Where training data comes from: a directory written by `synth-data`, or a generator spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Path(PathBuf),
    Synth(SynthConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub ae: AEConfig,
    pub diffusion: DiffusionConfig,
    pub optimizer: OptimizerConfig,
    pub ema_ratio: f64,
    pub seed: u64,
    pub data: DataSource,
    pub output_dir: PathBuf,
    /// Intermediate checkpoint period in optimizer steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl RunConfig {
    pub fn paper() -> Self {
        let ae = AEConfig::paper();
        let size = DenoiserSize { width: 128, blocks: 4, heads: 4, mlp_ratio: 4 };
        let optimizer = OptimizerConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            weight_decay: 0.01,
            steps: 100_000,
            grad_clip: 1.0,
            lr_decay: LrDecay::Constant,
            final_lr_ratio: 1.0,
        };
        Self {
            data: DataSource::Synth(SynthConfig::new(100, 20, ae.joints, ae.n_points / (ae.joints * RINGS_PER_BONE), 0)),
            ae,
            diffusion: DiffusionConfig {
                steps: 1000,
                beta_1: 1e-4,
                beta_t: 0.02,
                extrinsic: size,
                intrinsic: size,
                joint_condition: JointCondition::PerJoint,
                sample_with_ema: true,
                optimizer: optimizer.clone(),
            },
            optimizer,
            ema_ratio: 0.9999,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 10_000,
        }
    }

    pub fn desk() -> Self {
        let ae = AEConfig::desk();
        let paper = Self::paper();
        let optimizer = OptimizerConfig {
            batch_size: 16,
            steps: 5000,
            lr_decay: LrDecay::Cosine,
            final_lr_ratio: 0.05,
            ..paper.optimizer.clone()
        };
        let size = DenoiserSize { width: 64, blocks: 3, heads: 4, mlp_ratio: 2 };
        Self {
            data: DataSource::Synth(SynthConfig::new(8, 9, ae.joints, ae.n_points / (ae.joints * RINGS_PER_BONE), 0)),
            ae,
            diffusion: DiffusionConfig {
                extrinsic: size,
                intrinsic: size,
                optimizer: OptimizerConfig { batch_size: 64, steps: 10_000, ..optimizer.clone() },
                ..paper.diffusion
            },
            optimizer,
            ema_ratio: 0.999,
            checkpoint_every: 1000,
            ..paper
        }
    }

    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.ae.validate()?;
        self.optimizer.validate("optimizer")?;
        self.diffusion.optimizer.validate("diffusion.optimizer")?;
        self.diffusion.schedule()?;
        self.diffusion.extrinsic_config(self.ae.joints).validate()?;
        self.diffusion.intrinsic_config(self.ae.joints, self.ae.d_h).validate()?;
        if !(0.0..=1.0).contains(&self.ema_ratio) {
            return Err(PipelineError::Config(format!("ema_ratio {} outside [0, 1]", self.ema_ratio)));
        }
        if let DataSource::Synth(s) = &self.data {
            if s.joints != self.ae.joints {
                return Err(PipelineError::Config(format!(
                    "synthetic data has {} joints, model expects {}",
                    s.joints, self.ae.joints
                )));
            }
        }
        Ok(())
    }

    /// Parses a JSON config. A top-level `"profile"` key (`paper` by default) selects the
    /// base values; every other key overrides them. Unknown keys are rejected at any depth.
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        Self::from_json_or(text, Profile::Paper)
    }

    /// Like [`RunConfig::from_json`], with `default` as the base when the document has no `profile` key.
    pub fn from_json_or(text: &str, default: Profile) -> Result<Self, PipelineError> {
        let mut doc: Value = serde_json::from_str(text)?;
        let obj = doc.as_object_mut().ok_or_else(|| PipelineError::Config("config must be a JSON object".into()))?;
        let profile = match obj.remove("profile") {
            None => default,
            Some(Value::String(s)) => s.parse()?,
            Some(other) => return Err(PipelineError::Config(format!("profile must be a string, got {other}"))),
        };
        let mut base = serde_json::to_value(Self::profile(profile))?;
        merge(&mut base, doc, "")?;
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }
}

/// Deep merge of `patch` into `base`. Objects merge key by key; any other value replaces.
/// Keys absent from `base` are rejected, except that `data` may switch variant.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), PipelineError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let replaces_variant = path == "data";
            if replaces_variant && p.keys().any(|k| !b.contains_key(k)) {
                *b = p;
                return Ok(());
            }
            for (k, v) in p {
                let child = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &child)?,
                    None => return Err(PipelineError::Config(format!("unknown config key `{child}`"))),
                }
            }
            Ok(())
        }
        (slot, p) => {
            *slot = p;
            Ok(())
        }
    }
}
