use serde::{Deserialize, Serialize};

use super::AutoencoderError;

/// How the decoder combines extrinsics and intrinsics into its input tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    #[default]
    Concat,
    Add,
    CrossAttention,
}

impl ConditionMode {
    pub const ALL: [ConditionMode; 3] = [Self::Concat, Self::Add, Self::CrossAttention];

    pub fn name(self) -> &'static str {
        match self {
            Self::Concat => "concat",
            Self::Add => "add",
            Self::CrossAttention => "cross_attention",
        }
    }
}

impl std::str::FromStr for ConditionMode {
    type Err = AutoencoderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| AutoencoderError::Config(format!("unknown condition_mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AEConfig {
    /// Points per cloud (N).
    pub n_points: usize,
    /// Joint tokens (J).
    pub joints: usize,
    /// Token width of the mixing network and decoder (D_z).
    pub d_z: usize,
    /// Intrinsic feature width (D_h).
    pub d_h: usize,
    /// Pooled global latent width (D_g).
    pub d_g: usize,
    /// Hidden widths of the shared per-point network before the final `D_g` layer.
    pub point_hidden: Vec<usize>,
    /// Hidden width of the feedforward that splits the global latent into tokens.
    pub split_hidden: usize,
    pub l_blocks: usize,
    pub l_dec_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub condition_mode: ConditionMode,
    pub lambda_j: f64,
    pub lambda_c: f64,
    pub lambda_kl: f64,
}

impl AEConfig {
    /// Full-size widths: J = 24, D_z = D_h = 128.
    pub fn paper() -> Self {
        Self {
            n_points: 6912,
            joints: 24,
            d_z: 128,
            d_h: 128,
            d_g: 256,
            point_hidden: vec![64, 128],
            split_hidden: 512,
            l_blocks: 4,
            l_dec_blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            condition_mode: ConditionMode::Concat,
            lambda_j: 1.0,
            lambda_c: 1.0,
            lambda_kl: 1e-4,
        }
    }

    /// Single-core sizes: J = 8, N = 512, D_h = 32.
/// The KL weight is lower than the paper profile's because vertex errors are in metres.
    pub fn desk() -> Self {
        Self {
            n_points: 512,
            joints: 8,
            d_z: 64,
            d_h: 32,
            d_g: 128,
            point_hidden: vec![32, 64],
            split_hidden: 256,
            l_blocks: 2,
            l_dec_blocks: 2,
            heads: 4,
            mlp_ratio: 2,
            lambda_kl: 1e-6,
            ..Self::paper()
        }
    }

    /// A configuration small enough for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            n_points: 6,
            joints: 2,
            d_z: 4,
            d_h: 2,
            d_g: 5,
            point_hidden: vec![4],
            split_hidden: 6,
            l_blocks: 1,
            l_dec_blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            condition_mode: ConditionMode::Concat,
            lambda_j: 0.7,
            lambda_c: 1.3,
            lambda_kl: 0.5,
        }
    }

    pub fn points_per_joint(&self) -> usize {
        self.n_points / self.joints.max(1)
    }

    pub fn validate(&self) -> Result<(), AutoencoderError> {
        let fail = |m: String| Err(AutoencoderError::Config(m));
        let widths = [
            ("n_points", self.n_points),
            ("joints", self.joints),
            ("d_z", self.d_z),
            ("d_h", self.d_h),
            ("d_g", self.d_g),
            ("split_hidden", self.split_hidden),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if self.point_hidden.contains(&0) {
            return fail("point_hidden widths must be positive".into());
        }
        if !self.d_z.is_multiple_of(self.heads) {
            return fail(format!("d_z = {} not divisible by heads = {}", self.d_z, self.heads));
        }
        if !self.n_points.is_multiple_of(self.joints) {
            return fail(format!("n_points = {} not divisible by joints = {}", self.n_points, self.joints));
        }
        for (name, v) in [("lambda_j", self.lambda_j), ("lambda_c", self.lambda_c), ("lambda_kl", self.lambda_kl)] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}
