use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{q_sample, time_embed, NoiseSchedule};
use super::DiffusionError;
use crate::numerics::{
    adaptive_modulate_var, attention_layer, feed_forward, init_attention, init_feed_forward, init_transformer_block,
    layer_norm_affine, linear, transformer_block, Graph, Initializer, ParameterStore, Real, Tensor, Var,
};

type Res<T> = Result<T, DiffusionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    /// Time-conditioned transformer over joint positions.
    Extrinsic,
    /// Adaptive-normalization transformer over intrinsics, conditioned on joint positions.
    Intrinsic,
}

/// How joint positions enter the intrinsic denoiser's condition vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JointCondition {
    /// `phi(e_i)` for each joint.
    #[default]
    PerJoint,
    /// `phi(mean_i e_i)` shared by all joints.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    pub joints: usize,
    /// 3 for extrinsics, `D_h` for intrinsics.
    pub data_width: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub joint_condition: JointCondition,
}

impl DenoiserConfig {
    pub fn extrinsic(joints: usize, width: usize, blocks: usize, heads: usize) -> Self {
        Self {
            kind: DenoiserKind::Extrinsic,
            joints,
            data_width: 3,
            width,
            blocks,
            heads,
            mlp_ratio: 4,
            joint_condition: JointCondition::PerJoint,
        }
    }

    pub fn intrinsic(joints: usize, d_h: usize, width: usize, blocks: usize, heads: usize) -> Self {
        Self { kind: DenoiserKind::Intrinsic, data_width: d_h, ..Self::extrinsic(joints, width, blocks, heads) }
    }

    pub fn validate(&self) -> Res<()> {
        if [self.joints, self.data_width, self.width, self.heads, self.mlp_ratio].contains(&0) {
            return Err(DiffusionError::Config("denoiser sizes must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(DiffusionError::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.kind == DenoiserKind::Extrinsic && self.data_width != 3 {
            return Err(DiffusionError::Config("extrinsic denoiser works on 3-wide joint positions".into()));
        }
        Ok(())
    }
}

pub fn init_denoiser<T: Real, R: Rng>(cfg: &DenoiserConfig, rng: &mut R) -> Res<ParameterStore<T>> {
    cfg.validate()?;
    let d = cfg.width;
    let mut init = Initializer::new(rng);
    init.linear("proj", cfg.data_width, d)?;
    init.embedding("pos", &[cfg.joints, d])?;
    match cfg.kind {
        DenoiserKind::Extrinsic => {
            for i in 0..cfg.blocks {
                init_transformer_block(&mut init, &format!("block{i}"), d, cfg.mlp_ratio, false)?;
            }
            init.layer_norm("ln_out", d)?;
        }
        DenoiserKind::Intrinsic => {
            init.linear("phi", 3, d)?;
            for i in 0..cfg.blocks {
                let p = format!("block{i}");
                init.linear(&format!("{p}.ada.0"), 2 * d, d)?;
                init.zero_linear(&format!("{p}.ada.1"), d, 6 * d)?;
                init_attention(&mut init, &format!("{p}.attn"), d)?;
                init_feed_forward(&mut init, &format!("{p}.mlp"), d, cfg.mlp_ratio)?;
            }
            init.linear("final_ada.0", 2 * d, d)?;
            init.zero_linear("final_ada.1", d, 2 * d)?;
        }
    }
    init.linear("head", d, cfg.data_width)?;
    Ok(init.finish())
}

/// `gamma(t)` rows for a batch of steps, as `[B, 1, width]`.
pub fn time_rows<T: Real>(steps: &[usize], width: usize) -> Tensor<T> {
    let data = steps.iter().flat_map(|&t| time_embed(t, width)).map(T::lit).collect();
    Tensor::new(&[steps.len(), 1, width], data).expect("consistent sizes")
}

fn check_input<T: Real>(g: &Graph<T>, cfg: &DenoiserConfig, x: Var, steps: &[usize], cond: Option<Var>) -> Res<usize> {
    let b = steps.len();
    if g.shape(x) != [b, cfg.joints, cfg.data_width] {
        return Err(DiffusionError::Shape(format!(
            "denoiser input {:?}, expected [{b}, {}, {}]",
            g.shape(x),
            cfg.joints,
            cfg.data_width
        )));
    }
    match (cfg.kind, cond) {
        (DenoiserKind::Intrinsic, Some(c)) if g.shape(c) == [b, cfg.joints, 3] => Ok(b),
        (DenoiserKind::Intrinsic, Some(c)) => {
            Err(DiffusionError::Shape(format!("condition {:?}, expected [{b}, {}, 3]", g.shape(c), cfg.joints)))
        }
        (DenoiserKind::Intrinsic, None) => Err(DiffusionError::Contract("intrinsic denoiser needs joint positions".into())),
        (DenoiserKind::Extrinsic, None) => Ok(b),
        (DenoiserKind::Extrinsic, Some(_)) => Err(DiffusionError::Contract("extrinsic denoiser takes no condition".into())),
    }
}

/// Six modulation chunks `[shift, scale, gate]` for attention then feedforward.
fn chunks<T: Real>(g: &mut Graph<T>, m: Var, d: usize, n: usize) -> Res<Vec<Var>> {
    (0..n).map(|k| Ok(g.slice_last(m, k * d, d)?)).collect()
}

fn ada_params<T: Real>(g: &mut Graph<T>, p: &ParameterStore<T>, prefix: &str, c: Var) -> Res<Var> {
    let h = linear(g, p, &format!("{prefix}.0"), c)?;
    let h = g.silu(h)?;
    Ok(linear(g, p, &format!("{prefix}.1"), h)?)
}

/// Noise prediction `[B, J, W]` for inputs `x: [B, J, W]` at `steps` (one per batch row).
pub fn denoise_graph<T: Real>(
    g: &mut Graph<T>,
    p: &ParameterStore<T>,
    cfg: &DenoiserConfig,
    x: Var,
    steps: &[usize],
    cond: Option<Var>,
) -> Res<Var> {
    let b = check_input(g, cfg, x, steps, cond)?;
    let (j, d) = (cfg.joints, cfg.width);
    let tokens = linear(g, p, "proj", x)?;
    let pos = g.param(p, "pos")?;
    let mut z = g.add_bcast(tokens, pos)?;
    let gamma = g.constant(time_rows(steps, d));
    let gamma = g.expand(gamma, &[b, j, d])?;
    match cfg.kind {
        DenoiserKind::Extrinsic => {
            z = g.add(z, gamma)?;
            for i in 0..cfg.blocks {
                z = transformer_block(g, p, &format!("block{i}"), z, None, cfg.heads)?;
            }
            z = layer_norm_affine(g, p, "ln_out", z)?;
        }
        DenoiserKind::Intrinsic => {
            let e = cond.expect("checked above");
            let phi = linear(g, p, "phi", e)?;
            let c = g.concat(&[gamma, phi])?;
            for i in 0..cfg.blocks {
                let prefix = format!("block{i}");
                let m = ada_params(g, p, &format!("{prefix}.ada"), c)?;
                let ch = chunks(g, m, d, 6)?;
                let n = adaptive_modulate_var(g, z, ch[1], ch[0])?;
                let a = attention_layer(g, p, &format!("{prefix}.attn"), n, n, cfg.heads)?;
                let a = g.mul(ch[2], a)?;
                z = g.add(z, a)?;
                let n = adaptive_modulate_var(g, z, ch[4], ch[3])?;
                let f = feed_forward(g, p, &format!("{prefix}.mlp"), n)?;
                let f = g.mul(ch[5], f)?;
                z = g.add(z, f)?;
            }
            let m = ada_params(g, p, "final_ada", c)?;
            let ch = chunks(g, m, d, 2)?;
            z = adaptive_modulate_var(g, z, ch[1], ch[0])?;
        }
    }
    Ok(linear(g, p, "head", z)?)
}

/// Joint positions as seen by the intrinsic denoiser under `cfg.joint_condition`.
pub fn condition_input<T: Real>(cfg: &DenoiserConfig, e: &Tensor<T>) -> Tensor<T> {
    match cfg.joint_condition {
        JointCondition::PerJoint => e.clone(),
        JointCondition::Pooled => {
            let s = e.shape();
            let (b, j) = (s[0], s[1]);
            let mut mean = vec![T::zero(); b * 3];
            for bi in 0..b {
                for ji in 0..j {
                    for c in 0..3 {
                        mean[bi * 3 + c] += e.data()[(bi * j + ji) * 3 + c];
                    }
                }
            }
            let inv = T::lit(1.0 / j as f64);
            Tensor::from_fn(s, |i| mean[(i / (j * 3)) * 3 + i % 3] * inv)
        }
    }
}

/// Builds `x_t` for each batch row from its own step and noise.
pub fn noised_batch<T: Real>(x0: &Tensor<T>, steps: &[usize], eps: &Tensor<T>, schedule: &NoiseSchedule) -> Res<Tensor<T>> {
    if x0.shape() != eps.shape() || x0.shape().first() != Some(&steps.len()) {
        return Err(DiffusionError::Shape(format!(
            "x0 {:?}, eps {:?}, {} steps",
            x0.shape(),
            eps.shape(),
            steps.len()
        )));
    }
    let rows: Result<Vec<_>, _> = x0
        .unstack()
        .iter()
        .zip(eps.unstack())
        .zip(steps)
        .map(|((x, e), &t)| q_sample(x, t, &e, schedule))
        .collect();
    Ok(Tensor::stack(&rows?)?)
}

/// `mean((eps - eps_theta(x_t, t, cond))^2)` over all entries.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_loss_graph<T: Real>(
    g: &mut Graph<T>,
    p: &ParameterStore<T>,
    cfg: &DenoiserConfig,
    x0: &Tensor<T>,
    cond: Option<&Tensor<T>>,
    steps: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Res<Var> {
    let xt = noised_batch(x0, steps, eps, schedule)?;
    let xv = g.constant(xt);
    let cv = cond.map(|c| g.constant(condition_input(cfg, c)));
    let pred = denoise_graph(g, p, cfg, xv, steps, cv)?;
    let target = g.constant(eps.clone());
    Ok(g.mse(pred, target)?)
}

/// Extrinsic objective on standardized joint positions `e0: [B, J, 3]`.
pub fn ddpm_loss_extrinsic<T: Real>(
    g: &mut Graph<T>,
    p: &ParameterStore<T>,
    cfg: &DenoiserConfig,
    e0: &Tensor<T>,
    steps: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Res<Var> {
    ddpm_loss_graph(g, p, cfg, e0, None, steps, eps, schedule)
}

/// Intrinsic objective on standardized `h0: [B, J, D_h]` conditioned on standardized `e: [B, J, 3]`.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_loss_intrinsic<T: Real>(
    g: &mut Graph<T>,
    p: &ParameterStore<T>,
    cfg: &DenoiserConfig,
    h0: &Tensor<T>,
    e: &Tensor<T>,
    steps: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Res<Var> {
    ddpm_loss_graph(g, p, cfg, h0, Some(e), steps, eps, schedule)
}

/// A noise-prediction network with its parameters.
#[derive(Debug, Clone)]
pub struct Denoiser<T = f32> {
    pub config: DenoiserConfig,
    pub params: ParameterStore<T>,
}

impl<T: Real> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Res<Self> {
        let params = init_denoiser(&config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: DenoiserConfig, params: ParameterStore<T>) -> Res<Self> {
        let expected: ParameterStore<T> = init_denoiser(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        if let Some(m) = params.layout_mismatch(&expected) {
            return Err(DiffusionError::Layout(m));
        }
        Ok(Self { config, params })
    }

    /// Same network evaluated with other weights of identical layout (for example the EMA shadow).
    pub fn with_params(&self, params: ParameterStore<T>) -> Res<Self> {
        Self::from_params(self.config.clone(), params)
    }

    /// Noise prediction for `x: [B, J, W]`; `cond: [B, J, 3]` for the intrinsic kind.
    pub fn predict(&self, x: &Tensor<T>, steps: &[usize], cond: Option<&Tensor<T>>) -> Res<Tensor<T>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let cv = cond.map(|c| g.constant(condition_input(&self.config, c)));
        let out = denoise_graph(&mut g, &self.params, &self.config, xv, steps, cv)?;
        Ok(g.value(out).clone())
    }
}
