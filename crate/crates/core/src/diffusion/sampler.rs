use rand::Rng;

use super::denoiser::{Denoiser, DenoiserKind};
use super::schedule::{p_sample_step, NoiseSchedule};
use super::DiffusionError;
use crate::autoencoder::{standard_normal, AEModel};
use crate::latent::{LatentPair, LatentStats};
use crate::numerics::Tensor;

type Res<T> = Result<T, DiffusionError>;

fn expect_kind(model: &Denoiser, kind: DenoiserKind) -> Res<()> {
    if model.config.kind != kind {
        return Err(DiffusionError::Contract(format!("expected a {kind:?} denoiser, got {:?}", model.config.kind)));
    }
    Ok(())
}

/// Runs the reverse chain from `x_T ~ N(0, I)` of shape `[B, J, W]`, drawing all noise from `rng`.
pub fn ancestral_sample<R: Rng>(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    cond: Option<&Tensor<f32>>,
    batch: usize,
    rng: &mut R,
) -> Res<Tensor<f32>> {
    let shape = [batch, model.config.joints, model.config.data_width];
    let mut x = standard_normal::<f32, R>(&shape, rng);
    for t in (1..=schedule.steps()).rev() {
        let steps = vec![t; batch];
        let eps = model.predict(&x, &steps, cond)?;
        let z = if t > 1 { standard_normal::<f32, R>(&shape, rng) } else { Tensor::zeros(&shape) };
        x = p_sample_step(&x, t, &eps, &z, schedule)?;
    }
    Ok(x)
}

/// `count` joint-position sets `[J, 3]` in data units.
pub fn sample_extrinsics<R: Rng>(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    stats: &LatentStats,
    rng: &mut R,
    count: usize,
) -> Res<Vec<Tensor<f32>>> {
    expect_kind(model, DenoiserKind::Extrinsic)?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let x = ancestral_sample(model, schedule, None, count, rng)?;
    Ok(stats.destandardize_e(&x).unstack())
}

/// Intrinsics `[J, D_h]` in data units for each of the given joint-position sets.
pub fn sample_intrinsics_batch<R: Rng>(
    model: &Denoiser,
    e: &[Tensor<f32>],
    schedule: &NoiseSchedule,
    stats: &LatentStats,
    rng: &mut R,
) -> Res<Vec<Tensor<f32>>> {
    expect_kind(model, DenoiserKind::Intrinsic)?;
    if e.is_empty() {
        return Ok(Vec::new());
    }
    let want = [model.config.joints, 3];
    if let Some(bad) = e.iter().find(|t| t.shape() != want) {
        return Err(DiffusionError::Shape(format!("extrinsics {:?}, expected {want:?}", bad.shape())));
    }
    let cond = stats.standardize_e(&Tensor::stack(e)?);
    let h = ancestral_sample(model, schedule, Some(&cond), e.len(), rng)?;
    Ok(stats.destandardize_h(&h).unstack())
}

pub fn sample_intrinsics<R: Rng>(
    model: &Denoiser,
    e: &Tensor<f32>,
    schedule: &NoiseSchedule,
    stats: &LatentStats,
    rng: &mut R,
) -> Res<Tensor<f32>> {
    Ok(sample_intrinsics_batch(model, std::slice::from_ref(e), schedule, stats, rng)?.remove(0))
}

/// A generated body with the latent it was decoded from.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedBody {
    pub latent: LatentPair,
    pub points: Vec<[f32; 3]>,
}

/// Extrinsics from the first stage, intrinsics conditioned on them, then decoding.
/// Each stage draws only from its own generator.
#[allow(clippy::too_many_arguments)]
pub fn cascade_sample<R1: Rng, R2: Rng>(
    ext_model: &Denoiser,
    int_model: &Denoiser,
    decoder: &AEModel,
    schedule: &NoiseSchedule,
    stats: &LatentStats,
    ext_rng: &mut R1,
    int_rng: &mut R2,
    count: usize,
) -> Res<Vec<GeneratedBody>> {
    let es = sample_extrinsics(ext_model, schedule, stats, ext_rng, count)?;
    let hs = sample_intrinsics_batch(int_model, &es, schedule, stats, int_rng)?;
    let latents = es
        .into_iter()
        .zip(hs)
        .map(|(e, h)| LatentPair::new(e, h).map_err(|err| DiffusionError::Shape(err.to_string())))
        .collect::<Res<Vec<_>>>()?;
    let points = decoder.decode_latents(&latents)?;
    Ok(latents.into_iter().zip(points).map(|(latent, points)| GeneratedBody { latent, points }).collect())
}
