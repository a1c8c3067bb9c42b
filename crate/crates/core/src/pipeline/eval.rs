use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, encode_latents, load_checkpoint, Checkpoint, CheckpointKind, Dataset, PipelineError};
use crate::autoencoder::{AEConfig, AEModel};
use crate::diffusion::{cascade_sample, sample_intrinsics_batch, Denoiser, GeneratedBody, NoiseSchedule};
use crate::geometry::{BodySample, TriangleMesh};
use crate::latent::LatentStats;
use crate::metrics::{apd, latent_moments, mpvpe, self_intersection_rate, EvalReport};
use crate::numerics::Tensor;

type Res<T> = Result<T, PipelineError>;

const DECODE_CHUNK: usize = 64;

/// A frozen autoencoder and cascade, ready for inference.
#[derive(Debug, Clone)]
pub struct Models {
    pub ae: AEModel,
    pub extrinsic: Denoiser,
    pub intrinsic: Denoiser,
    pub schedule: NoiseSchedule,
    pub stats: LatentStats,
}

impl Models {
    /// Checks kinds, shapes and that both denoisers were trained on this autoencoder's statistics.
    pub fn from_checkpoints(ae: &Checkpoint, ext: &Checkpoint, int: &Checkpoint) -> Res<Self> {
        ae.require_kind(CheckpointKind::Autoencoder)?;
        ext.require_kind(CheckpointKind::Extrinsic)?;
        int.require_kind(CheckpointKind::Intrinsic)?;
        let stats = ae.stats()?.clone();
        for (name, ck) in [("extrinsic", ext), ("intrinsic", int)] {
            if ck.latent_stats.as_ref() != Some(&stats) {
                return Err(PipelineError::Contract(format!(
                    "{name} checkpoint was trained on a different autoencoder's latents"
                )));
            }
        }
        let model = ae.to_autoencoder()?;
        let extrinsic = ext.sampling_denoiser()?;
        let intrinsic = int.sampling_denoiser()?;
        let cfg: &AEConfig = &model.config;
        if extrinsic.config.joints != cfg.joints || intrinsic.config.joints != cfg.joints {
            return Err(PipelineError::Contract("denoiser joint count differs from the autoencoder's".into()));
        }
        if intrinsic.config.data_width != cfg.d_h {
            return Err(PipelineError::Contract("intrinsic denoiser width differs from D_h".into()));
        }
        let schedule = ext.schedule()?;
        if int.schedule()? != schedule {
            return Err(PipelineError::Contract("the two denoisers use different noise schedules".into()));
        }
        Ok(Self { ae: model, extrinsic, intrinsic, schedule, stats })
    }

    pub fn load(ae: impl AsRef<Path>, ext: impl AsRef<Path>, int: impl AsRef<Path>) -> Res<Self> {
        Self::from_checkpoints(&load_checkpoint(ae)?, &load_checkpoint(ext)?, &load_checkpoint(int)?)
    }

    /// Full cascade; the two stages draw from streams derived from `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Res<Vec<GeneratedBody>> {
        let mut ext_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sample-extrinsic"));
        let mut int_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sample-intrinsic"));
        let mut out = Vec::with_capacity(count);
        let mut done = 0;
        // Chunked so memory stays bounded; each chunk continues the same two streams.
        while done < count {
            let n = (count - done).min(DECODE_CHUNK * 4);
            out.extend(cascade_sample(
                &self.extrinsic,
                &self.intrinsic,
                &self.ae,
                &self.schedule,
                &self.stats,
                &mut ext_rng,
                &mut int_rng,
                n,
            )?);
            done += n;
        }
        Ok(out)
    }

    /// Intrinsics `[J, D_h]` for caller-supplied joint positions `[J, 3]`.
    pub fn sample_intrinsics(&self, e: &[Tensor<f32>], seed: u64) -> Res<Vec<Tensor<f32>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sample-intrinsic"));
        Ok(sample_intrinsics_batch(&self.intrinsic, e, &self.schedule, &self.stats, &mut rng)?)
    }
}

/// Translates a cloud without known joints into the training frame: the encoder's root
/// joint estimate is moved to the origin. Returns the moved cloud and the subtracted offset.
pub fn pelvis_normalize_cloud(ae: &AEModel, points: &[[f32; 3]]) -> Res<(Vec<[f32; 3]>, [f32; 3])> {
    let root = ae.encode_cloud(points)?.joint_positions()[0];
    let moved = points.iter().map(|p| [p[0] - root[0], p[1] - root[1], p[2] - root[2]]).collect();
    Ok((moved, root))
}

/// Mean per-sample MPVPE of `reconstruct` over `samples`.
pub fn reconstruction_mpvpe(
    samples: &[BodySample],
    mut reconstruct: impl FnMut(&[BodySample]) -> Res<Vec<Vec<[f32; 3]>>>,
) -> Res<f64> {
    if samples.is_empty() {
        return Err(PipelineError::Data("no samples to reconstruct".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(DECODE_CHUNK) {
        let recon = reconstruct(chunk)?;
        if recon.len() != chunk.len() {
            return Err(PipelineError::Contract("reconstruction count differs from input count".into()));
        }
        for (s, r) in chunk.iter().zip(&recon) {
            total += mpvpe(&s.vertices, r)?;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Length of every bone `(parent(j), j)` for `j >= 1`, in joint order.
pub fn bone_lengths(joints: &[[f32; 3]], parents: &[i32]) -> Vec<f64> {
    parents
        .iter()
        .enumerate()
        .filter(|&(_, &p)| p >= 0)
        .map(|(j, &p)| {
            let (a, b) = (joints[j], joints[p as usize]);
            (0..3).map(|c| (a[c] as f64 - b[c] as f64).powi(2)).sum::<f64>().sqrt()
        })
        .collect()
}

/// Per-bone mean length over a set of skeletons.
pub fn mean_bone_lengths(sets: &[Vec<[f32; 3]>], parents: &[i32]) -> Vec<f64> {
    let mut mean = vec![0.0; parents.iter().filter(|&&p| p >= 0).count()];
    for s in sets {
        for (m, l) in mean.iter_mut().zip(bone_lengths(s, parents)) {
            *m += l / sets.len() as f64;
        }
    }
    mean
}

/// Reconstruction MPVPE on `held_out`; APD and SI rate over `sample_count` cascade samples
/// (SI on decoded vertices with the template faces); moments of the encoded held-out intrinsics.
pub fn evaluate(models: &Models, held_out: &Dataset, sample_count: usize, seed: u64) -> Res<EvalReport> {
    let ae = &models.ae;
    let recon = reconstruction_mpvpe(&held_out.samples, |chunk| {
        let latents = encode_latents(ae, chunk)?;
        Ok(ae.decode_latents(&latents)?)
    })?;
    let generated = models.sample(sample_count, seed)?;
    let joints: Vec<Vec<[f32; 3]>> = generated.iter().map(|g| g.latent.joint_positions()).collect();
    let diversity = apd(&joints)?;
    let mut si = 0.0;
    for g in &generated {
        let mesh = TriangleMesh::from_points(&g.points, &held_out.template.faces)?;
        si += self_intersection_rate(&mesh)? / generated.len() as f64;
    }
    let encoded = encode_latents(ae, &held_out.samples)?;
    let moments = latent_moments(&encoded.into_iter().map(|l| l.h).collect::<Vec<_>>())?;
    Ok(EvalReport { mpvpe: recon, apd: diversity, si_rate: si, latent_moments: moments, sample_count })
}
