use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{save_checkpoint, Checkpoint, CheckpointKind, OptimizerConfig, PairSampler, PipelineError, RunConfig};
use crate::autoencoder::{loss_total_graph, standard_normal, AEModel, LossBreakdown, PairBatch};
use crate::diffusion::{ddpm_loss_graph, Denoiser, DenoiserConfig, EmaState};
use crate::geometry::BodySample;
use crate::latent::{LatentPair, LatentStats};
use crate::numerics::{clip_grad_norm, AdamW, Graph, NumericsError, ParameterStore, Tensor};

type Res<T> = Result<T, PipelineError>;

const ENCODE_CHUNK: usize = 64;

/// The three training stages, in the order they must run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Autoencoder,
    Extrinsic,
    Intrinsic,
}

impl Stage {
    /// File name of the stage's final checkpoint inside an output directory.
    pub fn file_name(self) -> &'static str {
        match self {
            Stage::Autoencoder => "ae.ckpt",
            Stage::Extrinsic => "extrinsic.ckpt",
            Stage::Intrinsic => "intrinsic.ckpt",
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Stage::Autoencoder => "ae",
            Stage::Extrinsic => "extrinsic",
            Stage::Intrinsic => "intrinsic",
        }
    }
}

/// Independent seed for a named purpose inside one run.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    // FNV-1a over the purpose, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut x = seed ^ h;
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn step_path(dir: &Path, stage: Stage, step: usize) -> PathBuf {
    dir.join(format!("{}_step{step}.ckpt", stage.tag()))
}

fn optimizer_step(
    opt: &mut AdamW<f32>,
    cfg: &OptimizerConfig,
    step: usize,
    params: &mut ParameterStore<f32>,
    mut grads: ParameterStore<f32>,
) -> Res<()> {
    if cfg.grad_clip > 0.0 {
        clip_grad_norm(&mut grads, cfg.grad_clip);
    }
    opt.lr = cfg.learning_rate_at(step);
    opt.step(params, &grads)?;
    Ok(())
}

/// A trained autoencoder with its per-step losses and final checkpoint.
#[derive(Debug, Clone)]
pub struct AeRun {
    pub model: AEModel,
    pub curve: Vec<LossBreakdown<f64>>,
    pub checkpoint: Checkpoint,
}

/// One optimizer batch: pairs from `sampler` plus reparameterization noise `[2B, J, D_h]`.
pub fn ae_batch<R: Rng>(
    run: &RunConfig,
    samples: &[BodySample],
    sampler: &PairSampler,
    rng: &mut R,
) -> Res<(PairBatch<f32>, Tensor<f32>)> {
    let b = run.optimizer.batch_size;
    let pairs: Vec<_> = sampler.sample(b, rng).into_iter().map(|(i, j)| (&samples[i], &samples[j])).collect();
    let batch = PairBatch::from_pairs(&pairs)?;
    let eps = standard_normal(&[2 * b, run.ae.joints, run.ae.d_h], rng);
    Ok((batch, eps))
}

/// Posterior-mean latents of `samples`, encoded in chunks.
pub fn encode_latents(model: &AEModel, samples: &[BodySample]) -> Res<Vec<LatentPair>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(ENCODE_CHUNK) {
        let clouds: Vec<&[[f32; 3]]> = chunk.iter().map(|s| s.vertices.as_slice()).collect();
        out.extend(model.encode_clouds(&clouds)?);
    }
    Ok(out)
}

/// Trains the autoencoder on same-subject pose pairs from `train`.
///
/// With `out_dir` set, writes `ae_step0.ckpt` before the first update, `ae_step{k}.ckpt`
/// every `checkpoint_every` steps and `ae.ckpt` (with latent statistics) at the end.
pub fn train_autoencoder(run: &RunConfig, train: &[BodySample], out_dir: Option<&Path>) -> Res<AeRun> {
    run.validate()?;
    if let Some(s) = train.iter().find(|s| s.vertices.len() != run.ae.n_points || s.joints.len() != run.ae.joints) {
        return Err(PipelineError::Config(format!(
            "model expects {} points and {} joints, data has {} and {}",
            run.ae.n_points,
            run.ae.joints,
            s.vertices.len(),
            s.joints.len()
        )));
    }
    let sampler = PairSampler::new(train)?;
    let mut model = AEModel::new(run.ae.clone(), derive_seed(run.seed, "ae-init"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, "ae-train"));
    let mut opt = AdamW::new(&model.params, run.optimizer.learning_rate, run.optimizer.weight_decay);
    let snapshot = |model: &AEModel, step: usize, stats: Option<LatentStats>| Checkpoint::autoencoder(model, Some(run.clone()), step as u64, stats);
    if let Some(dir) = out_dir {
        save_checkpoint(&snapshot(&model, 0, None), step_path(dir, Stage::Autoencoder, 0))?;
    }

    let mut curve = Vec::with_capacity(run.optimizer.steps);
    for step in 0..run.optimizer.steps {
        let (batch, eps) = ae_batch(run, train, &sampler, &mut rng)?;
        let outcome = (|| -> Res<LossBreakdown<f64>> {
            let mut g = Graph::new();
            let terms = loss_total_graph(&mut g, &model.params, &model.config, &batch, Some(&eps))?;
            let values = terms.values(&g);
            if !values.total.is_finite() {
                return Err(NumericsError::NonFinite(format!("loss {values:?}")).into());
            }
            let grads = g.backward(terms.total)?;
            let grads = g.param_grads(&grads);
            optimizer_step(&mut opt, &run.optimizer, step, &mut model.params, grads)?;
            Ok(values)
        })();
        let values = match outcome {
            Ok(v) => v,
            Err(e) if is_non_finite(&e) => {
                let ck = snapshot(&model, step, None);
                return Err(abort(out_dir, Stage::Autoencoder, step, ck, &e)?);
            }
            Err(e) => return Err(e),
        };
        if step % 100 == 0 {
            log::info!(
                "ae step {step}: total {:.6} rec {:.6} dis {:.6} prior {:.6}",
                values.total,
                values.rec,
                values.dis,
                values.prior
            );
        }
        curve.push(values);
        let done = step + 1;
        if let Some(dir) = out_dir {
            if run.checkpoint_every > 0 && done % run.checkpoint_every == 0 && done < run.optimizer.steps {
                save_checkpoint(&snapshot(&model, done, None), step_path(dir, Stage::Autoencoder, done))?;
            }
        }
    }

    let stats = LatentStats::compute(&encode_latents(&model, train)?)?;
    let checkpoint = snapshot(&model, run.optimizer.steps, Some(stats));
    if let Some(dir) = out_dir {
        save_checkpoint(&checkpoint, dir.join(Stage::Autoencoder.file_name()))?;
    }
    Ok(AeRun { model, curve, checkpoint })
}

/// True for errors caused by a NaN or infinity appearing during a training step.
fn is_non_finite(e: &PipelineError) -> bool {
    use crate::autoencoder::AutoencoderError as A;
    use crate::diffusion::DiffusionError as D;
    matches!(
        e,
        PipelineError::Numerics(NumericsError::NonFinite(_))
            | PipelineError::Autoencoder(A::Numerics(NumericsError::NonFinite(_)))
            | PipelineError::Diffusion(D::Numerics(NumericsError::NonFinite(_)))
            | PipelineError::Diffusion(D::Autoencoder(A::Numerics(NumericsError::NonFinite(_))))
    )
}

/// Writes the pre-step weights and a diagnostic next to them, then builds the abort error.
fn abort(out_dir: Option<&Path>, stage: Stage, step: usize, ck: Checkpoint, cause: &PipelineError) -> Res<PipelineError> {
    log::error!("{} training became non-finite at step {step}: {cause}", stage.tag());
    let snapshot = match out_dir {
        Some(dir) => {
            let path = dir.join(format!("{}_nonfinite_step{step}.ckpt", stage.tag()));
            save_checkpoint(&ck, &path)?;
            std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&serde_json::json!({
                "stage": stage.tag(),
                "step": step,
                "cause": cause.to_string(),
            }))?)?;
            Some(path)
        }
        None => None,
    };
    Ok(PipelineError::NonFinite { step, snapshot })
}

/// A trained denoiser with its EMA shadow, per-step losses and final checkpoint.
#[derive(Debug, Clone)]
pub struct DdpmRun {
    pub model: Denoiser,
    pub ema: EmaState,
    pub curve: Vec<f64>,
    pub checkpoint: Checkpoint,
}

/// Frozen encoder, its latent statistics and the standardized training latents.
fn prepare_latents(ae_checkpoint: &Checkpoint, train: &[BodySample]) -> Res<(LatentStats, Tensor<f32>, Tensor<f32>)> {
    ae_checkpoint.require_kind(CheckpointKind::Autoencoder)?;
    let stats = ae_checkpoint.stats()?.clone();
    let ae = ae_checkpoint.to_autoencoder()?;
    let latents = encode_latents(&ae, train)?;
    if latents.is_empty() {
        return Err(PipelineError::Data("no training samples to encode".into()));
    }
    let e = Tensor::stack(&latents.iter().map(|l| l.e.clone()).collect::<Vec<_>>())?;
    let h = Tensor::stack(&latents.iter().map(|l| l.h.clone()).collect::<Vec<_>>())?;
    Ok((stats.clone(), stats.standardize_e(&e), stats.standardize_h(&h)))
}

fn gather(x: &Tensor<f32>, rows: &[usize]) -> Res<Tensor<f32>> {
    let row = x.len() / x.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * row);
    for &r in rows {
        data.extend_from_slice(&x.data()[r * row..(r + 1) * row]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = rows.len();
    Ok(Tensor::new(&shape, data)?)
}

fn train_denoiser(
    run: &RunConfig,
    stage: Stage,
    config: DenoiserConfig,
    x0: &Tensor<f32>,
    cond: Option<&Tensor<f32>>,
    stats: LatentStats,
    out_dir: Option<&Path>,
) -> Res<DdpmRun> {
    let tag = stage.tag();
    let schedule = run.diffusion.schedule()?;
    let opt_cfg = &run.diffusion.optimizer;
    let mut model = Denoiser::new(config, derive_seed(run.seed, &format!("{tag}-init")))?;
    let mut ema = EmaState::new(&model.params, run.ema_ratio)?;
    let mut opt = AdamW::new(&model.params, opt_cfg.learning_rate, opt_cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, &format!("{tag}-train")));
    let count = x0.shape()[0];
    let b = opt_cfg.batch_size;
    let snapshot = |model: &Denoiser, ema: &EmaState, step: usize| {
        Checkpoint::denoiser(model, Some(ema.weights()), Some(run.clone()), step as u64, Some(stats.clone()))
    };

    let mut curve = Vec::with_capacity(opt_cfg.steps);
    for step in 0..opt_cfg.steps {
        let rows: Vec<usize> = (0..b).map(|_| rng.random_range(0..count)).collect();
        let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let batch_x0 = gather(x0, &rows)?;
        let eps = standard_normal(batch_x0.shape(), &mut rng);
        let batch_cond = cond.map(|c| gather(c, &rows)).transpose()?;
        let outcome = (|| -> Res<f64> {
            let mut g = Graph::new();
            let loss = ddpm_loss_graph(&mut g, &model.params, &model.config, &batch_x0, batch_cond.as_ref(), &steps, &eps, &schedule)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(NumericsError::NonFinite(format!("loss {value}")).into());
            }
            let grads = g.backward(loss)?;
            let grads = g.param_grads(&grads);
            optimizer_step(&mut opt, opt_cfg, step, &mut model.params, grads)?;
            Ok(value)
        })();
        let value = match outcome {
            Ok(v) => v,
            Err(e) if is_non_finite(&e) => {
                let ck = snapshot(&model, &ema, step);
                return Err(abort(out_dir, stage, step, ck, &e)?);
            }
            Err(e) => return Err(e),
        };
        ema.update(&model.params)?;
        if step % 500 == 0 {
            log::info!("{tag} step {step}: loss {value:.6}");
        }
        curve.push(value);
        let done = step + 1;
        if let Some(dir) = out_dir {
            if run.checkpoint_every > 0 && done % run.checkpoint_every == 0 && done < opt_cfg.steps {
                save_checkpoint(&snapshot(&model, &ema, done), step_path(dir, stage, done))?;
            }
        }
    }

    let checkpoint = snapshot(&model, &ema, opt_cfg.steps);
    if let Some(dir) = out_dir {
        save_checkpoint(&checkpoint, dir.join(stage.file_name()))?;
    }
    Ok(DdpmRun { model, ema, curve, checkpoint })
}

/// Second stage: an unconditional denoiser over standardized encoded extrinsics.
pub fn train_extrinsic_ddpm(
    run: &RunConfig,
    ae_checkpoint: &Checkpoint,
    train: &[BodySample],
    out_dir: Option<&Path>,
) -> Res<DdpmRun> {
    run.validate()?;
    let (stats, e, _) = prepare_latents(ae_checkpoint, train)?;
    let config = run.diffusion.extrinsic_config(stats.joints);
    train_denoiser(run, Stage::Extrinsic, config, &e, None, stats, out_dir)
}

/// Third stage: intrinsics conditioned on the encoder's extrinsics. Refuses to start
/// unless `ext_checkpoint` is a finished extrinsic stage.
pub fn train_intrinsic_ddpm(
    run: &RunConfig,
    ae_checkpoint: &Checkpoint,
    ext_checkpoint: &Checkpoint,
    train: &[BodySample],
    out_dir: Option<&Path>,
) -> Res<DdpmRun> {
    run.validate()?;
    ext_checkpoint.require_kind(CheckpointKind::Extrinsic)?;
    let (stats, e, h) = prepare_latents(ae_checkpoint, train)?;
    if ext_checkpoint.latent_stats.as_ref() != Some(&stats) {
        return Err(PipelineError::Contract(
            "extrinsic checkpoint was trained on a different autoencoder's latents".into(),
        ));
    }
    let config = run.diffusion.intrinsic_config(stats.joints, stats.intrinsic_width);
    train_denoiser(run, Stage::Intrinsic, config, &h, Some(&e), stats, out_dir)
}
