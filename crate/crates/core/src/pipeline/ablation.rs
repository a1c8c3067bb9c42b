use serde::Serialize;

use super::{encode_latents, reconstruction_mpvpe, train_autoencoder, Dataset, PipelineError, RunConfig};
use crate::autoencoder::{AEConfig, ConditionMode};

/// Intrinsic widths of the size sweep.
const D_H_SWEEP: [usize; 6] = [16, 32, 64, 128, 256, 512];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub name: String,
    pub config: AEConfig,
}

/// Size sweep with concatenation, the two other conditioning modes, and the two loss-term drops.
/// The last three groups keep the base `D_h`.
pub fn table4_grid(base: &AEConfig) -> Vec<AblationVariant> {
    let mut out = Vec::new();
    let base = AEConfig { condition_mode: ConditionMode::Concat, ..base.clone() };
    for d_h in D_H_SWEEP {
        let name = if d_h == base.d_h { "full".to_string() } else { format!("d_h_{d_h}") };
        out.push(AblationVariant { name, config: AEConfig { d_h, ..base.clone() } });
    }
    if !D_H_SWEEP.contains(&base.d_h) {
        out.insert(0, AblationVariant { name: "full".into(), config: base.clone() });
    }
    for mode in [ConditionMode::Add, ConditionMode::CrossAttention] {
        out.push(AblationVariant { name: mode.name().to_string(), config: AEConfig { condition_mode: mode, ..base.clone() } });
    }
    out.push(AblationVariant { name: "no_joint_loss".into(), config: AEConfig { lambda_j: 0.0, ..base.clone() } });
    out.push(AblationVariant { name: "no_cross_loss".into(), config: AEConfig { lambda_c: 0.0, ..base } });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub variant: String,
    pub d_h: usize,
    pub condition_mode: String,
    pub lambda_j: f64,
    pub lambda_c: f64,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub mpvpe: f64,
    /// Whether the trailing-window mean of the total loss ended below its starting value.
    pub loss_decreased: bool,
}

/// `mean(curve[n-w..]) < mean(curve[..w])` with `w = min(window, n/2)`.
pub fn trailing_mean_decreased(curve: &[f64], window: usize) -> bool {
    let w = window.min(curve.len() / 2);
    if w == 0 {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    mean(&curve[curve.len() - w..]) < mean(&curve[..w])
}

fn window_for(steps: usize) -> usize {
    (steps / 5).clamp(1, 100)
}

/// Trains every variant on the training split for `run.optimizer.steps` steps and
/// measures reconstruction MPVPE on the held-out split.
pub fn run_ablation(run: &RunConfig, data: &Dataset, variants: &[AblationVariant]) -> Result<Vec<AblationResult>, PipelineError> {
    let (train, held) = data.split();
    let eval_set = if held.samples.is_empty() { &train } else { &held };
    let mut results = Vec::with_capacity(variants.len());
    for v in variants {
        log::info!("ablation variant {}", v.name);
        let cfg = RunConfig { ae: v.config.clone(), ..run.clone() };
        let trained = train_autoencoder(&cfg, &train.samples, None)?;
        let totals: Vec<f64> = trained.curve.iter().map(|b| b.total).collect();
        let w = window_for(totals.len());
        let model = &trained.model;
        let mpvpe = reconstruction_mpvpe(&eval_set.samples, |chunk| {
            Ok(model.decode_latents(&encode_latents(model, chunk)?)?)
        })?;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        results.push(AblationResult {
            variant: v.name.clone(),
            d_h: v.config.d_h,
            condition_mode: v.config.condition_mode.name().to_string(),
            lambda_j: v.config.lambda_j,
            lambda_c: v.config.lambda_c,
            steps: totals.len(),
            initial_loss: mean(&totals[..w.min(totals.len())]),
            final_loss: mean(&totals[totals.len().saturating_sub(w)..]),
            mpvpe,
            loss_decreased: trailing_mean_decreased(&totals, w),
        });
    }
    Ok(results)
}

pub fn write_ablation_csv(results: &[AblationResult]) -> Result<String, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
