//! Checkpoint container.
//!
//! Layout: magic `JADE`, `u32` format version, `u64` metadata length, UTF-8 JSON metadata,
//! then the parameter payload as little-endian f32 in manifest order, then (when present)
//! the EMA payload with the same manifest. Manifest offsets count f32 elements.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PipelineError, RunConfig};
use crate::autoencoder::{AEConfig, AEModel};
use crate::diffusion::{init_denoiser, Denoiser, DenoiserConfig, DenoiserKind, NoiseSchedule};
use crate::latent::LatentStats;
use crate::numerics::{ParameterStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"JADE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Autoencoder,
    Extrinsic,
    Intrinsic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelConfig {
    Autoencoder(AEConfig),
    Denoiser(DenoiserConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    /// Snapshot of the run that produced the weights.
    pub run: Option<RunConfig>,
    pub step: u64,
    pub params: ParameterStore<f32>,
    pub ema: Option<ParameterStore<f32>>,
    pub latent_stats: Option<LatentStats>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    kind: CheckpointKind,
    model: ModelConfig,
    run: Option<RunConfig>,
    step: u64,
    manifest: Vec<ManifestEntry>,
    has_ema: bool,
    latent_stats: Option<LatentStats>,
}

fn format_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Format(msg.into())
}

impl Checkpoint {
    pub fn autoencoder(model: &AEModel, run: Option<RunConfig>, step: u64, stats: Option<LatentStats>) -> Self {
        Self {
            kind: CheckpointKind::Autoencoder,
            model: ModelConfig::Autoencoder(model.config.clone()),
            run,
            step,
            params: model.params.clone(),
            ema: None,
            latent_stats: stats,
        }
    }

    pub fn denoiser(
        model: &Denoiser,
        ema: Option<ParameterStore<f32>>,
        run: Option<RunConfig>,
        step: u64,
        stats: Option<LatentStats>,
    ) -> Self {
        let kind = match model.config.kind {
            DenoiserKind::Extrinsic => CheckpointKind::Extrinsic,
            DenoiserKind::Intrinsic => CheckpointKind::Intrinsic,
        };
        Self {
            kind,
            model: ModelConfig::Denoiser(model.config.clone()),
            run,
            step,
            params: model.params.clone(),
            ema,
            latent_stats: stats,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, PipelineError> {
        if let Some(ema) = &self.ema {
            if let Some(m) = ema.layout_mismatch(&self.params) {
                return Err(PipelineError::Layout(format!("EMA shadow: {m}")));
            }
        }
        let mut offset = 0;
        let manifest = self
            .params
            .iter()
            .map(|(name, t)| {
                let entry = ManifestEntry { name: name.to_string(), shape: t.shape().to_vec(), offset };
                offset += t.len();
                entry
            })
            .collect();
        let meta = Metadata {
            kind: self.kind,
            model: self.model.clone(),
            run: self.run.clone(),
            step: self.step,
            manifest,
            has_ema: self.ema.is_some(),
            latent_stats: self.latent_stats.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        let payloads = 1 + usize::from(self.ema.is_some());
        let mut out = Vec::with_capacity(16 + json.len() + 4 * offset * payloads);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for store in std::iter::once(&self.params).chain(self.ema.as_ref()) {
            for (_, t) in store.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        if bytes.len() < 16 {
            return Err(format_err("file shorter than the header"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let meta_end = usize::try_from(meta_len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| format_err("metadata length exceeds file size"))?;
        let meta: Metadata =
            serde_json::from_slice(&bytes[16..meta_end]).map_err(|e| format_err(format!("metadata: {e}")))?;

        let mut expected_offset = 0usize;
        for entry in &meta.manifest {
            if entry.offset != expected_offset {
                return Err(format_err(format!(
                    "manifest offset of `{}` is {}, expected {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            let len = entry.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            expected_offset = len
                .and_then(|l| expected_offset.checked_add(l))
                .ok_or_else(|| format_err(format!("shape of `{}` overflows", entry.name)))?;
        }
        let payload = &bytes[meta_end..];
        let payloads = 1 + usize::from(meta.has_ema);
        let want = expected_offset.checked_mul(4 * payloads).ok_or_else(|| format_err("payload size overflows"))?;
        if payload.len() != want {
            return Err(format_err(format!("payload holds {} bytes, manifest needs {want}", payload.len())));
        }

        let read_store = |base: usize| -> Result<ParameterStore<f32>, PipelineError> {
            let mut store = ParameterStore::new();
            for entry in &meta.manifest {
                let n: usize = entry.shape.iter().product();
                let start = 4 * (base + entry.offset);
                let data = payload[start..start + 4 * n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                store
                    .register(entry.name.clone(), Tensor::new(&entry.shape, data)?)
                    .map_err(|e| format_err(format!("manifest: {e}")))?;
            }
            Ok(store)
        };
        let params = read_store(0)?;
        if params.iter().map(|(n, _)| n).ne(meta.manifest.iter().map(|e| e.name.as_str())) {
            return Err(format_err("manifest names are not in canonical order"));
        }
        let ema = if meta.has_ema { Some(read_store(expected_offset)?) } else { None };
        Ok(Self {
            kind: meta.kind,
            model: meta.model,
            run: meta.run,
            step: meta.step,
            params,
            ema,
            latent_stats: meta.latent_stats,
        })
    }

    pub fn ae_config(&self) -> Result<&AEConfig, PipelineError> {
        match &self.model {
            ModelConfig::Autoencoder(c) if self.kind == CheckpointKind::Autoencoder => Ok(c),
            _ => Err(PipelineError::Contract(format!("expected an autoencoder checkpoint, got {:?}", self.kind))),
        }
    }

    pub fn denoiser_config(&self) -> Result<&DenoiserConfig, PipelineError> {
        match &self.model {
            ModelConfig::Denoiser(c) if self.kind != CheckpointKind::Autoencoder => Ok(c),
            _ => Err(PipelineError::Contract(format!("expected a denoiser checkpoint, got {:?}", self.kind))),
        }
    }

    pub fn require_kind(&self, kind: CheckpointKind) -> Result<(), PipelineError> {
        if self.kind != kind {
            return Err(PipelineError::Contract(format!("expected a {kind:?} checkpoint, got {:?}", self.kind)));
        }
        Ok(())
    }

    pub fn stats(&self) -> Result<&LatentStats, PipelineError> {
        self.latent_stats
            .as_ref()
            .ok_or_else(|| PipelineError::Contract(format!("{:?} checkpoint carries no latent statistics", self.kind)))
    }

    pub fn to_autoencoder(&self) -> Result<AEModel, PipelineError> {
        let cfg = self.ae_config()?.clone();
        self.as_autoencoder(&cfg)
    }

    /// Interprets the weights under `config`; a layout difference names the first offending path.
    pub fn as_autoencoder(&self, config: &AEConfig) -> Result<AEModel, PipelineError> {
        let expected = AEModel::<f32>::new(config.clone(), 0)?;
        layout_check(&expected.params, &self.params)?;
        Ok(AEModel::from_params(config.clone(), self.params.clone())?)
    }

    pub fn to_denoiser(&self) -> Result<Denoiser, PipelineError> {
        let cfg = self.denoiser_config()?.clone();
        self.as_denoiser(&cfg)
    }

    /// Interprets the weights under `config`; a layout difference names the first offending path.
    pub fn as_denoiser(&self, config: &DenoiserConfig) -> Result<Denoiser, PipelineError> {
        let expected: ParameterStore<f32> =
            init_denoiser(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        layout_check(&expected, &self.params)?;
        Ok(Denoiser::from_params(config.clone(), self.params.clone())?)
    }

    /// Denoiser used for sampling: the EMA shadow when present and the run asks for it.
    pub fn sampling_denoiser(&self) -> Result<Denoiser, PipelineError> {
        let model = self.to_denoiser()?;
        let use_ema = self.run.as_ref().is_none_or(|r| r.diffusion.sample_with_ema);
        match (&self.ema, use_ema) {
            (Some(ema), true) => Ok(model.with_params(ema.clone())?),
            _ => Ok(model),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, PipelineError> {
        let run = self
            .run
            .as_ref()
            .ok_or_else(|| PipelineError::Contract("checkpoint carries no run config for its noise schedule".into()))?;
        run.diffusion.schedule()
    }
}

fn layout_check(expected: &ParameterStore<f32>, actual: &ParameterStore<f32>) -> Result<(), PipelineError> {
    match actual.layout_mismatch(expected) {
        Some(m) => Err(PipelineError::Layout(m)),
        None => Ok(()),
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<(), PipelineError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, PipelineError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
