//! `jade`: synthesize data, train the three stages, sample, edit, evaluate and serve.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use jade_core::autoencoder::AEModel;
use jade_core::geometry::{load_obj, save_obj, synth_subject, GeometryError, SynthConfig, TriangleMesh, RINGS_PER_BONE};
use jade_core::latent::{interpolate, Component, LatentError, LatentPair};
use jade_core::pipeline::{
    evaluate, load_checkpoint, pelvis_normalize_cloud, run_ablation, table4_grid, train_autoencoder,
    train_extrinsic_ddpm, train_intrinsic_ddpm, write_ablation_csv, DataSource, Dataset, Models, PipelineError,
    Profile, RunConfig, Stage,
};
use jade_service::ServiceState;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Usage(String),
}

type Res<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "jade", version, about = "Joint-aware latent autoencoder and cascaded diffusion for articulated bodies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Base configuration: `--profile` picks the defaults, `--config` overrides them.
#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// JSON file whose keys match the run configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to start from when the config file has no `profile` key.
    #[arg(long, value_enum, default_value = "desk")]
    profile: ProfileArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Extrinsic,
    Intrinsic,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    Extrinsics,
    Intrinsics,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Table4,
}

#[derive(clap::Args)]
struct CascadeArgs {
    #[arg(long)]
    ae: PathBuf,
    #[arg(long)]
    ext: PathBuf,
    #[arg(long = "int")]
    int: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic articulated-body dataset directory.
    SynthData {
        #[arg(long)]
        subjects: usize,
        #[arg(long)]
        poses: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        joints: usize,
        /// Vertices per ring; each body has `joints * 8 * ring_points` vertices.
        #[arg(long, default_value_t = 8)]
        ring_points: usize,
    },
    /// Train the autoencoder on the training split.
    TrainAe {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory; defaults to the configured data source.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one of the two denoisers on frozen autoencoder latents.
    TrainDdpm {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        ae: PathBuf,
        /// Extrinsic checkpoint required by the intrinsic stage; defaults to `OUT/extrinsic.ckpt`.
        #[arg(long)]
        ext: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full cascade and write OBJ files plus `latents.json`.
    Sample {
        #[command(flatten)]
        models: CascadeArgs,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        template: TemplateArg,
    },
    /// Encode an OBJ mesh to latents (posterior means, pelvis-normalized).
    Encode {
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode latents JSON to an OBJ mesh.
    Decode {
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        template: TemplateArg,
    },
    /// Blend two latents and decode the result.
    Interpolate {
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long, value_enum, default_value = "both")]
        which: WhichArg,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        template: TemplateArg,
    },
    /// Held-out reconstruction, sample diversity and self-intersection report.
    Eval {
        #[command(flatten)]
        models: CascadeArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every variant of an ablation grid and write a CSV of the results.
    Ablate {
        #[arg(long, value_enum)]
        grid: GridArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Training steps per variant, overriding the configuration.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Serve the HTTP inference API.
    Serve {
        #[command(flatten)]
        models: CascadeArgs,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
        host: IpAddr,
    },
}

#[derive(clap::Args)]
struct TemplateArg {
    /// OBJ whose faces are used for output meshes; defaults to the synthetic body topology.
    #[arg(long)]
    template: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Res<()> {
    match command {
        Command::SynthData { subjects, poses, seed, out, joints, ring_points } => {
            let data = Dataset::from_synth(&SynthConfig::new(subjects, poses, joints, ring_points, seed))?;
            data.save(&out)?;
            log::info!("wrote {} samples to {}", data.samples.len(), out.display());
        }
        Command::TrainAe { config, data, out } => {
            let (run, dataset) = prepare(&config, data, out)?;
            let (train, _) = dataset.split();
            let result = train_autoencoder(&run, &train.samples, Some(&run.output_dir))?;
            report_done(&run.output_dir, Stage::Autoencoder, result.curve.last().map(|b| b.total));
        }
        Command::TrainDdpm { stage, ae, ext, config, data, out } => {
            let (run, dataset) = prepare(&config, data, out)?;
            let (train, _) = dataset.split();
            let ae_ck = load_checkpoint(&ae)?;
            let out = Some(run.output_dir.as_path());
            let (stage, curve) = match stage {
                StageArg::Extrinsic => (Stage::Extrinsic, train_extrinsic_ddpm(&run, &ae_ck, &train.samples, out)?.curve),
                StageArg::Intrinsic => {
                    let ext = ext.unwrap_or_else(|| run.output_dir.join(Stage::Extrinsic.file_name()));
                    if !ext.exists() {
                        return Err(CliError::Usage(format!(
                            "the intrinsic stage needs a trained extrinsic checkpoint; {} does not exist",
                            ext.display()
                        )));
                    }
                    let ext_ck = load_checkpoint(&ext)?;
                    (Stage::Intrinsic, train_intrinsic_ddpm(&run, &ae_ck, &ext_ck, &train.samples, out)?.curve)
                }
            };
            report_done(&run.output_dir, stage, curve.last().copied());
        }
        Command::Sample { models, count, seed, out, template } => {
            let models = load_models(&models)?;
            let faces = faces_for(&models.ae, template.template.as_deref())?;
            let bodies = models.sample(count, seed)?;
            create_dir(&out)?;
            for (i, body) in bodies.iter().enumerate() {
                save_obj(&TriangleMesh::from_points(&body.points, &faces)?, out.join(format!("sample_{i:04}.obj")))?;
            }
            let latents: Vec<&LatentPair> = bodies.iter().map(|b| &b.latent).collect();
            write_json(&out.join("latents.json"), &latents)?;
            log::info!("wrote {} samples to {}", bodies.len(), out.display());
        }
        Command::Encode { ae, mesh, out } => {
            let model = load_checkpoint(&ae)?.to_autoencoder()?;
            let mesh = load_obj(&mesh)?;
            let points: Vec<[f32; 3]> = mesh.vertices.iter().map(|v| v.map(|c| c as f32)).collect();
            if points.len() != model.config.n_points {
                return Err(CliError::Usage(format!(
                    "mesh has {} vertices, the autoencoder expects {}",
                    points.len(),
                    model.config.n_points
                )));
            }
            let (moved, pelvis) = pelvis_normalize_cloud(&model, &points)?;
            log::info!("pelvis offset {pelvis:?}");
            let latent = model.encode_cloud(&moved).map_err(PipelineError::from)?;
            write_json(&out, &latent)?;
        }
        Command::Decode { ae, latents, out, template } => {
            let model = load_checkpoint(&ae)?.to_autoencoder()?;
            let latent: LatentPair = read_json(&latents)?;
            write_decoded(&model, &latent, &out, template.template.as_deref())?;
        }
        Command::Interpolate { ae, from, to, alpha, which, out, template } => {
            let model = load_checkpoint(&ae)?.to_autoencoder()?;
            let (a, b): (LatentPair, LatentPair) = (read_json(&from)?, read_json(&to)?);
            let which = match which {
                WhichArg::Extrinsics => Component::Extrinsics,
                WhichArg::Intrinsics => Component::Intrinsics,
                WhichArg::Both => Component::Both,
            };
            let mixed = interpolate(&a, &b, alpha, which)?;
            write_decoded(&model, &mixed, &out, template.template.as_deref())?;
        }
        Command::Eval { models, data, samples, seed, out } => {
            let models = load_models(&models)?;
            let (_, held) = Dataset::load(&data)?.split();
            let report = evaluate(&models, &held, samples, seed)?;
            write_json(&out, &report)?;
            log::info!("mpvpe {:.5} apd {:.5} si {:.3}%", report.mpvpe, report.apd, report.si_rate);
        }
        Command::Ablate { grid: GridArg::Table4, data, out, config, steps } => {
            let (mut run, dataset) = prepare(&config, Some(data), None)?;
            if let Some(steps) = steps {
                run.optimizer.steps = steps;
            }
            let results = run_ablation(&run, &dataset, &table4_grid(&run.ae))?;
            let csv = write_ablation_csv(&results)?;
            std::fs::write(&out, csv).map_err(|source| CliError::Io { path: out.clone(), source })?;
            log::info!("wrote {} variants to {}", results.len(), out.display());
        }
        Command::Serve { models, port, host } => {
            let state = ServiceState::loading();
            let addr = SocketAddr::new(host, port);
            let runtime = tokio::runtime::Runtime::new().map_err(|source| CliError::Io { path: PathBuf::new(), source })?;
            runtime.block_on(async {
                let loader = state.clone();
                let loading = tokio::task::spawn_blocking(move || -> Res<()> {
                    let models = load_models(&models)?;
                    loader.install(models).map_err(|_| CliError::Usage("models installed twice".into()))?;
                    log::info!("models loaded");
                    Ok(())
                });
                tokio::select! {
                    served = jade_service::serve(addr, state) => served.map_err(|source| CliError::Io { path: PathBuf::new(), source }),
                    loaded = loading => match loaded {
                        Ok(Ok(())) => std::future::pending().await,
                        Ok(Err(e)) => Err(e),
                        Err(e) => Err(CliError::Usage(e.to_string())),
                    },
                }
            })?;
        }
    }
    Ok(())
}

/// Resolves the run configuration and the dataset it trains on.
fn prepare(args: &ConfigArgs, data: Option<PathBuf>, out: Option<PathBuf>) -> Res<(RunConfig, Dataset)> {
    let profile = match args.profile {
        ProfileArg::Paper => Profile::Paper,
        ProfileArg::Desk => Profile::Desk,
    };
    let mut run = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.clone(), source })?;
            RunConfig::from_json_or(&text, profile)?
        }
        None => RunConfig::profile(profile),
    };
    if let Some(dir) = data {
        run.data = DataSource::Path(dir);
    }
    if let Some(out) = out {
        run.output_dir = out;
    }
    let dataset = match &run.data {
        DataSource::Path(dir) => Dataset::load(dir)?,
        DataSource::Synth(cfg) => Dataset::from_synth(cfg)?,
    };
    Ok((run, dataset))
}

fn report_done(dir: &Path, stage: Stage, last_loss: Option<f64>) {
    let loss = last_loss.map_or_else(|| "n/a".to_string(), |l| format!("{l:.6}"));
    log::info!("wrote {} (final loss {loss})", dir.join(stage.file_name()).display());
}

fn load_models(args: &CascadeArgs) -> Res<Models> {
    Ok(Models::load(&args.ae, &args.ext, &args.int)?)
}

/// Faces from `template`, or else the synthetic capsule topology implied by the autoencoder's sizes.
fn faces_for(model: &AEModel, template: Option<&Path>) -> Res<Vec<[usize; 3]>> {
    let cfg = &model.config;
    if let Some(path) = template {
        let mesh = load_obj(path)?;
        if mesh.vertices.len() != cfg.n_points {
            return Err(CliError::Usage(format!(
                "template has {} vertices, the autoencoder decodes {}",
                mesh.vertices.len(),
                cfg.n_points
            )));
        }
        return Ok(mesh.faces);
    }
    let per_joint = RINGS_PER_BONE * cfg.joints;
    if cfg.n_points % per_joint != 0 {
        return Err(CliError::Usage("vertex count does not match the synthetic topology; pass --template".into()));
    }
    Ok(synth_subject(0, cfg.joints, cfg.n_points / per_joint)?.faces)
}

fn write_decoded(model: &AEModel, latent: &LatentPair, out: &Path, template: Option<&Path>) -> Res<()> {
    let faces = faces_for(model, template)?;
    let points = model.decode_latent(latent).map_err(PipelineError::from)?;
    save_obj(&TriangleMesh::from_points(&points, &faces)?, out)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Res<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Res<T> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.to_path_buf(), source })
}

fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Res<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
    std::fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}
