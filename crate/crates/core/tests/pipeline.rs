use std::collections::BTreeSet;
use std::path::PathBuf;

use jade_core::autoencoder::{loss_total, AEConfig, AEModel, ConditionMode};
use jade_core::diffusion::{Denoiser, DenoiserConfig, EmaState};
use jade_core::geometry::SynthConfig;
use jade_core::metrics::{EvalReport, LatentMoments};
use jade_core::numerics::{AdamW, ParameterStore};
use jade_core::pipeline::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_ae() -> AEConfig {
    AEConfig {
        n_points: 64,
        joints: 2,
        d_z: 8,
        d_h: 4,
        d_g: 8,
        point_hidden: vec![8],
        split_hidden: 16,
        l_blocks: 1,
        l_dec_blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        condition_mode: ConditionMode::Concat,
        lambda_j: 1.0,
        lambda_c: 1.0,
        lambda_kl: 1e-4,
    }
}

fn small_synth(subjects: usize, poses: usize) -> SynthConfig {
    SynthConfig::new(subjects, poses, 2, 4, 3)
}

fn small_run(steps: usize) -> RunConfig {
    let mut run = RunConfig::desk();
    run.ae = small_ae();
    run.data = DataSource::Synth(small_synth(3, 5));
    run.optimizer.steps = steps;
    run.optimizer.batch_size = 4;
    run.checkpoint_every = 2;
    let size = DenoiserSize { width: 8, blocks: 1, heads: 2, mlp_ratio: 2 };
    run.diffusion.extrinsic = size;
    run.diffusion.intrinsic = size;
    run.diffusion.steps = 20;
    run.diffusion.optimizer.steps = steps;
    run.diffusion.optimizer.batch_size = 8;
    run
}

fn small_data() -> Dataset {
    Dataset::from_synth(&small_synth(3, 5)).unwrap()
}

#[test]
fn pairs_share_subject_and_differ_in_pose() {
    let data = small_data();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs = pair_sampler(&data, 10_000, &mut rng).unwrap();
    assert_eq!(pairs.len(), 10_000);
    for (a, b) in pairs {
        assert_eq!(a.subject_id, b.subject_id);
        assert_ne!(a.pose_id, b.pose_id);
    }
}

#[test]
fn two_by_two_dataset_has_two_unordered_pairs() {
    let data = Dataset::from_synth(&small_synth(2, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seen: BTreeSet<(u32, u32, u32)> = pair_sampler(&data, 2000, &mut rng)
        .unwrap()
        .into_iter()
        .map(|(a, b)| (a.subject_id, a.pose_id.min(b.pose_id), a.pose_id.max(b.pose_id)))
        .collect();
    assert_eq!(seen, BTreeSet::from([(0, 0, 1), (1, 0, 1)]));
}

#[test]
fn pair_sampling_is_uniform_over_subjects_then_pairs() {
    // subject 0 has 2 poses, subject 1 has 4: each subject gets half the draws,
    // and each of subject 1's 12 ordered pairs gets 1/24.
    let mut data = Dataset::from_synth(&small_synth(2, 4)).unwrap();
    data.samples.retain(|s| s.subject_id == 1 || s.pose_id < 2);
    let sampler = PairSampler::new(&data.samples).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 48_000;
    let mut counts = std::collections::BTreeMap::new();
    for (a, b) in sampler.sample(draws, &mut rng) {
        *counts.entry((data.samples[a].subject_id, data.samples[a].pose_id, data.samples[b].pose_id)).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 2 + 12);
    for (&(s, _, _), &c) in &counts {
        let p = if s == 0 { 0.25 } else { 1.0 / 24.0 };
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((c as f64 - draws as f64 * p).abs() < 4.0 * sd, "{s}: {c}");
    }
}

#[test]
fn pair_sampling_is_deterministic() {
    let data = small_data();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PairSampler::new(&data.samples).unwrap().sample(100, &mut rng)
    };
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5), draw(6));
}

#[test]
fn single_pose_subject_is_rejected_at_load() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = small_data();
    data.save(dir.path()).unwrap();
    assert!(Dataset::load(dir.path()).is_ok());
    data.samples.retain(|s| !(s.subject_id == 1 && s.pose_id > 0));
    jade_core::geometry::pack_dataset(&data.samples, dir.path().join(DATA_FILE)).unwrap();
    let err = Dataset::load(dir.path()).unwrap_err();
    assert!(matches!(err, PipelineError::Data(ref m) if m.contains("subject 1")), "{err}");
}

#[test]
fn dataset_round_trips_through_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data();
    data.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.samples, data.samples);
    assert_eq!(back.meta, data.meta);
    assert_eq!(back.template.faces, data.template.faces);
    assert!((back.body_height() - data.body_height()).abs() < 1e-9);
}

#[test]
fn split_holds_out_last_tenth_of_poses() {
    let data = Dataset::from_synth(&small_synth(3, 12)).unwrap();
    let (train, held) = data.split();
    // ceil(12 / 10) = 2 held-out poses per subject
    assert_eq!(held.samples.len(), 6);
    assert_eq!(train.samples.len(), 30);
    assert!(held.samples.iter().all(|s| s.pose_id >= 10));
    assert!(train.samples.iter().all(|s| s.pose_id < 10));
    // two poses per subject keep both for training
    let (train, held) = Dataset::from_synth(&small_synth(2, 2)).unwrap().split();
    assert_eq!((train.samples.len(), held.samples.len()), (4, 0));
}

#[test]
fn config_defaults_follow_documented_values() {
    let p = RunConfig::paper();
    assert_eq!(p.optimizer.batch_size, 256);
    assert_eq!(p.optimizer.learning_rate, 1e-3);
    assert_eq!(p.optimizer.weight_decay, 0.01);
    assert_eq!((p.diffusion.steps, p.diffusion.beta_1, p.diffusion.beta_t), (1000, 1e-4, 0.02));
    assert_eq!(p.ema_ratio, 0.9999);
    assert_eq!((p.ae.joints, p.ae.d_h), (24, 128));
    assert_eq!(RunConfig::default(), p);
    let d = RunConfig::desk();
    assert_eq!((d.ae.joints, d.ae.n_points, d.ae.d_h, d.optimizer.batch_size), (8, 512, 32, 16));
    assert_eq!(d.optimizer.learning_rate, 1e-3);
    assert!(p.validate().is_ok() && d.validate().is_ok());
}

#[test]
fn config_json_overrides_profile_and_rejects_unknown_keys() {
    let cfg = RunConfig::from_json(r#"{"profile": "desk", "seed": 9, "optimizer": {"steps": 7}}"#).unwrap();
    let mut want = RunConfig::desk();
    want.seed = 9;
    want.optimizer.steps = 7;
    assert_eq!(cfg, want);
    assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::paper());
    assert_eq!(RunConfig::from_json(&RunConfig::desk().to_json()).unwrap(), RunConfig::desk());
    for bad in [
        r#"{"sed": 1}"#,
        r#"{"optimizer": {"learning_rat": 0.1}}"#,
        r#"{"ae": {"condition_mode": "concat", "extra": 1}}"#,
        r#"{"profile": "huge"}"#,
        r#"{"optimizer": {"batch_size": 0}}"#,
    ] {
        assert!(RunConfig::from_json(bad).is_err(), "{bad}");
    }
    let path = RunConfig::from_json(r#"{"data": {"path": "some/dir"}}"#).unwrap();
    assert_eq!(path.data, DataSource::Path("some/dir".into()));
}

#[test]
fn full_config_round_trips() {
    let mut d = RunConfig::desk();
    d.diffusion.joint_condition = jade_core::diffusion::JointCondition::Pooled;
    let json = serde_json::to_string(&d).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&json).unwrap();
    doc["profile"] = "desk".into();
    assert_eq!(RunConfig::from_json(&doc.to_string()).unwrap(), d);
}

#[test]
fn cosine_learning_rate_endpoints() {
    let o = RunConfig::desk().optimizer;
    assert_eq!(o.learning_rate_at(0), o.learning_rate);
    assert!((o.learning_rate_at(o.steps) - o.learning_rate * o.final_lr_ratio).abs() < 1e-15);
    assert!(o.learning_rate_at(o.steps / 2) < o.learning_rate);
}

fn stats_for(model: &AEModel) -> jade_core::latent::LatentStats {
    let data = small_data();
    jade_core::latent::LatentStats::compute(&encode_latents(model, &data.samples).unwrap()).unwrap()
}

fn sample_checkpoint() -> Checkpoint {
    let model = AEModel::<f32>::new(small_ae(), 4).unwrap();
    let stats = stats_for(&model);
    Checkpoint::autoencoder(&model, Some(small_run(3)), 17, Some(stats))
}

fn denoiser_checkpoint() -> Checkpoint {
    let cfg = DenoiserConfig::intrinsic(2, 4, 8, 1, 2);
    let model = Denoiser::<f32>::new(cfg, 1).unwrap();
    let mut ema = EmaState::new(&model.params, 0.5).unwrap();
    let mut moved = model.params.clone();
    moved.scale_all(0.5);
    ema.update(&moved).unwrap();
    Checkpoint::denoiser(&model, Some(ema.weights()), Some(small_run(3)), 3, None)
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    for ck in [sample_checkpoint(), denoiser_checkpoint()] {
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/ae.ckpt");
    save_checkpoint(&sample_checkpoint(), &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    save_checkpoint(&load_checkpoint(&path).unwrap(), &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

fn meta_bounds(bytes: &[u8]) -> (usize, usize) {
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    (16, 16 + len)
}

fn rewrite_meta(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let (a, b) = meta_bounds(bytes);
    let mut meta: serde_json::Value = serde_json::from_slice(&bytes[a..b]).unwrap();
    edit(&mut meta);
    let json = serde_json::to_vec(&meta).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[b..]);
    out
}

#[test]
fn tampered_checkpoints_are_format_errors() {
    let bytes = sample_checkpoint().to_bytes().unwrap();
    let format = |b: &[u8]| matches!(Checkpoint::from_bytes(b), Err(PipelineError::Format(_)));

    let shifted = rewrite_meta(&bytes, |m| {
        let off = m["manifest"][1]["offset"].as_u64().unwrap();
        m["manifest"][1]["offset"] = (off + 1).into();
    });
    assert!(format(&shifted));
    let reshaped = rewrite_meta(&bytes, |m| m["manifest"][0]["shape"] = serde_json::json!([1_000_000]));
    assert!(format(&reshaped));
    let ema_claimed = rewrite_meta(&bytes, |m| m["has_ema"] = true.into());
    assert!(format(&ema_claimed));

    assert!(format(&bytes[..bytes.len() - 4]));
    let mut longer = bytes.clone();
    longer.extend_from_slice(&[0; 4]);
    assert!(format(&longer));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(format(&magic));
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(format(&version));
    let mut meta_len = bytes.clone();
    meta_len[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(format(&meta_len));
    assert!(format(&bytes[..10]));
}

#[test]
fn autoencoder_checkpoint_as_denoiser_names_first_mismatch() {
    let ck = sample_checkpoint();
    let cfg = DenoiserConfig::extrinsic(2, 8, 1, 2);
    let err = ck.as_denoiser(&cfg).unwrap_err();
    let expected: ParameterStore<f32> = Denoiser::<f32>::new(cfg, 0).unwrap().params;
    let first_actual = ck.params.names().next().unwrap().to_string();
    let first_expected = expected.names().next().unwrap().to_string();
    let first = first_actual.min(first_expected);
    match err {
        PipelineError::Layout(m) => assert!(m.contains(&format!("`{first}`")), "{m}"),
        other => panic!("{other}"),
    }
    assert!(matches!(ck.to_denoiser(), Err(PipelineError::Contract(_))));
    assert!(matches!(denoiser_checkpoint().to_autoencoder(), Err(PipelineError::Contract(_))));
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_ae.ckpt")
}

fn golden_checkpoint() -> Checkpoint {
    let model = AEModel::<f32>::new(small_ae(), 11).unwrap();
    let stats = stats_for(&model);
    Checkpoint::autoencoder(&model, None, 5, Some(stats))
}

#[test]
#[ignore = "rewrites the committed golden checkpoint"]
fn regenerate_golden_checkpoint() {
    save_checkpoint(&golden_checkpoint(), golden_path()).unwrap();
}

#[test]
fn golden_checkpoint_loads() {
    let bytes = std::fs::read(golden_path()).unwrap();
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.kind, CheckpointKind::Autoencoder);
    assert_eq!(ck.step, 5);
    assert_eq!(ck.ae_config().unwrap(), &small_ae());
    assert!(ck.latent_stats.is_some());
    let model = ck.to_autoencoder().unwrap();
    assert_eq!(ck.to_bytes().unwrap(), bytes);
    let x = small_data().samples[0].vertices.clone();
    let out = model.decode_latent(&model.encode_cloud(&x).unwrap()).unwrap();
    assert!(out.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn training_is_deterministic_and_checkpointed() {
    let run = small_run(5);
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let a = train_autoencoder(&run, &data.samples, Some(dir.path())).unwrap();
    let b = train_autoencoder(&run, &data.samples, None).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.curve.len(), 5);
    for f in ["ae_step0.ckpt", "ae_step2.ckpt", "ae_step4.ckpt", "ae.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let last = load_checkpoint(dir.path().join("ae.ckpt")).unwrap();
    assert_eq!(last.step, 5);
    assert_eq!(last.run.as_ref(), Some(&run));
    let stats = last.stats().unwrap();
    let fresh = jade_core::latent::LatentStats::compute(&encode_latents(&a.model, &data.samples).unwrap()).unwrap();
    assert_eq!(stats, &fresh);
    assert!(load_checkpoint(dir.path().join("ae_step2.ckpt")).unwrap().latent_stats.is_none());
}

#[test]
fn first_loss_matches_initial_checkpoint_bitwise() {
    let run = small_run(2);
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let trained = train_autoencoder(&run, &data.samples, Some(dir.path())).unwrap();
    let init = load_checkpoint(dir.path().join("ae_step0.ckpt")).unwrap().to_autoencoder().unwrap();
    let sampler = PairSampler::new(&data.samples).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, "ae-train"));
    let (batch, eps) = ae_batch(&run, &data.samples, &sampler, &mut rng).unwrap();
    let again = loss_total(&init, &batch, Some(&eps)).unwrap();
    assert_eq!(again.total.to_bits(), trained.curve[0].total.to_bits());
    assert_eq!(again, trained.curve[0]);
}

#[test]
fn loss_trends_down_over_first_200_steps() {
    let run = small_run(200);
    let data = small_data();
    let curve: Vec<f64> = train_autoencoder(&run, &data.samples, None).unwrap().curve.iter().map(|b| b.total).collect();
    let means: Vec<f64> = curve.chunks(50).map(|c| c.iter().sum::<f64>() / 50.0).collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
    assert!(curve.iter().all(|v| v.is_finite() && *v >= 0.0));
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let run = small_run(3);
    let mut data = small_data();
    for s in &mut data.samples {
        s.vertices[0][0] = f32::NAN;
    }
    let dir = tempfile::tempdir().unwrap();
    match train_autoencoder(&run, &data.samples, Some(dir.path())) {
        Err(PipelineError::NonFinite { step: 0, snapshot: Some(p) }) => {
            assert_eq!(load_checkpoint(&p).unwrap().step, 0);
            assert!(p.with_extension("json").exists());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn data_size_mismatch_is_a_config_error() {
    let mut run = small_run(1);
    run.ae.n_points = 32;
    run.ae.point_hidden = vec![8];
    assert!(matches!(train_autoencoder(&run, &small_data().samples, None), Err(PipelineError::Config(_))));
}

#[test]
fn stages_run_in_order() {
    let run = small_run(3);
    let data = small_data();
    let ae = train_autoencoder(&run, &data.samples, None).unwrap();
    let mut no_stats = ae.checkpoint.clone();
    no_stats.latent_stats = None;
    assert!(matches!(train_extrinsic_ddpm(&run, &no_stats, &data.samples, None), Err(PipelineError::Contract(_))));
    // the intrinsic stage needs a finished extrinsic checkpoint
    let err = train_intrinsic_ddpm(&run, &ae.checkpoint, &ae.checkpoint, &data.samples, None).unwrap_err();
    assert!(matches!(err, PipelineError::Contract(_)), "{err}");
    let ext = train_extrinsic_ddpm(&run, &ae.checkpoint, &data.samples, None).unwrap();
    assert!(matches!(train_extrinsic_ddpm(&run, &ext.checkpoint, &data.samples, None), Err(PipelineError::Contract(_))));
    let int = train_intrinsic_ddpm(&run, &ae.checkpoint, &ext.checkpoint, &data.samples, None).unwrap();
    assert_eq!(int.checkpoint.kind, CheckpointKind::Intrinsic);
    assert_eq!(int.checkpoint.latent_stats.as_ref(), ae.checkpoint.latent_stats.as_ref());
    // an extrinsic stage trained on another autoencoder is refused
    let other = train_autoencoder(&RunConfig { seed: 99, ..run.clone() }, &data.samples, None).unwrap();
    assert!(train_intrinsic_ddpm(&run, &other.checkpoint, &ext.checkpoint, &data.samples, None).is_err());
    let models = Models::from_checkpoints(&ae.checkpoint, &ext.checkpoint, &int.checkpoint).unwrap();
    assert_eq!(models.schedule.steps(), 20);
    assert!(Models::from_checkpoints(&ae.checkpoint, &int.checkpoint, &ext.checkpoint).is_err());
}

#[test]
fn denoiser_training_is_deterministic_and_decreases() {
    let mut run = small_run(2000);
    run.diffusion.steps = 100;
    run.checkpoint_every = 0;
    let data = small_data();
    let ae = train_autoencoder(&small_run(3), &data.samples, None).unwrap();
    let a = train_extrinsic_ddpm(&run, &ae.checkpoint, &data.samples, None).unwrap();
    let means: Vec<f64> = a.curve.chunks(100).map(|c| c.iter().sum::<f64>() / 100.0).collect();
    assert!(means.last().unwrap() < means.first().unwrap(), "{means:?}");
    let mut short = run.clone();
    short.diffusion.optimizer.steps = 50;
    let b = train_extrinsic_ddpm(&short, &ae.checkpoint, &data.samples, None).unwrap();
    let c = train_extrinsic_ddpm(&short, &ae.checkpoint, &data.samples, None).unwrap();
    assert_eq!(b.curve, c.curve);
    assert_eq!(b.model.params, c.model.params);
    assert_eq!(b.checkpoint.to_bytes().unwrap(), c.checkpoint.to_bytes().unwrap());
}

#[test]
fn ema_converges_to_live_weights_with_zero_learning_rate() {
    let run = small_run(30);
    let data = small_data();
    let ae = train_autoencoder(&small_run(3), &data.samples, None).unwrap();
    let r = train_extrinsic_ddpm(&RunConfig { ema_ratio: 0.9, ..run }, &ae.checkpoint, &data.samples, None).unwrap();
    let live: ParameterStore<f64> = r.model.params.cast();
    let gap = |ema: &EmaState| {
        ema.shadow.iter().zip(live.iter()).flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max)
    };
    let mut ema = r.ema.clone();
    let start = gap(&ema);
    assert!(start > 1e-6);
    let mut params = r.model.params.clone();
    let mut opt = AdamW::new(&params, 0.0, 0.01);
    let grads = params.clone();
    for k in 1..=200 {
        opt.step(&mut params, &grads).unwrap();
        ema.update(&params).unwrap();
        assert_eq!(params, r.model.params);
        let bound = start * 0.9f64.powi(k) * (1.0 + 1e-6) + 1e-12;
        assert!(gap(&ema) <= bound, "step {k}");
    }
    assert!(gap(&ema) < 1e-8);
}

#[test]
fn identity_reconstruction_has_zero_mpvpe() {
    let data = small_data();
    let m = reconstruction_mpvpe(&data.samples, |chunk| Ok(chunk.iter().map(|s| s.vertices.clone()).collect())).unwrap();
    assert_eq!(m, 0.0);
    let shifted = reconstruction_mpvpe(&data.samples, |chunk| {
        Ok(chunk.iter().map(|s| s.vertices.iter().map(|v| [v[0] + 0.5, v[1], v[2]]).collect()).collect())
    })
    .unwrap();
    assert!((shifted - 0.5).abs() < 1e-6);
}

#[test]
fn report_json_round_trips() {
    let report = EvalReport {
        mpvpe: 0.0123,
        apd: 0.4,
        si_rate: 200.0 / 3.0,
        latent_moments: LatentMoments { mean: vec![0.1, -0.2], var: vec![1.5, 0.25] },
        sample_count: 500,
    };
    let json = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), report);
}

#[test]
fn evaluation_runs_end_to_end() {
    let run = small_run(4);
    let data = Dataset::from_synth(&small_synth(3, 12)).unwrap();
    let (train, held) = data.split();
    let ae = train_autoencoder(&run, &train.samples, None).unwrap();
    let ext = train_extrinsic_ddpm(&run, &ae.checkpoint, &train.samples, None).unwrap();
    let int = train_intrinsic_ddpm(&run, &ae.checkpoint, &ext.checkpoint, &train.samples, None).unwrap();
    let models = Models::from_checkpoints(&ae.checkpoint, &ext.checkpoint, &int.checkpoint).unwrap();
    let report = evaluate(&models, &held, 6, 1).unwrap();
    assert!(report.is_valid(), "{report:?}");
    assert_eq!(report.sample_count, 6);
    assert_eq!(report.latent_moments.mean.len(), 4);
    assert_eq!(evaluate(&models, &held, 6, 1).unwrap(), report);
    assert_eq!(models.sample(3, 8).unwrap(), models.sample(3, 8).unwrap());
}

#[test]
fn bone_lengths_follow_parents() {
    let joints = [[0.0, 0.0, 0.0], [0.0, 0.0, 2.0], [3.0, 0.0, 2.0]];
    assert_eq!(bone_lengths(&joints, &[-1, 0, 1]), vec![2.0, 3.0]);
    let sets = vec![joints.to_vec(), vec![[0.0; 3], [0.0, 0.0, 4.0], [0.0, 0.0, 5.0]]];
    assert_eq!(mean_bone_lengths(&sets, &[-1, 0, 1]), vec![3.0, 2.0]);
}

#[test]
fn table4_grid_covers_every_axis() {
    let grid = table4_grid(&AEConfig::desk());
    let names: Vec<&str> = grid.iter().map(|v| v.name.as_str()).collect();
    assert_eq!(
        names,
        ["d_h_16", "full", "d_h_64", "d_h_128", "d_h_256", "d_h_512", "add", "cross_attention", "no_joint_loss", "no_cross_loss"]
    );
    let full = &grid[1].config;
    assert_eq!(full, &AEConfig::desk());
    assert_eq!(grid.iter().map(|v| v.config.d_h).collect::<Vec<_>>(), [16, 32, 64, 128, 256, 512, 32, 32, 32, 32]);
    assert_eq!(grid[6].config.condition_mode, ConditionMode::Add);
    assert_eq!(grid[7].config.condition_mode, ConditionMode::CrossAttention);
    assert_eq!((grid[8].config.lambda_j, grid[8].config.lambda_c), (0.0, 1.0));
    assert_eq!((grid[9].config.lambda_j, grid[9].config.lambda_c), (1.0, 0.0));
    // a base width outside the sweep is added as the full model
    let grid = table4_grid(&AEConfig { d_h: 4, ..AEConfig::desk() });
    assert_eq!(grid[0].name, "full");
    assert_eq!(grid.len(), 11);
}

#[test]
fn ablation_csv_is_well_formed() {
    let mut run = small_run(6);
    run.optimizer.batch_size = 2;
    let data = small_data();
    let variants: Vec<AblationVariant> = table4_grid(&small_ae()).into_iter().filter(|v| v.config.d_h <= 16).collect();
    let results = run_ablation(&run, &data, &variants).unwrap();
    let csv_text = write_ablation_csv(&results).unwrap();
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        ["variant", "d_h", "condition_mode", "lambda_j", "lambda_c", "steps", "initial_loss", "final_loss", "mpvpe", "loss_decreased"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), variants.len());
    for (row, v) in rows.iter().zip(&variants) {
        assert_eq!(&row[0], v.name);
        assert_eq!(row[5].parse::<usize>().unwrap(), 6);
        assert!(row[8].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn trailing_mean_window() {
    assert!(trailing_mean_decreased(&[3.0, 2.0, 1.0, 0.5], 2));
    assert!(!trailing_mean_decreased(&[1.0, 1.0, 1.0, 1.0], 2));
    assert!(!trailing_mean_decreased(&[1.0], 5));
}
