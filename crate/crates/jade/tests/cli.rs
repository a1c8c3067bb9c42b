use std::path::Path;
use std::process::{Command, Output};

use jade_core::geometry::load_obj;
use jade_core::latent::LatentPair;
use jade_core::metrics::EvalReport;
use jade_core::pipeline::{load_checkpoint, CheckpointKind, Dataset, DATA_FILE, META_FILE, TEMPLATE_FILE};
use serde_json::json;

fn jade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jade"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = jade(args);
    assert!(out.status.success(), "jade {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two joints with four points per ring: 64 vertices per body.
fn tiny_config(dir: &Path, data: &Path, steps: usize) -> std::path::PathBuf {
    let cfg = json!({
        "profile": "desk",
        "ae": {
            "n_points": 64, "joints": 2, "d_z": 8, "d_h": 16, "d_g": 8, "point_hidden": [8],
            "split_hidden": 16, "l_blocks": 1, "l_dec_blocks": 1, "heads": 2, "mlp_ratio": 2
        },
        "optimizer": { "steps": steps, "batch_size": 4 },
        "diffusion": {
            "steps": 20,
            "extrinsic": { "width": 8, "blocks": 1, "heads": 2, "mlp_ratio": 2 },
            "intrinsic": { "width": 8, "blocks": 1, "heads": 2, "mlp_ratio": 2 },
            "optimizer": { "steps": steps, "batch_size": 8 }
        },
        "data": { "path": data },
        "checkpoint_every": 0
    });
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&["synth-data", "--subjects", "3", "--poses", "4", "--seed", "2", "--out", s(&data), "--joints", "2", "--ring-points", "4"]);
    data
}

#[test]
fn help_lists_every_subcommand() {
    let text = String::from_utf8(ok(&["--help"]).stdout).unwrap();
    for cmd in ["synth-data", "train-ae", "train-ddpm", "sample", "encode", "decode", "interpolate", "eval", "ablate", "serve"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn synth_data_writes_a_loadable_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    for f in [DATA_FILE, META_FILE, TEMPLATE_FILE] {
        assert!(data.join(f).exists(), "{f}");
    }
    let ds = Dataset::load(&data).unwrap();
    assert_eq!(ds.samples.len(), 12);
    assert_eq!(ds.meta.vertices, 64);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"optimizer": {"steps": 3, "momentum": 0.9}}"#).unwrap();
    let out = jade(&["train-ae", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("momentum"), "{}", stderr(&out));
}

#[test]
fn intrinsic_stage_refuses_to_start_without_extrinsic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let cfg = tiny_config(tmp.path(), &data, 3);
    let out_dir = tmp.path().join("run");
    ok(&["train-ae", "--config", s(&cfg), "--out", s(&out_dir)]);
    let out = jade(&[
        "train-ddpm", "--stage", "intrinsic", "--ae", s(&out_dir.join("ae.ckpt")), "--config", s(&cfg), "--out", s(&out_dir),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("extrinsic"), "{}", stderr(&out));
}

#[test]
fn full_workflow_produces_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let data = synth(t);
    let cfg = tiny_config(t, &data, 6);
    let run = t.join("run");
    let (ae, ext, int) = (run.join("ae.ckpt"), run.join("extrinsic.ckpt"), run.join("intrinsic.ckpt"));

    ok(&["train-ae", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(load_checkpoint(&ae).unwrap().kind, CheckpointKind::Autoencoder);
    ok(&["train-ddpm", "--stage", "extrinsic", "--ae", s(&ae), "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    ok(&["train-ddpm", "--stage", "intrinsic", "--ae", s(&ae), "--ext", s(&ext), "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(load_checkpoint(&int).unwrap().kind, CheckpointKind::Intrinsic);

    let samples = t.join("samples");
    let cascade = ["--ae", s(&ae), "--ext", s(&ext), "--int", s(&int)];
    ok(&[&["sample"], &cascade[..], &["--count", "3", "--seed", "5", "--out", s(&samples)]].concat());
    let latents: Vec<LatentPair> = serde_json::from_str(&std::fs::read_to_string(samples.join("latents.json")).unwrap()).unwrap();
    assert_eq!(latents.len(), 3);
    for i in 0..3 {
        assert_eq!(load_obj(samples.join(format!("sample_{i:04}.obj"))).unwrap().vertices.len(), 64);
    }

    let mesh = t.join("body.obj");
    let ds = Dataset::load(&data).unwrap();
    let posed = jade_core::geometry::TriangleMesh::from_points(&ds.samples[0].vertices, &ds.template.faces).unwrap();
    jade_core::geometry::save_obj(&posed, &mesh).unwrap();
    let (a, b) = (t.join("a.json"), t.join("b.json"));
    ok(&["encode", "--ae", s(&ae), "--mesh", s(&mesh), "--out", s(&a)]);
    std::fs::write(&b, serde_json::to_string(&latents[0]).unwrap()).unwrap();
    let decoded = t.join("decoded.obj");
    ok(&["decode", "--ae", s(&ae), "--latents", s(&a), "--out", s(&decoded)]);
    assert_eq!(load_obj(&decoded).unwrap().faces, ds.template.faces);

    // alpha 0 reproduces the decode of `from`
    let mixed = t.join("mixed.obj");
    ok(&["interpolate", "--ae", s(&ae), "--from", s(&a), "--to", s(&b), "--alpha", "0", "--which", "both", "--out", s(&mixed)]);
    assert_eq!(std::fs::read(&mixed).unwrap(), std::fs::read(&decoded).unwrap());
    let out = jade(&["interpolate", "--ae", s(&ae), "--from", s(&a), "--to", s(&b), "--alpha", "2", "--out", s(&mixed)]);
    assert!(!out.status.success());

    let report_path = t.join("report.json");
    ok(&[&["eval"], &cascade[..], &["--data", s(&data), "--samples", "4", "--out", s(&report_path)]].concat());
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report.is_valid());
    assert_eq!(report.sample_count, 4);
}

#[test]
fn ablate_writes_one_csv_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let cfg = tiny_config(tmp.path(), &data, 2);
    let csv_path = tmp.path().join("results.csv");
    ok(&["ablate", "--grid", "table4", "--data", s(&data), "--out", s(&csv_path), "--config", s(&cfg), "--steps", "2"]);
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(headers.iter().next(), Some("variant"));
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.len() == headers.len()));
    assert!(rows.iter().all(|r| r[1].parse::<usize>().is_ok()));
}
