use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pat_core::container::save_container;
use pat_core::Tensor;

fn pat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pat")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"{
  "model": { "init_std": 0.1, "blocks": 1 },
  "csl": { "k": 3 },
  "data": { "source_ids": 4, "target_ids": 4, "images_per_id": 4 },
  "train": { "epochs": 2, "warmup_epochs": 1, "p": 2, "k_per_id": 2 }
}"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&pat(&[])), 1);
    assert_eq!(code(&pat(&["frobnicate"])), 1);
    assert_eq!(code(&pat(&["attnmap"])), 1);
    assert_eq!(code(&pat(&["--help"])), 0);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    let bad_json = write(dir.path(), "bad.json", "{ not json");
    let bad_tau = write(dir.path(), "tau.json", r#"{"csl": {"tau": -1}}"#);
    assert_eq!(code(&pat(&["gen-data", "--config", &bad_json, "--out", out])), 2);
    assert_eq!(code(&pat(&["train", "--config", &bad_tau, "--out", out])), 2);
    assert_eq!(code(&pat(&["gen-data", "--config", "/nonexistent.json", "--out", out])), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_pat"))
        .args(["oracle-check"])
        .env("PAT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn oracle_check_passes() {
    let o = pat(&["oracle-check", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 7);
    assert!(lines.iter().all(|v| v["passed"] == true));
}

#[test]
fn gradcheck_passes() {
    let o = pat(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("full_objective") && text.contains("toy_objective"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn eval_single_query_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("fixture.patb");
    let t = |rows: &[[f32; 2]]| Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    save_container(
        &feats,
        &[
            ("query".into(), t(&[[0.0, 0.0]])),
            ("query_meta".into(), t(&[[1.0, 0.0]])),
            ("gallery".into(), t(&[[0.1, 0.0], [5.0, 5.0]])),
            ("gallery_meta".into(), t(&[[1.0, 1.0], [2.0, 1.0]])),
        ],
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = pat(&["eval", "--features", feats.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["mAP"], 1.0);
    assert_eq!(v["cmc"]["1"], 1.0);
    assert!(out.join("metrics.json").exists());
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let ckpt = write(dir.path(), "bad.patb", "PATB\u{2}garbage");
    let out = dir.path().join("o");
    let o = pat(&["eval", "--config", &cfg, "--ckpt", &ckpt, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("byte"));
}

#[test]
fn generate_train_evaluate_embed_and_map() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let data = dir.path().join("data");
    let o = pat(&["gen-data", "--config", &cfg, "--out", data.to_str().unwrap(), "--seed", "4"]);
    assert_eq!(code(&o), 0);
    let lines = fs::read_to_string(data.join("source.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 16);
    let named = pat_core::load_container(data.join("target.patb")).unwrap();
    assert_eq!(named.len(), 16);
    assert_eq!(named[0].1.dims(), &[3, 64, 32]);

    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let o = pat(&["train", "--config", &cfg, "--out", run_s, "--no-psd"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(run.join("log.jsonl")).unwrap();
    let entries: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[1]["loss"]["psd"], 0.0);
    assert!(entries[1]["csl_active"].as_bool().unwrap());
    let ckpt = run.join("checkpoint.patb");
    let ckpt_s = ckpt.to_str().unwrap();

    let o = pat(&["eval", "--config", &cfg, "--ckpt", ckpt_s, "--out", run_s]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["mAP"].as_f64().unwrap() > 0.0);

    let o = pat(&["embed", "--config", &cfg, "--ckpt", ckpt_s, "--out", run_s, "--top-n", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let emb = pat_core::load_container(run.join("embeddings.patb")).unwrap();
    let names: Vec<&str> = emb.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["global", "part/p1", "part/p2", "part/p3", "meta"]);
    let rankings = fs::read_to_string(run.join("rankings.jsonl")).unwrap();
    assert_eq!(rankings.lines().count(), 16 * 3);
    let o = pat(&["eval", "--features", run.join("embeddings.patb").to_str().unwrap(), "--out", run_s]);
    assert_eq!(code(&o), 0);
    let w: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(w, v);

    let o = pat(&["attnmap", "--config", &cfg, "--ckpt", ckpt_s, "--token", "p2", "--token", "cls", "--out", run_s]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pgm = fs::read(run.join("attn_p2_00000.pgm")).unwrap();
    let header = b"P5\n32 64\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    let pixels = &pgm[header.len()..];
    assert_eq!(pixels.len(), 64 * 32);
    // p2 sees grid rows 2..6, i.e. pixel rows 16..48.
    for (i, &v) in pixels.iter().enumerate() {
        let y = i / 32;
        if !(16..48).contains(&y) {
            assert_eq!(v, 0, "pixel row {y}");
        }
    }
    assert!(pixels.contains(&255));
    assert!(run.join("attn_cls_00000.pgm").exists());

    let o = pat(&["train", "--config", &cfg, "--out", run_s, "--ckpt", ckpt_s]);
    assert_eq!(code(&o), 0, "resuming a finished run is a no-op");
    let o = pat(&["attnmap", "--config", &cfg, "--token", "p9", "--out", run_s]);
    assert_eq!(code(&o), 3);
    let o = pat(&["attnmap", "--config", &cfg, "--token", "torso", "--out", run_s]);
    assert_ne!(code(&o), 0);
}
