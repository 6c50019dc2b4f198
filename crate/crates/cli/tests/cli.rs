use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mimcspt"));
    c.env("MIMCSPT_REFERENCE_MODE", "1");
    c
}

fn tiny_model() -> Value {
    json!({
        "image_size": 16, "patch_size": 8,
        "encoder_dim": 16, "encoder_depth": 1, "encoder_heads": 2,
        "decoder_dim": 8, "decoder_depth": 1, "decoder_heads": 2,
        "mlp_ratio": 2
    })
}

fn write_config(dir: &Path, name: &str, doc: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(doc).unwrap()).unwrap();
    path
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Hash of every file's relative path and bytes, in sorted path order.
fn dir_hash(root: &Path) -> String {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, files);
            } else {
                files.push(p);
            }
        }
    }
    let mut files = Vec::new();
    walk(root, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    format!("{:x}", h.finalize())
}

fn data_doc() -> Value {
    json!({
        "model": tiny_model(),
        "data": { "corpora": [
            { "id": "A", "domain": "canonical", "classes": 2, "count": 8, "split": "unlabeled" },
            { "id": "B", "domain": "overhead", "classes": 2, "count": 8, "split": "train",
              "spec": { "clutter": 0.0 } },
            { "id": "T", "domain": "overhead", "classes": 2, "count": 4, "split": "test" }
        ]}
    })
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = bin().args(["pretrain", "--banana"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = bin().arg("no-such-command").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_model_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = tiny_model();
    model.as_object_mut().unwrap().remove("patch_size");
    let cfg = write_config(dir.path(), "c.json", &json!({ "model": model }));
    let o = run("pretrain", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("model.patch_size"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn unknown_config_key_and_bad_override_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({ "model": tiny_model(), "bogus": 1 }));
    let o = run("gen-data", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(3));

    let cfg = write_config(dir.path(), "d.json", &data_doc());
    let o = run("gen-data", &cfg, &dir.path().join("out"), &["--set", "model.patch_size=5"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.patch_size"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn stage_role_must_match_command() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = json!({ "model": tiny_model() });
    doc["stage"] = json!({ "id": "s", "role": "finetune", "corpora": ["x"], "epochs": 1 });
    let cfg = write_config(dir.path(), "c.json", &doc);
    let o = run("pretrain", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage.role"));
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "d.json", &data_doc());
    let out = dir.path().join("out");
    let o = run("gen-data", &cfg, &out, &["--dry-run"]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("plan: gen-data"));
    assert!(!out.exists());
}

#[test]
fn runtime_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = json!({ "model": tiny_model() });
    doc["stage"] = json!({ "id": "s", "role": "pretrain", "corpora": [dir.path().join("absent")], "epochs": 1 });
    let cfg = write_config(dir.path(), "c.json", &doc);
    let o = run("pretrain", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: runtime:"));
}

#[test]
fn repeated_runs_hash_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data_cfg = write_config(dir.path(), "d.json", &data_doc());
    let data = dir.path().join("data");

    let mut stage = json!({ "model": tiny_model() });
    stage["stage"] = json!({
        "id": "A", "role": "pretrain", "corpora": [data.join("A")], "epochs": 2, "batch_size": 4
    });
    let stage_cfg = write_config(dir.path(), "s.json", &stage);
    let out = dir.path().join("pre");

    let mut hashes = Vec::new();
    for _ in 0..2 {
        let _ = fs::remove_dir_all(&data);
        let _ = fs::remove_dir_all(&out);
        ok(&run("gen-data", &data_cfg, &data, &["--seed", "7"]));
        ok(&run("pretrain", &stage_cfg, &out, &["--seed", "7"]));
        hashes.push((dir_hash(&data), dir_hash(&out)));
    }
    assert_eq!(hashes[0], hashes[1]);
    assert!(out.join("checkpoint.ckpt").exists());
    assert!(out.join("metrics.jsonl").exists());
    let echo: Value = serde_json::from_slice(&fs::read(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(echo["command"], "pretrain");
    assert_eq!(echo["config"]["seed"], 7);

    // A different seed changes the weights.
    let other = dir.path().join("pre8");
    ok(&run("pretrain", &stage_cfg, &other, &["--seed", "8"]));
    assert_ne!(
        fs::read(out.join("checkpoint.ckpt")).unwrap(),
        fs::read(other.join("checkpoint.ckpt")).unwrap()
    );
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&run("gen-data", &write_config(dir.path(), "d.json", &data_doc()), &data, &[]));

    let mut doc = json!({ "model": tiny_model() });
    doc["stage"] = json!({ "id": "A", "role": "pretrain", "corpora": [data.join("A")], "epochs": 1, "batch_size": 4 });
    let pre = dir.path().join("pre");
    ok(&run("pretrain", &write_config(dir.path(), "p.json", &doc), &pre, &[]));

    doc["stage"] = json!({
        "id": "B", "role": "continue", "corpora": [data.join("B")], "epochs": 1, "batch_size": 4,
        "init_checkpoint": pre.join("checkpoint.ckpt")
    });
    let cont = dir.path().join("cont");
    ok(&run("continue-pretrain", &write_config(dir.path(), "c.json", &doc), &cont, &[]));

    doc["stage"] = json!({
        "id": "task", "role": "finetune", "corpora": [data.join("B")], "eval_corpora": [data.join("T")],
        "epochs": 1, "batch_size": 4, "head": { "kind": "classification", "classes": 2 },
        "init_checkpoint": cont.join("checkpoint.ckpt")
    });
    let ft = dir.path().join("ft");
    let o = run("finetune", &write_config(dir.path(), "f.json", &doc), &ft, &[]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("eval"));

    let finetune = json!({
        "id": "task", "role": "finetune", "corpora": [data.join("B")], "eval_corpora": [data.join("T")],
        "epochs": 2, "batch_size": 4, "head": { "kind": "classification", "classes": 2 }
    });
    let pre_a = json!({ "id": "A", "role": "pretrain", "corpora": [data.join("A")], "epochs": 1, "batch_size": 4 });
    let cont_b = json!({ "id": "B", "role": "continue", "corpora": [data.join("B")], "epochs": 1, "batch_size": 4 });
    let compare = json!({
        "model": tiny_model(),
        "eval": { "arms": [
            { "id": "scratch", "seeds": [0, 1], "finetune": finetune },
            { "id": "ssp", "pretrain": [pre_a], "seeds": [0, 1], "finetune": finetune },
            { "id": "cspt", "pretrain": [pre_a, cont_b], "seeds": [0, 1], "finetune": finetune }
        ]}
    });
    let cmp = dir.path().join("cmp");
    let o = run("compare", &write_config(dir.path(), "cmp.json", &compare), &cmp, &[]);
    ok(&o);
    let report: Value = serde_json::from_slice(&fs::read(cmp.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);
    assert_eq!(report["pretrain_label_reads"], 0);
    // Stage A is shared by the ssp and cspt arms and runs once.
    assert_eq!(fs::read_dir(cmp.join("pretrain")).unwrap().count(), 2);

    let curves = json!({ "model": tiny_model(), "eval": { "runs": cmp } });
    let cur = dir.path().join("curves");
    ok(&run("export-curves", &write_config(dir.path(), "cur.json", &curves), &cur, &[]));
    let csv = fs::read_to_string(cur.join("curves.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,arm,seed,metric"));
    assert_eq!(csv.lines().count(), 1 + 3 * 2 * 2);

    let fig = json!({
        "model": tiny_model(),
        "eval": { "checkpoint": cont.join("checkpoint.ckpt"), "corpus": data.join("T"), "count": 2, "ref_patch": 3 }
    });
    let fig_cfg = write_config(dir.path(), "fig.json", &fig);
    let att = dir.path().join("att");
    ok(&run("attnmap", &fig_cfg, &att, &[]));
    assert!(att.join("attention.ppm").exists());
    let rec = dir.path().join("rec");
    ok(&run("reconstruct", &fig_cfg, &rec, &[]));
    let ppm = fs::read(rec.join("reconstruction.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n52 34\n255\n"), "{:?}", &ppm[..16]);

    // A fine-tuned checkpoint has no decoder: reconstruction is a runtime error.
    let mut no_dec = fig.clone();
    no_dec["eval"]["checkpoint"] = json!(ft.join("checkpoint.ckpt"));
    let o = run("reconstruct", &write_config(dir.path(), "nd.json", &no_dec), &dir.path().join("nd"), &[]);
    assert_eq!(o.status.code(), Some(1));
}
