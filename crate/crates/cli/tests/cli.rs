use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use motiondiff::motiondata::bvh::{clip_to_bvh, parse_bvh, write_bvh_file};
use motiondiff::motiondata::kinematics::encode;
use motiondiff::motiondata::synthetic::generate_sequence;
use motiondiff::motiondata::{MotionClip, SkeletonDef, FRAME_TIME};

const TINY: &str = r#"{"width":8,"embed_dim":8,"disc_width":8,"diffusion_steps":10,"steps":6,"checkpoint_every":3,"batch_size":4}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motiondiff")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// Exit code and the parsed single-line error.
fn err(args: &[&str]) -> (i32, serde_json::Value) {
    let o = run(args);
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    (o.status.code().unwrap(), serde_json::from_str(stderr.trim()).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture { dir: tempfile::tempdir().unwrap() };
        ok(&["preprocess", "--synthetic", "--seed", "3", "--clips", "36", "--out", s(&f.data())]);
        fs::write(f.path("tiny.json"), TINY).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> PathBuf {
        self.path("data.mdl")
    }

    fn train(&self, out: &str) -> PathBuf {
        let o = self.path(out);
        ok(&["train", "--config", s(&self.path("tiny.json")), "--dataset", s(&self.data()), "--out", s(&o)]);
        o
    }
}

#[test]
fn preprocess_synthetic_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a.mdl"), d.path().join("b.mdl"));
    let out = ok(&["preprocess", "--synthetic", "--seed", "7", "--clips", "30", "--out", s(&a)]);
    ok(&["preprocess", "--synthetic", "--seed", "7", "--clips", "30", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(d.path().join("a.mdl.json")).unwrap(), fs::read(d.path().join("b.mdl.json")).unwrap());
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["clips"], 30);
}

#[test]
fn preprocess_errors_and_bvh_input() {
    let d = tempfile::tempdir().unwrap();
    let (code, e) = err(&["preprocess", "--input", s(&d.path().join("nope")), "--out", s(&d.path().join("x.mdl"))]);
    assert_eq!(code, 3);
    assert_eq!(e["error"], "data");

    let (code, e) = err(&["preprocess", "--out", "x.mdl"]);
    assert_eq!(code, 2);
    assert_eq!(e["error"], "usage");

    let input = d.path().join("bvh");
    fs::create_dir(&input).unwrap();
    let skel = SkeletonDef::synthetic();
    let (m, _) = generate_sequence(0, 0, 64, 1).unwrap();
    let (rot, root) = encode(&m, FRAME_TIME);
    let clip = MotionClip::<f64>::new(64, skel.num_joints(), 0, rot, root, vec![], 0, 0).unwrap();
    fs::write(input.join("walk_proud.bvh"), write_bvh_file(&clip_to_bvh(&skel, &clip, FRAME_TIME))).unwrap();
    let out = ok(&["preprocess", "--input", s(&input), "--stride", "32", "--out", s(&d.path().join("b.mdl"))]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["clips"], 2);
    assert_eq!(v["contents"], serde_json::json!(["walk"]));
}

#[test]
fn train_config_echo_and_errors() {
    let f = Fixture::new();
    let out = ok(&["train", "--preset", "paper", "--dataset", "unused", "--out", "unused", "--dry-run"]);
    let v: serde_json::Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    let c = &v["config"];
    assert_eq!(c["learning_rate"], 0.0002);
    assert_eq!(c["diffusion_steps"], 1000);
    assert_eq!(c["batch_size"], 128);
    assert_eq!(c["ema_decay"], 0.9999);

    fs::write(f.path("bad.json"), r#"{"weights":{"speed":1}}"#).unwrap();
    let (code, e) = err(&["train", "--config", s(&f.path("bad.json")), "--dataset", s(&f.data()), "--out", s(&f.path("o"))]);
    assert_eq!(code, 2);
    assert!(e["message"].as_str().unwrap().contains("weights.speed"), "{e}");

    let (code, _) = err(&["train", "--preset", "huge", "--dataset", s(&f.data()), "--out", s(&f.path("o"))]);
    assert_eq!(code, 2);
}

#[test]
fn training_is_byte_reproducible() {
    let f = Fixture::new();
    let (a, b) = (f.train("a"), f.train("b"));
    for name in ["metrics.jsonl", "checkpoint.mdc", "config.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert_eq!(fs::read_to_string(a.join("metrics.jsonl")).unwrap().lines().count(), 6);
}

#[test]
fn sample_writes_parseable_files_and_manifest() {
    let f = Fixture::new();
    let ckpt = f.train("run").join("checkpoint.mdc");
    let out = f.path("samples");
    let args = ["sample", "--checkpoint", s(&ckpt), "--content", "1", "--style", "old", "--n", "3", "--seed", "4", "--out", s(&out)];
    ok(&args);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["content_name"], "run");
    assert_eq!(m["style_name"], "old");
    assert_eq!(m["files"].as_array().unwrap().len(), 3);
    let mut first = Vec::new();
    for i in 0..3 {
        let text = fs::read_to_string(out.join(format!("sample_{i:03}.bvh"))).unwrap();
        assert_eq!(parse_bvh(&text).unwrap().num_frames(), 32);
        first.push(text);
    }
    let again = f.path("again");
    let mut args2 = args;
    args2[12] = s(&again);
    ok(&args2);
    for (i, text) in first.iter().enumerate() {
        assert_eq!(&fs::read_to_string(again.join(format!("sample_{i:03}.bvh"))).unwrap(), text);
    }

    let (code, e) = err(&["sample", "--checkpoint", s(&ckpt), "--content", "3", "--style", "0", "--out", s(&out)]);
    assert_eq!(code, 2);
    assert!(e["message"].as_str().unwrap().contains("0..3"), "{e}");
    let (code, _) = err(&["sample", "--checkpoint", s(&f.path("missing.mdc")), "--content", "0", "--style", "0", "--out", s(&out)]);
    assert_eq!(code, 3);
}

#[test]
fn eval_and_ablate() {
    let f = Fixture::new();
    let run_dir = f.train("run");
    let cls = f.path("cls.mdc");
    let c1 = ok(&["train-classifier", "--dataset", s(&f.data()), "--out", s(&cls), "--steps", "20"]);
    let c2 = ok(&["train-classifier", "--dataset", s(&f.data()), "--out", s(&f.path("cls2.mdc")), "--steps", "20"]);
    assert_eq!(fs::read(&cls).unwrap(), fs::read(f.path("cls2.mdc")).unwrap());
    assert_ne!(c1, "");
    assert_ne!(c2, "");

    let ckpt = run_dir.join("checkpoint.mdc");
    let data = f.data();
    let args = ["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--classifier", s(&cls), "--seed", "1"];
    let a = ok(&args);
    assert_eq!(a, ok(&args));
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert!(v["fid"].as_f64().unwrap() >= 0.0);
    assert!(v["accuracy"].as_f64().is_some());

    let ab = f.path("ablate");
    let table = ok(&[
        "ablate", "--config", s(&f.path("tiny.json")), "--dataset", s(&f.data()), "--classifier", s(&cls),
        "--rows", "full,physical", "--out", s(&ab),
    ]);
    assert_eq!(table.lines().count(), 3);
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(ab.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    // the full row is the plain training run
    assert_eq!(fs::read(ab.join("full/checkpoint.mdc")).unwrap(), fs::read(&ckpt).unwrap());
    assert_ne!(fs::read(ab.join("physical/checkpoint.mdc")).unwrap(), fs::read(&ckpt).unwrap());

    let (code, _) = err(&[
        "ablate", "--dataset", s(&f.data()), "--classifier", s(&cls), "--rows", "full,bogus", "--out", s(&ab),
    ]);
    assert_eq!(code, 2);
}
