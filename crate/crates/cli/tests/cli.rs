use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rpose_cli::stream::{DetectionStream, PoseRecord};
use rpose_core::model::{init_params, ModelConfig};
use rpose_core::synthdata::read_dataset;
use rpose_core::tensor::save_checkpoint;

fn rpose(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpose")).current_dir(dir).env("RUST_LOG", "warn").args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "failed: {}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// Small dataset plus a smoke-trained checkpoint, built once per test.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(train: bool) -> Self {
        let dir = tempfile::tempdir().unwrap();
        ok(&rpose(dir.path(), &["gen", "--seed", "3", "--sequences", "4", "--frames", "10", "--cameras", "4", "--out", "data.jsonl"]));
        if train {
            ok(&rpose(
                dir.path(),
                &["train", "--preset", "smoke", "--dataset", "data.jsonl", "--checkpoint", "m.ckpt", "--override", "total_steps=20", "--override", "t_in=3", "--override", "t_out=3"],
            ));
        }
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        rpose(self.dir.path(), args)
    }
}

#[test]
fn version_reports_formats() {
    let out = ok(&rpose(Path::new("."), &["--version"]));
    assert!(out.contains(env!("CARGO_PKG_VERSION")) && out.contains("checkpoint format 1"), "{out}");
}

#[test]
fn gen_is_reproducible_and_validated() {
    let f = Fixture::new(false);
    let out = ok(&f.run(&["gen", "--seed", "7", "--sequences", "10", "--out", "a.jsonl"]));
    assert!(out.contains("sequences 10"));
    ok(&f.run(&["gen", "--seed", "7", "--sequences", "10", "--out", "b.jsonl"]));
    assert_eq!(std::fs::read(f.path("a.jsonl")).unwrap(), std::fs::read(f.path("b.jsonl")).unwrap());
    assert_eq!(read_dataset(f.path("a.jsonl")).unwrap().sequences.len(), 10);

    assert_eq!(code(&f.run(&["gen", "--out", "c.jsonl", "--override", "noise.occlusion_prob=2.0"])), 2);
    assert_eq!(code(&f.run(&["gen", "--out", "c.jsonl", "--override", "no_such_key=1"])), 2);
    std::fs::write(f.path("bad.json"), r#"{"noise": {"occlusion_prob": 2.0}}"#).unwrap();
    assert_eq!(code(&f.run(&["gen", "--out", "c.jsonl", "--config", "bad.json"])), 2);
}

#[test]
fn train_smoke_is_deterministic_and_loadable() {
    let f = Fixture::new(true);
    let args = ["train", "--preset", "smoke", "--dataset", "data.jsonl", "--checkpoint", "n.ckpt", "--metrics", "n.csv", "--override", "total_steps=20", "--override", "t_in=3", "--override", "t_out=3"];
    let out = ok(&f.run(&args));
    assert!(out.contains("final loss"));
    assert_eq!(std::fs::read(f.path("m.ckpt")).unwrap(), std::fs::read(f.path("n.ckpt")).unwrap());
    let csv = std::fs::read_to_string(f.path("n.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);

    let mut flat = args.to_vec();
    flat.extend(["--override", "base_lr=0"]);
    flat[6] = "flat.ckpt";
    flat[8] = "flat.csv";
    ok(&f.run(&flat));
    flat[6] = "flat2.ckpt";
    flat[10] = "total_steps=7";
    ok(&f.run(&flat));
    // zero learning rate: the weights never leave their initialization
    assert_eq!(std::fs::read(f.path("flat.ckpt")).unwrap(), std::fs::read(f.path("flat2.ckpt")).unwrap());

    assert_eq!(code(&f.run(&["train", "--dataset", "missing.jsonl", "--checkpoint", "x.ckpt"])), 2);
    assert_eq!(code(&f.run(&["train", "--dataset", "data.jsonl", "--checkpoint", "x.ckpt", "--override", "dropout_rate=1.5"])), 2);
    let nan = f.run(&["train", "--preset", "smoke", "--dataset", "data.jsonl", "--checkpoint", "x.ckpt", "--override", "base_lr=1e30", "--override", "warmup_steps=0", "--override", "t_in=3", "--override", "t_out=3"]);
    assert_eq!(code(&nan), 3, "{}", String::from_utf8_lossy(&nan.stderr));
}

#[test]
fn eval_reports_are_reproducible() {
    let f = Fixture::new(true);
    std::fs::write(f.path("e.json"), r#"{"n_cams": [2, 3], "t_in": 3, "occlusion_probs": [0.3], "sweep_cams": 2, "t_in_values": [1, 3]}"#).unwrap();
    let out = ok(&f.run(&["eval", "--dataset", "data.jsonl", "--checkpoint", "m.ckpt", "--config", "e.json", "--report", "r1"]));
    assert!(out.contains("model MPJPE with 2 cameras"), "{out}");
    ok(&f.run(&["eval", "--dataset", "data.jsonl", "--checkpoint", "m.ckpt", "--config", "e.json", "--report", "r2"]));
    for ext in ["r1.csv", "r1.json"] {
        assert_eq!(std::fs::read(f.path(ext)).unwrap(), std::fs::read(f.path(&ext.replace("r1", "r2"))).unwrap());
    }
    let csv = std::fs::read_to_string(f.path("r1.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "condition,n_cams,t_in,occl_prob,mpjpe_mm,n_poses");
    let subset_rows = csv.lines().filter(|l| l.starts_with("cams:model:")).count();
    assert_eq!(subset_rows, 6 + 4);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path("r1.json")).unwrap()).unwrap();
    assert_eq!(json["eval_seed"], 0);
    assert_eq!(json["rows"][0]["per_joint_mpjpe_mm"].as_array().unwrap().len(), 17);

    let other = ok(&f.run(&["eval", "--dataset", "data.jsonl", "--baseline-only", "--config", "e.json", "--report", "b"]));
    assert!(other.contains("baseline MPJPE") && !other.contains("model MPJPE"));
    assert_eq!(code(&f.run(&["eval", "--dataset", "data.jsonl", "--report", "x"])), 2);
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let f = Fixture::new(false);
    let five = ModelConfig { d_model: 16, heads: 2, encoder_layers: 1, decoder_layers: 1, num_joints: 5, ..ModelConfig::default() };
    save_checkpoint(&init_params(&five, 0).unwrap(), &five, f.path("five.ckpt")).unwrap();
    let out = f.run(&["eval", "--dataset", "data.jsonl", "--checkpoint", "five.ckpt", "--report", "x"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));

    let wide = ModelConfig { d_model: 32, ..five.clone() };
    save_checkpoint(&init_params(&five, 0).unwrap(), &wide, f.path("wide.ckpt")).unwrap();
    assert_eq!(code(&f.run(&["eval", "--dataset", "data.jsonl", "--checkpoint", "wide.ckpt", "--report", "x"])), 4);
    assert_eq!(code(&f.run(&["infer", "--dataset", "data.jsonl", "--checkpoint", "five.ckpt", "--out", "p.jsonl"])), 4);
}

fn read_poses(path: &Path) -> Vec<PoseRecord> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn infer_is_causal_and_deterministic() {
    let f = Fixture::new(true);
    let ds = read_dataset(f.path("data.jsonl")).unwrap();
    let stream = DetectionStream::from_sequence(&ds.sequences[1], 8);
    stream.write(std::fs::File::create(f.path("s.jsonl")).unwrap()).unwrap();
    ok(&f.run(&["infer", "--checkpoint", "m.ckpt", "--input", "s.jsonl", "--out", "a.jsonl", "--cameras", "0,2"]));
    ok(&f.run(&["infer", "--checkpoint", "m.ckpt", "--input", "s.jsonl", "--out", "b.jsonl", "--cameras", "0,2"]));
    let a = read_poses(&f.path("a.jsonl"));
    assert_eq!(a.len(), 10);
    assert_eq!(a, read_poses(&f.path("b.jsonl")));
    assert!(a.iter().enumerate().all(|(i, p)| p.frame == i && p.pose_mm.len() == 17));

    ok(&f.run(&["infer", "--checkpoint", "m.ckpt", "--dataset", "data.jsonl", "--sequence", "1", "--out", "c.jsonl", "--cameras", "0,2"]));
    assert_eq!(a, read_poses(&f.path("c.jsonl")));

    // one frame at a time: each prefix of the stream reproduces the outputs so far
    for k in [1, 4, 7] {
        let prefix = DetectionStream { header: stream.header.clone(), frames: stream.frames[..k].to_vec() };
        prefix.write(std::fs::File::create(f.path("p.jsonl")).unwrap()).unwrap();
        ok(&f.run(&["infer", "--checkpoint", "m.ckpt", "--input", "p.jsonl", "--out", "q.jsonl", "--cameras", "0,2"]));
        assert_eq!(read_poses(&f.path("q.jsonl")), a[..k].to_vec());
    }

    assert_eq!(code(&f.run(&["infer", "--checkpoint", "m.ckpt", "--out", "x.jsonl"])), 2);
    assert_eq!(code(&f.run(&["infer", "--checkpoint", "m.ckpt", "--input", "s.jsonl", "--cameras", "9", "--out", "x.jsonl"])), 4);
}

#[test]
fn check_passes_and_reports_every_suite() {
    let out = rpose(Path::new("."), &["check"]);
    let text = ok(&out);
    for suite in ["gradient", "ray_distance", "softmax"] {
        assert!(text.contains(suite), "{text}");
    }
    let strict = rpose(Path::new("."), &["check", "--grad-tol", "1e-12"]);
    assert_eq!(code(&strict), 5);
    let text = String::from_utf8(strict.stdout).unwrap();
    assert!(text.contains("FAIL gradient") && text.contains("PASS ray_distance") && text.contains("PASS softmax"), "{text}");
}
