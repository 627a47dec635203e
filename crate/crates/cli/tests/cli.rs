use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;

use gvtnet::data::{tensor_read, tensor_write, SyntheticConfig, Task};
use gvtnet::model::{count_params, presets, ModelSpec, NetworkSpec};
use gvtnet::train::{LossKind, TrainConfig};
use gvtnet::Tensor;
use gvtnet_cli::{dispatch_to, EvalConfig, RunConfig};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut argv = vec!["gvtnet"];
    argv.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = dispatch_to(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn preset(name: &str) -> String {
    format!("{}/../../presets/{name}.json", env!("CARGO_MANIFEST_DIR"))
}

fn listing(dir: &Path) -> BTreeSet<String> {
    walk(dir, dir)
}

fn walk(root: &Path, dir: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
        if p.is_dir() {
            out.extend(walk(root, &p));
        }
    }
    out
}

fn small_config(dir: &Path) -> String {
    let mut train = TrainConfig::new(LossKind::Mse, 1e-3, 2, [4, 8, 8], 3);
    train.seed = 5;
    let spec: ModelSpec = NetworkSpec { initial_features: 2, ..presets::denoise_gvtnet() }.into();
    let cfg = RunConfig { spec, train, data: SyntheticConfig::new(Task::Denoise, [8, 16, 16]), eval: EvalConfig::default() };
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn presets_match_code() {
    let expect: [(&str, ModelSpec); 3] = [
        ("label_free", presets::label_free_gvtnet().into()),
        ("denoise", presets::denoise_gvtnet().into()),
        ("project", ModelSpec::Projection(presets::projection())),
    ];
    for (name, spec) in expect {
        let cfg = RunConfig::load(Path::new(&preset(name))).unwrap();
        assert_eq!(cfg.spec, spec, "{name}");
    }
}

#[test]
fn count_params_prints_one_integer() {
    let (code, out, _) = run(&["count-params", "--config", &preset("label_free")]);
    assert_eq!(code, 0);
    let n: usize = out.trim().parse().unwrap();
    assert_eq!(n, count_params(&presets::label_free_gvtnet().into()).unwrap());
    assert_eq!(out.lines().count(), 1);
}

#[test]
fn usage_errors_exit_2() {
    let bin = env!("CARGO_BIN_EXE_gvtnet");
    let out = Command::new(bin).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = Command::new(bin).args(["gen", "--config"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let (code, _, err) = run(&["predict", "--ckpt", "a", "--in", "b", "--out", "c", "--patch", "4x4"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("USAGE_ERROR"));
}

#[test]
fn domain_errors_exit_1_with_name() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&["count-params", "--config", &dir.path().join("missing.json").to_string_lossy()]);
    assert_eq!(code, 1);
    assert!(err.starts_with("IO_ERROR"), "{err}");

    let bad = dir.path().join("bad.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(preset("denoise")).unwrap()).unwrap();
    v["spec"]["depth"] = serde_json::json!(7);
    fs::write(&bad, v.to_string()).unwrap();
    let (code, _, err) = run(&["count-params", "--config", &bad.to_string_lossy()]);
    assert_eq!(code, 1);
    assert!(err.starts_with("INVALID_SPEC"), "{err}");

    let (code, _, err) = run(&["gradcheck", "--op", "no_such_op"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("INVALID_CONFIG"));
}

#[test]
fn gradcheck_single_op() {
    let (code, out, _) = run(&["gradcheck", "--op", "attention_key_count"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("PASS attention_key_count"));
}

#[test]
fn pipeline_writes_only_named_paths() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();

    let (code, _, err) = run(&["gen", "--config", &config, "--out", &p("data"), "--n", "2"]);
    assert_eq!(code, 0, "{err}");
    let (code, out, err) = run(&["train", "--config", &config, "--data", &p("data"), "--out", &p("m.ckpt")]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 3);
    assert!(out.starts_with("1,"));

    let x = Tensor::<f32>::from_fn(&[8, 16, 16], |i| (i % 7) as f32 / 7.0);
    tensor_write(&x, p("x.gvtt")).unwrap();
    let (code, _, err) = run(&["predict", "--ckpt", &p("m.ckpt"), "--in", &p("x.gvtt"), "--out", &p("y.gvtt")]);
    assert_eq!(code, 0, "{err}");
    let (code, _, _) = run(&[
        "predict", "--ckpt", &p("m.ckpt"), "--in", &p("x.gvtt"), "--out", &p("y_tiled.gvtt"), "--patch", "8x8x8",
        "--overlap", "4",
    ]);
    assert_eq!(code, 0);
    let y = tensor_read(p("y.gvtt")).unwrap().into_typed::<f32>().unwrap();
    assert_eq!(y.shape(), &[8, 16, 16, 1]);
    let yt = tensor_read(p("y_tiled.gvtt")).unwrap().into_typed::<f32>().unwrap();
    assert_eq!(yt.shape(), y.shape());

    let (code, out, err) = run(&["eval", "--ckpt", &p("m.ckpt"), "--data", &p("data"), "--report", &p("eval.csv")]);
    assert_eq!(code, 0, "{err}");
    let agg: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(agg["count"], 2);
    let csv = fs::read_to_string(p("eval.csv")).unwrap();
    assert!(csv.starts_with("id,pearson_r,nrmse,ssim\n"));
    assert_eq!(csv.lines().count(), 3);

    let (code, _, err) =
        run(&["sweep", "--ckpt", &p("m.ckpt"), "--data", &p("data"), "--patches", "4x8x8,full", "--report", &p("sweep.csv")]);
    assert_eq!(code, 0, "{err}");
    let sweep = fs::read_to_string(p("sweep.csv")).unwrap();
    assert!(sweep.starts_with("id,patch,pearson_r,nrmse,ssim\n"));
    assert!(sweep.contains(",4x8x8,") && sweep.contains(",8x16x16,"));

    let mut want: BTreeSet<String> =
        ["run.json", "data", "m.ckpt", "x.gvtt", "y.gvtt", "y_tiled.gvtt", "eval.csv", "sweep.csv"].map(String::from).into();
    want.insert("data/manifest.json".into());
    for id in ["pair0000", "pair0001"] {
        want.insert(format!("data/{id}_input.gvtt"));
        want.insert(format!("data/{id}_target.gvtt"));
    }
    assert_eq!(listing(dir.path()), want);
}

#[test]
fn gen_rejects_indivisible_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: RunConfig = RunConfig::load(Path::new(&preset("denoise"))).unwrap();
    cfg.data.shape = [16, 30, 32];
    let path = dir.path().join("c.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let (code, _, err) = run(&["gen", "--config", &path.to_string_lossy(), "--out", &dir.path().join("d").to_string_lossy(), "--n", "1"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("INDIVISIBLE_EXTENT"));
    assert!(!dir.path().join("d").exists());
}
