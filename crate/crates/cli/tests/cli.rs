use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pbe_core::checkpoint::Checkpoint;
use pbe_core::config::RunConfig;
use pbe_core::data::{read_pgm, write_pgm};
use pbe_core::pbe::{PbeConfig, PbeNet};
use pbe_core::Tensor;

fn pbe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pbe"))
        .args(args)
        .output()
        .expect("spawn pbe")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let cfg = r#"{
        "model": {"base_channels": 8},
        "train": {"epochs": 1, "batch_size": 4, "lr0": 0.02, "image_size": 32, "eval_every": 2},
        "synth": {"count": 8, "size": 32, "train_fraction": 0.75}
    }"#;
    fs::write(&path, cfg).unwrap();
    path
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "masks"] {
        let d = dir.join(sub);
        let mut names: Vec<_> = fs::read_dir(&d)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for p in names {
            out.push((
                p.strip_prefix(dir).unwrap().display().to_string(),
                fs::read(&p).unwrap(),
            ));
        }
    }
    out
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(pbe(&[]).status.code(), Some(2));
    assert_eq!(pbe(&["bogus"]).status.code(), Some(2));
    assert_eq!(pbe(&["flops", "--nope"]).status.code(), Some(2));
    let o = pbe(&["synth", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--out"));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let o = pbe(&["eval", "--checkpoint", missing.to_str().unwrap(), "--data", "."]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
    assert!(String::from_utf8_lossy(&o.stderr).contains("none.ckpt"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"trian": {}}"#).unwrap();
    let o = pbe(&["flops", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trian"));
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = pbe(&[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let fa = files(&a);
    assert_eq!(fa.len(), 2 + 2 * 8);
    assert_eq!(fa, files(&b));

    let c = dir.path().join("c");
    pbe(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "8",
        "--out",
        c.to_str().unwrap(),
    ]);
    assert_ne!(fa, files(&c));
}

#[test]
fn flops_reports_json() {
    let o = pbe(&["flops"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let params = v["param_count"].as_u64().unwrap();
    assert!((1_000_000..=10_000_000).contains(&params), "{params}");
    assert!(v["flops"].as_u64().unwrap() > 0);

    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = pbe(&["flops", "--config", cfg.to_str().unwrap(), "--size", "64"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["input"], serde_json::json!([1, 1, 64, 64]));
    assert!(v["param_count"].as_u64().unwrap() < params);
}

#[test]
fn gradcheck_passes() {
    let o = pbe(&["gradcheck"]);
    let text = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{text}");
    assert!(text.contains("pbe_net_total_loss"));
    assert!(text.contains("all passed"));
}

#[test]
fn train_eval_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    let c = cfg.to_str().unwrap();
    assert!(pbe(&["synth", "--config", c, "--out", data.to_str().unwrap()])
        .status
        .success());
    let o = pbe(&[
        "train",
        "--config",
        c,
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["iterations"], 4);
    for f in ["best.ckpt", "last.ckpt", "history.csv", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let saved = RunConfig::load(&run.join("config.json")).unwrap();
    assert_eq!(saved.train.epochs, 2);

    let ckpt = run.join("last.ckpt");
    let o = pbe(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "val",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["aggregate"]["count"], 2);
    assert_eq!(v["samples"].as_array().unwrap().len(), 2);
    let d = v["aggregate"]["dice"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&d));

    let image = data.join("images").join("synth_00000.pgm");
    let mask = dir.path().join("mask.pgm");
    let prefix = dir.path().join("b_");
    let o = pbe(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        mask.to_str().unwrap(),
        "--boundary-out",
        prefix.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_pgm(&mask).unwrap();
    assert_eq!(m.shape(), &[1, 1, 32, 32]);
    assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    for (k, side) in [4, 8, 16, 32].into_iter().enumerate() {
        let b = read_pgm(&dir.path().join(format!("b_stage{}.pgm", k + 1))).unwrap();
        assert_eq!(b.shape(), &[1, 1, side, side]);
    }
}

#[test]
fn eval_of_exact_prediction_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.model = PbeConfig::baseline(8);
    cfg.train.image_size = 16;
    let net = PbeNet::new(cfg.model.clone()).unwrap();
    let mut params = net.init_params::<f32>(0).unwrap();
    params.get_mut("head.bias").unwrap().data_mut().fill(-1e4);
    let ckpt = dir.path().join("zero.ckpt");
    Checkpoint::new(cfg, 0, params, None).save(&ckpt).unwrap();

    let data = dir.path().join("data");
    for sub in ["images", "masks"] {
        fs::create_dir_all(data.join(sub)).unwrap();
    }
    for i in 0..3 {
        let img = Tensor::from_fn(&[1, 1, 16, 16], |k| ((k * (i + 3)) % 256) as f32 / 255.0).unwrap();
        write_pgm(&data.join("images").join(format!("s{i}.pgm")), &img).unwrap();
        write_pgm(
            &data.join("masks").join(format!("s{i}.pgm")),
            &Tensor::zeros(&[1, 1, 16, 16]).unwrap(),
        )
        .unwrap();
    }
    let o = pbe(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["aggregate"]["dice"], 1.0);
    assert_eq!(v["aggregate"]["iou"], 1.0);
    assert_eq!(v["aggregate"]["count"], 3);
    assert_eq!(v["samples"][0]["hd95"], 0.0);
}
