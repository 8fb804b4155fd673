use std::path::Path;
use std::process::{Command, Output};

use dgk_core::dataset::read_dataset;
use dgk_core::inference::TrajectorySet;
use serde_json::Value;

fn dgk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgk")).args(args).env_remove("DGK_SEED").output().expect("spawn dgk")
}

fn ok(args: &[&str]) -> Output {
    let out = dgk(args);
    assert!(out.status.success(), "dgk {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn gen(dir: &Path, seed: &str) {
    ok(&["gen-data", "--out", p(dir), "--scenes", "24", "--horizon", "10", "--seed", seed]);
}

#[test]
fn gen_data_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    gen(&a, "4");
    gen(&b, "4");
    gen(&c, "5");
    for f in ["train.dgk", "val.dgk", "manifest.json", "run_manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert_ne!(std::fs::read(a.join("train.dgk")).unwrap(), std::fs::read(c.join("train.dgk")).unwrap());
    let m = json(&a.join("run_manifest.json"));
    assert_eq!(m["subcommand"], "gen-data");
    assert_eq!(m["seed"], 4);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_precedence_is_file_then_env_then_flag() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.toml");
    std::fs::write(&cfg, "schema_version = 1\nseed = 1\nscenes = 2\nhorizon = 5\n").unwrap();
    let seed_of = |out: &Path, env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dgk"));
        cmd.env_remove("DGK_SEED").args(["--config", p(&cfg), "gen-data", "--out", p(out)]);
        if let Some(e) = env {
            cmd.env("DGK_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        assert!(cmd.output().unwrap().status.success());
        json(&out.join("run_manifest.json"))["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(&t.path().join("1"), None, None), 1);
    assert_eq!(seed_of(&t.path().join("2"), Some("2"), None), 2);
    assert_eq!(seed_of(&t.path().join("3"), Some("2"), Some("3")), 3);
}

#[test]
fn exit_codes_and_error_json() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(dgk(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(dgk(&["gen-data"]).status.code(), Some(2));

    let cfg = t.path().join("c.toml");
    std::fs::write(&cfg, "schema_version = 1\nheads = 3\n").unwrap();
    let out = dgk(&["--config", p(&cfg), "gen-data", "--out", p(&t.path().join("x"))]);
    assert_eq!(out.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!((err["error"].as_str(), err["field"].as_str()), (Some("invalid_config"), Some("heads")));

    std::fs::write(&cfg, "schema_version = 2\n").unwrap();
    let out = dgk(&["--config", p(&cfg), "gen-data", "--out", p(&t.path().join("x"))]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(serde_json::from_slice::<Value>(&out.stderr).unwrap()["field"], "schema_version");

    let out = dgk(&["eval", "--checkpoint", "/nonexistent.dgkc", "--data", "/nonexistent.dgk", "--out", p(&t.path().join("e"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(serde_json::from_slice::<Value>(&out.stderr).unwrap()["message"].is_string());
}

#[test]
fn fit_law_recovers_generating_coefficients() {
    let t = tempfile::tempdir().unwrap();
    let csv = t.path().join("pts.csv");
    let mut text = String::from("unique_samples,val_loss\n");
    for i in 0..8 {
        let x = 10f64.powf(3.0 + 0.5 * i as f64);
        text.push_str(&format!("{x},{}\n", (-0.102 * x.ln() + 2.663).exp()));
    }
    std::fs::write(&csv, text).unwrap();
    let out = ok(&["fit-law", "--input", p(&csv), "--x", "unique_samples", "--y", "val_loss", "--out", p(&t.path().join("fit"))]);
    let fit: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((fit["slope"].as_f64().unwrap() + 0.102).abs() < 1e-9);
    assert!((fit["intercept"].as_f64().unwrap() - 2.663).abs() < 1e-9);
    assert!(std::fs::read_to_string(t.path().join("fit/fit.svg")).unwrap().contains("<svg"));
}

#[test]
fn eval_of_ground_truth_predictions_is_perfect() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, "8");
    let scenes = read_dataset(&data.join("val.dgk")).unwrap();
    let sets: Vec<TrajectorySet> = scenes
        .iter()
        .map(|s| {
            let gt = s.future_gt.clone().unwrap();
            TrajectorySet {
                scene_id: s.scene_id,
                samples: vec![gt.clone(); 2],
                modes: vec![gt],
                mode_probs: vec![1.0],
                temperature: 1.0,
                seed: 0,
            }
        })
        .collect();
    let preds = t.path().join("preds.json");
    std::fs::write(&preds, serde_json::to_string(&sets).unwrap()).unwrap();
    let baseline = t.path().join("baseline.json");
    std::fs::write(
        &baseline,
        r#"{"min_ade":2.0,"min_fde":4.0,"miss_rate":0.5,"offroad_rate":0.1,"collision_rate":0.2,"horizon":10,"t_eval":10,"miss_threshold":2.0,"num_scenes":3,"num_trajectories":3}"#,
    )
    .unwrap();
    let out_dir = t.path().join("eval");
    ok(&[
        "eval",
        "--predictions",
        p(&preds),
        "--data",
        p(&data.join("val.dgk")),
        "--baseline",
        p(&baseline),
        "--name",
        "oracle",
        "--out",
        p(&out_dir),
    ]);
    let r = json(&out_dir.join("report.json"));
    assert_eq!((r["min_ade"].as_f64(), r["min_fde"].as_f64(), r["miss_rate"].as_f64()), (Some(0.0), Some(0.0), Some(0.0)));
    assert_eq!(r["num_scenes"].as_u64(), Some(scenes.len() as u64));
    let table = std::fs::read_to_string(out_dir.join("normalized.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[1], "baseline,1.000,1.000,1.000,1.000,1.000");
    assert!(lines[2].starts_with("oracle,0.000,0.000,0.000,"));
}

#[test]
fn interrupted_training_resumes_to_identical_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, "2");
    let model = ["--d-model", "8", "--layers", "1", "--heads", "2", "--epochs", "2", "--batch-size", "4", "--eval-every", "0"];
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--data", p(&data), "--out", p(out)];
        args.extend_from_slice(&model);
        args.extend_from_slice(extra);
        ok(&args);
    };
    let (full, part, rest) = (t.path().join("full"), t.path().join("part"), t.path().join("rest"));
    run(&full, &[]);
    run(&part, &["--stop-at", "4"]);
    let ck = part.join("checkpoint.dgkc");
    run(&rest, &["--resume", p(&ck)]);
    assert_eq!(std::fs::read(full.join("checkpoint.dgkc")).unwrap(), std::fs::read(rest.join("checkpoint.dgkc")).unwrap());

    let curve = std::fs::read_to_string(rest.join("curve.csv")).unwrap();
    assert!(curve.lines().nth(1).unwrap().starts_with("4,"));
}

#[test]
fn rollout_and_plots_write_svg() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, "6");
    let run = t.path().join("run");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--d-model",
        "8",
        "--layers",
        "1",
        "--heads",
        "2",
        "--steps",
        "2",
        "--batch-size",
        "2",
    ]);
    let roll = t.path().join("roll");
    ok(&[
        "rollout",
        "--checkpoint",
        p(&run.join("checkpoint.dgkc")),
        "--data",
        p(&data.join("val.dgk")),
        "--out",
        p(&roll),
        "--samples",
        "6",
        "--modes",
        "2",
    ]);
    let set: TrajectorySet = serde_json::from_str(&std::fs::read_to_string(roll.join("trajectories.json")).unwrap()).unwrap();
    assert_eq!((set.samples.len(), set.modes.len(), set.modes[0].len()), (6, 2, 10));
    assert!(std::fs::read_to_string(roll.join("overhead.svg")).unwrap().contains(r#"stroke="red""#));

    let svg = t.path().join("plots/scene.svg");
    ok(&["plot", "scene", "--data", p(&data.join("val.dgk")), "--trajectories", p(&roll.join("trajectories.json")), "--out", p(&svg)]);
    assert!(std::fs::read_to_string(&svg).unwrap().contains(r#"stroke="blue""#));
    assert_eq!(json(&t.path().join("plots/run_manifest.json"))["subcommand"], "plot scene");
}
