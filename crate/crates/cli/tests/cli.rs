use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use gdm::checkpoint::Checkpoint;
use gdm_cli::{run, CliError};
use tempfile::TempDir;

fn gdm(args: &[&str]) -> Result<(), CliError> {
    let mut all = vec!["gdm"];
    all.extend_from_slice(args);
    run(all)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn metrics(path: &Path) -> BTreeMap<String, f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,value"));
    lines
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

fn dataset(dir: &Path, t: usize) -> PathBuf {
    let out = dir.join("data");
    gdm(&["generate", "nascar", "--T", &t.to_string(), "--seed", "3", "--out", s(&out)]).unwrap();
    out
}

fn trained(dir: &Path, data: &Path, steps: usize) -> PathBuf {
    let ck = dir.join("model.json");
    let glob = data.join("trial_0.csv");
    gdm(&["train", "--data", s(&glob), "--steps", &steps.to_string(), "--seed", "1", "--out", s(&ck)]).unwrap();
    ck
}

#[test]
fn default_generate_writes_two_trials_of_a_thousand_steps() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    gdm(&["generate", "nascar", "--out", s(&out)]).unwrap();
    for i in 0..2 {
        let text = fs::read_to_string(out.join(format!("trial_{i}.csv"))).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert_eq!(header.split(',').count(), 1 + 10 + 1);
        assert_eq!(lines.count(), 1000);
    }
    assert!(!out.join("trial_2.csv").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["T"], 1000);
    assert_eq!(manifest["K"], 4);
    assert_eq!(manifest["files"].as_array().unwrap().len(), 2);
}

#[test]
fn generate_rejects_bad_flags() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    for bad in [
        vec!["--T", "0"],
        vec!["--K", "3"],
        vec!["--variant", "wobbly"],
        vec!["--min-speed", "0"],
        vec!["--trials", "0"],
    ] {
        let mut args = vec!["generate", "nascar", "--out", s(&out)];
        args.extend(bad.iter());
        assert!(matches!(gdm(&args), Err(CliError::Usage(_))), "{bad:?}");
    }
    assert!(matches!(gdm(&["generate", "nascar"]), Err(CliError::Usage(_))));
}

#[test]
fn generate_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        gdm(&["generate", "nascar", "--variant", "soft-sticky", "--T", "200", "--seed", "9", "--out", s(out)]).unwrap();
    }
    for f in ["trial_0.csv", "trial_1.csv", "states_0.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    gdm(&["generate", "nascar", "--variant", "soft-sticky", "--T", "200", "--seed", "10", "--out", s(&c)]).unwrap();
    assert_ne!(fs::read(a.join("trial_0.csv")).unwrap(), fs::read(c.join("trial_0.csv")).unwrap());
}

#[test]
fn train_eval_predict_and_convert_run_end_to_end() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 300);
    let before: Vec<Vec<u8>> = ["trial_0.csv", "trial_1.csv"].iter().map(|f| fs::read(data.join(f)).unwrap()).collect();

    let ck = trained(dir.path(), &data, 150);
    let loaded = Checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.step, 150);
    assert!(loaded.metrics.contains_key("r2_train") && loaded.metrics.contains_key("elbo_final"));
    let trace = fs::read_to_string(dir.path().join("model.json.trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 151);

    let ev = dir.path().join("eval");
    gdm(&[
        "eval", "--ckpt", s(&ck), "--train-data", s(&data.join("trial_0.csv")),
        "--test-data", s(&data.join("trial_1.csv")), "--knn-k", "5", "--out", s(&ev),
    ])
    .unwrap();
    let m = metrics(&ev.join("metrics.csv"));
    for key in ["r2_train", "r2_test", "state_accuracy"] {
        assert!(m[key].is_finite() && m[key] <= 1.0, "{key} = {}", m[key]);
    }
    assert!((0.0..=1.0).contains(&m["state_accuracy"]));
    let confusion = fs::read_to_string(ev.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().next(), Some("true,predicted,count"));
    let total: usize = confusion.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 300);
    assert!(fs::read_to_string(ev.join("usage.csv")).unwrap().starts_with("class,rank,state,ratio"));
    let states = fs::read_to_string(ev.join("states_test_0.csv")).unwrap();
    assert_eq!(states.lines().next(), Some("t,z_0,z_1,z_2,z_3"));
    assert_eq!(states.lines().count(), 301);

    let env = dir.path().join("env.csv");
    let pm = dir.path().join("pm.csv");
    let predict = |out: &Path| {
        gdm(&[
            "predict", "--ckpt", s(&ck), "--data", s(&data.join("trial_1.csv")), "--horizon", "2",
            "--rollouts", "8", "--seed", "4", "--out", s(out), "--metrics", s(&pm),
        ])
    };
    predict(&env).unwrap();
    let text = fs::read_to_string(&env).unwrap();
    assert_eq!(text.lines().next(), Some("horizon,start,dim,mean,std"));
    assert_eq!(text.lines().count(), 1 + 2 * 300 * 10);
    let pmv = metrics(&pm);
    assert!(pmv.contains_key("coverage_h1") && pmv.contains_key("mean_width_h2"));
    let again = dir.path().join("env2.csv");
    predict(&again).unwrap();
    assert_eq!(fs::read(&env).unwrap(), fs::read(&again).unwrap());

    let m3 = dir.path().join("m3.json");
    let back = dir.path().join("back.json");
    gdm(&["convert", "--ckpt", s(&ck), "--out", s(&m3)]).unwrap();
    gdm(&["convert", "--ckpt", s(&m3), "--out", s(&back)]).unwrap();
    assert_eq!(Checkpoint::load(&m3).unwrap().model.kind(), "mixture3");
    assert_eq!(Checkpoint::load(&back).unwrap().model.kind(), "gdm2");

    let after: Vec<Vec<u8>> = ["trial_0.csv", "trial_1.csv"].iter().map(|f| fs::read(data.join(f)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn eval_on_training_data_matches_the_snapshot() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 300);
    let ck = trained(dir.path(), &data, 300);
    let snapshot = Checkpoint::load(&ck).unwrap().metrics["r2_train"];
    let ev = dir.path().join("eval");
    let train = data.join("trial_0.csv");
    gdm(&["eval", "--ckpt", s(&ck), "--train-data", s(&train), "--test-data", s(&train), "--seed", "8", "--out", s(&ev)])
        .unwrap();
    let m = metrics(&ev.join("metrics.csv"));
    assert!((m["r2_test"] - snapshot).abs() <= 0.02, "{} vs {snapshot}", m["r2_test"]);
}

#[test]
fn resumed_training_continues_the_trace() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 150);
    let glob = data.join("trial_*.csv");
    let first = dir.path().join("first.json");
    let second = dir.path().join("second.json");
    let straight = dir.path().join("straight.json");
    gdm(&["train", "--data", s(&glob), "--steps", "40", "--seed", "5", "--out", s(&first)]).unwrap();
    gdm(&["train", "--data", s(&glob), "--steps", "90", "--resume", s(&first), "--out", s(&second)]).unwrap();
    gdm(&["train", "--data", s(&glob), "--steps", "90", "--seed", "5", "--out", s(&straight)]).unwrap();

    let resumed = Checkpoint::load(&second).unwrap();
    let steps: Vec<usize> = resumed.trace.iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=90).collect::<Vec<_>>());
    let direct = Checkpoint::load(&straight).unwrap();
    assert_eq!(resumed.model, direct.model);
    assert_eq!(resumed.trace, direct.trace);

    assert!(matches!(
        gdm(&["train", "--data", s(&glob), "--resume", s(&first), "--out", s(&first)]),
        Err(CliError::Usage(_))
    ));
    assert!(matches!(
        gdm(&["train", "--data", s(&glob), "--resume", s(&first), "--K", "3", "--out", s(&second)]),
        Err(CliError::Usage(_))
    ));
}

#[test]
fn train_rejects_bad_inputs() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 60);
    let f = data.join("trial_0.csv");
    let out = dir.path().join("m.json");
    assert!(matches!(gdm(&["train", "--data", s(&f), "--D", "11", "--out", s(&out)]), Err(CliError::Usage(_))));
    assert!(matches!(gdm(&["train", "--data", s(&f), "--variant", "cubic", "--out", s(&out)]), Err(CliError::Usage(_))));
    assert!(matches!(gdm(&["train", "--data", s(&f), "--steps", "0", "--out", s(&out)]), Err(CliError::Usage(_))));
    let missing = dir.path().join("nothing_*.csv");
    assert!(matches!(gdm(&["train", "--data", s(&missing), "--out", s(&out)]), Err(CliError::Failed(_))));
    assert!(matches!(gdm(&["train", "--data", s(&f), "--out", s(&f)]), Err(CliError::Usage(_))));
    assert!(!out.exists());
}

#[test]
fn divergence_saves_the_last_good_state_and_fails() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 60);
    let out = dir.path().join("m.json");
    let r = gdm(&["train", "--data", s(&data.join("trial_0.csv")), "--steps", "50", "--lr", "1e300", "--out", s(&out)]);
    match r {
        Err(CliError::Failed(msg)) => assert!(msg.contains("last good state"), "{msg}"),
        other => panic!("expected a failure, got {other:?}"),
    }
    let ck = Checkpoint::load(&out).unwrap();
    assert!(ck.step < 50);
}

#[test]
fn eval_and_predict_reject_bad_flags() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 80);
    let ck = trained(dir.path(), &data, 5);
    let (a, b) = (data.join("trial_0.csv"), data.join("trial_1.csv"));
    let ev = dir.path().join("ev");
    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--ckpt", s(&ck), "--train-data", s(&a), "--test-data", s(&b), "--out", s(&ev)];
        args.extend_from_slice(extra);
        gdm(&args)
    };
    assert!(matches!(eval(&["--knn-k", "0"]), Err(CliError::Usage(_))));
    assert!(eval(&["--knn-k", "1"]).is_ok());

    let env = dir.path().join("env.csv");
    let predict = |extra: &[&str]| {
        let mut args = vec!["predict", "--ckpt", s(&ck), "--data", s(&b), "--out", s(&env)];
        args.extend_from_slice(extra);
        gdm(&args)
    };
    assert!(matches!(predict(&["--rollouts", "1"]), Err(CliError::Usage(_))));
    assert!(matches!(predict(&["--horizon", "0"]), Err(CliError::Usage(_))));
    assert!(predict(&["--rollouts", "2"]).is_ok());
}

#[test]
fn eval_needs_labels() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 80);
    let ck = trained(dir.path(), &data, 5);
    let text = fs::read_to_string(data.join("trial_1.csv")).unwrap();
    let unlabelled: String = text
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
        .collect();
    let f = dir.path().join("unlabelled.csv");
    fs::write(&f, unlabelled).unwrap();
    let r = gdm(&[
        "eval", "--ckpt", s(&ck), "--train-data", s(&data.join("trial_0.csv")), "--test-data", s(&f),
        "--out", s(&dir.path().join("ev")),
    ]);
    match r {
        Err(CliError::Failed(msg)) => assert!(msg.contains("label"), "{msg}"),
        other => panic!("expected a failure, got {other:?}"),
    }
}

#[test]
fn the_binary_reports_one_line_errors_with_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_gdm");
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");

    let usage = Command::new(bin).args(["generate", "nascar", "--T", "0", "--out", s(&out)]).output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
    let err = String::from_utf8(usage.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));

    let unknown = Command::new(bin).args(["frobnicate"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));
    assert_eq!(String::from_utf8(unknown.stderr).unwrap().lines().count(), 1);

    let missing = Command::new(bin)
        .args(["convert", "--ckpt", s(&dir.path().join("none.json")), "--out", s(&dir.path().join("x.json"))])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(String::from_utf8(missing.stderr).unwrap().lines().count(), 1);

    let ok = Command::new(bin)
        .args(["generate", "nascar", "--T", "20", "--out", s(&out)])
        .env("GDM_SEED", "12")
        .output()
        .unwrap();
    assert!(ok.status.success());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 12);
}
