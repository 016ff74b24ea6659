use std::path::Path;
use std::process::{Command, Output};

fn avitmp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avitmp")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "[train]\nsteps = 2\nsequences = 1\n\n[world]\nlength = 6\n\n[eval]\nseeds = [0]\nsequences = 1\n",
    )
    .unwrap();
    p(&path)
}

#[test]
fn oracle_tracking_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let seq = p(&dir.path().join("seq"));
    assert_eq!(code(&avitmp(&["--mode", "generate", "--seed", "5", "--out", &seq])), 0);
    let out = dir.path().join("track");
    let o = avitmp(&["--mode", "track", "--oracle", "--sequence", &seq, "--out", &p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.json")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    assert_eq!(v["auc"], 1.0);
    assert_eq!(std::fs::read_to_string(out.join("diagnostics.jsonl")).unwrap().lines().count(), 39);
}

#[test]
fn cycletrack_switch_only_touches_correction_frames() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("world.toml");
    std::fs::write(&cfg, "[world]\nobjects = 3\nsimilarity = 0.9\n").unwrap();
    let seq = p(&dir.path().join("seq"));
    avitmp(&["--mode", "generate", "--config", &p(&cfg), "--seed", "1", "--out", &seq]);
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["--mode", "track", "--oracle", "--sequence", &seq];
        args.extend_from_slice(extra);
        let o = p(&out);
        args.extend_from_slice(&["--out", &o]);
        assert_eq!(code(&avitmp(&args)), 0);
        std::fs::read_to_string(out.join("diagnostics.jsonl")).unwrap()
    };
    let on = run("on", &[]);
    let off = run("off", &["--disable-cycletrack"]);
    for (a, b) in on.lines().zip(off.lines()) {
        if a != b {
            let v: serde_json::Value = serde_json::from_str(a).unwrap();
            assert_eq!(v["corrected"], true, "{a} vs {b}");
        }
    }
}

#[test]
fn usage_and_io_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(&dir.path().join("x"));
    let o = avitmp(&["--mode", "track", "--oracle", "--sequence", "/no/such/sequence", "--out", &out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/sequence"));
    assert_eq!(code(&avitmp(&["--mode", "train", "--disable-dfu", "--out", &out])), 2);
    assert_eq!(code(&avitmp(&["--mode", "track", "--paper-scale", "--out", &out])), 2);
    assert_eq!(code(&avitmp(&["--mode", "fly", "--out", &out])), 2);
    assert_eq!(code(&avitmp(&["--mode", "ablate", "--variants", "+nothing", "--out", &out])), 2);

    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"NOPE and some more bytes").unwrap();
    let seq = p(&dir.path().join("seq"));
    avitmp(&["--mode", "generate", "--config", &small_config(dir.path()), "--out", &seq]);
    let o = avitmp(&["--mode", "track", "--checkpoint", &p(&bad), "--sequence", &seq, "--out", &out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn ablation_rows_come_in_request_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("ab");
    let o = avitmp(&["--mode", "ablate", "--config", &cfg, "--out", &p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(table.lines().next().unwrap(), "variant,auc,failures,steps_per_s");
    assert_eq!(names, ["base", "+jse", "+adaptor", "+both"]);
    assert_eq!(std::fs::read_to_string(out.join("ablation.csv")).unwrap().lines().count(), 5);

    let one = dir.path().join("one");
    let o = avitmp(&["--mode", "ablate", "--config", &cfg, "--disable-adaptor", "--out", &p(&one)]);
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("+jse,"));
}

#[test]
fn injected_fault_fails_the_gradient_suite() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good");
    let o = avitmp(&["--mode", "gradcheck", "--grad-seeds", "1", "--out", &p(&good)]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for block in avitmp_core::gradsuite::BLOCKS {
        let hits = text.lines().filter(|l| l.split_whitespace().next() == Some(block)).count();
        assert_eq!(hits, 1, "{block}");
    }
    for fault in ["gelu", "softmax", "matmul"] {
        let o = avitmp(&["--mode", "gradcheck", "--grad-seeds", "1", "--fault", fault, "--out", &p(&dir.path().join(fault))]);
        assert_eq!(code(&o), 1, "{fault}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("gradient suite: FAIL"));
    }
}

#[test]
fn manifest_records_inputs_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("train");
    assert_eq!(code(&avitmp(&["--mode", "train", "--config", &cfg, "--seed", "7", "--out", &p(&out)])), 0);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["invocation"]["seed"], 7);
    assert_eq!(m["invocation"]["config"]["train"]["steps"], 2);
    let names: Vec<&str> = m["artifacts"].as_array().unwrap().iter().map(|a| a["path"].as_str().unwrap()).collect();
    assert_eq!(names, ["checkpoint.bin", "loss.csv"]);
    let bytes = std::fs::read(out.join("loss.csv")).unwrap();
    assert_eq!(m["artifacts"][1]["sha256"], avitmp_cli::sha256_hex(&bytes));

    // a changed input refuses to replay
    let seq = dir.path().join("seq");
    avitmp(&["--mode", "generate", "--config", &cfg, "--out", &p(&seq)]);
    let tr = dir.path().join("tr");
    let ck = p(&out.join("checkpoint.bin"));
    assert_eq!(code(&avitmp(&["--mode", "track", "--checkpoint", &ck, "--sequence", &p(&seq), "--out", &p(&tr)])), 0);
    std::fs::write(seq.join("gt.csv"), "x").unwrap();
    let o = avitmp(&["--from-manifest", &p(&tr.join("manifest.json")), "--out", &p(&dir.path().join("again"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("changed"));
}

#[test]
fn zero_step_training_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("zero.toml");
    std::fs::write(&cfg, "[train]\nsteps = 0\n").unwrap();
    let out = dir.path().join("t");
    assert_eq!(code(&avitmp(&["--mode", "train", "--config", &p(&cfg), "--seed", "3", "--out", &p(&out)])), 0);
    let init = avitmp_core::Model::new(avitmp_core::ModelConfig::desk(), 3).unwrap();
    assert_eq!(
        std::fs::read(out.join("checkpoint.bin")).unwrap(),
        avitmp_core::numerics::checkpoint::checkpoint_bytes(&init.store)
    );
    assert_eq!(std::fs::read_to_string(out.join("loss.csv")).unwrap(), "step,lr,loss,cls,reg\n");
}
