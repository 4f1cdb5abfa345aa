use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_graphreport"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn graphreport")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Errors carry a one-line `ERROR <code>: ` prefix after any log output.
fn has_error_line(out: &Output, code: i32) -> bool {
    stderr(out).lines().any(|l| l.starts_with(&format!("ERROR {code}: ")))
}

fn gen_data(dir: &Path, name: &str, seed: &str) -> String {
    let path = dir.join(name).to_string_lossy().into_owned();
    let out = run(&["gen-data", "--videos", "10", "--frames", "12", "--seed", seed, "--out", &path]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    path
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_data(dir.path(), "a.jsonl", "1");
    let b = gen_data(dir.path(), "b.jsonl", "1");
    let c = gen_data(dir.path(), "c.jsonl", "2");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 120);
    assert!(stderr(&run(&["gen-data", "--out", &dir.path().join("d.jsonl").to_string_lossy()])).contains("seed 0"));
}

#[test]
fn scoring_a_file_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "d.jsonl", "3");
    let before = fs::read(&data).unwrap();
    let report = dir.path().join("score.json");
    let out = run(&["score", "--cand", &data, "--ref", &data, "--out", &report.to_string_lossy()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["bleu1"], 1.0);
    assert_eq!(v["exact_match"], 1.0);
    assert_eq!(v["samples"], 120);
    assert_eq!(fs::read(&data).unwrap(), before, "input was modified");
}

#[test]
fn track_emits_one_line_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "d.jsonl", "4");
    let tracked = dir.path().join("t.jsonl");
    let out = run(&["track", "--data", &data, "--window", "3", "--out", &tracked.to_string_lossy()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&tracked).unwrap();
    assert_eq!(text.lines().count(), 120);
    assert!(text.contains("\"tracked\""), "dropout 0.2 over 120 frames should need tracking");
}

#[test]
fn train_then_evaluate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "d.jsonl", "5");
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"epochs": 2, "batch_size": 16, "learning_rate": 0.001,
            "model": {"feature_width": 6, "ip_hidden": [8, 6],
                      "decoder": {"d_model": 8, "heads": 2, "encoder_layers": 1,
                                  "decoder_layers": 1, "ff_width": 8, "max_len": 12}}}"#,
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let out = run(&["train", "--config", &cfg.to_string_lossy(), "--data", &data, "--out", &run_dir.to_string_lossy()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["model.safetensors", "run.json", "candidates.jsonl"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    assert!(stderr(&out).contains("seed 0"));

    let report = dir.path().join("eval.json");
    let cands = dir.path().join("cands.jsonl");
    let out = run(&[
        "evaluate",
        "--ckpt",
        &run_dir.to_string_lossy(),
        "--data",
        &data,
        "--split",
        "val",
        "--out",
        &report.to_string_lossy(),
        "--candidates",
        &cands.to_string_lossy(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["samples"], 12);
    // the held-out candidates written by train match those from evaluate
    assert_eq!(fs::read(run_dir.join("candidates.jsonl")).unwrap(), fs::read(&cands).unwrap());

    // rescoring against the held-out references reproduces the evaluation
    let held_out: String = fs::read_to_string(&data)
        .unwrap()
        .lines()
        .filter(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["video"] == 9)
        .map(|l| format!("{l}\n"))
        .collect();
    let refs = dir.path().join("refs.jsonl");
    fs::write(&refs, held_out).unwrap();
    let rescored = dir.path().join("rescored.json");
    let out = run(&["score", "--cand", &cands.to_string_lossy(), "--ref", &refs.to_string_lossy(), "--out", &rescored.to_string_lossy()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let w: serde_json::Value = serde_json::from_slice(&fs::read(&rescored).unwrap()).unwrap();
    assert_eq!(w, v);

    // training frames have no candidate
    let out = run(&["score", "--cand", &cands.to_string_lossy(), "--ref", &data, "--out", &rescored.to_string_lossy()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(has_error_line(&out, 2));
}

#[test]
fn every_subcommand_documents_its_flags() {
    let cases: [(&str, &[&str]); 6] = [
        ("gen-data", &["--videos", "--frames", "--seed", "--dropout", "--out"]),
        ("track", &["--data", "--window", "--out"]),
        ("train", &["--config", "--data", "--seed", "--out"]),
        ("evaluate", &["--ckpt", "--data", "--split", "--beam", "--out"]),
        ("score", &["--cand", "--ref", "--out"]),
        ("ablate", &["--config", "--data", "--grid", "--seeds", "--out"]),
    ];
    for (sub, flags) in cases {
        let out = run(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        let text = String::from_utf8_lossy(&out.stdout);
        for f in flags {
            assert!(text.contains(f), "{sub} --help lacks {f}");
        }
    }
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
}

#[test]
fn malformed_invocations_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "d.jsonl", "6");
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let bad_json = p("bad.jsonl");
    fs::write(&bad_json, "{\"video\": 0, \"frame\": 0\n").unwrap();
    let unordered = p("unordered.jsonl");
    let lines: Vec<&str> = fs::read_to_string(&data).unwrap().leak().lines().take(2).collect();
    fs::write(&unordered, format!("{}\n{}\n", lines[1], lines[0])).unwrap();
    let bad_cfg = p("bad_cfg.json");
    fs::write(&bad_cfg, r#"{"epochs": 1, "learnig_rate": 0.1}"#).unwrap();
    let zero_cfg = p("zero_cfg.json");
    fs::write(&zero_cfg, r#"{"batch_size": 0}"#).unwrap();

    let cases: Vec<(Vec<String>, i32)> = vec![
        (vec![], 1),
        (vec!["frobnicate".into()], 1),
        (vec!["gen-data".into()], 1),
        (vec!["gen-data".into(), "--out".into(), p("x"), "--bogus".into()], 1),
        (vec!["gen-data".into(), "--videos".into(), "many".into(), "--out".into(), p("x")], 1),
        (vec!["gen-data".into(), "--dropout".into(), "0.9".into(), "--out".into(), p("x")], 1),
        (vec!["track".into(), "--data".into(), data.clone(), "--format".into(), "xml".into(), "--out".into(), p("x")], 1),
        (vec!["train".into(), "--config".into(), bad_cfg, "--data".into(), data.clone(), "--out".into(), p("r")], 1),
        (vec!["train".into(), "--config".into(), zero_cfg, "--data".into(), data.clone(), "--out".into(), p("r")], 1),
        (vec!["evaluate".into(), "--ckpt".into(), p("nope"), "--data".into(), data.clone(), "--split".into(), "test".into(), "--out".into(), p("x")], 1),
        (vec!["ablate".into(), "--data".into(), data.clone(), "--grid".into(), "table9".into(), "--out".into(), p("a")], 1),
        (vec!["track".into(), "--data".into(), p("missing.jsonl"), "--out".into(), p("x")], 2),
        (vec!["track".into(), "--data".into(), bad_json.clone(), "--out".into(), p("x")], 2),
        (vec!["track".into(), "--data".into(), unordered, "--out".into(), p("x")], 2),
        (vec!["evaluate".into(), "--ckpt".into(), p("nope"), "--data".into(), data.clone(), "--out".into(), p("x")], 2),
        (vec!["evaluate".into(), "--ckpt".into(), data.clone(), "--data".into(), data.clone(), "--out".into(), p("x")], 2),
        (vec!["score".into(), "--cand".into(), bad_json, "--ref".into(), data.clone(), "--out".into(), p("x")], 2),
    ];
    for (args, expected) in cases {
        let out = bin().args(&args).output().unwrap();
        assert_eq!(code(&out), expected, "{args:?}: {}", stderr(&out));
        assert!(has_error_line(&out, expected), "{args:?}: {}", stderr(&out));
    }
}
