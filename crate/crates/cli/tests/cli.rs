use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn gskit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gskit")).args(args).current_dir(cwd).env("GSKIT_LOG", "error").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every file under `dir` except the run manifest, with its bytes.
fn artifacts(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run_manifest.json" {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    for d in ["a", "b"] {
        ok(&gskit(&["gen", "--out", d, "--num", "10", "--seed", "7"], tmp.path()));
    }
    let (a, b) = (artifacts(&tmp.path().join("a")), artifacts(&tmp.path().join("b")));
    assert_eq!(a.len(), 10 * 6);
    assert_eq!(a, b);
    let m = json(&tmp.path().join("a/run_manifest.json"));
    assert_eq!(m["subcommand"], "gen");
    assert_eq!(m["seed"], 7);
    assert!(m["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["config"]["gen"]["preset"], "clutter");
}

#[test]
fn gen_different_seed_differs() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&gskit(&["gen", "--out", "a", "--num", "2", "--seed", "1"], tmp.path()));
    ok(&gskit(&["gen", "--out", "b", "--num", "2", "--seed", "2"], tmp.path()));
    assert_ne!(artifacts(&tmp.path().join("a")), artifacts(&tmp.path().join("b")));
}

#[test]
fn validation_errors_exit_one_and_name_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gskit(&["train", "--out", "t"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--data"));

    let out = gskit(&["frobnicate"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));

    let out = gskit(&["gen", "--out", "d", "--bogus"], tmp.path());
    assert_eq!(out.status.code(), Some(1));

    ok(&gskit(&["gen", "--out", "d", "--num", "2", "--height", "32", "--width", "32"], tmp.path()));
    let out = gskit(&["train", "--data", "d", "--out", "t", "--lr", "0"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--lr"), "{}", stderr(&out));

    let out = gskit(&["gen", "--out", "e", "--jobs", "0"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--jobs"));

    let out = gskit(&["train", "--data", "missing", "--out", "t"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--data"));

    fs::write(tmp.path().join("bad.json"), "{ not json").unwrap();
    let out = gskit(&["gen", "--out", "f", "--config", "bad.json"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--config"));
}

#[test]
fn runtime_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("blocker"), "").unwrap();
    let out = gskit(&["gen", "--out", "blocker/sub", "--num", "1"], tmp.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn help_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gskit(&["--help"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen", "encode", "train", "eval", "ablate", "grasp-eval", "pick"] {
        assert!(text.contains(sub), "{sub}");
    }
}

fn read_pgm16(path: &Path) -> (usize, usize, Vec<u16>) {
    let bytes = fs::read(path).unwrap();
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields.push(String::from_utf8(bytes[start..i].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P5");
    assert_eq!(fields[3], "65535");
    let (w, h): (usize, usize) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    let data: Vec<u16> = bytes[i + 1..].chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    assert_eq!(data.len(), w * h);
    (h, w, data)
}

#[test]
fn encode_writes_mapped_maps_and_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&gskit(&["gen", "--out", "d", "--num", "1", "--height", "32", "--width", "40", "--preset", "depth-separated"], tmp.path()));
    fs::write(tmp.path().join("cc.json"), r#"{"R": 10.0, "alpha": 3.0, "variants": ["rel", "depth_dist", "dist25"]}"#).unwrap();
    ok(&gskit(&["encode", "--scene", "d/scene_00000", "--x", "12", "--y", "7", "--out", "m", "--config", "cc.json", "--beta", "2"], tmp.path()));
    let side = json(&tmp.path().join("m/encode.json"));
    assert_eq!(side["config"]["R"], 10.0);
    assert_eq!(side["config"]["alpha"], 3.0);
    assert_eq!(side["config"]["beta"], 2.0);
    assert_eq!(side["maps"].as_array().unwrap().len(), 4);
    assert!(!tmp.path().join("m/d_sim.pgm").exists());

    let (h, w, x) = read_pgm16(&tmp.path().join("m/x_rel.pgm"));
    assert_eq!((h, w), (32, 40));
    // zero maps to the middle of the range
    assert_eq!(x[7 * w + 12], 32768);
    // one pixel right of p: X_rel = 1 / R
    let expect = ((1.0 / 10.0 + 1.0) / 2.0 * 65535.0f64).round() as u16;
    assert_eq!(x[7 * w + 13], expect);
    let (_, _, y) = read_pgm16(&tmp.path().join("m/y_rel.pgm"));
    assert_eq!(y[0], ((-0.7 + 1.0) / 2.0 * 65535.0f64).round() as u16);

    let out = gskit(&["encode", "--scene", "d/scene_00000", "--x", "50", "--y", "7", "--out", "n"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--x"));
}

#[test]
fn grasp_eval_scores_ground_truth_against_itself() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&gskit(&["gen", "--out", "d", "--num", "3", "--height", "32", "--width", "32"], tmp.path()));
    ok(&gskit(&["grasp-eval", "--pred", "d", "--gt", "d", "--out", "g"], tmp.path()));
    let r = json(&tmp.path().join("g/grasp_eval.json"));
    assert_eq!(r["grasp_accuracy_percent"], 100.0);
    assert_eq!(r["num_scenes"], 3);
    assert_eq!(r["excluded_scenes"], Value::Array(vec![]));

    // an empty prediction file excludes its scene
    fs::create_dir(tmp.path().join("p")).unwrap();
    fs::write(tmp.path().join("p/a.jsonl"), "").unwrap();
    fs::write(tmp.path().join("p/b.jsonl"), fs::read(tmp.path().join("d/scene_00001/grasps.jsonl")).unwrap()).unwrap();
    fs::write(tmp.path().join("p/c.jsonl"), "").unwrap();
    ok(&gskit(&["grasp-eval", "--pred", "p", "--gt", "d", "--out", "g2"], tmp.path()));
    let r = json(&tmp.path().join("g2/grasp_eval.json"));
    assert_eq!(r["grasp_accuracy_percent"], 100.0);
    assert_eq!(r["excluded_scenes"], serde_json::json!([0, 2]));
}

#[test]
fn oracle_pick_clears_a_well_separated_scene() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&gskit(&["gen", "--out", "d", "--num", "1", "--preset", "well-separated", "--seed", "3"], tmp.path()));
    ok(&gskit(&["pick", "--scene", "d/scene_00000", "--oracle", "--out", "p", "--rerender", "well-separated"], tmp.path()));
    let o = json(&tmp.path().join("p/pick_outcome.json"));
    assert_eq!(o["remaining_objects"], 0);
    assert_eq!(o["failures"], 0);
    let trace = fs::read_to_string(tmp.path().join("p/pick_trace.jsonl")).unwrap();
    assert!(trace.lines().count() >= o["attempts"].as_u64().unwrap() as usize);
    let first: Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    for key in ["candidate", "refined", "centroid_offset", "decision"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let out = gskit(&["pick", "--scene", "d/scene_00000", "--out", "q"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_and_config_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&gskit(&["gen", "--out", "d", "--num", "6", "--height", "32", "--width", "32", "--preset", "depth-separated"], tmp.path()));
    fs::write(tmp.path().join("cfg.json"), r#"{"train": {"epochs": 2, "batch_size": 2}, "model": {"encoder_channels": [4, 8, 8]}}"#).unwrap();
    for d in ["t1", "t2"] {
        ok(&gskit(&["train", "--data", "d", "--out", d, "--config", "cfg.json", "--epochs", "1", "--seed", "3"], tmp.path()));
    }
    assert_eq!(artifacts(&tmp.path().join("t1")), artifacts(&tmp.path().join("t2")));
    let log = fs::read_to_string(tmp.path().join("t1/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1, "flag overrides config");
    let m = json(&tmp.path().join("t1/run_manifest.json"));
    assert_eq!(m["config"]["train"]["batch_size"], 2);
    assert_eq!(m["config"]["model"]["encoder_channels"], serde_json::json!([4, 8, 8]));
    assert_eq!(m["seed"], 3);
    assert_eq!(m["timing"]["epoch_seconds"].as_array().unwrap().len(), 1);

    ok(&gskit(&["train", "--data", "d", "--out", "t3", "--config", "cfg.json"], tmp.path()));
    assert_eq!(fs::read_to_string(tmp.path().join("t3/train_log.jsonl")).unwrap().lines().count(), 2);

    let out = gskit(&["eval", "--checkpoint", "t1/checkpoint.gskit", "--data", "d", "--out", "e", "--split", "all"], tmp.path());
    ok(&out);
    let r = json(&tmp.path().join("e/eval_report.json"));
    assert_eq!(r["num_scenes"], 6);
    assert!((0.0..=100.0).contains(&r["instance_iou"].as_f64().unwrap()));
    ok(&gskit(&["pick", "--scene", "d/scene_00000", "--checkpoint", "t1/checkpoint.gskit", "--out", "p"], tmp.path()));
}

#[test]
fn ablate_table_has_one_row_per_variant_and_repeats() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&gskit(&["gen", "--out", "d", "--num", "5", "--height", "32", "--width", "32", "--preset", "depth-separated"], tmp.path()));
    fs::write(tmp.path().join("cfg.json"), r#"{"train": {"epochs": 1, "batch_size": 2}, "model": {"encoder_channels": [4, 8, 8]}}"#).unwrap();
    let args = |out: &'static str| ["ablate", "--data", "d", "--out", out, "--variants", "none,relcc,depthcc", "--seeds", "1,2,3", "--config", "cfg.json"];
    let first = gskit(&args("a"), tmp.path());
    ok(&first);
    ok(&gskit(&args("b"), tmp.path()));
    assert_eq!(artifacts(&tmp.path().join("a")), artifacts(&tmp.path().join("b")));
    let t = json(&tmp.path().join("a/ablation.json"));
    let rows = t["rows"].as_array().unwrap();
    assert_eq!(rows.iter().map(|r| r["variant"].as_str().unwrap()).collect::<Vec<_>>(), ["none", "relcc", "depthcc"]);
    assert!(rows.iter().all(|r| r["ious"].as_array().unwrap().len() == 3));
    let stdout = String::from_utf8_lossy(&first.stdout);
    assert!(stdout.lines().next().unwrap().starts_with("variant"));
    assert_eq!(stdout, fs::read_to_string(tmp.path().join("a/ablation.txt")).unwrap());
}
