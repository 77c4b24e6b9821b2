use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use virotem::classical::{propose_candidates, CandidateCircle, ProposalParams};
use virotem::evalmetrics::read_report_csv;
use virotem::nnet::read_checkpoint;
use virotem::raster::read_image;
use virotem::synthgen::{load_corpus, SceneSpec};

fn virotem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_virotem")).args(args).output().unwrap()
}

fn ok_summary(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_of(out: &Output) -> Value {
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.lines().last().unwrap()).unwrap()
}

fn small_corpus(dir: &Path, n: usize) -> String {
    let spec = SceneSpec { n_intact: 3, n_broken: 1, n_small_debris: 4, n_large_debris: 0, n_artefacts: 0, ..SceneSpec::default() };
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let out = dir.join("corpus");
    let s = out.to_str().unwrap().to_string();
    let summary = ok_summary(&virotem(&[
        "synth", "--out", &s, "--n", &n.to_string(), "--seed", "4", "--spec", spec_path.to_str().unwrap(),
        "--width", "128", "--height", "128",
    ]));
    assert_eq!(summary["images"], n);
    s
}

#[test]
fn synth_writes_triples_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 3);
    let files = std::fs::read_dir(&corpus).unwrap().count();
    assert_eq!(files, 3 * 3 + 1);
    let items = load_corpus(&corpus).unwrap();
    assert_eq!(items.len(), 3);
    assert_eq!(items[0].image.width(), 128);
}

#[test]
fn propose_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 1);
    let image = format!("{corpus}/image_000.pgm");
    let out = dir.path().join("c.jsonl");
    let overlay = dir.path().join("o.png");
    ok_summary(&virotem(&[
        "propose", "--image", &image, "--out", out.to_str().unwrap(), "--overlay", overlay.to_str().unwrap(),
    ]));
    let got: Vec<CandidateCircle> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let want = propose_candidates(&read_image(&image).unwrap(), &ProposalParams::default()).unwrap();
    assert_eq!(got, want);
    assert!(overlay.is_file());
}

#[test]
fn train_infer_evaluate_crossval() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 4);
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let tiny = ["--epochs", "1", "--first-filters", "2", "--depth", "1"];

    let mut args = vec!["train", "--corpus", &corpus, "--out"];
    let ckpt = p("m.ckpt");
    args.push(&ckpt);
    args.extend(tiny);
    ok_summary(&virotem(&args));
    let model = read_checkpoint(&ckpt).unwrap();
    assert_eq!(model.cfg.first_filters, 2);
    let manifest: Value = serde_json::from_slice(&std::fs::read(p("m.json")).unwrap()).unwrap();
    assert_eq!(manifest["losses"].as_array().unwrap().len(), 1);

    let mask = p("mask.pgm");
    let inst = p("inst.jsonl");
    let image = format!("{corpus}/image_000.pgm");
    ok_summary(&virotem(&["infer", "--model", &ckpt, "--image", &image, "--out", &mask, "--instances", &inst]));
    assert_eq!(read_image(&mask).unwrap().width(), 128);
    assert!(Path::new(&inst).is_file());

    let eval_csv = p("eval.csv");
    ok_summary(&virotem(&["evaluate", "--corpus", &corpus, "--model", &ckpt, "--out", &eval_csv]));
    let rows = read_report_csv(&std::fs::read_to_string(&eval_csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[4].0, "pooled");

    let cv_csv = p("cv.csv");
    let cv_json = p("cv.json");
    let mut args = vec!["crossval", "--corpus", &corpus, "--k", "2", "--seed", "7", "--out", &cv_csv, "--json", &cv_json];
    args.extend(tiny);
    let summary = ok_summary(&virotem(&args));
    assert_eq!(summary["folds"], 2);
    let text = std::fs::read_to_string(&cv_csv).unwrap();
    let rows = read_report_csv(&text).unwrap();
    let names: Vec<_> = rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(names, ["fold_0", "fold_1", "average"]);
    let header = text.lines().nth(1).unwrap();
    assert_eq!(
        header,
        "name,tp75,tp50,tp25,fp,fn,precision_75,recall_75,f_75,precision_50c,recall_50c,f_50c,precision_25c,recall_25c,f_25c,dice,iou"
    );

    // same seed, same numbers
    let cv_csv2 = p("cv2.csv");
    let mut args = vec!["crossval", "--corpus", &corpus, "--k", "2", "--seed", "7", "--out", &cv_csv2];
    args.extend(tiny);
    ok_summary(&virotem(&args));
    assert_eq!(std::fs::read_to_string(&cv_csv2).unwrap(), text);
}

#[test]
fn config_file_supplies_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let spec = dir.path().join("spec.json");
    let few = SceneSpec { n_intact: 1, n_broken: 0, n_small_debris: 1, n_large_debris: 0, n_artefacts: 0, ..SceneSpec::default() };
    std::fs::write(&spec, serde_json::to_string(&few).unwrap()).unwrap();
    let cfg = dir.path().join("cfg.json");
    let body = serde_json::json!({ "out": out, "n": 2, "width": 64, "height": 64, "spec": spec });
    std::fs::write(&cfg, body.to_string()).unwrap();
    let s = ok_summary(&virotem(&["synth", "--config", cfg.to_str().unwrap(), "--n", "1"]));
    assert_eq!(s["images"], 1);
    assert_eq!(load_corpus(&out).unwrap()[0].image.width(), 64);
}

#[test]
fn failures_print_machine_readable_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.jsonl");
    let missing = virotem(&["propose", "--image", "/nonexistent/x.pgm", "--out", out.to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(error_of(&missing)["error"]["kind"], "io");

    let garbage = dir.path().join("g.pgm");
    std::fs::write(&garbage, b"P5 nonsense").unwrap();
    let bad = virotem(&["propose", "--image", garbage.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(error_of(&bad)["error"]["kind"], "format");

    let usage = virotem(&["synth"]);
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(error_of(&usage)["error"]["kind"], "usage");

    assert!(virotem(&["--help"]).status.success());
}
