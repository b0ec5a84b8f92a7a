use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pcn_cli::{cmd_bench, cmd_train, BenchArgs, TrainArgs};
use pcn_core::cascade::Cascade;
use pcn_core::geometry::io::{read_image, write_ppm};
use pcn_core::geometry::ImageBuffer;

fn pcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcn"))
        .args(args)
        .env_remove("PCN_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Untrained model written through the real `train` path.
fn fresh_model(dir: &Path) -> PathBuf {
    let model = dir.join("fresh.pcn");
    let out = pcn(&["train", "--out", s(&model), "--iters", "0", "--corpus-size", "20", "--held-out", "10"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    model
}

fn gray(path: &Path, w: usize, h: usize) {
    let img = ImageBuffer::from_pixels(w, h, 3, vec![0.5; w * h * 3]).unwrap();
    write_ppm(path, &img).unwrap();
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&pcn(&[])), 1);
    assert_eq!(code(&pcn(&["frobnicate"])), 1);
    assert_eq!(code(&pcn(&["train"])), 1);
    assert_eq!(code(&pcn(&["train", "--out", "x.pcn", "--iters", "many"])), 1);
    assert_eq!(code(&pcn(&["--help"])), 0);
}

#[test]
fn zero_iterations_write_the_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let model = fresh_model(dir.path());
    assert_eq!(Cascade::load(&model).unwrap(), Cascade::new(1));
    // header only
    let log = fs::read_to_string(dir.path().join("fresh.pcn.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.starts_with("iteration,"));
}

#[test]
fn unwritable_model_path_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("missing").join("m.pcn");
    let log = dir.path().join("log.csv");
    let out = pcn(&["train", "--out", s(&model), "--log", s(&log), "--iters", "0", "--corpus-size", "10"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergence_is_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.pcn");
    let out = pcn(&["train", "--out", s(&model), "--iters", "50", "--corpus-size", "20", "--lr", "1e12"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pcn"))
        .args(["gen", "--out", s(&dir.path().join("c")), "--n", "2"])
        .env("PCN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn faceless_image_gives_an_empty_record() {
    let dir = tempfile::tempdir().unwrap();
    let model = fresh_model(dir.path());
    let img = dir.path().join("blank.ppm");
    gray(&img, 96, 80);
    let json = dir.path().join("out.jsonl");
    let out = pcn(&["detect", "--model", s(&model), "--in", s(&img), "--json", s(&json)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&json).unwrap();
    let rec: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(rec["faces"].as_array().unwrap().len(), 0);
    assert_eq!(rec["path"], s(&img));
}

#[test]
fn detection_keeps_input_order_and_reports_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let model = fresh_model(dir.path());
    let names: Vec<PathBuf> = (0..4).map(|i| dir.path().join(format!("im{i}.ppm"))).collect();
    for (i, p) in names.iter().enumerate() {
        gray(p, 50 + 10 * i, 60);
    }
    let missing = dir.path().join("nope.ppm");
    let annotated = dir.path().join("annotated");
    let json = dir.path().join("a.jsonl");
    let mut args = vec!["detect", "--model", s(&model), "--json", s(&json), "--annotate", s(&annotated), "--in"];
    args.extend(names.iter().map(|p| s(p)));
    args.push(s(&missing));
    let out = pcn(&args);
    assert_eq!(code(&out), 2);
    let paths: Vec<String> = fs::read_to_string(&json)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["path"].as_str().unwrap().to_string())
        .collect();
    let want: Vec<String> = names.iter().map(|p| s(p).to_string()).collect();
    assert_eq!(paths, want);
    for i in 0..4 {
        let copy = read_image(&annotated.join(format!("im{i}.ppm"))).unwrap();
        assert_eq!((copy.width(), copy.height()), (50 + 10 * i, 60));
    }

    // same inputs, same bytes
    let again = dir.path().join("b.jsonl");
    let mut args2 = vec!["detect", "--model", s(&model), "--json", s(&again), "--in"];
    args2.extend(names.iter().map(|p| s(p)));
    assert_eq!(code(&pcn(&args2)), 0);
    let first = fs::read_to_string(&json).unwrap();
    assert_eq!(fs::read_to_string(&again).unwrap(), first);
}

#[test]
fn missing_model_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.ppm");
    gray(&img, 40, 40);
    let json = dir.path().join("o.jsonl");
    let out = pcn(&["detect", "--model", s(&dir.path().join("none.pcn")), "--in", s(&img), "--json", s(&json)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_needs_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let model = fresh_model(dir.path());
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&pcn(&["eval", "--model", s(&model), "--data", s(&empty)])), 2);

    let corpus = dir.path().join("corpus");
    assert_eq!(code(&pcn(&["gen", "--out", s(&corpus), "--n", "6", "--seed", "3"])), 0);
    let out = pcn(&["eval", "--model", s(&model), "--data", s(&corpus), "--fp-budget", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("recall (down)"), "{text}");
    assert!(text.contains("false-positive budget: 0"), "{text}");
}

#[test]
fn single_run_bench_prints_one_timing_line() {
    let dir = tempfile::tempdir().unwrap();
    let model = fresh_model(dir.path());
    let out = pcn(&["bench", "--model", s(&model), "--runs", "1", "--width", "160", "--height", "120", "--faces", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("run ")).count(), 1);
    assert!(text.contains("orientation frames built per image: 1.00"), "{text}");
}

#[test]
fn doubling_the_stride_quarters_the_first_stage() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.pcn");
    let mut args = TrainArgs::new(model.clone(), 2, 0);
    args.corpus_size = 10;
    args.held_out = 10;
    cmd_train(&args).unwrap();
    let bench = |stride: f64| {
        let r = cmd_bench(&BenchArgs {
            model: model.clone(),
            width: 640,
            height: 480,
            min_face: 40.0,
            runs: 1,
            stride,
            faces: 0,
            seed: 7,
        })
        .unwrap();
        r.mean_stage_inputs
    };
    let (fine, coarse) = (bench(4.0), bench(8.0));
    let ratio = fine[0] / coarse[0];
    assert!((3.5..=4.5).contains(&ratio), "{} / {} = {ratio}", fine[0], coarse[0]);
    for counts in [fine, coarse] {
        assert!(counts[0] >= counts[1] && counts[1] >= counts[2], "{counts:?}");
    }
}
