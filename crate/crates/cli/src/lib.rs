//! The `pcn` command line: train the toy cascade, detect faces in images,
//! evaluate on an annotated corpus and benchmark throughput.
//!
//! Every command is a plain function returning a report so the same code
//! paths can be driven from tests.

pub mod annotate;

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use pcn_core::cascade::{Cascade, StageId};
use pcn_core::eval::{
    fp_budget, held_out_positives, orientation_metrics, per_orientation_recall, OrientationMetrics,
    RecallReport,
};
use pcn_core::geometry::io::{read_image, write_ppm};
use pcn_core::pipeline::{detect_with_stats, DetectConfig, DetectedFace};
use pcn_core::trainer::{
    gen_synthetic, synth, train_cascade, write_corpus, CascadeTrainConfig, DiskCorpus, ImageSource, SceneSpec,
    Subset, TrainingLog,
};
use pcn_core::PcnError;

/// Seed offset separating the held-out synthetic set from the training set.
pub const HELD_OUT_SEED_OFFSET: u64 = 0x5eed_0000;
/// Seed offset of the synthetic evaluation set, so `eval --seed N` never
/// scores images that `train --seed N` learned from.
pub const TEST_SEED_OFFSET: u64 = 0x7e57_0000;

/// The synthetic evaluation corpus for a seed.
pub fn test_corpus(size: usize, seed: u64) -> pcn_core::trainer::SyntheticCorpus {
    gen_synthetic(size, seed.wrapping_add(TEST_SEED_OFFSET))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<PcnError> for CliError {
    fn from(e: PcnError) -> Self {
        let kind = match e {
            PcnError::Divergence { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "pcn", version, about = "Rotation-invariant cascaded face detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train all three stages and write a model file.
    Train(TrainArgs),
    /// Detect faces in images and write one JSON line per image.
    Detect(DetectArgs),
    /// Report orientation accuracy and recall on an annotated corpus.
    Eval(EvalArgs),
    /// Time detection on synthetic frames and report candidate counts.
    Bench(BenchArgs),
    /// Write a synthetic annotated corpus to a directory.
    Gen(GenArgs),
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// SGD steps per stage.
    #[arg(long, default_value_t = 10_000)]
    pub iters: usize,
    /// `synthetic` or a corpus directory with annotations.jsonl.
    #[arg(long, default_value = "synthetic")]
    pub data: String,
    /// Number of generated training images when `--data synthetic`.
    #[arg(long, default_value_t = 5000)]
    pub corpus_size: usize,
    #[arg(long, default_value_t = pcn_core::trainer::DEFAULT_LR)]
    pub lr: f64,
    /// Training log CSV; defaults to the model path with `.csv` appended.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Held-out images used for the final metrics.
    #[arg(long, default_value_t = 150)]
    pub held_out: usize,
}

impl TrainArgs {
    pub fn new(out: PathBuf, seed: u64, iters: usize) -> Self {
        TrainArgs {
            out,
            seed,
            iters,
            data: "synthetic".into(),
            corpus_size: 5000,
            lr: pcn_core::trainer::DEFAULT_LR,
            log: None,
            held_out: 150,
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in", num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub json: PathBuf,
    /// Directory for copies of the inputs with detections drawn.
    #[arg(long)]
    pub annotate: Option<PathBuf>,
    #[arg(long, default_value_t = 40.0)]
    pub min_face: f64,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `synthetic` or a corpus directory with annotations.jsonl.
    #[arg(long, default_value = "synthetic")]
    pub data: String,
    /// Images generated when `--data synthetic`.
    #[arg(long, default_value_t = 200)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = synth::MIN_FACE)]
    pub min_face: f64,
    /// False positives allowed across the corpus; defaults to size / 28.
    #[arg(long)]
    pub fp_budget: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 640)]
    pub width: usize,
    #[arg(long, default_value_t = 480)]
    pub height: usize,
    #[arg(long, default_value_t = 40.0)]
    pub min_face: f64,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Stage-1 window step at network scale.
    #[arg(long, default_value_t = 4.0)]
    pub stride: f64,
    /// Faces drawn into each synthetic frame.
    #[arg(long, default_value_t = 3)]
    pub faces: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Clone, Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// Caps the worker pool at `PCN_THREADS` when set.
pub fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("PCN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("PCN_THREADS must be a positive integer, got {v:?}")))?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn open_source(data: &str) -> CliResult<Option<DiskCorpus>> {
    if data == "synthetic" {
        return Ok(None);
    }
    Ok(Some(DiskCorpus::open(Path::new(data))?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: PathBuf,
    pub log: PathBuf,
    pub metrics: OrientationMetrics,
    pub train_seconds: f64,
}

pub fn default_log_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".csv");
    PathBuf::from(s)
}

/// Trains stages 1 to 3, writes the model and an append-only CSV log, and
/// measures orientation metrics on held-out images. Log iterations count
/// continuously across stages.
pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainReport> {
    let log_path = args.log.clone().unwrap_or_else(|| default_log_path(&args.out));
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(|e| {
        CliError::data(format!("cannot write {}: {e}", log_path.display()))
    })?);
    // fail on an unwritable model path before spending time training
    fs::File::create(&args.out).map_err(|e| CliError::data(format!("cannot write {}: {e}", args.out.display())))?;

    let disk = open_source(&args.data)?;
    let synthetic;
    let held_synthetic;
    let (train_src, held_src): (Box<dyn ImageSource + '_>, Box<dyn ImageSource + '_>) = match &disk {
        Some(d) => {
            let n = d.len();
            let held = args.held_out.min(n / 2);
            (
                Box::new(Subset::new(d, (0..n - held).collect())),
                Box::new(Subset::new(d, (n - held..n).collect())),
            )
        }
        None => {
            synthetic = gen_synthetic(args.corpus_size, args.seed);
            held_synthetic = gen_synthetic(args.held_out, args.seed.wrapping_add(HELD_OUT_SEED_OFFSET));
            (Box::new(synthetic), Box::new(held_synthetic))
        }
    };

    let mut cfg = CascadeTrainConfig::desk(args.iters, args.seed);
    for s in cfg.stages.iter_mut() {
        s.optim.base_lr = args.lr;
    }
    let start = Instant::now();
    let mut offset = 0usize;
    let mut log_err = None;
    writeln!(log, "{}", TrainingLog::HEADER)?;
    let mut hook = |stage: StageId, stage_log: &TrainingLog| {
        let shifted = TrainingLog {
            rows: stage_log
                .rows
                .iter()
                .map(|r| pcn_core::trainer::LogRow {
                    iteration: r.iteration + offset,
                    ..*r
                })
                .collect(),
        };
        offset += stage_log.rows.len();
        if let Err(e) = shifted.write_csv(&mut log, false) {
            log_err.get_or_insert(e);
        }
        eprintln!(
            "{stage}: {} steps, final loss {:.4}, {:.1}s elapsed",
            stage_log.rows.len(),
            stage_log.tail_mean(100),
            start.elapsed().as_secs_f64()
        );
    };
    let (cascade, _) = train_cascade(train_src.as_ref(), &cfg, &mut hook)?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    log.flush()?;
    let train_seconds = start.elapsed().as_secs_f64();
    cascade.save(&args.out)?;

    let samples = held_out_positives(held_src.as_ref(), 2, args.seed.wrapping_add(HELD_OUT_SEED_OFFSET))?;
    let metrics = orientation_metrics(&cascade, &samples)?;
    Ok(TrainReport {
        model: args.out.clone(),
        log: log_path,
        metrics,
        train_seconds,
    })
}

/// One face in a detection record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub a: f64,
    pub b: f64,
    pub w: f64,
    pub theta: f64,
    pub score: f64,
}

impl From<&DetectedFace> for FaceRecord {
    fn from(d: &DetectedFace) -> Self {
        FaceRecord {
            a: d.bbox.a,
            b: d.bbox.b,
            w: d.bbox.w,
            theta: d.theta_rip,
            score: d.score,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub path: String,
    pub faces: Vec<FaceRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct DetectReport {
    pub records: Vec<DetectionRecord>,
    /// Inputs that could not be processed, with the reason.
    pub failures: Vec<(PathBuf, String)>,
}

fn detect_one(path: &Path, cascade: &Cascade, cfg: &DetectConfig, annotate_dir: Option<&Path>) -> CliResult<DetectionRecord> {
    let img = read_image(path)?;
    let (faces, _) = detect_with_stats(&img, cascade, cfg)?;
    if let Some(dir) = annotate_dir {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        write_ppm(&dir.join(format!("{stem}.ppm")), &annotate::draw_detections(&img, &faces))?;
    }
    Ok(DetectionRecord {
        path: path.display().to_string(),
        faces: faces.iter().map(FaceRecord::from).collect(),
    })
}

/// Detects faces in every input, in input order. Unreadable inputs are
/// reported in `failures` and produce no record.
pub fn cmd_detect(args: &DetectArgs) -> CliResult<DetectReport> {
    let cascade = Cascade::load(&args.model)?;
    let cfg = DetectConfig {
        min_face: args.min_face,
        ..DetectConfig::default()
    };
    cfg.validate()?;
    if let Some(dir) = &args.annotate {
        fs::create_dir_all(dir)?;
    }
    let results: Vec<CliResult<DetectionRecord>> = args
        .inputs
        .par_iter()
        .map(|p| detect_one(p, &cascade, &cfg, args.annotate.as_deref()))
        .collect();
    let mut out = BufWriter::new(fs::File::create(&args.json)?);
    let mut report = DetectReport::default();
    for (path, r) in args.inputs.iter().zip(results) {
        match r {
            Ok(rec) => {
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
                report.records.push(rec);
            }
            Err(e) => report.failures.push((path.clone(), e.message)),
        }
    }
    out.flush()?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub orientation: OrientationMetrics,
    pub recall: RecallReport,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let cascade = Cascade::load(&args.model)?;
    let disk = open_source(&args.data)?;
    let synthetic;
    let source: &dyn ImageSource = match &disk {
        Some(d) => d,
        None => {
            synthetic = test_corpus(args.size, args.seed);
            &synthetic
        }
    };
    let cfg = DetectConfig {
        min_face: args.min_face,
        ..DetectConfig::default()
    };
    cfg.validate()?;
    let samples = held_out_positives(source, 2, args.seed)?;
    let orientation = orientation_metrics(&cascade, &samples)?;
    let budget = args.fp_budget.unwrap_or_else(|| fp_budget(source.len()));
    let recall = per_orientation_recall(source, &cascade, &cfg, budget)?;
    Ok(EvalReport {
        images: source.len(),
        orientation,
        recall,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: usize,
    pub seconds: Vec<f64>,
    pub fps_mean: f64,
    pub fps_median: f64,
    /// Mean number of candidates entering stages 1, 2 and 3.
    pub mean_stage_inputs: [f64; 3],
    pub mean_detections: f64,
    /// Orientation-frame constructions per processed image.
    pub frame_builds_per_image: f64,
}

/// Synthetic frames used by the benchmark, faces between the minimum face
/// size and a third of the short side.
pub fn bench_frames(args: &BenchArgs) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let max_face = (args.width.min(args.height) as f64 / 3.0).max(args.min_face);
    (0..args.runs)
        .map(|_| SceneSpec::random(args.width, args.height, args.faces, (args.min_face, max_face), &mut rng))
        .collect()
}

pub fn cmd_bench(args: &BenchArgs) -> CliResult<BenchReport> {
    if args.runs == 0 {
        return Err(CliError::usage("--runs must be at least 1"));
    }
    let cascade = Cascade::load(&args.model)?;
    let cfg = DetectConfig {
        min_face: args.min_face,
        stride: args.stride,
        ..DetectConfig::default()
    };
    cfg.validate()?;
    let mut seconds = Vec::with_capacity(args.runs);
    let mut stage_sum = [0usize; 3];
    let mut detections = 0usize;
    let mut builds = 0usize;
    for scene in bench_frames(args) {
        let img = scene.render();
        let t = Instant::now();
        let (faces, stats) = detect_with_stats(&img, &cascade, &cfg)?;
        seconds.push(t.elapsed().as_secs_f64());
        for (s, n) in stage_sum.iter_mut().zip(stats.stage_inputs) {
            *s += n;
        }
        detections += faces.len();
        builds += stats.frame_builds;
    }
    let runs = args.runs as f64;
    let mut sorted = seconds.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    Ok(BenchReport {
        runs: args.runs,
        fps_mean: runs / seconds.iter().sum::<f64>(),
        fps_median: 1.0 / median,
        seconds,
        mean_stage_inputs: stage_sum.map(|s| s as f64 / runs),
        mean_detections: detections as f64 / runs,
        frame_builds_per_image: builds as f64 / runs,
    })
}

pub fn cmd_gen(args: &GenArgs) -> CliResult<()> {
    write_corpus(&gen_synthetic(args.n, args.seed), &args.out)?;
    Ok(())
}

/// Runs a parsed command line, printing human-readable results to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => {
            let r = cmd_train(&a)?;
            println!("model: {}", r.model.display());
            println!("log: {}", r.log.display());
            println!("training time: {:.1}s", r.train_seconds);
            print_orientation(&r.metrics);
        }
        Command::Detect(a) => {
            let r = cmd_detect(&a)?;
            let faces: usize = r.records.iter().map(|x| x.faces.len()).sum();
            println!("{} images, {faces} faces -> {}", r.records.len(), a.json.display());
            for (p, e) in &r.failures {
                eprintln!("{}: {e}", p.display());
            }
            if !r.failures.is_empty() {
                return Err(CliError::data(format!("{} inputs failed", r.failures.len())));
            }
        }
        Command::Eval(a) => {
            let r = cmd_eval(&a)?;
            println!("images: {}", r.images);
            print_orientation(&r.orientation);
            println!("false-positive budget: {}", r.recall.fp_budget);
            for (name, v) in ["up", "left", "right", "down"].iter().zip(r.recall.per_orientation) {
                println!("recall ({name}): {:.2}%", v * 100.0);
            }
            println!("recall spread: {:.2} points", r.recall.spread() * 100.0);
        }
        Command::Bench(a) => {
            let r = cmd_bench(&a)?;
            for (i, s) in r.seconds.iter().enumerate() {
                println!("run {i}: {:.1} ms", s * 1e3);
            }
            println!("fps mean {:.2}, median {:.2}", r.fps_mean, r.fps_median);
            println!(
                "mean candidates per stage: {:.1} / {:.1} / {:.1}, detections {:.2}",
                r.mean_stage_inputs[0], r.mean_stage_inputs[1], r.mean_stage_inputs[2], r.mean_detections
            );
            println!("orientation frames built per image: {:.2}", r.frame_builds_per_image);
        }
        Command::Gen(a) => {
            cmd_gen(&a)?;
            println!("wrote {} images to {}", a.n, a.out.display());
        }
    }
    Ok(())
}

fn print_orientation(m: &OrientationMetrics) {
    println!("stage-1 orientation accuracy: {:.2}% ({} samples)", m.stage1_accuracy * 100.0, m.samples[0]);
    println!("stage-2 orientation accuracy: {:.2}% ({} samples)", m.stage2_accuracy * 100.0, m.samples[1]);
    println!("stage-3 mean absolute angle error: {:.2} deg ({} samples)", m.stage3_mae, m.samples[2]);
}
