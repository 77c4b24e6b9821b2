//! Command-line front end. Every subcommand is a thin wrapper over one
//! library operation and prints a one-line JSON summary on success.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use virotem::classical::{propose_candidates, HoughParams, ProposalParams};
use virotem::evalmetrics::{evaluate_image, reports_to_csv, reports_to_json, DetectionCounts, MaskTally, MetricsReport};
use virotem::nnet::{read_checkpoint, write_checkpoint, TrainHyper, UNetConfig};
use virotem::postdetect::{burn_overlay, detect_instances, write_instances, PostParams};
use virotem::raster::{read_image, to_8bit, write_mask, write_rgb_png};
use virotem::synthgen::{generate_corpus, load_corpus, SceneSpec};
use virotem::training::{
    infer_full_image, make_patch_dataset, run_crossval, train, AugmentConfig, CrossvalConfig, CrossvalEvent,
    RunManifest,
};

use crate::server::{serve, ServerConfig};

#[derive(Debug, Parser)]
#[command(name = "virotem", version, about = "Intact adenovirus detection in TEM images", args_override_self = true)]
pub struct Cli {
    /// JSON object whose keys are long flag names; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (images, masks, circles, manifest).
    Synth(SynthArgs),
    /// Propose circle candidates with the classical pipeline.
    Propose(ProposeArgs),
    /// Train a U-Net on a corpus.
    Train(TrainArgs),
    /// Segment one image with a trained model.
    Infer(InferArgs),
    /// k-fold cross-validation on a corpus.
    Crossval(CrossvalArgs),
    /// Score a trained model on a corpus.
    Evaluate(EvaluateArgs),
    /// Run the annotation session service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scene spec JSON; missing fields take defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ProposeArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Candidates as JSON lines.
    #[arg(long)]
    pub out: PathBuf,
    /// Proposal parameters JSON; missing fields take defaults.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Derive the radius range from an expected particle radius.
    #[arg(long)]
    pub radius_mean: Option<f64>,
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 8)]
    pub first_filters: usize,
    #[arg(long, default_value_t = 64)]
    pub patch_size: usize,
    /// Disable flips and translations.
    #[arg(long)]
    pub no_augment: bool,
}

impl ModelArgs {
    fn cfg(&self) -> UNetConfig {
        UNetConfig::new(self.depth, self.first_filters, self.patch_size)
    }

    fn hyper(&self) -> TrainHyper {
        let d = TrainHyper::default();
        TrainHyper {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            l2: self.l2.unwrap_or(d.l2),
            ..d
        }
    }

    fn aug(&self) -> AugmentConfig {
        if self.no_augment {
            AugmentConfig::none()
        } else {
            AugmentConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Run manifest; defaults to the checkpoint path with a `.json` extension.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Predicted mask (PGM, or PNG by extension).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub instances: Option<PathBuf>,
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    #[arg(long, default_value_t = 15.0)]
    pub radius_mean: f64,
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics CSV: one row per fold and an `average` row.
    #[arg(long)]
    pub out: PathBuf,
    /// Full report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long, default_value_t = 15.0)]
    pub radius_mean: f64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Metrics CSV: one row per image and a `pooled` row.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long, default_value_t = 15.0)]
    pub radius_mean: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Directory of images that sessions can open.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub snapshots: Option<PathBuf>,
    #[arg(long, default_value = "exports")]
    pub exports: PathBuf,
}

/// Turns a JSON config object into flags placed before the explicit ones.
pub fn config_flags(config: &Value) -> anyhow::Result<Vec<OsString>> {
    let obj = config.as_object().context("config file must hold a JSON object")?;
    let mut out = Vec::new();
    for (k, v) in obj {
        let flag = format!("--{}", k.replace('_', "-"));
        match v {
            Value::Bool(true) => out.push(flag.into()),
            Value::Bool(false) | Value::Null => {}
            Value::String(s) => {
                out.push(flag.into());
                out.push(s.into());
            }
            Value::Number(n) => {
                out.push(flag.into());
                out.push(n.to_string().into());
            }
            _ => bail!("config key {k:?}: only strings, numbers and booleans are allowed"),
        }
    }
    Ok(out)
}

fn find_config(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Parses argv, splicing config-file flags in right after the subcommand.
pub fn parse_args(args: Vec<OsString>) -> Result<Cli, CliFailure> {
    let mut args = args;
    if let Some(path) = find_config(&args) {
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(CliFailure::Run)?;
        let value: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(CliFailure::Run)?;
        let extra = config_flags(&value).map_err(CliFailure::Run)?;
        let names = ["synth", "propose", "train", "infer", "crossval", "evaluate", "serve"];
        if let Some(pos) = args.iter().position(|a| names.contains(&a.to_string_lossy().as_ref())) {
            args.splice(pos + 1..pos + 1, extra);
        }
    }
    Cli::try_parse_from(args).map_err(CliFailure::Usage)
}

#[derive(Debug)]
pub enum CliFailure {
    Usage(clap::Error),
    Run(anyhow::Error),
}

/// Stable error kind for the machine-readable error line.
pub fn error_kind(e: &anyhow::Error) -> &'static str {
    use virotem::Error as E;
    for cause in e.chain() {
        if let Some(ve) = cause.downcast_ref::<E>() {
            return match ve {
                E::InvalidArgument(_) => "invalid_argument",
                E::ShapeMismatch(_) => "shape_mismatch",
                E::BitDepth { .. } => "bit_depth",
                E::NotDivisible { .. } => "not_divisible",
                E::Format(_) => "format",
                E::Unsupported(_) => "unsupported",
                E::Infeasible { .. } => "infeasible",
                E::NonFinite(_) => "non_finite",
                E::NoForwardCache => "no_forward_cache",
                E::Diverged { .. } => "diverged",
                E::Checkpoint(_) => "checkpoint",
                E::Io { .. } => "io",
                E::Json(_) => "json",
                E::Csv(_) => "csv",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "json";
        }
    }
    "error"
}

pub fn error_line(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    let _ = tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).try_init();
}

/// Entry point of the binary.
pub fn main_with(args: impl IntoIterator<Item = OsString>) -> ExitCode {
    let cli = match parse_args(args.into_iter().collect()) {
        Ok(cli) => cli,
        Err(CliFailure::Usage(e)) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", error_line("usage", e.to_string().lines().next().unwrap_or("bad arguments")));
            return ExitCode::from(2);
        }
        Err(CliFailure::Run(e)) => {
            eprintln!("{}", error_line(error_kind(&e), &format!("{e:#}")));
            return ExitCode::from(1);
        }
    };
    init_logging(cli.verbose);
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(error_kind(&e), &format!("{e:#}")));
            ExitCode::from(1)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cmd: Command) -> anyhow::Result<Value> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Propose(a) => propose(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Crossval(a) => crossval(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Serve(a) => {
            let cfg = ServerConfig { image_dir: a.images, snapshot_dir: a.snapshots, export_dir: a.exports };
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(serve(&a.addr, cfg))?;
            Ok(json!({ "command": "serve" }))
        }
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<Value> {
    let mut spec: SceneSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SceneSpec::default(),
    };
    spec.width = a.width.unwrap_or(spec.width);
    spec.height = a.height.unwrap_or(spec.height);
    let records = generate_corpus(&spec, a.n, a.seed, &a.out)?;
    Ok(json!({ "command": "synth", "images": records.len(), "out": a.out }))
}

/// Proposal parameters from an optional file and radius override.
pub fn proposal_params(params: Option<&Path>, radius_mean: Option<f64>) -> anyhow::Result<ProposalParams> {
    let mut p: ProposalParams = match params {
        Some(path) => read_json(path)?,
        None => ProposalParams::default(),
    };
    if let Some(r) = radius_mean {
        let h = HoughParams::for_radius(r);
        p.hough = HoughParams { r_min: h.r_min, r_max: h.r_max, ..p.hough };
    }
    Ok(p)
}

fn propose(a: ProposeArgs) -> anyhow::Result<Value> {
    let img = to_8bit(&read_image(&a.image)?);
    let params = proposal_params(a.params.as_deref(), a.radius_mean)?;
    let cands = propose_candidates(&img, &params)?;
    let mut text = String::new();
    for c in &cands {
        text.push_str(&serde_json::to_string(c)?);
        text.push('\n');
    }
    write_text(&a.out, &text)?;
    if let Some(path) = &a.overlay {
        let circles: Vec<_> = cands.iter().map(|c| c.circle()).collect();
        write_rgb_png(&burn_overlay(&img, &circles, [255, 0, 0]), path)?;
    }
    Ok(json!({ "command": "propose", "candidates": cands.len(), "out": a.out }))
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<Value> {
    let corpus = load_corpus(&a.corpus)?;
    let images: Vec<_> = corpus.iter().map(|c| to_8bit(&c.image)).collect();
    let dataset = make_patch_dataset(images.iter().zip(corpus.iter().map(|c| &c.mask)), a.model.patch_size)?;
    tracing::info!(patches = dataset.len(), "training set ready");
    let run = train(&dataset, a.model.cfg(), &a.model.hyper(), &a.model.aug(), a.seed, &mut |e| {
        tracing::info!(epoch = e.epoch, loss = e.mean_loss, accuracy = e.accuracy, "epoch done")
    })?;
    write_checkpoint(&run.model, &a.out)?;
    let manifest_path = a.manifest.clone().unwrap_or_else(|| a.out.with_extension("json"));
    let manifest = RunManifest::new(
        &run,
        Some(a.corpus.display().to_string()),
        Some(a.out.display().to_string()),
    );
    write_text(&manifest_path, &serde_json::to_string_pretty(&manifest)?)?;
    Ok(json!({
        "command": "train",
        "checkpoint": a.out,
        "manifest": manifest_path,
        "final_loss": run.history.last().map(|e| e.mean_loss),
        "early_90": run.early_90,
    }))
}

fn post_params(radius_mean: f64) -> PostParams {
    PostParams { radius_mean, ..PostParams::default() }
}

fn infer(a: InferArgs) -> anyhow::Result<Value> {
    let model = read_checkpoint(&a.model)?;
    let img = to_8bit(&read_image(&a.image)?);
    let mask = infer_full_image(&model, &img)?;
    write_mask(&mask, &a.out)?;
    let inst = detect_instances(&mask, &post_params(a.radius_mean))?;
    if let Some(path) = &a.instances {
        write_instances(&inst, path)?;
    }
    if let Some(path) = &a.overlay {
        write_rgb_png(&burn_overlay(&img, &inst, [0, 255, 0]), path)?;
    }
    Ok(json!({ "command": "infer", "instances": inst.len(), "foreground_pixels": mask.count(), "out": a.out }))
}

fn crossval(a: CrossvalArgs) -> anyhow::Result<Value> {
    let mut corpus = load_corpus(&a.corpus)?;
    for item in &mut corpus {
        item.image = to_8bit(&item.image);
    }
    let cv = CrossvalConfig {
        k: a.k,
        seed: a.seed,
        cfg: a.model.cfg(),
        hyper: a.model.hyper(),
        aug: a.model.aug(),
        post: post_params(a.radius_mean),
    };
    let report = run_crossval(&corpus, &cv, &mut |ev| match ev {
        CrossvalEvent::FoldStart { fold, train_patches } => tracing::info!(fold, train_patches, "fold start"),
        CrossvalEvent::Epoch { fold, stats } => {
            tracing::info!(fold, epoch = stats.epoch, loss = stats.mean_loss, accuracy = stats.accuracy, "epoch done")
        }
        CrossvalEvent::FoldDone { fold, report } => tracing::info!(fold, dice = report.dice, "fold done"),
    })?;
    let rows = report.rows();
    write_text(&a.out, &reports_to_csv(&rows)?)?;
    if let Some(path) = &a.json {
        write_text(path, &serde_json::to_string_pretty(&report)?)?;
    }
    let avg = report.average;
    Ok(json!({
        "command": "crossval",
        "folds": report.folds.len(),
        "out": a.out,
        "precision_25c": avg.levels[2].precision,
        "recall_25c": avg.levels[2].recall,
        "dice": avg.dice,
        "iou": avg.iou,
    }))
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<Value> {
    let model = read_checkpoint(&a.model)?;
    let corpus = load_corpus(&a.corpus)?;
    let post = post_params(a.radius_mean);
    let mut rows = Vec::with_capacity(corpus.len() + 1);
    let (mut counts, mut tally) = (DetectionCounts::default(), MaskTally::default());
    for (i, item) in corpus.iter().enumerate() {
        let pred = infer_full_image(&model, &to_8bit(&item.image))?;
        let inst = detect_instances(&pred, &post)?;
        let (_, r) = evaluate_image(&inst, &item.circles, &pred, &item.mask)?;
        counts.add(&r.counts);
        tally.add(&MaskTally::of(&pred, &item.mask)?);
        rows.push((format!("image_{i:03}"), r));
    }
    let pooled = MetricsReport::from_tallies(counts, &tally);
    rows.push(("pooled".to_string(), pooled));
    write_text(&a.out, &reports_to_csv(&rows)?)?;
    if let Some(path) = &a.json {
        write_text(path, &reports_to_json(&rows)?)?;
    }
    Ok(json!({ "command": "evaluate", "images": corpus.len(), "out": a.out, "dice": pooled.dice, "iou": pooled.iou }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_values_become_flags() {
        let v = json!({ "n": 3, "out": "d", "no_augment": true, "skip": false });
        let flags: Vec<String> = config_flags(&v).unwrap().into_iter().map(|s| s.into_string().unwrap()).collect();
        assert!(flags.windows(2).any(|w| w == ["--n", "3"]));
        assert!(flags.windows(2).any(|w| w == ["--out", "d"]));
        assert!(flags.contains(&"--no-augment".to_string()));
        assert!(!flags.iter().any(|f| f == "--skip"));
        assert!(config_flags(&json!([1])).is_err());
        assert!(config_flags(&json!({ "x": [1] })).is_err());
    }

    #[test]
    fn explicit_flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"n": 3, "seed": 9, "out": "from_config"}"#).unwrap();
        let cli = parse_args(args(&["virotem", "synth", "--config", cfg.to_str().unwrap(), "--n", "5"])).unwrap();
        match cli.command {
            Command::Synth(a) => {
                assert_eq!((a.n, a.seed), (5, 9));
                assert_eq!(a.out, PathBuf::from("from_config"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn usage_errors_are_reported() {
        assert!(matches!(parse_args(args(&["virotem", "synth"])), Err(CliFailure::Usage(_))));
        assert!(matches!(parse_args(args(&["virotem", "bogus"])), Err(CliFailure::Usage(_))));
        let missing = parse_args(args(&["virotem", "synth", "--config", "/nonexistent/c.json"]));
        assert!(matches!(missing, Err(CliFailure::Run(_))));
    }

    #[test]
    fn error_kinds() {
        let e = anyhow::Error::new(virotem::Error::Checkpoint("x".into())).context("loading");
        assert_eq!(error_kind(&e), "checkpoint");
        let line: Value = serde_json::from_str(&error_line("io", "gone")).unwrap();
        assert_eq!(line["error"]["kind"], "io");
    }
}
