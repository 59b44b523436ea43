//! The `satnet` command line: `train`, `eval`, `synth` and `report`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigFile, RunConfig};
use crate::datasets::{self, LabeledDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::models::{Checkpoint, Model, ModelSpec, Variant};
use crate::regularization::AugmentConfig;
use crate::training::{self, ClassWeightTable, EvalSettings, OptimizerKind, Schedule, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NAN: i32 = 3;

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "split_manifest.tsv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const CONFUSION_CSV: &str = "confusion.csv";

#[derive(Debug, Parser)]
#[command(name = "satnet", version, about = "Attention CNNs for 64×64 land-cover tiles")]
struct Cli {
    /// `key = value` config file with optional [train]/[eval]/[synth]/[report] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the metric report.
    Eval(EvalArgs),
    /// Write the synthetic spatial-vs-spectral dataset as PNG files.
    Synth(SynthArgs),
    /// Re-render a JSON report as text.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset root laid out as `<root>/<Class>/*.png`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use the in-memory synthetic dataset instead of `--data`.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    synthetic_per_class: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// baseline, cbam7 or balanced12.
    #[arg(long)]
    variant: Option<String>,
    /// Training recipe to start from; defaults to the variant's own.
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated channel plan overriding the variant default.
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// adam or adamw.
    #[arg(long)]
    optimizer: Option<String>,
    /// constant, plateau(p, f), cosine(t) or warm_restarts(t0, mult).
    #[arg(long)]
    schedule: Option<String>,
    /// Epochs without validation-accuracy gain before stopping, or `none`.
    #[arg(long)]
    early_stop_patience: Option<String>,
    /// uniform, eurosat, or `Name:w,Name:w`.
    #[arg(long)]
    class_weights: Option<String>,
    /// Turn training augmentation off (normalization only).
    #[arg(long)]
    no_augment: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Which split to evaluate: train, val, test or all.
    #[arg(long)]
    split: Option<String>,
    /// Expected architecture; a checkpoint built from another spec is rejected.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Images per class.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// JSON report written by `eval`.
    #[arg(long)]
    input: Option<PathBuf>,
}

fn push<T: ToString>(flags: &mut Vec<(String, String)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        flags.push((key.to_string(), v.to_string()));
    }
}

fn data_flags(flags: &mut Vec<(String, String)>, d: &DataArgs) {
    push(flags, "data", d.data.as_ref().map(|p| p.display().to_string()));
    push(flags, "synthetic", d.synthetic.then_some(true));
    push(flags, "synthetic_per_class", d.synthetic_per_class);
    push(flags, "split_seed", d.split_seed);
}

const COMMON_KEYS: [&str; 2] = ["seed", "out"];
const DATA_KEYS: [&str; 4] = ["data", "synthetic", "synthetic_per_class", "split_seed"];
const TRAIN_KEYS: [&str; 12] = [
    "variant",
    "preset",
    "channels",
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "optimizer",
    "schedule",
    "early_stop_patience",
    "class_weights",
    "augment",
];
const EVAL_KEYS: [&str; 5] = ["checkpoint", "split", "variant", "channels", "batch_size"];

pub const DEFAULT_SYNTHETIC_PER_CLASS: usize = 100;
pub const DEFAULT_SEED: u64 = 0;

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Shape(_) => EXIT_CONFIG,
        Error::NonFinite { .. } => EXIT_NAN,
        Error::Data(_) | Error::Io { .. } | Error::Format(_) | Error::Json(_) | Error::Undefined(_) => EXIT_DATA,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("reading {}: {e}", p.display())))?;
            Some(ConfigFile::parse(&text)?)
        }
        None => None,
    };
    let mut flags = Vec::new();
    push(&mut flags, "seed", cli.seed);
    push(&mut flags, "out", cli.out.as_ref().map(|p| p.display().to_string()));
    let allowed = |extra: &[&'static str]| -> Vec<&'static str> { COMMON_KEYS.iter().chain(extra).copied().collect() };
    match &cli.command {
        Command::Train(a) => {
            data_flags(&mut flags, &a.data);
            push(&mut flags, "variant", a.variant.as_ref());
            push(&mut flags, "preset", a.preset.as_ref());
            push(&mut flags, "channels", a.channels.as_ref());
            push(&mut flags, "epochs", a.epochs);
            push(&mut flags, "batch_size", a.batch_size);
            push(&mut flags, "lr", a.lr);
            push(&mut flags, "weight_decay", a.weight_decay);
            push(&mut flags, "optimizer", a.optimizer.as_ref());
            push(&mut flags, "schedule", a.schedule.as_ref());
            push(&mut flags, "early_stop_patience", a.early_stop_patience.as_ref());
            push(&mut flags, "class_weights", a.class_weights.as_ref());
            push(&mut flags, "augment", a.no_augment.then_some(false));
            let keys = allowed(&[DATA_KEYS.as_slice(), TRAIN_KEYS.as_slice()].concat());
            cmd_train(RunConfig::resolve("train", file.as_ref(), flags, &keys)?)
        }
        Command::Eval(a) => {
            data_flags(&mut flags, &a.data);
            push(&mut flags, "checkpoint", a.checkpoint.as_ref().map(|p| p.display().to_string()));
            push(&mut flags, "split", a.split.as_ref());
            push(&mut flags, "variant", a.variant.as_ref());
            push(&mut flags, "channels", a.channels.as_ref());
            push(&mut flags, "batch_size", a.batch_size);
            let keys = allowed(&[DATA_KEYS.as_slice(), EVAL_KEYS.as_slice()].concat());
            cmd_eval(RunConfig::resolve("eval", file.as_ref(), flags, &keys)?)
        }
        Command::Synth(a) => {
            push(&mut flags, "n", a.n);
            cmd_synth(RunConfig::resolve("synth", file.as_ref(), flags, &allowed(&["n"]))?)
        }
        Command::Report(a) => {
            push(&mut flags, "input", a.input.as_ref().map(|p| p.display().to_string()));
            cmd_report(RunConfig::resolve("report", file.as_ref(), flags, &allowed(&["input"]))?)
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Creates the output directory and echoes the resolved config into it.
fn prepare_out(rc: &RunConfig) -> Result<PathBuf> {
    let out = PathBuf::from(rc.require::<String>("out")?);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(&out.join(RESOLVED_CONFIG), rc.render())?;
    Ok(out)
}

fn load_data(rc: &RunConfig, seed: u64) -> Result<LabeledDataset> {
    if rc.flag("synthetic")? {
        if rc.str("data").is_some() {
            return Err(Error::Config("give either `data` or `synthetic`, not both".into()));
        }
        let n = rc.require("synthetic_per_class")?;
        return datasets::synth_generate(n, seed);
    }
    let root: String = rc
        .get("data")?
        .ok_or_else(|| Error::Config(format!("`{}` needs `data` or `synthetic = true`", rc.command)))?;
    let (ds, report) = datasets::load_directory(Path::new(&root))?;
    if report.skipped > 0 || report.resized > 0 {
        log::warn!("{} files skipped, {} resized", report.skipped, report.resized);
    }
    Ok(ds)
}

fn split_spec(rc: &RunConfig) -> Result<SplitSpec> {
    Ok(SplitSpec {
        seed: rc.require("split_seed")?,
        ..SplitSpec::default()
    })
}

fn parse_channels(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|c| c.trim().parse().map_err(|_| Error::Config(format!("bad channel entry {c:?}"))))
        .collect()
}

fn model_spec(rc: &RunConfig, variant: Variant, num_classes: usize) -> Result<ModelSpec> {
    let mut spec = ModelSpec::new(variant, num_classes);
    if let Some(c) = rc.str("channels") {
        spec = spec.with_channels(parse_channels(c)?);
    }
    spec.validate()?;
    Ok(spec)
}

fn train_config(rc: &RunConfig, seed: u64) -> Result<TrainConfig> {
    let preset: Variant = rc.require::<String>("preset")?.parse()?;
    let mut cfg = TrainConfig::preset(preset, seed);
    if let Some(v) = rc.get("epochs")? {
        cfg.epochs = v;
    }
    if let Some(v) = rc.get("batch_size")? {
        cfg.batch_size = v;
    }
    if let Some(v) = rc.get("lr")? {
        cfg.lr = v;
    }
    if let Some(v) = rc.get("weight_decay")? {
        cfg.weight_decay = v;
    }
    if let Some(v) = rc.get::<OptimizerKind>("optimizer")? {
        cfg.optimizer = v;
    }
    if let Some(s) = rc.str("schedule") {
        cfg.schedule = Schedule::parse(s)?;
    }
    match rc.str("early_stop_patience") {
        None => {}
        Some("none") => cfg.early_stop_patience = None,
        Some(_) => cfg.early_stop_patience = rc.get("early_stop_patience")?,
    }
    if let Some(s) = rc.str("class_weights") {
        cfg.class_weights = ClassWeightTable::parse(s)?;
    }
    if rc.str("augment").is_some() && !rc.flag("augment")? {
        let a = &cfg.augment;
        cfg.augment = AugmentConfig::normalize_only(a.normalize_mean, a.normalize_std);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(mut rc: RunConfig) -> Result<()> {
    rc.set_default("seed", DEFAULT_SEED);
    rc.set_default("out", "runs/train");
    rc.set_default("variant", Variant::Balanced12);
    let variant = rc.require::<String>("variant")?;
    rc.set_default("preset", &variant);
    rc.set_default("split_seed", SplitSpec::default().seed);
    if rc.flag("synthetic")? {
        rc.set_default("synthetic_per_class", DEFAULT_SYNTHETIC_PER_CLASS);
    }
    let seed: u64 = rc.require("seed")?;
    let variant: Variant = variant.parse()?;
    // resolve everything that can fail on configuration alone before
    // touching the output directory
    let cfg = train_config(&rc, seed)?;
    if let Some(c) = rc.str("channels") {
        parse_channels(c)?;
    }
    let out = prepare_out(&rc)?;

    let ds = load_data(&rc, seed)?;
    let split = datasets::split(&ds, &split_spec(&rc)?)?;
    write(&out.join(MANIFEST_FILE), datasets::manifest(&ds, &split))?;
    let spec = model_spec(&rc, variant, ds.num_classes())?;
    let mut model = Model::<f32>::build(&spec, seed)?;
    log::info!("{variant}: {} trainable parameters", model.num_parameters());
    let outcome = training::train(&mut model, &ds, &split.train, &split.val, &cfg)?;
    write(&out.join(HISTORY_FILE), training::history_csv(&outcome.history))?;
    outcome.best.save(&out.join(CHECKPOINT_FILE))?;
    println!(
        "trained {variant} ({} parameters) for {} epochs; best val acc {:.4} at epoch {}",
        model.num_parameters(),
        outcome.history.len(),
        outcome.best.best_val_acc,
        outcome.best_epoch
    );
    Ok(())
}

fn cmd_eval(mut rc: RunConfig) -> Result<()> {
    rc.set_default("seed", DEFAULT_SEED);
    rc.set_default("out", "runs/eval");
    rc.set_default("split", "test");
    rc.set_default("split_seed", SplitSpec::default().seed);
    rc.set_default("batch_size", training::DEFAULT_BATCH_SIZE);
    if rc.flag("synthetic")? {
        rc.set_default("synthetic_per_class", DEFAULT_SYNTHETIC_PER_CLASS);
    }
    let seed: u64 = rc.require("seed")?;
    let ck_path = PathBuf::from(rc.require::<String>("checkpoint")?);
    let which = rc.require::<String>("split")?;
    if !["train", "val", "test", "all"].contains(&which.as_str()) {
        return Err(Error::Config(format!("split = {which:?}; expected train, val, test or all")));
    }
    let out = prepare_out(&rc)?;

    let ck = Checkpoint::<f32>::load(&ck_path)?;
    if let Some(v) = rc.str("variant") {
        let expected = model_spec(&rc, v.parse()?, ck.spec.num_classes)?;
        if expected.digest() != ck.spec_digest() {
            return Err(Error::Config(format!(
                "checkpoint spec does not match the requested model\n  checkpoint digest {}\n  requested digest  {}\n--- checkpoint\n{}--- requested\n{}",
                ck.spec_digest(),
                expected.digest(),
                ck.spec.canonical(),
                expected.canonical()
            )));
        }
    }
    let mut model = ck.restore()?;
    let ds = load_data(&rc, seed)?;
    if ds.num_classes() != ck.spec.num_classes {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes, dataset has {}",
            ck.spec.num_classes,
            ds.num_classes()
        )));
    }
    let spec = split_spec(&rc)?;
    let split = datasets::split(&ds, &spec)?;
    let indices: Vec<usize> = match which.as_str() {
        "train" => split.train.clone(),
        "val" => split.val.clone(),
        "test" => split.test.clone(),
        _ => (0..ds.len()).collect(),
    };
    let settings = EvalSettings {
        batch_size: rc.require("batch_size")?,
        ..EvalSettings::default()
    };
    let preds = training::evaluate(&mut model, &ds, &indices, &settings)?;
    let (f1, f2, f3) = spec.fractions;
    let notes = vec![
        format!(
            "split: stratified by class (fractions {f1}/{f2}/{f3}, seed {}); evaluated on {which} ({} samples)",
            spec.seed,
            indices.len()
        ),
        format!(
            "checkpoint: {} epoch {} (best val acc {:.4}), spec digest {}",
            ck.spec.variant,
            ck.epoch,
            ck.best_val_acc,
            ck.spec_digest()
        ),
    ];
    let report = EvalReport::build(&ds.class_names, &preds.preds, &preds.labels, &preds.probs, model.alphas().ok(), notes)?;
    write(&out.join(REPORT_JSON), report.to_json()?)?;
    let text = report.render_text();
    write(&out.join(REPORT_TEXT), &text)?;
    write(&out.join(CONFUSION_CSV), report.confusion()?.to_csv(&ds.class_names))?;
    print!("{text}");
    Ok(())
}

fn cmd_synth(mut rc: RunConfig) -> Result<()> {
    rc.set_default("seed", DEFAULT_SEED);
    rc.set_default("out", "runs/synth");
    rc.set_default("n", DEFAULT_SYNTHETIC_PER_CLASS);
    let n: usize = rc.require("n")?;
    let seed: u64 = rc.require("seed")?;
    let ds = datasets::synth_generate(n, seed)?;
    let out = prepare_out(&rc)?;
    datasets::write_png_tree(&ds, &out)?;
    println!("wrote {} images in {} class directories under {}", ds.len(), ds.num_classes(), out.display());
    Ok(())
}

fn cmd_report(mut rc: RunConfig) -> Result<()> {
    let input = PathBuf::from(rc.require::<String>("input")?);
    let text = fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
    let report = EvalReport::from_json(&text)?;
    let rendered = report.render_text();
    if rc.str("out").is_some() {
        rc.set_default("seed", DEFAULT_SEED);
        let out = prepare_out(&rc)?;
        write(&out.join(REPORT_TEXT), &rendered)?;
    }
    print!("{rendered}");
    Ok(())
}
