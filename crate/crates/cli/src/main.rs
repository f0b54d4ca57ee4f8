//! `sst`: synthetic data, training, transfer and evaluation from the command line.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.
//! Training settings come from built-in defaults, overlaid by `--config`, overlaid by flags.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sst_core::colorops::BaselineTargets;
use sst_core::data::{
    load_manifest, make_synthetic_benchmark, read_png, save_png, write_manifest, Dataset, Split, StainStyleParams,
};
use sst_core::evaluation::{
    comparison_report, evaluate, HistogramTransform, Identity, MacenkoTransform, ReinhardTransform, SstTransform,
    TileTransform, DEFAULT_THRESHOLD,
};
use sst_core::networks::{load_checkpoint, save_checkpoint, Classifier, Generator};
use sst_core::training::{apply_sst, train_classifier, train_sst, TrainConfig, TrainHistory};

#[derive(Parser)]
#[command(name = "sst", version, about = "Stain-style transfer for histopathology tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic two-institute benchmark as PNG tiles with manifests.
    SynthData(SynthArgs),
    /// Train the tumor classifier on a target-style dataset.
    TrainClassifier(TrainClassifierArgs),
    /// Train the stain-style transfer generator against a frozen classifier.
    TrainSst(TrainSstArgs),
    /// Recolor one tile with a trained generator.
    Transfer(TransferArgs),
    /// Score one dataset with one transfer method.
    Evaluate(EvaluateArgs),
    /// Score one dataset with several transfer methods and rank them by AUC.
    Compare(CompareArgs),
    /// Fit Reinhard, Macenko and histogram targets on a target-style dataset.
    FitBaseline(FitBaselineArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Style JSON for the training institute.
    #[arg(long)]
    style_a: PathBuf,
    /// Style JSON for the test institute.
    #[arg(long)]
    style_b: PathBuf,
    /// Tile counts as TRAIN,VAL,TEST (each even).
    #[arg(long, default_value = "2000,400,1000", value_parser = parse_counts)]
    counts: [usize; 3],
    /// Tile side in pixels.
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainFlags {
    /// JSON training config; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write checkpoints and history.jsonl.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Stop each epoch after this many batches.
    #[arg(long)]
    max_steps_per_epoch: Option<usize>,
    /// Write the per-epoch history as JSON lines.
    #[arg(long)]
    history: Option<PathBuf>,
}

impl TrainFlags {
    fn resolve(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                base.overlay_json(&text).with_context(|| format!("config {}", path.display()))?
            }
            None => base,
        };
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.checkpoint_dir {
            cfg.checkpoint_dir = Some(v.clone());
        }
        if let Some(v) = self.max_steps_per_epoch {
            cfg.max_steps_per_epoch = Some(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn write_history(&self, history: &TrainHistory) -> Result<()> {
        if let Some(path) = &self.history {
            history.write_jsonl(path)?;
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainClassifierArgs {
    /// Training manifest.
    #[arg(long)]
    train: PathBuf,
    /// Validation manifest.
    #[arg(long)]
    val: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct TrainSstArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Frozen classifier checkpoint.
    #[arg(long)]
    classifier: PathBuf,
    /// Output generator checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda_recon: Option<f64>,
    #[arg(long)]
    lambda_fp: Option<f64>,
    #[arg(long)]
    d_steps_per_g_step: Option<usize>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    generator: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MethodSources {
    /// Generator checkpoint, needed by `sst`.
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Baseline targets JSON from `fit-baseline`, needed by `reinhard`, `macenko` and `hs`.
    #[arg(long)]
    baselines: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    classifier: PathBuf,
    /// Manifest of the dataset to score.
    #[arg(long)]
    data: PathBuf,
    /// One of identity, sst, reinhard, macenko, hs.
    #[arg(long, default_value = "identity")]
    method: String,
    #[command(flatten)]
    sources: MethodSources,
    /// Score at or above which a tile counts as tumor.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "identity,sst,reinhard,macenko,hs")]
    methods: Vec<String>,
    #[command(flatten)]
    sources: MethodSources,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FitBaselineArgs {
    /// Manifest of target-style tiles.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fit on this single tile instead of pooling the whole dataset.
    #[arg(long)]
    reference_index: Option<usize>,
}

fn parse_counts(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|p: Vec<usize>| format!("expected TRAIN,VAL,TEST, got {} numbers", p.len()))
}

fn load_data(path: &Path, split: Split) -> Result<Dataset> {
    load_manifest(path, split).with_context(|| format!("loading {}", path.display()))
}

fn load_net<N: sst_core::networks::Network<f32>>(path: &Path) -> Result<N> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn synth_data(a: &SynthArgs) -> Result<()> {
    let style_a = StainStyleParams::load(&a.style_a).with_context(|| format!("style {}", a.style_a.display()))?;
    let style_b = StainStyleParams::load(&a.style_b).with_context(|| format!("style {}", a.style_b.display()))?;
    let [n_train, n_val, n_test] = a.counts;
    let (train, val, test) = make_synthetic_benchmark(&style_a, &style_b, n_train, n_val, n_test, a.d, a.seed)?;
    for (name, ds) in [("train", &train), ("val", &val), ("test", &test)] {
        let manifest = write_manifest(ds, &a.out.join(name))?;
        println!("{name}: {} tiles -> {}", ds.len(), manifest.display());
    }
    Ok(())
}

fn train_classifier_cmd(a: &TrainClassifierArgs) -> Result<()> {
    let cfg = a.flags.resolve(TrainConfig::classifier_default())?;
    let (train, val) = (load_data(&a.train, Split::Train)?, load_data(&a.val, Split::Val)?);
    let (model, history) = train_classifier(&train, &val, &cfg)?;
    save_checkpoint(&model, &a.out)?;
    a.flags.write_history(&history)?;
    let best = history.records.iter().map(|r| r.val_metric).fold(f64::MIN, f64::max);
    println!("classifier -> {} (best val AUC {best:.4})", a.out.display());
    Ok(())
}

fn train_sst_cmd(a: &TrainSstArgs) -> Result<()> {
    let mut cfg = a.flags.resolve(TrainConfig::default())?;
    if let Some(v) = a.lambda_recon {
        cfg.loss_weights.lambda_recon = v;
    }
    if let Some(v) = a.lambda_fp {
        cfg.loss_weights.lambda_fp = v;
    }
    if let Some(v) = a.d_steps_per_g_step {
        cfg.d_steps_per_g_step = v;
    }
    cfg.validate()?;
    let classifier: Classifier<f32> = load_net(&a.classifier)?;
    let (train, val) = (load_data(&a.train, Split::Train)?, load_data(&a.val, Split::Val)?);
    let (generator, history) = train_sst(&train, &val, &classifier, &cfg)?;
    save_checkpoint(&generator, &a.out)?;
    a.flags.write_history(&history)?;
    let best = history.records.iter().map(|r| r.val_metric).fold(f64::MAX, f64::min);
    println!("generator -> {} (best val total loss {best:.4})", a.out.display());
    Ok(())
}

fn transfer_cmd(a: &TransferArgs) -> Result<()> {
    let generator: Generator<f32> = load_net(&a.generator)?;
    let tile = read_png(&a.input)?;
    save_png(&apply_sst(&generator, &tile)?, &a.out)?;
    Ok(())
}

fn build_method(name: &str, sources: &MethodSources) -> Result<Box<dyn TileTransform>> {
    let baselines = || -> Result<BaselineTargets> {
        let Some(path) = &sources.baselines else { bail!("method {name:?} needs --baselines") };
        BaselineTargets::load(path).with_context(|| format!("loading {}", path.display()))
    };
    Ok(match name {
        "identity" => Box::new(Identity),
        "sst" => {
            let Some(path) = &sources.generator else { bail!("method \"sst\" needs --generator") };
            Box::new(SstTransform(load_net(path)?))
        }
        "reinhard" => Box::new(ReinhardTransform(baselines()?.reinhard)),
        "macenko" => Box::new(MacenkoTransform(baselines()?.macenko)),
        "hs" => Box::new(HistogramTransform(baselines()?.histogram)),
        other => bail!("unknown method {other:?}; expected identity, sst, reinhard, macenko or hs"),
    })
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let classifier: Classifier<f32> = load_net(&a.classifier)?;
    let data = load_data(&a.data, Split::Test)?;
    let method = build_method(&a.method, &a.sources)?;
    let report = evaluate(&classifier, &data, Some(method.as_ref()), a.threshold)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&[&report])?);
    } else {
        println!(
            "{}: AUC {:.4}  precision {:.4}  recall {:.4}  specificity {:.4}  (n = {}, threshold {})",
            report.method_name, report.auc, report.precision, report.recall, report.specificity, report.n_samples,
            report.threshold
        );
        for w in &report.warnings {
            println!("warning: {w}");
        }
    }
    Ok(())
}

fn compare_cmd(a: &CompareArgs) -> Result<()> {
    let classifier: Classifier<f32> = load_net(&a.classifier)?;
    let data = load_data(&a.data, Split::Test)?;
    let methods = a.methods.iter().map(|m| build_method(m.trim(), &a.sources)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn TileTransform> = methods.iter().map(|m| m.as_ref()).collect();
    let report = comparison_report(&classifier, &data, &refs, a.threshold);
    if a.json {
        println!("{}", report.to_json()?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn fit_baseline_cmd(a: &FitBaselineArgs) -> Result<()> {
    let data = load_data(&a.data, Split::Train)?;
    let tiles: Vec<_> = match a.reference_index {
        Some(i) => {
            let Some(t) = data.tiles().get(i) else {
                bail!("--reference-index {i} is out of range for {} tiles", data.len())
            };
            vec![&t.tile]
        }
        None => data.tiles().iter().map(|t| &t.tile).collect(),
    };
    BaselineTargets::fit(&tiles)?.save(&a.out)?;
    println!("baseline targets from {} tile(s) -> {}", tiles.len(), a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::TrainClassifier(a) => train_classifier_cmd(a),
        Command::TrainSst(a) => train_sst_cmd(a),
        Command::Transfer(a) => transfer_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::FitBaseline(a) => fit_baseline_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
