//! The `gcg` command-line tool.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::AttentionKind;
use crate::checkpoint;
use crate::data::{generate_dataset, load_dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::experiment::{
    compare_attention_variants, comparison_csv, evaluate, examples_from, train_model, train_val_split,
    ExperimentConfig,
};
use crate::heatmap::{export_heatmap, HeatmapChannel};
use crate::pnm;
use crate::tensor::Tensor;

#[derive(Debug, Parser)]
#[command(name = "gcg", version, about = "Guided Context Gating attention: data, training, evaluation, heatmaps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Master seed (overrides the config file's seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment config JSON with optional `model`, `train` and `data` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic lesion dataset (PPM images + manifest.csv).
    GenData {
        #[command(flatten)]
        common: Common,
        /// `default` (3 balanced classes) or `seven-class` (imbalanced).
        #[arg(long, default_value = "default")]
        preset: String,
        /// Comma-separated counts, one per class.
        #[arg(long, value_delimiter = ',')]
        samples_per_class: Option<Vec<usize>>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train a model and keep the checkpoint with the best validation accuracy.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        attention: Option<AttentionKind>,
    },
    /// Score a checkpoint on one split and write metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `test` when present, otherwise `val`.
        #[arg(long)]
        split: Option<Split>,
    },
    /// Write attention heatmaps for images.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true)]
        image: Vec<PathBuf>,
        #[arg(long, default_value = "gate")]
        channel: HeatmapChannel,
    },
    /// Train every requested attention variant and tabulate the metrics.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated attention kinds.
        #[arg(long, value_delimiter = ',', default_value = "none,spatial,channel_se,global_context,gated,gcg")]
        variants: Vec<AttentionKind>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn gen_data(common: &Common, preset: &str, counts: Option<Vec<usize>>, size: Option<usize>) -> Result<()> {
    let mut cfg = resolve(common)?;
    if preset != "default" || common.config.is_none() {
        let base = match preset {
            "default" => SyntheticSpec::default(),
            "seven-class" => SyntheticSpec::seven_class(),
            other => return Err(Error::Config(format!("unknown preset `{other}` (expected default or seven-class)"))),
        };
        cfg.data = SyntheticSpec {
            seed: cfg.data.seed,
            ..base
        };
    }
    if let Some(c) = counts {
        cfg.data.num_classes = c.len();
        cfg.data.samples_per_class = c;
    }
    if let Some(s) = size {
        cfg.data.image_size = s;
    }
    let records = generate_dataset(&cfg.data, &common.out)?;
    println!("wrote {} images to {}", records.len(), common.out.display());
    Ok(())
}

fn train(common: &Common, data: &Path, epochs: Option<usize>, attention: Option<AttentionKind>) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(a) = attention {
        cfg.model.attention = a;
    }
    let ds = load_dataset(data)?;
    if ds.num_classes() > cfg.model.num_classes {
        log::warn!(
            "dataset has {} classes, widening the classifier from {}",
            ds.num_classes(),
            cfg.model.num_classes
        );
        cfg.model.num_classes = ds.num_classes();
    }
    let (t, v) = train_val_split(&ds, cfg.train.holdout_fraction, cfg.seed);
    let train_set = examples_from(&t, &cfg.model)?;
    let val_set = examples_from(&v, &cfg.model)?;

    create_dir(&common.out)?;
    write_file(&common.out.join("config.json"), serde_json::to_string_pretty(&cfg)?.as_bytes())?;
    let log_path = common.out.join("train_log.jsonl");
    let mut log_file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut write_err = None;
    let result = train_model(&cfg, &train_set, &val_set, |entry| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        if let Err(e) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(Error::io(log_path, e));
    }
    let (model, outcome) = result?;
    checkpoint::save(&model, &common.out.join("best.ckpt"))?;
    let report = evaluate(&model, &val_set, cfg.train.batch_size)?;
    write_file(&common.out.join("val_metrics.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    println!(
        "best val accuracy {:.4} at epoch {}; checkpoint {}",
        outcome.best_val_accuracy,
        outcome.best_epoch,
        common.out.join("best.ckpt").display()
    );
    Ok(())
}

fn eval(common: &Common, ckpt: &Path, data: &Path, split: Option<Split>) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let ds = load_dataset(data)?;
    let split = split.unwrap_or(if ds.split(Split::Test).is_empty() { Split::Val } else { Split::Test });
    let samples = ds.split(split);
    if samples.is_empty() {
        return Err(Error::Data(format!("split {split:?} is empty")));
    }
    let set = examples_from(&samples, model.config())?;
    let report = evaluate(&model, &set, 32)?;
    create_dir(&common.out)?;
    write_file(&common.out.join("metrics.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    print!("{}", report.to_table());
    Ok(())
}

fn explain(common: &Common, ckpt: &Path, images: &[PathBuf], channel: HeatmapChannel) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    if model.config().attention != AttentionKind::Gcg {
        return Err(Error::Config(format!(
            "explain needs a gcg checkpoint, this one uses `{}` attention",
            model.config().attention
        )));
    }
    let [h, w, _] = model.config().input_size;
    create_dir(&common.out)?;
    for path in images {
        let img = pnm::read_ppm(path)?;
        let x = Tensor::new(vec![h, w, 3], img.resized(w, h).to_unit())?;
        let inf = model.infer(&x)?;
        let hm = export_heatmap(&inf.artifacts[0], (img.height, img.width), channel, &img)?;
        let stem = path
            .file_stem()
            .ok_or_else(|| Error::Data(format!("{} has no file name", path.display())))?
            .to_string_lossy();
        pnm::write_pgm(&common.out.join(format!("{stem}.{}.pgm", channel.as_str())), &hm.gray)?;
        pnm::write_ppm(&common.out.join(format!("{stem}.overlay.ppm")), &hm.overlay)?;
        let probs: Vec<String> = inf.probs.data().iter().map(|p| format!("{p:.3}")).collect();
        println!("{}: probs [{}]", path.display(), probs.join(", "));
    }
    Ok(())
}

fn compare(common: &Common, data: &Path, variants: &[AttentionKind], epochs: Option<usize>) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let ds = load_dataset(data)?;
    cfg.model.num_classes = cfg.model.num_classes.max(ds.num_classes());
    let (t, v) = train_val_split(&ds, cfg.train.holdout_fraction, cfg.seed);
    let train_set = examples_from(&t, &cfg.model)?;
    let val_set = examples_from(&v, &cfg.model)?;
    let test = ds.split(Split::Test);
    let eval_set = if test.is_empty() { val_set.clone() } else { examples_from(&test, &cfg.model)? };
    let rows = compare_attention_variants(&cfg, &train_set, &val_set, &eval_set, variants)?;
    create_dir(&common.out)?;
    let csv = comparison_csv(&rows)?;
    write_file(&common.out.join("comparison.csv"), csv.as_bytes())?;
    write_file(&common.out.join("comparison.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?;
    print!("{csv}");
    Ok(())
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::GenData {
            common,
            preset,
            samples_per_class,
            image_size,
        } => gen_data(common, preset, samples_per_class.clone(), *image_size),
        Command::Train {
            common,
            data,
            epochs,
            attention,
        } => train(common, data, *epochs, *attention),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
        } => eval(common, checkpoint, data, *split),
        Command::Explain {
            common,
            checkpoint,
            image,
            channel,
        } => explain(common, checkpoint, image, *channel),
        Command::Compare {
            common,
            data,
            variants,
            epochs,
        } => compare(common, data, variants, *epochs),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
