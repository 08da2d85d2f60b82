//! Experiment configuration and the attention-variant comparison harness.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::checkpoint;
use crate::data::{stratified_splits, to_batch, Dataset, Sample, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::{fit, predict, EpochLog, Examples, FitOutcome, TrainConfig};

/// Everything one run needs. Loaded from JSON; missing fields take their
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; data, initialization, shuffling and dropout derive
    /// from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets the master seed and propagates it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = Rng::derive(seed, 11);
        self
    }

    pub fn model_seed(&self) -> u64 {
        Rng::derive(self.seed, 10)
    }

    /// A small configuration that trains in seconds on the default
    /// synthetic data.
    pub fn compact() -> Self {
        Self {
            model: ModelConfig {
                backbone_channels: vec![8, 16, 32, 32],
                head_widths: vec![64, 32],
                dropout_rate: 0.1,
                bn_momentum: 0.9,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                learning_rate: 1e-3,
                epochs: 30,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
        .with_seed(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }
}

/// Stacks samples into model-sized examples.
pub fn examples_from(samples: &[&Sample], model: &ModelConfig) -> Result<Examples> {
    let [h, w, _] = model.input_size;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    if images.is_empty() {
        // tensors cannot have a zero axis; an empty set keeps a placeholder
        return Ok(Examples {
            images: Tensor::zeros(&[1, h, w, 3]),
            labels: vec![],
        });
    }
    Examples::new(to_batch(&images, h, w)?, samples.iter().map(|s| s.label).collect())
}

/// Train and validation samples: the manifest's splits, or a stratified
/// hold-out from the training split when it has no validation records.
pub fn train_val_split(ds: &Dataset, holdout: f64, seed: u64) -> (Vec<&Sample>, Vec<&Sample>) {
    let train = ds.split(Split::Train);
    let val = ds.split(Split::Val);
    if !val.is_empty() {
        return (train, val);
    }
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let splits = stratified_splits(&labels, holdout, 0.0, &mut Rng::new(Rng::derive(seed, 12)));
    let (mut t, mut v) = (Vec::new(), Vec::new());
    for (s, sp) in train.into_iter().zip(splits) {
        if sp == Split::Val {
            v.push(s)
        } else {
            t.push(s)
        }
    }
    (t, v)
}

/// Builds, trains and reloads the best checkpoint.
pub fn train_model(
    cfg: &ExperimentConfig,
    train: &Examples,
    val: &Examples,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, FitOutcome)> {
    let mut model = Model::build(cfg.model.clone(), cfg.model_seed())?;
    let outcome = fit(&mut model, train, val, &cfg.train, on_epoch)?;
    let best = checkpoint::from_bytes(&outcome.best_checkpoint, Path::new("<best>"))?;
    Ok((best, outcome))
}

pub fn evaluate(model: &Model, set: &Examples, batch_size: usize) -> Result<MetricsReport> {
    let probs = predict(model, set, batch_size)?;
    compute_metrics(&set.labels, &probs)
}

pub const COMPARISON_HEADER: [&str; 7] = ["approach", "accuracy", "precision", "recall", "f1", "kappa", "auc"];

/// One row of the comparison table: overall accuracy, macro precision,
/// recall, F1 and AUC, and kappa.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub approach: AttentionKind,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub kappa: f64,
    pub auc: f64,
    pub best_epoch: usize,
    pub report: MetricsReport,
}

impl ComparisonRow {
    pub fn from_report(approach: AttentionKind, best_epoch: usize, report: MetricsReport) -> Self {
        Self {
            approach,
            accuracy: report.accuracy,
            precision: report.macro_avg.precision,
            recall: report.macro_avg.recall,
            f1: report.macro_avg.f1,
            kappa: report.kappa,
            auc: report.macro_avg.auc,
            best_epoch,
            report,
        }
    }
}

/// Trains one model per variant with identical data, seed and settings and
/// scores each best checkpoint on `eval`.
pub fn compare_attention_variants(
    base: &ExperimentConfig,
    train: &Examples,
    val: &Examples,
    eval: &Examples,
    variants: &[AttentionKind],
) -> Result<Vec<ComparisonRow>> {
    if variants.is_empty() {
        return Err(Error::Config("no attention variants requested".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &kind in variants {
        let mut cfg = base.clone();
        cfg.model.attention = kind;
        log::info!("training variant {kind}");
        let (model, outcome) = train_model(&cfg, train, val, |_| {})?;
        let report = evaluate(&model, eval, cfg.train.batch_size)?;
        rows.push(ComparisonRow::from_report(kind, outcome.best_epoch, report));
    }
    Ok(rows)
}

/// CSV with values as fractions to six decimals.
pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(COMPARISON_HEADER).map_err(to_err)?;
    for r in rows {
        let vals = [r.accuracy, r.precision, r.recall, r.f1, r.kappa, r.auc];
        let mut rec = vec![r.approach.to_string()];
        rec.extend(vals.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
