//! Loss, regularization, RMSProp with gradient centralization, and the
//! epoch loop with hold-out checkpointing.

use std::collections::{BTreeMap, HashMap};
#[cfg(not(target_arch = "wasm32"))]
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::model::{Mode, Model};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamKind, Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    L1,
    L2,
    L1l2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcMode {
    Off,
    #[default]
    ZeroMean,
    Zscore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_reg: Regularizer,
    pub weight_reg_coeff: f64,
    pub bias_reg: Regularizer,
    pub bias_reg_coeff: f64,
    pub rmsprop_rho: f64,
    pub rmsprop_eps: f64,
    pub gc_mode: GcMode,
    pub seed: u64,
    /// Fraction of the training split held out when no validation split is
    /// given.
    pub holdout_fraction: f64,
    /// Inverse-frequency class weights in the loss.
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 100,
            weight_reg: Regularizer::L2,
            weight_reg_coeff: 0.005,
            bias_reg: Regularizer::L1l2,
            bias_reg_coeff: 0.005,
            rmsprop_rho: 0.9,
            rmsprop_eps: 1e-7,
            gc_mode: GcMode::ZeroMean,
            seed: 0,
            holdout_fraction: 0.2,
            class_weighting: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.weight_reg_coeff >= 0.0 && self.bias_reg_coeff >= 0.0) {
            return bad("regularization coefficients must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.rmsprop_rho) || !(self.rmsprop_eps > 0.0) {
            return bad("rmsprop_rho must be in [0,1) and rmsprop_eps positive".into());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad(format!("holdout_fraction must be in (0,1), got {}", self.holdout_fraction));
        }
        Ok(())
    }

    fn reg_for(&self, kind: ParamKind) -> (Regularizer, f64) {
        match kind {
            ParamKind::Weight => (self.weight_reg, self.weight_reg_coeff),
            ParamKind::Bias => (self.bias_reg, self.bias_reg_coeff),
        }
    }
}

/// Mean over the batch of `-sum targets * ln(probs + 1e-12)`.
pub fn cross_entropy_loss(probs: &Tensor, targets: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = tape.cross_entropy(p, targets, None)?;
    Ok(tape.value(l)[0])
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        t[i * num_classes + l] = 1.0;
    }
    t
}

fn penalty_of(reg: Regularizer, coeff: f64, data: &[f64]) -> f64 {
    let l1 = || data.iter().map(|v| v.abs()).sum::<f64>();
    let l2 = || data.iter().map(|v| v * v).sum::<f64>();
    coeff
        * match reg {
            Regularizer::None => 0.0,
            Regularizer::L1 => l1(),
            Regularizer::L2 => l2(),
            Regularizer::L1l2 => l1() + l2(),
        }
}

/// Penalty over `params` by their weight/bias tag.
pub fn regularization_penalty<'a>(params: impl IntoIterator<Item = &'a Parameter>, cfg: &TrainConfig) -> f64 {
    params
        .into_iter()
        .map(|p| {
            let (reg, coeff) = cfg.reg_for(p.kind);
            penalty_of(reg, coeff, p.data())
        })
        .sum()
}

/// Records the penalty of every parameter bound on `tape`. `None` when all
/// coefficients vanish.
pub fn regularization_on_tape(tape: &mut Tape, model: &Model, cfg: &TrainConfig) -> Option<Var> {
    let kinds: HashMap<&str, ParamKind> = model.params().into_iter().map(|p| (p.name.as_str(), p.kind)).collect();
    let bound: Vec<(String, Var)> = tape.bound_params().to_vec();
    let mut total: Option<Var> = None;
    for (name, v) in bound {
        let Some(&kind) = kinds.get(name.as_str()) else { continue };
        let (reg, coeff) = cfg.reg_for(kind);
        if coeff == 0.0 || reg == Regularizer::None {
            continue;
        }
        let term = match reg {
            Regularizer::L1 => tape.sum_abs(v),
            Regularizer::L2 => tape.sum_sq(v),
            Regularizer::L1l2 => {
                let a = tape.sum_abs(v);
                let b = tape.sum_sq(v);
                tape.add(a, b).expect("scalars")
            }
            Regularizer::None => unreachable!(),
        };
        let term = tape.scale(term, coeff);
        total = Some(match total {
            Some(t) => tape.add(t, term).expect("scalars"),
            None => term,
        });
    }
    total
}

/// Centralizes `grad` of a parameter with `shape`. Slices run over every
/// axis but the last (output) one. Rank-1 tensors are returned unchanged.
pub fn gradient_centralize(grad: &[f64], shape: &[usize], mode: GcMode) -> Vec<f64> {
    let mut g = grad.to_vec();
    if mode == GcMode::Off || shape.len() < 2 {
        return g;
    }
    let cout = *shape.last().unwrap();
    let rows = g.len() / cout;
    for j in 0..cout {
        let mean = (0..rows).map(|r| g[r * cout + j]).sum::<f64>() / rows as f64;
        let scale = match mode {
            GcMode::Zscore => {
                let var = (0..rows).map(|r| (g[r * cout + j] - mean).powi(2)).sum::<f64>() / rows as f64;
                1.0 / (var.sqrt() + 1e-8)
            }
            _ => 1.0,
        };
        for r in 0..rows {
            let v = &mut g[r * cout + j];
            *v = (*v - mean) * scale;
        }
    }
    g
}

/// RMSProp without momentum or centering.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub rho: f64,
    pub eps: f64,
    pub accumulators: BTreeMap<String, Vec<f64>>,
    pub steps: u64,
}

impl RmsProp {
    pub fn new(learning_rate: f64, rho: f64, eps: f64) -> Self {
        Self {
            learning_rate,
            rho,
            eps,
            accumulators: BTreeMap::new(),
            steps: 0,
        }
    }

    /// Applies one step. Every gradient is checked before any parameter is
    /// touched; a non-finite one aborts with the parameter's name.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Parameter>,
        grads: &HashMap<String, Vec<f64>>,
    ) -> Result<()> {
        let params: Vec<&mut Parameter> = params.into_iter().collect();
        for p in &params {
            if let Some(g) = grads.get(&p.name) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient { param: p.name.clone() });
                }
            }
        }
        for p in params {
            let Some(g) = grads.get(&p.name) else { continue };
            let acc = self
                .accumulators
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((w, a), &gi) in p.data_mut().iter_mut().zip(acc.iter_mut()).zip(g) {
                *a = self.rho * *a + (1.0 - self.rho) * gi * gi;
                *w -= self.learning_rate * gi / (a.sqrt() + self.eps);
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Images and labels held as one `[N, H, W, 3]` tensor.
#[derive(Debug, Clone)]
pub struct Examples {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Examples {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let t = Tensor::new(vec![idx.len(), s[1], s[2], s[3]], data).expect("batch shape");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// `n / (C * count_c)`; classes without samples get weight 1.
pub fn inverse_frequency_weights(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                1.0
            } else {
                labels.len() as f64 / (num_classes * c) as f64
            }
        })
        .collect()
}

/// Eval-mode probabilities, batched.
pub fn predict(model: &Model, set: &Examples, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let c = model.config().num_classes;
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = set.batch(chunk);
        let probs = model.infer(&x)?.probs;
        out.extend(probs.data().chunks(c).map(<[f64]>::to_vec));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
    /// Seconds since the Unix epoch (wall clock).
    pub timestamp: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Checkpoint bytes of the model after `best_epoch`.
    pub best_checkpoint: Vec<u8>,
}

/// Data loss (and the total objective) of one training batch, with
/// gradients left on the tape.
pub fn training_objective(
    tape: &mut Tape,
    model: &mut Model,
    images: Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    class_weights: Option<&[f64]>,
) -> Result<(Var, Var)> {
    let c = model.config().num_classes;
    let x = tape.constant(images);
    let fwd = model.forward(tape, x)?;
    let data = tape.cross_entropy(fwd.probs, &one_hot(labels, c), class_weights)?;
    let total = match regularization_on_tape(tape, model, cfg) {
        Some(pen) => tape.add(data, pen)?,
        None => data,
    };
    Ok((data, total))
}

/// Gradients summed per parameter name.
pub fn collect_grads(tape: &Tape) -> HashMap<String, Vec<f64>> {
    let mut out: HashMap<String, Vec<f64>> = HashMap::new();
    for (name, g) in tape.param_grads() {
        match out.get_mut(&name) {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => {
                out.insert(name, g);
            }
        }
    }
    out
}

// the browser target has no system clock
#[cfg(target_arch = "wasm32")]
fn now() -> f64 {
    0.0
}

#[cfg(not(target_arch = "wasm32"))]
fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Trains `model` on `train`, evaluating on `val` after every epoch and
/// keeping the checkpoint with the best validation accuracy. `on_epoch`
/// sees each log entry as soon as it is produced.
pub fn fit(
    model: &mut Model,
    train: &Examples,
    val: &Examples,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let c = model.config().num_classes;
    if let Some(&l) = train.labels.iter().chain(&val.labels).find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {l} out of range for a {c}-class model")));
    }
    let weights = cfg.class_weighting.then(|| inverse_frequency_weights(&train.labels, c));
    let mut opt = RmsProp::new(cfg.learning_rate, cfg.rmsprop_rho, cfg.rmsprop_eps);
    model.reseed_dropout(Rng::derive(cfg.seed, 3));
    let val_targets = one_hot(&val.labels, c);

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<u8>)> = None;
    for epoch in 1..=cfg.epochs {
        model.set_mode(Mode::Train);
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::new(Rng::derive(cfg.seed, 1000 + epoch as u64)).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            let mut tape = Tape::new();
            let (data, total) = training_objective(&mut tape, model, x, &y, cfg, weights.as_deref())?;
            tape.backward(total)?;
            loss_sum += tape.value(data)[0] * chunk.len() as f64;
            let mut grads = collect_grads(&tape);
            for p in model.params() {
                if p.kind == ParamKind::Weight {
                    if let Some(g) = grads.get_mut(&p.name) {
                        *g = gradient_centralize(g, p.shape(), cfg.gc_mode);
                    }
                }
            }
            opt.step(model.params_mut(), &grads)?;
        }
        model.set_mode(Mode::Eval);

        let probs = predict(model, val, cfg.batch_size)?;
        let flat = Tensor::new(vec![val.len(), c], probs.concat())?;
        let val_loss = cross_entropy_loss(&flat, &val_targets)?;
        let correct = probs
            .iter()
            .zip(&val.labels)
            .filter(|(p, &l)| argmax(p) == l)
            .count();
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_accuracy: correct as f64 / val.len() as f64,
            lr: cfg.learning_rate,
            timestamp: now(),
        };
        log::info!(
            "epoch {epoch}: train_loss {:.4} val_loss {:.4} val_acc {:.4}",
            entry.train_loss,
            entry.val_loss,
            entry.val_accuracy
        );
        if !entry.train_loss.is_finite() {
            return Err(Error::NonFiniteGradient { param: "loss".into() });
        }
        if best.as_ref().is_none_or(|b| entry.val_accuracy > b.1) {
            best = Some((epoch, entry.val_accuracy, checkpoint::to_bytes(model)?));
        }
        on_epoch(&entry);
        log.push(entry);
    }
    let (best_epoch, best_val_accuracy, best_checkpoint) =
        best.ok_or_else(|| Error::Config("epochs must be at least 1".into()))?;
    Ok(FitOutcome {
        log,
        best_epoch,
        best_val_accuracy,
        best_checkpoint,
    })
}
