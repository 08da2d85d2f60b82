//! Backbone, attention block and regularized classification head assembled
//! into one classifier.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionArtifacts, AttentionBlock, AttentionKind, GcgConfig, GcgTrace};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{ParamKind, Parameter, Tensor};

/// How the attended `H x W x D` map reaches the first dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bridge {
    #[default]
    AvgPool,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `(height, width, 3)`
    pub input_size: [usize; 3],
    /// Output channels of each conv stage; the last one is the feature depth.
    pub backbone_channels: Vec<usize>,
    pub attention: AttentionKind,
    pub gcg: GcgConfig,
    pub head_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub bridge: Bridge,
    /// Running-statistics momentum of every batch norm.
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: [64, 64, 3],
            backbone_channels: vec![16, 32, 64, 128],
            attention: AttentionKind::Gcg,
            gcg: GcgConfig::default(),
            head_widths: vec![512, 256],
            dropout_rate: 0.3,
            num_classes: 3,
            bridge: Bridge::AvgPool,
            bn_momentum: 0.99,
        }
    }
}

impl ModelConfig {
    /// 512x512 input reduced to a 16x16x1280 feature map.
    pub fn full_scale(num_classes: usize) -> Self {
        Self {
            input_size: [512, 512, 3],
            backbone_channels: vec![32, 64, 128, 256, 1280],
            num_classes,
            ..Self::default()
        }
    }

    pub fn feature_depth(&self) -> usize {
        self.backbone_channels.last().copied().unwrap_or(0)
    }

    /// Spatial size of the backbone output.
    pub fn feature_grid(&self) -> (usize, usize) {
        let mut h = self.input_size[0];
        let mut w = self.input_size[1];
        for _ in &self.backbone_channels {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size[2] != 3 {
            return Err(Error::Config(format!("input must have 3 channels, got {}", self.input_size[2])));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(Error::Config("backbone_channels must be non-empty and positive".into()));
        }
        if self.head_widths.contains(&0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn_momentum {} outside [0, 1)", self.bn_momentum)));
        }
        let (h, w) = self.feature_grid();
        if h < 2 || w < 2 {
            return Err(Error::Config(format!(
                "{} stages reduce {}x{} input to a {h}x{w} grid; at least 2x2 is required",
                self.backbone_channels.len(),
                self.input_size[0],
                self.input_size[1]
            )));
        }
        self.gcg.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Batch norm affine parameters with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(prefix: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::ones(format!("{prefix}.gamma"), &[channels], ParamKind::Weight),
            beta: Parameter::zeros(format!("{prefix}.beta"), &[channels], ParamKind::Bias),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn update(&mut self, stats: &BatchStats, momentum: f64) {
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = momentum * *r + (1.0 - momentum) * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = momentum * *r + (1.0 - momentum) * v;
        }
    }

    fn buffer_names(&self) -> (String, String) {
        let prefix = self.gamma.name.trim_end_matches(".gamma");
        (format!("{prefix}.running_mean"), format!("{prefix}.running_var"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub conv: Parameter,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    pub weight: Parameter,
    pub bias: Parameter,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weight: Parameter,
    pub bias: Parameter,
}

/// How dropout draws its keep decisions in train mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMasks {
    /// From the model's seeded generator.
    Sampled,
    /// Every unit kept.
    KeepAll,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub features: Var,
    pub attended: Var,
    pub logits: Var,
    pub probs: Var,
    pub trace: Option<GcgTrace>,
}

/// Eval-mode prediction for a batch.
#[derive(Debug, Clone)]
pub struct Inference {
    /// `[N, C]`
    pub probs: Tensor,
    /// Per-sample GCG artifacts (empty for other attention kinds).
    pub artifacts: Vec<AttentionArtifacts>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub backbone: Vec<ConvStage>,
    pub attention: AttentionBlock,
    pub head: Vec<DenseBlock>,
    pub classifier: Classifier,
    mode: Mode,
    dropout_rng: Rng,
}

impl Model {
    /// Builds a model with Kaiming-uniform weights, zero biases and identity
    /// norm affines. Same config and seed give identical parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(Rng::derive(seed, 1));
        let mut backbone = Vec::with_capacity(config.backbone_channels.len());
        let mut cin = config.input_size[2];
        for (i, &cout) in config.backbone_channels.iter().enumerate() {
            backbone.push(ConvStage {
                conv: Parameter::kaiming(format!("backbone.{i}.conv.weight"), &[3, 3, cin, cout], 9 * cin, &mut rng),
                bn: BatchNorm::new(&format!("backbone.{i}.bn"), cout),
            });
            cin = cout;
        }
        let depth = config.feature_depth();
        let attention = AttentionBlock::init(config.attention, "attention", depth, &config.gcg, &mut rng);
        let (gh, gw) = config.feature_grid();
        let mut width = match config.bridge {
            Bridge::AvgPool => depth,
            Bridge::Flatten => gh * gw * depth,
        };
        let mut head = Vec::with_capacity(config.head_widths.len());
        for (i, &out) in config.head_widths.iter().enumerate() {
            head.push(DenseBlock {
                weight: Parameter::kaiming(format!("head.{i}.dense.weight"), &[width, out], width, &mut rng),
                bias: Parameter::zeros(format!("head.{i}.dense.bias"), &[out], ParamKind::Bias),
                bn: BatchNorm::new(&format!("head.{i}.bn"), out),
            });
            width = out;
        }
        let classifier = Classifier {
            weight: Parameter::kaiming("classifier.weight", &[width, config.num_classes], width, &mut rng),
            bias: Parameter::zeros("classifier.bias", &[config.num_classes], ParamKind::Bias),
        };
        Ok(Self {
            config,
            backbone,
            attention,
            head,
            classifier,
            mode: Mode::Eval,
            dropout_rng: Rng::new(Rng::derive(seed, 2)),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = Rng::new(seed);
    }

    /// Every trainable parameter in registry order.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = Vec::new();
        for s in &self.backbone {
            v.extend([&s.conv, &s.bn.gamma, &s.bn.beta]);
        }
        v.extend(self.attention.params());
        for b in &self.head {
            v.extend([&b.weight, &b.bias, &b.bn.gamma, &b.bn.beta]);
        }
        v.extend([&self.classifier.weight, &self.classifier.bias]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = Vec::new();
        for s in &mut self.backbone {
            v.extend([&mut s.conv, &mut s.bn.gamma, &mut s.bn.beta]);
        }
        v.extend(self.attention.params_mut());
        for b in &mut self.head {
            v.extend([&mut b.weight, &mut b.bias, &mut b.bn.gamma, &mut b.bn.beta]);
        }
        v.extend([&mut self.classifier.weight, &mut self.classifier.bias]);
        v
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params().into_iter().find(|p| p.name == name)
    }

    fn norms(&self) -> Vec<&BatchNorm> {
        self.backbone.iter().map(|s| &s.bn).chain(self.head.iter().map(|b| &b.bn)).collect()
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        self.backbone
            .iter_mut()
            .map(|s| &mut s.bn)
            .chain(self.head.iter_mut().map(|b| &mut b.bn))
            .collect()
    }

    /// Batch-norm running statistics as `(name, values)`.
    pub fn buffers(&self) -> Vec<(String, &[f64])> {
        let mut v = Vec::new();
        for bn in self.norms() {
            let (m, s) = bn.buffer_names();
            v.push((m, bn.running_mean.as_slice()));
            v.push((s, bn.running_var.as_slice()));
        }
        v
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut v = Vec::new();
        for bn in self.norms_mut() {
            let (m, s) = bn.buffer_names();
            v.push((m, &mut bn.running_mean));
            v.push((s, &mut bn.running_var));
        }
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    fn check_images(&self, tape: &Tape, images: Var) -> Result<()> {
        let s = tape.shape(images);
        if s.len() != 4 {
            return Err(Error::Rank {
                op: "model input",
                expected: 4,
                shape: s.to_vec(),
            });
        }
        for (axis, name) in ["height", "width", "channels"].iter().enumerate() {
            if s[axis + 1] != self.config.input_size[axis] {
                return Err(Error::dim("model input", name, self.config.input_size[axis], s[axis + 1]));
            }
        }
        Ok(())
    }

    fn norm(
        tape: &mut Tape,
        bn: &BatchNorm,
        x: Var,
        train: bool,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let g = tape.param(&bn.gamma);
        let b = tape.param(&bn.beta);
        if train {
            let (y, s) = tape.batch_norm_train(x, g, b)?;
            stats.push(s);
            Ok(y)
        } else {
            tape.batch_norm_eval(x, g, b, &bn.running_mean, &bn.running_var)
        }
    }

    /// Stack of `conv3x3 -> batch norm -> ReLU -> 2x max pool` stages.
    pub fn backbone_forward(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        self.check_images(tape, images)?;
        let mut stats = Vec::new();
        self.backbone_impl(tape, images, false, &mut stats)
    }

    fn backbone_impl(&self, tape: &mut Tape, images: Var, train: bool, stats: &mut Vec<BatchStats>) -> Result<Var> {
        let mut x = images;
        for stage in &self.backbone {
            let w = tape.param(&stage.conv);
            let c = tape.conv3x3(x, w, None)?;
            let n = Self::norm(tape, &stage.bn, c, train, stats)?;
            let a = tape.relu(n);
            x = tape.max_pool2(a)?;
        }
        Ok(x)
    }

    fn bridge(&self, tape: &mut Tape, attended: Var) -> Result<Var> {
        match self.config.bridge {
            Bridge::AvgPool => tape.mean_spatial(attended),
            Bridge::Flatten => {
                let s = tape.shape(attended).to_vec();
                tape.reshape(attended, vec![s[0], s[1..].iter().product()])
            }
        }
    }

    fn head_impl(
        &self,
        tape: &mut Tape,
        features: Var,
        train: Option<(&mut Rng, DropoutMasks)>,
        stats: &mut Vec<BatchStats>,
    ) -> Result<(Var, Var)> {
        let is_train = train.is_some();
        let mut dropout = train;
        let mut x = features;
        for block in &self.head {
            let w = tape.param(&block.weight);
            let b = tape.param(&block.bias);
            let d = tape.linear(x, w, Some(b))?;
            let n = Self::norm(tape, &block.bn, d, is_train, stats)?;
            x = tape.relu(n);
            if let Some((rng, masks)) = dropout.as_mut() {
                if self.config.dropout_rate > 0.0 {
                    x = match masks {
                        DropoutMasks::Sampled => tape.dropout(x, self.config.dropout_rate, rng)?,
                        DropoutMasks::KeepAll => {
                            let len = tape.value(x).len();
                            tape.dropout_with_mask(x, vec![1.0; len])?
                        }
                    };
                }
            }
        }
        let w = tape.param(&self.classifier.weight);
        let b = tape.param(&self.classifier.bias);
        let logits = tape.linear(x, w, Some(b))?;
        let probs = tape.softmax(logits, 1)?;
        Ok((logits, probs))
    }

    /// Dense/BN/ReLU/dropout blocks then the softmax classifier, on `[N, D]`
    /// features (eval mode). Returns `(logits, probs)`.
    pub fn head_forward(&self, tape: &mut Tape, features: Var) -> Result<(Var, Var)> {
        self.head_impl(tape, features, None, &mut Vec::new())
    }

    fn run(&self, tape: &mut Tape, images: Var, train: Option<(&mut Rng, DropoutMasks)>) -> Result<(Forward, Vec<BatchStats>)> {
        self.check_images(tape, images)?;
        let is_train = train.is_some();
        let mut stats = Vec::new();
        let features = self.backbone_impl(tape, images, is_train, &mut stats)?;
        let att = self.attention.forward(tape, features, &self.config.gcg)?;
        let pooled = self.bridge(tape, att.output)?;
        let (logits, probs) = self.head_impl(tape, pooled, train, &mut stats)?;
        Ok((
            Forward {
                features,
                attended: att.output,
                logits,
                probs,
                trace: att.trace,
            },
            stats,
        ))
    }

    /// Forward pass in the current mode. In train mode batch statistics are
    /// used and folded into the running averages, and dropout masks are
    /// drawn from the model's generator; eval mode touches neither.
    pub fn forward(&mut self, tape: &mut Tape, images: Var) -> Result<Forward> {
        self.forward_with(tape, images, DropoutMasks::Sampled)
    }

    pub fn forward_with(&mut self, tape: &mut Tape, images: Var, masks: DropoutMasks) -> Result<Forward> {
        match self.mode {
            Mode::Eval => self.forward_eval(tape, images),
            Mode::Train => {
                let mut rng = self.dropout_rng.clone();
                let (fwd, stats) = self.run(tape, images, Some((&mut rng, masks)))?;
                self.dropout_rng = rng;
                let momentum = self.config.bn_momentum;
                for (bn, s) in self.norms_mut().into_iter().zip(&stats) {
                    bn.update(s, momentum);
                }
                Ok(fwd)
            }
        }
    }

    /// Eval-mode forward; never mutates the model.
    pub fn forward_eval(&self, tape: &mut Tape, images: Var) -> Result<Forward> {
        Ok(self.run(tape, images, None)?.0)
    }

    /// Eval-mode class probabilities and attention artifacts for a batch of
    /// `[N, H, W, 3]` (or a single `[H, W, 3]`) images.
    pub fn infer(&self, images: &Tensor) -> Result<Inference> {
        let images = if images.rank() == 3 {
            let mut s = vec![1];
            s.extend_from_slice(images.shape());
            images.clone().reshape(s)?
        } else {
            images.clone()
        };
        let n = images.shape()[0];
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let fwd = self.forward_eval(&mut tape, x)?;
        let artifacts = match fwd.trace {
            Some(tr) => (0..n).map(|i| AttentionArtifacts::extract(&tape, &tr, i)).collect(),
            None => Vec::new(),
        };
        Ok(Inference {
            probs: tape.tensor(fwd.probs),
            artifacts,
        })
    }
}
