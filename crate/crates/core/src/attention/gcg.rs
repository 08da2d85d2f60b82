//! Guided Context Gating: context formulation, channel correlation, guide
//! fusion and guided gating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamKind, Parameter, Tensor};

/// Order of the non-linearity and the layer norm inside the channel
/// correlation bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    /// `LayerNorm(ReLU(delta))`
    #[default]
    ReluThenNorm,
    /// `ReLU(LayerNorm(delta))`, as in global-context blocks.
    NormThenRelu,
}

/// Granularity of the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// One coefficient per spatial position, shared by all channels.
    #[default]
    PerPosition,
    /// One coefficient per position and channel.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcgConfig {
    /// Bottleneck width is `ceil(depth / reduction)`.
    pub reduction: usize,
    /// Width of the gating intermediate; `None` means `depth / 2`.
    pub inner_width: Option<usize>,
    pub norm_order: NormOrder,
    pub gate: GateMode,
}

impl Default for GcgConfig {
    fn default() -> Self {
        Self {
            reduction: 4,
            inner_width: None,
            norm_order: NormOrder::ReluThenNorm,
            gate: GateMode::PerPosition,
        }
    }
}

impl GcgConfig {
    pub fn bottleneck(&self, depth: usize) -> usize {
        depth.div_ceil(self.reduction.max(1)).max(1)
    }

    pub fn inner(&self, depth: usize) -> usize {
        self.inner_width.unwrap_or(depth / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 {
            return Err(Error::Config("gcg.reduction must be >= 1".into()));
        }
        if self.inner_width == Some(0) {
            return Err(Error::Config("gcg.inner_width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parameters of context formulation and channel correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextParams {
    /// `D x 1` point-wise conv producing the spatial attention logits.
    pub context_conv: Parameter,
    /// `D x k` bottleneck in.
    pub bottleneck_in: Parameter,
    pub ln_scale: Parameter,
    pub ln_shift: Parameter,
    /// `k x D` bottleneck out.
    pub bottleneck_out: Parameter,
}

/// Parameters of the additive gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingParams {
    /// `D x D_int`, applied to the features.
    pub gate_x: Parameter,
    /// `D x D_int`, applied to the guiding signal.
    pub gate_g: Parameter,
    pub gate_bias: Parameter,
    /// `D_int x 1` (or `D_int x D` per channel).
    pub psi: Parameter,
    pub psi_bias: Parameter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcgParams {
    pub context: ContextParams,
    pub gating: GatingParams,
}

impl ContextParams {
    pub fn init(prefix: &str, depth: usize, cfg: &GcgConfig, rng: &mut Rng) -> Self {
        let k = cfg.bottleneck(depth);
        Self {
            context_conv: Parameter::kaiming(format!("{prefix}.context_conv.weight"), &[depth, 1], depth, rng),
            bottleneck_in: Parameter::kaiming(format!("{prefix}.bottleneck_in.weight"), &[depth, k], depth, rng),
            ln_scale: Parameter::ones(format!("{prefix}.ln.scale"), &[k], ParamKind::Weight),
            ln_shift: Parameter::zeros(format!("{prefix}.ln.shift"), &[k], ParamKind::Bias),
            bottleneck_out: Parameter::kaiming(format!("{prefix}.bottleneck_out.weight"), &[k, depth], k, rng),
        }
    }

    pub fn depth(&self) -> usize {
        self.context_conv.shape()[0]
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.context_conv,
            &self.bottleneck_in,
            &self.ln_scale,
            &self.ln_shift,
            &self.bottleneck_out,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.context_conv,
            &mut self.bottleneck_in,
            &mut self.ln_scale,
            &mut self.ln_shift,
            &mut self.bottleneck_out,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> ContextVars {
        ContextVars {
            context_conv: tape.param(&self.context_conv),
            bottleneck_in: tape.param(&self.bottleneck_in),
            ln_scale: tape.param(&self.ln_scale),
            ln_shift: tape.param(&self.ln_shift),
            bottleneck_out: tape.param(&self.bottleneck_out),
        }
    }
}

impl GatingParams {
    pub fn init(prefix: &str, depth: usize, cfg: &GcgConfig, rng: &mut Rng) -> Self {
        let inner = cfg.inner(depth);
        let psi_out = match cfg.gate {
            GateMode::PerPosition => 1,
            GateMode::PerChannel => depth,
        };
        Self {
            gate_x: Parameter::kaiming(format!("{prefix}.gate_x.weight"), &[depth, inner], depth, rng),
            gate_g: Parameter::kaiming(format!("{prefix}.gate_g.weight"), &[depth, inner], depth, rng),
            gate_bias: Parameter::zeros(format!("{prefix}.gate.bias"), &[inner], ParamKind::Bias),
            psi: Parameter::kaiming(format!("{prefix}.psi.weight"), &[inner, psi_out], inner, rng),
            psi_bias: Parameter::zeros(format!("{prefix}.psi.bias"), &[psi_out], ParamKind::Bias),
        }
    }

    pub fn depth(&self) -> usize {
        self.gate_x.shape()[0]
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.gate_x, &self.gate_g, &self.gate_bias, &self.psi, &self.psi_bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.gate_x,
            &mut self.gate_g,
            &mut self.gate_bias,
            &mut self.psi,
            &mut self.psi_bias,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> GatingVars {
        GatingVars {
            gate_x: tape.param(&self.gate_x),
            gate_g: tape.param(&self.gate_g),
            gate_bias: tape.param(&self.gate_bias),
            psi: tape.param(&self.psi),
            psi_bias: tape.param(&self.psi_bias),
        }
    }
}

impl GcgParams {
    pub fn init(prefix: &str, depth: usize, cfg: &GcgConfig, rng: &mut Rng) -> Self {
        Self {
            context: ContextParams::init(prefix, depth, cfg, rng),
            gating: GatingParams::init(prefix, depth, cfg, rng),
        }
    }

    /// All weights zero, layer norm at identity affine.
    pub fn zeroed(prefix: &str, depth: usize, cfg: &GcgConfig) -> Self {
        let mut p = Self::init(prefix, depth, cfg, &mut Rng::new(0));
        for param in p.params_mut() {
            if !param.name.ends_with("ln.scale") {
                param.data_mut().fill(0.0);
            }
        }
        p
    }

    pub fn depth(&self) -> usize {
        self.context.depth()
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = self.context.params();
        v.extend(self.gating.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.context.params_mut();
        v.extend(self.gating.params_mut());
        v
    }

    pub fn bind(&self, tape: &mut Tape) -> GcgVars {
        GcgVars {
            context: self.context.bind(tape),
            gating: self.gating.bind(tape),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ContextVars {
    pub context_conv: Var,
    pub bottleneck_in: Var,
    pub ln_scale: Var,
    pub ln_shift: Var,
    pub bottleneck_out: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GatingVars {
    pub gate_x: Var,
    pub gate_g: Var,
    pub gate_bias: Var,
    pub psi: Var,
    pub psi_bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GcgVars {
    pub context: ContextVars,
    pub gating: GatingVars,
}

/// Tape handles of every intermediate of one GCG pass.
#[derive(Debug, Clone, Copy)]
pub struct GcgTrace {
    /// `[N, H, W]` softmax over positions.
    pub spatial_map: Var,
    /// `[N, D]`
    pub context: Var,
    /// `[N, D]`
    pub transformed_context: Var,
    /// `[N, H, W, D]` guiding signal.
    pub guide: Var,
    /// `[N, H, W, 1]` (or `[N, H, W, D]` per channel).
    pub gate: Var,
    /// `[N, H, W, D]`
    pub output: Var,
}

fn feature_dims(tape: &Tape, r: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let s = tape.shape(r);
    if s.len() != 4 {
        return Err(Error::Rank {
            op,
            expected: 4,
            shape: s.to_vec(),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Global attention pooling: softmax over all positions of `R . W_c`, then
/// the attention-weighted sum of `R`. Returns `(spatial_map, context)`.
pub fn context_formulation(tape: &mut Tape, r: Var, p: &ContextVars) -> Result<(Var, Var)> {
    let (n, h, w, d) = feature_dims(tape, r, "context_formulation")?;
    let expected = tape.shape(p.context_conv)[0];
    if d != expected {
        return Err(Error::dim("context_formulation", "depth", expected, d));
    }
    let logits = tape.linear(r, p.context_conv, None)?;
    let flat = tape.reshape(logits, vec![n, h * w])?;
    let weights = tape.softmax(flat, 1)?;
    let map = tape.reshape(weights, vec![n, h, w])?;
    let context = tape.weighted_spatial_sum(map, r)?;
    Ok((map, context))
}

/// Bottleneck transform of the context vector:
/// `W_t2^T . norm_relu(W_t1^T . context)`.
pub fn channel_correlation(tape: &mut Tape, context: Var, p: &ContextVars, order: NormOrder) -> Result<Var> {
    let delta = tape.linear(context, p.bottleneck_in, None)?;
    let theta = match order {
        NormOrder::ReluThenNorm => {
            let a = tape.relu(delta);
            tape.layer_norm(a, p.ln_scale, p.ln_shift)?
        }
        NormOrder::NormThenRelu => {
            let a = tape.layer_norm(delta, p.ln_scale, p.ln_shift)?;
            tape.relu(a)
        }
    };
    tape.linear(theta, p.bottleneck_out, None)
}

/// `R_g = R + transformed_context` at every position.
pub fn guide_fuse(tape: &mut Tape, r: Var, transformed_context: Var) -> Result<Var> {
    tape.broadcast_add_channel(r, transformed_context)
}

/// Additive gate: `sigmoid(psi^T relu(W_x^T r + W_g^T g + b) + b_psi)`, then
/// the gate times `R`. Returns `(gate, output)`.
pub fn guided_gating(tape: &mut Tape, r: Var, guide: Var, p: &GatingVars) -> Result<(Var, Var)> {
    feature_dims(tape, r, "guided_gating")?;
    let (rs, gs) = (tape.shape(r).to_vec(), tape.shape(guide).to_vec());
    if let Some(axis) = (0..4).find(|&i| rs.get(i) != gs.get(i)) {
        let names = ["batch", "height", "width", "depth"];
        return Err(Error::dim(
            "guided_gating",
            names[axis],
            rs[axis],
            gs.get(axis).copied().unwrap_or(0),
        ));
    }
    let from_r = tape.linear(r, p.gate_x, None)?;
    let from_g = tape.linear(guide, p.gate_g, Some(p.gate_bias))?;
    let joint = tape.add(from_r, from_g)?;
    let local = tape.relu(joint);
    let logits = tape.linear(local, p.psi, Some(p.psi_bias))?;
    let gate = tape.sigmoid(logits);
    let output = if tape.shape(gate)[3] == 1 {
        tape.scale_by_gate(r, gate)?
    } else {
        tape.mul(r, gate)?
    };
    Ok((gate, output))
}

/// Context formulation, channel correlation, guide fusion and guided gating
/// in sequence.
pub fn gcg_forward(tape: &mut Tape, r: Var, p: &GcgVars, cfg: &GcgConfig) -> Result<GcgTrace> {
    let (spatial_map, context) = context_formulation(tape, r, &p.context)?;
    let transformed_context = channel_correlation(tape, context, &p.context, cfg.norm_order)?;
    let guide = guide_fuse(tape, r, transformed_context)?;
    let (gate, output) = guided_gating(tape, r, guide, &p.gating)?;
    Ok(GcgTrace {
        spatial_map,
        context,
        transformed_context,
        guide,
        gate,
        output,
    })
}

/// Explainability payload of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionArtifacts {
    /// `H x W`
    pub spatial_map: Tensor,
    /// `D`
    pub context: Tensor,
    /// `D`
    pub transformed_context: Tensor,
    /// `H x W x 1` (or `H x W x D`)
    pub gate: Tensor,
    /// `H x W x D`
    pub output: Tensor,
}

fn sample_slice(tape: &Tape, v: Var, sample: usize) -> Tensor {
    let shape = tape.shape(v);
    let per = shape[1..].iter().product::<usize>();
    let data = tape.value(v)[sample * per..(sample + 1) * per].to_vec();
    Tensor::new(shape[1..].to_vec(), data).expect("slice matches shape")
}

impl AttentionArtifacts {
    pub fn extract(tape: &Tape, trace: &GcgTrace, sample: usize) -> Self {
        Self {
            spatial_map: sample_slice(tape, trace.spatial_map, sample),
            context: sample_slice(tape, trace.context, sample),
            transformed_context: sample_slice(tape, trace.transformed_context, sample),
            gate: sample_slice(tape, trace.gate, sample),
            output: sample_slice(tape, trace.output, sample),
        }
    }

    /// Gate collapsed to one value per position (channel mean for
    /// per-channel gates).
    pub fn gate_map(&self) -> Tensor {
        let s = self.gate.shape();
        let (h, w, c) = (s[0], s[1], s[2]);
        let data = self
            .gate
            .data()
            .chunks(c)
            .map(|g| g.iter().sum::<f64>() / c as f64)
            .collect();
        Tensor::new(vec![h, w], data).expect("gate map shape")
    }
}
