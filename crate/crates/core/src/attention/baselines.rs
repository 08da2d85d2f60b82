//! Minimal representatives of the attention mechanisms GCG is compared
//! against. They are not reproductions of any published architecture.

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamKind, Parameter};

/// `sigmoid(R . w + b)` per position, times `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialParams {
    pub conv: Parameter,
    pub bias: Parameter,
}

impl SpatialParams {
    pub fn init(prefix: &str, depth: usize, rng: &mut Rng) -> Self {
        Self {
            conv: Parameter::kaiming(format!("{prefix}.spatial.weight"), &[depth, 1], depth, rng),
            bias: Parameter::zeros(format!("{prefix}.spatial.bias"), &[1], ParamKind::Bias),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.conv, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.conv, &mut self.bias]
    }

    pub fn forward(&self, tape: &mut Tape, r: Var) -> Result<(Var, Var)> {
        let w = tape.param(&self.conv);
        let b = tape.param(&self.bias);
        let logits = tape.linear(r, w, Some(b))?;
        let gate = tape.sigmoid(logits);
        let out = tape.scale_by_gate(r, gate)?;
        Ok((gate, out))
    }
}

/// Squeeze-and-excitation: average pool, bottleneck MLP, sigmoid channel
/// scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SqueezeExcitationParams {
    pub squeeze: Parameter,
    pub squeeze_bias: Parameter,
    pub excite: Parameter,
    pub excite_bias: Parameter,
}

impl SqueezeExcitationParams {
    pub fn init(prefix: &str, depth: usize, reduction: usize, rng: &mut Rng) -> Self {
        let k = depth.div_ceil(reduction.max(1)).max(1);
        Self {
            squeeze: Parameter::kaiming(format!("{prefix}.se.squeeze.weight"), &[depth, k], depth, rng),
            squeeze_bias: Parameter::zeros(format!("{prefix}.se.squeeze.bias"), &[k], ParamKind::Bias),
            excite: Parameter::kaiming(format!("{prefix}.se.excite.weight"), &[k, depth], k, rng),
            excite_bias: Parameter::zeros(format!("{prefix}.se.excite.bias"), &[depth], ParamKind::Bias),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.squeeze, &self.squeeze_bias, &self.excite, &self.excite_bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.squeeze,
            &mut self.squeeze_bias,
            &mut self.excite,
            &mut self.excite_bias,
        ]
    }

    /// Returns `(channel scale [N, D], output)`.
    pub fn forward(&self, tape: &mut Tape, r: Var) -> Result<(Var, Var)> {
        let w1 = tape.param(&self.squeeze);
        let b1 = tape.param(&self.squeeze_bias);
        let w2 = tape.param(&self.excite);
        let b2 = tape.param(&self.excite_bias);
        let pooled = tape.mean_spatial(r)?;
        let hidden = tape.linear(pooled, w1, Some(b1))?;
        let hidden = tape.relu(hidden);
        let logits = tape.linear(hidden, w2, Some(b2))?;
        let scale = tape.sigmoid(logits);
        let out = tape.broadcast_mul_channel(r, scale)?;
        Ok((scale, out))
    }
}
