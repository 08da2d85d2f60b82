//! Attention blocks that sit between the backbone and the classification
//! head. Every variant maps an `[N, H, W, D]` map to one of the same shape.

mod baselines;
mod gcg;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use baselines::{SpatialParams, SqueezeExcitationParams};
pub use gcg::{
    channel_correlation, context_formulation, gcg_forward, guide_fuse, guided_gating, AttentionArtifacts,
    ContextParams, ContextVars, GateMode, GatingParams, GatingVars, GcgConfig, GcgParams, GcgTrace, GcgVars,
    NormOrder,
};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Parameter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    None,
    Spatial,
    ChannelSe,
    GlobalContext,
    Gated,
    Gcg,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 6] = [
        AttentionKind::None,
        AttentionKind::Spatial,
        AttentionKind::ChannelSe,
        AttentionKind::GlobalContext,
        AttentionKind::Gated,
        AttentionKind::Gcg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Spatial => "spatial",
            AttentionKind::ChannelSe => "channel_se",
            AttentionKind::GlobalContext => "global_context",
            AttentionKind::Gated => "gated",
            AttentionKind::Gcg => "gcg",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown attention kind `{s}` (expected one of none, spatial, channel_se, global_context, gated, gcg)"
                ))
            })
    }
}

/// Parameters of whichever attention variant a model uses.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionBlock {
    None,
    Spatial(SpatialParams),
    ChannelSe(SqueezeExcitationParams),
    /// Context formulation and channel correlation; the fused map `R_g` is
    /// the output.
    GlobalContext(ContextParams),
    /// The additive gate guided by `R` itself.
    Gated(GatingParams),
    Gcg(GcgParams),
}

/// Result of running an attention block on the tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub output: Var,
    /// Present for the full GCG block only.
    pub trace: Option<GcgTrace>,
}

impl AttentionBlock {
    pub fn init(kind: AttentionKind, prefix: &str, depth: usize, cfg: &GcgConfig, rng: &mut Rng) -> Self {
        match kind {
            AttentionKind::None => AttentionBlock::None,
            AttentionKind::Spatial => AttentionBlock::Spatial(SpatialParams::init(prefix, depth, rng)),
            AttentionKind::ChannelSe => {
                AttentionBlock::ChannelSe(SqueezeExcitationParams::init(prefix, depth, cfg.reduction, rng))
            }
            AttentionKind::GlobalContext => {
                AttentionBlock::GlobalContext(ContextParams::init(prefix, depth, cfg, rng))
            }
            AttentionKind::Gated => AttentionBlock::Gated(GatingParams::init(prefix, depth, cfg, rng)),
            AttentionKind::Gcg => AttentionBlock::Gcg(GcgParams::init(prefix, depth, cfg, rng)),
        }
    }

    pub fn kind(&self) -> AttentionKind {
        match self {
            AttentionBlock::None => AttentionKind::None,
            AttentionBlock::Spatial(_) => AttentionKind::Spatial,
            AttentionBlock::ChannelSe(_) => AttentionKind::ChannelSe,
            AttentionBlock::GlobalContext(_) => AttentionKind::GlobalContext,
            AttentionBlock::Gated(_) => AttentionKind::Gated,
            AttentionBlock::Gcg(_) => AttentionKind::Gcg,
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            AttentionBlock::None => vec![],
            AttentionBlock::Spatial(p) => p.params(),
            AttentionBlock::ChannelSe(p) => p.params(),
            AttentionBlock::GlobalContext(p) => p.params(),
            AttentionBlock::Gated(p) => p.params(),
            AttentionBlock::Gcg(p) => p.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            AttentionBlock::None => vec![],
            AttentionBlock::Spatial(p) => p.params_mut(),
            AttentionBlock::ChannelSe(p) => p.params_mut(),
            AttentionBlock::GlobalContext(p) => p.params_mut(),
            AttentionBlock::Gated(p) => p.params_mut(),
            AttentionBlock::Gcg(p) => p.params_mut(),
        }
    }

    /// Runs the block on `r` (`[N, H, W, D]`).
    pub fn forward(&self, tape: &mut Tape, r: Var, cfg: &GcgConfig) -> Result<AttentionOutput> {
        let plain = |output| AttentionOutput { output, trace: None };
        match self {
            AttentionBlock::None => Ok(plain(r)),
            AttentionBlock::Spatial(p) => p.forward(tape, r).map(|(_, out)| plain(out)),
            AttentionBlock::ChannelSe(p) => p.forward(tape, r).map(|(_, out)| plain(out)),
            AttentionBlock::GlobalContext(p) => {
                let vars = p.bind(tape);
                let (_, context) = context_formulation(tape, r, &vars)?;
                let tc = channel_correlation(tape, context, &vars, cfg.norm_order)?;
                guide_fuse(tape, r, tc).map(plain)
            }
            AttentionBlock::Gated(p) => {
                let vars = p.bind(tape);
                guided_gating(tape, r, r, &vars).map(|(_, out)| plain(out))
            }
            AttentionBlock::Gcg(p) => {
                let vars = p.bind(tape);
                let trace = gcg_forward(tape, r, &vars, cfg)?;
                Ok(AttentionOutput {
                    output: trace.output,
                    trace: Some(trace),
                })
            }
        }
    }
}

/// Runs a freshly initialized block of `kind` on `r`.
pub fn baseline_forward(
    tape: &mut Tape,
    r: Var,
    kind: AttentionKind,
    cfg: &GcgConfig,
    rng: &mut Rng,
) -> Result<Var> {
    let depth = *tape.shape(r).last().unwrap();
    let block = AttentionBlock::init(kind, "baseline", depth, cfg, rng);
    Ok(block.forward(tape, r, cfg)?.output)
}
