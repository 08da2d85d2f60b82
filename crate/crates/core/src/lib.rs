//! Guided Context Gating (GCG) attention on top of a small reverse-mode
//! autodiff engine, with training, evaluation metrics, attention heatmaps and
//! a synthetic lesion-image generator.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod pnm;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::{ParamKind, Parameter, Tensor};
