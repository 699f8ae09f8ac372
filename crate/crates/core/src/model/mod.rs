//! Dual-branch watermark-removal network and its accounting.

mod config;
mod gate;
mod iunet;
mod pslnet;
mod summary;

pub use config::{LayerSpec, ModelConfig, Resolution};
pub use gate::{GateTrace, InteractionGate};
pub use iunet::{IUNet, IUNetTrace, Stage};
pub use pslnet::{Ablation, ForwardPass, OutputGrads, Pslnet, PslnetOutput};
pub use summary::{summarize, ModelSummary};
