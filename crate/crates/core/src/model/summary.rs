use serde::Serialize;

use crate::model::config::{LayerSpec, ModelConfig};

/// Parameter and FLOP accounting derived from a [`ModelConfig`].
#[derive(Debug, Clone, Serialize)]
pub struct ModelSummary {
    pub parameter_count: usize,
    pub conv_layers: usize,
    #[serde(skip)]
    layers: Vec<LayerSpec>,
}

impl ModelSummary {
    /// Multiply–accumulate count ×2 over every convolution (including the
    /// gates' 1×1 convolutions on pooled vectors and the fusion conv) for
    /// an `height × width` input.
    pub fn flops_at(&self, height: usize, width: usize) -> u64 {
        self.layers.iter().map(|l| l.flops(height, width)).sum()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }
}

pub fn summarize(config: &ModelConfig) -> ModelSummary {
    let layers = config.layers();
    ModelSummary {
        parameter_count: layers.iter().map(LayerSpec::params).sum(),
        conv_layers: layers.len(),
        layers,
    }
}
