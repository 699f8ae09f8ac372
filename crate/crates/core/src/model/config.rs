use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Widths and hyperparameters of the dual-branch network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Number of down/up-sampling scales in each U-Net.
    pub depth: usize,
    /// Hidden width of the interaction gates (3 → hidden → 3).
    pub interaction_hidden: usize,
    /// Negative slope of the fusion LeakyReLU.
    pub leaky_slope: f32,
    /// Width at each scale; the last entry is the bottleneck.
    pub channel_schedule: Vec<usize>,
}

impl ModelConfig {
    /// Doubling schedule `base · 2^i` for `i = 0..=depth`.
    pub fn with_base(base_channels: usize, depth: usize) -> Self {
        Self {
            base_channels,
            depth,
            interaction_hidden: 16,
            leaky_slope: 0.2,
            channel_schedule: (0..=depth).map(|i| base_channels << i).collect(),
        }
    }

    pub fn toy() -> Self {
        Self::with_base(8, 4)
    }

    /// Full-size preset: base width 9 doubling over 4 scales, 2.48M parameters.
    pub fn paper() -> Self {
        Self::with_base(9, 4)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.channel_schedule.len() != self.depth + 1 {
            return Err(Error::Config(format!(
                "channel schedule has {} widths, depth {} needs {}",
                self.channel_schedule.len(),
                self.depth,
                self.depth + 1
            )));
        }
        if self.channel_schedule.contains(&0) || self.interaction_hidden == 0 {
            return Err(Error::Config("all widths must be >= 1".into()));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("leaky slope must be finite".into()));
        }
        Ok(())
    }

    /// Spatial dims must be positive multiples of `2^depth`.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let m = self.multiple();
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::Shape(format!(
                "input {height}x{width} not divisible by 2^{} = {m}",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn multiple(&self) -> usize {
        1 << self.depth
    }

    /// Every convolution of one improved U-Net, in forward order.
    pub fn iunet_layers(&self) -> Vec<LayerSpec> {
        let w = &self.channel_schedule;
        let d = self.depth;
        let mut out = Vec::with_capacity(4 * d + 2);
        for i in 0..d {
            let cin = if i == 0 { 3 } else { w[i - 1] };
            out.push(LayerSpec::conv(format!("enc{i}.conv1"), cin, w[i], 3, i));
            out.push(LayerSpec::conv(format!("enc{i}.conv2"), w[i], w[i], 3, i));
        }
        out.push(LayerSpec::conv("bottleneck.conv1".into(), w[d - 1], w[d], 3, d));
        out.push(LayerSpec::conv("bottleneck.conv2".into(), w[d], w[d], 3, d));
        for i in (0..d).rev() {
            let up = w[i + 1];
            let skip = if i == 0 { 3 } else { w[i] };
            let cout = if i == 0 { 3 } else { w[i] };
            out.push(LayerSpec::conv(format!("dec{i}.conv1"), up + skip, w[i], 3, i));
            out.push(LayerSpec::conv(format!("dec{i}.conv2"), w[i], cout, 3, i));
        }
        out
    }

    /// Every convolution of the whole network with hierarchical names.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        for net in ["upper.dn", "upper.wrn", "lower.dw1", "lower.dw2"] {
            out.extend(self.iunet_layers().into_iter().map(|l| l.prefixed(net)));
        }
        for gate in ["interaction1", "interaction2"] {
            out.push(LayerSpec::pooled(format!("{gate}.conv1"), 3, self.interaction_hidden));
            out.push(LayerSpec::pooled(format!("{gate}.conv2"), self.interaction_hidden, 3));
        }
        out.push(LayerSpec::conv("em.conv".into(), 6, 3, 3, 0));
        out
    }
}

/// Resolution a layer runs at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    /// Input size divided by `2^s`.
    Scale(usize),
    /// Globally pooled 1×1 map.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub resolution: Resolution,
}

impl LayerSpec {
    fn conv(name: String, c_in: usize, c_out: usize, kernel: usize, scale: usize) -> Self {
        Self {
            name,
            c_in,
            c_out,
            kernel,
            resolution: Resolution::Scale(scale),
        }
    }

    fn pooled(name: String, c_in: usize, c_out: usize) -> Self {
        Self {
            name,
            c_in,
            c_out,
            kernel: 1,
            resolution: Resolution::Pooled,
        }
    }

    fn prefixed(mut self, prefix: &str) -> Self {
        self.name = format!("{prefix}.{}", self.name);
        self
    }

    pub fn params(&self) -> usize {
        self.kernel * self.kernel * self.c_in * self.c_out + self.c_out
    }

    /// `2 · k² · C_in · C_out · H_out · W_out`.
    pub fn flops(&self, height: usize, width: usize) -> u64 {
        let pixels = match self.resolution {
            Resolution::Scale(s) => (height >> s) * (width >> s),
            Resolution::Pooled => 1,
        };
        2 * (self.kernel * self.kernel * self.c_in * self.c_out * pixels) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iunet_has_18_convolutions_at_depth_4() {
        assert_eq!(ModelConfig::toy().iunet_layers().len(), 18);
        // 2·depth encoder + 2 bottleneck + 2·depth decoder
        for d in 1..6 {
            assert_eq!(ModelConfig::with_base(4, d).iunet_layers().len(), 4 * d + 2);
        }
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::toy().validate().is_ok());
        let mut bad = ModelConfig::toy();
        bad.channel_schedule.pop();
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::toy();
        bad.depth = 0;
        bad.channel_schedule = vec![8];
        assert!(bad.validate().is_err());
        assert!(ModelConfig::toy().check_input(64, 48).is_ok());
        assert!(ModelConfig::toy().check_input(64, 40).is_err());
        assert!(ModelConfig::toy().check_input(0, 16).is_err());
    }
}
