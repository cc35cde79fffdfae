use serde::{Deserialize, Serialize};

use crate::autodiff::ops::conv_out_len;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    #[serde(rename = "in")]
    pub in_channels: usize,
    #[serde(rename = "out")]
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerLayerSpec {
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_intermediate: usize,
}

/// Grouped convolutional positional embedding over the hidden dimension.
/// Only used for profiling; the trainable model does not implement it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionalConvSpec {
    pub kernel: usize,
    pub groups: usize,
}

/// Weight-free description of a conv frontend followed by a transformer encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub sample_rate: usize,
    pub conv_layers: Vec<ConvLayerSpec>,
    pub hidden: usize,
    pub transformer_layers: Vec<TransformerLayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positional_conv: Option<PositionalConvSpec>,
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("architecture: {msg}")));
        if self.sample_rate == 0 || self.hidden == 0 {
            return bad("sample_rate and hidden must be positive".into());
        }
        let mut prev_out = None;
        for (i, c) in self.conv_layers.iter().enumerate() {
            if c.in_channels == 0 || c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                return bad(format!("conv_layers[{i}] has a zero field"));
            }
            match prev_out {
                None if c.in_channels != 1 => {
                    return bad(format!("conv_layers[0].in must be 1 (raw waveform), got {}", c.in_channels))
                }
                Some(p) if c.in_channels != p => {
                    return bad(format!("conv_layers[{i}].in = {} but previous out = {p}", c.in_channels))
                }
                _ => {}
            }
            prev_out = Some(c.out_channels);
        }
        for (j, t) in self.transformer_layers.iter().enumerate() {
            if t.heads == 0 || t.head_dim == 0 || t.ffn_intermediate == 0 {
                return bad(format!("transformer_layers[{j}] has a zero field"));
            }
        }
        if let Some(p) = self.positional_conv {
            if p.kernel == 0 || p.groups == 0 || self.hidden % p.groups != 0 {
                return bad(format!("positional_conv {p:?} incompatible with hidden {}", self.hidden));
            }
        }
        Ok(())
    }

    /// Channels entering the projection to the hidden size.
    pub fn frontend_channels(&self) -> usize {
        self.conv_layers.last().map_or(1, |c| c.out_channels)
    }

    /// Output length of every conv layer for an input of `samples`.
    pub fn conv_lengths(&self, samples: usize) -> Result<Vec<usize>> {
        let mut t = samples;
        let mut out = Vec::with_capacity(self.conv_layers.len());
        for (i, c) in self.conv_layers.iter().enumerate() {
            if t < c.kernel {
                return Err(Error::Config(format!(
                    "input of {samples} samples is too short: conv_layers[{i}] sees {t} < kernel {}",
                    c.kernel
                )));
            }
            t = conv_out_len(t, c.kernel, c.stride);
            out.push(t);
        }
        Ok(out)
    }

    pub fn output_frames(&self, samples: usize) -> Result<usize> {
        Ok(self.conv_lengths(samples)?.last().copied().unwrap_or(samples))
    }

    /// Waveform samples spanned by `seconds` of audio.
    pub fn samples_for(&self, seconds: f64) -> usize {
        (seconds * self.sample_rate as f64).round() as usize
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: ArchDescriptor = serde_json::from_str(text)?;
        d.validate()?;
        Ok(d)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serializes")
    }
}

/// Desk-scale frontend + encoder used by the training pipeline. The
/// frontend runs at full input rate for two layers, so it carries about a
/// third of the MACs with an eighth of the parameters.
pub fn toy_descriptor() -> ArchDescriptor {
    let conv = |i, o, k, s| ConvLayerSpec { in_channels: i, out_channels: o, kernel: k, stride: s };
    ArchDescriptor {
        sample_rate: 1000,
        conv_layers: vec![conv(1, 16, 5, 1), conv(16, 16, 3, 1), conv(16, 16, 4, 4), conv(16, 16, 2, 2)],
        hidden: 32,
        transformer_layers: vec![
            TransformerLayerSpec { heads: 4, head_dim: 8, ffn_intermediate: 64 };
            2
        ],
        positional_conv: None,
    }
}

/// Shape of wav2vec2-base: seven 512-channel temporal convolutions and
/// twelve 768-wide transformer layers.
pub fn wav2vec2_base_descriptor() -> ArchDescriptor {
    let kernels = [10, 3, 3, 3, 3, 2, 2];
    let strides = [5, 2, 2, 2, 2, 2, 2];
    let conv_layers = kernels
        .iter()
        .zip(strides)
        .enumerate()
        .map(|(i, (&kernel, stride))| ConvLayerSpec {
            in_channels: if i == 0 { 1 } else { 512 },
            out_channels: 512,
            kernel,
            stride,
        })
        .collect();
    ArchDescriptor {
        sample_rate: 16_000,
        conv_layers,
        hidden: 768,
        transformer_layers: vec![
            TransformerLayerSpec { heads: 12, head_dim: 64, ffn_intermediate: 3072 };
            12
        ],
        positional_conv: Some(PositionalConvSpec { kernel: 128, groups: 16 }),
    }
}
