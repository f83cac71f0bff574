//! The network: convolutional backbone, proposal encoder, and the stacked
//! decoder layers that refine sub-contours.

pub mod attention;
pub mod backbone;
pub mod decoder;
pub mod encoder;

pub use attention::{max_attention_dim, reset_attention_stats, DeformableAttention, FeatureLevel};
pub use backbone::Backbone;
pub use decoder::{
    compose_queries, load_checkpoint, save_checkpoint, DenoiseInput, ForwardOutput, LayerTensors,
    Model, QueryBank,
};
pub use encoder::{Encoder, EncoderOutput};

use crate::error::{Error, Result};
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Points per contour.
    pub nv: usize,
    /// Sub-contours per instance.
    pub nc: usize,
    /// Instance queries.
    pub nq: usize,
    /// Embedding width.
    pub d: usize,
    /// Decoder layers.
    pub layers: usize,
    pub classes: usize,
    pub backbone_channels: [usize; 4],
    pub heads: usize,
    /// Deformable sampling points per head per level.
    pub sampling_points: usize,
    /// Bins in each refinement distribution (odd).
    pub bins: usize,
    pub w_max: f64,
    pub curvature: f64,
    /// Restrict cross-attention to each sub-contour's own box; when off the
    /// full instance box is used for every sub-contour.
    pub box_restricted_attention: bool,
    /// Distribution-based refinement; when off each layer regresses
    /// coordinate offsets directly.
    pub cfdr_enabled: bool,
    /// Two factored self-attention passes; when off a single joint
    /// attention runs over all working queries.
    pub decoupled_self_attention: bool,
    /// Scale decoded offsets by the sub-contour box; when false the
    /// instance box is used.
    pub scale_by_subcontour: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            nv: 64,
            nc: 8,
            nq: 300,
            d: 128,
            layers: 4,
            classes: 5,
            backbone_channels: [32, 64, 128, 256],
            heads: 8,
            sampling_points: 4,
            bins: 17,
            w_max: 0.5,
            curvature: 2.0,
            box_restricted_attention: true,
            cfdr_enabled: true,
            decoupled_self_attention: true,
            scale_by_subcontour: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nc == 0 || self.nv % self.nc != 0 {
            return Err(Error::Config(format!(
                "nc ({}) must divide nv ({})",
                self.nc, self.nv
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("need at least one decoder layer".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide embedding width ({})",
                self.heads, self.d
            )));
        }
        if self.d % 8 != 0 {
            return Err(Error::Config("embedding width must be divisible by 8".into()));
        }
        if self.bins % 2 == 0 || self.bins < 3 {
            return Err(Error::Config(format!("bins must be odd and >= 3, got {}", self.bins)));
        }
        if self.nq == 0 || self.classes == 0 {
            return Err(Error::Config("nq and classes must be positive".into()));
        }
        Ok(())
    }
}

/// Layer normalization over the last axis, written with plain tensor ops
/// so it runs in both single and double precision.
pub struct Norm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl Norm {
    pub fn new(d: usize, vb: candle_nn::VarBuilder) -> Result<Self> {
        Ok(Norm {
            weight: vb.get_with_hints(d, "weight", candle_nn::Init::Const(1.0))?,
            bias: vb.get_with_hints(d, "bias", candle_nn::Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let mean = x.mean_keepdim(last)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(last)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

/// Sine-encode box coordinates `[..., 4]` into `[..., d]`: each coordinate
/// gets d/8 (sin, cos) pairs over a geometric frequency ladder.
pub fn box_pos_encoding(boxes: &Tensor, d: usize) -> Result<Tensor> {
    let n_freq = d / 8;
    let device = boxes.device();
    let dtype = boxes.dtype();
    let freqs: Vec<f64> = (0..n_freq)
        .map(|k| {
            2.0 * std::f64::consts::PI / 10000f64.powf(k as f64 / n_freq as f64)
        })
        .collect();
    let freqs = Tensor::from_vec(freqs, n_freq, device)?.to_dtype(dtype)?;
    let scaled = boxes.unsqueeze(boxes.rank())?.broadcast_mul(&freqs)?;
    let enc = Tensor::cat(&[scaled.sin()?, scaled.cos()?], scaled.rank() - 1)?;
    let mut shape = boxes.dims().to_vec();
    shape.pop();
    shape.push(d);
    Ok(enc.reshape(shape)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.nc = 7));
        assert!(bad(|c| c.layers = 0));
        assert!(bad(|c| c.heads = 7));
        assert!(bad(|c| c.bins = 16));
        assert!(bad(|c| c.nq = 0));
    }

    #[test]
    fn pos_encoding_shape_and_distinctness() {
        let boxes = Tensor::from_vec(
            vec![0.5f64, 0.5, 0.2, 0.2, 0.7, 0.3, 0.1, 0.4],
            (2, 4),
            &Device::Cpu,
        )
        .unwrap();
        let enc = box_pos_encoding(&boxes, 64).unwrap();
        assert_eq!(enc.dims(), &[2, 64]);
        let v = enc.to_vec2::<f64>().unwrap();
        let diff: f64 = v[0].iter().zip(&v[1]).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.1, "distinct boxes must encode differently");
    }
}
