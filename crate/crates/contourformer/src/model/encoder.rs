//! Encoder: projects backbone maps to the embedding width, runs one
//! deformable attention layer on the stride-16 map, fuses laterally into
//! the other scales, and proposes the top-Nq query initializations.

use super::attention::{DeformableAttention, FeatureLevel};
use super::{box_pos_encoding, ModelConfig};
use crate::error::Result;
use candle_core::{DType, Tensor};
use candle_nn::{conv2d, linear, Conv2d, Conv2dConfig, Linear, Module, VarBuilder};
use super::Norm;

/// Per-level anchor box side, normalized: small boxes on the fine map.
const ANCHOR_SIZES: [f64; 3] = [0.05, 0.1, 0.2];

pub struct EncoderOutput {
    /// Class logits of the selected proposals, `[b, nq, classes]`.
    pub class_logits: Tensor,
    /// Proposal boxes (center-size, normalized), `[b, nq, 4]`.
    pub boxes: Tensor,
    /// Content queries for the decoder, `[b, nq, d]`.
    pub queries: Tensor,
    /// Fused multi-scale feature levels (strides 8, 16, 32).
    pub levels: Vec<FeatureLevel>,
}

pub struct Encoder {
    proj8: Conv2d,
    proj16: Conv2d,
    proj32: Conv2d,
    attn: DeformableAttention,
    norm_attn: Norm,
    ffn1: Linear,
    ffn2: Linear,
    norm_ffn: Norm,
    fuse_up: Conv2d,
    fuse_down: Conv2d,
    class_head: Linear,
    box_head: Linear,
    query_proj: Linear,
    query_norm: Norm,
    nq: usize,
    d: usize,
}

fn inverse_sigmoid(x: f64) -> f64 {
    let x = x.clamp(1e-4, 1.0 - 1e-4);
    (x / (1.0 - x)).ln()
}

/// Flatten `[b, c, h, w]` to tokens `[b, h*w, c]`.
fn to_tokens(map: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = map.dims4()?;
    Ok(map.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

fn token_anchors(h: usize, w: usize, side: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            v.extend_from_slice(&[
                (x as f64 + 0.5) / w as f64,
                (y as f64 + 0.5) / h as f64,
                side,
                side,
            ]);
        }
    }
    v
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let d = cfg.d;
        let one = Conv2dConfig::default();
        let stride2 = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let ch = cfg.backbone_channels;
        Ok(Encoder {
            proj8: conv2d(ch[2], d, 1, one, vb.pp("proj8"))?,
            proj16: conv2d(ch[3], d, 1, one, vb.pp("proj16"))?,
            proj32: conv2d(ch[3], d, 1, one, vb.pp("proj32"))?,
            attn: DeformableAttention::new(d, cfg.heads, cfg.sampling_points, 1, vb.pp("attn"))?,
            norm_attn: Norm::new(d, vb.pp("norm_attn"))?,
            ffn1: linear(d, 2 * d, vb.pp("ffn1"))?,
            ffn2: linear(2 * d, d, vb.pp("ffn2"))?,
            norm_ffn: Norm::new(d, vb.pp("norm_ffn"))?,
            fuse_up: conv2d(d, d, 1, one, vb.pp("fuse_up"))?,
            fuse_down: conv2d(d, d, 3, stride2, vb.pp("fuse_down"))?,
            class_head: linear(d, cfg.classes, vb.pp("class"))?,
            box_head: linear(d, 4, vb.pp("box"))?,
            query_proj: linear(d, d, vb.pp("query_proj"))?,
            query_norm: Norm::new(d, vb.pp("query_norm"))?,
            nq: cfg.nq,
            d,
        })
    }

    pub fn forward(&self, f8: &Tensor, f16: &Tensor, f32map: &Tensor) -> Result<EncoderOutput> {
        let p8 = self.proj8.forward(f8)?;
        let p16 = self.proj16.forward(f16)?;
        let p32 = self.proj32.forward(f32map)?;
        let (b, _, h16, w16) = p16.dims4()?;
        let dtype = p16.dtype();
        let device = p16.device();

        // one deformable self-attention layer over the stride-16 tokens
        let tokens16 = to_tokens(&p16)?;
        let anchors16 = Tensor::from_vec(
            token_anchors(h16, w16, ANCHOR_SIZES[1]),
            (h16 * w16, 4),
            device,
        )?
        .to_dtype(dtype)?;
        let boxes16 = anchors16.unsqueeze(0)?.broadcast_as((b, h16 * w16, 4))?.contiguous()?;
        let level16 = FeatureLevel {
            tokens: tokens16.clone(),
            h: h16,
            w: w16,
        };
        let q = tokens16.broadcast_add(&box_pos_encoding(&anchors16, self.d)?.unsqueeze(0)?)?;
        let x = (tokens16 + self.attn.forward(&q, &boxes16, &[level16])?)?;
        let x = self.norm_attn.forward(&x)?;
        let x = (&x + self.ffn2.forward(&self.ffn1.forward(&x)?.relu()?)?)?;
        let e16_tokens = self.norm_ffn.forward(&x)?;
        let e16 = e16_tokens
            .transpose(1, 2)?
            .reshape((b, self.d, h16, w16))?
            .contiguous()?;

        // lateral fusion into neighbouring scales
        let (_, _, h8, w8) = p8.dims4()?;
        let up = e16.upsample_nearest2d(h8, w8)?;
        let e8 = (p8 + self.fuse_up.forward(&up)?)?;
        let e32 = (p32 + self.fuse_down.forward(&e16)?)?;

        let levels = vec![
            FeatureLevel {
                tokens: to_tokens(&e8)?,
                h: h8,
                w: w8,
            },
            FeatureLevel {
                tokens: e16_tokens,
                h: h16,
                w: w16,
            },
            FeatureLevel {
                tokens: to_tokens(&e32)?,
                h: e32.dims4()?.2,
                w: e32.dims4()?.3,
            },
        ];

        self.propose(levels)
    }

    /// Score every token, decode its box relative to the level anchor, and
    /// keep the top-nq per image, sorted by descending score. When fewer
    /// tokens exist than nq, the sorted order is repeated cyclically.
    fn propose(&self, levels: Vec<FeatureLevel>) -> Result<EncoderOutput> {
        let dtype = levels[0].tokens.dtype();
        let device = levels[0].tokens.device().clone();
        let b = levels[0].tokens.dims3()?.0;
        let all_tokens = Tensor::cat(
            &levels.iter().map(|l| l.tokens.clone()).collect::<Vec<_>>(),
            1,
        )?;
        let n_total = all_tokens.dims3()?.1;
        let mut anchor_logits = Vec::with_capacity(n_total * 4);
        for (l, level) in levels.iter().enumerate() {
            for raw in token_anchors(level.h, level.w, ANCHOR_SIZES[l]).chunks(4) {
                for &v in raw {
                    anchor_logits.push(inverse_sigmoid(v));
                }
            }
        }
        let anchor_logits = Tensor::from_vec(anchor_logits, (n_total, 4), &device)?
            .to_dtype(dtype)?
            .unsqueeze(0)?;

        let class_logits = self.class_head.forward(&all_tokens)?; // [b, n, classes]
        let deltas = self.box_head.forward(&all_tokens)?;
        let boxes = candle_nn::ops::sigmoid(&deltas.broadcast_add(&anchor_logits)?)?;

        // ranking is done on detached scores; selection feeds gradients back
        // through index_select
        let scores = class_logits
            .detach()
            .max(2)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        let mut sel_tokens = Vec::with_capacity(b);
        let mut sel_boxes = Vec::with_capacity(b);
        let mut sel_logits = Vec::with_capacity(b);
        for (bi, row) in scores.iter().enumerate() {
            let mut order: Vec<usize> = (0..n_total).collect();
            order.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).unwrap_or(std::cmp::Ordering::Equal));
            let picked: Vec<u32> = (0..self.nq).map(|k| order[k % n_total] as u32).collect();
            let idx = Tensor::from_vec(picked, self.nq, &device)?;
            sel_tokens.push(all_tokens.get(bi)?.index_select(&idx, 0)?);
            sel_boxes.push(boxes.get(bi)?.index_select(&idx, 0)?);
            sel_logits.push(class_logits.get(bi)?.index_select(&idx, 0)?);
        }
        let tokens = Tensor::stack(&sel_tokens, 0)?;
        let queries = self.query_norm.forward(&self.query_proj.forward(&tokens)?)?;
        Ok(EncoderOutput {
            class_logits: Tensor::stack(&sel_logits, 0)?,
            boxes: Tensor::stack(&sel_boxes, 0)?,
            queries,
            levels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use candle_nn::{VarBuilder, VarMap};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            nq: 20,
            d: 32,
            heads: 4,
            backbone_channels: [8, 16, 32, 64],
            ..ModelConfig::default()
        }
    }

    fn build(cfg: &ModelConfig) -> (VarMap, Encoder) {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F64, &Device::Cpu);
        let enc = Encoder::new(cfg, vb.pp("enc")).unwrap();
        (varmap, enc)
    }

    fn random_maps(cfg: &ModelConfig, b: usize, h8: usize, w8: usize) -> (Tensor, Tensor, Tensor) {
        let d = &Device::Cpu;
        (
            Tensor::randn(0f64, 1.0, (b, cfg.backbone_channels[2], h8, w8), d).unwrap(),
            Tensor::randn(0f64, 1.0, (b, cfg.backbone_channels[3], h8 / 2, w8 / 2), d).unwrap(),
            Tensor::randn(0f64, 1.0, (b, cfg.backbone_channels[3], h8 / 4, w8 / 4), d).unwrap(),
        )
    }

    #[test]
    fn proposal_shapes_and_sorted_scores() {
        let cfg = small_cfg();
        let (_vm, enc) = build(&cfg);
        let (f8, f16, f32m) = random_maps(&cfg, 2, 8, 8);
        let out = enc.forward(&f8, &f16, &f32m).unwrap();
        assert_eq!(out.class_logits.dims(), &[2, 20, cfg.classes]);
        assert_eq!(out.boxes.dims(), &[2, 20, 4]);
        assert_eq!(out.queries.dims(), &[2, 20, 32]);
        assert_eq!(out.levels.len(), 3);
        // scores sorted descending per image
        let logits = out.class_logits.to_vec3::<f64>().unwrap();
        for img in &logits {
            let scores: Vec<f64> = img
                .iter()
                .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            for win in scores.windows(2) {
                assert!(win[0] >= win[1] - 1e-12);
            }
        }
        // boxes are valid normalized center-size
        let boxes = out.boxes.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(boxes.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn padding_on_tiny_maps() {
        // 4x4 stride-8 map: 16 + 4 + 1 = 21 tokens, fewer than nq=30
        let cfg = ModelConfig {
            nq: 30,
            ..small_cfg()
        };
        let (_vm, enc) = build(&cfg);
        let (f8, f16, f32m) = random_maps(&cfg, 1, 4, 4);
        let out = enc.forward(&f8, &f16, &f32m).unwrap();
        assert_eq!(out.boxes.dims(), &[1, 30, 4]);
        // padded entries repeat earlier selections cyclically
        let b = out.boxes.to_vec3::<f64>().unwrap();
        assert_eq!(b[0][0], b[0][21]);
    }

    #[test]
    fn deterministic_forward() {
        let cfg = small_cfg();
        let (_vm, enc) = build(&cfg);
        let (f8, f16, f32m) = random_maps(&cfg, 1, 8, 8);
        let a = enc.forward(&f8, &f16, &f32m).unwrap();
        let b = enc.forward(&f8, &f16, &f32m).unwrap();
        let av = a.queries.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bv = b.queries.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(av, bv);
    }
}
