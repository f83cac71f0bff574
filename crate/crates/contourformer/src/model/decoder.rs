//! Decoder: query composition, decoupled self-attention, box-restricted
//! cross-attention, and the per-layer contour refinement chain anchored at
//! ellipse-initialized contours.

use super::attention::{DeformableAttention, MultiHeadAttention};
use super::backbone::Backbone;
use super::encoder::{Encoder, EncoderOutput};
use super::{box_pos_encoding, ModelConfig, Norm};
use crate::assignment::{build_attention_mask, DenoisingGroup, LayerPrediction};
use crate::cfdr::{
    apply_refinement, refine_logits, weighting_values, DistributionState, WeightingTable,
};
use crate::error::{Error, Result};
use crate::eval::Prediction;
use crate::geometry::{subcontour_box, BBox, Contour, Point, BOX_FLOOR};
use candle_core::{DType, Device, Tensor};
use candle_nn::{
    embedding, linear, Embedding, Linear, Module, VarBuilder, VarMap,
};
use std::path::Path;

/// Learned query embeddings: per-instance plus per-sub-contour, composed
/// additively into the working set.
pub struct QueryBank {
    /// `[nq, d]`
    pub instance: Tensor,
    /// `[nc, d]`, shared across instances
    pub subcontour: Tensor,
}

/// Working queries `[nq*nc, d]` with entry `i*nc + j = instance[i] +
/// subcontour[j]`.
pub fn compose_queries(bank: &QueryBank) -> Result<Tensor> {
    let (nq, d) = bank.instance.dims2()?;
    let (nc, d2) = bank.subcontour.dims2()?;
    if d != d2 {
        return Err(Error::Contract(format!(
            "query widths differ: instance {d}, subcontour {d2}"
        )));
    }
    Ok(bank
        .instance
        .unsqueeze(1)?
        .broadcast_add(&bank.subcontour.unsqueeze(0)?)?
        .reshape((nq * nc, d))?)
}

/// One decoder layer's raw outputs for a whole batch.
pub struct LayerTensors {
    /// `[b, n, classes]` (n includes denoising slots when present)
    pub class_logits: Tensor,
    /// `[b, n, nv, 2]`
    pub contours: Tensor,
    /// Boxes of the layer's own decoded arcs, `[b, n, nc, 4]`
    pub subcontour_boxes: Tensor,
    pub dist_state: Option<DistributionState>,
}

/// Host-side view of one image's layer output.
pub struct LayerOutput {
    pub class_logits: Vec<Vec<f64>>,
    pub contours: Vec<Contour>,
    pub subcontour_boxes: Vec<Vec<BBox>>,
}

impl LayerTensors {
    fn image_contours(&self, b: usize) -> Result<Vec<Contour>> {
        let pts = self
            .contours
            .get(b)?
            .to_dtype(DType::F64)?
            .to_vec3::<f64>()?;
        Ok(pts
            .into_iter()
            .map(|c| Contour::new(c.into_iter().map(|p| Point::new(p[0], p[1])).collect()))
            .collect())
    }

    pub fn layer_output(&self, b: usize) -> Result<LayerOutput> {
        let contours = self.image_contours(b)?;
        let nc = self.subcontour_boxes.dims4()?.2;
        let subcontour_boxes = contours
            .iter()
            .map(|c| {
                let per_arc = c.len() / nc;
                (0..nc)
                    .map(|j| subcontour_box(&c.points[j * per_arc..(j + 1) * per_arc]))
                    .collect()
            })
            .collect();
        Ok(LayerOutput {
            class_logits: self
                .class_logits
                .get(b)?
                .to_dtype(DType::F64)?
                .to_vec2::<f64>()?,
            contours,
            subcontour_boxes,
        })
    }

    /// Slice out one image's regular (non-denoising) slots for matching
    /// and loss computation.
    pub fn prediction_for_loss(&self, b: usize, n_regular: usize) -> Result<LayerPrediction> {
        Ok(LayerPrediction {
            class_logits: self.class_logits.get(b)?.narrow(0, 0, n_regular)?.contiguous()?,
            contours: self.contours.get(b)?.narrow(0, 0, n_regular)?.contiguous()?,
        })
    }

    /// Slice out one image's denoising slots.
    pub fn denoise_slice(&self, b: usize, n_regular: usize) -> Result<LayerPrediction> {
        let total = self.class_logits.dims3()?.1;
        Ok(LayerPrediction {
            class_logits: self
                .class_logits
                .get(b)?
                .narrow(0, n_regular, total - n_regular)?
                .contiguous()?,
            contours: self
                .contours
                .get(b)?
                .narrow(0, n_regular, total - n_regular)?
                .contiguous()?,
        })
    }
}

pub struct ForwardOutput {
    pub encoder: EncoderOutput,
    pub layers: Vec<LayerTensors>,
    /// Slots `0..n_regular` along the query axis are regular queries; any
    /// remainder are denoising slots.
    pub n_regular: usize,
}

impl ForwardOutput {
    /// Final-layer detections for one image: every regular slot becomes a
    /// scored prediction with its best class.
    pub fn predictions(&self, b: usize) -> Result<Vec<Prediction>> {
        let last = self.layers.last().unwrap();
        let out = last.layer_output(b)?;
        Ok(out
            .contours
            .into_iter()
            .take(self.n_regular)
            .zip(out.class_logits)
            .map(|(contour, logits)| {
                let (class_id, best) = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                    .map(|(i, v)| (i, *v))
                    .unwrap_or((0, f64::NEG_INFINITY));
                Prediction {
                    contour,
                    class_id,
                    score: 1.0 / (1.0 + (-best).exp()),
                }
            })
            .collect())
    }
}

/// Denoising inputs for a single-image batch: noised contours anchor the
/// extra slots and their (possibly flipped) labels seed the queries.
pub struct DenoiseInput {
    /// `[slots, nv, 2]`
    pub contours: Tensor,
    pub labels: Vec<u32>,
    pub group_of: Vec<usize>,
}

impl DenoiseInput {
    pub fn from_group(g: &DenoisingGroup, dtype: DType, device: &Device) -> Result<Self> {
        let s = g.contours.len();
        let nv = g.contours[0].len();
        let mut flat = Vec::with_capacity(s * nv * 2);
        for c in &g.contours {
            for p in &c.points {
                flat.extend_from_slice(&[p.x, p.y]);
            }
        }
        Ok(DenoiseInput {
            contours: Tensor::from_vec(flat, (s, nv, 2), device)?.to_dtype(dtype)?,
            labels: g.labels.iter().map(|&l| l as u32).collect(),
            group_of: g.group_of.clone(),
        })
    }
}

struct DecoderLayer {
    self_arc: MultiHeadAttention,
    norm_arc: Norm,
    self_inst: MultiHeadAttention,
    norm_inst: Norm,
    cross: DeformableAttention,
    norm_cross: Norm,
    ffn1: Linear,
    ffn2: Linear,
    norm_ffn: Norm,
    refine_head: Linear,
    class_head: Linear,
}

impl DecoderLayer {
    fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let d = cfg.d;
        let per_arc = cfg.nv / cfg.nc;
        let refine_out = if cfg.cfdr_enabled {
            per_arc * 2 * cfg.bins
        } else {
            per_arc * 2
        };
        // zero-init refinement so a fresh model starts at the anchor
        let refine_head = Linear::new(
            vb.pp("refine")
                .get_with_hints((refine_out, d), "weight", candle_nn::Init::Const(0.0))?,
            Some(
                vb.pp("refine")
                    .get_with_hints(refine_out, "bias", candle_nn::Init::Const(0.0))?,
            ),
        );
        Ok(DecoderLayer {
            self_arc: MultiHeadAttention::new(d, cfg.heads, vb.pp("self_arc"))?,
            norm_arc: Norm::new(d, vb.pp("norm_arc"))?,
            self_inst: MultiHeadAttention::new(d, cfg.heads, vb.pp("self_inst"))?,
            norm_inst: Norm::new(d, vb.pp("norm_inst"))?,
            cross: DeformableAttention::new(d, cfg.heads, cfg.sampling_points, 3, vb.pp("cross"))?,
            norm_cross: Norm::new(d, vb.pp("norm_cross"))?,
            ffn1: linear(d, 2 * d, vb.pp("ffn1"))?,
            ffn2: linear(2 * d, d, vb.pp("ffn2"))?,
            norm_ffn: Norm::new(d, vb.pp("norm_ffn"))?,
            refine_head,
            class_head: linear(d, cfg.classes, vb.pp("class"))?,
        })
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    backbone: Backbone,
    encoder: Encoder,
    /// `[nc, d]` learned sub-contour embeddings.
    subcontour_embed: Tensor,
    label_embed: Embedding,
    layers: Vec<DecoderLayer>,
    cfdr_base: Tensor,
    cfdr_delta: Tensor,
}

/// Tight per-arc boxes of a contour tensor `[b, n, nv, 2]`, floored to
/// `BOX_FLOOR` about the fixed center: `[b, n, nc, 4]`.
fn subcontour_boxes_tensor(contour: &Tensor, nc: usize) -> Result<Tensor> {
    let (b, n, nv, _) = contour.dims4()?;
    let arcs = contour.reshape((b, n, nc, nv / nc, 2))?;
    let mn = arcs.min(3)?;
    let mx = arcs.max(3)?;
    let center = ((&mn + &mx)? * 0.5)?;
    let size = (&mx - &mn)?.maximum(BOX_FLOOR)?;
    Ok(Tensor::cat(&[center, size], 3)?)
}

/// Tight whole-instance boxes `[b, n, 4]`, floored.
fn instance_boxes_tensor(contour: &Tensor) -> Result<Tensor> {
    let mn = contour.min(2)?;
    let mx = contour.max(2)?;
    let center = ((&mn + &mx)? * 0.5)?;
    let size = (&mx - &mn)?.maximum(BOX_FLOOR)?;
    Ok(Tensor::cat(&[center, size], 2)?)
}

/// Ellipse-initialized contours inscribed in boxes `[b, n, 4]`, starting at
/// the top point and proceeding clockwise in image coordinates.
fn ellipse_from_boxes(boxes: &Tensor, nv: usize) -> Result<Tensor> {
    let (_b, _n, _) = boxes.dims3()?;
    let device = boxes.device();
    let dtype = boxes.dtype();
    let mut cos = Vec::with_capacity(nv);
    let mut sin = Vec::with_capacity(nv);
    for k in 0..nv {
        let theta =
            -std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * k as f64 / nv as f64;
        cos.push(theta.cos());
        sin.push(theta.sin());
    }
    let cos = Tensor::from_vec(cos, (1, 1, nv), device)?.to_dtype(dtype)?;
    let sin = Tensor::from_vec(sin, (1, 1, nv), device)?.to_dtype(dtype)?;
    let half = (boxes.narrow(2, 2, 2)? * 0.5)?;
    let x = boxes
        .narrow(2, 0, 1)?
        .broadcast_add(&half.narrow(2, 0, 1)?.broadcast_mul(&cos)?)?;
    let y = boxes
        .narrow(2, 1, 1)?
        .broadcast_add(&half.narrow(2, 1, 1)?.broadcast_mul(&sin)?)?;
    Ok(Tensor::cat(&[x.unsqueeze(3)?, y.unsqueeze(3)?], 3)?)
}

impl Model {
    pub fn new(cfg: ModelConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(cfg.backbone_channels, vb.pp("backbone"))?;
        let encoder = Encoder::new(&cfg, vb.pp("encoder"))?;
        let subcontour_embed = vb.pp("queries").get_with_hints(
            (cfg.nc, cfg.d),
            "subcontour",
            candle_nn::Init::Randn {
                mean: 0.0,
                stdev: 0.02,
            },
        )?;
        let label_embed = embedding(cfg.classes, cfg.d, vb.pp("label_embed"))?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            layers.push(DecoderLayer::new(&cfg, vb.pp(format!("layer{l}")))?);
        }
        let base = weighting_values(cfg.bins, cfg.w_max, cfg.curvature)?;
        let cfdr_base = Tensor::from_vec(base, cfg.bins, vb.device())?.to_dtype(vb.dtype())?;
        let cfdr_delta =
            vb.pp("cfdr")
                .get_with_hints(cfg.bins, "delta", candle_nn::Init::Const(0.0))?;
        Ok(Model {
            cfg,
            backbone,
            encoder,
            subcontour_embed,
            label_embed,
            layers,
            cfdr_base,
            cfdr_delta,
        })
    }

    /// Current (trainable) bin-offset table.
    pub fn weighting_table(&self) -> Result<WeightingTable> {
        Ok(WeightingTable::from_tensor(
            (&self.cfdr_base + &self.cfdr_delta)?,
            self.cfg.w_max,
        ))
    }

    pub fn forward(&self, images: &Tensor, denoise: Option<&DenoiseInput>) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let (b, _, _, _) = images.dims4()?;
        let dtype = images.dtype();
        let device = images.device().clone();
        let (f8, f16, f32m) = self.backbone.forward(images)?;
        let enc = self.encoder.forward(&f8, &f16, &f32m)?;

        // anchor contours: inscribed ellipses of the (detached, floored)
        // proposal boxes
        let enc_boxes = enc.boxes.detach();
        let floored = Tensor::cat(
            &[
                enc_boxes.narrow(2, 0, 2)?,
                enc_boxes.narrow(2, 2, 2)?.maximum(BOX_FLOOR)?,
            ],
            2,
        )?;
        let mut v0 = ellipse_from_boxes(&floored, cfg.nv)?;
        let mut inst_q = enc.queries.clone();
        let mut mask: Option<Tensor> = None;
        let mut n_total = cfg.nq;

        if let Some(dn) = denoise {
            if b != 1 {
                return Err(Error::Contract(
                    "denoising queries require batch size 1".into(),
                ));
            }
            let labels = Tensor::from_vec(dn.labels.clone(), dn.labels.len(), &device)?;
            let dn_q = self.label_embed.forward(&labels)?.unsqueeze(0)?;
            inst_q = Tensor::cat(&[inst_q, dn_q], 1)?;
            v0 = Tensor::cat(&[v0, dn.contours.unsqueeze(0)?], 1)?;
            n_total = cfg.nq + dn.labels.len();
            let allowed = build_attention_mask(cfg.nq, &dn.group_of);
            let mut bias = Vec::with_capacity(n_total * n_total);
            for row in &allowed {
                for &ok in row {
                    bias.push(if ok { 0.0f64 } else { -1e9 });
                }
            }
            mask = Some(Tensor::from_vec(bias, (n_total, n_total), &device)?.to_dtype(dtype)?);
        }

        // working queries: instance content + shared sub-contour embeddings
        let mut x = inst_q
            .unsqueeze(2)?
            .broadcast_add(&self.subcontour_embed.reshape((1, 1, cfg.nc, cfg.d))?)?;

        let table = self.weighting_table()?;
        let mut state =
            DistributionState::zeros(&[b, n_total, cfg.nv, 2, cfg.bins], dtype, &device)?;
        let mut contour = v0.clone();
        let mut outputs = Vec::with_capacity(cfg.layers);

        for layer in &self.layers {
            let prev = contour.detach();
            let boxes_sub = subcontour_boxes_tensor(&prev, cfg.nc)?;
            let inst_box = instance_boxes_tensor(&prev)?;
            let pos = box_pos_encoding(&boxes_sub, cfg.d)?;

            // self-attention
            if cfg.decoupled_self_attention {
                // pass 1: among the nc sub-contour queries of each instance
                let xq = (&x + &pos)?.reshape((b * n_total, cfg.nc, cfg.d))?;
                let xv = x.reshape((b * n_total, cfg.nc, cfg.d))?;
                let a1 = layer
                    .self_arc
                    .forward(&xq, &xq, &xv, None)?
                    .reshape((b, n_total, cfg.nc, cfg.d))?;
                x = layer.norm_arc.forward(&(&x + a1)?)?;
                // pass 2: among instances, per sub-contour index
                let xt = x.transpose(1, 2)?.contiguous()?; // [b, nc, n, d]
                let post = (&x + &pos)?.transpose(1, 2)?.contiguous()?;
                let xq = post.reshape((b * cfg.nc, n_total, cfg.d))?;
                let xv = xt.reshape((b * cfg.nc, n_total, cfg.d))?;
                let a2 = layer
                    .self_inst
                    .forward(&xq, &xq, &xv, mask.as_ref())?
                    .reshape((b, cfg.nc, n_total, cfg.d))?
                    .transpose(1, 2)?;
                x = layer.norm_inst.forward(&(&x + a2)?)?;
            } else {
                // joint attention over the full working set
                let nw = n_total * cfg.nc;
                let xq = (&x + &pos)?.reshape((b, nw, cfg.d))?;
                let xv = x.reshape((b, nw, cfg.d))?;
                let full_mask = match &mask {
                    Some(m) => {
                        // expand instance-level visibility to arc slots
                        let rows = m.to_dtype(DType::F64)?.to_vec2::<f64>()?;
                        let mut big = Vec::with_capacity(nw * nw);
                        for i in 0..nw {
                            for j in 0..nw {
                                big.push(rows[i / cfg.nc][j / cfg.nc]);
                            }
                        }
                        Some(Tensor::from_vec(big, (nw, nw), &device)?.to_dtype(dtype)?)
                    }
                    None => None,
                };
                let a = layer
                    .self_arc
                    .forward(&xq, &xq, &xv, full_mask.as_ref())?
                    .reshape((b, n_total, cfg.nc, cfg.d))?;
                x = layer.norm_arc.forward(&(&x + a)?)?;
            }

            // box-restricted deformable cross-attention
            let attn_boxes = if cfg.box_restricted_attention {
                boxes_sub.clone()
            } else {
                inst_box
                    .unsqueeze(2)?
                    .broadcast_as((b, n_total, cfg.nc, 4))?
                    .contiguous()?
            };
            let nw = n_total * cfg.nc;
            let cq = (&x + &pos)?.reshape((b, nw, cfg.d))?;
            let cb = attn_boxes.reshape((b, nw, 4))?;
            let c = layer
                .cross
                .forward(&cq, &cb, &enc.levels)?
                .reshape((b, n_total, cfg.nc, cfg.d))?;
            x = layer.norm_cross.forward(&(&x + c)?)?;

            // feed-forward
            let f = layer.ffn2.forward(&layer.ffn1.forward(&x)?.relu()?)?;
            x = layer.norm_ffn.forward(&(&x + f)?)?;

            // refinement heads
            let per_arc = cfg.nv / cfg.nc;
            if cfg.cfdr_enabled {
                let residual = layer
                    .refine_head
                    .forward(&x)?
                    .reshape((b, n_total, cfg.nc, per_arc, 2, cfg.bins))?
                    .reshape((b, n_total, cfg.nv, 2, cfg.bins))?;
                state = refine_logits(&state, &residual)?;
                let scale = if cfg.scale_by_subcontour {
                    boxes_sub
                        .narrow(3, 2, 2)?
                        .unsqueeze(3)?
                        .broadcast_as((b, n_total, cfg.nc, per_arc, 2))?
                        .reshape((b, n_total, cfg.nv, 2))?
                } else {
                    inst_box
                        .narrow(2, 2, 2)?
                        .unsqueeze(2)?
                        .broadcast_as((b, n_total, cfg.nv, 2))?
                };
                contour = apply_refinement(&v0, &state, &scale.contiguous()?, &table)?;
            } else {
                let off = layer
                    .refine_head
                    .forward(&x)?
                    .reshape((b, n_total, cfg.nv, 2))?;
                contour = (&contour + off)?;
            }

            let class_logits = layer.class_head.forward(&x.mean(2)?)?;
            outputs.push(LayerTensors {
                class_logits,
                contours: contour.clone(),
                subcontour_boxes: subcontour_boxes_tensor(&contour.detach(), cfg.nc)?,
                dist_state: cfg.cfdr_enabled.then(|| state.clone()),
            });
        }

        Ok(ForwardOutput {
            encoder: enc,
            layers: outputs,
            n_regular: cfg.nq,
        })
    }
}

/// Write `<path>.safetensors` (weights keyed by module path) and
/// `<path>.json` (the model configuration).
pub fn save_checkpoint(varmap: &VarMap, cfg: &ModelConfig, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    varmap
        .save(path.with_extension("safetensors"))
        .map_err(|e| Error::Checkpoint(format!("saving weights: {e}")))?;
    std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

/// Rebuild a model from a checkpoint written by [`save_checkpoint`]. The
/// stored configuration drives construction; weight/shape mismatches fail.
pub fn load_checkpoint(
    path: &Path,
    dtype: DType,
    device: &Device,
) -> Result<(Model, VarMap, ModelConfig)> {
    let cfg_text = std::fs::read_to_string(path.with_extension("json"))
        .map_err(|e| Error::Checkpoint(format!("reading config sidecar: {e}")))?;
    let cfg: ModelConfig = serde_json::from_str(&cfg_text)
        .map_err(|e| Error::Checkpoint(format!("malformed config sidecar: {e}")))?;
    let mut varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, dtype, device);
    let model = Model::new(cfg.clone(), vb)?;
    varmap
        .load(path.with_extension("safetensors"))
        .map_err(|e| Error::Checkpoint(format!("loading weights: {e}")))?;
    Ok((model, varmap, cfg))
}
