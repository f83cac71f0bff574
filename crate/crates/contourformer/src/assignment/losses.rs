//! Loss terms for the decoder and encoder: varifocal classification,
//! point-to-point L1, and the cosine shape loss on adjacent-point offsets.

use crate::assignment::{cost_matrix, hungarian_match, MatchCostConfig, MatchResult, TargetInstance};
use crate::error::Result;
use crate::geometry::{BBox, Contour, Point};
use candle_core::{DType, Tensor};

/// One decoder layer's raw outputs for a single image.
#[derive(Debug, Clone)]
pub struct LayerPrediction {
    /// `[Nq, classes]` raw class logits.
    pub class_logits: Tensor,
    /// `[Nq, Nv, 2]` decoded contour points, normalized coordinates.
    pub contours: Tensor,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LayerTerms {
    pub cls: f64,
    pub point: f64,
    pub shape: f64,
}

#[derive(Debug)]
pub struct LossBreakdown {
    /// Scalar tensor carrying the gradient.
    pub total: Tensor,
    pub layers: Vec<LayerTerms>,
    pub matches: Vec<MatchResult>,
}

/// A matched positive for the varifocal loss: `(slot, class, iou_quality)`.
pub type VflPositive = (usize, usize, f64);

/// Varifocal classification loss over `[Nq, classes]` logits.
///
/// Positives use their IoU quality as a soft binary target and as the term
/// weight; negatives are down-weighted by `alpha * sigmoid(logit)^gamma`.
/// Normalized by the number of positives (floored at 1).
pub fn vfl_loss(
    class_logits: &Tensor,
    positives: &[VflPositive],
    alpha: f64,
    gamma: f64,
) -> Result<Tensor> {
    let (nq, nc) = class_logits.dims2()?;
    let dtype = class_logits.dtype();
    let dev = class_logits.device();

    let mut q = vec![0f64; nq * nc];
    for &(slot, class, quality) in positives {
        q[slot * nc + class] = quality;
    }
    let q = Tensor::from_vec(q, (nq, nc), dev)?.to_dtype(dtype)?;

    let p = candle_nn::ops::sigmoid(&class_logits.detach())?;
    let alpha_t = Tensor::full(alpha, (nq, nc), dev)?.to_dtype(dtype)?;
    let neg_weight = (alpha_t * p.powf(gamma)?)?;
    let is_pos = q.gt(0.0)?.to_dtype(dtype)?;
    let weight = ((&q * &is_pos)? + (neg_weight * (1.0 - &is_pos)?)?)?;

    // numerically stable BCE-with-logits
    let z = class_logits;
    let softplus = (z.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let bce = ((z.relu()? - (z * &q)?)? + softplus)?;

    let n_pos = positives.len().max(1) as f64;
    Ok(((weight * bce)?.sum_all()? / n_pos)?)
}

/// Mean absolute error over all `Nv x 2` coordinates.
pub fn point_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok((pred - gt)?.abs()?.mean_all()?)
}

/// Cosine-similarity loss on adjacent-point offsets:
/// `mean_i (1 - cos(dv_pred_i, dv_gt_i))`, with near-zero offsets (norm
/// below 1e-8) contributing zero.
///
/// `pred` and `gt` have shape `[Nv, 2]` (or `[batch, Nv, 2]`).
pub fn shape_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let axis = pred.rank() - 2; // the Nv axis
    let off_p = wrap_offsets(pred, axis)?;
    let off_g = wrap_offsets(gt, axis)?;
    let last = pred.rank() - 1;

    let dot = (&off_p * &off_g)?.sum(last)?;
    let norm_p = off_p.sqr()?.sum(last)?;
    let norm_g = off_g.sqr()?.sum(last)?;
    // smoothed denominator keeps gradients finite at exactly-zero offsets
    let denom = ((norm_p * norm_g)? + 1e-24)?.sqrt()?;
    let cos = (dot / &denom)?;

    let valid = denom
        .detach()
        .gt(1e-16)? // norm product below (1e-8)^2 is treated as parallel
        .to_dtype(pred.dtype())?;
    let terms = ((1.0 - cos)? * valid)?;
    Ok(terms.mean_all()?)
}

fn wrap_offsets(v: &Tensor, axis: usize) -> Result<Tensor> {
    let n = v.dims()[axis];
    let head = v.narrow(axis, 1, n - 1)?;
    let first = v.narrow(axis, 0, 1)?;
    let rolled = Tensor::cat(&[&head, &first], axis)?;
    Ok((rolled - v)?)
}

fn to_contours(contours: &Tensor) -> Result<Vec<Contour>> {
    let v = contours.detach().to_dtype(DType::F64)?.to_vec3::<f64>()?;
    Ok(v.into_iter()
        .map(|pts| Contour::new(pts.into_iter().map(|p| Point::new(p[0], p[1])).collect()))
        .collect())
}

fn class_probs(class_logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(candle_nn::ops::sigmoid(&class_logits.detach())?
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?)
}

fn contour_tensor(c: &Contour, dtype: DType, dev: &candle_core::Device) -> Result<Tensor> {
    let flat: Vec<f64> = c.points.iter().flat_map(|p| [p.x, p.y]).collect();
    Ok(Tensor::from_vec(flat, (c.len(), 2), dev)?.to_dtype(dtype)?)
}

/// Match one layer's predictions against the targets and compute its three
/// loss terms. Matching is recomputed per layer against that layer's own
/// predictions.
fn layer_loss(
    layer: &LayerPrediction,
    targets: &[TargetInstance],
    cfg: &MatchCostConfig,
) -> Result<(Tensor, Tensor, Tensor, MatchResult)> {
    let dtype = layer.class_logits.dtype();
    let dev = layer.class_logits.device();
    let zero = || Tensor::zeros((), dtype, dev);

    if targets.is_empty() {
        let cls = vfl_loss(&layer.class_logits, &[], cfg.vfl_alpha, cfg.vfl_gamma)?;
        return Ok((
            cls,
            zero()?,
            zero()?,
            MatchResult {
                pairs: vec![],
                total_cost: 0.0,
            },
        ));
    }

    let pred_contours = to_contours(&layer.contours)?;
    let probs = class_probs(&layer.class_logits)?;
    let (cost, aligned) = cost_matrix(&pred_contours, &probs, targets, cfg);
    let matched = hungarian_match(&cost)?;

    let mut positives: Vec<VflPositive> = Vec::with_capacity(matched.pairs.len());
    let mut point_terms = Vec::with_capacity(matched.pairs.len());
    let mut shape_terms = Vec::with_capacity(matched.pairs.len());
    for &(g, slot) in &matched.pairs {
        let gt_aligned = &aligned[g][slot];
        let quality = pred_contours[slot].bbox().iou(&targets[g].bbox);
        positives.push((slot, targets[g].class_id, quality));

        let pred = layer.contours.narrow(0, slot, 1)?.squeeze(0)?;
        let gt = contour_tensor(gt_aligned, dtype, dev)?;
        point_terms.push(point_loss(&pred, &gt)?);
        shape_terms.push(shape_loss(&pred, &gt)?);
    }

    let cls = vfl_loss(&layer.class_logits, &positives, cfg.vfl_alpha, cfg.vfl_gamma)?;
    let n = matched.pairs.len() as f64;
    let point = (Tensor::stack(&point_terms, 0)?.sum_all()? / n)?;
    let shape = (Tensor::stack(&shape_terms, 0)?.sum_all()? / n)?;
    Ok((cls, point, shape, matched))
}

/// Deep-supervised decoder loss: sum over layers of
/// `lambda_cls * L_cls + lambda_point * L_p + lambda_shape * L_shape`,
/// with Hungarian matching recomputed per layer.
pub fn decoder_loss(
    layers: &[LayerPrediction],
    targets: &[TargetInstance],
    cfg: &MatchCostConfig,
) -> Result<LossBreakdown> {
    assert!(!layers.is_empty());
    let dtype = layers[0].class_logits.dtype();
    let dev = layers[0].class_logits.device();
    let mut total = Tensor::zeros((), dtype, dev)?;
    let mut terms = Vec::with_capacity(layers.len());
    let mut matches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (cls, point, shape, matched) = layer_loss(layer, targets, cfg)?;
        total = (total
            + ((cls.affine(cfg.lambda_cls, 0.0)?
                + point.affine(cfg.lambda_point, 0.0)?)?
                + shape.affine(cfg.lambda_shape, 0.0)?)?)?;
        terms.push(LayerTerms {
            cls: cls.to_dtype(DType::F64)?.to_scalar::<f64>()?,
            point: point.to_dtype(DType::F64)?.to_scalar::<f64>()?,
            shape: shape.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        });
        matches.push(matched);
    }
    Ok(LossBreakdown {
        total,
        layers: terms,
        matches,
    })
}

/// Encoder supervision: class prediction and bounding box only. Proposals
/// are matched with class + box L1 + GIoU costs, then supervised with
/// varifocal classification plus L1 and GIoU box losses.
pub fn encoder_loss(
    class_logits: &Tensor,
    boxes: &Tensor,
    targets: &[TargetInstance],
    cfg: &MatchCostConfig,
) -> Result<(Tensor, MatchResult)> {
    let dtype = class_logits.dtype();
    let dev = class_logits.device();
    if targets.is_empty() {
        let cls = vfl_loss(class_logits, &[], cfg.vfl_alpha, cfg.vfl_gamma)?;
        return Ok((
            cls,
            MatchResult {
                pairs: vec![],
                total_cost: 0.0,
            },
        ));
    }

    let probs = class_probs(class_logits)?;
    let pred_boxes: Vec<BBox> = boxes
        .detach()
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?
        .into_iter()
        .map(|b| BBox::new(b[0], b[1], b[2], b[3]))
        .collect();

    let cost: Vec<Vec<f64>> = targets
        .iter()
        .map(|gt| {
            pred_boxes
                .iter()
                .enumerate()
                .map(|(s, pb)| {
                    let p = probs[s][gt.class_id].clamp(1e-8, 1.0 - 1e-8);
                    let cls = cfg.vfl_alpha * (1.0 - p).powf(cfg.vfl_gamma) * (-p.ln());
                    let l1 = (pb.cx - gt.bbox.cx).abs()
                        + (pb.cy - gt.bbox.cy).abs()
                        + (pb.w - gt.bbox.w).abs()
                        + (pb.h - gt.bbox.h).abs();
                    let giou = 1.0 - pb.giou(&gt.bbox);
                    cfg.cost_class * cls + cfg.cost_point * l1 + cfg.cost_giou * giou
                })
                .collect()
        })
        .collect();
    let matched = hungarian_match(&cost)?;

    let mut positives = Vec::with_capacity(matched.pairs.len());
    let mut box_terms = Vec::with_capacity(matched.pairs.len());
    for &(g, slot) in &matched.pairs {
        let quality = pred_boxes[slot].iou(&targets[g].bbox);
        positives.push((slot, targets[g].class_id, quality));
        let pb = boxes.narrow(0, slot, 1)?.squeeze(0)?;
        let gb = Tensor::from_vec(
            vec![
                targets[g].bbox.cx,
                targets[g].bbox.cy,
                targets[g].bbox.w,
                targets[g].bbox.h,
            ],
            4,
            dev,
        )?
        .to_dtype(dtype)?;
        let l1 = (&pb - &gb)?.abs()?.sum_all()?;
        let giou = (1.0 - giou_tensor(&pb, &gb)?)?;
        box_terms.push((l1.affine(5.0, 0.0)? + giou.affine(2.0, 0.0)?)?);
    }
    let cls = vfl_loss(class_logits, &positives, cfg.vfl_alpha, cfg.vfl_gamma)?;
    let n = matched.pairs.len().max(1) as f64;
    let box_loss = (Tensor::stack(&box_terms, 0)?.sum_all()? / n)?;
    Ok(((cls + box_loss)?, matched))
}

/// Differentiable generalized IoU between two `[4]` center-size boxes.
fn giou_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let corners = |t: &Tensor| -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let c = t.chunk(4, 0)?;
        let half_w = c[2].affine(0.5, 0.0)?;
        let half_h = c[3].affine(0.5, 0.0)?;
        Ok((
            (&c[0] - &half_w)?,
            (&c[1] - &half_h)?,
            (&c[0] + &half_w)?,
            (&c[1] + &half_h)?,
        ))
    };
    let (ax0, ay0, ax1, ay1) = corners(a)?;
    let (bx0, by0, bx1, by1) = corners(b)?;
    let iw = (ax1.minimum(&bx1)? - ax0.maximum(&bx0)?)?.relu()?;
    let ih = (ay1.minimum(&by1)? - ay0.maximum(&by0)?)?.relu()?;
    let inter = (iw * ih)?;
    let area_a = ((&ax1 - &ax0)?.relu()? * (&ay1 - &ay0)?.relu()?)?;
    let area_b = ((&bx1 - &bx0)?.relu()? * (&by1 - &by0)?.relu()?)?;
    let union = ((area_a + area_b)? - &inter)?;
    let hull = ((ax1.maximum(&bx1)? - ax0.minimum(&bx0)?)?
        * (ay1.maximum(&by1)? - ay0.minimum(&by0)?)?)?;
    let eps = 1e-9;
    let iou = (&inter / (&union + eps)?)?;
    let penalty = ((&hull - &union)? / (&hull + eps)?)?;
    Ok((iou - penalty)?.squeeze(0)?)
}
