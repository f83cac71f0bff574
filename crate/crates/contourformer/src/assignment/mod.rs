//! Set-prediction training machinery: Hungarian matching with class,
//! contour-point and contour-box costs, the decoder loss (varifocal
//! classification + point L1 + shape cosine terms), encoder supervision,
//! and denoising query construction.

mod denoise;
mod hungarian;
mod losses;

pub use denoise::{build_attention_mask, make_denoising_queries, DenoisingGroup, NoiseConfig};
pub use hungarian::{hungarian_match, MatchResult};
pub use losses::{
    decoder_loss, encoder_loss, point_loss, shape_loss, vfl_loss, LayerPrediction, LayerTerms,
    LossBreakdown, VflPositive,
};

use crate::geometry::{align_start, BBox, Contour};
use serde::{Deserialize, Serialize};

/// One prepared ground-truth instance: resampled clockwise contour, class
/// id, and tight bounding box.
#[derive(Debug, Clone)]
pub struct TargetInstance {
    pub contour: Contour,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Matching cost weights and loss-term weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MatchCostConfig {
    pub cost_class: f64,
    pub cost_point: f64,
    pub cost_giou: f64,
    pub lambda_cls: f64,
    pub lambda_point: f64,
    pub lambda_shape: f64,
    pub vfl_alpha: f64,
    pub vfl_gamma: f64,
}

impl Default for MatchCostConfig {
    fn default() -> Self {
        MatchCostConfig {
            cost_class: 2.0,
            cost_point: 5.0,
            cost_giou: 2.0,
            lambda_cls: 1.0,
            lambda_point: 1.0,
            lambda_shape: 0.25,
            vfl_alpha: 0.75,
            vfl_gamma: 2.0,
        }
    }
}

/// Focal-style classification cost for a ground-truth class with predicted
/// probability `p`: zero when the prediction is confident and correct,
/// large when the class probability vanishes.
fn focal_class_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(1e-8, 1.0 - 1e-8);
    alpha * (1.0 - p).powf(gamma) * (-p.ln())
}

/// Matching cost between one prediction slot and one ground-truth instance.
///
/// `gt` must already be resampled to the prediction's point count and
/// start-aligned against this prediction.
pub fn match_cost(
    pred_contour: &Contour,
    pred_class_prob: f64,
    gt: &TargetInstance,
    cfg: &MatchCostConfig,
) -> f64 {
    let nv = pred_contour.len();
    debug_assert_eq!(nv, gt.contour.len());
    let class_term = focal_class_cost(pred_class_prob, cfg.vfl_alpha, cfg.vfl_gamma);
    let point_term: f64 = pred_contour
        .points
        .iter()
        .zip(&gt.contour.points)
        .map(|(a, b)| a.l1(*b))
        .sum::<f64>()
        / (2 * nv) as f64;
    let giou_term = 1.0 - pred_contour.bbox().giou(&gt.bbox);
    cfg.cost_class * class_term + cfg.cost_point * point_term + cfg.cost_giou * giou_term
}

/// Full cost matrix for one image: entry `[gt][slot]`. Each target is
/// start-aligned against the slot's prediction before costing, and the
/// aligned targets are returned for reuse by the loss terms.
pub fn cost_matrix(
    pred_contours: &[Contour],
    pred_class_probs: &[Vec<f64>],
    targets: &[TargetInstance],
    cfg: &MatchCostConfig,
) -> (Vec<Vec<f64>>, Vec<Vec<Contour>>) {
    let mut cost = Vec::with_capacity(targets.len());
    let mut aligned = Vec::with_capacity(targets.len());
    for gt in targets {
        let mut row = Vec::with_capacity(pred_contours.len());
        let mut row_aligned = Vec::with_capacity(pred_contours.len());
        for (slot, pred) in pred_contours.iter().enumerate() {
            let aligned_gt = align_start(&gt.contour, pred);
            let aligned_target = TargetInstance {
                contour: aligned_gt.clone(),
                class_id: gt.class_id,
                bbox: gt.bbox,
            };
            row.push(match_cost(
                pred,
                pred_class_probs[slot][gt.class_id],
                &aligned_target,
                cfg,
            ));
            row_aligned.push(aligned_gt);
        }
        cost.push(row);
        aligned.push(row_aligned);
    }
    (cost, aligned)
}
