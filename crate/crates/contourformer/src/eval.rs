//! Polygon-based instance segmentation metrics: per-class AP at fixed IoU
//! thresholds, a COCO-style threshold average, and the volume metric that
//! averages AP over thresholds 0.1 through 0.9.

use crate::assignment::TargetInstance;
use crate::error::{Error, Result};
use crate::geometry::{polygon_iou_oracle, Contour};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One scored detection.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub contour: Contour,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub score_threshold: f64,
    pub max_detections: usize,
    /// Rasterization grid used for polygon IoU; budget is ±0.01 IoU.
    pub raster_grid: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
            score_threshold: 0.05,
            max_detections: 100,
            raster_grid: 512,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        if t.is_empty() || t.windows(2).any(|w| w[0] >= w[1]) || t[0] <= 0.0 || t[t.len() - 1] >= 1.0
        {
            return Err(Error::Config(
                "iou_thresholds must be strictly increasing in (0,1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ApResult {
    pub per_class: BTreeMap<usize, f64>,
    pub mean: f64,
}

/// Filter, sort, and cap one image's detections.
fn image_detections<'a>(preds: &'a [Prediction], cfg: &EvalConfig) -> Vec<&'a Prediction> {
    let mut v: Vec<&Prediction> = preds
        .iter()
        .filter(|p| p.score >= cfg.score_threshold)
        .collect();
    v.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    v.truncate(cfg.max_detections);
    v
}

/// 101-point interpolated area under the precision-recall curve.
fn interpolated_ap(mut hits: Vec<(f64, bool)>, n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    hits.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(hits.len()); // (recall, precision)
    for (i, (_score, is_tp)) in hits.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += p;
    }
    sum / 101.0
}

/// Greedy matching by descending score, one-to-one per ground-truth
/// instance, per class and per image.
pub fn compute_ap(
    predictions: &[Vec<Prediction>],
    targets: &[Vec<TargetInstance>],
    iou_threshold: f64,
    cfg: &EvalConfig,
) -> ApResult {
    assert_eq!(predictions.len(), targets.len());
    let mut classes: Vec<usize> = targets
        .iter()
        .flatten()
        .map(|t| t.class_id)
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class = BTreeMap::new();
    for &class in &classes {
        let mut hits: Vec<(f64, bool)> = Vec::new();
        let mut n_gt = 0usize;
        for (preds, gts) in predictions.iter().zip(targets) {
            let gt_idx: Vec<usize> = (0..gts.len())
                .filter(|&i| gts[i].class_id == class)
                .collect();
            n_gt += gt_idx.len();
            let mut taken = vec![false; gt_idx.len()];
            for p in image_detections(preds, cfg)
                .into_iter()
                .filter(|p| p.class_id == class)
            {
                let mut best = None;
                for (slot, &gi) in gt_idx.iter().enumerate() {
                    if taken[slot] {
                        continue;
                    }
                    let iou = polygon_iou_oracle(
                        &p.contour.points,
                        &gts[gi].contour.points,
                        cfg.raster_grid,
                    );
                    if iou >= iou_threshold
                        && best.map_or(true, |(_, b): (usize, f64)| iou > b)
                    {
                        best = Some((slot, iou));
                    }
                }
                match best {
                    Some((slot, _)) => {
                        taken[slot] = true;
                        hits.push((p.score, true));
                    }
                    None => hits.push((p.score, false)),
                }
            }
        }
        per_class.insert(class, interpolated_ap(hits, n_gt));
    }

    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    ApResult { per_class, mean }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    /// Mean AP over thresholds 0.1..=0.9.
    pub ap_vol: f64,
    pub ap50: f64,
    pub ap70: f64,
    /// Mean AP over thresholds 0.50:0.05:0.95.
    pub coco_ap: f64,
    pub per_threshold: Vec<(f64, f64)>,
}

pub fn compute_apvol(
    predictions: &[Vec<Prediction>],
    targets: &[Vec<TargetInstance>],
    cfg: &EvalConfig,
) -> EvalSummary {
    let per_threshold: Vec<(f64, f64)> = cfg
        .iou_thresholds
        .iter()
        .map(|&t| (t, compute_ap(predictions, targets, t, cfg).mean))
        .collect();
    let ap_vol = per_threshold.iter().map(|(_, a)| a).sum::<f64>() / per_threshold.len() as f64;
    let at = |want: f64| -> f64 {
        per_threshold
            .iter()
            .find(|(t, _)| (t - want).abs() < 1e-9)
            .map(|(_, a)| *a)
            .unwrap_or_else(|| compute_ap(predictions, targets, want, cfg).mean)
    };
    let ap50 = at(0.5);
    let ap70 = at(0.7);
    let coco: Vec<f64> = (0..10)
        .map(|i| compute_ap(predictions, targets, 0.5 + 0.05 * i as f64, cfg).mean)
        .collect();
    let coco_ap = coco.iter().sum::<f64>() / coco.len() as f64;
    EvalSummary {
        ap_vol,
        ap50,
        ap70,
        coco_ap,
        per_threshold,
    }
}

impl EvalSummary {
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("APvol".into(), self.ap_vol.into());
        map.insert("AP50".into(), self.ap50.into());
        map.insert("AP70".into(), self.ap70.into());
        map.insert("AP".into(), self.coco_ap.into());
        for (t, a) in &self.per_threshold {
            map.insert(format!("AP@{t:.2}"), (*a).into());
        }
        serde_json::Value::Object(map)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str("metric   value\n");
        s.push_str(&format!("APvol   {:6.4}\n", self.ap_vol));
        s.push_str(&format!("AP50    {:6.4}\n", self.ap50));
        s.push_str(&format!("AP70    {:6.4}\n", self.ap70));
        s.push_str(&format!("AP      {:6.4}\n", self.coco_ap));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point, RasterMask};

    fn square(cx: f64, cy: f64, half: f64) -> Contour {
        Contour::new(vec![
            Point::new(cx - half, cy - half),
            Point::new(cx + half, cy - half),
            Point::new(cx + half, cy + half),
            Point::new(cx - half, cy + half),
        ])
    }

    fn gt(contour: Contour, class_id: usize) -> TargetInstance {
        let bbox = contour.bbox();
        TargetInstance {
            contour,
            class_id,
            bbox,
        }
    }

    fn pred(contour: Contour, class_id: usize, score: f64) -> Prediction {
        Prediction {
            contour,
            class_id,
            score,
        }
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let g = vec![vec![gt(square(0.3, 0.3, 0.1), 0), gt(square(0.7, 0.7, 0.1), 1)]];
        let p = vec![vec![
            pred(square(0.3, 0.3, 0.1), 0, 1.0),
            pred(square(0.7, 0.7, 0.1), 1, 1.0),
        ]];
        let cfg = EvalConfig::default();
        for t in [0.1, 0.5, 0.9] {
            let r = compute_ap(&p, &g, t, &cfg);
            assert!((r.mean - 1.0).abs() < 1e-9, "AP@{t} = {}", r.mean);
        }
        let s = compute_apvol(&p, &g, &cfg);
        assert!((s.ap_vol - 1.0).abs() < 1e-9);
    }

    #[test]
    fn no_predictions_is_zero() {
        let g = vec![vec![gt(square(0.3, 0.3, 0.1), 0)]];
        let p: Vec<Vec<Prediction>> = vec![vec![]];
        assert_eq!(compute_ap(&p, &g, 0.5, &EvalConfig::default()).mean, 0.0);
    }

    #[test]
    fn one_of_two_matched_gives_half() {
        // one perfect detection covering half the ground truth: the
        // 101-point curve integrates to 51/101
        let g = vec![vec![gt(square(0.3, 0.3, 0.1), 0), gt(square(0.7, 0.7, 0.1), 0)]];
        let p = vec![vec![pred(square(0.3, 0.3, 0.1), 0, 0.9)]];
        let r = compute_ap(&p, &g, 0.5, &EvalConfig::default());
        assert!((r.mean - 51.0 / 101.0).abs() < 1e-9);
        assert!((r.mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn ap_monotone_in_threshold() {
        // shifted box with IoU ~0.6 against gt
        let g = vec![vec![gt(square(0.5, 0.5, 0.2), 0)]];
        let p = vec![vec![pred(square(0.55, 0.5, 0.2), 0, 0.8)]];
        let cfg = EvalConfig::default();
        let aps: Vec<f64> = cfg
            .iou_thresholds
            .iter()
            .map(|&t| compute_ap(&p, &g, t, &cfg).mean)
            .collect();
        for w in aps.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
        assert!(aps[0] > 0.0); // matched at 0.1
        assert!(aps[8] == 0.0); // unmatched at 0.9
    }

    #[test]
    fn score_scaling_invariance() {
        let g = vec![vec![gt(square(0.3, 0.3, 0.1), 0), gt(square(0.7, 0.7, 0.1), 0)]];
        let p1 = vec![vec![
            pred(square(0.3, 0.3, 0.1), 0, 0.8),
            pred(square(0.1, 0.8, 0.05), 0, 0.4),
            pred(square(0.7, 0.7, 0.1), 0, 0.6),
        ]];
        let p2: Vec<Vec<Prediction>> = p1
            .iter()
            .map(|img| {
                img.iter()
                    .map(|p| pred(p.contour.clone(), p.class_id, p.score * 0.5))
                    .collect()
            })
            .collect();
        let mut cfg = EvalConfig::default();
        cfg.score_threshold = 0.0;
        for t in [0.3, 0.5, 0.7] {
            let a = compute_ap(&p1, &g, t, &cfg).mean;
            let b = compute_ap(&p2, &g, t, &cfg).mean;
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn apvol_is_mean_of_reported_thresholds() {
        let g = vec![vec![gt(square(0.5, 0.5, 0.2), 0)]];
        let p = vec![vec![pred(square(0.53, 0.5, 0.2), 0, 0.8)]];
        let s = compute_apvol(&p, &g, &EvalConfig::default());
        let mean = s.per_threshold.iter().map(|(_, a)| a).sum::<f64>()
            / s.per_threshold.len() as f64;
        assert!((s.ap_vol - mean).abs() < 1e-9);
        assert_eq!(s.per_threshold.len(), 9);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EvalConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.iou_thresholds = vec![0.5, 0.5];
        assert!(cfg.validate().is_err());
        cfg.iou_thresholds = vec![0.0, 0.5];
        assert!(cfg.validate().is_err());
        cfg.iou_thresholds = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn max_detections_and_score_threshold_enforced() {
        let g = vec![vec![gt(square(0.5, 0.5, 0.2), 0)]];
        // perfect detection below the score threshold: ignored
        let p = vec![vec![pred(square(0.5, 0.5, 0.2), 0, 0.01)]];
        let cfg = EvalConfig::default();
        assert_eq!(compute_ap(&p, &g, 0.5, &cfg).mean, 0.0);

        // perfect detection crowded out by higher-scoring noise
        let mut crowded = vec![pred(square(0.5, 0.5, 0.2), 0, 0.5)];
        for i in 0..100 {
            crowded.push(pred(square(0.05, 0.05, 0.02), 0, 0.9 + 1e-4 * i as f64));
        }
        let small = EvalConfig {
            max_detections: 100,
            ..EvalConfig::default()
        };
        assert_eq!(compute_ap(&[crowded], &g, 0.5, &small).mean, 0.0);
    }

    // reference AP computed from full-image rasterized masks instead of the
    // adaptive-bounds polygon IoU used by the implementation
    fn mask_ap_reference(
        predictions: &[Vec<Prediction>],
        targets: &[Vec<TargetInstance>],
        threshold: f64,
    ) -> f64 {
        let grid = 512;
        let raster = |c: &Contour| RasterMask::rasterize(&c.points, grid, 0.0, 0.0, 1.0, 1.0);
        let mut class_set: Vec<usize> = targets.iter().flatten().map(|t| t.class_id).collect();
        class_set.sort_unstable();
        class_set.dedup();
        let mut total = 0.0;
        for &class in &class_set {
            let mut hits: Vec<(f64, bool)> = Vec::new();
            let mut n_gt = 0;
            for (preds, gts) in predictions.iter().zip(targets) {
                let gt_masks: Vec<RasterMask> = gts
                    .iter()
                    .filter(|g| g.class_id == class)
                    .map(|g| raster(&g.contour))
                    .collect();
                n_gt += gt_masks.len();
                let mut taken = vec![false; gt_masks.len()];
                let mut sorted: Vec<&Prediction> =
                    preds.iter().filter(|p| p.class_id == class).collect();
                sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                for p in sorted {
                    let pm = raster(&p.contour);
                    let best = gt_masks
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| !taken[*i])
                        .map(|(i, m)| (i, pm.iou(m)))
                        .filter(|(_, iou)| *iou >= threshold)
                        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
                    match best {
                        Some((i, _)) => {
                            taken[i] = true;
                            hits.push((p.score, true));
                        }
                        None => hits.push((p.score, false)),
                    }
                }
            }
            total += interpolated_ap(hits, n_gt);
        }
        total / class_set.len() as f64
    }

    #[test]
    fn agrees_with_mask_ap_reference_on_fixture_scenes() {
        use crate::data::{generate_scene, prepare_targets, DatasetConfig};
        let cfg = DatasetConfig::default();
        let mut targets = Vec::new();
        let mut preds = Vec::new();
        let mut rng_shift = 0.0;
        for seed in 0..4 {
            let scene = generate_scene(&cfg, seed);
            let t = prepare_targets(&scene, 64);
            // predictions: jittered copies of the ground truth with varied
            // scores, plus one spurious box
            let mut p: Vec<Prediction> = t
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    rng_shift += 0.003;
                    Prediction {
                        contour: g.contour.translated(Point::new(rng_shift, -rng_shift * 0.5)),
                        class_id: g.class_id,
                        score: 0.9 - 0.1 * i as f64,
                    }
                })
                .collect();
            p.push(pred(square(0.9, 0.1, 0.04), 0, 0.3));
            targets.push(t);
            preds.push(p);
        }
        let ecfg = EvalConfig::default();
        for t in [0.3, 0.5, 0.7] {
            let ours = compute_ap(&preds, &targets, t, &ecfg).mean;
            let reference = mask_ap_reference(&preds, &targets, t);
            assert!(
                (ours - reference).abs() <= 0.01,
                "threshold {t}: {ours} vs {reference}"
            );
        }
    }

    #[test]
    fn summary_outputs_well_formed() {
        let g = vec![vec![gt(square(0.5, 0.5, 0.2), 0)]];
        let p = vec![vec![pred(square(0.5, 0.5, 0.2), 0, 0.9)]];
        let s = compute_apvol(&p, &g, &EvalConfig::default());
        let json = s.to_json();
        assert!(json.get("APvol").is_some());
        assert!(json.get("AP50").is_some());
        assert!(json.get("AP70").is_some());
        assert!(json.get("AP").is_some());
        let table = s.table();
        assert!(table.contains("APvol"));
        assert!(table.lines().count() >= 4);
    }
}
