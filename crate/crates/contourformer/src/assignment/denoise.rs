//! Denoising query construction: noised copies of the ground truth, tiled
//! into groups, with an attention mask that isolates them from the regular
//! matching queries.

use crate::assignment::TargetInstance;
use crate::geometry::{Contour, Point};
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct NoiseConfig {
    /// Uniform point jitter, relative to the instance box dimensions.
    pub point_jitter: f64,
    /// Probability of replacing an instance's label with a random class.
    pub label_flip: f64,
    /// Total denoising query slots.
    pub n_slots: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            point_jitter: 0.4,
            label_flip: 0.25,
            n_slots: 100,
        }
    }
}

/// Training-only denoising queries. Slot `k` reconstructs ground-truth
/// instance `gt_index[k]` from its noised contour.
#[derive(Debug, Clone)]
pub struct DenoisingGroup {
    pub contours: Vec<Contour>,
    pub labels: Vec<usize>,
    pub gt_index: Vec<usize>,
    pub group_of: Vec<usize>,
    pub n_groups: usize,
}

impl DenoisingGroup {
    pub fn len(&self) -> usize {
        self.contours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contours.is_empty()
    }
}

/// Tile the ground-truth instances into `n_slots` noised queries. Slot `k`
/// copies instance `k % n_gt` and belongs to group `k / n_gt`.
pub fn make_denoising_queries<R: Rng>(
    targets: &[TargetInstance],
    n_classes: usize,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Option<DenoisingGroup> {
    if targets.is_empty() || noise.n_slots == 0 {
        return None;
    }
    let n_gt = targets.len();
    let mut contours = Vec::with_capacity(noise.n_slots);
    let mut labels = Vec::with_capacity(noise.n_slots);
    let mut gt_index = Vec::with_capacity(noise.n_slots);
    let mut group_of = Vec::with_capacity(noise.n_slots);
    for k in 0..noise.n_slots {
        let g = k % n_gt;
        let t = &targets[g];
        let jitter_x = noise.point_jitter * t.bbox.w;
        let jitter_y = noise.point_jitter * t.bbox.h;
        let noised = Contour::new(
            t.contour
                .points
                .iter()
                .map(|p| {
                    Point::new(
                        p.x + rng.gen_range(-1.0..1.0) * jitter_x,
                        p.y + rng.gen_range(-1.0..1.0) * jitter_y,
                    )
                })
                .collect(),
        );
        let label = if noise.label_flip > 0.0 && rng.gen::<f64>() < noise.label_flip {
            rng.gen_range(0..n_classes)
        } else {
            t.class_id
        };
        contours.push(noised);
        labels.push(label);
        gt_index.push(g);
        group_of.push(k / n_gt);
    }
    let n_groups = noise.n_slots.div_ceil(n_gt);
    Some(DenoisingGroup {
        contours,
        labels,
        gt_index,
        group_of,
        n_groups,
    })
}

/// Row-attends-column visibility mask over `n_regular + len(group_of)`
/// query slots. Regular queries never see denoising queries; denoising
/// queries see the regular block and their own group only.
pub fn build_attention_mask(n_regular: usize, group_of: &[usize]) -> Vec<Vec<bool>> {
    let total = n_regular + group_of.len();
    let mut mask = vec![vec![false; total]; total];
    for (i, row) in mask.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = match (i < n_regular, j < n_regular) {
                (true, true) => true,
                (true, false) => false, // regular -> denoise blocked
                (false, true) => true,  // denoise may read regular
                (false, false) => group_of[i - n_regular] == group_of[j - n_regular],
            };
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{init_contour_from_box, BBox};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn targets(n: usize) -> Vec<TargetInstance> {
        (0..n)
            .map(|i| {
                let bbox = BBox::new(0.2 + 0.1 * i as f64, 0.5, 0.2, 0.2);
                let contour = init_contour_from_box(&bbox, 16).unwrap();
                let bbox = contour.bbox();
                TargetInstance {
                    contour,
                    class_id: i % 3,
                    bbox,
                }
            })
            .collect()
    }

    #[test]
    fn zero_noise_reproduces_ground_truth() {
        let ts = targets(2);
        let noise = NoiseConfig {
            point_jitter: 0.0,
            label_flip: 0.0,
            n_slots: 10,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dn = make_denoising_queries(&ts, 3, &noise, &mut rng).unwrap();
        for k in 0..dn.len() {
            let gt = &ts[dn.gt_index[k]];
            assert_eq!(dn.contours[k].points, gt.contour.points);
            assert_eq!(dn.labels[k], gt.class_id);
        }
    }

    #[test]
    fn tiling_34_33_33() {
        let ts = targets(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dn = make_denoising_queries(&ts, 3, &NoiseConfig::default(), &mut rng).unwrap();
        assert_eq!(dn.len(), 100);
        let counts: Vec<usize> = (0..3)
            .map(|g| dn.gt_index.iter().filter(|&&x| x == g).count())
            .collect();
        assert_eq!(counts, vec![34, 33, 33]);
        assert_eq!(dn.n_groups, 34);
    }

    #[test]
    fn empty_targets_give_no_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(make_denoising_queries(&[], 3, &NoiseConfig::default(), &mut rng).is_none());
    }

    #[test]
    fn mask_blocks_regular_to_denoise() {
        let group_of = vec![0, 0, 1, 1, 2];
        let n_reg = 4;
        let mask = build_attention_mask(n_reg, &group_of);
        for i in 0..n_reg {
            for j in n_reg..n_reg + group_of.len() {
                assert!(!mask[i][j], "regular row {i} sees denoise col {j}");
            }
            for j in 0..n_reg {
                assert!(mask[i][j]);
            }
        }
    }

    #[test]
    fn mask_blocks_cross_group() {
        let group_of = vec![0, 0, 1, 1, 2];
        let n_reg = 3;
        let mask = build_attention_mask(n_reg, &group_of);
        for (a, &ga) in group_of.iter().enumerate() {
            for (b, &gb) in group_of.iter().enumerate() {
                assert_eq!(mask[n_reg + a][n_reg + b], ga == gb);
            }
            // denoise may read the regular block
            for j in 0..n_reg {
                assert!(mask[n_reg + a][j]);
            }
        }
    }

    #[test]
    fn jitter_bounded_by_box_scale() {
        let ts = targets(1);
        let noise = NoiseConfig {
            point_jitter: 0.4,
            label_flip: 0.0,
            n_slots: 50,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dn = make_denoising_queries(&ts, 3, &noise, &mut rng).unwrap();
        let t = &ts[0];
        for c in &dn.contours {
            for (p, q) in c.points.iter().zip(&t.contour.points) {
                assert!((p.x - q.x).abs() <= 0.4 * t.bbox.w + 1e-12);
                assert!((p.y - q.y).abs() <= 0.4 * t.bbox.h + 1e-12);
            }
        }
    }
}
