//! Contour fine-grained distribution refinement: per-point probabilistic
//! offset bins, residual logit updates across decoder layers, and the
//! weighted-expectation decode.
//!
//! Logits live in tensors of shape `[..., 2, bins]` (x and y axes, one row of
//! bin scores each). All operations are differentiable.

use crate::error::{Error, Result};
use candle_core::{DType, Device, Tensor};

/// Signed offset magnitudes per bin index: antisymmetric about the center
/// bin, magnitudes growing as a power law toward `±w_max`.
#[derive(Debug, Clone)]
pub struct WeightingTable {
    pub values: Tensor,
    pub w_max: f64,
}

/// Raw per-bin scores for every boundary point, refined residually across
/// decoder layers.
#[derive(Debug, Clone)]
pub struct DistributionState {
    pub logits: Tensor,
    pub layer_index: usize,
}

impl DistributionState {
    pub fn new(logits: Tensor, layer_index: usize) -> Self {
        DistributionState {
            logits,
            layer_index,
        }
    }

    pub fn zeros(shape: &[usize], dtype: DType, device: &Device) -> Result<Self> {
        Ok(DistributionState {
            logits: Tensor::zeros(shape, dtype, device)?,
            layer_index: 0,
        })
    }

    pub fn n_bins(&self) -> usize {
        *self.logits.dims().last().unwrap()
    }

    /// Softmax over the bin axis.
    pub fn probabilities(&self) -> Result<Tensor> {
        let last = self.logits.rank() - 1;
        Ok(candle_nn::ops::softmax(&self.logits, last)?)
    }
}

/// Table entry values from the power-law formula, center bin exactly zero.
pub fn weighting_values(n_bins: usize, w_max: f64, curvature: f64) -> Result<Vec<f64>> {
    if n_bins < 3 || n_bins % 2 == 0 {
        return Err(Error::Config(format!(
            "weighting table needs an odd bin count >= 3, got {n_bins}"
        )));
    }
    if w_max <= 0.0 || curvature < 1.0 {
        return Err(Error::Config(format!(
            "invalid weighting parameters: w_max={w_max}, curvature={curvature}"
        )));
    }
    let center = n_bins / 2;
    let k_max = center as f64;
    let mut values = vec![0.0; n_bins];
    for k in 1..=center {
        let mag = w_max * (k as f64 / k_max).powf(curvature);
        values[center + k] = mag;
        values[center - k] = -mag;
    }
    Ok(values)
}

pub fn make_weighting_table(
    n_bins: usize,
    w_max: f64,
    curvature: f64,
    dtype: DType,
    device: &Device,
) -> Result<WeightingTable> {
    let values = weighting_values(n_bins, w_max, curvature)?;
    let values = Tensor::from_vec(values, n_bins, device)?.to_dtype(dtype)?;
    Ok(WeightingTable { values, w_max })
}

impl WeightingTable {
    /// Wrap an existing (possibly trainable) tensor of bin offsets.
    pub fn from_tensor(values: Tensor, w_max: f64) -> Self {
        WeightingTable { values, w_max }
    }

    pub fn len(&self) -> usize {
        self.values.dims1().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Residual logit update: `new = prev + residual`, layer index incremented.
pub fn refine_logits(prev: &DistributionState, residual: &Tensor) -> Result<DistributionState> {
    if prev.logits.dims() != residual.dims() {
        return Err(Error::Contract(format!(
            "refine_logits shape mismatch: {:?} vs {:?}",
            prev.logits.dims(),
            residual.dims()
        )));
    }
    Ok(DistributionState {
        logits: (&prev.logits + residual)?,
        layer_index: prev.layer_index + 1,
    })
}

/// Weighted-expectation decode: per point and axis, `Σ_n W(n)·softmax(logits)_n`.
/// Input `[..., 2, bins]`, output `[..., 2]`.
pub fn expected_offset(state: &DistributionState, table: &WeightingTable) -> Result<Tensor> {
    let dims = state.logits.dims();
    let bins = *dims.last().unwrap();
    if table.len() != bins {
        return Err(Error::Contract(format!(
            "weighting table has {} entries, distribution has {} bins",
            table.len(),
            bins
        )));
    }
    let probs = state.probabilities()?;
    let mut w_shape = vec![1usize; probs.rank()];
    w_shape[probs.rank() - 1] = bins;
    let w = table.values.reshape(w_shape)?;
    Ok(probs.broadcast_mul(&w)?.sum(probs.rank() - 1)?)
}

/// Anchored decode: `v^l = v^0 + (W_c·Δx, H_c·Δy)` per point, where the
/// offsets are the weighted expectation of the current distribution.
///
/// `v0` and `scale` have shape `[..., 2]` matching the state's leading shape;
/// `scale` holds the per-point `(W_c, H_c)` reference lengths.
pub fn apply_refinement(
    v0: &Tensor,
    state: &DistributionState,
    scale: &Tensor,
    table: &WeightingTable,
) -> Result<Tensor> {
    let offsets = expected_offset(state, table)?;
    Ok((v0 + scale.broadcast_mul(&offsets)?)?)
}


#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use candle_core::Var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const BINS: usize = 17;

    fn dev() -> Device {
        Device::Cpu
    }

    fn table() -> WeightingTable {
        make_weighting_table(BINS, 0.5, 2.0, DType::F64, &dev()).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, points: usize) -> DistributionState {
        let data: Vec<f64> = (0..points * 2 * BINS).map(|_| rng.gen_range(-2.0..2.0)).collect();
        DistributionState::new(
            Tensor::from_vec(data, (points, 2, BINS), &dev()).unwrap(),
            1,
        )
    }

    #[test]
    fn linear_table_is_uniform_grid() {
        let vals = weighting_values(17, 0.5, 1.0).unwrap();
        for (k, v) in vals.iter().enumerate() {
            let expect = -0.5 + k as f64 * (1.0 / 16.0);
            assert_abs_diff_eq!(*v, expect, epsilon = 1e-12);
        }
        assert_eq!(vals[8], 0.0);
    }

    #[test]
    fn table_antisymmetric() {
        for curvature in [1.0, 1.5, 2.0, 3.0] {
            let vals = weighting_values(17, 0.5, curvature).unwrap();
            for k in 0..17 {
                assert_abs_diff_eq!(vals[k] + vals[16 - k], 0.0, epsilon = 1e-9);
            }
            // strictly increasing
            for k in 1..17 {
                assert!(vals[k] > vals[k - 1]);
            }
        }
    }

    #[test]
    fn curved_table_denser_near_zero() {
        let vals = weighting_values(17, 0.5, 2.0).unwrap();
        assert!(vals[9].abs() < 0.5 / 8.0);
        assert_abs_diff_eq!(vals[9], 0.5 / 64.0, epsilon = 1e-12);
    }

    #[test]
    fn bad_table_parameters_rejected() {
        assert!(weighting_values(16, 0.5, 2.0).is_err());
        assert!(weighting_values(17, 0.0, 2.0).is_err());
        assert!(weighting_values(17, 0.5, 0.5).is_err());
        assert!(weighting_values(1, 0.5, 2.0).is_err());
    }

    #[test]
    fn refine_zero_residual_keeps_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_state(&mut rng, 4);
        let zero = Tensor::zeros_like(&s.logits).unwrap();
        let s2 = refine_logits(&s, &zero).unwrap();
        assert_eq!(s2.layer_index, s.layer_index + 1);
        let d = (s.probabilities().unwrap() - s2.probabilities().unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(d < 1e-9);
    }

    #[test]
    fn refine_constant_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_state(&mut rng, 4);
        let shift = Tensor::full(3.7f64, s.logits.dims(), &dev()).unwrap();
        let s2 = refine_logits(&s, &shift).unwrap();
        let d = (s.probabilities().unwrap() - s2.probabilities().unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(d < 1e-9);
    }

    #[test]
    fn refine_spike_concentrates_mass() {
        let s = DistributionState::zeros(&[1, 2, BINS], DType::F64, &dev()).unwrap();
        let mut res = vec![0.0f64; 2 * BINS];
        res[3] = 10.0; // x axis, bin 3
        res[BINS + 12] = 10.0; // y axis, bin 12
        let res = Tensor::from_vec(res, (1, 2, BINS), &dev()).unwrap();
        let s2 = refine_logits(&s, &res).unwrap();
        let probs = s2.probabilities().unwrap().to_vec3::<f64>().unwrap();
        assert!(probs[0][0][3] > 0.99);
        assert!(probs[0][1][12] > 0.99);
    }

    #[test]
    fn refine_shape_mismatch_rejected() {
        let s = DistributionState::zeros(&[1, 2, BINS], DType::F64, &dev()).unwrap();
        let bad = Tensor::zeros((2, 2, BINS), DType::F64, &dev()).unwrap();
        assert!(refine_logits(&s, &bad).is_err());
    }

    #[test]
    fn uniform_distribution_decodes_to_zero() {
        let s = DistributionState::zeros(&[3, 2, BINS], DType::F64, &dev()).unwrap();
        let off = expected_offset(&s, &table()).unwrap();
        let m = off.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(m < 1e-9);
    }

    #[test]
    fn one_hot_decodes_to_table_entry() {
        let t = table();
        let tv = t.values.to_vec1::<f64>().unwrap();
        for k in [0usize, 5, 8, 13, 16] {
            let mut logits = vec![0.0f64; 2 * BINS];
            logits[k] += 200.0;
            logits[BINS + k] += 200.0;
            let s = DistributionState::new(
                Tensor::from_vec(logits, (1, 2, BINS), &dev()).unwrap(),
                1,
            );
            let off = expected_offset(&s, &t).unwrap().to_vec2::<f64>().unwrap();
            assert_abs_diff_eq!(off[0][0], tv[k], epsilon = 1e-9);
            assert_abs_diff_eq!(off[0][1], tv[k], epsilon = 1e-9);
        }
    }

    #[test]
    fn expected_offset_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_state(&mut rng, 5);
        let t = table();
        let tv = t.values.to_vec1::<f64>().unwrap();
        let got = expected_offset(&s, &t).unwrap().to_vec2::<f64>().unwrap();
        let logits = s.logits.to_vec3::<f64>().unwrap();
        for p in 0..5 {
            for axis in 0..2 {
                let want = reference::expected_offset(&logits[p][axis], &tv);
                assert_abs_diff_eq!(got[p][axis], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn expected_offset_gradient_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let points = 3;
        let data: Vec<f64> = (0..points * 2 * BINS).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let var = Var::from_tensor(
            &Tensor::from_vec(data.clone(), (points, 2, BINS), &dev()).unwrap(),
        )
        .unwrap();
        let t = table();
        let tv = t.values.to_vec1::<f64>().unwrap();

        // weight each output so the scalar mixes all entries
        let weights: Vec<f64> = (0..points * 2).map(|i| 0.3 + 0.1 * i as f64).collect();
        let wt = Tensor::from_vec(weights.clone(), (points, 2), &dev()).unwrap();

        let state = DistributionState::new(var.as_tensor().clone(), 1);
        let out = expected_offset(&state, &t).unwrap();
        let scalar = (out * &wt).unwrap().sum_all().unwrap();
        let grads = scalar.backward().unwrap();
        let grad = grads
            .get(&var)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();

        // central finite differences against the plain-f64 oracle
        let eval = |data: &[f64]| -> f64 {
            let mut acc = 0.0;
            for p in 0..points {
                for axis in 0..2 {
                    let row = &data[(p * 2 + axis) * BINS..(p * 2 + axis + 1) * BINS];
                    acc += weights[p * 2 + axis] * reference::expected_offset(row, &tv);
                }
            }
            acc
        };
        let step = 1e-5;
        for i in 0..data.len() {
            let mut plus = data.clone();
            let mut minus = data.clone();
            plus[i] += step;
            minus[i] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                (fd - grad[i]).abs() / denom <= 1e-4,
                "grad mismatch at {i}: fd={fd}, ad={}",
                grad[i]
            );
        }
    }

    #[test]
    fn apply_refinement_identity_on_uniform() {
        let v0 = Tensor::rand(0.0f64, 1.0, (4, 2), &dev()).unwrap();
        let s = DistributionState::zeros(&[4, 2, BINS], DType::F64, &dev()).unwrap();
        let scale = Tensor::full(0.3f64, (4, 2), &dev()).unwrap();
        let v = apply_refinement(&v0, &s, &scale, &table()).unwrap();
        let d = (v - &v0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-9);
    }

    #[test]
    fn apply_refinement_saturated_arithmetic() {
        // one-hot at the max bin with W_c=H_c=0.2, w_max=0.5 -> move (0.1, 0.1)
        let v0 = Tensor::zeros((1, 2), DType::F64, &dev()).unwrap();
        let mut logits = vec![0.0f64; 2 * BINS];
        logits[BINS - 1] = 200.0;
        logits[2 * BINS - 1] = 200.0;
        let s = DistributionState::new(
            Tensor::from_vec(logits, (1, 2, BINS), &dev()).unwrap(),
            1,
        );
        let scale = Tensor::full(0.2f64, (1, 2), &dev()).unwrap();
        let v = apply_refinement(&v0, &s, &scale, &table()).unwrap().to_vec2::<f64>().unwrap();
        assert_abs_diff_eq!(v[0][0], 0.1, epsilon = 1e-9);
        assert_abs_diff_eq!(v[0][1], 0.1, epsilon = 1e-9);
    }

    #[test]
    fn apply_refinement_linear_in_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_state(&mut rng, 4);
        let v0 = Tensor::zeros((4, 2), DType::F64, &dev()).unwrap();
        let scale1 = Tensor::from_vec(
            (0..8).map(|i| if i % 2 == 0 { 0.2f64 } else { 0.3 }).collect::<Vec<_>>(),
            (4, 2),
            &dev(),
        )
        .unwrap();
        // double W_c only
        let scale2 = Tensor::from_vec(
            (0..8).map(|i| if i % 2 == 0 { 0.4f64 } else { 0.3 }).collect::<Vec<_>>(),
            (4, 2),
            &dev(),
        )
        .unwrap();
        let t = table();
        let v1 = apply_refinement(&v0, &s, &scale1, &t).unwrap().to_vec2::<f64>().unwrap();
        let v2 = apply_refinement(&v0, &s, &scale2, &t).unwrap().to_vec2::<f64>().unwrap();
        for p in 0..4 {
            assert_abs_diff_eq!(v2[p][0], 2.0 * v1[p][0], epsilon = 1e-12);
            assert_abs_diff_eq!(v2[p][1], v1[p][1], epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_telescoping() {
        // composing residuals then decoding once == decoding from the
        // accumulated logits
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut state = DistributionState::zeros(&[4, 2, BINS], DType::F64, &dev()).unwrap();
        let mut total = Tensor::zeros((4, 2, BINS), DType::F64, &dev()).unwrap();
        for _ in 0..4 {
            let r = random_state(&mut rng, 4).logits;
            total = (&total + &r).unwrap();
            state = refine_logits(&state, &r).unwrap();
        }
        let t = table();
        let a = expected_offset(&state, &t).unwrap();
        let b = expected_offset(&DistributionState::new(total, 4), &t).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
        assert_eq!(state.layer_index, 4);
    }

    #[test]
    fn decode_bounded_by_w_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = table();
        for _ in 0..50 {
            let s = random_state(&mut rng, 8);
            let m = expected_offset(&s, &t)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(m <= t.w_max + 1e-12);
        }
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_state(&mut rng, 6);
        let sums = s
            .probabilities()
            .unwrap()
            .sum(2)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for v in sums {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-6);
        }
    }
}
