//! Minimum-cost bipartite assignment (Hungarian algorithm, shortest
//! augmenting path formulation). Rows are ground-truth instances, columns
//! are prediction slots; rows must not outnumber columns.

use crate::error::{Error, Result};

/// Injective assignment from ground-truth instances to prediction slots.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(gt_index, prediction_slot)` pairs, sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Solve the rectangular assignment problem for `cost[gt][slot]`.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let n = cost.len();
    if n == 0 {
        return Ok(MatchResult {
            pairs: vec![],
            total_cost: 0.0,
        });
    }
    let m = cost[0].len();
    if n > m {
        return Err(Error::Contract(format!(
            "more ground-truth rows ({n}) than prediction slots ({m})"
        )));
    }
    for row in cost {
        if row.len() != m {
            return Err(Error::Contract("ragged cost matrix".into()));
        }
        if row.iter().any(|c| !c.is_finite()) {
            return Err(Error::Contract("non-finite cost entry".into()));
        }
    }

    // 1-indexed potentials; p[j] is the row matched to column j (0 = none).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // augment along the alternating path
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::with_capacity(n);
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] != 0 {
            pairs.push((p[j] - 1, j - 1));
            total += cost[p[j] - 1][j - 1];
        }
    }
    pairs.sort_unstable();
    Ok(MatchResult {
        pairs,
        total_cost: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        // enumerate all injective assignments of rows to columns
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cost[0].len() {
                if !used[j] {
                    used[j] = true;
                    let c = cost[row][j] + rec(cost, row + 1, used);
                    used[j] = false;
                    best = best.min(c);
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost[0].len()])
    }

    #[test]
    fn diagonal_dominant_identity() {
        let cost = vec![
            vec![0.0, 9.0, 9.0],
            vec![9.0, 0.0, 9.0],
            vec![9.0, 9.0, 0.0],
        ];
        let r = hungarian_match(&cost).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(r.total_cost, 0.0);
    }

    #[test]
    fn matches_brute_force_up_to_6x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..1000 {
            let n = rng.gen_range(1..=6);
            let m = rng.gen_range(n..=6);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect();
            let r = hungarian_match(&cost).unwrap();
            let bf = brute_force_min(&cost);
            assert!(
                (r.total_cost - bf).abs() < 1e-9,
                "trial {trial}: got {}, brute force {bf}",
                r.total_cost
            );
            // injectivity
            let mut rows: Vec<_> = r.pairs.iter().map(|p| p.0).collect();
            let mut cols: Vec<_> = r.pairs.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            assert_eq!(rows.len(), n);
            assert_eq!(cols.len(), n);
        }
    }

    #[test]
    fn constant_shift_leaves_assignment_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let cost: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..6).map(|_| rng.gen_range(0.0..10.0)).collect())
                .collect();
            let shifted: Vec<Vec<f64>> = cost
                .iter()
                .map(|row| row.iter().map(|c| c + 3.25).collect())
                .collect();
            let a = hungarian_match(&cost).unwrap();
            let b = hungarian_match(&shifted).unwrap();
            assert_eq!(a.pairs, b.pairs);
        }
    }

    #[test]
    fn rectangular_uses_cheapest_columns() {
        let cost = vec![vec![5.0, 1.0, 3.0, 0.5]];
        let r = hungarian_match(&cost).unwrap();
        assert_eq!(r.pairs, vec![(0, 3)]);
    }

    #[test]
    fn too_many_rows_rejected() {
        let cost = vec![vec![1.0], vec![2.0]];
        assert!(hungarian_match(&cost).is_err());
    }

    #[test]
    fn empty_is_empty() {
        let r = hungarian_match(&[]).unwrap();
        assert!(r.pairs.is_empty());
        assert_eq!(r.total_cost, 0.0);
    }

    #[test]
    fn non_finite_rejected() {
        let cost = vec![vec![1.0, f64::NAN]];
        assert!(hungarian_match(&cost).is_err());
    }
}
