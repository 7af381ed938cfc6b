//! Two-way normalized-cuts partition of the affinity matrix.
//!
//! The split comes from the second-smallest eigenvector of the symmetric
//! normalized Laplacian, thresholded at the value minimizing the
//! normalized-cut objective over its sorted entries.

use nalgebra::DMatrix;
use ndarray::Array2;

#[derive(Clone, Debug)]
pub struct NcutsResult {
    /// 0/1 side per patch.
    pub labels: Vec<u8>,
    /// True when every candidate split scores the same objective (e.g. a
    /// constant affinity matrix), so the returned split is arbitrary but
    /// deterministic.
    pub degenerate: bool,
}

const DEGENERACY_TOL: f64 = 1e-9;

/// Partitions patches into two sides. Patches with all-zero off-diagonal
/// affinity are disconnected from the graph and deterministically assigned
/// side 1.
pub fn segment_ncuts(affinity: &Array2<f32>) -> NcutsResult {
    let p = affinity.dim().0;
    assert_eq!(p, affinity.dim().1, "affinity must be square");
    let mut labels = vec![0u8; p];
    if p == 0 {
        return NcutsResult {
            labels,
            degenerate: true,
        };
    }

    // isolate disconnected patches
    let connected: Vec<usize> = (0..p)
        .filter(|&i| {
            (0..p).any(|j| j != i && affinity[[i, j]] > 0.0)
        })
        .collect();
    for i in 0..p {
        if !connected.contains(&i) {
            labels[i] = 1;
        }
    }
    let m = connected.len();
    if m < 2 {
        return NcutsResult {
            labels,
            degenerate: true,
        };
    }

    // W, degrees and L_sym = I - D^{-1/2} W D^{-1/2} over connected patches
    let mut w = DMatrix::<f64>::zeros(m, m);
    for (a, &i) in connected.iter().enumerate() {
        for (b, &j) in connected.iter().enumerate() {
            w[(a, b)] = affinity[[i, j]] as f64;
        }
    }
    let degrees: Vec<f64> = (0..m).map(|a| w.row(a).sum()).collect();
    let mut lsym = DMatrix::<f64>::identity(m, m);
    for a in 0..m {
        for b in 0..m {
            let norm = (degrees[a] * degrees[b]).sqrt();
            if norm > 0.0 {
                lsym[(a, b)] -= w[(a, b)] / norm;
            }
        }
    }

    let eigen = nalgebra::SymmetricEigen::new(lsym);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[a].partial_cmp(&eigen.eigenvalues[b]).unwrap());
    let fiedler = eigen.eigenvectors.column(order[1]);

    // sweep thresholds between consecutive sorted entries
    let mut by_value: Vec<usize> = (0..m).collect();
    by_value.sort_by(|&a, &b| fiedler[a].partial_cmp(&fiedler[b]).unwrap());

    let total_assoc: f64 = degrees.iter().sum();
    let mut in_side = vec![false; m];
    let mut cut = 0.0f64;
    let mut assoc = 0.0f64;
    let mut best: Option<(f64, usize)> = None;
    let mut objectives = Vec::with_capacity(m - 1);
    for t in 0..(m - 1) {
        let k = by_value[t];
        // moving k into the side: cut gains k's edges to the outside and
        // loses the edges that now become internal
        let mut to_side = 0.0;
        let mut off_diag = 0.0;
        for j in 0..m {
            if j == k {
                continue;
            }
            off_diag += w[(k, j)];
            if in_side[j] {
                to_side += w[(k, j)];
            }
        }
        cut += off_diag - 2.0 * to_side;
        assoc += degrees[k];
        in_side[k] = true;

        // identical eigen-coordinates stay on one side together
        let distinct = fiedler[by_value[t + 1]] - fiedler[k] > 1e-12;
        let other = total_assoc - assoc;
        let objective = if distinct && assoc > 0.0 && other > 0.0 {
            cut / assoc + cut / other
        } else {
            f64::INFINITY
        };
        objectives.push(objective);
        match best {
            Some((b, _)) if objective >= b => {}
            _ => best = Some((objective, t)),
        }
    }

    let (best_obj, best_t, mut degenerate) = match best {
        Some((obj, t)) if obj.is_finite() => (obj, t, false),
        // no distinct threshold at all: fall back to a balanced split
        _ => (f64::INFINITY, (m - 1) / 2, true),
    };
    if !degenerate {
        let finite: Vec<f64> = objectives.iter().copied().filter(|o| o.is_finite()).collect();
        degenerate =
            finite.len() > 1 && finite.iter().all(|&o| (o - best_obj).abs() <= DEGENERACY_TOL);
    }

    for (t, &k) in by_value.iter().enumerate() {
        if t > best_t {
            labels[connected[k]] = 1;
        }
    }
    NcutsResult { labels, degenerate }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agreement(labels: &[u8], block: usize) -> f64 {
        let p = labels.len();
        let direct = (0..p)
            .filter(|&i| (i < block) == (labels[i] == 0))
            .count();
        let swapped = p - direct;
        direct.max(swapped) as f64 / p as f64
    }

    #[test]
    fn exact_two_block_is_recovered() {
        let p = 20;
        let block = 12;
        let mut aff = Array2::zeros((p, p));
        for i in 0..p {
            for j in 0..p {
                aff[[i, j]] = if i == j {
                    1.0
                } else if (i < block) == (j < block) {
                    1.0
                } else {
                    0.0
                };
            }
        }
        let result = segment_ncuts(&aff);
        assert!(!result.degenerate);
        assert_eq!(agreement(&result.labels, block), 1.0);
    }

    #[test]
    fn noisy_two_block_is_mostly_recovered() {
        use crate::localize::meanshift::tests::planted_two_block;
        for seed in 0..5 {
            let aff = planted_two_block(100, 60, 0.05, 100 + seed);
            let result = segment_ncuts(&aff);
            assert!(
                agreement(&result.labels, 60) >= 0.95,
                "seed {seed}: agreement {}",
                agreement(&result.labels, 60)
            );
        }
    }

    #[test]
    fn constant_affinity_is_flagged_degenerate() {
        let aff = Array2::from_elem((12, 12), 1.0f32);
        let r1 = segment_ncuts(&aff);
        assert!(r1.degenerate);
        // deterministic across calls
        let r2 = segment_ncuts(&aff);
        assert_eq!(r1.labels, r2.labels);
        assert!(r1.labels.iter().any(|&l| l == 0));
        assert!(r1.labels.iter().any(|&l| l == 1));
    }

    #[test]
    fn disconnected_patch_gets_its_own_side() {
        let mut aff = Array2::zeros((5, 5));
        for i in 0..5 {
            aff[[i, i]] = 1.0;
        }
        // patches 0..4 strongly connected, patch 4 isolated
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    aff[[i, j]] = 0.9;
                }
            }
        }
        let result = segment_ncuts(&aff);
        assert_eq!(result.labels[4], 1);
    }
}
