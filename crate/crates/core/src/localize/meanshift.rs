//! Mode seeking over affinity rows with a Gaussian kernel.
//!
//! Each patch's affinity row is a point in R^P. Points are shifted to the
//! weighted mean of all rows until the shift drops below 1e-4 (or 200
//! iterations), converged points are grouped into modes, and the dominant
//! mode's member rows are averaged into the merged row.

use ndarray::Array2;

/// Kernel bandwidth selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BandwidthPolicy {
    /// Median pairwise Euclidean distance between rows.
    Median,
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub struct MeanShiftOutcome {
    /// Mode id assigned to each point.
    pub mode_of: Vec<usize>,
    /// Point indices belonging to the dominant mode.
    pub dominant: Vec<usize>,
    /// Mean of the dominant mode's original rows.
    pub merged_row: Vec<f32>,
    pub bandwidth: f64,
    pub mode_count: usize,
}

const SHIFT_TOL: f64 = 1e-4;
const MAX_ITERS: usize = 200;

fn median_pairwise_distance(data: &[Vec<f64>]) -> f64 {
    let n = data.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(euclidean(&data[i], &data[j]));
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Runs mean shift over the rows of a P×P affinity matrix.
pub fn mean_shift_rows(rows: &Array2<f32>, policy: BandwidthPolicy) -> MeanShiftOutcome {
    let p = rows.dim().0;
    assert!(p >= 1, "mean shift needs at least one row");
    let data: Vec<Vec<f64>> = (0..p)
        .map(|i| rows.row(i).iter().map(|&v| v as f64).collect())
        .collect();

    let bandwidth = match policy {
        BandwidthPolicy::Median => median_pairwise_distance(&data),
        BandwidthPolicy::Fixed(h) => h,
    };

    // All rows identical (bandwidth 0): a single mode containing everything.
    if bandwidth < 1e-12 {
        let merged = mean_rows(rows, &(0..p).collect::<Vec<_>>());
        return MeanShiftOutcome {
            mode_of: vec![0; p],
            dominant: (0..p).collect(),
            merged_row: merged,
            bandwidth,
            mode_count: 1,
        };
    }

    let inv_two_h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut converged: Vec<Vec<f64>> = Vec::with_capacity(p);
    for start in &data {
        let mut point = start.clone();
        for _ in 0..MAX_ITERS {
            let mut weight_sum = 0.0;
            let mut mean = vec![0.0; point.len()];
            for row in &data {
                let d = euclidean(&point, row);
                let w = (-d * d * inv_two_h2).exp();
                weight_sum += w;
                for (m, &x) in mean.iter_mut().zip(row) {
                    *m += w * x;
                }
            }
            for m in mean.iter_mut() {
                *m /= weight_sum;
            }
            let shift = euclidean(&point, &mean);
            point = mean;
            if shift < SHIFT_TOL {
                break;
            }
        }
        converged.push(point);
    }

    // Group converged points into modes within half a bandwidth.
    let merge_tol = (0.5 * bandwidth).max(10.0 * SHIFT_TOL);
    let mut centers: Vec<Vec<f64>> = Vec::new();
    let mut mode_of = vec![0usize; p];
    for (i, point) in converged.iter().enumerate() {
        let mut assigned = None;
        for (m, center) in centers.iter().enumerate() {
            if euclidean(point, center) <= merge_tol {
                assigned = Some(m);
                break;
            }
        }
        match assigned {
            Some(m) => mode_of[i] = m,
            None => {
                centers.push(point.clone());
                mode_of[i] = centers.len() - 1;
            }
        }
    }

    let mut counts = vec![0usize; centers.len()];
    for &m in &mode_of {
        counts[m] += 1;
    }
    let dominant_mode = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(m, _)| m)
        .unwrap();
    let dominant: Vec<usize> = (0..p).filter(|&i| mode_of[i] == dominant_mode).collect();
    let merged_row = mean_rows(rows, &dominant);

    MeanShiftOutcome {
        mode_of,
        dominant,
        merged_row,
        bandwidth,
        mode_count: centers.len(),
    }
}

fn mean_rows(rows: &Array2<f32>, members: &[usize]) -> Vec<f32> {
    let p = rows.dim().1;
    let mut out = vec![0.0f64; p];
    for &i in members {
        for (o, &v) in out.iter_mut().zip(rows.row(i)) {
            *o += v as f64;
        }
    }
    let n = members.len() as f64;
    out.into_iter().map(|v| (v / n) as f32).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Planted two-block affinity: within 0.9, across 0.1, Gaussian noise.
    pub(crate) fn planted_two_block(
        p: usize,
        block: usize,
        noise: f64,
        seed: u64,
    ) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::zeros((p, p));
        for i in 0..p {
            for j in 0..p {
                if i == j {
                    m[[i, j]] = 1.0;
                    continue;
                }
                let base = if (i < block) == (j < block) { 0.9 } else { 0.1 };
                // symmetric noise
                if i < j {
                    let z: f64 = {
                        // Box-Muller
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                    };
                    let v = (base + noise * z).clamp(0.0, 1.0) as f32;
                    m[[i, j]] = v;
                    m[[j, i]] = v;
                }
            }
        }
        m
    }

    #[test]
    fn identical_rows_collapse_to_one_mode() {
        let rows = Array2::from_elem((6, 6), 0.7f32);
        let out = mean_shift_rows(&rows, BandwidthPolicy::Median);
        assert_eq!(out.mode_count, 1);
        assert_eq!(out.dominant.len(), 6);
        assert!(out.merged_row.iter().all(|&v| (v - 0.7).abs() < 1e-6));
        assert_eq!(out.bandwidth, 0.0);
    }

    #[test]
    fn planted_partition_dominant_mode_is_recovered() {
        for seed in 0..5 {
            let rows = planted_two_block(100, 60, 0.05, seed);
            let out = mean_shift_rows(&rows, BandwidthPolicy::Median);
            // dominant mode should be (close to) the 60-block
            let in_block = out.dominant.iter().filter(|&&i| i < 60).count();
            let union = 60 + out.dominant.len() - in_block;
            let iou = in_block as f64 / union as f64;
            assert!(iou >= 0.95, "seed {seed}: IOU {iou}");
        }
    }

    #[test]
    fn merged_row_is_convex_combination_of_member_rows() {
        let rows = planted_two_block(30, 18, 0.05, 3);
        let out = mean_shift_rows(&rows, BandwidthPolicy::Median);
        for (k, &v) in out.merged_row.iter().enumerate() {
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for &i in &out.dominant {
                lo = lo.min(rows[[i, k]]);
                hi = hi.max(rows[[i, k]]);
            }
            assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
        }
    }

    #[test]
    fn fixed_bandwidth_is_respected() {
        let rows = planted_two_block(20, 10, 0.02, 1);
        let out = mean_shift_rows(&rows, BandwidthPolicy::Fixed(0.5));
        assert_eq!(out.bandwidth, 0.5);
    }
}
