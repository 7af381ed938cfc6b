//! From patch consistency to image self-consistency: grid planning,
//! pairwise affinity, per-patch response maps with overlap averaging,
//! mean-shift merging, normalized-cuts segmentation, splice mask and
//! detection score.

mod meanshift;
mod ncuts;

pub use meanshift::{mean_shift_rows, BandwidthPolicy, MeanShiftOutcome};
pub use ncuts::{segment_ncuts, NcutsResult};

use std::path::Path;

use image::RgbImage;
use ndarray::{Array2, Axis};
use serde::Serialize;

use crate::combiner::CombinerModel;
use crate::config::{ExperimentConfig, GridConfig};
use crate::error::Error;
use crate::net::ConsistencyNetwork;
use crate::raster;
use crate::sampler::Patch;
use crate::Result;

/// Patch layout for one image: coordinates are the grid cross product
/// xs × ys, stored row-major (y outer, x inner).
#[derive(Clone, Debug, PartialEq)]
pub struct GridPlan {
    pub coords: Vec<(u32, u32)>,
    pub stride: f64,
    /// (columns, rows)
    pub grid_shape: (usize, usize),
    pub patch_size: u32,
}

impl GridPlan {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Plans the patch grid: the stride places `n_longest` patches end-inclusive
/// along the longest dimension and reuses that stride on the short axis.
pub fn plan_grid(width: u32, height: u32, patch_size: u32, n_longest: usize) -> Result<GridPlan> {
    if width < patch_size || height < patch_size {
        return Err(Error::TooSmall {
            width,
            height,
            min: patch_size,
        });
    }
    if n_longest < 1 {
        return Err(Error::Config("n_longest must be at least 1".into()));
    }
    let (long, short) = (width.max(height) as u64, width.min(height) as u64);
    let p = patch_size as u64;

    let (stride, n_long, n_short) = if long == p || n_longest == 1 {
        (0.0, 1usize, 1usize)
    } else {
        let stride = (long - p) as f64 / (n_longest - 1) as f64;
        // count along the short side in exact integer arithmetic:
        // floor((S - p) * (n - 1) / (L - p)) + 1
        let n_short = ((short - p) * (n_longest as u64 - 1) / (long - p)) as usize + 1;
        (stride, n_longest, n_short)
    };

    let (cols, rows) = if width >= height {
        (n_long, n_short)
    } else {
        (n_short, n_long)
    };

    let positions = |count: usize, limit: u32| -> Vec<u32> {
        (0..count)
            .map(|i| {
                let c = (i as f64 * stride).round() as u32;
                c.min(limit - patch_size)
            })
            .collect()
    };
    let xs = positions(cols, width);
    let ys = positions(rows, height);
    let mut coords = Vec::with_capacity(cols * rows);
    for &y in &ys {
        for &x in &xs {
            coords.push((x, y));
        }
    }
    Ok(GridPlan {
        coords,
        stride,
        grid_shape: (cols, rows),
        patch_size,
    })
}

/// P×P overall-consistency scores: symmetric with unit diagonal.
#[derive(Clone, Debug)]
pub struct AffinityMatrix {
    values: Array2<f32>,
}

impl AffinityMatrix {
    /// Builds the matrix from ordered-pair scores by averaging (i, j) and
    /// (j, i) and pinning the diagonal to 1.
    pub fn from_ordered_scores(mut scores: Array2<f32>) -> AffinityMatrix {
        let p = scores.dim().0;
        assert_eq!(scores.dim().0, scores.dim().1, "scores must be square");
        for i in 0..p {
            scores[[i, i]] = 1.0;
            for j in (i + 1)..p {
                let mean = 0.5 * (scores[[i, j]] + scores[[j, i]]);
                scores[[i, j]] = mean;
                scores[[j, i]] = mean;
            }
        }
        AffinityMatrix { values: scores }
    }

    pub fn p(&self) -> usize {
        self.values.dim().0
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn row(&self, i: usize) -> Vec<f32> {
        self.values.row(i).to_vec()
    }

    /// Raw dump: little-endian f32, row-major, plus a JSON header file.
    pub fn dump_raw(&self, raw_path: &Path, header_path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in self.values.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(raw_path, bytes).map_err(|e| Error::io(raw_path, e))?;
        let header = serde_json::json!({ "P": self.p(), "order": "row-major" });
        std::fs::write(header_path, serde_json::to_string_pretty(&header)?)
            .map_err(|e| Error::io(header_path, e))
    }
}

/// Scores ordered patch pairs with the probability that both patches come
/// from the same image. Implemented by the trained model and by mocks in
/// tests.
pub trait PairScorer {
    fn score_pairs(&self, patches: &[Patch], pairs: &[(usize, usize)]) -> Result<Vec<f32>>;
}

/// The production scorer: frozen consistency network plus combiner.
pub struct ModelScorer<'a> {
    pub net: &'a ConsistencyNetwork<f32>,
    pub combiner: &'a CombinerModel,
}

impl PairScorer for ModelScorer<'_> {
    fn score_pairs(&self, patches: &[Patch], pairs: &[(usize, usize)]) -> Result<Vec<f32>> {
        // embed every patch once
        let mut embeddings = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(32) {
            let x = crate::net::stack_patches(chunk);
            embeddings.push(self.net.embed_batch(&x)?);
        }
        let emb = ndarray::concatenate(
            Axis(0),
            &embeddings.iter().map(|e| e.view()).collect::<Vec<_>>(),
        )
        .unwrap();
        let e = emb.dim().1;

        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(4096) {
            let mut h = Array2::zeros((chunk.len(), 2 * e));
            for (r, &(i, j)) in chunk.iter().enumerate() {
                h.slice_mut(ndarray::s![r, 0..e]).assign(&emb.row(i));
                h.slice_mut(ndarray::s![r, e..2 * e]).assign(&emb.row(j));
            }
            let probs = self.net.head_probs(&h)?;
            let scores = self.combiner.score_rows(&probs);
            out.extend(scores.iter().copied());
        }
        Ok(out)
    }
}

/// Extracts the grid patches from an image.
pub fn grid_patches(image: &RgbImage, grid: &GridPlan) -> Vec<Patch> {
    grid.coords
        .iter()
        .map(|&(x, y)| Patch {
            pixels: raster::crop_chw(image, x, y, grid.patch_size),
            source_photo_id: String::new(),
            origin: (x, y),
        })
        .collect()
}

/// Scores every ordered patch pair and assembles the affinity matrix.
pub fn compute_affinity(
    image: &RgbImage,
    scorer: &dyn PairScorer,
    grid: &GridPlan,
) -> Result<AffinityMatrix> {
    let patches = grid_patches(image, grid);
    let p = patches.len();
    let mut pairs = Vec::with_capacity(p * p.saturating_sub(1));
    for i in 0..p {
        for j in 0..p {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    let scores = scorer.score_pairs(&patches, &pairs)?;
    let mut matrix = Array2::zeros((p, p));
    for (&(i, j), &s) in pairs.iter().zip(&scores) {
        matrix[[i, j]] = s;
    }
    Ok(AffinityMatrix::from_ordered_scores(matrix))
}

/// Per-pixel map provenance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Merged,
    SinglePatch,
}

/// Per-pixel consistency in [0, 1] at source-image resolution.
#[derive(Clone, Debug)]
pub struct ConsistencyMap {
    pub values: Array2<f32>,
    pub provenance: Provenance,
}

/// Renders a per-patch score row to pixel resolution: every pixel takes the
/// mean score of the patches covering it; uncovered pixels copy the nearest
/// covered pixel (coverage is separable because the grid is a cross
/// product).
pub fn render_row(
    row: &[f32],
    grid: &GridPlan,
    width: u32,
    height: u32,
    provenance: Provenance,
) -> ConsistencyMap {
    let (w, h) = (width as usize, height as usize);
    let p = grid.patch_size as usize;
    let mut sum = Array2::<f64>::zeros((h, w));
    let mut count = Array2::<u32>::zeros((h, w));
    for (&(x, y), &score) in grid.coords.iter().zip(row) {
        let (x, y) = (x as usize, y as usize);
        for yy in y..(y + p).min(h) {
            for xx in x..(x + p).min(w) {
                sum[[yy, xx]] += score as f64;
                count[[yy, xx]] += 1;
            }
        }
    }

    let nearest_covered = |len: usize, covered: &dyn Fn(usize) -> bool| -> Vec<usize> {
        let mut nearest = vec![usize::MAX; len];
        let mut last = None;
        for i in 0..len {
            if covered(i) {
                last = Some(i);
            }
            if let Some(l) = last {
                nearest[i] = l;
            }
        }
        let mut next = None;
        for i in (0..len).rev() {
            if covered(i) {
                next = Some(i);
            }
            if let Some(n) = next {
                if nearest[i] == usize::MAX || n - i < i - nearest[i] {
                    nearest[i] = n;
                }
            }
        }
        nearest
    };
    // coverage is identical across covered rows/columns
    let col_covered: Vec<bool> = (0..w).map(|x| count[[0, x]] > 0 || (0..h).any(|y| count[[y, x]] > 0)).collect();
    let row_covered: Vec<bool> = (0..h).map(|y| (0..w).any(|x| count[[y, x]] > 0)).collect();
    let nearest_x = nearest_covered(w, &|i| col_covered[i]);
    let nearest_y = nearest_covered(h, &|i| row_covered[i]);

    let mut values = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if count[[y, x]] > 0 {
                values[[y, x]] = (sum[[y, x]] / count[[y, x]] as f64) as f32;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            if count[[y, x]] == 0 {
                let (ny, nx) = (nearest_y[y], nearest_x[x]);
                values[[y, x]] = values[[ny, nx]];
            }
        }
    }
    ConsistencyMap { values, provenance }
}

/// Response map of patch `i`: its affinity row rendered with overlap
/// averaging.
pub fn response_map(
    affinity: &AffinityMatrix,
    grid: &GridPlan,
    i: usize,
    width: u32,
    height: u32,
) -> Result<ConsistencyMap> {
    if i >= affinity.p() {
        return Err(Error::Input(format!(
            "patch index {i} out of range for P={}",
            affinity.p()
        )));
    }
    Ok(render_row(
        &affinity.row(i),
        grid,
        width,
        height,
        Provenance::SinglePatch,
    ))
}

/// Mean-shift merge of all affinity rows into the consistency map.
pub fn merge_meanshift(
    affinity: &AffinityMatrix,
    grid: &GridPlan,
    width: u32,
    height: u32,
    policy: BandwidthPolicy,
) -> (ConsistencyMap, MeanShiftOutcome) {
    let outcome = mean_shift_rows(affinity.values(), policy);
    let map = render_row(&outcome.merged_row, grid, width, height, Provenance::Merged);
    (map, outcome)
}

/// Thresholds the merged map and labels the smaller region as the splice;
/// ties go to the lower-consistency side. Returns the mask and whether the
/// result degenerated to a single region.
pub fn splice_mask(map: &ConsistencyMap, threshold: f32) -> (Array2<bool>, bool) {
    let below = map.values.iter().filter(|&&v| v < threshold).count();
    let total = map.values.len();
    let above = total - below;
    if below == 0 || above == 0 {
        return (Array2::default(map.values.raw_dim()), true);
    }
    // mask=1 on the smaller region; ties break toward the low-consistency side
    let splice_is_below = below <= above;
    let mask = map.values.mapv(|v| (v < threshold) == splice_is_below);
    (mask, false)
}

/// Detection score: spatial mean of (1 - consistency); higher means more
/// likely spliced.
pub fn detection_score(map: &ConsistencyMap) -> f64 {
    let n = map.values.len() as f64;
    map.values.iter().map(|&v| 1.0 - v as f64).sum::<f64>() / n
}

/// Full per-image output.
pub struct SpliceResult {
    pub consistency_map: ConsistencyMap,
    pub splice_mask: Array2<bool>,
    pub detection_score: f64,
    pub ncut_labels: Vec<u8>,
    pub grid: GridPlan,
    pub flags: Vec<String>,
}

/// Runs the whole localization pipeline on one image.
pub fn analyze_image(
    image: &RgbImage,
    scorer: &dyn PairScorer,
    grid_cfg: &GridConfig,
    mask_threshold: f32,
) -> Result<SpliceResult> {
    let grid = plan_grid(
        image.width(),
        image.height(),
        grid_cfg.patch_size,
        grid_cfg.n_longest,
    )?;
    let affinity = compute_affinity(image, scorer, &grid)?;
    let (map, _outcome) = merge_meanshift(
        &affinity,
        &grid,
        image.width(),
        image.height(),
        BandwidthPolicy::Median,
    );
    let ncut = segment_ncuts(affinity.values());
    let (mask, no_candidate) = splice_mask(&map, mask_threshold);
    let score = detection_score(&map);

    let mut flags = Vec::new();
    if no_candidate {
        flags.push("no-splice-candidate".to_string());
    }
    if ncut.degenerate {
        flags.push("ncut-degenerate".to_string());
    }
    Ok(SpliceResult {
        consistency_map: map,
        splice_mask: mask,
        detection_score: score,
        ncut_labels: ncut.labels,
        grid,
        flags,
    })
}

#[derive(Serialize)]
struct ResultSidecar<'a> {
    grid_shape: (usize, usize),
    stride: f64,
    detection_score: f64,
    flags: &'a [String],
    /// Score orientation: higher detection_score means more likely spliced
    /// (the map stores consistency; the score averages 1 - consistency).
    score_orientation: &'static str,
    tool_version: &'static str,
    config: &'a ExperimentConfig,
}

/// Writes the per-image artifacts: 16-bit consistency map PNG, 1-bit splice
/// mask PNG and the JSON sidecar. Returns the sidecar path.
pub fn write_splice_result(
    dir: &Path,
    stem: &str,
    result: &SpliceResult,
    cfg: &ExperimentConfig,
) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    raster::write_map_png(&dir.join(format!("{stem}.png")), &result.consistency_map.values)?;
    raster::write_mask_png(&dir.join(format!("{stem}_mask.png")), &result.splice_mask)?;
    let sidecar = ResultSidecar {
        grid_shape: result.grid.grid_shape,
        stride: result.grid.stride,
        detection_score: result.detection_score,
        flags: &result.flags,
        score_orientation: "higher-is-spliced",
        tool_version: crate::TOOL_VERSION,
        config: cfg,
    };
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_matches_published_counts() {
        let g = plan_grid(2048, 1536, 128, 25).unwrap();
        assert_eq!(g.grid_shape, (25, 18));
        assert_eq!(g.len(), 450);
        assert!((g.stride - 80.0).abs() < 1e-12);

        let g = plan_grid(1000, 1000, 128, 25).unwrap();
        assert_eq!(g.grid_shape, (25, 25));
        assert_eq!(g.len(), 625);

        // portrait orientation transposes the shape
        let g = plan_grid(1536, 2048, 128, 25).unwrap();
        assert_eq!(g.grid_shape, (18, 25));
    }

    #[test]
    fn degenerate_grid_is_single_patch() {
        let g = plan_grid(128, 128, 128, 25).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.coords[0], (0, 0));
    }

    #[test]
    fn grid_patches_stay_in_bounds() {
        for (w, h) in [(2048u32, 1536u32), (1000, 1000), (517, 384), (129, 749)] {
            let g = plan_grid(w, h, 128, 25).unwrap();
            for &(x, y) in &g.coords {
                assert!(x + 128 <= w && y + 128 <= h, "({x},{y}) out of {w}x{h}");
            }
            assert!(g.len() <= 625);
        }
    }

    #[test]
    fn too_small_image_is_rejected() {
        assert!(matches!(
            plan_grid(64, 640, 128, 25),
            Err(Error::TooSmall { .. })
        ));
    }

    struct ConstScorer(f32);
    impl PairScorer for ConstScorer {
        fn score_pairs(&self, _: &[Patch], pairs: &[(usize, usize)]) -> Result<Vec<f32>> {
            Ok(vec![self.0; pairs.len()])
        }
    }

    #[test]
    fn identical_patches_with_unit_scorer_give_all_ones() {
        let img = RgbImage::from_pixel(256, 256, image::Rgb([128, 128, 128]));
        let grid = plan_grid(256, 256, 128, 3).unwrap();
        let aff = compute_affinity(&img, &ConstScorer(1.0), &grid).unwrap();
        assert!(aff.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn affinity_is_symmetric_with_unit_diagonal() {
        struct AsymmetricScorer;
        impl PairScorer for AsymmetricScorer {
            fn score_pairs(&self, _: &[Patch], pairs: &[(usize, usize)]) -> Result<Vec<f32>> {
                Ok(pairs
                    .iter()
                    .map(|&(i, j)| if i < j { 0.8 } else { 0.2 })
                    .collect())
            }
        }
        let img = RgbImage::new(256, 256);
        let grid = plan_grid(256, 256, 128, 3).unwrap();
        let aff = compute_affinity(&img, &AsymmetricScorer, &grid).unwrap();
        let v = aff.values();
        for i in 0..aff.p() {
            assert_eq!(v[[i, i]], 1.0);
            for j in 0..aff.p() {
                assert_eq!(v[[i, j]], v[[j, i]]);
                if i != j {
                    assert!((v[[i, j]] - 0.5).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn single_patch_response_map_is_constant_one() {
        let grid = plan_grid(128, 128, 128, 25).unwrap();
        let aff = AffinityMatrix::from_ordered_scores(Array2::zeros((1, 1)));
        let map = response_map(&aff, &grid, 0, 128, 128).unwrap();
        assert!(map.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_disjoint_patches_broadcast_pair_score() {
        // 256-wide, 128-tall: two non-overlapping patches
        let grid = plan_grid(256, 128, 128, 2).unwrap();
        assert_eq!(grid.len(), 2);
        let mut scores = Array2::zeros((2, 2));
        scores[[0, 1]] = 0.2;
        scores[[1, 0]] = 0.2;
        let aff = AffinityMatrix::from_ordered_scores(scores);
        let map = response_map(&aff, &grid, 0, 256, 128).unwrap();
        // pixels under patch 0 only: self-affinity 1
        assert_eq!(map.values[[0, 0]], 1.0);
        // pixels under patch 1 only: affinity 0.2
        assert!((map.values[[0, 200]] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn response_map_matches_bruteforce_overlap_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid = plan_grid(300, 200, 128, 4).unwrap();
        let p = grid.len();
        let mut scores = Array2::zeros((p, p));
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    scores[[i, j]] = rng.gen_range(0.0..1.0);
                }
            }
        }
        let aff = AffinityMatrix::from_ordered_scores(scores);
        let i = 1;
        let map = response_map(&aff, &grid, i, 300, 200).unwrap();
        let row = aff.row(i);
        for &(px, py) in &[(0u32, 0u32), (150, 100), (299, 199), (64, 64), (287, 13)] {
            // brute force: average over covering patches
            let mut sum = 0.0f64;
            let mut n = 0;
            for (k, &(x, y)) in grid.coords.iter().enumerate() {
                if px >= x && px < x + 128 && py >= y && py < y + 128 {
                    sum += row[k] as f64;
                    n += 1;
                }
            }
            assert!(n > 0, "test pixels should be covered for this grid");
            let expected = (sum / n as f64) as f32;
            assert!(
                (map.values[[py as usize, px as usize]] - expected).abs() < 1e-6,
                "mismatch at ({px},{py})"
            );
        }
    }

    #[test]
    fn splice_mask_marks_minority_region() {
        let mut values = Array2::from_elem((10, 10), 0.9f32);
        for y in 0..3 {
            for x in 0..10 {
                values[[y, x]] = 0.1;
            }
        }
        let map = ConsistencyMap {
            values,
            provenance: Provenance::Merged,
        };
        let (mask, flagged) = splice_mask(&map, 0.5);
        assert!(!flagged);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 30);
        assert!(mask[[0, 0]] && !mask[[5, 5]]);
    }

    #[test]
    fn constant_map_has_no_splice_candidate() {
        let map = ConsistencyMap {
            values: Array2::from_elem((4, 4), 0.8f32),
            provenance: Provenance::Merged,
        };
        let (mask, flagged) = splice_mask(&map, 0.5);
        assert!(flagged);
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn detection_score_orientation() {
        let ones = ConsistencyMap {
            values: Array2::from_elem((3, 3), 1.0f32),
            provenance: Provenance::Merged,
        };
        assert_eq!(detection_score(&ones), 0.0);
        let zeros = ConsistencyMap {
            values: Array2::zeros((3, 3)),
            provenance: Provenance::Merged,
        };
        assert_eq!(detection_score(&zeros), 1.0);
    }
}
