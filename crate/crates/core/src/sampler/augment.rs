//! Post-processing augmentation: re-JPEGing, Gaussian blur and resizing.
//!
//! Half of the time both patches of a pair receive the same operation set;
//! otherwise two sets are drawn independently. Each operation kind appears
//! at most once per set, parameters come from evenly discretized sets, and
//! application order is an independent random permutation per patch. The
//! three consistency labels say, per kind, whether both patches received the
//! identical parameterization (both-absent counts as identical).

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::AugmentationConfig;
use crate::raster;
use crate::Result;

pub const POSTPROC_SLOTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Rejpeg { quality: u8 },
    Blur { sigma: f32 },
    Resize { factor: f32 },
}

impl AugmentOp {
    fn kind(&self) -> usize {
        match self {
            AugmentOp::Rejpeg { .. } => 0,
            AugmentOp::Blur { .. } => 1,
            AugmentOp::Resize { .. } => 2,
        }
    }
}

/// An ordered list of operations; order is the application order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub ops: Vec<AugmentOp>,
}

impl AugmentationSpec {
    fn param_of(&self, kind: usize) -> Option<AugmentOp> {
        self.ops.iter().copied().find(|op| op.kind() == kind)
    }

    pub fn apply(&self, pixels: &Array3<f32>) -> Result<Array3<f32>> {
        let mut out = pixels.clone();
        for op in &self.ops {
            out = match *op {
                AugmentOp::Rejpeg { quality } => raster::jpeg_roundtrip_chw(&out, quality)?,
                AugmentOp::Blur { sigma } => raster::gaussian_blur_chw(&out, sigma),
                AugmentOp::Resize { factor } => raster::resize_roundtrip_chw(&out, factor),
            };
        }
        raster::clamp_unit(&mut out);
        Ok(out)
    }
}

/// Draws an unordered operation set: each kind included independently with
/// `op_probability`, parameter uniform over its discretized set. Returned in
/// canonical kind order; permute before applying.
fn draw_opset(rng: &mut impl Rng, cfg: &AugmentationConfig) -> Vec<AugmentOp> {
    let mut ops = Vec::new();
    if rng.gen_bool(cfg.op_probability) {
        let q = cfg.rejpeg_qualities[rng.gen_range(0..cfg.rejpeg_qualities.len())];
        ops.push(AugmentOp::Rejpeg { quality: q });
    }
    if rng.gen_bool(cfg.op_probability) {
        let s = cfg.blur_sigmas[rng.gen_range(0..cfg.blur_sigmas.len())];
        ops.push(AugmentOp::Blur { sigma: s });
    }
    if rng.gen_bool(cfg.op_probability) {
        let f = cfg.resize_factors[rng.gen_range(0..cfg.resize_factors.len())];
        ops.push(AugmentOp::Resize { factor: f });
    }
    ops
}

fn permuted(mut ops: Vec<AugmentOp>, rng: &mut impl Rng) -> AugmentationSpec {
    ops.shuffle(rng);
    AugmentationSpec { ops }
}

/// One independent spec, for objectives that augment patches individually.
pub(crate) fn draw_single_spec(rng: &mut impl Rng, cfg: &AugmentationConfig) -> AugmentationSpec {
    let ops = draw_opset(rng, cfg);
    permuted(ops, rng)
}

/// Per-kind consistency labels for two specs.
pub fn consistency_labels(a: &AugmentationSpec, b: &AugmentationSpec) -> [bool; POSTPROC_SLOTS] {
    let mut labels = [false; POSTPROC_SLOTS];
    for (kind, label) in labels.iter_mut().enumerate() {
        *label = match (a.param_of(kind), b.param_of(kind)) {
            (None, None) => true,
            (Some(x), Some(y)) => x == y,
            _ => false,
        };
    }
    labels
}

/// Draws the spec pair and its labels without touching pixels.
pub fn draw_spec_pair(
    rng: &mut impl Rng,
    cfg: &AugmentationConfig,
) -> (AugmentationSpec, AugmentationSpec, [bool; POSTPROC_SLOTS]) {
    let (spec_a, spec_b) = if rng.gen_bool(cfg.same_spec_probability) {
        let shared = draw_opset(rng, cfg);
        (permuted(shared.clone(), rng), permuted(shared, rng))
    } else {
        let a = draw_opset(rng, cfg);
        let b = draw_opset(rng, cfg);
        (permuted(a, rng), permuted(b, rng))
    };
    let labels = consistency_labels(&spec_a, &spec_b);
    (spec_a, spec_b, labels)
}

/// Exact probability that all three labels are consistent, derived from the
/// configured parameter sets. Used as a Monte-Carlo oracle.
pub fn expected_all_consistent(cfg: &AugmentationConfig) -> f64 {
    let p = cfg.op_probability;
    let per_kind = |n: usize| {
        // both absent, or both present with the same parameter
        (1.0 - p) * (1.0 - p) + p * p / n as f64
    };
    let independent = per_kind(cfg.rejpeg_qualities.len())
        * per_kind(cfg.blur_sigmas.len())
        * per_kind(cfg.resize_factors.len());
    cfg.same_spec_probability + (1.0 - cfg.same_spec_probability) * independent
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_specs_are_fully_consistent() {
        let spec = AugmentationSpec {
            ops: vec![
                AugmentOp::Rejpeg { quality: 70 },
                AugmentOp::Blur { sigma: 1.0 },
            ],
        };
        assert_eq!(consistency_labels(&spec, &spec), [true, true, true]);
    }

    #[test]
    fn parameter_mismatch_flips_only_that_kind() {
        let a = AugmentationSpec {
            ops: vec![AugmentOp::Rejpeg { quality: 70 }],
        };
        let b = AugmentationSpec {
            ops: vec![AugmentOp::Rejpeg { quality: 90 }],
        };
        assert_eq!(consistency_labels(&a, &b), [false, true, true]);
    }

    #[test]
    fn order_does_not_affect_labels() {
        let a = AugmentationSpec {
            ops: vec![
                AugmentOp::Blur { sigma: 0.5 },
                AugmentOp::Resize { factor: 1.25 },
            ],
        };
        let b = AugmentationSpec {
            ops: vec![
                AugmentOp::Resize { factor: 1.25 },
                AugmentOp::Blur { sigma: 0.5 },
            ],
        };
        assert_eq!(consistency_labels(&a, &b), [true, true, true]);
    }

    #[test]
    fn same_branch_shares_parameters() {
        let cfg = AugmentationConfig {
            same_spec_probability: 1.0,
            ..AugmentationConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (_, _, labels) = draw_spec_pair(&mut rng, &cfg);
            assert_eq!(labels, [true, true, true]);
        }
    }

    #[test]
    fn all_consistent_fraction_matches_expectation() {
        let cfg = AugmentationConfig::default();
        let expected = expected_all_consistent(&cfg);
        assert!(expected >= 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut hits = 0u64;
        for _ in 0..n {
            let (_, _, labels) = draw_spec_pair(&mut rng, &cfg);
            if labels == [true, true, true] {
                hits += 1;
            }
        }
        let fraction = hits as f64 / n as f64;
        assert!(fraction >= 0.5, "fraction {fraction}");
        // three-sigma band around the exact expectation
        let sigma = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!(
            (fraction - expected).abs() < 3.0 * sigma + 1e-12,
            "fraction {fraction} vs expected {expected}"
        );
    }
}
