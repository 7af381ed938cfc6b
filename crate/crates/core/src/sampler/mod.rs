//! Rebalanced patch-pair batches with consistency labels.
//!
//! Batch construction follows two re-balancing rules: the balanced attribute
//! is drawn uniformly over eligible attributes and its value uniformly over
//! that attribute's eligible values (unary), and exactly half of each batch
//! shares the balanced value while the other half does not (pairwise).

mod augment;

pub use augment::{
    consistency_labels, draw_spec_pair, expected_all_consistent, AugmentOp, AugmentationSpec,
    POSTPROC_SLOTS,
};

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use image::RgbImage;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::AugmentationConfig;
use crate::error::Error;
use crate::metadata::{AttributeVocabulary, CorpusIndex, PhotoRecord};
use crate::raster;
use crate::Result;

/// Fixed patch side length.
pub const PATCH_SIZE: u32 = 128;

/// A 128x128 RGB patch with [0, 1] float channels (CHW layout).
#[derive(Clone, Debug)]
pub struct Patch {
    pub pixels: Array3<f32>,
    pub source_photo_id: String,
    /// Top-left corner in source-image pixels.
    pub origin: (u32, u32),
}

/// Per-pair label vector: one slot per vocabulary attribute (in vocabulary
/// order) followed by the three post-processing slots. `mask[k] == false`
/// means slot k carries no supervision for this pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PairLabel {
    pub y: Vec<bool>,
    pub mask: Vec<bool>,
}

impl PairLabel {
    pub fn dim(&self) -> usize {
        self.y.len()
    }
}

/// A batch of labeled patch pairs balanced on one (attribute, value).
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub pairs: Vec<(Patch, Patch)>,
    pub labels: Vec<PairLabel>,
    pub balanced_attribute: String,
    pub balanced_value: String,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Decoded-image cache keyed by photo id; safe for concurrent readers.
#[derive(Default)]
pub struct ImageCache {
    map: Mutex<HashMap<String, Arc<RgbImage>>>,
}

impl ImageCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, record: &PhotoRecord) -> Result<Arc<RgbImage>> {
        if let Some(img) = self.map.lock().unwrap().get(&record.photo_id) {
            return Ok(img.clone());
        }
        let img = record.pixels.load()?;
        self.map
            .lock()
            .unwrap()
            .insert(record.photo_id.clone(), img.clone());
        Ok(img)
    }
}

/// Deterministic per-worker generator derived from
/// (global_seed, worker_id, batch_counter).
pub fn derive_rng(global_seed: u64, worker_id: u64, batch_counter: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&global_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&worker_id.to_le_bytes());
    seed[16..24].copy_from_slice(&batch_counter.to_le_bytes());
    seed[24..32].copy_from_slice(&0x70617463685f726eu64.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// Uniformly samples a patch origin over all valid top-left positions.
pub fn sample_patch_from(img: &RgbImage, photo_id: &str, rng: &mut impl Rng) -> Result<Patch> {
    let (w, h) = (img.width(), img.height());
    if w < PATCH_SIZE || h < PATCH_SIZE {
        return Err(Error::TooSmall {
            width: w,
            height: h,
            min: PATCH_SIZE,
        });
    }
    let x = rng.gen_range(0..=w - PATCH_SIZE);
    let y = rng.gen_range(0..=h - PATCH_SIZE);
    Ok(Patch {
        pixels: raster::crop_chw(img, x, y, PATCH_SIZE),
        source_photo_id: photo_id.to_string(),
        origin: (x, y),
    })
}

/// [`sample_patch_from`] that loads the record's pixels itself.
pub fn sample_patch(record: &PhotoRecord, rng: &mut impl Rng) -> Result<Patch> {
    let img = record.pixels.load()?;
    sample_patch_from(&img, &record.photo_id, rng)
}

/// Metadata label slots for a pair of records: slot k is valid iff both
/// records carry an admissible value for attribute k, and positive iff those
/// values are byte-equal. Post-processing slots are initialized invalid-free
/// (mask true) with labels filled in by augmentation.
pub fn label_pair(
    rec_a: &PhotoRecord,
    rec_b: &PhotoRecord,
    vocab: &AttributeVocabulary,
) -> PairLabel {
    let dim = vocab.label_dim();
    let mut y = vec![false; dim];
    let mut mask = vec![false; dim];
    for (k, entry) in vocab.attributes.iter().enumerate() {
        let a = rec_a
            .attribute(&entry.name)
            .filter(|v| vocab.value_index(k, v).is_some());
        let b = rec_b
            .attribute(&entry.name)
            .filter(|v| vocab.value_index(k, v).is_some());
        if let (Some(a), Some(b)) = (a, b) {
            mask[k] = true;
            y[k] = a == b;
        }
    }
    for k in 0..POSTPROC_SLOTS {
        mask[dim - POSTPROC_SLOTS + k] = true;
    }
    PairLabel { y, mask }
}

/// Applies the post-processing draw to both patches and returns the three
/// per-kind consistency labels.
pub fn apply_postprocessing(
    pair: (Patch, Patch),
    rng: &mut impl Rng,
    cfg: &AugmentationConfig,
) -> Result<((Patch, Patch), [bool; POSTPROC_SLOTS])> {
    let (spec_a, spec_b, labels) = draw_spec_pair(rng, cfg);
    let (mut a, mut b) = pair;
    a.pixels = spec_a.apply(&a.pixels)?;
    b.pixels = spec_b.apply(&b.pixels)?;
    Ok(((a, b), labels))
}

/// One planned pair: corpus photo indices plus whether they share the
/// balanced value.
#[derive(Clone, Copy, Debug)]
pub struct PairPlan {
    pub photo_a: usize,
    pub photo_b: usize,
    pub share: bool,
}

/// A batch plan: the balanced (attribute, value) and the photo pairs, before
/// any pixels are touched.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub attr_idx: usize,
    pub value_idx: usize,
    pub pairs: Vec<PairPlan>,
}

/// Plans one rebalanced batch.
///
/// A value is eligible when at least two photos share it and at least one
/// other photo carries a different admissible value for the attribute; an
/// attribute is eligible when it has an eligible value. Positives pair two
/// distinct sharing photos, negatives pair a sharing photo with a
/// non-sharing carrier, and the batch holds exactly ceil(B/2) positives and
/// floor(B/2) negatives.
pub fn plan_pair_batch(
    index: &CorpusIndex,
    vocab: &AttributeVocabulary,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<BatchPlan> {
    if batch_size < 2 {
        return Err(Error::Config("batch_size must be at least 2".into()));
    }

    let mut eligible: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut deficient: Vec<String> = Vec::new();
    for (attr_idx, entry) in vocab.attributes.iter().enumerate() {
        let carriers = index.carriers(attr_idx);
        let values: Vec<usize> = (0..entry.values.len())
            .filter(|&value_idx| {
                let sharers = index.photos_with_value(attr_idx, value_idx).len();
                sharers >= 2 && carriers.len() > sharers
            })
            .collect();
        if values.is_empty() {
            deficient.push(entry.name.clone());
        } else {
            eligible.push((attr_idx, values));
        }
    }
    if eligible.is_empty() {
        return Err(Error::UnsatisfiableBatch {
            attributes: deficient,
        });
    }

    let (attr_idx, values) = &eligible[rng.gen_range(0..eligible.len())];
    let attr_idx = *attr_idx;
    let value_idx = values[rng.gen_range(0..values.len())];

    let sharers = index.photos_with_value(attr_idx, value_idx);
    let others: Vec<usize> = index
        .carriers(attr_idx)
        .iter()
        .filter(|(_, v)| *v != value_idx)
        .map(|(p, _)| *p)
        .collect();

    let positives = batch_size.div_ceil(2);
    let negatives = batch_size / 2;
    let mut pairs = Vec::with_capacity(batch_size);
    for _ in 0..positives {
        let i = rng.gen_range(0..sharers.len());
        let mut j = rng.gen_range(0..sharers.len() - 1);
        if j >= i {
            j += 1;
        }
        let (mut a, mut b) = (sharers[i], sharers[j]);
        if rng.gen_bool(0.5) {
            std::mem::swap(&mut a, &mut b);
        }
        pairs.push(PairPlan {
            photo_a: a,
            photo_b: b,
            share: true,
        });
    }
    for _ in 0..negatives {
        let mut a = sharers[rng.gen_range(0..sharers.len())];
        let mut b = others[rng.gen_range(0..others.len())];
        if rng.gen_bool(0.5) {
            std::mem::swap(&mut a, &mut b);
        }
        pairs.push(PairPlan {
            photo_a: a,
            photo_b: b,
            share: false,
        });
    }

    Ok(BatchPlan {
        attr_idx,
        value_idx,
        pairs,
    })
}

/// Crops, augments and labels a planned batch.
pub fn materialize_batch(
    plan: &BatchPlan,
    index: &CorpusIndex,
    vocab: &AttributeVocabulary,
    aug: &AugmentationConfig,
    cache: &ImageCache,
    rng: &mut impl Rng,
) -> Result<PairBatch> {
    let mut pairs = Vec::with_capacity(plan.pairs.len());
    let mut labels = Vec::with_capacity(plan.pairs.len());
    for pp in &plan.pairs {
        let rec_a = index.record(pp.photo_a);
        let rec_b = index.record(pp.photo_b);
        let img_a = cache.get(rec_a)?;
        let img_b = cache.get(rec_b)?;
        let patch_a = sample_patch_from(&img_a, &rec_a.photo_id, rng)?;
        let patch_b = sample_patch_from(&img_b, &rec_b.photo_id, rng)?;
        let ((patch_a, patch_b), post) = apply_postprocessing((patch_a, patch_b), rng, aug)?;

        let mut label = label_pair(rec_a, rec_b, vocab);
        let dim = label.dim();
        for k in 0..POSTPROC_SLOTS {
            label.y[dim - POSTPROC_SLOTS + k] = post[k];
        }
        pairs.push((patch_a, patch_b));
        labels.push(label);
    }
    let entry = &vocab.attributes[plan.attr_idx];
    Ok(PairBatch {
        pairs,
        labels,
        balanced_attribute: entry.name.clone(),
        balanced_value: entry.values[plan.value_idx].value.clone(),
    })
}

/// Plans and materializes one batch; the spec-level batch constructor.
pub fn make_pair_batch(
    index: &CorpusIndex,
    vocab: &AttributeVocabulary,
    batch_size: usize,
    aug: &AugmentationConfig,
    cache: &ImageCache,
    rng: &mut impl Rng,
) -> Result<PairBatch> {
    let plan = plan_pair_batch(index, vocab, batch_size, rng)?;
    materialize_batch(&plan, index, vocab, aug, cache, rng)
}

/// Drops records whose images are smaller than the patch size, returning
/// the ids that were skipped.
pub fn filter_too_small(
    records: Vec<PhotoRecord>,
    cache: &ImageCache,
) -> Result<(Vec<PhotoRecord>, Vec<String>)> {
    let mut kept = Vec::with_capacity(records.len());
    let mut skipped = Vec::new();
    for rec in records {
        let img = cache.get(&rec)?;
        if img.width() < PATCH_SIZE || img.height() < PATCH_SIZE {
            skipped.push(rec.photo_id.clone());
        } else {
            kept.push(rec);
        }
    }
    Ok((kept, skipped))
}

/// Debug dump: PNG patch pairs plus a JSON label sidecar.
pub fn dump_batch(batch: &PairBatch, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    #[derive(Serialize)]
    struct DumpRow<'a> {
        index: usize,
        photo_a: &'a str,
        photo_b: &'a str,
        y: &'a [bool],
        mask: &'a [bool],
    }
    #[derive(Serialize)]
    struct Dump<'a> {
        balanced_attribute: &'a str,
        balanced_value: &'a str,
        pairs: Vec<DumpRow<'a>>,
    }

    let mut rows = Vec::new();
    for (i, ((a, b), label)) in batch.pairs.iter().zip(&batch.labels).enumerate() {
        raster::chw_to_rgb8(&a.pixels)
            .save(dir.join(format!("pair_{i:04}_a.png")))
            .map_err(Error::Image)?;
        raster::chw_to_rgb8(&b.pixels)
            .save(dir.join(format!("pair_{i:04}_b.png")))
            .map_err(Error::Image)?;
        rows.push(DumpRow {
            index: i,
            photo_a: &a.source_photo_id,
            photo_b: &b.source_photo_id,
            y: &label.y,
            mask: &label.mask,
        });
    }
    let dump = Dump {
        balanced_attribute: &batch.balanced_attribute,
        balanced_value: &batch.balanced_value,
        pairs: rows,
    };
    let path = dir.join("labels.json");
    std::fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&path, e))
}
