//! Training loops for the consistency objectives and the held-out
//! per-attribute evaluation.

use std::path::Path;

use ndarray::{Array2, Array4};
use rand::Rng;

use crate::config::ExperimentConfig;
use crate::error::Error;
use crate::metadata::{AttributeVocabulary, CorpusIndex};
use crate::sampler::{
    self, derive_rng, make_pair_batch, sample_patch_from, ImageCache, PairBatch, Patch, PATCH_SIZE,
};
use crate::Result;

use super::{stack_patches, Adam, Checkpoint, ConsistencyNetwork, Objective};

/// Worker-id namespaces so the init, training and evaluation random streams
/// never overlap.
const INIT_WORKER: u64 = 0xED;
const TRAIN_WORKER: u64 = 0x00;
const EVAL_WORKER: u64 = 0xEA;

#[derive(Clone, Copy, Debug)]
pub struct TrainProgress {
    pub step: u64,
    pub loss: f32,
}

/// Converts a pair batch into (patches_a, patches_b, labels, masks).
pub fn batch_to_arrays(batch: &PairBatch) -> (Array4<f32>, Array4<f32>, Array2<f32>, Array2<f32>) {
    let n = batch.len();
    let dim = batch.labels.first().map(|l| l.dim()).unwrap_or(0);
    let a: Vec<Patch> = batch.pairs.iter().map(|(a, _)| a.clone()).collect();
    let b: Vec<Patch> = batch.pairs.iter().map(|(_, b)| b.clone()).collect();
    let mut y = Array2::zeros((n, dim));
    let mut mask = Array2::zeros((n, dim));
    for (i, label) in batch.labels.iter().enumerate() {
        for k in 0..dim {
            y[[i, k]] = label.y[k] as u8 as f32;
            mask[[i, k]] = label.mask[k] as u8 as f32;
        }
    }
    (stack_patches(&a), stack_patches(&b), y, mask)
}

/// One optimizer update on an exif-labeled pair batch; returns the loss.
pub fn train_step(
    net: &mut ConsistencyNetwork<f32>,
    batch: &PairBatch,
    adam: &mut Adam,
) -> Result<f32> {
    let (xa, xb, y, mask) = batch_to_arrays(batch);
    let (loss, grads) = net.loss_and_grads(&xa, &xb, &y, &mask)?;
    adam.step_net(net, &grads);
    Ok(loss)
}

fn scalar_pair_step(
    net: &mut ConsistencyNetwork<f32>,
    pairs: &[(Patch, Patch)],
    labels: &[f32],
    adam: &mut Adam,
) -> Result<f32> {
    let a: Vec<Patch> = pairs.iter().map(|(a, _)| a.clone()).collect();
    let b: Vec<Patch> = pairs.iter().map(|(_, b)| b.clone()).collect();
    let y = Array2::from_shape_vec((labels.len(), 1), labels.to_vec()).unwrap();
    let mask = Array2::ones((labels.len(), 1));
    let (loss, grads) = net.loss_and_grads(&stack_patches(&a), &stack_patches(&b), &y, &mask)?;
    adam.step_net(net, &grads);
    Ok(loss)
}

/// Same-image / different-image pairs for the `image` objective, with
/// independent per-patch augmentation.
fn image_batch(
    index: &CorpusIndex,
    cache: &ImageCache,
    batch_size: usize,
    cfg: &ExperimentConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<(Patch, Patch)>, Vec<f32>)> {
    if index.len() < 2 {
        return Err(Error::Dataset(
            "image objective requires at least 2 photos".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let positive = i % 2 == 0;
        let (pa, pb) = if positive {
            let rec = index.record(rng.gen_range(0..index.len()));
            let img = cache.get(rec)?;
            (
                sample_patch_from(&img, &rec.photo_id, rng)?,
                sample_patch_from(&img, &rec.photo_id, rng)?,
            )
        } else {
            let i = rng.gen_range(0..index.len());
            let mut j = rng.gen_range(0..index.len() - 1);
            if j >= i {
                j += 1;
            }
            let ra = index.record(i);
            let rb = index.record(j);
            let ia = cache.get(ra)?;
            let ib = cache.get(rb)?;
            (
                sample_patch_from(&ia, &ra.photo_id, rng)?,
                sample_patch_from(&ib, &rb.photo_id, rng)?,
            )
        };
        let mut pa = pa;
        let mut pb = pb;
        pa.pixels = sampler::augment_single(rng, &cfg.augmentation).apply(&pa.pixels)?;
        pb.pixels = sampler::augment_single(rng, &cfg.augmentation).apply(&pb.pixels)?;
        pairs.push((pa, pb));
        labels.push(positive as u8 as f32);
    }
    Ok((pairs, labels))
}

/// Ordered same-image pairs for the `x`/`y` objectives: label 1 iff the
/// pair is presented in its true spatial order along the axis.
fn xy_batch(
    horizontal: bool,
    index: &CorpusIndex,
    cache: &ImageCache,
    batch_size: usize,
    cfg: &ExperimentConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<(Patch, Patch)>, Vec<f32>)> {
    let mut pairs = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    let mut attempts = 0usize;
    while pairs.len() < batch_size {
        attempts += 1;
        if attempts > batch_size * 200 {
            return Err(Error::Dataset(
                "could not sample spatially distinct patch pairs; images too small".into(),
            ));
        }
        let rec = index.record(rng.gen_range(0..index.len()));
        let img = cache.get(rec)?;
        let p1 = sample_patch_from(&img, &rec.photo_id, rng)?;
        let p2 = sample_patch_from(&img, &rec.photo_id, rng)?;
        let (c1, c2) = if horizontal {
            (p1.origin.0, p2.origin.0)
        } else {
            (p1.origin.1, p2.origin.1)
        };
        if c1 == c2 {
            continue;
        }
        let (mut a, mut b) = if rng.gen_bool(0.5) { (p1, p2) } else { (p2, p1) };
        let (ca, cb) = if horizontal {
            (a.origin.0, b.origin.0)
        } else {
            (a.origin.1, b.origin.1)
        };
        a.pixels = sampler::augment_single(rng, &cfg.augmentation).apply(&a.pixels)?;
        b.pixels = sampler::augment_single(rng, &cfg.augmentation).apply(&b.pixels)?;
        labels.push((ca < cb) as u8 as f32);
        pairs.push((a, b));
    }
    Ok((pairs, labels))
}

/// Single patches labeled with their camera-model value index, value drawn
/// uniformly (unary re-balancing).
fn camera_batch(
    index: &CorpusIndex,
    vocab: &AttributeVocabulary,
    cache: &ImageCache,
    batch_size: usize,
    cfg: &ExperimentConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<Patch>, Vec<usize>)> {
    let attr = vocab
        .attr_index("Image Model")
        .ok_or_else(|| Error::Config("camera objective requires \"Image Model\"".into()))?;
    let populated: Vec<usize> = (0..vocab.attributes[attr].values.len())
        .filter(|&v| !index.photos_with_value(attr, v).is_empty())
        .collect();
    if populated.is_empty() {
        return Err(Error::UnsatisfiableBatch {
            attributes: vec!["Image Model".into()],
        });
    }
    let mut patches = Vec::with_capacity(batch_size);
    let mut targets = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let value_idx = populated[rng.gen_range(0..populated.len())];
        let photos = index.photos_with_value(attr, value_idx);
        let rec = index.record(photos[rng.gen_range(0..photos.len())]);
        let img = cache.get(rec)?;
        let mut p = sample_patch_from(&img, &rec.photo_id, rng)?;
        p.pixels = sampler::augment_single(rng, &cfg.augmentation).apply(&p.pixels)?;
        patches.push(p);
        targets.push(value_idx);
    }
    Ok((patches, targets))
}

/// Runs the configured number of iterations and returns the final
/// checkpoint. Periodic checkpoints are written to `out_dir` when given.
pub fn train(
    cfg: &ExperimentConfig,
    index: &CorpusIndex,
    vocab: &AttributeVocabulary,
    out_dir: Option<&Path>,
    mut on_progress: impl FnMut(TrainProgress),
) -> Result<Checkpoint> {
    let model_cfg = cfg.model.resolved_for(vocab)?;
    let mut init_rng = derive_rng(cfg.seed, INIT_WORKER, 0);
    let mut net = ConsistencyNetwork::<f32>::new(model_cfg.clone(), &mut init_rng)?;
    if let Some(pre_path) = &model_cfg.pretrained_encoder {
        let pre = Checkpoint::load(pre_path)?;
        net.load_encoder_from(&pre.network)?;
    }

    let cache = ImageCache::new();
    let mut adam = Adam::new(cfg.optimizer.learning_rate);
    let mut resolved_cfg = cfg.clone();
    resolved_cfg.model = model_cfg;

    let make_checkpoint = |net: &ConsistencyNetwork<f32>, step: u64| Checkpoint {
        config: resolved_cfg.clone(),
        vocabulary: vocab.clone(),
        step,
        network: clone_network(net),
        combiner: None,
    };

    for step in 0..cfg.optimizer.iterations {
        let mut rng = derive_rng(cfg.seed, TRAIN_WORKER, step);
        let loss = match cfg.model.objective {
            Objective::Exif => {
                let batch = make_pair_batch(
                    index,
                    vocab,
                    cfg.optimizer.batch_size,
                    &cfg.augmentation,
                    &cache,
                    &mut rng,
                )?;
                train_step(&mut net, &batch, &mut adam)?
            }
            Objective::Image => {
                let (pairs, labels) =
                    image_batch(index, &cache, cfg.optimizer.batch_size, cfg, &mut rng)?;
                scalar_pair_step(&mut net, &pairs, &labels, &mut adam)?
            }
            Objective::X | Objective::Y => {
                let (pairs, labels) = xy_batch(
                    cfg.model.objective == Objective::X,
                    index,
                    &cache,
                    cfg.optimizer.batch_size,
                    cfg,
                    &mut rng,
                )?;
                scalar_pair_step(&mut net, &pairs, &labels, &mut adam)?
            }
            Objective::Camera => {
                let (patches, targets) =
                    camera_batch(index, vocab, &cache, cfg.optimizer.batch_size, cfg, &mut rng)?;
                let x = stack_patches(&patches);
                let (loss, grads) = net.camera_loss_and_grads(&x, &targets)?;
                adam.step_net(&mut net, &grads);
                loss
            }
        };
        let step1 = step + 1;
        if step1 % 100 == 0 || step1 == cfg.optimizer.iterations {
            on_progress(TrainProgress { step: step1, loss });
        }
        if let Some(dir) = out_dir {
            if cfg.optimizer.checkpoint_every > 0
                && step1 % cfg.optimizer.checkpoint_every == 0
                && step1 < cfg.optimizer.iterations
            {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                make_checkpoint(&net, step1).save(&dir.join(format!("step_{step1:08}.ckpt")))?;
            }
        }
    }

    let final_ckpt = make_checkpoint(&net, cfg.optimizer.iterations);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        final_ckpt.save(&dir.join("final.ckpt"))?;
    }
    Ok(final_ckpt)
}

/// Deep copy via the tensor walk (the network holds no shared state).
fn clone_network(net: &ConsistencyNetwork<f32>) -> ConsistencyNetwork<f32> {
    let mut rng = derive_rng(0, 0, 0);
    let mut copy = ConsistencyNetwork::<f32>::new(net.config.clone(), &mut rng)
        .expect("config already validated");
    for i in 0..net.tensor_count() {
        copy.assign_tensor(i, net.tensor(i));
    }
    copy
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct AttributeAccuracy {
    pub attribute: String,
    /// None when the held-out corpus admits no valid evaluation pairs.
    pub accuracy: Option<f64>,
    pub pairs: usize,
}

/// Pairwise-rebalanced held-out accuracy per attribute: balanced evaluation
/// pairs are scored by thresholding the slot probability at 0.5, so chance
/// is 0.5.
pub fn evaluate_attribute_accuracy(
    net: &ConsistencyNetwork<f32>,
    index: &CorpusIndex,
    vocab: &AttributeVocabulary,
    pairs_per_attribute: usize,
    seed: u64,
) -> Result<Vec<AttributeAccuracy>> {
    if net.config.objective != Objective::Exif {
        return Err(Error::Input(
            "attribute accuracy requires the exif objective".into(),
        ));
    }
    let cache = ImageCache::new();
    let mut out = Vec::with_capacity(vocab.attr_count());
    for (attr_idx, entry) in vocab.attributes.iter().enumerate() {
        let carriers = index.carriers(attr_idx);
        let eligible: Vec<usize> = (0..entry.values.len())
            .filter(|&v| {
                let sharers = index.photos_with_value(attr_idx, v).len();
                sharers >= 2 && carriers.len() > sharers
            })
            .collect();
        if eligible.is_empty() {
            out.push(AttributeAccuracy {
                attribute: entry.name.clone(),
                accuracy: None,
                pairs: 0,
            });
            continue;
        }

        let mut rng = derive_rng(seed, EVAL_WORKER, attr_idx as u64);
        let mut pairs: Vec<(Patch, Patch)> = Vec::with_capacity(pairs_per_attribute);
        let mut truth = Vec::with_capacity(pairs_per_attribute);
        for i in 0..pairs_per_attribute {
            let value_idx = eligible[rng.gen_range(0..eligible.len())];
            let sharers = index.photos_with_value(attr_idx, value_idx);
            let positive = i % 2 == 0;
            let (pa, pb) = if positive {
                let i = rng.gen_range(0..sharers.len());
                let mut j = rng.gen_range(0..sharers.len() - 1);
                if j >= i {
                    j += 1;
                }
                (sharers[i], sharers[j])
            } else {
                let others: Vec<usize> = carriers
                    .iter()
                    .filter(|(_, v)| *v != value_idx)
                    .map(|(p, _)| *p)
                    .collect();
                (
                    sharers[rng.gen_range(0..sharers.len())],
                    others[rng.gen_range(0..others.len())],
                )
            };
            let rec_a = index.record(pa);
            let rec_b = index.record(pb);
            let img_a = cache.get(rec_a)?;
            let img_b = cache.get(rec_b)?;
            pairs.push((
                sample_patch_from(&img_a, &rec_a.photo_id, &mut rng)?,
                sample_patch_from(&img_b, &rec_b.photo_id, &mut rng)?,
            ));
            truth.push(positive);
        }

        let mut correct = 0usize;
        for chunk_start in (0..pairs.len()).step_by(64) {
            let chunk = &pairs[chunk_start..(chunk_start + 64).min(pairs.len())];
            let a: Vec<Patch> = chunk.iter().map(|(a, _)| a.clone()).collect();
            let b: Vec<Patch> = chunk.iter().map(|(_, b)| b.clone()).collect();
            let probs = net.pair_probs(&stack_patches(&a), &stack_patches(&b))?;
            for (row, &t) in probs.rows().into_iter().zip(&truth[chunk_start..]) {
                let predicted_same = row[attr_idx] >= 0.5;
                if predicted_same == t {
                    correct += 1;
                }
            }
        }
        out.push(AttributeAccuracy {
            attribute: entry.name.clone(),
            accuracy: Some(correct as f64 / pairs.len() as f64),
            pairs: pairs.len(),
        });
    }
    Ok(out)
}

#[allow(dead_code)]
fn _patch_size_guard() {
    // compile-time reminder that training assumes the fixed patch size
    const _: () = assert!(PATCH_SIZE == 128);
}
