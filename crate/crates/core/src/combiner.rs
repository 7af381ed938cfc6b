//! Calibration of the per-attribute consistency vector into one overall
//! patch-pair consistency score.
//!
//! A two-layer perceptron (default 512 hidden units) is trained on a
//! self-supervised proxy: predict whether two patches come from the same
//! image, using the frozen consistency network's outputs as input. The
//! backbone never receives gradients from this stage.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::config::ExperimentConfig;
use crate::error::Error;
use crate::metadata::CorpusIndex;
use crate::net::{
    layers::{relu, relu_backward, Linear, LinearGrads},
    loss, stack_patches, Adam, ConsistencyNetwork, ConsistencyVector, Objective,
};
use crate::sampler::{derive_rng, sample_patch_from, ImageCache, Patch};
use crate::Result;

/// Worker-id namespace for combiner batch generators, keeping their random
/// streams disjoint from backbone training.
const COMBINER_WORKER: u64 = 0xC0;

/// Two-layer perceptron mapping a consistency vector to the probability
/// that both patches come from the same image.
pub struct CombinerModel {
    hidden: Linear<f32>,
    output: Linear<f32>,
}

pub(crate) struct CombinerGrads {
    hidden: LinearGrads<f32>,
    output: LinearGrads<f32>,
}

impl CombinerModel {
    /// Zero output layer so an untrained combiner scores exactly 0.5.
    pub fn new(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        CombinerModel {
            hidden: Linear::he_init(hidden_dim, input_dim, rng),
            output: Linear::zeros(1, hidden_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.weight.dim().1
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.weight.dim().0
    }

    /// Overall consistency c for one consistency vector.
    pub fn overall_consistency(&self, x: &ConsistencyVector) -> f32 {
        let row = Array2::from_shape_vec((1, x.probs.len()), x.probs.clone()).unwrap();
        self.score_rows(&row)[0]
    }

    /// Batched scoring: one probability per row.
    pub fn score_rows(&self, x: &Array2<f32>) -> Array1<f32> {
        let a = relu(&self.hidden.forward(x));
        let logits = self.output.forward(&a);
        logits.index_axis(Axis(1), 0).mapv(loss::sigmoid)
    }

    /// One BCE training step on (input rows, binary targets).
    pub(crate) fn fit_batch(
        &mut self,
        x: &Array2<f32>,
        y: &Array1<f32>,
        adam: &mut Adam,
    ) -> Result<f32> {
        let a = relu(&self.hidden.forward(x));
        let logits = self.output.forward(&a);
        let y2 = y.view().insert_axis(Axis(1)).to_owned();
        let mask = Array2::ones(logits.raw_dim());
        let (loss_val, dlogits) = loss::masked_bce(&logits, &y2, &mask)?;
        let (ga, g_output) = self.output.backward(&a, &dlogits);
        let gz = relu_backward(&a, &ga);
        let (_, g_hidden) = self.hidden.backward(x, &gz);
        let grads = CombinerGrads {
            hidden: g_hidden,
            output: g_output,
        };
        adam.begin_step();
        adam.update(0, self.hidden.weight.view_mut().into_dyn(), grads.hidden.weight.view().into_dyn());
        adam.update(1, self.hidden.bias.view_mut().into_dyn(), grads.hidden.bias.view().into_dyn());
        adam.update(2, self.output.weight.view_mut().into_dyn(), grads.output.weight.view().into_dyn());
        adam.update(3, self.output.bias.view_mut().into_dyn(), grads.output.bias.view().into_dyn());
        Ok(loss_val)
    }

    pub(crate) fn tensors(&self) -> Vec<(String, ndarray::ArrayViewD<'_, f32>)> {
        vec![
            ("combiner.hidden.weight".into(), self.hidden.weight.view().into_dyn()),
            ("combiner.hidden.bias".into(), self.hidden.bias.view().into_dyn()),
            ("combiner.out.weight".into(), self.output.weight.view().into_dyn()),
            ("combiner.out.bias".into(), self.output.bias.view().into_dyn()),
        ]
    }

    pub(crate) fn from_tensors(
        tensors: &[(String, ndarray::ArrayD<f32>)],
    ) -> Result<CombinerModel> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing combiner tensor {name}")))
        };
        let hw = find("combiner.hidden.weight")?;
        let hb = find("combiner.hidden.bias")?;
        let ow = find("combiner.out.weight")?;
        let ob = find("combiner.out.bias")?;
        Ok(CombinerModel {
            hidden: Linear {
                weight: hw.into_dimensionality().map_err(|e| Error::Checkpoint(e.to_string()))?,
                bias: hb.into_dimensionality().map_err(|e| Error::Checkpoint(e.to_string()))?,
            },
            output: Linear {
                weight: ow.into_dimensionality().map_err(|e| Error::Checkpoint(e.to_string()))?,
                bias: ob.into_dimensionality().map_err(|e| Error::Checkpoint(e.to_string()))?,
            },
        })
    }
}

/// One combiner training batch: half same-image pairs (two non-identical
/// crops of one photo), half cross-image pairs.
pub(crate) fn combiner_batch(
    index: &CorpusIndex,
    cache: &ImageCache,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<(Patch, Patch)>, Array1<f32>)> {
    if index.len() < 2 {
        return Err(Error::Dataset(
            "combiner training requires at least 2 photos".into(),
        ));
    }
    let half = batch_size / 2;
    let mut pairs = Vec::with_capacity(2 * half);
    let mut labels = Vec::with_capacity(2 * half);
    for _ in 0..half {
        // same-image positive with distinct origins
        let (a, b) = loop {
            let rec = index.record(rng.gen_range(0..index.len()));
            let img = cache.get(rec)?;
            if img.width() == crate::sampler::PATCH_SIZE && img.height() == crate::sampler::PATCH_SIZE
            {
                continue; // single valid origin, cannot produce distinct crops
            }
            let a = sample_patch_from(&img, &rec.photo_id, rng)?;
            let b = sample_patch_from(&img, &rec.photo_id, rng)?;
            if a.origin != b.origin {
                break (a, b);
            }
        };
        pairs.push((a, b));
        labels.push(1.0);
    }
    for _ in 0..half {
        let i = rng.gen_range(0..index.len());
        let mut j = rng.gen_range(0..index.len() - 1);
        if j >= i {
            j += 1;
        }
        let rec_a = index.record(i);
        let rec_b = index.record(j);
        let img_a = cache.get(rec_a)?;
        let img_b = cache.get(rec_b)?;
        pairs.push((
            sample_patch_from(&img_a, &rec_a.photo_id, rng)?,
            sample_patch_from(&img_b, &rec_b.photo_id, rng)?,
        ));
        labels.push(0.0);
    }
    Ok((pairs, Array1::from_vec(labels)))
}

/// Trains the combiner on the same-image proxy task with the consistency
/// network frozen.
pub fn train_combiner(
    net: &ConsistencyNetwork<f32>,
    index: &CorpusIndex,
    cfg: &ExperimentConfig,
    cache: &ImageCache,
) -> Result<CombinerModel> {
    if net.config.objective != Objective::Exif {
        return Err(Error::Input(
            "the combiner calibrates the exif objective's outputs".into(),
        ));
    }
    let mut init_rng = derive_rng(cfg.seed, COMBINER_WORKER, u64::MAX);
    let mut model = CombinerModel::new(
        net.config.output_dim,
        cfg.model.combiner_hidden,
        &mut init_rng,
    );
    let mut adam = Adam::new(cfg.optimizer.combiner_learning_rate);
    let batch_size = cfg.optimizer.combiner_batch_size.max(2);

    for iter in 0..cfg.optimizer.combiner_iterations {
        let mut rng = derive_rng(cfg.seed, COMBINER_WORKER, iter);
        let (pairs, labels) = combiner_batch(index, cache, batch_size, &mut rng)?;
        let xa = stack_patches(&pairs.iter().map(|(a, _)| a.clone()).collect::<Vec<_>>());
        let xb = stack_patches(&pairs.iter().map(|(_, b)| b.clone()).collect::<Vec<_>>());
        let inputs = net.pair_probs(&xa, &xb)?;
        model.fit_batch(&inputs, &labels, &mut adam)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn untrained_combiner_scores_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = CombinerModel::new(83, 512, &mut rng);
        let x = ConsistencyVector {
            probs: vec![0.3; 83],
        };
        assert_eq!(model.overall_consistency(&x), 0.5);
        assert_eq!(model.hidden_dim(), 512);
    }

    #[test]
    fn output_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = CombinerModel::new(8, 16, &mut rng);
        // randomize output layer
        model.output = Linear::he_init(1, 16, &mut rng);
        for trial in 0..50 {
            let x = ConsistencyVector {
                probs: (0..8).map(|i| ((trial * 7 + i) % 11) as f32 / 10.0).collect(),
            };
            let c = model.overall_consistency(&x);
            assert!(c.is_finite() && (0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn separable_toy_reaches_high_accuracy() {
        // all-ones input means same image, all-zeros means different
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = CombinerModel::new(16, 32, &mut rng);
        let mut adam = Adam::new(1e-2);
        for _ in 0..300 {
            let mut x = Array2::zeros((32, 16));
            let mut y = Array1::zeros(32);
            for i in 0..32 {
                let positive = rng.gen_bool(0.5);
                if positive {
                    x.row_mut(i).fill(1.0);
                    y[i] = 1.0;
                }
            }
            model.fit_batch(&x, &y, &mut adam).unwrap();
        }
        let ones = ConsistencyVector { probs: vec![1.0; 16] };
        let zeros = ConsistencyVector { probs: vec![0.0; 16] };
        assert!(model.overall_consistency(&ones) > 0.99);
        assert!(model.overall_consistency(&zeros) < 0.01);

        // monotone response along the toy hull
        let mut prev = -1.0;
        for step in 0..=10 {
            let t = step as f32 / 10.0;
            let c = model.overall_consistency(&ConsistencyVector {
                probs: vec![t; 16],
            });
            assert!(c >= prev - 1e-6, "non-monotone at t={t}: {c} < {prev}");
            prev = c;
        }
    }

    #[test]
    fn masked_filled_substitutes_uninformative_value() {
        let v = ConsistencyVector::masked_filled(&[0.9, 0.1, 0.7], &[true, false, true]);
        assert_eq!(v.probs, vec![0.9, 0.5, 0.7]);
    }
}
