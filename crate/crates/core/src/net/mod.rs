//! The Siamese two-patch consistency predictor.
//!
//! Two patches are encoded by shared weights, the embeddings are
//! concatenated and passed through an MLP that emits one probability per
//! label slot. The objective variants reuse the same structure: `image`,
//! `x` and `y` predict a single probability; `camera` classifies a single
//! patch over camera-model values.

mod adam;
mod checkpoint;
pub(crate) mod layers;
pub(crate) mod loss;
mod resnet;
mod train;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use train::{
    batch_to_arrays, evaluate_attribute_accuracy, train, train_step, AttributeAccuracy,
    TrainProgress,
};

use std::path::PathBuf;

use ndarray::{Array1, Array2, Array4, ArrayViewD, Axis, NdFloat};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::metadata::AttributeVocabulary;
use crate::sampler::{Patch, PATCH_SIZE};
use crate::Result;

use layers::{relu, relu_backward, Conv2d, ConvCache, ConvGrads, Linear, LinearGrads};
use resnet::{ResidualEncoder, ResnetCache, ResnetGrads};

/// Encoder family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// 50-layer residual encoder (full-scale shape).
    Full,
    /// Desk-scale stack of stride-2 convolutions; depth and width come from
    /// `conv_channels`.
    Small,
}

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Per-attribute metadata consistency plus the post-processing slots.
    Exif,
    /// Same-image vs different-image pairs.
    Image,
    /// Camera-model classification of a single patch.
    Camera,
    /// Horizontal-order consistency of a same-image pair.
    X,
    /// Vertical-order consistency of a same-image pair.
    Y,
}

impl Objective {
    /// Number of patches one forward pass consumes.
    pub fn arity(self) -> usize {
        match self {
            Objective::Camera => 1,
            _ => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// Small-backbone convolution widths; each layer downsamples by 2.
    pub conv_channels: Vec<usize>,
    pub embedding_dim: usize,
    pub head_widths: Vec<usize>,
    pub output_dim: usize,
    pub objective: Objective,
    /// Hidden width of the overall-consistency combiner.
    pub combiner_hidden: usize,
    /// Optional checkpoint whose encoder weights initialize this model.
    pub pretrained_encoder: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::small(Objective::Exif)
    }
}

impl ModelConfig {
    /// Desk-scale default: 8 encoder layers (7 stride-2 convolutions plus
    /// the embedding projection) and a [256, 128, 64] head.
    pub fn small(objective: Objective) -> Self {
        ModelConfig {
            backbone: BackboneKind::Small,
            conv_channels: vec![8, 12, 16, 24, 32, 48, 64],
            embedding_dim: 256,
            head_widths: vec![256, 128, 64],
            output_dim: 83,
            objective,
            combiner_hidden: 512,
            pretrained_encoder: None,
        }
    }

    /// Copy with `output_dim` resolved against a vocabulary: label width for
    /// `exif`, camera-model count for `camera`, 1 for the scalar variants.
    pub fn resolved_for(&self, vocab: &AttributeVocabulary) -> Result<ModelConfig> {
        let mut cfg = self.clone();
        cfg.output_dim = match self.objective {
            Objective::Exif => vocab.label_dim(),
            Objective::Image | Objective::X | Objective::Y => 1,
            Objective::Camera => {
                let attr = vocab
                    .attr_index("Image Model")
                    .ok_or_else(|| Error::Config(
                        "camera objective requires the \"Image Model\" attribute in the vocabulary"
                            .into(),
                    ))?;
                vocab.attributes[attr].values.len()
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.output_dim == 0 {
            return Err(Error::Config("output_dim must be positive".into()));
        }
        if matches!(
            self.objective,
            Objective::Image | Objective::X | Objective::Y
        ) && self.output_dim != 1
        {
            return Err(Error::Config(format!(
                "objective {:?} requires output_dim 1, got {}",
                self.objective, self.output_dim
            )));
        }
        if self.backbone == BackboneKind::Small {
            let n = self.conv_channels.len();
            if n == 0 || n > 7 {
                return Err(Error::Config(
                    "small backbone needs 1..=7 stride-2 convolutions".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-slot consistency probabilities for one patch pair; indexed
/// identically to the pair labels (vocabulary attributes, then re-JPEG,
/// blur, resize).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyVector {
    pub probs: Vec<f32>,
}

impl ConsistencyVector {
    /// Builds a vector where masked-out slots take the uninformative value
    /// 0.5; used when feeding labeled data into the combiner.
    pub fn masked_filled(values: &[f32], mask: &[bool]) -> Self {
        ConsistencyVector {
            probs: values
                .iter()
                .zip(mask)
                .map(|(&v, &m)| if m { v } else { 0.5 })
                .collect(),
        }
    }
}

pub(crate) struct SmallEncoder<F> {
    convs: Vec<Conv2d<F>>,
    project: Linear<F>,
    flat_dim: usize,
    spatial: usize,
}

pub(crate) struct SmallEncCache<F> {
    conv_caches: Vec<ConvCache<F>>,
    activations: Vec<Array4<F>>,
    flat: Array2<F>,
}

pub(crate) struct SmallEncGrads<F> {
    convs: Vec<ConvGrads<F>>,
    project: LinearGrads<F>,
}

impl<F: NdFloat> SmallEncoder<F> {
    fn new<R: Rng>(channels: &[usize], embedding_dim: usize, rng: &mut R) -> Self {
        let mut convs = Vec::with_capacity(channels.len());
        let mut in_ch = 3;
        for &ch in channels {
            convs.push(Conv2d::he_init(ch, in_ch, 3, 2, 1, rng));
            in_ch = ch;
        }
        let spatial = PATCH_SIZE as usize >> channels.len();
        let flat_dim = in_ch * spatial * spatial;
        SmallEncoder {
            convs,
            project: Linear::he_init(embedding_dim, flat_dim, rng),
            flat_dim,
            spatial,
        }
    }

    fn forward(&self, x: &Array4<F>) -> (Array2<F>, SmallEncCache<F>) {
        let n = x.dim().0;
        let mut h = x.clone();
        let mut conv_caches = Vec::with_capacity(self.convs.len());
        let mut activations = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (z, cache) = conv.forward(&h);
            let y = relu(&z);
            conv_caches.push(cache);
            activations.push(y.clone());
            h = y;
        }
        let flat = h.into_shape_with_order((n, self.flat_dim)).unwrap();
        let emb = self.project.forward(&flat);
        (
            emb,
            SmallEncCache {
                conv_caches,
                activations,
                flat,
            },
        )
    }

    fn backward(&self, cache: &SmallEncCache<F>, gemb: &Array2<F>) -> SmallEncGrads<F> {
        let n = gemb.dim().0;
        let (gflat, gproject) = self.project.backward(&cache.flat, gemb);
        let last_ch = self.convs.last().unwrap().weight.dim().0;
        let mut gh = gflat
            .into_shape_with_order((n, last_ch, self.spatial, self.spatial))
            .unwrap();
        let mut conv_grads = vec![None; self.convs.len()];
        for i in (0..self.convs.len()).rev() {
            let gz = relu_backward(&cache.activations[i], &gh);
            let (gx, grads) = self.convs[i].backward(&cache.conv_caches[i], &gz, i > 0);
            conv_grads[i] = Some(grads);
            gh = gx;
        }
        SmallEncGrads {
            convs: conv_grads.into_iter().map(Option::unwrap).collect(),
            project: gproject,
        }
    }
}

pub(crate) enum Encoder<F> {
    Small(SmallEncoder<F>),
    Full(ResidualEncoder<F>),
}

pub(crate) enum EncCache<F> {
    Small(SmallEncCache<F>),
    Full(ResnetCache<F>),
}

pub(crate) enum EncGrads<F> {
    Small(SmallEncGrads<F>),
    Full(ResnetGrads<F>),
}

impl<F: NdFloat> Encoder<F> {
    fn forward(&self, x: &Array4<F>) -> (Array2<F>, EncCache<F>) {
        match self {
            Encoder::Small(e) => {
                let (emb, cache) = e.forward(x);
                (emb, EncCache::Small(cache))
            }
            Encoder::Full(e) => {
                let (emb, cache) = e.forward(x);
                (emb, EncCache::Full(cache))
            }
        }
    }

    fn backward(&self, cache: &EncCache<F>, gemb: &Array2<F>) -> EncGrads<F> {
        match (self, cache) {
            (Encoder::Small(e), EncCache::Small(c)) => EncGrads::Small(e.backward(c, gemb)),
            (Encoder::Full(e), EncCache::Full(c)) => EncGrads::Full(e.backward(c, gemb)),
            _ => unreachable!("encoder/cache mismatch"),
        }
    }
}

pub(crate) struct Mlp<F> {
    hidden: Vec<Linear<F>>,
    output: Linear<F>,
}

pub(crate) struct MlpCache<F> {
    inputs: Vec<Array2<F>>,
    activations: Vec<Array2<F>>,
}

pub(crate) struct MlpGrads<F> {
    hidden: Vec<LinearGrads<F>>,
    output: LinearGrads<F>,
}

impl<F: NdFloat> Mlp<F> {
    fn new<R: Rng>(input_dim: usize, widths: &[usize], output_dim: usize, rng: &mut R) -> Self {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut in_dim = input_dim;
        for &w in widths {
            hidden.push(Linear::he_init(w, in_dim, rng));
            in_dim = w;
        }
        // Zero output layer: a freshly initialized model emits exactly 0.5.
        Mlp {
            hidden,
            output: Linear::zeros(output_dim, in_dim),
        }
    }

    fn forward(&self, x: &Array2<F>) -> (Array2<F>, MlpCache<F>) {
        let mut inputs = Vec::with_capacity(self.hidden.len() + 1);
        let mut activations = Vec::with_capacity(self.hidden.len());
        let mut h = x.clone();
        for lin in &self.hidden {
            inputs.push(h.clone());
            let a = relu(&lin.forward(&h));
            activations.push(a.clone());
            h = a;
        }
        inputs.push(h.clone());
        let logits = self.output.forward(&h);
        (logits, MlpCache { inputs, activations })
    }

    fn backward(&self, cache: &MlpCache<F>, glogits: &Array2<F>) -> (Array2<F>, MlpGrads<F>) {
        let (mut gh, goutput) = self
            .output
            .backward(cache.inputs.last().unwrap(), glogits);
        let mut hidden_grads = vec![None; self.hidden.len()];
        for i in (0..self.hidden.len()).rev() {
            let gz = relu_backward(&cache.activations[i], &gh);
            let (gx, grads) = self.hidden[i].backward(&cache.inputs[i], &gz);
            hidden_grads[i] = Some(grads);
            gh = gx;
        }
        (
            gh,
            MlpGrads {
                hidden: hidden_grads.into_iter().map(Option::unwrap).collect(),
                output: goutput,
            },
        )
    }
}

/// Gradients for every parameter tensor, in the same order as
/// [`ConsistencyNetwork::tensor_names`].
pub struct NetGrads<F> {
    encoder: EncGrads<F>,
    head: MlpGrads<F>,
}

impl<F: NdFloat> NetGrads<F> {
    pub fn tensor(&self, idx: usize) -> ArrayViewD<'_, F> {
        self.tensors()[idx].clone()
    }

    pub(crate) fn tensors(&self) -> Vec<ArrayViewD<'_, F>> {
        let mut out = Vec::new();
        match &self.encoder {
            EncGrads::Small(e) => {
                for g in &e.convs {
                    out.push(g.weight.view().into_dyn());
                    out.push(g.bias.view().into_dyn());
                }
                out.push(e.project.weight.view().into_dyn());
                out.push(e.project.bias.view().into_dyn());
            }
            EncGrads::Full(e) => e.collect_views(&mut out),
        }
        for g in &self.head.hidden {
            out.push(g.weight.view().into_dyn());
            out.push(g.bias.view().into_dyn());
        }
        out.push(self.head.output.weight.view().into_dyn());
        out.push(self.head.output.bias.view().into_dyn());
        out
    }

    pub fn grad_at(&self, idx: usize, flat: usize) -> F {
        let t = self.tensor(idx);
        *t.to_shape(t.len()).unwrap().get(flat).unwrap()
    }
}

/// The Siamese consistency predictor. Generic over `f32` (training,
/// inference) and `f64` (gradient checking).
pub struct ConsistencyNetwork<F: NdFloat = f32> {
    pub config: ModelConfig,
    encoder: Encoder<F>,
    head: Mlp<F>,
}

impl<F: NdFloat> ConsistencyNetwork<F> {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = match config.backbone {
            BackboneKind::Small => Encoder::Small(SmallEncoder::new(
                &config.conv_channels,
                config.embedding_dim,
                rng,
            )),
            BackboneKind::Full => {
                Encoder::Full(ResidualEncoder::new(config.embedding_dim, rng))
            }
        };
        let head_input = if config.objective == Objective::Camera {
            config.embedding_dim
        } else {
            2 * config.embedding_dim
        };
        let head = Mlp::new(head_input, &config.head_widths, config.output_dim, rng);
        Ok(ConsistencyNetwork {
            config,
            encoder,
            head,
        })
    }

    fn check_patches(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let p = PATCH_SIZE as usize;
        if c != 3 || h != p || w != p {
            return Err(Error::Input(format!(
                "expected (N, 3, {p}, {p}) patches, got {:?}",
                x.dim()
            )));
        }
        Ok(())
    }

    /// Embeds a batch of patches; slot-independent by construction, so the
    /// same weights serve both sides of the pair.
    pub fn embed_batch(&self, x: &Array4<F>) -> Result<Array2<F>> {
        self.check_patches(x)?;
        Ok(self.encoder.forward(x).0)
    }

    /// Head probabilities for rows of concatenated embeddings
    /// `[embed(a) | embed(b)]`.
    pub fn head_probs(&self, emb_pairs: &Array2<F>) -> Result<Array2<F>> {
        if self.config.objective == Objective::Camera {
            return Err(Error::Input(
                "camera objective scores single patches, not pairs".into(),
            ));
        }
        if emb_pairs.dim().1 != 2 * self.config.embedding_dim {
            return Err(Error::Input(format!(
                "expected concatenated embeddings of width {}, got {}",
                2 * self.config.embedding_dim,
                emb_pairs.dim().1
            )));
        }
        let (logits, _) = self.head.forward(emb_pairs);
        Ok(logits.mapv(loss::sigmoid))
    }

    /// Per-slot probabilities for batched pairs.
    pub fn pair_probs(&self, xa: &Array4<F>, xb: &Array4<F>) -> Result<Array2<F>> {
        if xa.dim().0 != xb.dim().0 {
            return Err(Error::Input("pair batches must have equal length".into()));
        }
        let ea = self.embed_batch(xa)?;
        let eb = self.embed_batch(xb)?;
        let h = ndarray::concatenate(Axis(1), &[ea.view(), eb.view()]).unwrap();
        self.head_probs(&h)
    }
}

impl ConsistencyNetwork<f32> {
    /// The exif-objective forward pass: 83-slot consistency probabilities
    /// for one patch pair.
    pub fn consistency(&self, patch_a: &Patch, patch_b: &Patch) -> Result<ConsistencyVector> {
        if self.config.objective != Objective::Exif {
            return Err(Error::Input(format!(
                "consistency() requires the exif objective, model has {:?}",
                self.config.objective
            )));
        }
        let xa = stack_patches(std::slice::from_ref(patch_a));
        let xb = stack_patches(std::slice::from_ref(patch_b));
        let probs = self.pair_probs(&xa, &xb)?;
        Ok(ConsistencyVector {
            probs: probs.row(0).to_vec(),
        })
    }

    /// Scalar probability for the image/x/y variants.
    pub fn pair_score(&self, patch_a: &Patch, patch_b: &Patch) -> Result<f32> {
        match self.config.objective {
            Objective::Image | Objective::X | Objective::Y => {}
            other => {
                return Err(Error::Input(format!(
                    "pair_score() requires a scalar pair objective, model has {other:?}"
                )))
            }
        }
        let xa = stack_patches(std::slice::from_ref(patch_a));
        let xb = stack_patches(std::slice::from_ref(patch_b));
        Ok(self.pair_probs(&xa, &xb)?[[0, 0]])
    }

    /// Probability distribution over camera-model values for one patch.
    pub fn camera_distribution(&self, patch: &Patch) -> Result<Vec<f32>> {
        if self.config.objective != Objective::Camera {
            return Err(Error::Input(format!(
                "camera_distribution() requires the camera objective, model has {:?}",
                self.config.objective
            )));
        }
        let x = stack_patches(std::slice::from_ref(patch));
        let emb = self.embed_batch(&x)?;
        let (logits, _) = self.head.forward(&emb);
        Ok(loss::softmax_rows(&logits).row(0).to_vec())
    }

    /// Copies encoder weights from another network (pretrained
    /// initialization). Shapes must match exactly.
    pub fn load_encoder_from(&mut self, other: &ConsistencyNetwork<f32>) -> Result<()> {
        let names = self.tensor_names();
        let other_names = other.tensor_names();
        for (i, name) in names.iter().enumerate() {
            if !name.starts_with("encoder.") {
                continue;
            }
            let j = other_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Config(format!("pretrained encoder lacks tensor {name}")))?;
            let src = other.tensor(j).to_owned();
            if src.shape() != self.tensor(i).shape() {
                return Err(Error::Config(format!(
                    "pretrained tensor {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    self.tensor(i).shape()
                )));
            }
            self.assign_tensor(i, src.view());
        }
        Ok(())
    }
}

impl<F: NdFloat> ConsistencyNetwork<F> {
    /// Masked-BCE loss and parameter gradients for a pair batch. Used by
    /// every pair objective (exif labels are 83-wide, scalar variants
    /// 1-wide with all-ones masks).
    pub fn loss_and_grads(
        &self,
        xa: &Array4<F>,
        xb: &Array4<F>,
        y: &Array2<F>,
        mask: &Array2<F>,
    ) -> Result<(F, NetGrads<F>)> {
        self.check_patches(xa)?;
        self.check_patches(xb)?;
        let (ea, cache_a) = self.encoder.forward(xa);
        let (eb, cache_b) = self.encoder.forward(xb);
        let h = ndarray::concatenate(Axis(1), &[ea.view(), eb.view()]).unwrap();
        let (logits, mlp_cache) = self.head.forward(&h);
        let (loss_val, dlogits) = loss::masked_bce(&logits, y, mask)?;
        let (gh, head_grads) = self.head.backward(&mlp_cache, &dlogits);

        let e = self.config.embedding_dim;
        let gea = gh.slice(ndarray::s![.., 0..e]).to_owned();
        let geb = gh.slice(ndarray::s![.., e..2 * e]).to_owned();
        let ga = self.encoder.backward(&cache_a, &gea);
        let gb = self.encoder.backward(&cache_b, &geb);
        Ok((
            loss_val,
            NetGrads {
                encoder: add_enc_grads(ga, gb),
                head: head_grads,
            },
        ))
    }

    /// Softmax cross-entropy loss and gradients for the camera objective.
    pub fn camera_loss_and_grads(
        &self,
        x: &Array4<F>,
        targets: &[usize],
    ) -> Result<(F, NetGrads<F>)> {
        self.check_patches(x)?;
        let (emb, cache) = self.encoder.forward(x);
        let (logits, mlp_cache) = self.head.forward(&emb);
        let (loss_val, dlogits) = loss::softmax_ce(&logits, targets)?;
        let (gemb, head_grads) = self.head.backward(&mlp_cache, &dlogits);
        let enc_grads = self.encoder.backward(&cache, &gemb);
        Ok((
            loss_val,
            NetGrads {
                encoder: enc_grads,
                head: head_grads,
            },
        ))
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        match &self.encoder {
            Encoder::Small(e) => {
                for i in 0..e.convs.len() {
                    names.push(format!("encoder.conv{i}.weight"));
                    names.push(format!("encoder.conv{i}.bias"));
                }
                names.push("encoder.project.weight".into());
                names.push("encoder.project.bias".into());
            }
            Encoder::Full(e) => e.collect_names(&mut names),
        }
        for i in 0..self.head.hidden.len() {
            names.push(format!("head.fc{i}.weight"));
            names.push(format!("head.fc{i}.bias"));
        }
        names.push("head.out.weight".into());
        names.push("head.out.bias".into());
        names
    }

    pub fn tensor_count(&self) -> usize {
        self.tensor_names().len()
    }

    pub fn tensor(&self, idx: usize) -> ArrayViewD<'_, F> {
        self.tensor_views()[idx].clone()
    }

    fn tensor_views(&self) -> Vec<ArrayViewD<'_, F>> {
        let mut out = Vec::new();
        match &self.encoder {
            Encoder::Small(e) => {
                for conv in &e.convs {
                    out.push(conv.weight.view().into_dyn());
                    out.push(conv.bias.view().into_dyn());
                }
                out.push(e.project.weight.view().into_dyn());
                out.push(e.project.bias.view().into_dyn());
            }
            Encoder::Full(e) => e.collect_tensor_views(&mut out),
        }
        for lin in &self.head.hidden {
            out.push(lin.weight.view().into_dyn());
            out.push(lin.bias.view().into_dyn());
        }
        out.push(self.head.output.weight.view().into_dyn());
        out.push(self.head.output.bias.view().into_dyn());
        out
    }

    pub(crate) fn with_tensor_mut<R2>(
        &mut self,
        idx: usize,
        f: impl FnOnce(ndarray::ArrayViewMutD<'_, F>) -> R2,
    ) -> R2 {
        let mut i = idx;
        match &mut self.encoder {
            Encoder::Small(e) => {
                for conv in &mut e.convs {
                    if i == 0 {
                        return f(conv.weight.view_mut().into_dyn());
                    }
                    i -= 1;
                    if i == 0 {
                        return f(conv.bias.view_mut().into_dyn());
                    }
                    i -= 1;
                }
                if i == 0 {
                    return f(e.project.weight.view_mut().into_dyn());
                }
                i -= 1;
                if i == 0 {
                    return f(e.project.bias.view_mut().into_dyn());
                }
                i -= 1;
            }
            Encoder::Full(e) => {
                let n = e.tensor_count();
                if i < n {
                    return e.with_tensor_mut(i, f);
                }
                i -= n;
            }
        }
        finish_head_tensor(&mut self.head, i, f)
    }

    /// Test support: read one parameter by (tensor index, flat offset).
    pub fn param_at(&self, idx: usize, flat: usize) -> F {
        let t = self.tensor(idx);
        t.iter().nth(flat).copied().unwrap()
    }

    /// Test support: add `delta` to one parameter.
    pub fn add_to_param(&mut self, idx: usize, flat: usize, delta: F) {
        self.with_tensor_mut(idx, |mut v| {
            let slice = v.as_slice_mut().unwrap();
            slice[flat] = slice[flat] + delta;
        });
    }

    pub(crate) fn assign_tensor(&mut self, idx: usize, data: ArrayViewD<'_, F>) {
        self.with_tensor_mut(idx, |mut v| v.assign(&data));
    }
}

fn finish_head_tensor<F: NdFloat, R2>(
    head: &mut Mlp<F>,
    mut i: usize,
    f: impl FnOnce(ndarray::ArrayViewMutD<'_, F>) -> R2,
) -> R2 {
    for lin in &mut head.hidden {
        if i == 0 {
            return f(lin.weight.view_mut().into_dyn());
        }
        i -= 1;
        if i == 0 {
            return f(lin.bias.view_mut().into_dyn());
        }
        i -= 1;
    }
    if i == 0 {
        return f(head.output.weight.view_mut().into_dyn());
    }
    i -= 1;
    if i == 0 {
        return f(head.output.bias.view_mut().into_dyn());
    }
    panic!("tensor index out of range");
}

fn add_enc_grads<F: NdFloat>(a: EncGrads<F>, b: EncGrads<F>) -> EncGrads<F> {
    match (a, b) {
        (EncGrads::Small(mut a), EncGrads::Small(b)) => {
            for (ga, gb) in a.convs.iter_mut().zip(b.convs) {
                ga.weight = &ga.weight + &gb.weight;
                ga.bias = &ga.bias + &gb.bias;
            }
            a.project.weight = &a.project.weight + &b.project.weight;
            a.project.bias = &a.project.bias + &b.project.bias;
            EncGrads::Small(a)
        }
        (EncGrads::Full(a), EncGrads::Full(b)) => EncGrads::Full(a.add(b)),
        _ => unreachable!("encoder gradient kind mismatch"),
    }
}

/// Stacks patches into an (N, 3, 128, 128) batch.
pub fn stack_patches(patches: &[Patch]) -> Array4<f32> {
    let p = PATCH_SIZE as usize;
    let mut out = Array4::zeros((patches.len(), 3, p, p));
    for (i, patch) in patches.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&patch.pixels);
    }
    out
}

/// Converts a batch of patch pixel arrays (already f64) for gradient checks.
pub fn stack_patches_f64(patches: &[Patch]) -> Array4<f64> {
    stack_patches(patches).mapv(|v| v as f64)
}

pub(crate) fn sigmoid_scalar(z: f32) -> f32 {
    loss::sigmoid(z)
}

#[allow(dead_code)]
fn _assert_send_sync(net: ConsistencyNetwork<f32>) -> impl Send + Sync {
    net
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(objective: Objective, output_dim: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneKind::Small,
            conv_channels: vec![4, 8],
            embedding_dim: 16,
            head_widths: vec![16, 8],
            output_dim,
            objective,
            combiner_hidden: 32,
            pretrained_encoder: None,
        }
    }

    fn patch(seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Patch {
            pixels: Array3::from_shape_simple_fn((3, 128, 128), || rng.gen_range(0.0..1.0f32)),
            source_photo_id: format!("p{seed}"),
            origin: (0, 0),
        }
    }

    #[test]
    fn fresh_model_predicts_exactly_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net =
            ConsistencyNetwork::<f32>::new(tiny_config(Objective::Exif, 83), &mut rng).unwrap();
        let v = net.consistency(&patch(1), &patch(2)).unwrap();
        assert_eq!(v.probs.len(), 83);
        assert!(v.probs.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn probabilities_stay_in_range_after_weight_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net =
            ConsistencyNetwork::<f32>::new(tiny_config(Objective::Exif, 83), &mut rng).unwrap();
        // randomize the output layer too
        let last = net.tensor_count() - 2;
        let n = net.tensor(last).len();
        for flat in 0..n {
            net.add_to_param(last, flat, rng.gen_range(-2.0..2.0));
        }
        let v = net.consistency(&patch(3), &patch(3)).unwrap();
        assert!(v
            .probs
            .iter()
            .all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
    }

    #[test]
    fn embedding_is_slot_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net =
            ConsistencyNetwork::<f32>::new(tiny_config(Objective::Exif, 83), &mut rng).unwrap();
        let p = patch(5);
        let x = stack_patches(std::slice::from_ref(&p));
        let as_a = net.embed_batch(&x).unwrap();
        let as_b = net.embed_batch(&x).unwrap();
        assert_eq!(as_a, as_b);
    }

    #[test]
    fn camera_distribution_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net =
            ConsistencyNetwork::<f32>::new(tiny_config(Objective::Camera, 5), &mut rng).unwrap();
        let last = net.tensor_count() - 2;
        let n = net.tensor(last).len();
        for flat in 0..n {
            net.add_to_param(last, flat, rng.gen_range(-1.0..1.0));
        }
        let dist = net.camera_distribution(&patch(4)).unwrap();
        assert_eq!(dist.len(), 5);
        let sum: f32 = dist.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }

    #[test]
    fn objective_arity_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let exif =
            ConsistencyNetwork::<f32>::new(tiny_config(Objective::Exif, 83), &mut rng).unwrap();
        assert!(exif.camera_distribution(&patch(0)).is_err());
        assert!(exif.pair_score(&patch(0), &patch(1)).is_err());

        let camera =
            ConsistencyNetwork::<f32>::new(tiny_config(Objective::Camera, 4), &mut rng).unwrap();
        assert!(camera.consistency(&patch(0), &patch(1)).is_err());

        let image =
            ConsistencyNetwork::<f32>::new(tiny_config(Objective::Image, 1), &mut rng).unwrap();
        assert_eq!(image.pair_score(&patch(0), &patch(1)).unwrap(), 0.5);
    }

    #[test]
    fn shape_mismatch_is_an_input_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net =
            ConsistencyNetwork::<f32>::new(tiny_config(Objective::Exif, 83), &mut rng).unwrap();
        let bad = Array4::<f32>::zeros((1, 3, 64, 64));
        assert!(matches!(net.embed_batch(&bad), Err(Error::Input(_))));
    }

    #[test]
    fn tensor_walk_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net =
            ConsistencyNetwork::<f32>::new(tiny_config(Objective::Exif, 83), &mut rng).unwrap();
        let names = net.tensor_names();
        assert_eq!(names.len(), net.tensor_count());
        // conv0 w/b, conv1 w/b, project w/b, fc0 w/b, fc1 w/b, out w/b
        assert_eq!(names.len(), 12);
        for i in 0..net.tensor_count() {
            let before = net.param_at(i, 0);
            net.add_to_param(i, 0, 1.25);
            assert_eq!(net.param_at(i, 0), before + 1.25);
            net.add_to_param(i, 0, -1.25);
        }
    }
}
