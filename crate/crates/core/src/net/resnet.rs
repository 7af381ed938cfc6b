//! Full-scale residual encoder: the 50-weight-layer arrangement
//! (7x7 stem, max pool, bottleneck stages of 3/4/6/3 blocks, global average
//! pooling, embedding projection). No batch normalization; He init keeps
//! activations bounded and training at this scale is out of desk scope.

use ndarray::{Array2, Array4, NdFloat};
use rand::Rng;

use super::layers::{relu, relu_backward, Conv2d, ConvCache, ConvGrads, Linear, LinearGrads};

const STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const EXPANSION: usize = 4;

pub(crate) struct Bottleneck<F> {
    reduce: Conv2d<F>,
    conv: Conv2d<F>,
    expand: Conv2d<F>,
    shortcut: Option<Conv2d<F>>,
}

pub(crate) struct BlockCache<F> {
    reduce: ConvCache<F>,
    r: Array4<F>,
    conv: ConvCache<F>,
    c: Array4<F>,
    expand: ConvCache<F>,
    shortcut: Option<ConvCache<F>>,
    y: Array4<F>,
}

pub(crate) struct BlockGrads<F> {
    reduce: ConvGrads<F>,
    conv: ConvGrads<F>,
    expand: ConvGrads<F>,
    shortcut: Option<ConvGrads<F>>,
}

impl<F: NdFloat> Bottleneck<F> {
    fn new<R: Rng>(in_ch: usize, width: usize, stride: usize, rng: &mut R) -> Self {
        let out_ch = width * EXPANSION;
        let shortcut = if in_ch != out_ch || stride != 1 {
            Some(Conv2d::he_init(out_ch, in_ch, 1, stride, 0, rng))
        } else {
            None
        };
        Bottleneck {
            reduce: Conv2d::he_init(width, in_ch, 1, 1, 0, rng),
            conv: Conv2d::he_init(width, width, 3, stride, 1, rng),
            expand: Conv2d::he_init(out_ch, width, 1, 1, 0, rng),
            shortcut,
        }
    }

    fn forward(&self, x: &Array4<F>) -> (Array4<F>, BlockCache<F>) {
        let (z1, reduce_cache) = self.reduce.forward(x);
        let r = relu(&z1);
        let (z2, conv_cache) = self.conv.forward(&r);
        let c = relu(&z2);
        let (e, expand_cache) = self.expand.forward(&c);
        let (s, shortcut_cache) = match &self.shortcut {
            Some(conv) => {
                let (s, cache) = conv.forward(x);
                (s, Some(cache))
            }
            None => (x.clone(), None),
        };
        let y = relu(&(&e + &s));
        (
            y.clone(),
            BlockCache {
                reduce: reduce_cache,
                r,
                conv: conv_cache,
                c,
                expand: expand_cache,
                shortcut: shortcut_cache,
                y,
            },
        )
    }

    fn backward(&self, cache: &BlockCache<F>, gy: &Array4<F>) -> (Array4<F>, BlockGrads<F>) {
        let gz = relu_backward(&cache.y, gy);
        let (gc, g_expand) = self.expand.backward(&cache.expand, &gz, true);
        let gc = relu_backward(&cache.c, &gc);
        let (gr, g_conv) = self.conv.backward(&cache.conv, &gc, true);
        let gr = relu_backward(&cache.r, &gr);
        let (gx_main, g_reduce) = self.reduce.backward(&cache.reduce, &gr, true);
        let (gx_skip, g_shortcut) = match (&self.shortcut, &cache.shortcut) {
            (Some(conv), Some(cache)) => {
                let (g, grads) = conv.backward(cache, &gz, true);
                (g, Some(grads))
            }
            _ => (gz, None),
        };
        (
            gx_main + gx_skip,
            BlockGrads {
                reduce: g_reduce,
                conv: g_conv,
                expand: g_expand,
                shortcut: g_shortcut,
            },
        )
    }
}

struct MaxPool {
    size: usize,
    stride: usize,
    pad: usize,
}

struct PoolCache {
    /// Flat input index (iy * w + ix) chosen per output element.
    argmax: Array4<usize>,
    in_dim: (usize, usize, usize, usize),
}

impl MaxPool {
    fn forward<F: NdFloat>(&self, x: &Array4<F>) -> (Array4<F>, PoolCache) {
        let (n, c, h, w) = x.dim();
        let oh = (h + 2 * self.pad - self.size) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.size) / self.stride + 1;
        let mut y = Array4::from_elem((n, c, oh, ow), F::neg_infinity());
        let mut argmax = Array4::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0;
                        for ky in 0..self.size {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.size {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = x[[ni, ci, iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = iy as usize * w + ix as usize;
                                }
                            }
                        }
                        y[[ni, ci, oy, ox]] = best;
                        argmax[[ni, ci, oy, ox]] = best_idx;
                    }
                }
            }
        }
        (
            y,
            PoolCache {
                argmax,
                in_dim: (n, c, h, w),
            },
        )
    }

    fn backward<F: NdFloat>(&self, cache: &PoolCache, gy: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = cache.in_dim;
        let mut gx = Array4::zeros((n, c, h, w));
        for ((ni, ci, oy, ox), &g) in gy.indexed_iter() {
            let idx = cache.argmax[[ni, ci, oy, ox]];
            gx[[ni, ci, idx / w, idx % w]] = gx[[ni, ci, idx / w, idx % w]] + g;
        }
        gx
    }
}

pub(crate) struct ResidualEncoder<F> {
    stem: Conv2d<F>,
    pool: MaxPool,
    stages: Vec<Vec<Bottleneck<F>>>,
    project: Linear<F>,
}

pub(crate) struct ResnetCache<F> {
    stem: ConvCache<F>,
    stem_act: Array4<F>,
    pool: PoolCache,
    blocks: Vec<Vec<BlockCache<F>>>,
    pooled_dim: (usize, usize, usize, usize),
    pooled: Array2<F>,
}

pub(crate) struct ResnetGrads<F> {
    stem: ConvGrads<F>,
    blocks: Vec<Vec<BlockGrads<F>>>,
    project: LinearGrads<F>,
}

impl<F: NdFloat> ResidualEncoder<F> {
    pub fn new<R: Rng>(embedding_dim: usize, rng: &mut R) -> Self {
        let stem = Conv2d::he_init(64, 3, 7, 2, 3, rng);
        let pool = MaxPool {
            size: 3,
            stride: 2,
            pad: 1,
        };
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = 64;
        for (si, &blocks) in STAGE_BLOCKS.iter().enumerate() {
            let width = 64 << si;
            let mut stage = Vec::with_capacity(blocks);
            for bi in 0..blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                stage.push(Bottleneck::new(in_ch, width, stride, rng));
                in_ch = width * EXPANSION;
            }
            stages.push(stage);
        }
        ResidualEncoder {
            stem,
            pool,
            stages,
            project: Linear::he_init(embedding_dim, in_ch, rng),
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array2<F>, ResnetCache<F>) {
        let (z, stem_cache) = self.stem.forward(x);
        let stem_act = relu(&z);
        let (mut h, pool_cache) = self.pool.forward(&stem_act);
        let mut block_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut caches = Vec::with_capacity(stage.len());
            for block in stage {
                let (y, cache) = block.forward(&h);
                caches.push(cache);
                h = y;
            }
            block_caches.push(caches);
        }
        let (n, c, hh, ww) = h.dim();
        let scale = F::one() / F::from(hh * ww).unwrap();
        let mut pooled = Array2::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = F::zero();
                for yy in 0..hh {
                    for xx in 0..ww {
                        acc = acc + h[[ni, ci, yy, xx]];
                    }
                }
                pooled[[ni, ci]] = acc * scale;
            }
        }
        let emb = self.project.forward(&pooled);
        (
            emb,
            ResnetCache {
                stem: stem_cache,
                stem_act,
                pool: pool_cache,
                blocks: block_caches,
                pooled_dim: (n, c, hh, ww),
                pooled,
            },
        )
    }

    pub fn backward(&self, cache: &ResnetCache<F>, gemb: &Array2<F>) -> ResnetGrads<F> {
        let (gpooled, g_project) = self.project.backward(&cache.pooled, gemb);
        let (n, c, hh, ww) = cache.pooled_dim;
        let scale = F::one() / F::from(hh * ww).unwrap();
        let mut gh = Array4::zeros((n, c, hh, ww));
        for ni in 0..n {
            for ci in 0..c {
                let g = gpooled[[ni, ci]] * scale;
                for yy in 0..hh {
                    for xx in 0..ww {
                        gh[[ni, ci, yy, xx]] = g;
                    }
                }
            }
        }
        let mut block_grads: Vec<Vec<BlockGrads<F>>> = Vec::with_capacity(self.stages.len());
        for _ in &self.stages {
            block_grads.push(Vec::new());
        }
        for si in (0..self.stages.len()).rev() {
            let stage = &self.stages[si];
            let mut grads = vec![None; stage.len()];
            for bi in (0..stage.len()).rev() {
                let (gx, g) = stage[bi].backward(&cache.blocks[si][bi], &gh);
                grads[bi] = Some(g);
                gh = gx;
            }
            block_grads[si] = grads.into_iter().map(Option::unwrap).collect();
        }
        let gpool = self.pool.backward(&cache.pool, &gh);
        let gstem = relu_backward(&cache.stem_act, &gpool);
        let (_, g_stem) = self.stem.backward(&cache.stem, &gstem, false);
        ResnetGrads {
            stem: g_stem,
            blocks: block_grads,
            project: g_project,
        }
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 2; // stem
        for stage in &self.stages {
            for block in stage {
                n += 6; // reduce, conv, expand weights+biases
                if block.shortcut.is_some() {
                    n += 2;
                }
            }
        }
        n + 2 // project
    }

    pub fn collect_names(&self, out: &mut Vec<String>) {
        out.push("encoder.stem.weight".into());
        out.push("encoder.stem.bias".into());
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                for part in ["reduce", "conv", "expand"] {
                    out.push(format!("encoder.s{si}.b{bi}.{part}.weight"));
                    out.push(format!("encoder.s{si}.b{bi}.{part}.bias"));
                }
                if block.shortcut.is_some() {
                    out.push(format!("encoder.s{si}.b{bi}.shortcut.weight"));
                    out.push(format!("encoder.s{si}.b{bi}.shortcut.bias"));
                }
            }
        }
        out.push("encoder.project.weight".into());
        out.push("encoder.project.bias".into());
    }

    pub fn collect_tensor_views<'a>(&'a self, out: &mut Vec<ndarray::ArrayViewD<'a, F>>) {
        out.push(self.stem.weight.view().into_dyn());
        out.push(self.stem.bias.view().into_dyn());
        for stage in &self.stages {
            for block in stage {
                for conv in [&block.reduce, &block.conv, &block.expand] {
                    out.push(conv.weight.view().into_dyn());
                    out.push(conv.bias.view().into_dyn());
                }
                if let Some(sc) = &block.shortcut {
                    out.push(sc.weight.view().into_dyn());
                    out.push(sc.bias.view().into_dyn());
                }
            }
        }
        out.push(self.project.weight.view().into_dyn());
        out.push(self.project.bias.view().into_dyn());
    }

    pub fn with_tensor_mut<R2>(
        &mut self,
        idx: usize,
        f: impl FnOnce(ndarray::ArrayViewMutD<'_, F>) -> R2,
    ) -> R2 {
        let mut i = idx;
        if i == 0 {
            return f(self.stem.weight.view_mut().into_dyn());
        }
        i -= 1;
        if i == 0 {
            return f(self.stem.bias.view_mut().into_dyn());
        }
        i -= 1;
        for stage in &mut self.stages {
            for block in stage {
                for conv in [&mut block.reduce, &mut block.conv, &mut block.expand] {
                    if i == 0 {
                        return f(conv.weight.view_mut().into_dyn());
                    }
                    i -= 1;
                    if i == 0 {
                        return f(conv.bias.view_mut().into_dyn());
                    }
                    i -= 1;
                }
                if let Some(sc) = &mut block.shortcut {
                    if i == 0 {
                        return f(sc.weight.view_mut().into_dyn());
                    }
                    i -= 1;
                    if i == 0 {
                        return f(sc.bias.view_mut().into_dyn());
                    }
                    i -= 1;
                }
            }
        }
        if i == 0 {
            return f(self.project.weight.view_mut().into_dyn());
        }
        i -= 1;
        if i == 0 {
            return f(self.project.bias.view_mut().into_dyn());
        }
        panic!("residual encoder tensor index out of range");
    }
}

impl<F: NdFloat> ResnetGrads<F> {
    pub fn collect_views<'a>(&'a self, out: &mut Vec<ndarray::ArrayViewD<'a, F>>) {
        out.push(self.stem.weight.view().into_dyn());
        out.push(self.stem.bias.view().into_dyn());
        for stage in &self.blocks {
            for block in stage {
                for g in [&block.reduce, &block.conv, &block.expand] {
                    out.push(g.weight.view().into_dyn());
                    out.push(g.bias.view().into_dyn());
                }
                if let Some(sc) = &block.shortcut {
                    out.push(sc.weight.view().into_dyn());
                    out.push(sc.bias.view().into_dyn());
                }
            }
        }
        out.push(self.project.weight.view().into_dyn());
        out.push(self.project.bias.view().into_dyn());
    }

    pub fn add(mut self, other: ResnetGrads<F>) -> ResnetGrads<F> {
        fn add_conv<F: NdFloat>(a: &mut ConvGrads<F>, b: ConvGrads<F>) {
            a.weight = &a.weight + &b.weight;
            a.bias = &a.bias + &b.bias;
        }
        add_conv(&mut self.stem, other.stem);
        for (sa, sb) in self.blocks.iter_mut().zip(other.blocks) {
            for (ba, bb) in sa.iter_mut().zip(sb) {
                add_conv(&mut ba.reduce, bb.reduce);
                add_conv(&mut ba.conv, bb.conv);
                add_conv(&mut ba.expand, bb.expand);
                if let (Some(a), Some(b)) = (&mut ba.shortcut, bb.shortcut) {
                    add_conv(a, b);
                }
            }
        }
        self.project.weight = &self.project.weight + &other.project.weight;
        self.project.bias = &self.project.bias + &other.project.bias;
        self
    }
}
