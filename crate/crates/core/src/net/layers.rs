//! Layer primitives with explicit forward caches and backward passes.
//!
//! Everything is generic over `f32`/`f64`: training runs in single
//! precision, gradient checks in double. Convolutions are im2col + GEMM.

use ndarray::{Array1, Array2, Array3, Array4, Dimension, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub(crate) fn he_normal<F: NdFloat, R: Rng>(rng: &mut R, fan_in: usize) -> F {
    let sigma = (2.0 / fan_in as f64).sqrt();
    let z: f64 = StandardNormal.sample(rng);
    F::from(z * sigma).unwrap()
}

pub(crate) struct Conv2d<F> {
    /// (out_channels, in_channels, k, k)
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) struct ConvCache<F> {
    /// (N, C*k*k, OH*OW)
    cols: Array3<F>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

pub(crate) struct ConvGrads<F> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

impl<F: NdFloat> Conv2d<F> {
    pub fn he_init<R: Rng>(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Array4::from_shape_simple_fn((out_channels, in_channels, kernel, kernel), || {
            he_normal(rng, fan_in)
        });
        Conv2d {
            weight,
            bias: Array1::zeros(out_channels),
            stride,
            pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    /// Flattened (oc, ic*k*k) view of the weights for GEMM.
    fn weight2(&self) -> Array2<F> {
        let (oc, ic, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((oc, ic * k * k))
            .unwrap()
            .to_owned()
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel();
        let oc = self.weight.dim().0;

        let mut cols = Array3::zeros((n, c * k * k, oh * ow));
        for i in 0..n {
            im2col(
                &x.index_axis(ndarray::Axis(0), i),
                k,
                self.stride,
                self.pad,
                oh,
                ow,
                &mut cols.index_axis_mut(ndarray::Axis(0), i),
            );
        }

        let w2 = self.weight2();
        let mut out = Array4::zeros((n, oc, oh, ow));
        for i in 0..n {
            let col = cols.index_axis(ndarray::Axis(0), i);
            let mut y = w2.dot(&col); // (oc, oh*ow)
            for (mut row, &b) in y.rows_mut().into_iter().zip(self.bias.iter()) {
                row.mapv_inplace(|v| v + b);
            }
            out.index_axis_mut(ndarray::Axis(0), i)
                .assign(&y.into_shape_with_order((oc, oh, ow)).unwrap());
        }
        (
            out,
            ConvCache {
                cols,
                in_dim: (n, c, h, w),
                out_hw: (oh, ow),
            },
        )
    }

    /// Returns (grad wrt input, parameter grads). `need_gx` skips the
    /// input-gradient computation for the first layer.
    pub fn backward(
        &self,
        cache: &ConvCache<F>,
        gy: &Array4<F>,
        need_gx: bool,
    ) -> (Array4<F>, ConvGrads<F>) {
        let (n, c, h, w) = cache.in_dim;
        let (oh, ow) = cache.out_hw;
        let k = self.kernel();
        let (oc, ic, _, _) = self.weight.dim();

        let w2 = self.weight2();
        let mut gw2 = Array2::<F>::zeros((oc, ic * k * k));
        let mut gb = Array1::<F>::zeros(oc);
        let mut gx = Array4::zeros(if need_gx { (n, c, h, w) } else { (0, 0, 0, 0) });

        for i in 0..n {
            let gy_mat = gy
                .index_axis(ndarray::Axis(0), i)
                .into_shape_with_order((oc, oh * ow))
                .unwrap()
                .to_owned();
            let col = cache.cols.index_axis(ndarray::Axis(0), i);
            gw2 = gw2 + gy_mat.dot(&col.t());
            gb = gb + gy_mat.sum_axis(ndarray::Axis(1));
            if need_gx {
                let gcol = w2.t().dot(&gy_mat); // (c*k*k, oh*ow)
                col2im(
                    &gcol,
                    k,
                    self.stride,
                    self.pad,
                    oh,
                    ow,
                    &mut gx.index_axis_mut(ndarray::Axis(0), i),
                );
            }
        }
        let gw = gw2.into_shape_with_order((oc, ic, k, k)).unwrap();
        (gx, ConvGrads { weight: gw, bias: gb })
    }
}

fn im2col<F: NdFloat>(
    x: &ndarray::ArrayView3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut ndarray::ArrayViewMut2<F>,
) {
    let (c, h, w) = x.dim();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
}

fn col2im<F: NdFloat>(
    gcol: &Array2<F>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    gx: &mut ndarray::ArrayViewMut3<F>,
) {
    let (c, h, w) = gx.dim();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[[ci, iy as usize, ix as usize]] =
                            gx[[ci, iy as usize, ix as usize]] + gcol[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
}

pub(crate) struct Linear<F> {
    /// (out, in)
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

pub(crate) struct LinearGrads<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: NdFloat> Linear<F> {
    pub fn he_init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        Linear {
            weight: Array2::from_shape_simple_fn((out_dim, in_dim), || he_normal(rng, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Zero-initialized layer; used for output layers so a fresh model
    /// predicts probability exactly 0.5 everywhere.
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight.t());
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        y
    }

    pub fn backward(&self, x: &Array2<F>, gy: &Array2<F>) -> (Array2<F>, LinearGrads<F>) {
        let gx = gy.dot(&self.weight);
        let gw = gy.t().dot(x);
        let gb = gy.sum_axis(ndarray::Axis(0));
        (gx, LinearGrads { weight: gw, bias: gb })
    }
}

pub(crate) fn relu<F: NdFloat, D: Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| v.max(F::zero()))
}

/// Backward through ReLU given the forward *output* (y > 0 iff x > 0).
pub(crate) fn relu_backward<F: NdFloat, D: Dimension>(
    y: &ndarray::Array<F, D>,
    gy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(y).for_each(|g, &yv| {
        if yv <= F::zero() {
            *g = F::zero();
        }
    });
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_output_shape_and_identity_kernel() {
        // 1x1 kernel with identity weight leaves channels untouched.
        let mut conv = Conv2d::<f64> {
            weight: Array4::zeros((2, 2, 1, 1)),
            bias: Array1::zeros(2),
            stride: 1,
            pad: 0,
        };
        conv.weight[[0, 0, 0, 0]] = 1.0;
        conv.weight[[1, 1, 0, 0]] = 1.0;
        let x = Array4::from_shape_fn((1, 2, 3, 3), |(_, c, y, xx)| (c * 9 + y * 3 + xx) as f64);
        let (y, _) = conv.forward(&x);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_stride_two_halves_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f32>::he_init(4, 3, 3, 2, 1, &mut rng);
        let x = Array4::zeros((2, 3, 16, 16));
        let (y, _) = conv.forward(&x);
        assert_eq!(y.dim(), (2, 4, 8, 8));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::he_init(2, 2, 3, 2, 1, &mut rng);
        let x = Array4::from_shape_simple_fn((1, 2, 6, 6), || {
            he_normal::<f64, _>(&mut rng, 1)
        });

        // scalar objective: sum of squares of the output
        let loss_of = |conv: &Conv2d<f64>, x: &Array4<f64>| {
            let (y, _) = conv.forward(x);
            y.iter().map(|v| v * v).sum::<f64>()
        };
        let (y, cache) = conv.forward(&x);
        let gy = y.mapv(|v| 2.0 * v);
        let (gx, grads) = conv.backward(&cache, &gy, true);

        let h = 1e-6;
        for &(a, b, c, d) in &[(0usize, 0usize, 0usize, 0usize), (1, 1, 2, 2), (0, 1, 1, 0)] {
            let orig = conv.weight[[a, b, c, d]];
            conv.weight[[a, b, c, d]] = orig + h;
            let lp = loss_of(&conv, &x);
            conv.weight[[a, b, c, d]] = orig - h;
            let lm = loss_of(&conv, &x);
            conv.weight[[a, b, c, d]] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (grads.weight[[a, b, c, d]] - fd).abs() / fd.abs().max(1e-8) < 1e-5,
                "weight grad mismatch: {} vs {}",
                grads.weight[[a, b, c, d]],
                fd
            );
        }
        let mut x2 = x.clone();
        for &(b, c, d) in &[(0usize, 0usize, 0usize), (1, 3, 4)] {
            let orig = x2[[0, b, c, d]];
            x2[[0, b, c, d]] = orig + h;
            let lp = loss_of(&conv, &x2);
            x2[[0, b, c, d]] = orig - h;
            let lm = loss_of(&conv, &x2);
            x2[[0, b, c, d]] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (gx[[0, b, c, d]] - fd).abs() / fd.abs().max(1e-8) < 1e-5,
                "input grad mismatch"
            );
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::<f64>::he_init(3, 4, &mut rng);
        let x = Array2::from_shape_simple_fn((2, 4), || he_normal::<f64, _>(&mut rng, 1));
        let loss_of = |lin: &Linear<f64>, x: &Array2<f64>| {
            lin.forward(x).iter().map(|v| v * v).sum::<f64>()
        };
        let y = lin.forward(&x);
        let gy = y.mapv(|v| 2.0 * v);
        let (_, grads) = lin.backward(&x, &gy);

        let h = 1e-6;
        let orig = lin.weight[[1, 2]];
        lin.weight[[1, 2]] = orig + h;
        let lp = loss_of(&lin, &x);
        lin.weight[[1, 2]] = orig - h;
        let lm = loss_of(&lin, &x);
        lin.weight[[1, 2]] = orig;
        let fd = (lp - lm) / (2.0 * h);
        assert!((grads.weight[[1, 2]] - fd).abs() / fd.abs().max(1e-8) < 1e-6);
    }

    #[test]
    fn relu_masks_negative_gradients() {
        let x = ndarray::arr1(&[-1.0f32, 0.0, 2.0]);
        let y = relu(&x);
        assert_eq!(y, ndarray::arr1(&[0.0, 0.0, 2.0]));
        let gy = ndarray::arr1(&[5.0f32, 5.0, 5.0]);
        let gx = relu_backward(&y, &gy);
        assert_eq!(gx, ndarray::arr1(&[0.0, 0.0, 5.0]));
    }
}
