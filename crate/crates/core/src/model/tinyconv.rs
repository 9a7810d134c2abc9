//! The always-available desk-scale backbone: three conv-pool blocks over a
//! coordinate-augmented input, global average pooling to a `d_view` feature.
//!
//! Two fixed channels encode normalized x/y position. Convolution followed by
//! global pooling is otherwise translation-invariant, so without them the
//! pooled feature could not express *where* image structure sits — which is
//! exactly what the corner-marker benchmark cohorts require.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, NdFloat};

use crate::image::ImageTensor;
use crate::model::layers::{
    col2im, conv_backward_input, conv_backward_params, conv_forward, global_avg_pool,
    global_avg_pool_backward, im2col, maxpool2, maxpool2_backward, relu_backward_inplace,
    relu_inplace,
};
use crate::model::ParamRange;

/// RGB plus the two coordinate channels.
pub const INPUT_CHANNELS: usize = 5;
pub const BLOCK1_CHANNELS: usize = 8;
pub const BLOCK2_CHANNELS: usize = 16;

/// Closed-form parameter count of the backbone body for a given `d_view`.
pub fn body_parameter_count(d_view: usize) -> u64 {
    let conv = |cin: usize, cout: usize| (9 * cin * cout + cout) as u64;
    conv(INPUT_CHANNELS, BLOCK1_CHANNELS)
        + conv(BLOCK1_CHANNELS, BLOCK2_CHANNELS)
        + conv(BLOCK2_CHANNELS, d_view)
}

#[derive(Debug, Clone)]
pub(crate) struct ConvDef {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub w: ParamRange,
    pub b: ParamRange,
}

impl ConvDef {
    fn w_view<'a, F: NdFloat>(&self, params: &'a [F]) -> ArrayView2<'a, F> {
        ArrayView2::from_shape(
            (self.k * self.k * self.cin, self.cout),
            &params[self.w.clone()],
        )
        .expect("weight range matches shape")
    }

    fn b_view<'a, F: NdFloat>(&self, params: &'a [F]) -> ArrayView1<'a, F> {
        ArrayView1::from_shape(self.cout, &params[self.b.clone()]).expect("bias range matches")
    }
}

/// Offsets of one backbone branch inside the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct TinyConvArch {
    pub convs: [ConvDef; 3],
}

pub(crate) struct StageCache<F> {
    in_shape: (usize, usize, usize),
    cols: Array2<F>,
    /// Post-ReLU activation; doubles as the ReLU mask and the pool input.
    activated: Array3<F>,
    argmax: Vec<u32>,
}

pub(crate) struct TinyConvCache<F> {
    stages: Vec<StageCache<F>>,
    pooled_shape: (usize, usize, usize),
}

impl TinyConvArch {
    pub fn define(alloc: &mut dyn FnMut(&str, usize) -> ParamRange, d_view: usize) -> Self {
        let widths = [
            (INPUT_CHANNELS, BLOCK1_CHANNELS, 4usize),
            (BLOCK1_CHANNELS, BLOCK2_CHANNELS, 2),
            (BLOCK2_CHANNELS, d_view, 2),
        ];
        let convs = std::array::from_fn(|i| {
            let (cin, cout, stride) = widths[i];
            ConvDef {
                cin,
                cout,
                k: 3,
                stride,
                pad: 1,
                w: alloc(&format!("conv{}.weight", i + 1), 9 * cin * cout),
                b: alloc(&format!("conv{}.bias", i + 1), cout),
            }
        });
        TinyConvArch { convs }
    }

    /// He-normal weights, zero biases.
    pub fn init<F: NdFloat>(&self, params: &mut [F], rng: &mut rand_chacha::ChaCha8Rng) {
        use rand_distr::Distribution;
        for conv in &self.convs {
            let fan_in = (conv.k * conv.k * conv.cin) as f64;
            let normal = rand_distr::Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
            for slot in &mut params[conv.w.clone()] {
                *slot = F::from(normal.sample(rng)).unwrap();
            }
            for slot in &mut params[conv.b.clone()] {
                *slot = F::zero();
            }
        }
    }

    /// Feature vector only; used for evaluation and frozen backbones.
    pub fn features<F: NdFloat>(&self, params: &[F], img: &ImageTensor) -> Array1<F> {
        let mut cur = input_with_coords::<F>(img);
        for conv in &self.convs {
            let (cols, (oh, ow)) = im2col(&cur, conv.k, conv.stride, conv.pad);
            let mut a = conv_forward(&cols, conv.w_view(params), conv.b_view(params), oh, ow);
            relu_inplace(&mut a);
            let (pooled, _) = maxpool2(&a);
            cur = pooled;
        }
        global_avg_pool(&cur)
    }

    /// Forward pass keeping everything the backward pass needs.
    pub fn forward_cached<F: NdFloat>(
        &self,
        params: &[F],
        img: &ImageTensor,
    ) -> (Array1<F>, TinyConvCache<F>) {
        let mut cur = input_with_coords::<F>(img);
        let mut stages = Vec::with_capacity(3);
        for conv in &self.convs {
            let in_shape = cur.dim();
            let (cols, (oh, ow)) = im2col(&cur, conv.k, conv.stride, conv.pad);
            let mut a = conv_forward(&cols, conv.w_view(params), conv.b_view(params), oh, ow);
            relu_inplace(&mut a);
            let (pooled, argmax) = maxpool2(&a);
            stages.push(StageCache {
                in_shape,
                cols,
                activated: a,
                argmax,
            });
            cur = pooled;
        }
        let feat = global_avg_pool(&cur);
        (
            feat,
            TinyConvCache {
                stages,
                pooled_shape: cur.dim(),
            },
        )
    }

    /// Accumulate weight gradients into `grads`; the image gradient is
    /// discarded at the input.
    pub fn backward<F: NdFloat>(
        &self,
        params: &[F],
        cache: &TinyConvCache<F>,
        dfeat: ArrayView1<F>,
        grads: &mut [F],
    ) {
        let mut d = global_avg_pool_backward(dfeat, cache.pooled_shape);
        for (idx, (conv, stage)) in self.convs.iter().zip(&cache.stages).enumerate().rev() {
            let mut da = maxpool2_backward(&d, &stage.argmax, stage.activated.dim());
            relu_backward_inplace(&mut da, &stage.activated);
            let (oh, ow, cout) = da.dim();
            let dy_flat = da
                .into_shape_with_order((oh * ow, cout))
                .expect("activation is contiguous");
            let (dw, db) = conv_backward_params(&stage.cols, &dy_flat);
            accumulate(&mut grads[conv.w.clone()], dw.as_slice().unwrap());
            accumulate(&mut grads[conv.b.clone()], db.as_slice().unwrap());
            if idx == 0 {
                // The image gradient is never used.
                break;
            }
            let dcols = conv_backward_input(conv.w_view(params), &dy_flat);
            d = col2im(&dcols, stage.in_shape, conv.k, conv.stride, conv.pad);
        }
    }
}

fn accumulate<F: NdFloat>(into: &mut [F], from: &[F]) {
    for (slot, v) in into.iter_mut().zip(from) {
        *slot = *slot + *v;
    }
}

/// Stack the RGB planes with normalized x/y coordinate channels in [-1, 1].
fn input_with_coords<F: NdFloat>(img: &ImageTensor) -> Array3<F> {
    let (h, w, _) = img.pixels().dim();
    let mut out = Array3::zeros((h, w, INPUT_CHANNELS));
    let coord = |i: usize, n: usize| -> F {
        if n <= 1 {
            F::zero()
        } else {
            F::from(2.0 * i as f64 / (n - 1) as f64 - 1.0).unwrap()
        }
    };
    for y in 0..h {
        let ny = coord(y, h);
        for x in 0..w {
            for c in 0..3 {
                out[[y, x, c]] = F::from(img.pixels()[[y, x, c]]).unwrap();
            }
            out[[y, x, 3]] = coord(x, w);
            out[[y, x, 4]] = ny;
        }
    }
    out
}
