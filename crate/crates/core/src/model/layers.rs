//! Dense/convolution/pooling primitives with explicit backward passes.
//!
//! Activations are stored `(height, width, channels)`; convolution weights
//! are `(k * k * c_in, c_out)` so the forward pass is one GEMM over im2col
//! patch matrices.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, NdFloat};

/// Gather k x k patches at the given stride/padding into a
/// `(out_h * out_w, k * k * c_in)` matrix. Out-of-bounds taps are zero.
///
/// Channel-last layout makes every tap a contiguous `c_in` run, so the
/// gather is slice copies rather than per-element indexing.
pub fn im2col<F: NdFloat>(
    x: &Array3<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<F>, (usize, usize)) {
    let (h, w, cin) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let xs = x.as_slice().expect("input is standard layout");
    let mut cols = Array2::zeros((oh * ow, k * k * cin));
    let row_len = k * k * cin;
    let cs = cols.as_slice_mut().expect("fresh allocation");
    for oy in 0..oh {
        for ky in 0..k {
            let sy = (oy * stride + ky) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let sy = sy as usize;
            for ox in 0..ow {
                let dst_base = (oy * ow + ox) * row_len + ky * k * cin;
                for kx in 0..k {
                    let sx = (ox * stride + kx) as isize - pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy * w + sx as usize) * cin;
                    let dst = dst_base + kx * cin;
                    cs[dst..dst + cin].copy_from_slice(&xs[src..src + cin]);
                }
            }
        }
    }
    (cols, (oh, ow))
}

/// Scatter-add of a patch-matrix gradient back onto the input image;
/// the adjoint of [`im2col`].
pub fn col2im<F: NdFloat>(
    dcols: &Array2<F>,
    in_shape: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let (h, w, cin) = in_shape;
    let ow = (w + 2 * pad - k) / stride + 1;
    let oh = (h + 2 * pad - k) / stride + 1;
    let row_len = k * k * cin;
    let ds = dcols.as_slice().expect("GEMM output is contiguous");
    let mut dx = Array3::zeros(in_shape);
    let xs = dx.as_slice_mut().expect("fresh allocation");
    for oy in 0..oh {
        for ky in 0..k {
            let sy = (oy * stride + ky) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let sy = sy as usize;
            for ox in 0..ow {
                let src_base = (oy * ow + ox) * row_len + ky * k * cin;
                for kx in 0..k {
                    let sx = (ox * stride + kx) as isize - pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy * w + sx as usize) * cin;
                    let src = src_base + kx * cin;
                    for c in 0..cin {
                        xs[dst + c] = xs[dst + c] + ds[src + c];
                    }
                }
            }
        }
    }
    dx
}

/// `cols . w + b`, reshaped to `(oh, ow, c_out)`.
pub fn conv_forward<F: NdFloat>(
    cols: &Array2<F>,
    w: ArrayView2<F>,
    b: ArrayView1<F>,
    oh: usize,
    ow: usize,
) -> Array3<F> {
    let mut y = cols.dot(&w);
    y += &b;
    y.into_shape_with_order((oh, ow, w.ncols()))
        .expect("GEMM output is contiguous")
}

/// Weight and bias gradients of the convolution GEMM. `dy_flat` is the
/// upstream gradient flattened to `(oh * ow, c_out)`.
pub fn conv_backward_params<F: NdFloat>(
    cols: &Array2<F>,
    dy_flat: &Array2<F>,
) -> (Array2<F>, Array1<F>) {
    let dw = cols.t().dot(dy_flat);
    let db = dy_flat.sum_axis(Axis(0));
    (dw, db)
}

/// Patch-matrix gradient; feed through [`col2im`] for the input gradient.
pub fn conv_backward_input<F: NdFloat>(w: ArrayView2<F>, dy_flat: &Array2<F>) -> Array2<F> {
    dy_flat.dot(&w.t())
}

pub fn conv_backward<F: NdFloat>(
    cols: &Array2<F>,
    w: ArrayView2<F>,
    dy_flat: &Array2<F>,
) -> (Array2<F>, Array1<F>, Array2<F>) {
    let (dw, db) = conv_backward_params(cols, dy_flat);
    (dw, db, conv_backward_input(w, dy_flat))
}

/// In-place ReLU; returns nothing, the activation doubles as the mask.
pub fn relu_inplace<F: NdFloat>(x: &mut Array3<F>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// Zero the gradient wherever the forward activation was clipped.
pub fn relu_backward_inplace<F: NdFloat>(dy: &mut Array3<F>, activated: &Array3<F>) {
    ndarray::Zip::from(dy).and(activated).for_each(|g, a| {
        if *a <= F::zero() {
            *g = F::zero();
        }
    });
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped
/// (single-row/column inputs keep one output cell). Returns the flat argmax
/// index per output cell for the backward pass.
pub fn maxpool2<F: NdFloat>(x: &Array3<F>) -> (Array3<F>, Vec<u32>) {
    let (h, w, c) = x.dim();
    let oh = (h / 2).max(1);
    let ow = (w / 2).max(1);
    let xs = x.as_slice().expect("input is standard layout");
    let mut y = Array3::zeros((oh, ow, c));
    let ys = y.as_slice_mut().expect("fresh allocation");
    let mut argmax = vec![0u32; oh * ow * c];
    for oy in 0..oh {
        let y0 = oy * 2;
        let y1 = (y0 + 2).min(h);
        for ox in 0..ow {
            let x0 = ox * 2;
            let x1 = (x0 + 2).min(w);
            let out_base = (oy * ow + ox) * c;
            for sy in y0..y1 {
                for sx in x0..x1 {
                    let src_base = (sy * w + sx) * c;
                    if sy == y0 && sx == x0 {
                        ys[out_base..out_base + c]
                            .copy_from_slice(&xs[src_base..src_base + c]);
                        for ch in 0..c {
                            argmax[out_base + ch] = (src_base + ch) as u32;
                        }
                    } else {
                        for ch in 0..c {
                            let v = xs[src_base + ch];
                            if v > ys[out_base + ch] {
                                ys[out_base + ch] = v;
                                argmax[out_base + ch] = (src_base + ch) as u32;
                            }
                        }
                    }
                }
            }
        }
    }
    (y, argmax)
}

pub fn maxpool2_backward<F: NdFloat>(
    dy: &Array3<F>,
    argmax: &[u32],
    in_shape: (usize, usize, usize),
) -> Array3<F> {
    let mut dx = Array3::zeros(in_shape);
    let flat = dx.as_slice_mut().expect("freshly allocated is contiguous");
    for (g, idx) in dy.iter().zip(argmax) {
        flat[*idx as usize] = flat[*idx as usize] + *g;
    }
    dx
}

/// Spatial mean per channel.
pub fn global_avg_pool<F: NdFloat>(x: &Array3<F>) -> Array1<F> {
    let (h, w, c) = x.dim();
    let scale = F::one() / F::from(h * w).unwrap();
    let mut out = Array1::zeros(c);
    for ch in 0..c {
        let mut sum = F::zero();
        for y in 0..h {
            for xx in 0..w {
                sum = sum + x[[y, xx, ch]];
            }
        }
        out[ch] = sum * scale;
    }
    out
}

pub fn global_avg_pool_backward<F: NdFloat>(
    dfeat: ArrayView1<F>,
    in_shape: (usize, usize, usize),
) -> Array3<F> {
    let (h, w, c) = in_shape;
    let scale = F::one() / F::from(h * w).unwrap();
    let mut dx = Array3::zeros(in_shape);
    for ch in 0..c {
        let g = dfeat[ch] * scale;
        for y in 0..h {
            for xx in 0..w {
                dx[[y, xx, ch]] = g;
            }
        }
    }
    dx
}

/// Row-wise softmax with the usual max-shift for stability.
pub fn softmax_rows<F: NdFloat>(logits: &mut Array2<F>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Mean categorical cross-entropy over the batch plus the logit gradient
/// `(p - onehot) / batch`, which backs softmax and loss out in one step.
pub fn cross_entropy<F: NdFloat>(probs: &Array2<F>, labels: &[usize]) -> (f64, Array2<F>) {
    let batch = labels.len();
    let tiny = F::from(1e-12).unwrap();
    let scale = F::one() / F::from(batch).unwrap();
    let mut loss = 0.0f64;
    let mut dlogits = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        let p = probs[[i, label]].max(tiny);
        loss -= p.ln().to_f64().unwrap();
        dlogits[[i, label]] = dlogits[[i, label]] - F::one();
    }
    dlogits.mapv_inplace(|v| v * scale);
    (loss / batch as f64, dlogits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array3};

    fn small_input() -> Array3<f64> {
        Array3::from_shape_fn((5, 6, 2), |(y, x, c)| {
            ((y * 31 + x * 17 + c * 7) % 11) as f64 / 11.0 - 0.4
        })
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), d> == <x, col2im(d)> for random d: the defining
        // property of the transpose.
        let x = small_input();
        let (cols, _) = im2col(&x, 3, 2, 1);
        let d = Array2::from_shape_fn(cols.dim(), |(i, j)| ((i * 13 + j * 5) % 7) as f64 - 3.0);
        let lhs: f64 = (&cols * &d).sum();
        let back = col2im(&d, x.dim(), 3, 2, 1);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_matches_direct_computation() {
        let x = small_input();
        let (k, stride, pad) = (3, 1, 1);
        let w = Array2::from_shape_fn((k * k * 2, 4), |(i, j)| {
            ((i * 7 + j * 3) % 9) as f64 / 9.0 - 0.5
        });
        let b = arr1(&[0.1, -0.2, 0.0, 0.3]);
        let (cols, (oh, ow)) = im2col(&x, k, stride, pad);
        let y = conv_forward(&cols, w.view(), b.view(), oh, ow);

        // Direct nested-loop convolution as the oracle.
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..4 {
                    let mut acc = b[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = oy as isize + ky as isize - pad as isize;
                            let sx = ox as isize + kx as isize - pad as isize;
                            if sy < 0 || sx < 0 || sy >= 5 || sx >= 6 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += x[[sy as usize, sx as usize, ci]]
                                    * w[[(ky * k + kx) * 2 + ci, co]];
                            }
                        }
                    }
                    assert!((y[[oy, ox, co]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = small_input();
        let (k, stride, pad) = (3, 2, 1);
        let mut w = Array2::from_shape_fn((k * k * 2, 3), |(i, j)| {
            ((i * 11 + j * 5) % 13) as f64 / 13.0 - 0.5
        });
        let b = arr1(&[0.05, -0.1, 0.2]);

        // Scalar objective: sum of squares of the conv output.
        let objective = |w: &Array2<f64>, x: &Array3<f64>| -> f64 {
            let (cols, (oh, ow)) = im2col(x, k, stride, pad);
            let y = conv_forward(&cols, w.view(), b.view(), oh, ow);
            y.iter().map(|v| v * v).sum::<f64>() * 0.5
        };

        let (cols, (oh, ow)) = im2col(&x, k, stride, pad);
        let y = conv_forward(&cols, w.view(), b.view(), oh, ow);
        let dy_flat = y
            .clone()
            .into_shape_with_order((oh * ow, 3))
            .unwrap();
        let (dw, _db, dcols) = conv_backward(&cols, w.view(), &dy_flat);
        let dx = col2im(&dcols, x.dim(), k, stride, pad);

        let h = 1e-6;
        for &(i, j) in &[(0usize, 0usize), (5, 1), (17, 2), (9, 0)] {
            let orig = w[[i, j]];
            w[[i, j]] = orig + h;
            let up = objective(&w, &x);
            w[[i, j]] = orig - h;
            let down = objective(&w, &x);
            w[[i, j]] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - dw[[i, j]]).abs() / fd.abs().max(1.0) < 1e-5,
                "dW[{i},{j}]: fd {fd} vs analytic {}",
                dw[[i, j]]
            );
        }
        let mut x2 = x.clone();
        for &(y0, x0, c0) in &[(0usize, 0usize, 0usize), (2, 3, 1), (4, 5, 0)] {
            let orig = x2[[y0, x0, c0]];
            x2[[y0, x0, c0]] = orig + h;
            let up = objective(&w, &x2);
            x2[[y0, x0, c0]] = orig - h;
            let down = objective(&w, &x2);
            x2[[y0, x0, c0]] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - dx[[y0, x0, c0]]).abs() / fd.abs().max(1.0) < 1e-5,
                "dX[{y0},{x0},{c0}]: fd {fd} vs analytic {}",
                dx[[y0, x0, c0]]
            );
        }
    }

    #[test]
    fn maxpool_selects_maxima_and_routes_gradient() {
        let mut x = Array3::zeros((4, 4, 1));
        for y in 0..4 {
            for xx in 0..4 {
                x[[y, xx, 0]] = (y * 4 + xx) as f64;
            }
        }
        let (y, argmax) = maxpool2(&x);
        assert_eq!(y.dim(), (2, 2, 1));
        assert_eq!(y[[0, 0, 0]], 5.0);
        assert_eq!(y[[1, 1, 0]], 15.0);

        let mut dy = Array3::zeros((2, 2, 1));
        dy[[0, 0, 0]] = 1.0;
        dy[[1, 1, 0]] = 2.0;
        let dx = maxpool2_backward(&dy, &argmax, x.dim());
        assert_eq!(dx[[1, 1, 0]], 1.0);
        assert_eq!(dx[[3, 3, 0]], 2.0);
        assert_eq!(dx.sum(), 3.0);
    }

    #[test]
    fn maxpool_handles_odd_and_unit_dims() {
        let x = Array3::from_shape_fn((5, 1, 2), |(y, _, c)| (y + c) as f64);
        let (y, argmax) = maxpool2(&x);
        assert_eq!(y.dim(), (2, 1, 2));
        let dx = maxpool2_backward(&y, &argmax, x.dim());
        assert_eq!(dx.dim(), x.dim());
    }

    #[test]
    fn gap_is_mean_and_backward_spreads() {
        let x = small_input();
        let f = global_avg_pool(&x);
        assert!((f[0] - x.index_axis(ndarray::Axis(2), 0).mean().unwrap()).abs() < 1e-12);
        let mut dfeat = Array1::<f64>::zeros(2);
        dfeat[1] = 30.0;
        let dx = global_avg_pool_backward(dfeat.view(), x.dim());
        assert!((dx[[0, 0, 1]] - 1.0).abs() < 1e-12);
        assert_eq!(dx[[0, 0, 0]], 0.0);
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut logits = arr2(&[[1.0f64, 2.0, 3.0], [1000.0, 1000.0, 1000.0]]);
        softmax_rows(&mut logits);
        for row in logits.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
        assert!((logits[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = arr2(&[[0.3f64, -0.7, 0.1], [1.2, 0.4, -0.2]]);
        let labels = [2usize, 0];
        let loss_of = |l: &Array2<f64>| -> f64 {
            let mut p = l.clone();
            softmax_rows(&mut p);
            let (loss, _) = cross_entropy(&p, &labels);
            loss
        };
        let mut probs = logits.clone();
        softmax_rows(&mut probs);
        let (_, dlogits) = cross_entropy(&probs, &labels);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut up = logits.clone();
                up[[i, j]] += h;
                let mut down = logits.clone();
                down[[i, j]] -= h;
                let fd = (loss_of(&up) - loss_of(&down)) / (2.0 * h);
                assert!(
                    (fd - dlogits[[i, j]]).abs() < 1e-6,
                    "dlogits[{i},{j}]: fd {fd} vs {}",
                    dlogits[[i, j]]
                );
            }
        }
    }
}
