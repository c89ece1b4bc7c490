//! 2-D convolution via im2col + GEMM, parallelized over the batch axis.
//! The backward pass recomputes im2col instead of caching it; the column
//! buffers are far larger than the activations they derive from.

use ndarray::parallel::prelude::*;
use ndarray::{Array2, Array3, Array4, ArrayView3, Axis, Ix1, Ix4};
#[cfg(test)]
use ndarray::ArrayD;

use super::{Graph, Scalar, Var};

/// Stride/padding pair for a convolution. Kernel size comes from the weight
/// tensor `[C_out, C_in, kh, kw]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

fn im2col<T: Scalar>(x: &ArrayView3<T>, kh: usize, kw: usize, spec: Conv2dSpec) -> Array2<T> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = spec.out_size(h, kh);
    let wo = spec.out_size(w, kw);
    let mut col = Array2::<T>::zeros((cin * kh * kw, ho * wo));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut out_row = col.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of a column-space gradient back to input space.
fn col2im<T: Scalar>(
    colg: &Array2<T>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
) -> Array3<T> {
    let ho = spec.out_size(h, kh);
    let wo = spec.out_size(w, kw);
    let mut gx = Array3::<T>::zeros((cin, h, w));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let g_row = colg.row(row);
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[[ci, iy as usize, ix as usize]] += g_row[oy * wo + ox];
                    }
                }
            }
        }
    }
    gx
}

impl<T: Scalar> Graph<T> {
    /// Convolution of x `[B,C_in,H,W]` with w `[C_out,C_in,kh,kw]` and an
    /// optional bias `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let vx = self.value_rc(x);
        let vw = self.value_rc(w);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("conv2d: x must be BCHW");
        let w4 = vw.view().into_dimensionality::<Ix4>().expect("conv2d: w must be OIKK");
        let (bsz, cin, h, wdt) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        let (cout, wcin, kh, kw) = (w4.shape()[0], w4.shape()[1], w4.shape()[2], w4.shape()[3]);
        assert_eq!(cin, wcin, "conv2d: channel mismatch ({cin} vs {wcin})");
        let ho = spec.out_size(h, kh);
        let wo = spec.out_size(wdt, kw);
        assert!(ho > 0 && wo > 0, "conv2d: kernel larger than padded input");

        let w_mat = w4.to_shape((cout, cin * kh * kw)).expect("weights contiguous").to_owned();
        let bias = b.map(|bv| {
            self.value_rc(bv)
                .view()
                .into_dimensionality::<Ix1>()
                .expect("conv2d: bias must be [C_out]")
                .to_owned()
        });

        let mut out = Array4::<T>::zeros((bsz, cout, ho, wo));
        out.outer_iter_mut()
            .into_par_iter()
            .enumerate()
            .for_each(|(bi, mut ob)| {
                let col = im2col(&x4.index_axis(Axis(0), bi), kh, kw, spec);
                let prod = w_mat.dot(&col); // [C_out, Ho*Wo]
                for co in 0..cout {
                    let base = bias.as_ref().map_or(T::zero(), |bb| bb[co]);
                    let src = prod.row(co);
                    let mut dst = ob.index_axis_mut(Axis(0), co);
                    let dst_flat = dst.as_slice_mut().expect("contiguous out");
                    for (d, s) in dst_flat.iter_mut().zip(src.iter()) {
                        *d = *s + base;
                    }
                }
            });

        let needs_x = self.needs_grad(x);
        let needs_w = self.needs_grad(w);
        let needs_b = b.map(|bv| (bv.0, self.needs_grad(bv)));
        let needs = needs_x || needs_w || needs_b.map_or(false, |(_, n)| n);

        self.op(
            out.into_dyn(),
            needs,
            Box::new(move |g, emit| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
                let w4 = vw.view().into_dimensionality::<Ix4>().unwrap();
                let w_mat = w4.to_shape((cout, cin * kh * kw)).unwrap().to_owned();

                if needs_x {
                    let mut gx = Array4::<T>::zeros((bsz, cin, h, wdt));
                    gx.outer_iter_mut()
                        .into_par_iter()
                        .enumerate()
                        .for_each(|(bi, mut gxb)| {
                            let gb = g4
                                .index_axis(Axis(0), bi)
                                .to_shape((cout, ho * wo))
                                .unwrap()
                                .to_owned();
                            let colg = w_mat.t().dot(&gb); // [C_in*kh*kw, Ho*Wo]
                            let gi = col2im(&colg, cin, h, wdt, kh, kw, spec);
                            gxb.assign(&gi);
                        });
                    emit(x.0, gx.into_dyn());
                }
                if needs_w {
                    // Per-sample partials collected in batch order, then summed
                    // sequentially so the result is deterministic.
                    let partials: Vec<Array2<T>> = (0..bsz)
                        .into_par_iter()
                        .map(|bi| {
                            let col = im2col(&x4.index_axis(Axis(0), bi), kh, kw, spec);
                            let gb = g4
                                .index_axis(Axis(0), bi)
                                .to_shape((cout, ho * wo))
                                .unwrap()
                                .to_owned();
                            gb.dot(&col.t())
                        })
                        .collect();
                    let mut gw = Array2::<T>::zeros((cout, cin * kh * kw));
                    for p in partials {
                        gw += &p;
                    }
                    emit(w.0, gw.into_shape_with_order((cout, cin, kh, kw)).unwrap().into_dyn());
                }
                if let Some((bid, true)) = needs_b {
                    let mut gb = ndarray::Array1::<T>::zeros(cout);
                    for bi in 0..bsz {
                        for co in 0..cout {
                            let mut s = T::zero();
                            for v in g4.index_axis(Axis(0), bi).index_axis(Axis(0), co).iter() {
                                s += *v;
                            }
                            gb[co] += s;
                        }
                    }
                    emit(bid, gb.into_dyn());
                }
            }),
        )
    }
}

/// Reference convolution by direct summation, used only by tests as the
/// independent oracle for the GEMM path.
#[cfg(test)]
pub fn conv2d_reference<T: Scalar>(
    x: &Array4<T>,
    w: &Array4<T>,
    b: Option<&ndarray::Array1<T>>,
    spec: Conv2dSpec,
) -> Array4<T> {
    let (bsz, cin, h, wdt) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = spec.out_size(h, kh);
    let wo = spec.out_size(wdt, kw);
    let mut out = Array4::<T>::zeros((bsz, cout, ho, wo));
    for bi in 0..bsz {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(T::zero(), |bb| bb[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wdt as isize {
                                    continue;
                                }
                                acc += x[[bi, ci, iy as usize, ix as usize]]
                                    * w[[co, ci, ky, kx]];
                            }
                        }
                    }
                    out[[bi, co, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check;
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_reference() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 3, 7), (2, 1, 4), (1, 0, 1)] {
            let x = randn(&[2, 3, 8, 8], 100 + k as u64)
                .into_dimensionality::<Ix4>()
                .unwrap();
            let w = randn(&[4, 3, k, k], 200 + k as u64)
                .into_dimensionality::<Ix4>()
                .unwrap();
            let b = randn(&[4], 300).into_dimensionality::<ndarray::Ix1>().unwrap();
            let spec = Conv2dSpec { stride, pad };
            let mut g = Graph::<f64>::new();
            let vx = g.constant(x.clone().into_dyn());
            let vw = g.constant(w.clone().into_dyn());
            let vb = g.constant(b.clone().into_dyn());
            let y = g.conv2d(vx, vw, Some(vb), spec);
            let want = conv2d_reference(&x, &w, Some(&b), spec);
            let got = g.value(y).view().into_dimensionality::<Ix4>().unwrap();
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn grads_match_fd() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 1, 4)] {
            let x = randn(&[2, 2, 6, 6], 1);
            let w = randn(&[3, 2, k, k], 2);
            let b = randn(&[3], 3);
            check(&[x, w, b], 6, 40 + stride as u64, 1e-6, |g, vs| {
                let y = g.conv2d(vs[0], vs[1], Some(vs[2]), Conv2dSpec { stride, pad });
                let s = g.square(y);
                g.mean_all(s)
            });
        }
    }

    #[test]
    fn output_sizes_follow_layer_arithmetic() {
        let spec = Conv2dSpec { stride: 2, pad: 1 };
        assert_eq!(spec.out_size(64, 4), 32);
        assert_eq!(spec.out_size(64, 3), 32);
        let s1 = Conv2dSpec { stride: 1, pad: 1 };
        assert_eq!(s1.out_size(16, 4), 15);
        assert_eq!(s1.out_size(15, 4), 14);
    }
}
