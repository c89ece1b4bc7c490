//! Batch normalization over [B,C,H,W], with running-statistics tracking.

use std::rc::Rc;

use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array4, Axis, Ix1, Ix4};
#[cfg(test)]
use ndarray::ArrayD;

use super::{Graph, Scalar, Var};

/// How a normalization layer treats statistics for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running stats updated. The normal training path.
    Train,
    /// Batch statistics, but running stats left untouched. Used when a frozen
    /// network is run inside the other player's stage.
    TrainFrozen,
    /// Running statistics; fully deterministic inference.
    Eval,
}

impl<T: Scalar> Graph<T> {
    /// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
    ///
    /// In the train modes, mean/var are computed over (B,H,W) with the biased
    /// variance; `running_*` buffers are updated with momentum 0.1 and the
    /// unbiased variance (standard convention) when mode is [`NormMode::Train`].
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Array1<T>,
        running_var: &mut Array1<T>,
        mode: NormMode,
        eps: f64,
        momentum: f64,
    ) -> Var {
        let vx = self.value_rc(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("bn: x must be BCHW");
        let (bsz, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        assert_eq!(running_mean.len(), c, "bn: running_mean length");
        assert_eq!(running_var.len(), c, "bn: running_var length");
        let vg = self.value_rc(gamma);
        let vb = self.value_rc(beta);
        let g1 = vg.view().into_dimensionality::<Ix1>().expect("bn: gamma must be [C]");
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("bn: beta must be [C]");
        let eps_t = T::from_f64(eps);
        let m = bsz * h * w;
        let m_t = T::from_f64(m as f64);

        let (mean, var) = match mode {
            NormMode::Train | NormMode::TrainFrozen => {
                let stats: Vec<(T, T)> = (0..c)
                    .into_par_iter()
                    .map(|ci| {
                        let mut s = T::zero();
                        for bi in 0..bsz {
                            for v in x4.index_axis(Axis(0), bi).index_axis(Axis(0), ci).iter() {
                                s += *v;
                            }
                        }
                        let mu = s / m_t;
                        let mut sq = T::zero();
                        for bi in 0..bsz {
                            for v in x4.index_axis(Axis(0), bi).index_axis(Axis(0), ci).iter() {
                                let d = *v - mu;
                                sq += d * d;
                            }
                        }
                        (mu, sq / m_t)
                    })
                    .collect();
                let mut mean = Array1::<T>::zeros(c);
                let mut var = Array1::<T>::zeros(c);
                for (ci, (mu, v)) in stats.into_iter().enumerate() {
                    mean[ci] = mu;
                    var[ci] = v;
                }
                if mode == NormMode::Train {
                    let mom = T::from_f64(momentum);
                    let keep = T::one() - mom;
                    let unbias = if m > 1 {
                        T::from_f64(m as f64 / (m as f64 - 1.0))
                    } else {
                        T::one()
                    };
                    for ci in 0..c {
                        running_mean[ci] = keep * running_mean[ci] + mom * mean[ci];
                        running_var[ci] = keep * running_var[ci] + mom * var[ci] * unbias;
                    }
                }
                (mean, var)
            }
            NormMode::Eval => (running_mean.clone(), running_var.clone()),
        };

        let invstd: Array1<T> = var.mapv(|v| T::one() / (v + eps_t).sqrt());
        let mut xhat = Array4::<T>::zeros((bsz, c, h, w));
        let mut out = Array4::<T>::zeros((bsz, c, h, w));
        xhat.outer_iter_mut()
            .into_par_iter()
            .zip(out.outer_iter_mut().into_par_iter())
            .enumerate()
            .for_each(|(bi, (mut xhb, mut ob))| {
                for ci in 0..c {
                    let (mu, is, ga, be) = (mean[ci], invstd[ci], g1[ci], b1[ci]);
                    let src = x4.index_axis(Axis(0), bi);
                    let src = src.index_axis(Axis(0), ci);
                    let mut xh = xhb.index_axis_mut(Axis(0), ci);
                    let mut oc = ob.index_axis_mut(Axis(0), ci);
                    ndarray::Zip::from(&mut xh).and(&mut oc).and(&src).for_each(|xh, oc, &v| {
                        let n = (v - mu) * is;
                        *xh = n;
                        *oc = ga * n + be;
                    });
                }
            });

        let needs_x = self.needs_grad(x);
        let needs_g = self.needs_grad(gamma);
        let needs_b = self.needs_grad(beta);
        let needs = needs_x || needs_g || needs_b;
        let xhat = Rc::new(xhat);
        let batch_stats = mode != NormMode::Eval;

        self.op(
            out.into_dyn(),
            needs,
            Box::new(move |g, emit| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let g1v = vg.view().into_dimensionality::<Ix1>().unwrap();
                // Per-channel reductions shared by all three gradients.
                let sums: Vec<(T, T)> = (0..c)
                    .into_par_iter()
                    .map(|ci| {
                        let mut sg = T::zero();
                        let mut sgx = T::zero();
                        for bi in 0..bsz {
                            let gb = g4.index_axis(Axis(0), bi);
                            let gb = gb.index_axis(Axis(0), ci);
                            let xh = xhat.index_axis(Axis(0), bi);
                            let xh = xh.index_axis(Axis(0), ci);
                            ndarray::Zip::from(&gb).and(&xh).for_each(|&gv, &xv| {
                                sg += gv;
                                sgx += gv * xv;
                            });
                        }
                        (sg, sgx)
                    })
                    .collect();
                let mut sum_g = Array1::<T>::zeros(c);
                let mut sum_gx = Array1::<T>::zeros(c);
                for (ci, (sg, sgx)) in sums.into_iter().enumerate() {
                    sum_g[ci] = sg;
                    sum_gx[ci] = sgx;
                }
                if needs_b {
                    emit(beta.0, sum_g.clone().into_dyn());
                }
                if needs_g {
                    emit(gamma.0, sum_gx.clone().into_dyn());
                }
                if needs_x {
                    let mut gx = Array4::<T>::zeros((bsz, c, h, w));
                    gx.outer_iter_mut().into_par_iter().enumerate().for_each(|(bi, mut gxb)| {
                        for ci in 0..c {
                            let scale = g1v[ci] * invstd[ci];
                            let mg = sum_g[ci] / m_t;
                            let mgx = sum_gx[ci] / m_t;
                            let gb = g4.index_axis(Axis(0), bi);
                            let gb = gb.index_axis(Axis(0), ci);
                            let xh = xhat.index_axis(Axis(0), bi);
                            let xh = xh.index_axis(Axis(0), ci);
                            let mut gxs = gxb.index_axis_mut(Axis(0), ci);
                            if batch_stats {
                                ndarray::Zip::from(&mut gxs).and(&gb).and(&xh).for_each(
                                    |o, &gv, &xv| {
                                        *o = scale * (gv - mg - xv * mgx);
                                    },
                                );
                            } else {
                                // Running statistics do not depend on x.
                                ndarray::Zip::from(&mut gxs).and(&gb).for_each(|o, &gv| {
                                    *o = scale * gv;
                                });
                            }
                        }
                    });
                    emit(x.0, gx.into_dyn());
                }
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check;
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn train_mode_normalizes_batch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(&[4, 3, 5, 5], 1));
        let gamma = g.constant(ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let beta = g.constant(ArrayD::from_elem(IxDyn(&[3]), 0.0));
        let mut rm = Array1::<f64>::zeros(3);
        let mut rv = Array1::<f64>::from_elem(3, 1.0);
        let y = g.batch_norm2d(x, gamma, beta, &mut rm, &mut rv, NormMode::Train, 1e-5, 0.1);
        let y4 = g.value(y).view().into_dimensionality::<Ix4>().unwrap();
        for ci in 0..3 {
            let vals: Vec<f64> = y4.slice(ndarray::s![.., ci, .., ..]).iter().cloned().collect();
            let n = vals.len() as f64;
            let mean: f64 = vals.iter().sum::<f64>() / n;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // Running statistics moved away from their init.
        assert!(rm.iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn frozen_mode_leaves_running_stats() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(&[2, 2, 4, 4], 2));
        let gamma = g.constant(ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let beta = g.constant(ArrayD::from_elem(IxDyn(&[2]), 0.0));
        let mut rm = Array1::<f64>::zeros(2);
        let mut rv = Array1::<f64>::from_elem(2, 1.0);
        g.batch_norm2d(x, gamma, beta, &mut rm, &mut rv, NormMode::TrainFrozen, 1e-5, 0.1);
        assert!(rm.iter().all(|&v| v == 0.0));
        assert!(rv.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grads_match_fd_train_and_eval() {
        for mode in [NormMode::Train, NormMode::Eval] {
            let x = randn(&[3, 2, 4, 4], 3);
            let gamma = randn(&[2], 4);
            let beta = randn(&[2], 5);
            check(&[x, gamma, beta], 8, 50, 1e-5, move |g, vs| {
                let mut rm = Array1::<f64>::from_vec(vec![0.1, -0.2]);
                let mut rv = Array1::<f64>::from_vec(vec![0.9, 1.1]);
                let y = g.batch_norm2d(vs[0], vs[1], vs[2], &mut rm, &mut rv, mode, 1e-5, 0.1);
                let t = g.tanh(y);
                let s = g.square(t);
                g.mean_all(s)
            });
        }
    }
}
