//! Minimal reverse-mode autodiff over `ndarray`, just big enough for the
//! networks and losses in this crate.
//!
//! A [`Graph`] records operations eagerly; [`Graph::backward`] walks the tape
//! in reverse. Nodes whose ancestors contain no gradient-requiring leaf are
//! pruned from the backward pass, so frozen-network forwards cost nothing at
//! backprop time. Generic over `f32`/`f64`: training runs in `f32`, while
//! gradient checks and loss oracles run in `f64`.

mod conv;
mod norm;

pub use conv::Conv2dSpec;
pub use norm::NormMode;

use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

/// Element type the engine runs on.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::LinalgScalar
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// Backward function: given the gradient at this node, emit gradient
/// contributions to parents through the sink callback.
type BackFn<T> = Box<dyn Fn(&ArrayD<T>, &mut dyn FnMut(usize, ArrayD<T>))>;

struct Node<T: Scalar> {
    value: Rc<ArrayD<T>>,
    needs_grad: bool,
    backward: Option<BackFn<T>>,
}

/// Gradients keyed by node id, produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that participates in gradient computation.
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, true, None)
    }

    /// Leaf excluded from gradient computation (inputs, frozen weights).
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn value_rc(&self, v: Var) -> Rc<ArrayD<T>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// Scalar value of a 0-dim or single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "scalar() on node with {} elements", a.len());
        *a.iter().next().unwrap()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: ArrayD<T>, needs_grad: bool, backward: Option<BackFn<T>>) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            needs_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an op node. `needs_grad` is inherited from the parents listed
    /// inside the backward closure; callers pass it explicitly because only
    /// they know which inputs are differentiable.
    pub(crate) fn op(&mut self, value: ArrayD<T>, needs_grad: bool, backward: BackFn<T>) -> Var {
        if needs_grad {
            self.push(value, true, Some(backward))
        } else {
            // Nothing upstream wants gradients; drop the closure.
            self.push(value, false, None)
        }
    }

    /// Reverse pass from a scalar loss node. Gradients of intermediate nodes
    /// are freed as soon as they have been propagated; leaf gradients are
    /// kept and returned.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(back) = self.nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            back(&g, &mut |pid, contrib| {
                debug_assert!(pid < id, "backward edge must point to an earlier node");
                if !self.nodes[pid].needs_grad {
                    return;
                }
                match &mut grads[pid] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            });
        }
        Gradients { grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = &*va + &*vb;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.op(
            out,
            needs,
            Box::new(move |g, emit| {
                emit(a.0, g.clone());
                emit(b.0, g.clone());
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = &*va - &*vb;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.op(
            out,
            needs,
            Box::new(move |g, emit| {
                emit(a.0, g.clone());
                emit(b.0, g.mapv(|x| -x));
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = &*va * &*vb;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.op(
            out,
            needs,
            Box::new(move |g, emit| {
                emit(a.0, g * &*vb);
                emit(b.0, g * &*va);
            }),
        )
    }

    /// Elementwise `scale * x + shift` with compile-time constants.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let vx = self.value_rc(x);
        let out = vx.mapv(|v| scale * v + shift);
        let needs = self.needs_grad(x);
        self.op(
            out,
            needs,
            Box::new(move |g, emit| emit(x.0, g.mapv(|v| v * scale))),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value_rc(x);
        let out = vx.mapv(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs_grad(x);
        let vx2 = Rc::clone(&vx);
        self.op(
            out,
            needs,
            Box::new(move |g, emit| {
                let mut gx = g.clone();
                gx.zip_mut_with(&vx2, |gv, &xv| {
                    if xv <= T::zero() {
                        *gv = T::zero();
                    }
                });
                emit(x.0, gx);
            }),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let vx = self.value_rc(x);
        let out = vx.mapv(|v| if v > T::zero() { v } else { s * v });
        let needs = self.needs_grad(x);
        let vx2 = Rc::clone(&vx);
        self.op(
            out,
            needs,
            Box::new(move |g, emit| {
                let mut gx = g.clone();
                gx.zip_mut_with(&vx2, |gv, &xv| {
                    if xv <= T::zero() {
                        *gv = *gv * s;
                    }
                });
                emit(x.0, gx);
            }),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let vx = self.value_rc(x);
        let out = vx.mapv(|v| v.tanh());
        let needs = self.needs_grad(x);
        let out_rc = Rc::new(out);
        let out_for_back = Rc::clone(&out_rc);
        let value = (*out_rc).clone();
        self.op(
            value,
            needs,
            Box::new(move |g, emit| {
                let mut gx = g.clone();
                gx.zip_mut_with(&out_for_back, |gv, &yv| *gv = *gv * (T::one() - yv * yv));
                emit(x.0, gx);
            }),
        )
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let vx = self.value_rc(x);
        let out = vx.mapv(|v| v.abs());
        let needs = self.needs_grad(x);
        let vx2 = Rc::clone(&vx);
        self.op(
            out,
            needs,
            Box::new(move |g, emit| {
                let mut gx = g.clone();
                gx.zip_mut_with(&vx2, |gv, &xv| {
                    // Subgradient 0 at the kink.
                    *gv = if xv > T::zero() {
                        *gv
                    } else if xv < T::zero() {
                        -*gv
                    } else {
                        T::zero()
                    };
                });
                emit(x.0, gx);
            }),
        )
    }

    pub fn square(&mut self, x: Var) -> Var {
        let vx = self.value_rc(x);
        let out = vx.mapv(|v| v * v);
        let needs = self.needs_grad(x);
        let vx2 = Rc::clone(&vx);
        let two = T::from_f64(2.0);
        self.op(
            out,
            needs,
            Box::new(move |g, emit| {
                let mut gx = g.clone();
                gx.zip_mut_with(&vx2, |gv, &xv| *gv = *gv * two * xv);
                emit(x.0, gx);
            }),
        )
    }

    /// Elementwise max with a constant. Pass-through gradient where x > c.
    pub fn max_const(&mut self, x: Var, c: T) -> Var {
        let vx = self.value_rc(x);
        let out = vx.mapv(|v| v.max(c));
        let needs = self.needs_grad(x);
        let vx2 = Rc::clone(&vx);
        self.op(
            out,
            needs,
            Box::new(move |g, emit| {
                let mut gx = g.clone();
                gx.zip_mut_with(&vx2, |gv, &xv| {
                    if xv <= c {
                        *gv = T::zero();
                    }
                });
                emit(x.0, gx);
            }),
        )
    }

    // ---- reductions ----

    /// Mean over every element, producing a 0-dim scalar node.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let vx = self.value_rc(x);
        let n = T::from_f64(vx.len() as f64);
        let mean = vx.iter().fold(T::zero(), |acc, &v| acc + v) / n;
        let out = ArrayD::from_elem(IxDyn(&[]), mean);
        let needs = self.needs_grad(x);
        let shape = vx.raw_dim();
        self.op(
            out,
            needs,
            Box::new(move |g, emit| {
                let gv = g[[]] / n;
                emit(x.0, ArrayD::from_elem(shape.clone(), gv));
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let vx = self.value_rc(x);
        let sum = vx.iter().fold(T::zero(), |acc, &v| acc + v);
        let out = ArrayD::from_elem(IxDyn(&[]), sum);
        let needs = self.needs_grad(x);
        let shape = vx.raw_dim();
        self.op(
            out,
            needs,
            Box::new(move |g, emit| {
                let gv = g[[]];
                emit(x.0, ArrayD::from_elem(shape.clone(), gv));
            }),
        )
    }

    /// Weighted sum of scalar nodes: Σ cᵢ·xᵢ. The workhorse for assembling
    /// multi-task objectives; backward hands each term its own weight.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for (v, c) in terms {
            total = total + self.scalar(*v) * *c;
        }
        let needs = terms.iter().any(|(v, _)| self.needs_grad(*v));
        let captured: Vec<(usize, T)> = terms.iter().map(|(v, c)| (v.0, *c)).collect();
        self.op(
            ArrayD::from_elem(IxDyn(&[]), total),
            needs,
            Box::new(move |g, emit| {
                let gv = g[[]];
                for (id, c) in &captured {
                    emit(*id, ArrayD::from_elem(IxDyn(&[]), gv * *c));
                }
            }),
        )
    }

    // ---- linear algebra ----

    /// Fully connected layer: x [B,F] · wᵀ [F,O] + b [O] → [B,O].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let vx = self.value_rc(x);
        let vw = self.value_rc(w);
        let x2 = vx.view().into_dimensionality::<Ix2>().expect("linear: x must be [B,F]");
        let w2 = vw.view().into_dimensionality::<Ix2>().expect("linear: w must be [O,F]");
        assert_eq!(x2.shape()[1], w2.shape()[1], "linear shape mismatch");
        let mut out = x2.dot(&w2.t());
        if let Some(bv) = b {
            let vb = self.value_rc(bv);
            let b1 = vb.view().into_dimensionality::<Ix1>().expect("linear: b must be [O]");
            out += &b1;
        }
        let needs = self.needs_grad(x) || self.needs_grad(w) || b.map_or(false, |bv| self.needs_grad(bv));
        let needs_x = self.needs_grad(x);
        let needs_w = self.needs_grad(w);
        let needs_b = b.map(|bv| (bv.0, self.needs_grad(bv)));
        self.op(
            out.into_dyn(),
            needs,
            Box::new(move |g, emit| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                if needs_x {
                    let w2 = vw.view().into_dimensionality::<Ix2>().unwrap();
                    emit(x.0, g2.dot(&w2).into_dyn());
                }
                if needs_w {
                    let x2 = vx.view().into_dimensionality::<Ix2>().unwrap();
                    emit(w.0, g2.t().dot(&x2).into_dyn());
                }
                if let Some((bid, true)) = needs_b {
                    emit(bid, g2.sum_axis(Axis(0)).into_dyn());
                }
            }),
        )
    }

    // ---- structural ----

    /// Concatenate along the channel axis of [B,C,H,W] tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let va = self.value_rc(a);
        let vb = self.value_rc(b);
        let a4 = va.view().into_dimensionality::<Ix4>().expect("concat: a must be BCHW");
        let b4 = vb.view().into_dimensionality::<Ix4>().expect("concat: b must be BCHW");
        let ca = a4.shape()[1];
        let out = ndarray::concatenate(Axis(1), &[a4.view(), b4.view()]).expect("concat shapes");
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.op(
            out.into_dyn(),
            needs,
            Box::new(move |g, emit| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                emit(a.0, g4.slice(ndarray::s![.., ..ca, .., ..]).to_owned().into_dyn());
                emit(b.0, g4.slice(ndarray::s![.., ca.., .., ..]).to_owned().into_dyn());
            }),
        )
    }

    /// Mean over the spatial axes: [B,C,H,W] → [B,C].
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let vx = self.value_rc(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("gap: x must be BCHW");
        let (bsz, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        let n = T::from_f64((h * w) as f64);
        let mut out = ndarray::Array2::<T>::zeros((bsz, c));
        for bi in 0..bsz {
            for ci in 0..c {
                let mut s = T::zero();
                for v in x4.index_axis(Axis(0), bi).index_axis(Axis(0), ci).iter() {
                    s += *v;
                }
                out[[bi, ci]] = s / n;
            }
        }
        let needs = self.needs_grad(x);
        self.op(
            out.into_dyn(),
            needs,
            Box::new(move |g, emit| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = ndarray::Array4::<T>::zeros((bsz, c, h, w));
                for bi in 0..bsz {
                    for ci in 0..c {
                        let gv = g2[[bi, ci]] / n;
                        gx.slice_mut(ndarray::s![bi, ci, .., ..]).fill(gv);
                    }
                }
                emit(x.0, gx.into_dyn());
            }),
        )
    }

    /// Nearest-neighbor 2× upsampling of [B,C,H,W].
    pub fn nearest_upsample2(&mut self, x: Var) -> Var {
        use ndarray::parallel::prelude::*;
        let vx = self.value_rc(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("upsample: x must be BCHW");
        let (bsz, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        let mut out = ndarray::Array4::<T>::zeros((bsz, c, 2 * h, 2 * w));
        out.outer_iter_mut().into_par_iter().enumerate().for_each(|(bi, mut ob)| {
            for ci in 0..c {
                let src = x4.index_axis(Axis(0), bi);
                let src = src.index_axis(Axis(0), ci);
                let mut dst = ob.index_axis_mut(Axis(0), ci);
                let dst = dst.as_slice_mut().expect("contiguous");
                for y in 0..h {
                    let row = src.row(y);
                    let row = row.as_slice().expect("contiguous");
                    for dy in 0..2 {
                        let base = (2 * y + dy) * 2 * w;
                        let out_row = &mut dst[base..base + 2 * w];
                        for (xk, &v) in row.iter().enumerate() {
                            out_row[2 * xk] = v;
                            out_row[2 * xk + 1] = v;
                        }
                    }
                }
            }
        });
        let needs = self.needs_grad(x);
        self.op(
            out.into_dyn(),
            needs,
            Box::new(move |g, emit| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = ndarray::Array4::<T>::zeros((bsz, c, h, w));
                gx.outer_iter_mut().into_par_iter().enumerate().for_each(|(bi, mut gb)| {
                    for ci in 0..c {
                        let src = g4.index_axis(Axis(0), bi);
                        let src = src.index_axis(Axis(0), ci);
                        let mut dst = gb.index_axis_mut(Axis(0), ci);
                        for y in 0..h {
                            let r0 = src.row(2 * y);
                            let r0 = r0.as_slice().expect("contiguous");
                            let r1 = src.row(2 * y + 1);
                            let r1 = r1.as_slice().expect("contiguous");
                            let mut drow = dst.row_mut(y);
                            let drow = drow.as_slice_mut().expect("contiguous");
                            for xk in 0..w {
                                drow[xk] = r0[2 * xk] + r0[2 * xk + 1] + r1[2 * xk] + r1[2 * xk + 1];
                            }
                        }
                    }
                });
                emit(x.0, gx.into_dyn());
            }),
        )
    }

    /// 2×2 average pooling (stride 2) of [B,C,H,W]; H and W must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let vx = self.value_rc(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("avgpool: x must be BCHW");
        let (bsz, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let quarter = T::from_f64(0.25);
        let mut out = ndarray::Array4::<T>::zeros((bsz, c, h / 2, w / 2));
        for bi in 0..bsz {
            for ci in 0..c {
                for y in 0..h / 2 {
                    for xk in 0..w / 2 {
                        let s = x4[[bi, ci, 2 * y, 2 * xk]]
                            + x4[[bi, ci, 2 * y, 2 * xk + 1]]
                            + x4[[bi, ci, 2 * y + 1, 2 * xk]]
                            + x4[[bi, ci, 2 * y + 1, 2 * xk + 1]];
                        out[[bi, ci, y, xk]] = s * quarter;
                    }
                }
            }
        }
        let needs = self.needs_grad(x);
        self.op(
            out.into_dyn(),
            needs,
            Box::new(move |g, emit| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = ndarray::Array4::<T>::zeros((bsz, c, h, w));
                for bi in 0..bsz {
                    for ci in 0..c {
                        for y in 0..h / 2 {
                            for xk in 0..w / 2 {
                                let gv = g4[[bi, ci, y, xk]] * quarter;
                                gx[[bi, ci, 2 * y, 2 * xk]] = gv;
                                gx[[bi, ci, 2 * y, 2 * xk + 1]] = gv;
                                gx[[bi, ci, 2 * y + 1, 2 * xk]] = gv;
                                gx[[bi, ci, 2 * y + 1, 2 * xk + 1]] = gv;
                            }
                        }
                    }
                }
                emit(x.0, gx.into_dyn());
            }),
        )
    }

    // ---- classification / embedding heads ----

    /// Mean cross-entropy of logits [B,K] against integer labels, with a
    /// numerically stable log-softmax.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Var {
        let vl = self.value_rc(logits);
        let l2 = vl.view().into_dimensionality::<Ix2>().expect("ce: logits must be [B,K]");
        let (bsz, k) = (l2.shape()[0], l2.shape()[1]);
        assert_eq!(labels.len(), bsz, "ce: label count mismatch");
        assert!(labels.iter().all(|&y| y < k), "ce: label out of range");
        let bn = T::from_f64(bsz as f64);

        // softmax probabilities, cached for the backward pass
        let mut probs = ndarray::Array2::<T>::zeros((bsz, k));
        let mut loss = T::zero();
        for bi in 0..bsz {
            let row = l2.row(bi);
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ki in 0..k {
                let e = (row[ki] - m).exp();
                probs[[bi, ki]] = e;
                z += e;
            }
            for ki in 0..k {
                probs[[bi, ki]] = probs[[bi, ki]] / z;
            }
            loss += z.ln() + m - row[labels[bi]];
        }
        loss = loss / bn;

        let needs = self.needs_grad(logits);
        let labels = labels.to_vec();
        self.op(
            ArrayD::from_elem(IxDyn(&[]), loss),
            needs,
            Box::new(move |g, emit| {
                let gv = g[[]] / bn;
                let mut gl = probs.clone();
                for (bi, &y) in labels.iter().enumerate() {
                    gl[[bi, y]] -= T::one();
                }
                emit(logits.0, gl.mapv(|p| p * gv).into_dyn());
            }),
        )
    }

    /// Row-wise cosine similarity of two [B,E] matrices → [B]. Rows must be
    /// nonzero; the caller validates that before building the node.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let va = self.value_rc(a);
        let vb = self.value_rc(b);
        let a2 = va.view().into_dimensionality::<Ix2>().expect("cosine: a must be [B,E]");
        let b2 = vb.view().into_dimensionality::<Ix2>().expect("cosine: b must be [B,E]");
        assert_eq!(a2.shape(), b2.shape(), "cosine shape mismatch");
        let bsz = a2.shape()[0];
        let mut cos = ndarray::Array1::<T>::zeros(bsz);
        let mut na = ndarray::Array1::<T>::zeros(bsz);
        let mut nb = ndarray::Array1::<T>::zeros(bsz);
        for bi in 0..bsz {
            let (ra, rb) = (a2.row(bi), b2.row(bi));
            let dot = ra.dot(&rb);
            na[bi] = ra.dot(&ra).sqrt();
            nb[bi] = rb.dot(&rb).sqrt();
            assert!(
                na[bi] > T::zero() && nb[bi] > T::zero(),
                "cosine of zero-norm embedding"
            );
            cos[bi] = dot / (na[bi] * nb[bi]);
        }
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let needs_a = self.needs_grad(a);
        let needs_b = self.needs_grad(b);
        let cos_c = cos.clone();
        self.op(
            cos.into_dyn(),
            needs,
            Box::new(move |g, emit| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
                let e = a2.shape()[1];
                if needs_a {
                    let mut ga = ndarray::Array2::<T>::zeros((bsz, e));
                    for bi in 0..bsz {
                        let gv = g1[bi];
                        for ei in 0..e {
                            // d cos / d a = b/(|a||b|) − cos·a/|a|²
                            ga[[bi, ei]] = gv
                                * (b2[[bi, ei]] / (na[bi] * nb[bi])
                                    - cos_c[bi] * a2[[bi, ei]] / (na[bi] * na[bi]));
                        }
                    }
                    emit(a.0, ga.into_dyn());
                }
                if needs_b {
                    let mut gb = ndarray::Array2::<T>::zeros((bsz, e));
                    for bi in 0..bsz {
                        let gv = g1[bi];
                        for ei in 0..e {
                            gb[[bi, ei]] = gv
                                * (a2[[bi, ei]] / (na[bi] * nb[bi])
                                    - cos_c[bi] * b2[[bi, ei]] / (nb[bi] * nb[bi]));
                        }
                    }
                    emit(b.0, gb.into_dyn());
                }
            }),
        )
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite-difference checker used across the engine tests.

    use super::*;

    /// Compares analytic gradients against central differences at `probes`
    /// randomly chosen coordinates of each leaf. `build` must reconstruct the
    /// same scalar loss from the given leaf values each call.
    pub fn check<F>(leaves: &[ArrayD<f64>], probes: usize, seed: u64, tol: f64, build: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);

        let eval = |inputs: &[ArrayD<f64>]| -> (f64, Vec<Option<ArrayD<f64>>>) {
            let mut g = Graph::<f64>::new();
            let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
            let loss = build(&mut g, &vars);
            let grads = g.backward(loss);
            let gs = vars.iter().map(|v| grads.get(*v).cloned()).collect();
            (g.scalar(loss).to_f64(), gs)
        };

        let (_, analytic) = eval(leaves);
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let ga = analytic[li].as_ref().unwrap_or_else(|| panic!("no grad for leaf {li}"));
            for _ in 0..probes {
                let flat = rng.gen_range(0..leaf.len());
                let idx: Vec<usize> = {
                    // unravel flat index in row-major order
                    let mut rem = flat;
                    let mut out = vec![0usize; leaf.ndim()];
                    for (d, s) in leaf.shape().iter().enumerate().rev() {
                        out[d] = rem % s;
                        rem /= s;
                    }
                    out
                };
                let mut plus = leaves.to_vec();
                plus[li][idx.as_slice()] += h;
                let mut minus = leaves.to_vec();
                minus[li][idx.as_slice()] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = ga[idx.as_slice()];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom <= tol,
                    "leaf {li} idx {idx:?}: analytic {an} vs fd {fd}"
                );
            }
        }
    }
}
