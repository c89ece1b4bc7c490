//! Layer/parameter plumbing on top of the autodiff engine: a named parameter
//! store, conv/norm/linear layers, Gaussian init, and the Adam optimizer.
//! Training runs in `f32`.

use ndarray::{Array1, ArrayD, Ix1, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Conv2dSpec, Gradients, Graph, NormMode, Var};
use crate::error::{Error, Result};

/// Handle to an entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PId(usize);

pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f32>,
    /// Buffers (running statistics) are stored here too but never optimized.
    pub trainable: bool,
    pub adam_m: ArrayD<f32>,
    pub adam_v: ArrayD<f32>,
}

/// Named parameters plus per-graph leaf bindings. Each training stage opens a
/// fresh graph with [`ParamStore::begin_graph`]; repeated forwards of the same
/// network inside one graph share a single leaf so gradients accumulate.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    bindings: Vec<Option<(Var, bool)>>, // per-entry: (var, frozen)
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: ArrayD<f32>) -> PId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: ArrayD<f32>) -> PId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: ArrayD<f32>, trainable: bool) -> PId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let shape = value.raw_dim();
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
            adam_m: ArrayD::zeros(shape.clone()),
            adam_v: ArrayD::zeros(shape),
        });
        self.bindings.push(None);
        PId(self.entries.len() - 1)
    }

    pub fn get(&self, id: PId) -> &ArrayD<f32> {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: PId, value: ArrayD<f32>) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape());
        self.entries[id.0].value = value;
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    /// Total number of scalars across trainable parameters.
    pub fn n_trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Drops leaf bindings from the previous graph. Call once per stage,
    /// before the first forward that uses this store.
    pub fn begin_graph(&mut self) {
        for b in &mut self.bindings {
            *b = None;
        }
    }

    /// Binds a parameter into the graph: a gradient-carrying leaf normally, a
    /// constant when `frozen`. Rebinding inside one graph returns the cached
    /// leaf so fan-out accumulates correctly.
    pub fn bind(&mut self, g: &mut Graph<f32>, id: PId, frozen: bool) -> Var {
        if let Some((var, was_frozen)) = self.bindings[id.0] {
            assert_eq!(
                was_frozen, frozen,
                "parameter {} bound both frozen and trainable in one graph",
                self.entries[id.0].name
            );
            return var;
        }
        let value = self.entries[id.0].value.clone();
        let var = if frozen { g.constant(value) } else { g.leaf(value) };
        self.bindings[id.0] = Some((var, frozen));
        var
    }

    /// FNV-1a over every entry's name, flag, and value bits. Any parameter or
    /// buffer change alters the hash; used to prove stage isolation.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            eat(&[e.trainable as u8]);
            for v in e.value.iter() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Draws an `N(0, std)` tensor; the standard init for this generator family.
pub fn gaussian_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<f32> {
    let normal = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng) as f32)
}

pub struct Conv2d {
    pub w: PId,
    pub b: Option<PId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_param(format!("{name}.w"), gaussian_init(rng, &[cout, cin, k, k], 0.02));
        let b = bias.then(|| store.add_param(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout]))));
        Self {
            w,
            b,
            spec: Conv2dSpec { stride, pad },
        }
    }

    pub fn forward(&self, g: &mut Graph<f32>, store: &mut ParamStore, x: Var, frozen: bool) -> Var {
        let w = store.bind(g, self.w, frozen);
        let b = self.b.map(|b| store.bind(g, b, frozen));
        g.conv2d(x, w, b, self.spec)
    }
}

pub struct BatchNorm2d {
    pub gamma: PId,
    pub beta: PId,
    pub running_mean: PId,
    pub running_var: PId,
    /// Batches folded into the running statistics so far. The effective
    /// momentum is max(0.1, 1/(n+1)): cumulative averaging warms the stats up
    /// instantly on short runs, then a 0.1 EMA forgets stale early-training
    /// statistics on long ones.
    pub batches_seen: PId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add_param(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[c]), 1.0)),
            beta: store.add_param(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c]))),
            running_mean: store.add_buffer(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[c]))),
            running_var: store.add_buffer(format!("{name}.running_var"), ArrayD::from_elem(IxDyn(&[c]), 1.0)),
            batches_seen: store.add_buffer(format!("{name}.batches_seen"), ArrayD::zeros(IxDyn(&[1]))),
            eps: 1e-5,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        store: &mut ParamStore,
        x: Var,
        mode: NormMode,
        frozen: bool,
    ) -> Var {
        let gamma = store.bind(g, self.gamma, frozen);
        let beta = store.bind(g, self.beta, frozen);
        let mut rm = store
            .get(self.running_mean)
            .clone()
            .into_dimensionality::<Ix1>()
            .expect("running mean is 1-d");
        let mut rv = store
            .get(self.running_var)
            .clone()
            .into_dimensionality::<Ix1>()
            .expect("running var is 1-d");
        let n = store.get(self.batches_seen)[[0]] as f64;
        let momentum = (1.0 / (n + 1.0)).max(0.1);
        let y = g.batch_norm2d(x, gamma, beta, &mut rm, &mut rv, mode, self.eps, momentum);
        if mode == NormMode::Train {
            store.set(self.running_mean, rm.into_dyn());
            store.set(self.running_var, rv.into_dyn());
            store.set(self.batches_seen, ArrayD::from_elem(IxDyn(&[1]), (n + 1.0) as f32));
        }
        y
    }
}

pub struct Linear {
    pub w: PId,
    pub b: Option<PId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_param(
            format!("{name}.w"),
            gaussian_init(rng, &[out_features, in_features], 0.02),
        );
        let b = bias
            .then(|| store.add_param(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_features]))));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph<f32>, store: &mut ParamStore, x: Var, frozen: bool) -> Var {
        let w = store.bind(g, self.w, frozen);
        let b = self.b.map(|b| store.bind(g, b, frozen));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over one store's bound parameters. Moment buffers live inside the
/// store entries so they checkpoint together with the weights.
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, t: 0 }
    }

    /// Applies one update from the gradients of the current graph's bindings,
    /// then clears the bindings. Parameters bound frozen are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients<f32>) -> Result<()> {
        self.t += 1;
        let b1 = self.cfg.beta1 as f32;
        let b2 = self.cfg.beta2 as f32;
        let lr = self.cfg.lr as f32;
        let eps = self.cfg.eps as f32;
        let bc1 = 1.0 - (self.cfg.beta1.powi(self.t as i32)) as f32;
        let bc2 = 1.0 - (self.cfg.beta2.powi(self.t as i32)) as f32;

        for (idx, binding) in store.bindings.iter().enumerate() {
            let Some((var, frozen)) = *binding else { continue };
            if frozen {
                continue;
            }
            let Some(grad) = grads.get(var) else { continue };
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {}",
                    store.entries[idx].name
                )));
            }
            let e = &mut store.entries[idx];
            debug_assert!(e.trainable, "gradient for non-trainable entry {}", e.name);
            ndarray::Zip::from(&mut e.adam_m)
                .and(&mut e.adam_v)
                .and(&mut e.value)
                .and(grad)
                .for_each(|m, v, w, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
        store.begin_graph();
        Ok(())
    }
}

/// Numerically checks a forward result before it is trusted downstream.
pub fn ensure_finite(a: &ArrayD<f32>, what: &str) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what} contains NaN/Inf")));
    }
    Ok(())
}

/// Convenience: 1-d array from an f32 slice.
pub fn arr1(v: &[f32]) -> Array1<f32> {
    Array1::from_vec(v.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn adam_reduces_quadratic() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = store.add_param("p", gaussian_init(&mut rng, &[4], 1.0));
        let mut adam = Adam::new(AdamConfig::with_lr(0.05));
        let mut last = f32::INFINITY;
        for _ in 0..200 {
            store.begin_graph();
            let mut g = Graph::<f32>::new();
            let v = store.bind(&mut g, p, false);
            let s = g.square(v);
            let loss = g.mean_all(s);
            last = g.scalar(loss);
            let grads = g.backward(loss);
            adam.step(&mut store, &grads).unwrap();
        }
        assert!(last < 1e-3, "loss {last} did not shrink");
    }

    #[test]
    fn rebinding_shares_leaf_and_accumulates() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = store.add_param("p", gaussian_init(&mut rng, &[3], 1.0));
        store.begin_graph();
        let mut g = Graph::<f32>::new();
        let v1 = store.bind(&mut g, p, false);
        let v2 = store.bind(&mut g, p, false);
        assert_eq!(v1, v2);
        // loss = sum(p*p) via two bindings; grad must be 2p.
        let m = g.mul(v1, v2);
        let loss = g.sum_all(m);
        let grads = g.backward(loss);
        let got = grads.get(v1).unwrap();
        for (gv, pv) in got.iter().zip(store.get(p).iter()) {
            assert!((gv - 2.0 * pv).abs() < 1e-6);
        }
    }

    #[test]
    fn frozen_binding_gets_no_update() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = store.add_param("p", gaussian_init(&mut rng, &[3], 1.0));
        let before = store.get(p).clone();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        store.begin_graph();
        let mut g = Graph::<f32>::new();
        let v = store.bind(&mut g, p, true);
        let s = g.square(v);
        let loss = g.mean_all(s);
        let grads = g.backward(loss);
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(p), &before);
    }

    #[test]
    fn content_hash_tracks_changes() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let p = store.add_param("p", gaussian_init(&mut rng, &[5], 1.0));
        let h0 = store.content_hash();
        assert_eq!(h0, store.content_hash());
        let mut v = store.get(p).clone();
        v[[0]] += 1e-7;
        store.set(p, v);
        assert_ne!(h0, store.content_hash());
    }
}
