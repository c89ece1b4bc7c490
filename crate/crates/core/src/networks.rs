//! The four trainable networks — generator T, patch discriminators D,
//! auxiliary password predictor Q, face recognizer F — plus the versioned
//! checkpoint container that persists them.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array4, ArrayD, Ix2, Ix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NormMode, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, BatchNorm2d, Conv2d, Linear, ParamStore, ensure_finite};
use crate::password::{validate_bits, Password};

// ---------------------------------------------------------------------------
// configs
// ---------------------------------------------------------------------------

/// Resnet-style generator. Input is the image concatenated with the password
/// plane (3+N channels); output is a 3-channel image of the same size,
/// bounded by a final tanh. Upsampling is nearest-neighbor resize followed by
/// convolution, which avoids checkerboard artifacts from strided deconvs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub n_residual_blocks: usize,
    pub base_channels: usize,
    pub password_bits: usize,
}

impl GeneratorConfig {
    /// Full-scale configuration from the original setting.
    pub fn paper() -> Self {
        Self {
            image_size: 128,
            n_residual_blocks: 9,
            base_channels: 64,
            password_bits: 16,
        }
    }

    /// Reduced configuration that trains on commodity CPUs.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            n_residual_blocks: 4,
            base_channels: 12,
            password_bits: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // password_bits == 0 builds the unconditioned variant used by the
        // baseline deanonymizers (same trunk, no password plane).
        if self.password_bits != 0 {
            validate_bits(self.password_bits)?;
        }
        if self.image_size < 16 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "generator image_size must be a multiple of 4 and at least 16, got {}",
                self.image_size
            )));
        }
        if self.base_channels == 0 || self.n_residual_blocks == 0 {
            return Err(Error::Config("generator channels/blocks must be positive".into()));
        }
        Ok(())
    }
}

/// PatchGAN discriminator stack. With stride-2/stride-2/stride-1/stride-1
/// 4x4 convolutions the score grid for input size S is S/4 - 2.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub base_channels: usize,
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            base_channels: 12,
        }
    }

    /// Score-grid side length for a given input side length.
    pub fn grid_size(input: usize) -> usize {
        // conv4x4 s2 p1 twice, then conv4x4 s1 p1 twice
        let s = input / 2 / 2;
        s - 2
    }

    pub fn validate(&self) -> Result<()> {
        // The coarse path sees a 2x downsample, which must still survive the
        // four convolutions.
        if Self::grid_size(self.image_size / 2) < 1 {
            return Err(Error::Config(format!(
                "discriminator image_size {} too small for the patch stack",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Auxiliary password predictor: PatchGAN-style trunk over the concatenated
/// (input, transformed) pair, average pooling, then N/4 parallel 16-way heads.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AuxNetConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub password_bits: usize,
}

impl AuxNetConfig {
    pub fn n_heads(&self) -> usize {
        self.password_bits / 4
    }

    pub fn validate(&self) -> Result<()> {
        validate_bits(self.password_bits)
    }
}

/// Small convolutional classifier with a plain softmax head; the penultimate
/// linear output is the embedding used for verification and dissimilarity.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RecognizerConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl RecognizerConfig {
    pub fn desk(num_classes: usize) -> Self {
        Self {
            image_size: 64,
            base_channels: 16,
            embed_dim: 64,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "recognizer needs at least 2 identities, got {}",
                self.num_classes
            )));
        }
        if self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "recognizer image_size must be divisible by 16, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// generator
// ---------------------------------------------------------------------------

struct ResBlock {
    c1: Conv2d,
    b1: BatchNorm2d,
    c2: Conv2d,
    b2: BatchNorm2d,
}

pub struct Generator {
    pub cfg: GeneratorConfig,
    pub store: ParamStore,
    head: Conv2d,
    head_bn: BatchNorm2d,
    down1: Conv2d,
    down1_bn: BatchNorm2d,
    down2: Conv2d,
    down2_bn: BatchNorm2d,
    res: Vec<ResBlock>,
    up1: Conv2d,
    up1_bn: BatchNorm2d,
    up2: Conv2d,
    up2_bn: BatchNorm2d,
    out: Conv2d,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.base_channels;
        let in_ch = 3 + cfg.password_bits;
        let head = Conv2d::new(&mut store, "head", in_ch, d, 7, 1, 3, true, &mut rng);
        let head_bn = BatchNorm2d::new(&mut store, "head_bn", d);
        let down1 = Conv2d::new(&mut store, "down1", d, 2 * d, 3, 2, 1, true, &mut rng);
        let down1_bn = BatchNorm2d::new(&mut store, "down1_bn", 2 * d);
        let down2 = Conv2d::new(&mut store, "down2", 2 * d, 4 * d, 3, 2, 1, true, &mut rng);
        let down2_bn = BatchNorm2d::new(&mut store, "down2_bn", 4 * d);
        let res = (0..cfg.n_residual_blocks)
            .map(|i| ResBlock {
                c1: Conv2d::new(&mut store, &format!("res{i}.c1"), 4 * d, 4 * d, 3, 1, 1, true, &mut rng),
                b1: BatchNorm2d::new(&mut store, &format!("res{i}.b1"), 4 * d),
                c2: Conv2d::new(&mut store, &format!("res{i}.c2"), 4 * d, 4 * d, 3, 1, 1, true, &mut rng),
                b2: BatchNorm2d::new(&mut store, &format!("res{i}.b2"), 4 * d),
            })
            .collect();
        let up1 = Conv2d::new(&mut store, "up1", 4 * d, 2 * d, 3, 1, 1, true, &mut rng);
        let up1_bn = BatchNorm2d::new(&mut store, "up1_bn", 2 * d);
        let up2 = Conv2d::new(&mut store, "up2", 2 * d, d, 3, 1, 1, true, &mut rng);
        let up2_bn = BatchNorm2d::new(&mut store, "up2_bn", d);
        let out = Conv2d::new(&mut store, "out", d, 3, 7, 1, 3, true, &mut rng);
        Ok(Self {
            cfg,
            store,
            head,
            head_bn,
            down1,
            down1_bn,
            down2,
            down2_bn,
            res,
            up1,
            up1_bn,
            up2,
            up2_bn,
            out,
        })
    }

    fn validate_input(&self, shape: &[usize], n_pw: usize) -> Result<()> {
        let s = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Config(format!(
                "generator expects [B,3,{s},{s}] input, got {shape:?}"
            )));
        }
        if self.cfg.password_bits == 0 {
            if n_pw != 0 {
                return Err(Error::Config(
                    "unconditioned generator takes an empty password slice".into(),
                ));
            }
        } else if shape[0] != n_pw {
            return Err(Error::Config(format!(
                "batch of {} images but {} passwords",
                shape[0], n_pw
            )));
        }
        Ok(())
    }

    /// One transformer pass T_p(x). `image` may be any graph node (chained
    /// passes feed a previous output back in); the password plane enters as a
    /// constant.
    pub fn forward(
        &mut self,
        g: &mut Graph<f32>,
        image: Var,
        passwords: &[Password],
        mode: NormMode,
        frozen: bool,
    ) -> Result<Var> {
        self.validate_input(g.value(image).shape(), passwords.len())?;
        for p in passwords {
            if p.n_bits() != self.cfg.password_bits {
                return Err(Error::Config(format!(
                    "password has {} bits, model expects {}",
                    p.n_bits(),
                    self.cfg.password_bits
                )));
            }
        }
        let s = self.cfg.image_size;
        let n = self.cfg.password_bits;
        let x = if n == 0 {
            image
        } else {
            let bsz = passwords.len();
            let mut plane = Array4::<f32>::zeros((bsz, n, s, s));
            for (bi, p) in passwords.iter().enumerate() {
                for (ci, v) in p.centered().into_iter().enumerate() {
                    plane.slice_mut(ndarray::s![bi, ci, .., ..]).fill(v);
                }
            }
            let plane = g.constant(plane.into_dyn());
            g.concat_channels(image, plane)
        };

        let st = &mut self.store;
        let mut h = self.head.forward(g, st, x, frozen);
        h = self.head_bn.forward(g, st, h, mode, frozen);
        h = g.relu(h);
        h = self.down1.forward(g, st, h, frozen);
        h = self.down1_bn.forward(g, st, h, mode, frozen);
        h = g.relu(h);
        h = self.down2.forward(g, st, h, frozen);
        h = self.down2_bn.forward(g, st, h, mode, frozen);
        h = g.relu(h);
        for rb in &self.res {
            let skip = h;
            let mut r = rb.c1.forward(g, st, h, frozen);
            r = rb.b1.forward(g, st, r, mode, frozen);
            r = g.relu(r);
            r = rb.c2.forward(g, st, r, frozen);
            r = rb.b2.forward(g, st, r, mode, frozen);
            h = g.add(skip, r);
        }
        h = g.nearest_upsample2(h);
        h = self.up1.forward(g, st, h, frozen);
        h = self.up1_bn.forward(g, st, h, mode, frozen);
        h = g.relu(h);
        h = g.nearest_upsample2(h);
        h = self.up2.forward(g, st, h, frozen);
        h = self.up2_bn.forward(g, st, h, mode, frozen);
        h = g.relu(h);
        h = self.out.forward(g, st, h, frozen);
        Ok(g.tanh(h))
    }

    /// Deterministic inference on a batch: eval-mode statistics, no graph
    /// kept, output checked finite.
    pub fn infer(&mut self, images: &Array4<f32>, passwords: &[Password]) -> Result<Array4<f32>> {
        self.store.begin_graph();
        let mut g = Graph::<f32>::new();
        let x = g.constant(images.clone().into_dyn());
        let y = self.forward(&mut g, x, passwords, NormMode::Eval, true)?;
        let out = g.value(y).clone();
        ensure_finite(&out, "generator output")?;
        self.store.begin_graph();
        Ok(out.into_dimensionality::<Ix4>().expect("generator output is 4-d"))
    }

    /// Single-image convenience over [`Generator::infer`].
    pub fn infer_one(&mut self, image: &ndarray::Array3<f32>, p: &Password) -> Result<ndarray::Array3<f32>> {
        let batch = image.clone().insert_axis(ndarray::Axis(0));
        let out = self.infer(&batch, std::slice::from_ref(p))?;
        Ok(out.index_axis(ndarray::Axis(0), 0).to_owned())
    }
}

// ---------------------------------------------------------------------------
// discriminators
// ---------------------------------------------------------------------------

/// Which fine discriminator a fake image belongs to. The coarse discriminator
/// is shared across all three streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FakeKind {
    Anonymized,
    Reconstructed,
    WrongRecovery,
}

pub struct PatchHead {
    c1: Conv2d,
    c2: Conv2d,
    bn2: BatchNorm2d,
    c3: Conv2d,
    bn3: BatchNorm2d,
    c4: Conv2d,
}

impl PatchHead {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha12Rng) -> Self {
        Self {
            c1: Conv2d::new(store, &format!("{name}.c1"), 3, d, 4, 2, 1, true, rng),
            c2: Conv2d::new(store, &format!("{name}.c2"), d, 2 * d, 4, 2, 1, true, rng),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), 2 * d),
            c3: Conv2d::new(store, &format!("{name}.c3"), 2 * d, 4 * d, 4, 1, 1, true, rng),
            bn3: BatchNorm2d::new(store, &format!("{name}.bn3"), 4 * d),
            c4: Conv2d::new(store, &format!("{name}.c4"), 4 * d, 1, 4, 1, 1, true, rng),
        }
    }

    fn forward(
        &self,
        g: &mut Graph<f32>,
        store: &mut ParamStore,
        x: Var,
        mode: NormMode,
        frozen: bool,
    ) -> Var {
        let mut h = self.c1.forward(g, store, x, frozen);
        h = g.leaky_relu(h, 0.2);
        h = self.c2.forward(g, store, h, frozen);
        h = self.bn2.forward(g, store, h, mode, frozen);
        h = g.leaky_relu(h, 0.2);
        h = self.c3.forward(g, store, h, frozen);
        h = self.bn3.forward(g, store, h, mode, frozen);
        h = g.leaky_relu(h, 0.2);
        self.c4.forward(g, store, h, frozen)
    }
}

/// One coarse patch discriminator shared across streams (fed a 2x average
/// downsample) plus three full-resolution fine discriminators.
pub struct DiscriminatorSet {
    pub cfg: DiscriminatorConfig,
    pub store: ParamStore,
    coarse: PatchHead,
    fine_anon: PatchHead,
    fine_rec: PatchHead,
    fine_wr: PatchHead,
}

impl DiscriminatorSet {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.base_channels;
        Ok(Self {
            coarse: PatchHead::new(&mut store, "coarse", d, &mut rng),
            fine_anon: PatchHead::new(&mut store, "fine_anon", d, &mut rng),
            fine_rec: PatchHead::new(&mut store, "fine_rec", d, &mut rng),
            fine_wr: PatchHead::new(&mut store, "fine_wr", d, &mut rng),
            cfg,
            store,
        })
    }

    fn validate_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Config(format!(
                "discriminator expects [B,3,{s},{s}] input, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Scores from the stream-specific fine discriminator at full resolution.
    pub fn forward_fine(
        &mut self,
        g: &mut Graph<f32>,
        kind: FakeKind,
        x: Var,
        mode: NormMode,
        frozen: bool,
    ) -> Result<Var> {
        self.validate_input(g.value(x).shape())?;
        let head = match kind {
            FakeKind::Anonymized => &self.fine_anon,
            FakeKind::Reconstructed => &self.fine_rec,
            FakeKind::WrongRecovery => &self.fine_wr,
        };
        Ok(head.forward(g, &mut self.store, x, mode, frozen))
    }

    /// Scores from the shared coarse discriminator; the 2x downsample happens
    /// inside so callers always hand over full-resolution images.
    pub fn forward_coarse(
        &mut self,
        g: &mut Graph<f32>,
        x: Var,
        mode: NormMode,
        frozen: bool,
    ) -> Result<Var> {
        self.validate_input(g.value(x).shape())?;
        let down = g.avg_pool2(x);
        Ok(self.coarse.forward(g, &mut self.store, down, mode, frozen))
    }
}

// ---------------------------------------------------------------------------
// auxiliary password predictor
// ---------------------------------------------------------------------------

pub struct AuxNet {
    pub cfg: AuxNetConfig,
    pub store: ParamStore,
    c1: Conv2d,
    c2: Conv2d,
    bn2: BatchNorm2d,
    c3: Conv2d,
    bn3: BatchNorm2d,
    heads: Vec<Linear>,
}

impl AuxNet {
    pub fn new(cfg: AuxNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.base_channels;
        let c1 = Conv2d::new(&mut store, "c1", 6, d, 4, 2, 1, true, &mut rng);
        let c2 = Conv2d::new(&mut store, "c2", d, 2 * d, 4, 2, 1, true, &mut rng);
        let bn2 = BatchNorm2d::new(&mut store, "bn2", 2 * d);
        let c3 = Conv2d::new(&mut store, "c3", 2 * d, 4 * d, 4, 1, 1, true, &mut rng);
        let bn3 = BatchNorm2d::new(&mut store, "bn3", 4 * d);
        let heads = (0..cfg.n_heads())
            .map(|i| Linear::new(&mut store, &format!("head{i}"), 4 * d, 16, true, &mut rng))
            .collect();
        Ok(Self {
            cfg,
            store,
            c1,
            c2,
            bn2,
            c3,
            bn3,
            heads,
        })
    }

    /// Q(I, T_pI): both images depthwise-concatenated, one 16-way logit
    /// vector per 4-bit chunk.
    pub fn forward(
        &mut self,
        g: &mut Graph<f32>,
        original: Var,
        transformed: Var,
        mode: NormMode,
        frozen: bool,
    ) -> Result<Vec<Var>> {
        let (so, st_) = (g.value(original).shape().to_vec(), g.value(transformed).shape().to_vec());
        if so != st_ {
            return Err(Error::Config(format!(
                "aux net input shapes differ: {so:?} vs {st_:?}"
            )));
        }
        if so.len() != 4 || so[1] != 3 || so[2] != self.cfg.image_size {
            return Err(Error::Config(format!(
                "aux net expects [B,3,{s},{s}] pairs, got {so:?}",
                s = self.cfg.image_size
            )));
        }
        let st = &mut self.store;
        let x = g.concat_channels(original, transformed);
        let mut h = self.c1.forward(g, st, x, frozen);
        h = g.leaky_relu(h, 0.2);
        h = self.c2.forward(g, st, h, frozen);
        h = self.bn2.forward(g, st, h, mode, frozen);
        h = g.leaky_relu(h, 0.2);
        h = self.c3.forward(g, st, h, frozen);
        h = self.bn3.forward(g, st, h, mode, frozen);
        h = g.leaky_relu(h, 0.2);
        let pooled = g.global_avg_pool(h);
        Ok(self.heads.iter().map(|head| head.forward(g, st, pooled, frozen)).collect())
    }
}

// ---------------------------------------------------------------------------
// face recognizer
// ---------------------------------------------------------------------------

/// Forward products of the recognizer: classification logits, the embedding,
/// and pooled per-block features (used by the perceptual-distance proxy).
pub struct RecognizerOutput {
    pub logits: Var,
    pub embedding: Var,
    pub block_features: Vec<Var>,
}

pub struct Recognizer {
    pub cfg: RecognizerConfig,
    pub store: ParamStore,
    blocks: Vec<(Conv2d, BatchNorm2d)>,
    fc_embed: Linear,
    fc_logits: Linear,
}

impl Recognizer {
    pub fn new(cfg: RecognizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.base_channels;
        let chans = [3, d, 2 * d, 4 * d, 8 * d];
        let blocks = (0..4)
            .map(|i| {
                (
                    Conv2d::new(&mut store, &format!("b{i}.conv"), chans[i], chans[i + 1], 3, 2, 1, true, &mut rng),
                    BatchNorm2d::new(&mut store, &format!("b{i}.bn"), chans[i + 1]),
                )
            })
            .collect();
        let fc_embed = Linear::new(&mut store, "fc_embed", 8 * d, cfg.embed_dim, true, &mut rng);
        let fc_logits = Linear::new(&mut store, "fc_logits", cfg.embed_dim, cfg.num_classes, true, &mut rng);
        Ok(Self {
            cfg,
            store,
            blocks,
            fc_embed,
            fc_logits,
        })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<f32>,
        x: Var,
        mode: NormMode,
        frozen: bool,
    ) -> Result<RecognizerOutput> {
        let shape = g.value(x).shape().to_vec();
        let s = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Config(format!(
                "recognizer expects [B,3,{s},{s}] input, got {shape:?}"
            )));
        }
        let st = &mut self.store;
        let mut h = x;
        let mut block_features = Vec::with_capacity(self.blocks.len());
        for (conv, bn) in &self.blocks {
            h = conv.forward(g, st, h, frozen);
            h = bn.forward(g, st, h, mode, frozen);
            h = g.relu(h);
            block_features.push(g.global_avg_pool(h));
        }
        let pooled = g.global_avg_pool(h);
        let embedding = self.fc_embed.forward(g, st, pooled, frozen);
        let act = g.relu(embedding);
        let logits = self.fc_logits.forward(g, st, act, frozen);
        Ok(RecognizerOutput {
            logits,
            embedding,
            block_features,
        })
    }

    /// Deterministic eval-mode embeddings for a batch.
    pub fn embed(&mut self, images: &Array4<f32>) -> Result<Array2<f32>> {
        let out = self.run_eval(images)?;
        Ok(out.0)
    }

    /// Eval-mode logits for a batch.
    pub fn classify(&mut self, images: &Array4<f32>) -> Result<Array2<f32>> {
        let out = self.run_eval(images)?;
        Ok(out.1)
    }

    /// Eval-mode (embedding, logits, block features).
    pub fn run_eval(&mut self, images: &Array4<f32>) -> Result<(Array2<f32>, Array2<f32>, Vec<Array2<f32>>)> {
        self.store.begin_graph();
        let mut g = Graph::<f32>::new();
        let x = g.constant(images.clone().into_dyn());
        let out = self.forward(&mut g, x, NormMode::Eval, true)?;
        let emb = g.value(out.embedding).clone();
        ensure_finite(&emb, "recognizer embedding")?;
        let logits = g.value(out.logits).clone();
        let feats = out
            .block_features
            .iter()
            .map(|f| g.value(*f).clone().into_dimensionality::<Ix2>().unwrap())
            .collect();
        self.store.begin_graph();
        Ok((
            emb.into_dimensionality::<Ix2>().unwrap(),
            logits.into_dimensionality::<Ix2>().unwrap(),
            feats,
        ))
    }
}

/// Supervised pretraining settings for the face classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Smallest acceptable top-1 train accuracy; below this the run errors.
    pub accuracy_floor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            accuracy_floor: 0.9,
        }
    }
}

/// Trains a recognizer from scratch on identity-labelled images. Returns the
/// classifier and its final top-1 train accuracy.
pub fn recognizer_pretrain(
    images: &Array4<f32>,
    labels: &[usize],
    rec_cfg: RecognizerConfig,
    cfg: &PretrainConfig,
) -> Result<(Recognizer, f64)> {
    rec_cfg.validate()?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y >= rec_cfg.num_classes) {
        return Err(Error::Data("label out of range for recognizer classes".into()));
    }
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::Data("empty pretraining dataset".into()));
    }
    let mut rec = Recognizer::new(rec_cfg, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    });
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x9e3779b97f4a7c15);
    for _ in 0..cfg.epochs {
        // deterministic shuffle per epoch
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch = gather_images(images, chunk);
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            rec.store.begin_graph();
            let mut g = Graph::<f32>::new();
            let x = g.constant(batch.into_dyn());
            let out = rec.forward(&mut g, x, NormMode::Train, false)?;
            let loss = g.cross_entropy_mean(out.logits, &ys);
            if !g.scalar(loss).is_finite() {
                return Err(Error::Numeric("pretraining loss is not finite".into()));
            }
            let grads = g.backward(loss);
            adam.step(&mut rec.store, &grads)?;
        }
    }
    // final train accuracy, eval mode
    let mut correct = 0usize;
    for chunk in (0..n).collect::<Vec<_>>().chunks(cfg.batch_size) {
        let batch = gather_images(images, chunk);
        let logits = rec.classify(&batch)?;
        for (row, &i) in logits.outer_iter().zip(chunk.iter()) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(k, _)| k)
                .unwrap();
            if pred == labels[i] {
                correct += 1;
            }
        }
    }
    let acc = correct as f64 / n as f64;
    if acc < cfg.accuracy_floor {
        return Err(Error::Data(format!(
            "pretrained recognizer accuracy {acc:.3} below floor {}",
            cfg.accuracy_floor
        )));
    }
    Ok((rec, acc))
}

/// Stacks the selected images into a contiguous batch.
pub fn gather_images(images: &Array4<f32>, idx: &[usize]) -> Array4<f32> {
    let (c, h, w) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    let mut out = Array4::<f32>::zeros((idx.len(), c, h, w));
    for (bi, &i) in idx.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&images.index_axis(ndarray::Axis(0), i));
    }
    out
}

// ---------------------------------------------------------------------------
// model bundle + checkpoints
// ---------------------------------------------------------------------------

/// Everything a training run owns: T, the D set, Q (absent under the no_aux
/// ablation), and the classifier F that is updated adversarially.
pub struct ModelBundle {
    pub generator: Generator,
    pub discriminators: DiscriminatorSet,
    pub aux: Option<AuxNet>,
    pub recognizer: Recognizer,
    pub step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BundleConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub aux: Option<AuxNetConfig>,
    pub recognizer: RecognizerConfig,
}

impl ModelBundle {
    pub fn new(cfg: &BundleConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            generator: Generator::new(cfg.generator.clone(), seed)?,
            discriminators: DiscriminatorSet::new(cfg.discriminator.clone(), seed ^ 0xd1)?,
            aux: match &cfg.aux {
                Some(a) => Some(AuxNet::new(a.clone(), seed ^ 0xa2)?),
                None => None,
            },
            recognizer: Recognizer::new(cfg.recognizer.clone(), seed ^ 0xf3)?,
            step: 0,
        })
    }

    pub fn config(&self) -> BundleConfig {
        BundleConfig {
            generator: self.generator.cfg.clone(),
            discriminator: self.discriminators.cfg.clone(),
            aux: self.aux.as_ref().map(|a| a.cfg.clone()),
            recognizer: self.recognizer.cfg.clone(),
        }
    }
}

pub mod checkpoint {
    //! Single-file binary container. Layout, in order:
    //!
    //! 1. magic bytes `b"FPCKPT01"` (8 bytes; the trailing two digits are the
    //!    format version),
    //! 2. `u64` little-endian header length in bytes,
    //! 3. UTF-8 JSON header: `{kind, configs, step, adam_t, tensors: [{name,
    //!    shape, trainable}]}` — tensor order in this list is the blob order,
    //! 4. blob: for each tensor record, `value`, `adam_m`, `adam_v` arrays
    //!    back to back, each as row-major little-endian f32 bit patterns.
    //!
    //! Loads reject wrong magic/version and truncated files; a round trip is
    //! bit-exact, so reloaded models produce identical inference outputs.

    use super::*;

    pub const MAGIC: &[u8; 8] = b"FPCKPT01";

    #[derive(Serialize, Deserialize)]
    struct TensorMeta {
        name: String,
        shape: Vec<usize>,
        trainable: bool,
    }

    #[derive(Serialize, Deserialize)]
    struct StoreMeta {
        prefix: String,
        tensors: Vec<TensorMeta>,
    }

    #[derive(Serialize, Deserialize)]
    struct Header {
        kind: String,
        configs: serde_json::Value,
        step: u64,
        adam_t: std::collections::BTreeMap<String, u64>,
        stores: Vec<StoreMeta>,
    }

    fn write_store(blob: &mut Vec<u8>, meta: &mut Vec<StoreMeta>, prefix: &str, store: &ParamStore) {
        let mut tensors = Vec::new();
        for e in store.entries() {
            tensors.push(TensorMeta {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
            });
            for arr in [&e.value, &e.adam_m, &e.adam_v] {
                for v in arr.iter() {
                    blob.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
        }
        meta.push(StoreMeta {
            prefix: prefix.to_string(),
            tensors,
        });
    }

    fn read_store(
        blob: &[u8],
        cursor: &mut usize,
        meta: &StoreMeta,
        store: &mut ParamStore,
    ) -> Result<()> {
        let entries = store.entries_mut();
        if entries.len() != meta.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "store {} has {} tensors, file lists {}",
                meta.prefix,
                entries.len(),
                meta.tensors.len()
            )));
        }
        for (e, t) in entries.iter_mut().zip(&meta.tensors) {
            if e.name != t.name || e.value.shape() != t.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: model has {} {:?}, file has {} {:?}",
                    e.name,
                    e.value.shape(),
                    t.name,
                    t.shape
                )));
            }
            for arr in [&mut e.value, &mut e.adam_m, &mut e.adam_v] {
                for v in arr.iter_mut() {
                    let end = *cursor + 4;
                    if end > blob.len() {
                        return Err(Error::Checkpoint("blob truncated".into()));
                    }
                    let bits = u32::from_le_bytes(blob[*cursor..end].try_into().unwrap());
                    *v = f32::from_bits(bits);
                    *cursor = end;
                }
            }
        }
        Ok(())
    }

    fn write_file(
        path: &Path,
        kind: &str,
        configs: serde_json::Value,
        step: u64,
        adam_t: std::collections::BTreeMap<String, u64>,
        stores: &[(&str, &ParamStore)],
    ) -> Result<()> {
        let mut blob = Vec::new();
        let mut meta = Vec::new();
        for (prefix, store) in stores {
            write_store(&mut blob, &mut meta, prefix, store);
        }
        let header = Header {
            kind: kind.to_string(),
            configs,
            step,
            adam_t,
            stores: meta,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        f.write_all(&blob)?;
        Ok(())
    }

    fn read_file(path: &Path, expect_kind: &str) -> Result<(Header, Vec<u8>)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic[..6] != &MAGIC[..6] {
            return Err(Error::Checkpoint(format!(
                "not a checkpoint file (bad magic {:?})",
                String::from_utf8_lossy(&magic)
            )));
        }
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {:?}, expected {:?}",
                String::from_utf8_lossy(&magic[6..]),
                String::from_utf8_lossy(&MAGIC[6..])
            )));
        }
        let mut len8 = [0u8; 8];
        f.read_exact(&mut len8)?;
        let hlen = u64::from_le_bytes(len8) as usize;
        let mut hbytes = vec![0u8; hlen];
        f.read_exact(&mut hbytes)?;
        let header: Header = serde_json::from_slice(&hbytes)
            .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
        if header.kind != expect_kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint kind {:?} where {:?} was expected",
                header.kind, expect_kind
            )));
        }
        let mut blob = Vec::new();
        f.read_to_end(&mut blob)?;
        Ok((header, blob))
    }

    /// Optimizer step counters carried alongside the bundle.
    #[derive(Debug, Clone, Default, Serialize, Deserialize)]
    pub struct AdamSteps {
        pub generator: u64,
        pub aux: u64,
        pub discriminators: u64,
        pub recognizer: u64,
    }

    pub fn save_bundle(path: &Path, bundle: &ModelBundle, adam: &AdamSteps) -> Result<()> {
        let mut stores: Vec<(&str, &ParamStore)> = vec![
            ("generator", &bundle.generator.store),
            ("discriminators", &bundle.discriminators.store),
            ("recognizer", &bundle.recognizer.store),
        ];
        if let Some(aux) = &bundle.aux {
            stores.push(("aux", &aux.store));
        }
        let adam_t = [
            ("generator".to_string(), adam.generator),
            ("aux".to_string(), adam.aux),
            ("discriminators".to_string(), adam.discriminators),
            ("recognizer".to_string(), adam.recognizer),
        ]
        .into_iter()
        .collect();
        let configs = serde_json::to_value(bundle.config())
            .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
        write_file(path, "bundle", configs, bundle.step, adam_t, &stores)
    }

    pub fn load_bundle(path: &Path) -> Result<(ModelBundle, AdamSteps)> {
        let (header, blob) = read_file(path, "bundle")?;
        let cfg: BundleConfig = serde_json::from_value(header.configs.clone())
            .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
        let mut bundle = ModelBundle::new(&cfg, 0)?;
        bundle.step = header.step;
        let mut cursor = 0usize;
        for meta in &header.stores {
            let store = match meta.prefix.as_str() {
                "generator" => &mut bundle.generator.store,
                "discriminators" => &mut bundle.discriminators.store,
                "recognizer" => &mut bundle.recognizer.store,
                "aux" => {
                    &mut bundle
                        .aux
                        .as_mut()
                        .ok_or_else(|| Error::Checkpoint("file has aux store but config lists none".into()))?
                        .store
                }
                other => return Err(Error::Checkpoint(format!("unknown store prefix {other:?}"))),
            };
            read_store(&blob, &mut cursor, meta, store)?;
        }
        if cursor != blob.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor blob".into()));
        }
        let adam = AdamSteps {
            generator: header.adam_t.get("generator").copied().unwrap_or(0),
            aux: header.adam_t.get("aux").copied().unwrap_or(0),
            discriminators: header.adam_t.get("discriminators").copied().unwrap_or(0),
            recognizer: header.adam_t.get("recognizer").copied().unwrap_or(0),
        };
        Ok((bundle, adam))
    }

    pub fn save_recognizer(path: &Path, rec: &Recognizer, adam_t: u64) -> Result<()> {
        let configs = serde_json::to_value(rec.cfg.clone())
            .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
        let adam = [("recognizer".to_string(), adam_t)].into_iter().collect();
        write_file(path, "recognizer", configs, 0, adam, &[("recognizer", &rec.store)])
    }

    pub fn load_recognizer(path: &Path) -> Result<Recognizer> {
        let (header, blob) = read_file(path, "recognizer")?;
        let cfg: RecognizerConfig = serde_json::from_value(header.configs.clone())
            .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
        let mut rec = Recognizer::new(cfg, 0)?;
        let mut cursor = 0usize;
        let meta = header
            .stores
            .first()
            .ok_or_else(|| Error::Checkpoint("recognizer checkpoint lists no store".into()))?;
        read_store(&blob, &mut cursor, meta, &mut rec.store)?;
        Ok(rec)
    }

    /// Bare generator checkpoint (the baseline deanonymizers).
    pub fn save_generator(path: &Path, gen: &Generator, step: u64, adam_t: u64) -> Result<()> {
        let configs = serde_json::to_value(gen.cfg.clone())
            .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
        let adam = [("generator".to_string(), adam_t)].into_iter().collect();
        write_file(path, "generator", configs, step, adam, &[("generator", &gen.store)])
    }

    pub fn load_generator(path: &Path) -> Result<Generator> {
        let (header, blob) = read_file(path, "generator")?;
        let cfg: GeneratorConfig = serde_json::from_value(header.configs.clone())
            .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
        let mut gen = Generator::new(cfg, 0)?;
        let mut cursor = 0usize;
        let meta = header
            .stores
            .first()
            .ok_or_else(|| Error::Checkpoint("generator checkpoint lists no store".into()))?;
        read_store(&blob, &mut cursor, meta, &mut gen.store)?;
        Ok(gen)
    }

    /// Corrupts-resistant write: serialize to a sibling temp file then rename.
    pub fn save_bundle_atomic(path: &Path, bundle: &ModelBundle, adam: &AdamSteps) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        save_bundle(&tmp, bundle, adam)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Converts an ArrayD image batch into Array4, validating rank.
pub fn as_batch(a: ArrayD<f32>) -> Result<Array4<f32>> {
    a.into_dimensionality::<Ix4>()
        .map_err(|_| Error::Config("expected a 4-d image batch".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn rand_images(b: usize, s: usize, seed: u64) -> Array4<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array4::from_shape_fn((b, 3, s, s), |_| rng.gen_range(-1.0f32..1.0))
    }

    fn rand_passwords(b: usize, n: usize, seed: u64) -> Vec<Password> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..b).map(|_| Password::sample(&mut rng, n).unwrap()).collect()
    }

    fn small_gen_cfg() -> GeneratorConfig {
        GeneratorConfig {
            image_size: 32,
            n_residual_blocks: 2,
            base_channels: 8,
            password_bits: 16,
        }
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let mut gen = Generator::new(small_gen_cfg(), 1).unwrap();
        let imgs = rand_images(2, 32, 2);
        let pws = rand_passwords(2, 16, 3);
        let out = gen.infer(&imgs, &pws).unwrap();
        assert_eq!(out.shape(), imgs.shape());
        assert!(out.iter().all(|v| (-1.0..=1.0).contains(v) && v.is_finite()));
    }

    #[test]
    fn generator_is_deterministic_in_eval() {
        let mut gen = Generator::new(small_gen_cfg(), 4).unwrap();
        let imgs = rand_images(1, 32, 5);
        let pws = rand_passwords(1, 16, 6);
        let a = gen.infer(&imgs, &pws).unwrap();
        let b = gen.infer(&imgs, &pws).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generator_range_bound_on_many_random_inputs() {
        let mut gen = Generator::new(small_gen_cfg(), 7).unwrap();
        for seed in 0..10 {
            let imgs = rand_images(10, 32, 100 + seed);
            let pws = rand_passwords(10, 16, 200 + seed);
            let out = gen.infer(&imgs, &pws).unwrap();
            assert!(out.iter().all(|v| (-1.0..=1.0).contains(v) && v.is_finite()));
        }
    }

    #[test]
    fn generator_rejects_bad_shapes_and_passwords() {
        let mut gen = Generator::new(small_gen_cfg(), 8).unwrap();
        let imgs = rand_images(2, 32, 9);
        let bad_pw = rand_passwords(2, 8, 10);
        assert!(matches!(gen.infer(&imgs, &bad_pw), Err(Error::Config(_))));
        let wrong_size = rand_images(2, 16, 11);
        let pws = rand_passwords(2, 16, 12);
        assert!(matches!(gen.infer(&wrong_size, &pws), Err(Error::Config(_))));
        assert!(matches!(
            gen.infer(&rand_images(1, 32, 13), &pws),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn discriminator_grid_sizes_follow_arithmetic() {
        assert_eq!(DiscriminatorConfig::grid_size(64), 14);
        assert_eq!(DiscriminatorConfig::grid_size(32), 6);
        assert_eq!(DiscriminatorConfig::grid_size(128), 30);

        let cfg = DiscriminatorConfig {
            image_size: 64,
            base_channels: 8,
        };
        let mut ds = DiscriminatorSet::new(cfg, 1).unwrap();
        let imgs = rand_images(2, 64, 14);
        let mut g = Graph::<f32>::new();
        let x = g.constant(imgs.clone().into_dyn());
        let fine = ds.forward_fine(&mut g, FakeKind::Anonymized, x, NormMode::Eval, true).unwrap();
        assert_eq!(g.value(fine).shape(), &[2, 1, 14, 14]);
        let coarse = ds.forward_coarse(&mut g, x, NormMode::Eval, true).unwrap();
        assert_eq!(g.value(coarse).shape(), &[2, 1, 6, 6]);
    }

    #[test]
    fn constant_zero_discriminator_scores_constant() {
        let cfg = DiscriminatorConfig {
            image_size: 32,
            base_channels: 8,
        };
        let mut ds = DiscriminatorSet::new(cfg, 2).unwrap();
        for e in ds.store.entries_mut() {
            e.value.fill(0.0);
        }
        let imgs = rand_images(2, 32, 15);
        let mut g = Graph::<f32>::new();
        let x = g.constant(imgs.into_dyn());
        let fine = ds.forward_fine(&mut g, FakeKind::Reconstructed, x, NormMode::Eval, true).unwrap();
        let vals = g.value(fine);
        let first = vals.iter().next().unwrap();
        assert!(vals.iter().all(|v| v == first));
    }

    #[test]
    fn aux_head_count_tracks_password_bits() {
        for (n, heads) in [(16usize, 4usize), (8, 2)] {
            let cfg = AuxNetConfig {
                image_size: 32,
                base_channels: 8,
                password_bits: n,
            };
            assert_eq!(cfg.n_heads(), heads);
            let mut aux = AuxNet::new(cfg, 3).unwrap();
            let a = rand_images(2, 32, 16);
            let b = rand_images(2, 32, 17);
            let mut g = Graph::<f32>::new();
            let va = g.constant(a.into_dyn());
            let vb = g.constant(b.into_dyn());
            let out = aux.forward(&mut g, va, vb, NormMode::Eval, true).unwrap();
            assert_eq!(out.len(), heads);
            for head in out {
                let logits = g.value(head);
                assert_eq!(logits.shape(), &[2, 16]);
                // softmax normalization check
                let l2 = logits.view().into_dimensionality::<Ix2>().unwrap();
                for row in l2.outer_iter() {
                    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let z: f32 = row.iter().map(|v| (v - m).exp()).sum();
                    let total: f32 = row.iter().map(|v| (v - m).exp() / z).sum();
                    assert!((total - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn recognizer_shapes_and_determinism() {
        let cfg = RecognizerConfig {
            image_size: 32,
            base_channels: 8,
            embed_dim: 16,
            num_classes: 5,
        };
        let mut rec = Recognizer::new(cfg, 4).unwrap();
        let imgs = rand_images(3, 32, 18);
        let e1 = rec.embed(&imgs).unwrap();
        let e2 = rec.embed(&imgs).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.shape(), &[3, 16]);
        let logits = rec.classify(&imgs).unwrap();
        assert_eq!(logits.shape(), &[3, 5]);
    }

    #[test]
    fn recognizer_rejects_single_identity() {
        let cfg = RecognizerConfig {
            image_size: 32,
            base_channels: 8,
            embed_dim: 16,
            num_classes: 1,
        };
        assert!(matches!(Recognizer::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn pretrain_separates_trivial_classes() {
        // Two "identities": one bright, one dark, plus tiny noise.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 24;
        let mut images = Array4::<f32>::zeros((n, 3, 32, 32));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % 2;
            let base = if y == 0 { 0.6 } else { -0.6 };
            let mut img = Array3::<f32>::from_elem((3, 32, 32), base);
            img.mapv_inplace(|v| v + rng.gen_range(-0.05..0.05));
            images.index_axis_mut(ndarray::Axis(0), i).assign(&img);
            labels.push(y);
        }
        let cfg = RecognizerConfig {
            image_size: 32,
            base_channels: 8,
            embed_dim: 16,
            num_classes: 2,
        };
        let pre = PretrainConfig {
            epochs: 6,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 1,
            accuracy_floor: 0.9,
        };
        let (_rec, acc) = recognizer_pretrain(&images, &labels, cfg, &pre).unwrap();
        assert!(acc >= 0.9, "accuracy {acc}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.ckpt");
        let cfg = BundleConfig {
            generator: small_gen_cfg(),
            discriminator: DiscriminatorConfig {
                image_size: 32,
                base_channels: 8,
            },
            aux: Some(AuxNetConfig {
                image_size: 32,
                base_channels: 8,
                password_bits: 16,
            }),
            recognizer: RecognizerConfig {
                image_size: 32,
                base_channels: 8,
                embed_dim: 16,
                num_classes: 4,
            },
        };
        let mut bundle = ModelBundle::new(&cfg, 42).unwrap();
        bundle.step = 77;
        let probe = rand_images(2, 32, 19);
        let pws = rand_passwords(2, 16, 20);
        let before = bundle.generator.infer(&probe, &pws).unwrap();
        let adam = checkpoint::AdamSteps {
            generator: 9,
            aux: 9,
            discriminators: 8,
            recognizer: 7,
        };
        checkpoint::save_bundle(&path, &bundle, &adam).unwrap();
        let (mut loaded, adam2) = checkpoint::load_bundle(&path).unwrap();
        assert_eq!(loaded.step, 77);
        assert_eq!(adam2.generator, 9);
        let after = loaded.generator.infer(&probe, &pws).unwrap();
        assert_eq!(before, after, "reloaded generator output differs");
        assert_eq!(
            bundle.generator.store.content_hash(),
            loaded.generator.store.content_hash()
        );
    }

    #[test]
    fn checkpoint_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.ckpt");
        assert!(matches!(checkpoint::load_bundle(&missing).err(), Some(Error::Io(_))));

        // wrong version digits in the magic
        let path = dir.path().join("old.ckpt");
        std::fs::write(&path, b"FPCKPT00junkjunkjunk").unwrap();
        match checkpoint::load_bundle(&path).err().expect("load must fail") {
            Error::Checkpoint(msg) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected version error, got {other}"),
        }

        // not a checkpoint at all
        let path2 = dir.path().join("garbage.ckpt");
        std::fs::write(&path2, b"PNGPNGPNGPNGPNGPNG").unwrap();
        match checkpoint::load_bundle(&path2).err().expect("load must fail") {
            Error::Checkpoint(msg) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected magic error, got {other}"),
        }
    }
}
