//! The classical comparison anonymizers (superpixel, edge, blur, noise,
//! masked) and a generic learned deanonymizer for each: the same generator
//! trunk without password channels, trained with the reconstruction and
//! photo-realism losses only.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NormMode};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::imageio;
use crate::losses::{self, LossWeights};
use crate::networks::{
    checkpoint, DiscriminatorConfig, DiscriminatorSet, FakeKind, Generator, GeneratorConfig,
};
use crate::nn::{Adam, AdamConfig};
use crate::trainer::ImageBuffer;

/// The image-processing baselines. The learned anonymizer of the comparison
/// literature is reported as an external reference only, not reimplemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Superpixel,
    Edge,
    Blur,
    Noise,
    Masked,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Superpixel,
        BaselineKind::Edge,
        BaselineKind::Blur,
        BaselineKind::Noise,
        BaselineKind::Masked,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Superpixel => "superpixel",
            BaselineKind::Edge => "edge",
            BaselineKind::Blur => "blur",
            BaselineKind::Noise => "noise",
            BaselineKind::Masked => "masked",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "superpixel" => Ok(BaselineKind::Superpixel),
            "edge" => Ok(BaselineKind::Edge),
            "blur" => Ok(BaselineKind::Blur),
            "noise" => Ok(BaselineKind::Noise),
            "masked" => Ok(BaselineKind::Masked),
            other => Err(Error::Config(format!(
                "unknown baseline kind {other:?} (expected superpixel|edge|blur|noise|masked)"
            ))),
        }
    }
}

/// Tunables for the deterministic baselines.
pub const SUPERPIXEL_SEGMENTS: usize = 64;
pub const EDGE_THRESHOLD: f32 = 0.35;
pub const BLUR_SIZE: usize = 8;
pub const NOISE_VARIANCE: f64 = 0.5;
pub const MASK_FRACTION: f32 = 0.6;
/// Mid-gray in [-1,1]; a neutral fill that biases the deanonymizer toward
/// neither extreme.
pub const MASK_FILL: f32 = 0.0;

/// Applies one baseline anonymizer. `seed` only matters for the noise kind;
/// every other baseline is fully deterministic.
pub fn apply_baseline(kind: BaselineKind, image: &Array3<f32>, seed: u64) -> Array3<f32> {
    match kind {
        BaselineKind::Superpixel => superpixel(image, SUPERPIXEL_SEGMENTS),
        BaselineKind::Edge => edge_map(image, EDGE_THRESHOLD),
        BaselineKind::Blur => blur(image, BLUR_SIZE),
        BaselineKind::Noise => noise(image, NOISE_VARIANCE, seed),
        BaselineKind::Masked => masked(image, MASK_FRACTION, MASK_FILL),
    }
}

/// Simple linear iterative clustering: k-means over (RGB, weighted XY) seeded
/// on a regular grid, then every pixel takes its segment's mean RGB.
pub fn superpixel_segments(image: &Array3<f32>, n_segments: usize) -> Array2<usize> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let grid = (n_segments as f32).sqrt().round().max(1.0) as usize;
    let spatial_weight = 2.0f32 / (h.max(w) as f32);

    // centers: (r, g, b, x, y)
    let mut centers: Vec<[f32; 5]> = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let cy = ((gy as f32 + 0.5) * h as f32 / grid as f32) as usize;
            let cx = ((gx as f32 + 0.5) * w as f32 / grid as f32) as usize;
            centers.push([
                image[[0, cy, cx]],
                image[[1, cy, cx]],
                image[[2, cy, cx]],
                cx as f32,
                cy as f32,
            ]);
        }
    }

    let mut assign = Array2::<usize>::zeros((h, w));
    for _iter in 0..5 {
        for y in 0..h {
            for x in 0..w {
                let px = [
                    image[[0, y, x]],
                    image[[1, y, x]],
                    image[[2, y, x]],
                    x as f32,
                    y as f32,
                ];
                let mut best = (0usize, f32::INFINITY);
                for (ci, c) in centers.iter().enumerate() {
                    let mut d = 0.0;
                    for k in 0..3 {
                        d += (px[k] - c[k]).powi(2);
                    }
                    for k in 3..5 {
                        d += ((px[k] - c[k]) * spatial_weight).powi(2);
                    }
                    if d < best.1 {
                        best = (ci, d);
                    }
                }
                assign[[y, x]] = best.0;
            }
        }
        // recompute centers
        let mut acc = vec![[0.0f32; 6]; centers.len()];
        for y in 0..h {
            for x in 0..w {
                let a = &mut acc[assign[[y, x]]];
                a[0] += image[[0, y, x]];
                a[1] += image[[1, y, x]];
                a[2] += image[[2, y, x]];
                a[3] += x as f32;
                a[4] += y as f32;
                a[5] += 1.0;
            }
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                for k in 0..5 {
                    c[k] = a[k] / a[5];
                }
            }
        }
    }
    assign
}

fn superpixel(image: &Array3<f32>, n_segments: usize) -> Array3<f32> {
    let assign = superpixel_segments(image, n_segments);
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let n = assign.iter().max().map_or(1, |m| m + 1);
    let mut sums = vec![[0.0f64; 4]; n];
    for y in 0..h {
        for x in 0..w {
            let s = &mut sums[assign[[y, x]]];
            for c in 0..3 {
                s[c] += image[[c, y, x]] as f64;
            }
            s[3] += 1.0;
        }
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let s = &sums[assign[[y, x]]];
            for c in 0..3 {
                out[[c, y, x]] = (s[c] / s[3]) as f32;
            }
        }
    }
    out
}

/// Sobel gradient magnitude on the gray image, fixed threshold, white edges
/// on black, replicated to 3 channels.
fn edge_map(image: &Array3<f32>, threshold: f32) -> Array3<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let gray = |y: usize, x: usize| -> f32 {
        (image[[0, y, x]] + image[[1, y, x]] + image[[2, y, x]]) / 3.0
    };
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = Array3::<f32>::from_elem((3, h, w), -1.0);
    for y in 0..h {
        for x in 0..w {
            let g = |dy: isize, dx: isize| gray(clamp(y as isize + dy, h), clamp(x as isize + dx, w));
            let gx = (g(-1, 1) + 2.0 * g(0, 1) + g(1, 1)) - (g(-1, -1) + 2.0 * g(0, -1) + g(1, -1));
            let gy = (g(1, -1) + 2.0 * g(1, 0) + g(1, 1)) - (g(-1, -1) + 2.0 * g(-1, 0) + g(-1, 1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag > threshold {
                for c in 0..3 {
                    out[[c, y, x]] = 1.0;
                }
            }
        }
    }
    out
}

/// Downsample to `size`×`size` (area averaging) then back up: extreme low
/// resolution destroys everything but coarse structure.
fn blur(image: &Array3<f32>, size: usize) -> Array3<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let tiny = imageio::resize_area(image, size, size);
    imageio::resize_bilinear(&tiny, h, w)
}

/// Additive Gaussian noise with the given variance, clamped to [-1,1].
fn noise(image: &Array3<f32>, variance: f64, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, variance.sqrt()).expect("valid sigma");
    let mut out = image.clone();
    out.mapv_inplace(|v| (v + normal.sample(&mut rng) as f32).clamp(-1.0, 1.0));
    out
}

/// Constant fill over the central square covering `fraction` of each side.
fn masked(image: &Array3<f32>, fraction: f32, fill: f32) -> Array3<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mh = (h as f32 * fraction).round() as usize;
    let mw = (w as f32 * fraction).round() as usize;
    let y0 = (h - mh) / 2;
    let x0 = (w - mw) / 2;
    let mut out = image.clone();
    out.slice_mut(ndarray::s![.., y0..y0 + mh, x0..x0 + mw]).fill(fill);
    out
}

// ---------------------------------------------------------------------------
// learned deanonymizers
// ---------------------------------------------------------------------------

/// Training settings for one baseline's deanonymizer. The generator is the
/// password-free variant of the main transformer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BaselineTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub buffer_capacity: usize,
    pub seed: u64,
    pub image_size: usize,
    pub base_channels: usize,
    pub n_residual_blocks: usize,
    pub disc_base_channels: usize,
    pub rec_weight: f64,
}

impl Default for BaselineTrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            epochs: 15,
            batch_size: 12,
            learning_rate: 1e-4,
            buffer_capacity: 500,
            seed: 0,
            image_size: 64,
            base_channels: 16,
            n_residual_blocks: 4,
            disc_base_channels: 16,
            rec_weight: w.rec,
        }
    }
}

impl BaselineTrainConfig {
    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            image_size: self.image_size,
            n_residual_blocks: self.n_residual_blocks,
            base_channels: self.base_channels,
            password_bits: 0,
        }
    }
}

pub struct BaselineDeanonymizer {
    pub kind: BaselineKind,
    pub generator: Generator,
    pub discriminators: DiscriminatorSet,
    pub step: u64,
}

/// Anonymizes every image with the baseline (noise gets a per-image seed so
/// the corrupted corpus is fixed across epochs, like stored footage).
pub fn anonymize_dataset(kind: BaselineKind, images: &Array4<f32>, seed: u64) -> Array4<f32> {
    let mut out = images.clone();
    for (i, img) in images.axis_iter(Axis(0)).enumerate() {
        let a = apply_baseline(kind, &img.to_owned(), seed ^ (i as u64).wrapping_mul(0x9e37));
        out.index_axis_mut(Axis(0), i).assign(&a);
    }
    out
}

/// Trains a deanonymizer to invert one baseline using reconstruction plus
/// LSGAN photo-realism, reusing the reconstruction-stream discriminators.
pub fn train_baseline_deanonymizer(
    kind: BaselineKind,
    cfg: &BaselineTrainConfig,
    data: &Dataset,
    out_dir: &Path,
) -> Result<BaselineTrainOutcome> {
    if data.is_empty() {
        return Err(Error::Data("baseline training dataset is empty".into()));
    }
    if data.images.shape()[2] != cfg.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}px but config trains at {}px",
            data.images.shape()[2],
            cfg.image_size
        )));
    }
    if cfg.batch_size < 2 || cfg.buffer_capacity < cfg.batch_size {
        return Err(Error::Config("batch_size >= 2 and buffer >= batch required".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let corrupted = anonymize_dataset(kind, &data.images, cfg.seed);

    let mut gen = Generator::new(cfg.generator_config(), cfg.seed)?;
    let mut disc = DiscriminatorSet::new(
        DiscriminatorConfig {
            image_size: cfg.image_size,
            base_channels: cfg.disc_base_channels,
        },
        cfg.seed ^ 0xd1,
    )?;
    let mut opt_g = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut opt_d = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut buffer = ImageBuffer::new(cfg.buffer_capacity);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let weights = LossWeights {
        rec: cfg.rec_weight,
        ..Default::default()
    };

    let log_path = out_dir.join(format!("{}_deanon_log.csv", kind.name()));
    let mut log = String::from("step,d_lsgan,g_rec,g_gan,g_total\n");

    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    for _epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks_exact(cfg.batch_size) {
            let real = crate::networks::gather_images(&data.images, chunk);
            let corrupt = crate::networks::gather_images(&corrupted, chunk);

            // D stage
            gen.store.begin_graph();
            let fakes = {
                let mut g = Graph::<f32>::new();
                let x = g.constant(corrupt.clone().into_dyn());
                let y = gen.forward(&mut g, x, &[], NormMode::TrainFrozen, true)?;
                let v = g
                    .value(y)
                    .clone()
                    .into_dimensionality::<ndarray::Ix4>()
                    .expect("4-d");
                gen.store.begin_graph();
                v
            };
            let mixed: Vec<Array3<f32>> = fakes
                .axis_iter(Axis(0))
                .map(|f| buffer.push_and_draw(&mut rng, f.to_owned()))
                .collect();
            let mixed = imageio::images_to_batch(&mixed);

            disc.store.begin_graph();
            let mut g = Graph::<f32>::new();
            let real_v = g.constant(real.clone().into_dyn());
            let fake_v = g.constant(mixed.into_dyn());
            let fr = disc.forward_fine(&mut g, FakeKind::Reconstructed, real_v, NormMode::Train, false)?;
            let ff = disc.forward_fine(&mut g, FakeKind::Reconstructed, fake_v, NormMode::Train, false)?;
            let cr = disc.forward_coarse(&mut g, real_v, NormMode::Train, false)?;
            let cf = disc.forward_coarse(&mut g, fake_v, NormMode::Train, false)?;
            let d_loss = losses::lsgan_d(&mut g, &[(fr, ff), (cr, cf)])?;
            let d_val = g.scalar(d_loss) as f64;
            if !d_val.is_finite() {
                return Err(Error::Numeric(format!("baseline d-loss diverged at step {step}")));
            }
            let grads = g.backward(d_loss);
            opt_d.step(&mut disc.store, &grads)?;

            // G stage
            gen.store.begin_graph();
            disc.store.begin_graph();
            let mut g = Graph::<f32>::new();
            let x = g.constant(corrupt.clone().into_dyn());
            let real_v = g.constant(real.clone().into_dyn());
            let recov = gen.forward(&mut g, x, &[], NormMode::Train, false)?;
            let rec_term = losses::l_rec(&mut g, recov, real_v)?;
            let ff = disc.forward_fine(&mut g, FakeKind::Reconstructed, recov, NormMode::TrainFrozen, true)?;
            let cf = disc.forward_coarse(&mut g, recov, NormMode::TrainFrozen, true)?;
            let gan_term = losses::lsgan_g(&mut g, &[ff, cf])?;
            let (total, breakdown) =
                losses::weighted_total(&mut g, &[("rec", rec_term), ("gan", gan_term)], &weights);
            if !g.scalar(total).is_finite() {
                return Err(Error::Numeric(format!("baseline g-loss diverged at step {step}")));
            }
            let grads = g.backward(total);
            opt_g.step(&mut gen.store, &grads)?;
            disc.store.begin_graph();

            step += 1;
            log.push_str(&format!(
                "{step},{d_val:.6},{:.6},{:.6},{:.6}\n",
                breakdown.terms["rec"], breakdown.terms["gan"], breakdown.total
            ));
        }
    }
    std::fs::write(&log_path, log)?;
    let ckpt = out_dir.join(format!("{}_deanon.ckpt", kind.name()));
    checkpoint::save_generator(&ckpt, &gen, step, opt_g.t)?;
    Ok(BaselineTrainOutcome {
        steps: step,
        checkpoint: ckpt,
        log: log_path,
        deanonymizer: BaselineDeanonymizer {
            kind,
            generator: gen,
            discriminators: disc,
            step,
        },
    })
}

pub struct BaselineTrainOutcome {
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub deanonymizer: BaselineDeanonymizer,
}

/// Held-out reconstruction quality: corrupt with the baseline, recover with
/// the trained deanonymizer, mean L1 to the original.
pub fn heldout_l1(deanon: &mut BaselineDeanonymizer, data: &Dataset, seed: u64) -> Result<f64> {
    let corrupted = anonymize_dataset(deanon.kind, &data.images, seed);
    let mut total = 0.0;
    let n = data.len();
    for chunk in (0..n).collect::<Vec<_>>().chunks(8) {
        let batch = crate::networks::gather_images(&corrupted, chunk);
        let recov = deanon.generator.infer(&batch, &[])?;
        let orig = crate::networks::gather_images(&data.images, chunk);
        for (r, o) in recov.axis_iter(Axis(0)).zip(orig.axis_iter(Axis(0))) {
            total += crate::metrics::l1_distance(&r.to_owned(), &o.to_owned());
        }
    }
    Ok(total / n as f64)
}
