//! Quantitative evaluation: verification-threshold calibration and the four
//! pair rates, reconstruction distances (a perceptual proxy, DSSIM, L1, L2),
//! multimodality scores, detector drift, and the exhaustive small-N password
//! sweep.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::imageio;
use crate::networks::{ModelBundle, Recognizer};
use crate::password::{self, Password};
use crate::pipeline::Detection;

// ---------------------------------------------------------------------------
// SSIM / DSSIM
// ---------------------------------------------------------------------------

/// Windowed SSIM between two `[C,H,W]` images in [-1,1], averaged over
/// channels and window positions.
///
/// Definition (pinned for reproducibility): an 11×11 Gaussian window with
/// σ = 1.5, constants C1 = (0.01·L)², C2 = (0.03·L)² with dynamic range
/// L = 2, symmetric (edge-repeating) padding, and one window centered on
/// every pixel. Computed here with separable filtering; tests compare against
/// a direct per-window oracle.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Config(format!(
            "ssim: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let win = gaussian_window_1d();
    let c1 = (0.01f64 * 2.0) * (0.01 * 2.0);
    let c2 = (0.03f64 * 2.0) * (0.03 * 2.0);

    let mut total = 0.0;
    for ci in 0..c {
        let xa: Vec<f64> = a.index_axis(Axis(0), ci).iter().map(|&v| v as f64).collect();
        let xb: Vec<f64> = b.index_axis(Axis(0), ci).iter().map(|&v| v as f64).collect();
        let mu_a = filter_2d(&xa, h, w, &win);
        let mu_b = filter_2d(&xb, h, w, &win);
        let aa: Vec<f64> = xa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = xb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = xa.iter().zip(&xb).map(|(x, y)| x * y).collect();
        let m_aa = filter_2d(&aa, h, w, &win);
        let m_bb = filter_2d(&bb, h, w, &win);
        let m_ab = filter_2d(&ab, h, w, &win);
        let mut acc = 0.0;
        for i in 0..h * w {
            let va = m_aa[i] - mu_a[i] * mu_a[i];
            let vb = m_bb[i] - mu_b[i] * mu_b[i];
            let cov = m_ab[i] - mu_a[i] * mu_b[i];
            let s = ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2))
                / ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
            acc += s;
        }
        total += acc / (h * w) as f64;
    }
    Ok(total / c as f64)
}

/// Structural dissimilarity `(1 - SSIM) / 2`, in [0, 1].
pub fn dssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window_1d() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Symmetric (edge-repeating) reflection of an out-of-range index.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian filter with symmetric padding; `x` is row-major H×W.
fn filter_2d(x: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let r = (win.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let sx = reflect_index(xx as isize + k as isize - r, w);
                acc += wk * x[y * w + sx];
            }
            tmp[y * w + xx] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let sy = reflect_index(y as isize + k as isize - r, h);
                acc += wk * tmp[sy * w + xx];
            }
            out[y * w + xx] = acc;
        }
    }
    out
}

/// Mean absolute pixel distance.
pub fn l1_distance(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() as f64)
        .sum::<f64>()
        / a.len() as f64
}

/// Mean squared pixel distance.
pub fn l2_distance(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
    let na: f64 = a.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Perceptual distance proxy: mean of `1 − cos` over the verifier's pooled
/// block features plus its embedding. Named "lpips_proxy" in every report to
/// make clear it is not the published LPIPS network.
pub fn lpips_proxy(verifier: &mut Recognizer, a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    let batch = imageio::images_to_batch(&[a.clone(), b.clone()]);
    let (emb, _, feats) = verifier.run_eval(&batch)?;
    let mut layers: Vec<(Vec<f32>, Vec<f32>)> = feats
        .iter()
        .map(|f| (f.row(0).to_vec(), f.row(1).to_vec()))
        .collect();
    layers.push((emb.row(0).to_vec(), emb.row(1).to_vec()));
    let mut acc = 0.0;
    for (fa, fb) in &layers {
        acc += 1.0 - cosine(fa, fb);
    }
    Ok(acc / layers.len() as f64)
}

// ---------------------------------------------------------------------------
// verification protocol
// ---------------------------------------------------------------------------

/// Calibrated decision rule: a pair is judged "same identity" when the
/// verifier-embedding cosine is at least `threshold`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct VerificationProtocol {
    pub threshold: f64,
    pub calibration_accuracy: f64,
    pub genuine_mean_cosine: f64,
    pub impostor_mean_cosine: f64,
}

/// Picks the threshold maximizing balanced accuracy over genuine/impostor
/// cosine samples. Deterministic: candidates are midpoints of the sorted
/// union (plus sentinels); ties resolve to the smallest candidate.
pub fn calibrate_threshold(genuine: &[f64], impostor: &[f64]) -> Result<VerificationProtocol> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Data(
            "threshold calibration needs both genuine and impostor pairs".into(),
        ));
    }
    let mut all: Vec<f64> = genuine.iter().chain(impostor).cloned().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut candidates = vec![all[0] - 1e-3];
    for pair in all.windows(2) {
        candidates.push((pair[0] + pair[1]) / 2.0);
    }
    candidates.push(all[all.len() - 1] + 1e-3);

    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for &t in &candidates {
        let tpr = genuine.iter().filter(|&&c| c >= t).count() as f64 / genuine.len() as f64;
        let tnr = impostor.iter().filter(|&&c| c < t).count() as f64 / impostor.len() as f64;
        let bal = (tpr + tnr) / 2.0;
        if bal > best.0 + 1e-12 {
            best = (bal, t);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(VerificationProtocol {
        threshold: best.1,
        calibration_accuracy: best.0,
        genuine_mean_cosine: mean(genuine),
        impostor_mean_cosine: mean(impostor),
    })
}

/// Builds genuine (same identity) and impostor (cross identity) cosine
/// samples from a labelled dataset: every same-identity pair, plus an equal
/// count of seeded random impostor pairs.
pub fn pair_cosines(
    verifier: &mut Recognizer,
    data: &Dataset,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let emb = embed_all(verifier, &data.images)?;
    let mut genuine = Vec::new();
    for (i, &li) in data.labels.iter().enumerate() {
        for (j, &lj) in data.labels.iter().enumerate().skip(i + 1) {
            if li == lj {
                genuine.push(cosine(&emb.row(i).to_vec(), &emb.row(j).to_vec()));
            }
        }
    }
    let mut impostor = Vec::new();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = data.len();
    let mut guard = 0;
    while impostor.len() < genuine.len().max(1) && guard < 100_000 {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if data.labels[i] != data.labels[j] {
            impostor.push(cosine(&emb.row(i).to_vec(), &emb.row(j).to_vec()));
        }
        guard += 1;
    }
    if impostor.is_empty() {
        return Err(Error::Data("dataset has a single identity; no impostor pairs".into()));
    }
    Ok((genuine, impostor))
}

fn embed_all(verifier: &mut Recognizer, images: &Array4<f32>) -> Result<Array2<f32>> {
    let n = images.shape()[0];
    let mut out: Option<Array2<f32>> = None;
    for chunk in (0..n).collect::<Vec<_>>().chunks(16) {
        let batch = crate::networks::gather_images(images, chunk);
        let emb = verifier.embed(&batch)?;
        let out = out.get_or_insert_with(|| Array2::zeros((n, emb.shape()[1])));
        for (bi, &i) in chunk.iter().enumerate() {
            out.row_mut(i).assign(&emb.row(bi));
        }
    }
    Ok(out.expect("nonempty dataset"))
}

/// The four judged-same rates of the pair taxonomy.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct VerificationRates {
    /// (I, A): anonymization leak — lower is better.
    pub i_vs_a: f64,
    /// (I, R): recovery accuracy — higher is better.
    pub i_vs_r: f64,
    /// (I, WR): wrong-recovery leak of the original.
    pub i_vs_wr: f64,
    /// (A, WR): wrong-recovery leak of the anonymization.
    pub a_vs_wr: f64,
}

/// Transforms every test image under sampled passwords and scores the four
/// pair types against the calibrated threshold.
pub fn verification_rates(
    verifier: &mut Recognizer,
    protocol: &VerificationProtocol,
    bundle: &mut ModelBundle,
    data: &Dataset,
    seed: u64,
) -> Result<VerificationRates> {
    if data.is_empty() {
        return Err(Error::Data("verification needs a nonempty test set".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n_bits = bundle.generator.cfg.password_bits;
    let n = data.len();
    let (mut s_ia, mut s_ir, mut s_iwr, mut s_awr) = (0usize, 0usize, 0usize, 0usize);
    for chunk in (0..n).collect::<Vec<_>>().chunks(8) {
        let images = crate::networks::gather_images(&data.images, chunk);
        let p: Vec<Password> = (0..chunk.len())
            .map(|_| Password::sample(&mut rng, n_bits))
            .collect::<Result<_>>()?;
        let inv: Vec<Password> = p.iter().map(|q| q.inverse()).collect();
        let wrong: Vec<Password> = p
            .iter()
            .map(|q| password::sample_wrong_recovery(&mut rng, q))
            .collect::<Result<_>>()?;
        let a = bundle.generator.infer(&images, &p)?;
        let r = bundle.generator.infer(&a, &inv)?;
        let wr = bundle.generator.infer(&a, &wrong)?;
        let e_i = verifier.embed(&images)?;
        let e_a = verifier.embed(&a)?;
        let e_r = verifier.embed(&r)?;
        let e_wr = verifier.embed(&wr)?;
        for bi in 0..chunk.len() {
            let same = |x: &Array2<f32>, y: &Array2<f32>| {
                cosine(&x.row(bi).to_vec(), &y.row(bi).to_vec()) >= protocol.threshold
            };
            s_ia += same(&e_i, &e_a) as usize;
            s_ir += same(&e_i, &e_r) as usize;
            s_iwr += same(&e_i, &e_wr) as usize;
            s_awr += same(&e_a, &e_wr) as usize;
        }
    }
    let nf = n as f64;
    Ok(VerificationRates {
        i_vs_a: s_ia as f64 / nf,
        i_vs_r: s_ir as f64 / nf,
        i_vs_wr: s_iwr as f64 / nf,
        a_vs_wr: s_awr as f64 / nf,
    })
}

/// Reconstruction distances between paired sets.
#[derive(Debug, Clone, Copy, Serialize, Default)]
pub struct ReconstructionDistances {
    pub lpips_proxy: f64,
    pub dssim: f64,
    pub l1: f64,
    pub l2: f64,
}

pub fn reconstruction_distances(
    verifier: &mut Recognizer,
    recovered: &[Array3<f32>],
    originals: &[Array3<f32>],
) -> Result<ReconstructionDistances> {
    if recovered.len() != originals.len() || recovered.is_empty() {
        return Err(Error::Data(format!(
            "paired sets required: {} recovered vs {} originals",
            recovered.len(),
            originals.len()
        )));
    }
    let mut out = ReconstructionDistances::default();
    for (r, i) in recovered.iter().zip(originals) {
        out.lpips_proxy += lpips_proxy(verifier, r, i)?;
        out.dssim += dssim(r, i)?;
        out.l1 += l1_distance(r, i);
        out.l2 += l2_distance(r, i);
    }
    let n = recovered.len() as f64;
    out.lpips_proxy /= n;
    out.dssim /= n;
    out.l1 /= n;
    out.l2 /= n;
    Ok(out)
}

/// Mean pairwise verifier cosine among k-password transforms (lower = more
/// multimodal), for anonymizations and for wrong recoveries.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MultimodalityScores {
    pub anonymization: f64,
    pub wrong_recovery: f64,
    pub k: usize,
}

pub fn multimodality_score(
    verifier: &mut Recognizer,
    bundle: &mut ModelBundle,
    data: &Dataset,
    k: usize,
    seed: u64,
) -> Result<MultimodalityScores> {
    let n_bits = bundle.generator.cfg.password_bits;
    if k < 2 {
        return Err(Error::Config("multimodality needs k >= 2 passwords".into()));
    }
    if n_bits < 64 && (k as u64) > (1u64 << n_bits) {
        return Err(Error::Config(format!("k={k} exceeds the 2^{n_bits} password space")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut anon_total = 0.0;
    let mut wr_total = 0.0;
    for idx in 0..data.len() {
        let img = data.image(idx);
        let batch = imageio::images_to_batch(&vec![img.clone(); k]);
        // k distinct anonymization passwords
        let mut ps: Vec<Password> = Vec::new();
        while ps.len() < k {
            let q = Password::sample(&mut rng, n_bits)?;
            if !ps.contains(&q) {
                ps.push(q);
            }
        }
        let anons = bundle.generator.infer(&batch, &ps)?;
        anon_total += mean_pairwise_cosine(verifier, &anons)?;

        // one anonymization, k distinct wrong recoveries
        let p = Password::sample(&mut rng, n_bits)?;
        let a = bundle.generator.infer_one(&img, &p)?;
        let a_batch = imageio::images_to_batch(&vec![a; k]);
        let mut wrongs: Vec<Password> = Vec::new();
        while wrongs.len() < k {
            let q = password::sample_wrong_recovery(&mut rng, &p)?;
            if !wrongs.contains(&q) {
                wrongs.push(q);
            }
        }
        let wrs = bundle.generator.infer(&a_batch, &wrongs)?;
        wr_total += mean_pairwise_cosine(verifier, &wrs)?;
    }
    Ok(MultimodalityScores {
        anonymization: anon_total / data.len() as f64,
        wrong_recovery: wr_total / data.len() as f64,
        k,
    })
}

fn mean_pairwise_cosine(verifier: &mut Recognizer, images: &Array4<f32>) -> Result<f64> {
    let emb = verifier.embed(images)?;
    let k = emb.shape()[0];
    let mut acc = 0.0;
    let mut count = 0;
    for i in 0..k {
        for j in i + 1..k {
            acc += cosine(&emb.row(i).to_vec(), &emb.row(j).to_vec());
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

// ---------------------------------------------------------------------------
// detector drift
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Default)]
pub struct DetectorDrift {
    /// Mean |Δ| over matched box corner coordinates, in pixels.
    pub box_drift: f64,
    /// Mean |Δ| over matched keypoint coordinates, in pixels.
    pub keypoint_drift: f64,
    pub matched: usize,
    pub unmatched: usize,
}

fn iou(a: &[f32; 4], b: &[f32; 4]) -> f32 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area = |r: &[f32; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let u = area(a) + area(b) - inter;
    if u <= 0.0 {
        0.0
    } else {
        inter / u
    }
}

/// Greedy IoU matching between per-image detection lists, then mean absolute
/// coordinate differences over matches. Unmatched detections are counted
/// separately, never averaged in.
pub fn detector_drift(original: &[Vec<Detection>], transformed: &[Vec<Detection>]) -> Result<DetectorDrift> {
    if original.len() != transformed.len() {
        return Err(Error::Data("detector drift needs paired image lists".into()));
    }
    let mut box_acc = 0.0;
    let mut kp_acc = 0.0;
    let mut matched = 0usize;
    let mut unmatched = 0usize;
    for (dets_o, dets_t) in original.iter().zip(transformed) {
        let mut used = vec![false; dets_t.len()];
        for d_o in dets_o {
            let mut best: Option<(usize, f32)> = None;
            for (j, d_t) in dets_t.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let v = iou(&d_o.bbox, &d_t.bbox);
                if v > 0.1 && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    matched += 1;
                    let d_t = &dets_t[j];
                    for c in 0..4 {
                        box_acc += (d_o.bbox[c] - d_t.bbox[c]).abs() as f64;
                    }
                    for k in 0..5 {
                        for c in 0..2 {
                            kp_acc += (d_o.keypoints[k][c] - d_t.keypoints[k][c]).abs() as f64;
                        }
                    }
                }
                None => unmatched += 1,
            }
        }
        unmatched += used.iter().filter(|u| !**u).count();
    }
    Ok(DetectorDrift {
        box_drift: if matched > 0 { box_acc / (matched * 4) as f64 } else { 0.0 },
        keypoint_drift: if matched > 0 { kp_acc / (matched * 10) as f64 } else { 0.0 },
        matched,
        unmatched,
    })
}

// ---------------------------------------------------------------------------
// password sweep
// ---------------------------------------------------------------------------

/// Exhaustive small-N sweep products. Tile (row, col) of the mosaic holds the
/// anonymization under the password whose big-endian integer value is
/// `row * 2^(N/2) + col`; the mapping is bijective by construction.
pub struct SweepReport {
    pub mosaic: Array3<f32>,
    pub n_passwords: usize,
    pub grid_cols: usize,
    pub pairwise_mean_cosine: f64,
    pub pairwise_min_cosine: f64,
    pub pairwise_max_cosine: f64,
    /// Fraction of passwords whose anonymization moves the embedding below
    /// the verification threshold (requires a calibrated protocol).
    pub changed_fraction: Option<f64>,
    /// Cosine between the pixel modifications two input images receive under
    /// the same password, averaged over all passwords.
    pub modification_consistency: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub n_passwords: usize,
    pub grid_cols: usize,
    pub pairwise_mean_cosine: f64,
    pub pairwise_min_cosine: f64,
    pub pairwise_max_cosine: f64,
    pub changed_fraction: Option<f64>,
    pub modification_consistency: Option<f64>,
}

impl SweepReport {
    pub fn summary(&self) -> SweepSummary {
        SweepSummary {
            n_passwords: self.n_passwords,
            grid_cols: self.grid_cols,
            pairwise_mean_cosine: self.pairwise_mean_cosine,
            pairwise_min_cosine: self.pairwise_min_cosine,
            pairwise_max_cosine: self.pairwise_max_cosine,
            changed_fraction: self.changed_fraction,
            modification_consistency: self.modification_consistency,
        }
    }
}

/// Renders all 2^N anonymizations of one image (N ≤ 8), with pairwise
/// embedding statistics and optional threshold/consistency reports.
pub fn password_sweep(
    bundle: &mut ModelBundle,
    verifier: &mut Recognizer,
    image: &Array3<f32>,
    protocol: Option<&VerificationProtocol>,
    second_image: Option<&Array3<f32>>,
) -> Result<SweepReport> {
    let n_bits = bundle.generator.cfg.password_bits;
    if n_bits > 8 {
        return Err(Error::Config(format!(
            "sweep enumerates 2^N passwords; N={n_bits} exceeds the N<=8 budget"
        )));
    }
    let passwords = password::enumerate_all(n_bits)?;
    let count = passwords.len();
    let mut tiles = Vec::with_capacity(count);
    let mut embs: Vec<Vec<f32>> = Vec::with_capacity(count);
    for chunk in passwords.chunks(16) {
        let batch = imageio::images_to_batch(&vec![image.clone(); chunk.len()]);
        let out = bundle.generator.infer(&batch, chunk)?;
        let emb = verifier.embed(&out)?;
        for bi in 0..chunk.len() {
            tiles.push(out.index_axis(Axis(0), bi).to_owned());
            embs.push(emb.row(bi).to_vec());
        }
    }

    let (mut mean, mut lo, mut hi, mut cnt) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY, 0u64);
    for i in 0..count {
        for j in i + 1..count {
            let c = cosine(&embs[i], &embs[j]);
            mean += c;
            lo = lo.min(c);
            hi = hi.max(c);
            cnt += 1;
        }
    }
    mean /= cnt as f64;

    let changed_fraction = match protocol {
        Some(p) => {
            let e_orig = verifier.embed(&imageio::images_to_batch(&[image.clone()]))?;
            let orig: Vec<f32> = e_orig.row(0).to_vec();
            let changed = embs
                .iter()
                .filter(|e| cosine(&orig, e) < p.threshold)
                .count();
            Some(changed as f64 / count as f64)
        }
        None => None,
    };

    let modification_consistency = match second_image {
        Some(img2) => {
            let mut acc = 0.0;
            for chunk in passwords.chunks(16) {
                let b2 = imageio::images_to_batch(&vec![img2.clone(); chunk.len()]);
                let out2 = bundle.generator.infer(&b2, chunk)?;
                for (bi, p) in chunk.iter().enumerate() {
                    let idx = p.index() as usize;
                    let d1: Vec<f32> = tiles[idx]
                        .iter()
                        .zip(image.iter())
                        .map(|(a, b)| a - b)
                        .collect();
                    let t2 = out2.index_axis(Axis(0), bi);
                    let d2: Vec<f32> = t2.iter().zip(img2.iter()).map(|(a, b)| a - b).collect();
                    acc += cosine(&d1, &d2);
                }
            }
            Some(acc / count as f64)
        }
        None => None,
    };

    let cols = 1usize << (n_bits / 2);
    let mosaic = imageio::tile_mosaic(&tiles, cols)?;
    Ok(SweepReport {
        mosaic,
        n_passwords: count,
        grid_cols: cols,
        pairwise_mean_cosine: mean,
        pairwise_min_cosine: lo,
        pairwise_max_cosine: hi,
        changed_fraction,
        modification_consistency,
    })
}

// ---------------------------------------------------------------------------
// evaluation report
// ---------------------------------------------------------------------------

/// Everything `evaluate` writes, serializable as JSON and CSV.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub protocol: VerificationProtocol,
    pub rates: VerificationRates,
    pub reconstruction: ReconstructionDistances,
    pub multimodality: MultimodalityScores,
    pub genuine_pair_mean_cosine: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.rates.i_vs_a,
            self.rates.i_vs_r,
            self.rates.i_vs_wr,
            self.rates.a_vs_wr,
        ];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Numeric("verification rates outside [0,1]".into()));
        }
        let d = &self.reconstruction;
        if [d.lpips_proxy, d.dssim, d.l1, d.l2].iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Numeric("reconstruction distances must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let mut push = |k: &str, v: f64| s.push_str(&format!("{k},{v:.6}\n"));
        push("threshold", self.protocol.threshold);
        push("calibration_accuracy", self.protocol.calibration_accuracy);
        push("genuine_pair_mean_cosine", self.genuine_pair_mean_cosine);
        push("rate_i_vs_a", self.rates.i_vs_a);
        push("rate_i_vs_r", self.rates.i_vs_r);
        push("rate_i_vs_wr", self.rates.i_vs_wr);
        push("rate_a_vs_wr", self.rates.a_vs_wr);
        push("lpips_proxy", self.reconstruction.lpips_proxy);
        push("dssim", self.reconstruction.dssim);
        push("l1", self.reconstruction.l1);
        push("l2", self.reconstruction.l2);
        push("multimodality_anonymization", self.multimodality.anonymization);
        push("multimodality_wrong_recovery", self.multimodality.wrong_recovery);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn rand_img(s: usize, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, s, s), |_| rng.gen_range(-1.0f32..1.0))
    }

    /// Direct per-window SSIM with the same pinned definition; the
    /// independent route for the filtering implementation.
    fn ssim_oracle(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let win = gaussian_window_1d();
        let r = (win.len() / 2) as isize;
        let c1 = (0.01f64 * 2.0) * (0.01 * 2.0);
        let c2 = (0.03f64 * 2.0) * (0.03 * 2.0);
        let mut total = 0.0;
        for ci in 0..c {
            let mut acc = 0.0;
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for ky in -r..=r {
                        for kx in -r..=r {
                            let wgt = win[(ky + r) as usize] * win[(kx + r) as usize];
                            let sy = reflect_index(y + ky, h);
                            let sx = reflect_index(x + kx, w);
                            let va = a[[ci, sy, sx]] as f64;
                            let vb = b[[ci, sy, sx]] as f64;
                            ma += wgt * va;
                            mb += wgt * vb;
                            maa += wgt * va * va;
                            mbb += wgt * vb * vb;
                            mab += wgt * va * vb;
                        }
                    }
                    let (va, vb, cov) = (maa - ma * ma, mbb - mb * mb, mab - ma * mb);
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                }
            }
            total += acc / (h * w) as f64;
        }
        total / c as f64
    }

    #[test]
    fn ssim_matches_direct_oracle_on_8x8() {
        for seed in 0..5 {
            let a = rand_img(8, seed);
            let b = rand_img(8, seed + 100);
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_oracle(&a, &b);
            assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
        }
    }

    #[test]
    fn dssim_identity_and_bounds() {
        let a = rand_img(16, 1);
        assert_eq!(dssim(&a, &a).unwrap(), 0.0);
        let b = rand_img(16, 2);
        let d = dssim(&a, &b).unwrap();
        assert!((0.0..=1.0).contains(&d));
        // symmetry
        let d2 = dssim(&b, &a).unwrap();
        assert!((d - d2).abs() < 1e-12);
    }

    #[test]
    fn pixel_distances_match_hand_rolled() {
        let a = rand_img(6, 3);
        let b = rand_img(6, 4);
        let mut l1 = 0.0f64;
        let mut l2 = 0.0f64;
        for (x, y) in a.iter().zip(b.iter()) {
            l1 += (x - y).abs() as f64;
            l2 += ((x - y) as f64).powi(2);
        }
        l1 /= a.len() as f64;
        l2 /= a.len() as f64;
        assert!((l1_distance(&a, &b) - l1).abs() < 1e-12);
        assert!((l2_distance(&a, &b) - l2).abs() < 1e-12);
        assert_eq!(l1_distance(&a, &a), 0.0);
        assert_eq!(l2_distance(&a, &a), 0.0);
    }

    #[test]
    fn calibration_separable_and_degenerate() {
        let genuine = vec![0.9, 0.95, 0.92, 0.99];
        let impostor = vec![0.05, 0.1, 0.02, 0.08];
        let p = calibrate_threshold(&genuine, &impostor).unwrap();
        assert_eq!(p.calibration_accuracy, 1.0);
        assert!(p.threshold > 0.1 && p.threshold < 0.9, "threshold {}", p.threshold);

        // identical distributions → chance level
        let same = vec![0.5; 50];
        let p = calibrate_threshold(&same, &same).unwrap();
        assert!((p.calibration_accuracy - 0.5).abs() < 0.02);

        assert!(calibrate_threshold(&[], &[0.1]).is_err());
    }

    #[test]
    fn drift_zero_and_exact_shift() {
        let det = |x: f32| Detection {
            bbox: [10.0 + x, 20.0 + x, 50.0 + x, 60.0 + x],
            keypoints: [
                [20.0 + x, 30.0 + x],
                [40.0 + x, 30.0 + x],
                [30.0 + x, 40.0 + x],
                [22.0 + x, 50.0 + x],
                [38.0 + x, 50.0 + x],
            ],
            confidence: 1.0,
        };
        let zero = detector_drift(&[vec![det(0.0)]], &[vec![det(0.0)]]).unwrap();
        assert_eq!(zero.box_drift, 0.0);
        assert_eq!(zero.keypoint_drift, 0.0);
        assert_eq!(zero.matched, 1);

        let two = detector_drift(&[vec![det(0.0)]], &[vec![det(2.0)]]).unwrap();
        assert!((two.box_drift - 2.0).abs() < 1e-6);
        assert!((two.keypoint_drift - 2.0).abs() < 1e-6);

        let missing = detector_drift(&[vec![det(0.0)]], &[vec![]]).unwrap();
        assert_eq!(missing.matched, 0);
        assert_eq!(missing.unmatched, 1);
    }

    #[test]
    fn report_validation_bounds() {
        let protocol = VerificationProtocol {
            threshold: 0.5,
            calibration_accuracy: 0.9,
            genuine_mean_cosine: 0.8,
            impostor_mean_cosine: 0.1,
        };
        let good = EvalReport {
            protocol,
            rates: VerificationRates {
                i_vs_a: 0.1,
                i_vs_r: 0.9,
                i_vs_wr: 0.1,
                a_vs_wr: 0.1,
            },
            reconstruction: ReconstructionDistances::default(),
            multimodality: MultimodalityScores {
                anonymization: 0.2,
                wrong_recovery: 0.2,
                k: 4,
            },
            genuine_pair_mean_cosine: 0.8,
        };
        good.validate().unwrap();
        let mut bad = good.clone();
        bad.rates.i_vs_a = 1.5;
        assert!(bad.validate().is_err());
        assert!(good.to_csv().contains("lpips_proxy"));
    }
}
