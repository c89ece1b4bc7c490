//! Loss terms of the multi-task objective, as pure functions of network
//! outputs, plus the weighted totals for the generator and discriminator
//! stages. Generic over the scalar type so tests can verify every term and
//! gradient in `f64`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Var};
use crate::error::{Error, Result};

/// The λ vector of the full objective. The GAN term is unweighted.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub aux: f64,
    pub feat: f64,
    pub adv: f64,
    pub rec_cls: f64,
    pub l1: f64,
    pub rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            aux: 1.0,
            feat: 2.0,
            adv: 2.0,
            rec_cls: 1.0,
            l1: 10.0,
            rec: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.aux, self.feat, self.adv, self.rec_cls, self.l1, self.rec];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("loss weights must be nonnegative and finite".into()));
        }
        Ok(())
    }

    /// Weight applied to a named term in the weighted total. GAN and
    /// discriminator-side LSGAN terms carry weight 1.
    pub fn weight_of(&self, name: &str) -> f64 {
        match name {
            "aux" => self.aux,
            "feat" => self.feat,
            "adv" => self.adv,
            "adv_cls" => self.adv,
            "rec_cls" => self.rec_cls,
            "l1" => self.l1,
            "rec" => self.rec,
            "gan" => 1.0,
            "lsgan" => 1.0,
            other => panic!("unknown loss term {other:?}"),
        }
    }
}

/// Named unweighted term values plus the weighted total for one stage.
/// Ablated terms are genuinely absent from the map.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LossBreakdown {
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Independent recomputation of the weighted total from the stored terms;
    /// the decomposition identity checked by tests and assertions.
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        self.terms.iter().map(|(k, v)| w.weight_of(k) * v).sum()
    }
}

fn validate_embeddings<T: Scalar>(g: &Graph<T>, e: Var, what: &str) -> Result<()> {
    let v = g.value(e);
    if v.ndim() != 2 {
        return Err(Error::Config(format!("{what}: embeddings must be [B,E]")));
    }
    for row in v.rows() {
        let norm2 = row.iter().fold(T::zero(), |acc, &x| acc + x * x);
        if !(norm2 > T::zero()) {
            return Err(Error::Data(format!("{what}: zero-norm embedding (cosine undefined)")));
        }
    }
    Ok(())
}

/// Hinged cosine similarity `max(0, cos(e1, e2))`, meaned over the batch.
/// Pairs already dissimilar (cosine below 0) are not penalized further.
pub fn l_dis<T: Scalar>(g: &mut Graph<T>, e1: Var, e2: Var) -> Result<Var> {
    validate_embeddings(g, e1, "l_dis")?;
    validate_embeddings(g, e2, "l_dis")?;
    let cos = g.row_cosine(e1, e2);
    let hinged = g.max_const(cos, T::zero());
    Ok(g.mean_all(hinged))
}

/// Feature dissimilarity across the five-image graph: the two anonymizations
/// must differ, the two wrong recoveries must differ, and the first wrong
/// recovery must differ from the anonymization it came from.
pub fn l_feat<T: Scalar>(
    g: &mut Graph<T>,
    emb_a1: Var,
    emb_a2: Var,
    emb_wr1: Var,
    emb_wr2: Var,
) -> Result<Var> {
    let t1 = l_dis(g, emb_a1, emb_a2)?;
    let t2 = l_dis(g, emb_wr1, emb_wr2)?;
    let t3 = l_dis(g, emb_a1, emb_wr1)?;
    let s = g.add(t1, t2);
    Ok(g.add(s, t3))
}

fn check_labels(n_classes: usize, labels: &[usize]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Data(format!("label {bad} out of range for {n_classes} classes")));
    }
    Ok(())
}

/// Generator-stage face-classification adversarial term: the transformer is
/// rewarded for making F misclassify the anonymization and wrong recovery.
/// Returns `max(floor, -CE(F(A),y) - CE(F(WR),y))`; the floor keeps the
/// negated cross-entropies from dominating the objective.
pub fn l_adv_generator<T: Scalar>(
    g: &mut Graph<T>,
    logits_a: Var,
    logits_wr: Option<Var>,
    labels: &[usize],
    floor: f64,
) -> Result<Var> {
    check_labels(g.value(logits_a).shape()[1], labels)?;
    let ce_a = g.cross_entropy_mean(logits_a, labels);
    let mut terms = vec![(ce_a, -T::one())];
    if let Some(lw) = logits_wr {
        let ce_wr = g.cross_entropy_mean(lw, labels);
        terms.push((ce_wr, -T::one()));
    }
    let total = g.weighted_sum(&terms);
    Ok(g.max_const(total, T::from_f64(floor)))
}

/// Discriminator-stage dual: F is trained to classify the original and both
/// transformed faces as the true identity.
pub fn l_adv_discriminator<T: Scalar>(
    g: &mut Graph<T>,
    logits_i: Var,
    logits_a: Option<Var>,
    logits_wr: Option<Var>,
    labels: &[usize],
) -> Result<Var> {
    check_labels(g.value(logits_i).shape()[1], labels)?;
    let mut total = g.cross_entropy_mean(logits_i, labels);
    for l in [logits_a, logits_wr].into_iter().flatten() {
        let ce = g.cross_entropy_mean(l, labels);
        total = g.add(total, ce);
    }
    Ok(total)
}

fn check_same_shape<T: Scalar>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::Config(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    Ok(())
}

/// Reconstruction loss: mean absolute difference between the recovered and
/// original image. All pixel losses in this crate are means, not sums, so the
/// λ defaults stay scale-free across image sizes.
pub fn l_rec<T: Scalar>(g: &mut Graph<T>, recovered: Var, original: Var) -> Result<Var> {
    check_same_shape(g, recovered, original, "l_rec")?;
    let d = g.sub(recovered, original);
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

/// Identity-classification loss on the reconstruction, recovering the
/// high-frequency identity content the plain L1 blurs away.
pub fn l_rec_cls<T: Scalar>(g: &mut Graph<T>, logits_r: Var, labels: &[usize]) -> Result<Var> {
    check_labels(g.value(logits_r).shape()[1], labels)?;
    Ok(g.cross_entropy_mean(logits_r, labels))
}

/// Whole-image background-preservation L1 on the anonymization and (when
/// trained) the wrong recovery.
pub fn l_background<T: Scalar>(
    g: &mut Graph<T>,
    anonymized: Var,
    wrong_recovery: Option<Var>,
    original: Var,
) -> Result<Var> {
    let a_term = l_rec(g, anonymized, original)?;
    match wrong_recovery {
        Some(wr) => {
            check_same_shape(g, wr, original, "l_background")?;
            let wr_term = l_rec(g, wr, original)?;
            Ok(g.add(a_term, wr_term))
        }
        None => Ok(a_term),
    }
}

/// LSGAN discriminator objective, summed over (real, fake) score-grid pairs
/// from the coarse and applicable fine discriminators:
/// `½·mean((D(real)−1)²) + ½·mean(D(fake)²)`.
pub fn lsgan_d<T: Scalar>(g: &mut Graph<T>, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Config("lsgan_d: no discriminator outputs".into()));
    }
    let half = T::from_f64(0.5);
    let mut terms = Vec::with_capacity(pairs.len() * 2);
    for &(real, fake) in pairs {
        let shifted = g.affine(real, T::one(), -T::one());
        let sq_real = g.square(shifted);
        let m_real = g.mean_all(sq_real);
        let sq_fake = g.square(fake);
        let m_fake = g.mean_all(sq_fake);
        terms.push((m_real, half));
        terms.push((m_fake, half));
    }
    Ok(g.weighted_sum(&terms))
}

/// LSGAN generator objective over fake score grids: `mean((D(fake)−1)²)`,
/// summed over the coarse and applicable fine discriminators.
pub fn lsgan_g<T: Scalar>(g: &mut Graph<T>, fakes: &[Var]) -> Result<Var> {
    if fakes.is_empty() {
        return Err(Error::Config("lsgan_g: no discriminator outputs".into()));
    }
    let mut terms = Vec::with_capacity(fakes.len());
    for &fake in fakes {
        let shifted = g.affine(fake, T::one(), -T::one());
        let sq = g.square(shifted);
        let m = g.mean_all(sq);
        terms.push((m, T::one()));
    }
    Ok(g.weighted_sum(&terms))
}

/// Password-prediction loss: per 4-bit chunk, cross-entropy of the matching
/// 16-way head, summed over chunks. `chunk_labels[h]` holds head h's target
/// chunk for every batch element.
pub fn l_aux<T: Scalar>(g: &mut Graph<T>, heads: &[Var], chunk_labels: &[Vec<usize>]) -> Result<Var> {
    if heads.is_empty() || heads.len() != chunk_labels.len() {
        return Err(Error::Config(format!(
            "l_aux: {} heads but {} label groups",
            heads.len(),
            chunk_labels.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (head, labels) in heads.iter().zip(chunk_labels) {
        if g.value(*head).shape()[1] != 16 {
            return Err(Error::Config("l_aux: each head must emit 16 logits".into()));
        }
        check_labels(16, labels)?;
        let ce = g.cross_entropy_mean(*head, labels);
        total = Some(match total {
            Some(t) => g.add(t, ce),
            None => ce,
        });
    }
    Ok(total.expect("at least one head"))
}

/// Assembles a stage total from named unweighted term nodes. Returns the
/// weighted-total node together with the logged breakdown.
pub fn weighted_total<T: Scalar>(
    g: &mut Graph<T>,
    terms: &[(&str, Var)],
    w: &LossWeights,
) -> (Var, LossBreakdown) {
    let entries: Vec<(Var, T)> = terms
        .iter()
        .map(|(name, v)| (*v, T::from_f64(w.weight_of(name))))
        .collect();
    let total = g.weighted_sum(&entries);
    let mut breakdown = LossBreakdown {
        terms: BTreeMap::new(),
        total: g.scalar(total).to_f64(),
    };
    for (name, v) in terms {
        breakdown.terms.insert(name.to_string(), g.scalar(*v).to_f64());
    }
    (total, breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check;
    use ndarray::{Array2, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    // --- independent scalar oracles ---

    fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn oracle_ce_mean(logits: &Array2<f64>, labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (row, &y) in logits.outer_iter().zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            total += z.ln() + m - row[y];
        }
        total / labels.len() as f64
    }

    fn emb(g: &mut Graph<f64>, rows: &[&[f64]]) -> Var {
        let b = rows.len();
        let e = rows[0].len();
        let mut a = Array2::<f64>::zeros((b, e));
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                a[[i, j]] = *v;
            }
        }
        g.leaf(a.into_dyn())
    }

    #[test]
    fn l_dis_trivial_cases() {
        let mut g = Graph::<f64>::new();
        let e = emb(&mut g, &[&[0.3, -0.7, 0.2]]);
        let same = l_dis(&mut g, e, e).unwrap();
        assert!((g.scalar(same) - 1.0).abs() < 1e-12);

        let a = emb(&mut g, &[&[1.0, 0.0]]);
        let b = emb(&mut g, &[&[0.0, 1.0]]);
        let orth = l_dis(&mut g, a, b).unwrap();
        assert_eq!(g.scalar(orth), 0.0);

        let na = emb(&mut g, &[&[-1.0, 0.0]]);
        let hinged = l_dis(&mut g, a, na).unwrap();
        assert_eq!(g.scalar(hinged), 0.0, "anti-parallel pair must clamp to 0");
    }

    #[test]
    fn l_dis_matches_oracle_and_rescaling_invariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for trial in 0..20 {
            let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want = oracle_cos(&a, &b).max(0.0);
            let mut g = Graph::<f64>::new();
            let va = emb(&mut g, &[&a]);
            let vb = emb(&mut g, &[&b]);
            let v = l_dis(&mut g, va, vb).unwrap();
            let got = g.scalar(v);
            assert!((got - want).abs() < 1e-12, "trial {trial}: {got} vs {want}");

            // positive rescaling leaves the value unchanged
            let a3: Vec<f64> = a.iter().map(|x| 3.0 * x).collect();
            let mut g2 = Graph::<f64>::new();
            let va3 = emb(&mut g2, &[&a3]);
            let vb2 = emb(&mut g2, &[&b]);
            let v2 = l_dis(&mut g2, va3, vb2).unwrap();
            let got2 = g2.scalar(v2);
            assert!((got2 - want).abs() < 1e-12);
        }
    }

    #[test]
    fn l_dis_rejects_zero_norm() {
        let mut g = Graph::<f64>::new();
        let a = emb(&mut g, &[&[0.0, 0.0]]);
        let b = emb(&mut g, &[&[1.0, 0.0]]);
        assert!(matches!(l_dis(&mut g, a, b), Err(Error::Data(_))));
    }

    #[test]
    fn l_feat_known_values_and_oracle() {
        // all identical embeddings → every hinged cosine is 1 → total 3
        let mut g = Graph::<f64>::new();
        let e = emb(&mut g, &[&[0.5, 0.5, -0.2]]);
        let v = l_feat(&mut g, e, e, e, e).unwrap();
        assert!((g.scalar(v) - 3.0).abs() < 1e-12);

        // mutually orthogonal unit vectors → 0
        let mut g = Graph::<f64>::new();
        let a1 = emb(&mut g, &[&[1.0, 0.0, 0.0, 0.0]]);
        let a2 = emb(&mut g, &[&[0.0, 1.0, 0.0, 0.0]]);
        let w1 = emb(&mut g, &[&[0.0, 0.0, 1.0, 0.0]]);
        let w2 = emb(&mut g, &[&[0.0, 0.0, 0.0, 1.0]]);
        let v = l_feat(&mut g, a1, a2, w1, w2).unwrap();
        assert_eq!(g.scalar(v), 0.0);

        // unit vectors at known angles: sum of three clamped cosines
        let ang = |t: f64| vec![t.cos(), t.sin()];
        let (a1v, a2v, w1v, w2v) = (ang(0.0), ang(1.0), ang(2.5), ang(0.4));
        let want = oracle_cos(&a1v, &a2v).max(0.0)
            + oracle_cos(&w1v, &w2v).max(0.0)
            + oracle_cos(&a1v, &w1v).max(0.0);
        let mut g = Graph::<f64>::new();
        let a1 = emb(&mut g, &[&a1v]);
        let a2 = emb(&mut g, &[&a2v]);
        let w1 = emb(&mut g, &[&w1v]);
        let w2 = emb(&mut g, &[&w2v]);
        let v = l_feat(&mut g, a1, a2, w1, w2).unwrap();
        assert!((g.scalar(v) - want).abs() < 1e-12);
    }

    #[test]
    fn adversarial_terms_match_ce_oracle() {
        let k = 5;
        let labels = vec![0usize, 3, 2, 4];
        let la = randn(&[4, k], 2);
        let lw = randn(&[4, k], 3);
        let li = randn(&[4, k], 4);
        let ce = |a: &ArrayD<f64>| {
            oracle_ce_mean(&a.clone().into_dimensionality::<ndarray::Ix2>().unwrap(), &labels)
        };

        let mut g = Graph::<f64>::new();
        let va = g.leaf(la.clone());
        let vw = g.leaf(lw.clone());
        let vi = g.leaf(li.clone());

        let gen = l_adv_generator(&mut g, va, Some(vw), &labels, -1e9).unwrap();
        let want_gen = -ce(&la) - ce(&lw);
        assert!((g.scalar(gen) - want_gen).abs() < 1e-9);

        let dis = l_adv_discriminator(&mut g, vi, Some(va), Some(vw), &labels).unwrap();
        let want_dis = ce(&li) + ce(&la) + ce(&lw);
        assert!((g.scalar(dis) - want_dis).abs() < 1e-9);
    }

    #[test]
    fn adversarial_uniform_and_floor_behavior() {
        let k = 7usize;
        let labels = vec![1usize, 5];
        let uniform = ArrayD::<f64>::zeros(IxDyn(&[2, k]));
        let mut g = Graph::<f64>::new();
        let v = g.leaf(uniform.clone());
        let vi = g.leaf(uniform.clone());
        // uniform logits → each CE term is ln K
        let dis = l_adv_discriminator(&mut g, vi, Some(v), None, &labels).unwrap();
        assert!((g.scalar(dis) - 2.0 * (k as f64).ln()).abs() < 1e-9);

        // generator side with the default-style floor −2 ln K: uniform hits it
        let floor = -2.0 * (k as f64).ln();
        let v2 = g.leaf(uniform.clone());
        let vw2 = g.leaf(uniform);
        let gen = l_adv_generator(&mut g, v2, Some(vw2), &labels, floor).unwrap();
        assert!((g.scalar(gen) - floor).abs() < 1e-9);
        // below the floor the gradient must vanish
        let grads = g.backward(gen);
        assert!(grads.get(v2).is_none() || grads.get(v2).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rec_and_background_match_oracle() {
        let r = randn(&[1, 3, 4, 4], 5);
        let i = randn(&[1, 3, 4, 4], 6);
        let want: f64 =
            r.iter().zip(i.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / r.len() as f64;
        let mut g = Graph::<f64>::new();
        let vr = g.leaf(r.clone());
        let vi = g.leaf(i.clone());
        let v = l_rec(&mut g, vr, vi).unwrap();
        let got = g.scalar(v);
        assert!((got - want).abs() < 1e-12);

        // identical → 0; constant offset → that offset
        let mut g = Graph::<f64>::new();
        let a = g.leaf(i.clone());
        let b = g.leaf(i.clone());
        let z = l_rec(&mut g, a, b).unwrap();
        assert_eq!(g.scalar(z), 0.0);
        let shifted = i.mapv(|v| v + 0.1);
        let mut g = Graph::<f64>::new();
        let a = g.leaf(shifted.clone());
        let b = g.leaf(i.clone());
        let v = l_rec(&mut g, a, b).unwrap();
        let got = g.scalar(v);
        assert!((got - 0.1).abs() < 1e-9);

        // background: A == I, WR == I + 0.2 → 0.2; random triple matches oracle
        let mut g = Graph::<f64>::new();
        let vi2 = g.leaf(i.clone());
        let va = g.leaf(i.clone());
        let vwr = g.leaf(i.mapv(|v| v + 0.2));
        let v = l_background(&mut g, va, Some(vwr), vi2).unwrap();
        let got = g.scalar(v);
        assert!((got - 0.2).abs() < 1e-9);

        let (a, wr, orig) = (randn(&[2, 3, 3, 3], 7), randn(&[2, 3, 3, 3], 8), randn(&[2, 3, 3, 3], 9));
        let want: f64 = a.iter().zip(orig.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>()
            / a.len() as f64
            + wr.iter().zip(orig.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / wr.len() as f64;
        let mut g = Graph::<f64>::new();
        let va = g.leaf(a);
        let vwr = g.leaf(wr);
        let vo = g.leaf(orig);
        let v = l_background(&mut g, va, Some(vwr), vo).unwrap();
        let got = g.scalar(v);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn lsgan_known_values() {
        let ones = ArrayD::<f64>::from_elem(IxDyn(&[1, 1, 3, 3]), 1.0);
        let zeros = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 3, 3]));
        let halves = ArrayD::<f64>::from_elem(IxDyn(&[1, 1, 3, 3]), 0.5);

        // optimal discriminator: D(real)=1, D(fake)=0 → d-stage 0
        let mut g = Graph::<f64>::new();
        let r = g.leaf(ones.clone());
        let f = g.leaf(zeros.clone());
        let v = lsgan_d(&mut g, &[(r, f)]).unwrap();
        assert_eq!(g.scalar(v), 0.0);

        // D(fake)=1 → g-stage 0
        let mut g = Graph::<f64>::new();
        let f = g.leaf(ones.clone());
        let v = lsgan_g(&mut g, &[f]).unwrap();
        assert_eq!(g.scalar(v), 0.0);

        // D ≡ 0.5 everywhere → d-stage ¼, g-stage ¼
        let mut g = Graph::<f64>::new();
        let r = g.leaf(halves.clone());
        let f = g.leaf(halves.clone());
        let vd = lsgan_d(&mut g, &[(r, f)]).unwrap();
        let d = g.scalar(vd);
        assert!((d - 0.25).abs() < 1e-12);
        let f2 = g.leaf(halves);
        let vg = lsgan_g(&mut g, &[f2]).unwrap();
        let gs = g.scalar(vg);
        assert!((gs - 0.25).abs() < 1e-12);
    }

    #[test]
    fn l_aux_uniform_perfect_and_oracle() {
        // uniform heads at N=16 → 4·ln 16
        let mut g = Graph::<f64>::new();
        let heads: Vec<Var> = (0..4).map(|_| g.leaf(ArrayD::zeros(IxDyn(&[2, 16])))).collect();
        let labels = vec![vec![3usize, 7], vec![0, 15], vec![9, 9], vec![1, 2]];
        let v = l_aux(&mut g, &heads, &labels).unwrap();
        assert!((g.scalar(v) - 4.0 * 16.0f64.ln()).abs() < 1e-9);

        // near-one-hot heads → near 0
        let mut g = Graph::<f64>::new();
        let mut a = Array2::<f64>::from_elem((1, 16), -50.0);
        a[[0, 5]] = 50.0;
        let head = g.leaf(a.into_dyn());
        let v = l_aux(&mut g, &[head], &[vec![5usize]]).unwrap();
        assert!(g.scalar(v).abs() < 1e-9);

        // random logits → per-chunk CE oracle
        let h0 = randn(&[3, 16], 10);
        let h1 = randn(&[3, 16], 11);
        let labels = vec![vec![2usize, 14, 0], vec![7, 7, 1]];
        let want = oracle_ce_mean(
            &h0.clone().into_dimensionality::<ndarray::Ix2>().unwrap(),
            &labels[0],
        ) + oracle_ce_mean(
            &h1.clone().into_dimensionality::<ndarray::Ix2>().unwrap(),
            &labels[1],
        );
        let mut g = Graph::<f64>::new();
        let v0 = g.leaf(h0);
        let v1 = g.leaf(h1);
        let v = l_aux(&mut g, &[v0, v1], &labels).unwrap();
        let got = g.scalar(v);
        assert!((got - want).abs() < 1e-10);

        // head-count mismatch rejected
        let mut g = Graph::<f64>::new();
        let v = g.leaf(randn(&[1, 16], 12));
        assert!(l_aux(&mut g, &[v], &[vec![0], vec![1]]).is_err());
    }

    #[test]
    fn weighted_total_unit_terms_equal_117() {
        // Every unweighted term set to 1 under the default λ vector.
        let w = LossWeights::default();
        let mut g = Graph::<f64>::new();
        let one = g.leaf(ArrayD::from_elem(IxDyn(&[]), 1.0));
        let names = ["aux", "feat", "adv", "rec_cls", "rec", "l1", "gan"];
        let terms: Vec<(&str, Var)> = names.iter().map(|n| (*n, one)).collect();
        let (total, breakdown) = weighted_total(&mut g, &terms, &w);
        assert_eq!(g.scalar(total), 117.0);
        assert_eq!(breakdown.recompute_total(&w), 117.0);
    }

    #[test]
    fn decomposition_identity_on_random_terms() {
        let w = LossWeights::default();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for _ in 0..50 {
            let mut g = Graph::<f64>::new();
            let names = ["aux", "feat", "adv", "rec_cls", "rec", "l1", "gan"];
            let terms: Vec<(&str, Var)> = names
                .iter()
                .map(|n| {
                    let v = g.leaf(ArrayD::from_elem(IxDyn(&[]), rng.gen_range(-2.0..2.0)));
                    (*n, v)
                })
                .collect();
            let (total, breakdown) = weighted_total(&mut g, &terms, &w);
            let direct = breakdown.recompute_total(&w);
            let tv = g.scalar(total);
            let denom = tv.abs().max(1e-9);
            assert!((tv - direct).abs() / denom < 1e-6);
        }
    }

    #[test]
    fn zero_weight_removes_gradient_contribution() {
        // With λ_feat = 0 the gradients must equal those of the objective
        // without the feat term entirely.
        let x = randn(&[2, 4], 30);
        let grads_with = {
            let mut g = Graph::<f64>::new();
            let v = g.leaf(x.clone());
            let sq = g.square(v);
            let t1 = g.mean_all(sq);
            let ab = g.abs(v);
            let t2 = g.mean_all(ab);
            let w = LossWeights {
                feat: 0.0,
                ..Default::default()
            };
            let (total, _) = weighted_total(&mut g, &[("rec", t1), ("feat", t2)], &w);
            let grads = g.backward(total);
            grads.get(v).unwrap().clone()
        };
        let grads_without = {
            let mut g = Graph::<f64>::new();
            let v = g.leaf(x.clone());
            let sq = g.square(v);
            let t1 = g.mean_all(sq);
            let w = LossWeights::default();
            let (total, _) = weighted_total(&mut g, &[("rec", t1)], &w);
            let grads = g.backward(total);
            grads.get(v).unwrap().clone()
        };
        for (a, b) in grads_with.iter().zip(grads_without.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn loss_gradients_match_fd() {
        // l_dis + l_feat path
        check(
            &[randn(&[2, 4], 40), randn(&[2, 4], 41), randn(&[2, 4], 42), randn(&[2, 4], 43)],
            6,
            50,
            1e-5,
            |g, vs| l_feat(g, vs[0], vs[1], vs[2], vs[3]).unwrap(),
        );
        // adversarial terms
        let labels = vec![0usize, 2];
        check(&[randn(&[2, 4], 44), randn(&[2, 4], 45)], 6, 51, 1e-6, {
            let labels = labels.clone();
            move |g, vs| l_adv_generator(g, vs[0], Some(vs[1]), &labels, -1e9).unwrap()
        });
        check(&[randn(&[2, 4], 46), randn(&[2, 4], 47)], 6, 52, 1e-6, {
            let labels = labels.clone();
            move |g, vs| l_adv_discriminator(g, vs[0], Some(vs[1]), None, &labels).unwrap()
        });
        // pixel losses
        check(&[randn(&[1, 3, 4, 4], 48), randn(&[1, 3, 4, 4], 49)], 6, 53, 1e-5, |g, vs| {
            l_rec(g, vs[0], vs[1]).unwrap()
        });
        check(
            &[randn(&[1, 3, 4, 4], 54), randn(&[1, 3, 4, 4], 55), randn(&[1, 3, 4, 4], 56)],
            6,
            57,
            1e-5,
            |g, vs| l_background(g, vs[0], Some(vs[1]), vs[2]).unwrap(),
        );
        // lsgan
        check(&[randn(&[1, 1, 3, 3], 58), randn(&[1, 1, 3, 3], 59)], 6, 60, 1e-6, |g, vs| {
            lsgan_d(g, &[(vs[0], vs[1])]).unwrap()
        });
        check(&[randn(&[1, 1, 3, 3], 61)], 6, 62, 1e-6, |g, vs| {
            lsgan_g(g, &[vs[0]]).unwrap()
        });
        // aux
        check(&[randn(&[2, 16], 63), randn(&[2, 16], 64)], 6, 65, 1e-6, |g, vs| {
            l_aux(g, &[vs[0], vs[1]], &[vec![1, 9], vec![15, 0]]).unwrap()
        });
    }
}
