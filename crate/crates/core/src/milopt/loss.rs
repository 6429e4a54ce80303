//! Contrastive losses over a batch of images and their text bags.
//!
//! Notation: image `i` has vector `x_i`, its bag holds texts `y_i^m`, and
//! `a(i, j, m) = x_i · y_j^m`. Logits are `a / σ`. Every loss is the mean of
//! an image-to-text and a text-to-image term, each averaged over the batch,
//! so all four kinds coincide when every bag holds a single text.
//!
//! * `clip`: symmetric cross-entropy over paired vectors.
//! * `mil_nce`: positive mass `Σ_m exp(a(i,i,m)/σ)` against all pairs.
//! * `mil_max`: image-to-text uses the best bag member only, with the other
//!   bags as negatives; text-to-image takes the best-scoring bag member's
//!   cross-entropy against the other images.
//! * `mil_softmax`: like `mil_max`, but the positive is a softmax-weighted
//!   (scale `σ_sm`) average of the bag's exponentiated logits.
//!
//! All gradients are analytic and accumulated in `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::OptError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Clip,
    MilMax,
    MilSoftmax,
    MilNce,
    /// Random single bag member, then `Clip`.
    ChooseOne,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Clip,
        LossKind::MilMax,
        LossKind::MilSoftmax,
        LossKind::MilNce,
        LossKind::ChooseOne,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Clip => "clip",
            LossKind::MilMax => "mil-max",
            LossKind::MilSoftmax => "mil-softmax",
            LossKind::MilNce => "mil-nce",
            LossKind::ChooseOne => "choose-one",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('_', "-");
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| format!("unknown loss kind {s}"))
    }
}

pub const SIGMA_MIN: f64 = 0.01;
pub const SIGMA_MAX: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Temperature. Learned during training; this is the value in use.
    pub sigma: f64,
    /// Scale of the bag softmax weights in `mil_softmax`. Fixed.
    pub sigma_sm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::MilNce,
            sigma: 0.07,
            sigma_sm: 0.07,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), OptError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(OptError::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.sigma_sm > 0.0 && self.sigma_sm.is_finite()) {
            return Err(OptError::Config(format!(
                "sigma_sm must be positive, got {}",
                self.sigma_sm
            )));
        }
        Ok(())
    }
}

/// `B` image vectors and their text bags, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    dim: usize,
    images: Vec<f64>,
    texts: Vec<f64>,
    offsets: Vec<usize>,
}

impl Batch {
    pub fn new(images: Vec<Vec<f64>>, bags: Vec<Vec<Vec<f64>>>) -> Result<Self, OptError> {
        if images.is_empty() {
            return Err(OptError::EmptyBatch);
        }
        if images.len() != bags.len() {
            return Err(OptError::Config(format!(
                "{} images but {} bags",
                images.len(),
                bags.len()
            )));
        }
        let dim = images[0].len();
        let mut flat_images = Vec::with_capacity(images.len() * dim);
        for x in &images {
            if x.len() != dim {
                return Err(OptError::DimMismatch {
                    expected: dim,
                    got: x.len(),
                });
            }
            flat_images.extend_from_slice(x);
        }
        let mut texts = Vec::new();
        let mut offsets = vec![0];
        for (i, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(OptError::EmptyBag(i));
            }
            for y in bag {
                if y.len() != dim {
                    return Err(OptError::DimMismatch {
                        expected: dim,
                        got: y.len(),
                    });
                }
                texts.extend_from_slice(y);
            }
            offsets.push(offsets[i] + bag.len());
        }
        Ok(Batch {
            dim,
            images: flat_images,
            texts,
            offsets,
        })
    }

    pub(crate) fn from_flat(
        dim: usize,
        images: Vec<f64>,
        texts: Vec<f64>,
        offsets: Vec<usize>,
    ) -> Self {
        debug_assert_eq!(images.len(), dim * (offsets.len() - 1));
        debug_assert_eq!(texts.len(), dim * offsets[offsets.len() - 1]);
        Batch {
            dim,
            images,
            texts,
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bag_size(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn text_count(&self) -> usize {
        self.offsets[self.len()]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.dim..(i + 1) * self.dim]
    }

    /// Flat text index of member `m` of bag `j`.
    pub fn text_index(&self, j: usize, m: usize) -> usize {
        self.offsets[j] + m
    }

    pub fn text(&self, t: usize) -> &[f64] {
        &self.texts[t * self.dim..(t + 1) * self.dim]
    }

    pub fn images_flat(&self) -> &[f64] {
        &self.images
    }

    pub fn texts_flat(&self) -> &[f64] {
        &self.texts
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

/// Loss value and gradients with respect to every batch vector and `σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    /// `B × d`, row-major.
    pub d_images: Vec<f64>,
    /// `T × d` in flat text order, `T` the total number of bag members.
    pub d_texts: Vec<f64>,
    pub d_sigma: f64,
}

/// Dot products `a(i, t)` between image `i` and flat text `t`, plus the
/// gradient buffer of the same shape.
struct Sims<'a> {
    batch: &'a Batch,
    a: Vec<f64>,
    g: Vec<f64>,
    d_sigma: f64,
}

impl<'a> Sims<'a> {
    fn new(batch: &'a Batch) -> Self {
        let (b, t, d) = (batch.len(), batch.text_count(), batch.dim);
        let mut a = vec![0.0; b * t];
        for i in 0..b {
            let x = batch.image(i);
            for k in 0..t {
                let y = &batch.texts[k * d..(k + 1) * d];
                a[i * t + k] = x.iter().zip(y).map(|(p, q)| p * q).sum();
            }
        }
        Sims {
            batch,
            g: vec![0.0; a.len()],
            a,
            d_sigma: 0.0,
        }
    }

    fn at(&self, i: usize, t: usize) -> f64 {
        self.a[i * self.batch.text_count() + t]
    }

    /// Accumulate `coef · ∂(a(i,t)/σ)`.
    fn add_logit(&mut self, i: usize, t: usize, coef: f64, sigma: f64) {
        let idx = i * self.batch.text_count() + t;
        self.g[idx] += coef / sigma;
        self.d_sigma -= coef * self.a[idx] / (sigma * sigma);
    }

    /// Accumulate `coef · ∂a(i,t)` (no temperature).
    fn add_raw(&mut self, i: usize, t: usize, coef: f64) {
        let idx = i * self.batch.text_count() + t;
        self.g[idx] += coef;
    }

    fn finish(self, value: f64) -> LossGrad {
        let batch = self.batch;
        let (b, t, d) = (batch.len(), batch.text_count(), batch.dim);
        let mut d_images = vec![0.0; b * d];
        let mut d_texts = vec![0.0; t * d];
        for i in 0..b {
            let x = batch.image(i);
            for k in 0..t {
                let g = self.g[i * t + k];
                if g == 0.0 {
                    continue;
                }
                let y = &batch.texts[k * d..(k + 1) * d];
                for c in 0..d {
                    d_images[i * d + c] += g * y[c];
                    d_texts[k * d + c] += g * x[c];
                }
            }
        }
        LossGrad {
            value,
            d_images,
            d_texts,
            d_sigma: self.d_sigma,
        }
    }
}

fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax weights of `values` together with their log-sum-exp.
fn softmax(values: &[f64]) -> (Vec<f64>, f64) {
    let lse = logsumexp(values);
    (values.iter().map(|v| (v - lse).exp()).collect(), lse)
}

/// Index of the largest value; the lowest index wins ties.
pub fn select_max_member(values: &[f64]) -> usize {
    let mut best = 0;
    for (m, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = m;
        }
    }
    best
}

/// Weight of the `(1 / 2B)` direction averaging applied to each term.
fn term_weight(b: usize) -> f64 {
    1.0 / (2.0 * b as f64)
}

/// Image-to-text term of `mil_nce` (and `clip`) for query `i`:
/// `LSE_{j,m} a(i,j,m)/σ − LSE_m a(i,i,m)/σ`.
fn nce_i2t(s: &mut Sims, i: usize, sigma: f64, w: f64) -> f64 {
    let batch = s.batch;
    let t = batch.text_count();
    let logits: Vec<f64> = (0..t).map(|k| s.at(i, k) / sigma).collect();
    let (p_all, lse_all) = softmax(&logits);
    let own = batch.offsets[i]..batch.offsets[i + 1];
    let (p_pos, lse_pos) = softmax(&logits[own.clone()]);
    for (k, p) in p_all.iter().enumerate() {
        s.add_logit(i, k, w * p, sigma);
    }
    for (m, k) in own.enumerate() {
        s.add_logit(i, k, -w * p_pos[m], sigma);
    }
    lse_all - lse_pos
}

/// Text-to-image term of `mil_nce` for bag `i`: the bag's texts against
/// every image, `LSE_{j,m} a(j,i,m)/σ − LSE_m a(i,i,m)/σ`.
fn nce_t2i(s: &mut Sims, i: usize, sigma: f64, w: f64) -> f64 {
    let batch = s.batch;
    let b = batch.len();
    let own = batch.offsets[i]..batch.offsets[i + 1];
    let mut cells = Vec::with_capacity(b * own.len());
    for j in 0..b {
        for k in own.clone() {
            cells.push((j, k));
        }
    }
    let logits: Vec<f64> = cells.iter().map(|&(j, k)| s.at(j, k) / sigma).collect();
    let (p_all, lse_all) = softmax(&logits);
    let pos: Vec<f64> = own.clone().map(|k| s.at(i, k) / sigma).collect();
    let (p_pos, lse_pos) = softmax(&pos);
    for (&(j, k), p) in cells.iter().zip(&p_all) {
        s.add_logit(j, k, w * p, sigma);
    }
    for (m, k) in own.enumerate() {
        s.add_logit(i, k, -w * p_pos[m], sigma);
    }
    lse_all - lse_pos
}

/// Text-to-image term shared by `mil_max` and `mil_softmax`: for each bag
/// member `q`, the cross-entropy of `x_i` among all images; the smallest one
/// (the best member) is used.
fn best_member_t2i(s: &mut Sims, i: usize, sigma: f64, w: f64) -> f64 {
    let batch = s.batch;
    let b = batch.len();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    for k in batch.offsets[i]..batch.offsets[i + 1] {
        let logits: Vec<f64> = (0..b).map(|j| s.at(j, k) / sigma).collect();
        let (p, lse) = softmax(&logits);
        let ce = lse - logits[i];
        if best.as_ref().is_none_or(|(c, _, _)| ce < *c) {
            best = Some((ce, k, p));
        }
    }
    let (ce, k, p) = best.expect("bags are non-empty");
    for (j, pj) in p.iter().enumerate() {
        s.add_logit(j, k, w * pj, sigma);
    }
    s.add_logit(i, k, -w, sigma);
    ce
}

/// Logits of the other bags for image `i` (the negatives of the MIL max and
/// softmax variants).
fn negatives(s: &Sims, i: usize, sigma: f64) -> Vec<(usize, f64)> {
    let batch = s.batch;
    (0..batch.len())
        .filter(|&j| j != i)
        .flat_map(|j| batch.offsets[j]..batch.offsets[j + 1])
        .map(|k| (k, s.at(i, k) / sigma))
        .collect()
}

/// `LSE({pos} ∪ negs) − pos`, with the gradient of the negatives applied and
/// the coefficient on `pos` returned.
fn cross_entropy_against(
    s: &mut Sims,
    i: usize,
    pos: f64,
    negs: &[(usize, f64)],
    sigma: f64,
    w: f64,
) -> (f64, f64) {
    let mut logits = Vec::with_capacity(negs.len() + 1);
    logits.push(pos);
    logits.extend(negs.iter().map(|(_, l)| *l));
    let (p, lse) = softmax(&logits);
    for ((k, _), pk) in negs.iter().zip(&p[1..]) {
        s.add_logit(i, *k, w * pk, sigma);
    }
    (lse - pos, w * (p[0] - 1.0))
}

fn require_singletons(batch: &Batch) -> Result<(), OptError> {
    match (0..batch.len()).find(|&i| batch.bag_size(i) != 1) {
        Some(i) => Err(OptError::BagSize {
            index: i,
            size: batch.bag_size(i),
        }),
        None => Ok(()),
    }
}

/// Symmetric CLIP cross-entropy. Every bag must hold exactly one text.
pub fn loss_clip(batch: &Batch, cfg: &LossConfig) -> Result<LossGrad, OptError> {
    cfg.validate()?;
    require_singletons(batch)?;
    // With singleton bags both NCE terms reduce to the two CLIP
    // cross-entropies.
    Ok(nce(batch, cfg.sigma))
}

pub fn loss_mil_nce(batch: &Batch, cfg: &LossConfig) -> Result<LossGrad, OptError> {
    cfg.validate()?;
    Ok(nce(batch, cfg.sigma))
}

fn nce(batch: &Batch, sigma: f64) -> LossGrad {
    let mut s = Sims::new(batch);
    let w = term_weight(batch.len());
    let mut total = 0.0;
    for i in 0..batch.len() {
        total += nce_i2t(&mut s, i, sigma, w);
        total += nce_t2i(&mut s, i, sigma, w);
    }
    s.finish(w * total)
}

pub fn loss_mil_max(batch: &Batch, cfg: &LossConfig) -> Result<LossGrad, OptError> {
    cfg.validate()?;
    let sigma = cfg.sigma;
    let mut s = Sims::new(batch);
    let w = term_weight(batch.len());
    let mut total = 0.0;
    for i in 0..batch.len() {
        let own: Vec<f64> = (batch.offsets[i]..batch.offsets[i + 1])
            .map(|k| s.at(i, k))
            .collect();
        let k_best = batch.offsets[i] + select_max_member(&own);
        let pos = s.at(i, k_best) / sigma;
        let negs = negatives(&s, i, sigma);
        let (ce, coef) = cross_entropy_against(&mut s, i, pos, &negs, sigma, w);
        s.add_logit(i, k_best, coef, sigma);
        total += ce;
        total += best_member_t2i(&mut s, i, sigma, w);
    }
    Ok(s.finish(w * total))
}

pub fn loss_mil_softmax(batch: &Batch, cfg: &LossConfig) -> Result<LossGrad, OptError> {
    cfg.validate()?;
    let (sigma, sigma_sm) = (cfg.sigma, cfg.sigma_sm);
    let mut s = Sims::new(batch);
    let w = term_weight(batch.len());
    let mut total = 0.0;
    for i in 0..batch.len() {
        let own: Vec<usize> = (batch.offsets[i]..batch.offsets[i + 1]).collect();
        let sm_logits: Vec<f64> = own.iter().map(|&k| s.at(i, k) / sigma_sm).collect();
        let joint: Vec<f64> = own
            .iter()
            .zip(&sm_logits)
            .map(|(&k, l)| l + s.at(i, k) / sigma)
            .collect();
        // log Σ_m S_m exp(a_m/σ) with S = softmax(a/σ_sm).
        let (q, lse_sm) = softmax(&sm_logits);
        let (p, lse_joint) = softmax(&joint);
        let pos = lse_joint - lse_sm;
        let negs = negatives(&s, i, sigma);
        let (ce, coef) = cross_entropy_against(&mut s, i, pos, &negs, sigma, w);
        for (m, &k) in own.iter().enumerate() {
            // ∂pos/∂a_m = p_m (1/σ_sm + 1/σ) − q_m / σ_sm
            s.add_logit(i, k, coef * p[m], sigma);
            s.add_raw(i, k, coef * (p[m] - q[m]) / sigma_sm);
        }
        total += ce;
        total += best_member_t2i(&mut s, i, sigma, w);
    }
    Ok(s.finish(w * total))
}

/// Evaluate the configured loss. `ChooseOne` expects a batch that already
/// went through [`choose_one`].
pub fn evaluate(batch: &Batch, cfg: &LossConfig) -> Result<LossGrad, OptError> {
    match cfg.kind {
        LossKind::Clip | LossKind::ChooseOne => loss_clip(batch, cfg),
        LossKind::MilMax => loss_mil_max(batch, cfg),
        LossKind::MilSoftmax => loss_mil_softmax(batch, cfg),
        LossKind::MilNce => loss_mil_nce(batch, cfg),
    }
}

/// Indices of the bag members picked uniformly at random, one per bag.
pub fn choose_members<R: Rng + ?Sized>(bag_sizes: &[usize], rng: &mut R) -> Vec<usize> {
    bag_sizes
        .iter()
        .map(|&n| if n == 1 { 0 } else { rng.gen_range(0..n) })
        .collect()
}

/// Reduce every bag to one uniformly chosen member.
pub fn choose_one<R: Rng + ?Sized>(batch: &Batch, rng: &mut R) -> Batch {
    let sizes: Vec<usize> = (0..batch.len()).map(|i| batch.bag_size(i)).collect();
    let picks = choose_members(&sizes, rng);
    let d = batch.dim;
    let mut texts = Vec::with_capacity(batch.len() * d);
    for (i, m) in picks.into_iter().enumerate() {
        texts.extend_from_slice(batch.text(batch.text_index(i, m)));
    }
    Batch {
        dim: d,
        images: batch.images.clone(),
        texts,
        offsets: (0..=batch.len()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(kind: LossKind, sigma: f64) -> LossConfig {
        LossConfig {
            kind,
            sigma,
            sigma_sm: 0.07,
        }
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let b = Batch::new(vec![vec![0.3, 0.4]], vec![vec![vec![1.0, -2.0]]]).unwrap();
        assert_eq!(
            loss_clip(&b, &cfg(LossKind::Clip, 0.07)).unwrap().value,
            0.0
        );
    }

    #[test]
    fn orthogonal_pairs_closed_form() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let b = Batch::new(vec![e1.clone(), e2.clone()], vec![vec![e1], vec![e2]]).unwrap();
        let l = loss_clip(&b, &cfg(LossKind::Clip, 1.0)).unwrap().value;
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 5e-5);
    }

    #[test]
    fn clip_rejects_bags() {
        let b = Batch::new(vec![vec![1.0]], vec![vec![vec![1.0], vec![0.5]]]).unwrap();
        assert_eq!(
            loss_clip(&b, &cfg(LossKind::Clip, 0.1)),
            Err(OptError::BagSize { index: 0, size: 2 })
        );
    }

    #[test]
    fn batch_validation() {
        assert_eq!(Batch::new(vec![], vec![]), Err(OptError::EmptyBatch));
        assert_eq!(
            Batch::new(vec![vec![1.0]], vec![vec![]]),
            Err(OptError::EmptyBag(0))
        );
        assert!(matches!(
            Batch::new(vec![vec![1.0]], vec![vec![vec![1.0, 2.0]]]),
            Err(OptError::DimMismatch { .. })
        ));
        let b = Batch::new(vec![vec![1.0]], vec![vec![vec![1.0]]]).unwrap();
        assert!(loss_mil_nce(&b, &cfg(LossKind::MilNce, 0.0)).is_err());
    }

    #[test]
    fn argmax_ties_and_shift() {
        assert_eq!(select_max_member(&[0.1, 0.5, 0.5, 0.2]), 1);
        let v = [0.3, -0.2, 0.9, 0.1];
        let shifted: Vec<f64> = v.iter().map(|x| x + 17.5).collect();
        assert_eq!(select_max_member(&v), select_max_member(&shifted));
    }

    #[test]
    fn choose_one_keeps_singletons_and_is_seeded() {
        let b = Batch::new(
            vec![vec![1.0], vec![2.0]],
            vec![vec![vec![3.0]], vec![vec![4.0], vec![5.0], vec![6.0]]],
        )
        .unwrap();
        let a = choose_one(&b, &mut ChaCha8Rng::seed_from_u64(9));
        let c = choose_one(&b, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, c);
        assert_eq!(a.text(0), &[3.0]);
        assert_eq!(a.text_count(), 2);
    }

    #[test]
    fn choose_one_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            counts[choose_members(&[5], &mut rng)[0]] += 1;
        }
        for c in counts {
            assert!((1850..=2150).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn loss_kind_names() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert_eq!("mil_nce".parse::<LossKind>().unwrap(), LossKind::MilNce);
        assert!("softmax".parse::<LossKind>().is_err());
    }
}
