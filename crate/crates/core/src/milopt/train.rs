//! Mini-batch Adam training over frozen embeddings.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adapter::{loss_and_grad, AdapterModel};
use super::loss::{choose_one, Batch, LossConfig, LossKind, SIGMA_MAX, SIGMA_MIN};
use super::OptError;
use crate::bagger::BagManifest;
use crate::embedstore::{unit, EmbeddingStore};
use crate::item_key;
use crate::splits::{Setting, SplitSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epoch count used instead of `epochs` for zero-shot and few-shot
    /// splits, which overfit with the full schedule.
    pub epochs_override: Option<usize>,
    /// Train against one pre-concatenated text per bag, stored under
    /// `<doc>/cat::<image_id>`, instead of the bag members.
    pub concatenated_texts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs_override: Some(2),
            concatenated_texts: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), OptError> {
        let ok = self.lr > 0.0
            && self.batch_size > 0
            && self.epochs > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.epochs_override != Some(0);
        if ok {
            Ok(())
        } else {
            Err(OptError::Config(format!(
                "invalid training config {self:?}"
            )))
        }
    }

    pub fn epochs_for(&self, setting: Setting) -> usize {
        match (setting, self.epochs_override) {
            (Setting::ZeroShot | Setting::FewShot, Some(e)) => e,
            _ => self.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub sigma: f64,
}

/// One image bag, with corpus-wide embedding keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainUnit {
    pub image: String,
    pub texts: Vec<String>,
}

/// Item id of a bag's concatenated pseudo-text.
pub fn concatenated_id(image_id: &str) -> String {
    format!("cat::{image_id}")
}

/// Image bags of the documents in `split.train`, in document-id order.
/// With `concatenated`, each bag is the single pseudo-text of its image.
pub fn training_units(
    manifests: &[BagManifest],
    split: &SplitSpec,
    concatenated: bool,
) -> Vec<TrainUnit> {
    let train: BTreeSet<&str> = split.train.iter().map(String::as_str).collect();
    let mut docs: Vec<&BagManifest> = manifests
        .iter()
        .filter(|m| train.contains(m.doc_id.as_str()))
        .collect();
    docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    docs.into_iter()
        .flat_map(|m| {
            m.image_bags.iter().map(move |b| TrainUnit {
                image: item_key(&m.doc_id, &b.image_id),
                texts: if concatenated {
                    vec![item_key(&m.doc_id, &concatenated_id(&b.image_id))]
                } else {
                    b.text_ids.iter().map(|t| item_key(&m.doc_id, t)).collect()
                },
            })
        })
        .collect()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig, t: i32) {
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g;
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

fn unit_row(store: &EmbeddingStore, key: &str) -> Result<Vec<f64>, OptError> {
    let v = store
        .get_f64(key)
        .ok_or_else(|| OptError::MissingEmbedding(key.to_string()))?;
    unit(&v)
        .ok_or_else(|| OptError::Store(crate::embedstore::StoreError::ZeroNormRow(key.to_string())))
}

/// Fine-tune `model` on the training documents of `split`.
///
/// Image bags are shuffled every epoch with the configured seed and cut into
/// batches; input embeddings are unit-normalized before the adapter. The
/// temperature is optimized in log space and clamped to
/// `[SIGMA_MIN, SIGMA_MAX]` after every step.
pub fn train(
    image_store: &EmbeddingStore,
    text_store: &EmbeddingStore,
    manifests: &[BagManifest],
    split: &SplitSpec,
    loss_cfg: &LossConfig,
    model: &AdapterModel,
    cfg: &TrainConfig,
) -> Result<(AdapterModel, Vec<EpochLog>), OptError> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let dim = model.dim;
    for store in [image_store, text_store] {
        if store.dim() != dim {
            return Err(OptError::DimMismatch {
                expected: dim,
                got: store.dim(),
            });
        }
    }

    let units = training_units(manifests, split, cfg.concatenated_texts);
    if units.is_empty() {
        return Err(OptError::EmptySplit);
    }
    let mut images = Vec::with_capacity(units.len());
    let mut bags = Vec::with_capacity(units.len());
    for u in &units {
        images.push(unit_row(image_store, &u.image)?);
        bags.push(
            u.texts
                .iter()
                .map(|t| unit_row(text_store, t))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }

    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam_image = Adam::new(model.image.params.len());
    let mut adam_text = Adam::new(model.text.params.len());
    let mut adam_sigma = Adam::new(1);
    let mut log_sigma = [model.sigma.ln()];
    let learns = model.image.learns() || model.text.learns() || model.sigma_trainable;

    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut log = Vec::new();
    let mut step = 0i32;
    for epoch in 0..cfg.epochs_for(split.setting) {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut flat_images = Vec::with_capacity(chunk.len() * dim);
            let mut flat_texts = Vec::new();
            let mut offsets = vec![0];
            for &u in chunk {
                flat_images.extend_from_slice(&images[u]);
                for t in &bags[u] {
                    flat_texts.extend_from_slice(t);
                }
                offsets.push(offsets.last().unwrap() + bags[u].len());
            }
            let mut batch = Batch::from_flat(dim, flat_images, flat_texts, offsets);
            if loss_cfg.kind == LossKind::ChooseOne {
                batch = choose_one(&batch, &mut rng);
            }
            let (value, grad) = loss_and_grad(&model, &batch, loss_cfg)?;
            total += value;
            batches += 1;
            if !learns {
                continue;
            }
            step += 1;
            if model.image.learns() {
                adam_image.step(&mut model.image.params, &grad.image, cfg, step);
            }
            if model.text.learns() {
                adam_text.step(&mut model.text.params, &grad.text, cfg, step);
            }
            if model.sigma_trainable {
                adam_sigma.step(&mut log_sigma, &[grad.sigma * model.sigma], cfg, step);
                log_sigma[0] = log_sigma[0].clamp(SIGMA_MIN.ln(), SIGMA_MAX.ln());
                model.sigma = log_sigma[0].exp().clamp(SIGMA_MIN, SIGMA_MAX);
            }
        }
        log.push(EpochLog {
            epoch: epoch + 1,
            mean_loss: total / batches as f64,
            sigma: model.sigma,
        });
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagger::{MilBag, Provenance};
    use crate::embedstore::Modality;
    use crate::milopt::{AdapterSpec, Lock};

    fn fixture() -> (EmbeddingStore, EmbeddingStore, Vec<BagManifest>, SplitSpec) {
        let mut imgs = EmbeddingStore::new(Modality::Image, 3);
        let mut txts = EmbeddingStore::new(Modality::Text, 3);
        let mut bags = Vec::new();
        for i in 0..6 {
            let x = [(i as f32).cos(), (i as f32).sin(), 0.3];
            imgs.push(item_key("d", &format!("i{i}")), &x).unwrap();
            txts.push(item_key("d", &format!("t{i}")), &[x[1], x[0], 0.5])
                .unwrap();
            txts.push(item_key("d", &format!("u{i}")), &[0.1, x[0], x[1]])
                .unwrap();
            bags.push(MilBag {
                image_id: format!("i{i}"),
                text_ids: vec![format!("t{i}"), format!("u{i}")],
                provenance: vec![Provenance::Left, Provenance::Right],
            });
        }
        let manifest = BagManifest::new("d".into(), bags, vec![]);
        let split = SplitSpec {
            setting: Setting::ManyShot,
            target: "m".into(),
            repeat: 0,
            train: vec!["d".into()],
            test: vec![],
            seed: 0,
        };
        (imgs, txts, vec![manifest], split)
    }

    #[test]
    fn frozen_model_is_unchanged() {
        let (i, t, m, s) = fixture();
        let model = AdapterModel::identity(3, 0.07);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let (out, log) = train(&i, &t, &m, &s, &LossConfig::default(), &model, &cfg).unwrap();
        assert_eq!(out, model);
        assert_eq!(log.len(), 3);
        assert!(log.iter().all(|e| e.mean_loss.is_finite()));
    }

    #[test]
    fn seeded_runs_are_identical_and_sigma_clamped() {
        let (i, t, m, s) = fixture();
        let spec = AdapterSpec {
            lock: Lock::None,
            rank: Some(2),
            ..Default::default()
        };
        let model = AdapterModel::from_spec(&spec, 3, &mut ChaCha8Rng::seed_from_u64(1));
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 4,
            lr: 0.5,
            ..Default::default()
        };
        let loss = LossConfig {
            kind: LossKind::ChooseOne,
            ..Default::default()
        };
        let a = train(&i, &t, &m, &s, &loss, &model, &cfg).unwrap();
        let b = train(&i, &t, &m, &s, &loss, &model, &cfg).unwrap();
        assert_eq!(a, b);
        assert!((SIGMA_MIN..=SIGMA_MAX).contains(&a.0.sigma));
        assert_ne!(a.0, model);
    }

    #[test]
    fn missing_embedding_and_empty_split() {
        let (i, t, m, mut s) = fixture();
        let model = AdapterModel::identity(3, 0.07);
        let cfg = TrainConfig::default();
        let small = EmbeddingStore::new(Modality::Image, 3);
        assert_eq!(
            train(&small, &t, &m, &s, &LossConfig::default(), &model, &cfg),
            Err(OptError::MissingEmbedding("d/i0".into()))
        );
        s.train.clear();
        assert_eq!(
            train(&i, &t, &m, &s, &LossConfig::default(), &model, &cfg),
            Err(OptError::EmptySplit)
        );
    }

    #[test]
    fn epoch_override_applies_to_zero_and_few_shot() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epochs_for(Setting::ZeroShot), 2);
        assert_eq!(cfg.epochs_for(Setting::FewShot), 2);
        assert_eq!(cfg.epochs_for(Setting::ManyShot), 20);
        assert_eq!(cfg.epochs_for(Setting::OneShot), 20);
    }

    #[test]
    fn concatenated_mode_reads_one_pseudo_text_per_bag() {
        let (i, mut t, m, s) = fixture();
        let units = training_units(&m, &s, true);
        assert!(units
            .iter()
            .all(|u| u.texts.len() == 1 && u.texts[0].contains("/cat::i")));
        let model = AdapterModel::from_spec(
            &AdapterSpec::default(),
            3,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let cfg = TrainConfig {
            epochs: 1,
            concatenated_texts: true,
            ..Default::default()
        };
        let missing = train(&i, &t, &m, &s, &LossConfig::default(), &model, &cfg);
        assert!(matches!(missing, Err(OptError::MissingEmbedding(_))));
        for k in 0..6 {
            t.push(
                item_key("d", &concatenated_id(&format!("i{k}"))),
                &[0.2, 0.4, k as f32],
            )
            .unwrap();
        }
        let (_, log) = train(&i, &t, &m, &s, &LossConfig::default(), &model, &cfg).unwrap();
        assert_eq!(log.len(), 1);
    }
}
