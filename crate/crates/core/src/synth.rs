//! Synthetic corpora with planted image/text correspondences.
//!
//! `K` latent concepts live on the unit sphere. An image embedding is its
//! concept plus Gaussian noise; a text embedding is the concept rotated by a
//! fixed random orthogonal map plus noise, so the two modalities only line
//! up after a learned transform. Every page carries one picture and five
//! texts laid out around it (a caption inside, one on each side); exactly
//! one of the five is aligned with the picture's concept, the rest are
//! distractors drawn from concepts used nowhere else in the document.
//!
//! With `dup_rate > 0` a page may reuse an earlier page's picture (same
//! concept, same raster bytes), which the dedup stage should find.

use std::fs;
use std::io;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dedup::Raster;
use crate::embedstore::{unit, write_store, EmbeddingStore, Modality};
use crate::item_key;
use crate::layout::{write_layout, BBox, ImageRegion, LayoutDocument, Page, TextBlock};

pub const PAGE_WIDTH: f64 = 600.0;
pub const PAGE_HEIGHT: f64 = 800.0;
pub const IMAGE_BOX: [f64; 4] = [200.0, 300.0, 400.0, 500.0];
/// Caption (inside the picture), left, right, top, bottom.
pub const TEXT_BOXES: [[f64; 4]; 5] = [
    [220.0, 460.0, 380.0, 490.0],
    [40.0, 380.0, 160.0, 420.0],
    [440.0, 380.0, 560.0, 420.0],
    [220.0, 220.0, 380.0, 260.0],
    [220.0, 540.0, 380.0, 580.0],
];
pub const IMAGE_FILE: &str = "image.emb";
pub const TEXT_FILE: &str = "text.emb";

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub documents: usize,
    pub pages: usize,
    pub manufacturers: usize,
    pub concepts: usize,
    pub dim: usize,
    /// Noise norm relative to the unit concept (per-coordinate std is
    /// `noise / sqrt(dim)`).
    pub noise: f64,
    pub dup_rate: f64,
    pub raster_side: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            documents: 500,
            pages: 20,
            manufacturers: 1,
            concepts: 200,
            dim: 32,
            noise: 0.5,
            dup_rate: 0.0,
            raster_side: 16,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.documents == 0 || self.pages == 0 || self.manufacturers == 0 || self.dim == 0 {
            return bad("documents, pages, manufacturers and dim must be positive");
        }
        if self.manufacturers > self.documents {
            return bad("more manufacturers than documents");
        }
        if self.concepts < 5 * self.pages {
            return bad("need at least 5 concepts per page for distinct distractors");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(0.0..=1.0).contains(&self.dup_rate) {
            return bad("noise must be finite and >= 0, dup_rate in [0, 1]");
        }
        if self.raster_side < 2 {
            return bad("raster_side must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub documents: Vec<LayoutDocument>,
    pub images: EmbeddingStore,
    pub texts: EmbeddingStore,
    /// Raster per image, keyed by the image's `path`.
    pub rasters: Vec<(String, Raster)>,
    /// `(image key, aligned text key)` for every page.
    pub aligned: Vec<(String, String)>,
}

fn gaussian<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn noisy<R: Rng>(base: &[f64], noise: f64, rng: &mut R) -> Vec<f32> {
    let s = noise / (base.len() as f64).sqrt();
    let v: Vec<f64> = base
        .iter()
        .map(|b| b + s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    unit(&v)
        .expect("noisy concept is non-zero")
        .iter()
        .map(|&x| x as f32)
        .collect()
}

fn doc_seed(seed: u64, doc: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(doc as u64 + 1)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let concepts: Vec<Vec<f64>> = (0..cfg.concepts)
        .map(|_| loop {
            if let Some(u) = unit(&gaussian(&mut rng, d)) {
                break u;
            }
        })
        .collect();
    let q = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal))
        .qr()
        .q();
    let rotated: Vec<Vec<f64>> = concepts
        .iter()
        .map(|c| {
            (&q * nalgebra::DVector::from_column_slice(c))
                .iter()
                .copied()
                .collect()
        })
        .collect();

    let mut out = SynthCorpus {
        documents: Vec::with_capacity(cfg.documents),
        images: EmbeddingStore::new(Modality::Image, d),
        texts: EmbeddingStore::new(Modality::Text, d),
        rasters: Vec::new(),
        aligned: Vec::new(),
    };
    let px = cfg.raster_side * cfg.raster_side;
    for di in 0..cfg.documents {
        let mut rng = ChaCha8Rng::seed_from_u64(doc_seed(cfg.seed, di));
        let doc_id = format!("doc{di:04}");
        let mut perm: Vec<usize> = (0..cfg.concepts).collect();
        perm.shuffle(&mut rng);
        let (own, spare) = perm.split_at(cfg.pages);
        let mut distractors = spare.iter().copied();

        // (concept, raster) per page, earlier pictures reused on duplicates.
        let mut pictures: Vec<(usize, Vec<u8>)> = Vec::with_capacity(cfg.pages);
        let mut pages = Vec::with_capacity(cfg.pages);
        for p in 0..cfg.pages {
            let picture = if p > 0 && rng.gen_bool(cfg.dup_rate) {
                pictures[rng.gen_range(0..p)].clone()
            } else {
                (own[p], (0..px).map(|_| rng.gen()).collect())
            };
            let concept = picture.0;
            let page_no = p as u32 + 1;
            let image_id = format!("p{page_no:02}_img");
            let path = format!("images/{doc_id}/{image_id}.pgm");
            out.images
                .push(
                    item_key(&doc_id, &image_id),
                    &noisy(&concepts[concept], cfg.noise, &mut rng),
                )
                .expect("fresh image id");
            out.rasters.push((
                path.clone(),
                Raster::new(cfg.raster_side, cfg.raster_side, picture.1.clone()),
            ));
            pictures.push(picture);

            let slot = rng.gen_range(0..TEXT_BOXES.len());
            let mut texts = Vec::with_capacity(TEXT_BOXES.len());
            for (k, bbox) in TEXT_BOXES.iter().enumerate() {
                let c = if k == slot {
                    concept
                } else {
                    distractors.next().expect("validated concept budget")
                };
                let id = format!("p{page_no:02}_t{k}");
                out.texts
                    .push(
                        item_key(&doc_id, &id),
                        &noisy(&rotated[c], cfg.noise, &mut rng),
                    )
                    .expect("fresh text id");
                if k == slot {
                    out.aligned
                        .push((item_key(&doc_id, &image_id), item_key(&doc_id, &id)));
                }
                texts.push(TextBlock {
                    id,
                    bbox: BBox::from(*bbox),
                    text: format!("item {c:03}"),
                });
            }
            pages.push(Page {
                page_no,
                width: PAGE_WIDTH,
                height: PAGE_HEIGHT,
                texts,
                images: vec![ImageRegion {
                    id: image_id,
                    bbox: BBox::from(IMAGE_BOX),
                    pixels_ref: path,
                }],
            });
        }
        out.documents.push(LayoutDocument {
            doc_id,
            manufacturer: format!("mfr{:02}", di % cfg.manufacturers),
            pages,
        });
    }
    Ok(out)
}

/// Write `<dir>/<doc_id>.json`, the rasters under `<dir>/images/` and both
/// embedding stores under `<dir>/embeddings/`.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir.join("embeddings"))?;
    for doc in &corpus.documents {
        fs::write(dir.join(format!("{}.json", doc.doc_id)), write_layout(doc))?;
    }
    for (path, raster) in &corpus.rasters {
        let target = dir.join(path);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        let img = image::GrayImage::from_raw(
            raster.width as u32,
            raster.height as u32,
            raster.pixels.clone(),
        )
        .expect("raster buffer matches its shape");
        let mut bytes = Vec::new();
        image::codecs::pnm::PnmEncoder::new(&mut bytes)
            .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(
                image::codecs::pnm::SampleEncoding::Binary,
            ))
            .encode(
                img.as_raw().as_slice(),
                img.width(),
                img.height(),
                image::ExtendedColorType::L8,
            )
            .map_err(io::Error::other)?;
        fs::write(target, bytes)?;
    }
    for (store, name) in [(&corpus.images, IMAGE_FILE), (&corpus.texts, TEXT_FILE)] {
        let bytes = write_store(store).map_err(io::Error::other)?;
        fs::write(dir.join("embeddings").join(name), bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagger::build_manifest;

    fn small() -> SynthConfig {
        SynthConfig {
            documents: 4,
            pages: 6,
            manufacturers: 2,
            concepts: 40,
            dim: 8,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.documents, b.documents);
        assert_eq!(
            write_store(&a.images).unwrap(),
            write_store(&b.images).unwrap()
        );
        assert_eq!(
            write_store(&a.texts).unwrap(),
            write_store(&b.texts).unwrap()
        );
    }

    #[test]
    fn layout_bags_every_text() {
        let c = generate(&small()).unwrap();
        for doc in &c.documents {
            let m = build_manifest(doc);
            assert_eq!(m.image_bags.len(), 6);
            assert!(m.image_bags.iter().all(|b| b.text_ids.len() == 5));
        }
        assert_eq!(c.aligned.len(), 24);
        assert_eq!(c.texts.len(), 120);
    }

    #[test]
    fn aligned_text_matches_after_rotation_only() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..small()
        };
        let c = generate(&cfg).unwrap();
        // Zero noise: image = concept, text = Q concept, so |cos| <= 1 and the
        // norms are exact.
        for (i, t) in &c.aligned {
            let x = c.images.get(i).unwrap();
            let y = c.texts.get(t).unwrap();
            let nx: f32 = x.iter().map(|v| v * v).sum();
            let ny: f32 = y.iter().map(|v| v * v).sum();
            assert!((nx - 1.0).abs() < 1e-5 && (ny - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn duplicates_share_raster() {
        let cfg = SynthConfig {
            dup_rate: 1.0,
            ..small()
        };
        let c = generate(&cfg).unwrap();
        // Every page after the first copies an earlier one: one raster per doc.
        for doc in &c.documents {
            let rasters: std::collections::BTreeSet<&Vec<u8>> = c
                .rasters
                .iter()
                .filter(|(p, _)| p.contains(&doc.doc_id))
                .map(|(_, r)| &r.pixels)
                .collect();
            assert_eq!(rasters.len(), 1);
        }
    }

    #[test]
    fn rejects_tight_concept_budget() {
        let cfg = SynthConfig {
            concepts: 29,
            ..small()
        };
        assert!(generate(&cfg).is_err());
    }
}
