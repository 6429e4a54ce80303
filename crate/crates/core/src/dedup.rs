//! Repeated-image detection within a document.
//!
//! Candidate pairs come either from a nearest-neighbour search over image
//! feature vectors or from all pairs in the document. A pair is accepted when
//! the normalized cross-correlation of the two rasters exceeds a threshold,
//! and accepted pairs are closed transitively into identity groups. Text bags
//! of identical images are then merged by union.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bagger::{BagManifest, Provenance};
use crate::embedstore::{unit, EmbeddingStore};
use crate::unionfind::UnionFind;

#[derive(Debug, Error)]
pub enum DedupError {
    #[error("cannot load raster {path}: {reason}")]
    RasterLoad { path: String, reason: String },
    #[error("missing feature vector for image {0}")]
    MissingFeature(String),
    #[error("identity groups do not partition the manifest images: {0}")]
    PartitionMismatch(String),
    #[error("invalid dedup config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupConfig {
    pub ncc_threshold: f64,
    pub knn: usize,
    pub resize_side: usize,
    pub use_feature_prefilter: bool,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig {
            ncc_threshold: 0.7,
            knn: 10,
            resize_side: 224,
            use_feature_prefilter: false,
        }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<(), DedupError> {
        if !(self.ncc_threshold > 0.0 && self.ncc_threshold <= 1.0) {
            return Err(DedupError::Config(format!(
                "ncc_threshold must lie in (0, 1], got {}",
                self.ncc_threshold
            )));
        }
        if self.knn == 0 || self.resize_side == 0 {
            return Err(DedupError::Config(
                "knn and resize_side must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel buffer size");
        assert!(width > 0 && height > 0, "empty raster");
        Raster {
            width,
            height,
            pixels,
        }
    }

    /// Load a PNG or PGM file and convert it to grayscale.
    pub fn load(path: &Path) -> Result<Self, DedupError> {
        let img = image::open(path).map_err(|e| DedupError::RasterLoad {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        if w == 0 || h == 0 {
            return Err(DedupError::RasterLoad {
                path: path.display().to_string(),
                reason: "empty image".into(),
            });
        }
        Ok(Raster::new(w as usize, h as usize, gray.into_raw()))
    }

    fn constant_value(&self) -> Option<u8> {
        let first = self.pixels[0];
        self.pixels.iter().all(|&p| p == first).then_some(first)
    }
}

/// Bilinear resampling to `side × side` with pixel-centre alignment.
pub fn resize_bilinear(r: &Raster, side: usize) -> Vec<f64> {
    let sample = |x: usize, y: usize| r.pixels[y * r.width + x] as f64;
    let axis = |dst: usize, src_len: usize| {
        let s = ((dst as f64 + 0.5) * src_len as f64 / side as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(side * side);
    for dy in 0..side {
        let (y0, y1, fy) = axis(dy, r.height);
        for dx in 0..side {
            let (x0, x1, fx) = axis(dx, r.width);
            let top = sample(x0, y0) * (1.0 - fx) + sample(x1, y0) * fx;
            let bottom = sample(x0, y1) * (1.0 - fx) + sample(x1, y1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Raster reduced to a zero-mean unit vector, ready for correlation.
#[derive(Debug, Clone)]
pub struct Canonical {
    vector: Option<Vec<f64>>,
    constant: Option<u8>,
}

pub fn canonicalize(r: &Raster, side: usize) -> Canonical {
    let mut v = resize_bilinear(r, side);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Resampling a constant image leaves rounding-level residue only.
    let vector = (norm > 1e-9 * v.len() as f64).then(|| v.iter().map(|x| x / norm).collect());
    Canonical {
        vector,
        constant: r.constant_value(),
    }
}

pub fn ncc_canonical(a: &Canonical, b: &Canonical) -> f64 {
    match (&a.vector, &b.vector) {
        (Some(x), Some(y)) => x.iter().zip(y).map(|(p, q)| p * q).sum(),
        (None, None) if a.constant.is_some() && a.constant == b.constant => 1.0,
        _ => 0.0,
    }
}

/// Normalized cross-correlation in `[-1, 1]` after grayscale bilinear
/// canonicalization to `resize_side²`. Zero-variance inputs give 0, unless
/// both are the same constant image, which gives 1.
pub fn ncc(a: &Raster, b: &Raster, cfg: &DedupConfig) -> f64 {
    ncc_canonical(
        &canonicalize(a, cfg.resize_side),
        &canonicalize(b, cfg.resize_side),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityGroups {
    pub doc_id: String,
    /// Each group sorted; groups ordered by their first (representative) id.
    pub groups: Vec<Vec<String>>,
}

impl IdentityGroups {
    pub fn singletons<S: AsRef<str>>(doc_id: &str, ids: &[S]) -> Self {
        let mut groups: Vec<Vec<String>> =
            ids.iter().map(|i| vec![i.as_ref().to_string()]).collect();
        groups.sort();
        IdentityGroups {
            doc_id: doc_id.to_string(),
            groups,
        }
    }

    pub fn representative(&self, id: &str) -> Option<&str> {
        self.groups
            .iter()
            .find(|g| g.iter().any(|m| m == id))
            .map(|g| g[0].as_str())
    }

    /// Image id to the full group it belongs to.
    pub fn membership(&self) -> HashMap<&str, &[String]> {
        self.groups
            .iter()
            .flat_map(|g| g.iter().map(move |m| (m.as_str(), g.as_slice())))
            .collect()
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("groups always serialize");
        out.push(b'\n');
        out
    }
}

fn cosine_neighbours(vectors: &[Vec<f64>], k: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, vi) in vectors.iter().enumerate() {
        let mut scored: Vec<(f64, usize)> = vectors
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, vj)| (vi.iter().zip(vj).map(|(a, b)| a * b).sum(), j))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        pairs.extend(
            scored
                .into_iter()
                .take(k)
                .map(|(_, j)| (i.min(j), i.max(j))),
        );
    }
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

/// Partition a document's images into identity groups.
///
/// With the feature prefilter enabled only each image's `knn` nearest
/// neighbours (cosine over `features`) are correlated; otherwise every pair
/// is. Accepted pairs (`ncc > ncc_threshold`) are closed transitively.
pub fn find_identities(
    doc_id: &str,
    doc_images: &[(String, Raster)],
    features: Option<&EmbeddingStore>,
    cfg: &DedupConfig,
) -> Result<IdentityGroups, DedupError> {
    cfg.validate()?;
    let n = doc_images.len();
    let candidates: Vec<(usize, usize)> = match (cfg.use_feature_prefilter, features) {
        (true, Some(store)) => {
            let vectors = doc_images
                .iter()
                .map(|(id, _)| {
                    let v = store
                        .get_f64(id)
                        .ok_or_else(|| DedupError::MissingFeature(id.clone()))?;
                    Ok(unit(&v).unwrap_or(v))
                })
                .collect::<Result<Vec<_>, DedupError>>()?;
            cosine_neighbours(&vectors, cfg.knn)
        }
        (true, None) => {
            return match doc_images.first() {
                Some((id, _)) => Err(DedupError::MissingFeature(id.clone())),
                None => Ok(IdentityGroups {
                    doc_id: doc_id.to_string(),
                    groups: Vec::new(),
                }),
            };
        }
        (false, _) => (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect(),
    };

    let canon: Vec<Canonical> = doc_images
        .iter()
        .map(|(_, r)| canonicalize(r, cfg.resize_side))
        .collect();
    let mut uf = UnionFind::new(n);
    for (i, j) in candidates {
        if ncc_canonical(&canon[i], &canon[j]) > cfg.ncc_threshold {
            uf.union(i, j);
        }
    }
    let mut groups: Vec<Vec<String>> = uf
        .groups()
        .into_iter()
        .map(|g| {
            let mut ids: Vec<String> = g.into_iter().map(|i| doc_images[i].0.clone()).collect();
            ids.sort();
            ids
        })
        .collect();
    groups.sort();
    Ok(IdentityGroups {
        doc_id: doc_id.to_string(),
        groups,
    })
}

/// Replace the text bag of every identical image by the union over its
/// group. Own texts keep their position; inherited texts are appended in
/// group order and tagged [`Provenance::Identity`]. The bag-size cap does
/// not apply here. Non-singleton groups are attached to the manifest.
pub fn merge_bags(
    manifest: &BagManifest,
    groups: &IdentityGroups,
) -> Result<BagManifest, DedupError> {
    let known: BTreeSet<&str> = manifest
        .image_bags
        .iter()
        .map(|b| b.image_id.as_str())
        .chain(manifest.skipped_images.iter().map(String::as_str))
        .collect();
    let mut seen = BTreeSet::new();
    for id in groups.groups.iter().flatten() {
        if !known.contains(id.as_str()) {
            return Err(DedupError::PartitionMismatch(format!("unknown image {id}")));
        }
        if !seen.insert(id.as_str()) {
            return Err(DedupError::PartitionMismatch(format!(
                "image {id} in two groups"
            )));
        }
    }
    if let Some(missing) = manifest
        .image_bags
        .iter()
        .find(|b| !seen.contains(b.image_id.as_str()))
    {
        return Err(DedupError::PartitionMismatch(format!(
            "image {} not covered",
            missing.image_id
        )));
    }

    let by_id: BTreeMap<&str, usize> = manifest
        .image_bags
        .iter()
        .enumerate()
        .map(|(i, b)| (b.image_id.as_str(), i))
        .collect();
    let membership = groups.membership();
    let mut out = manifest.clone();
    for bag in &mut out.image_bags {
        let group = membership[bag.image_id.as_str()];
        for other in group {
            if *other == bag.image_id {
                continue;
            }
            if let Some(&j) = by_id.get(other.as_str()) {
                for t in &manifest.image_bags[j].text_ids {
                    if !bag.text_ids.contains(t) {
                        bag.text_ids.push(t.clone());
                        bag.provenance.push(Provenance::Identity);
                    }
                }
            }
        }
    }
    out.identity_groups = groups
        .groups
        .iter()
        .filter(|g| g.len() > 1)
        .cloned()
        .collect();
    out.reinvert();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagger::MilBag;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Raster {
        Raster::new(w, h, (0..w * h).map(|_| rng.gen()).collect())
    }

    #[test]
    fn self_and_inverted_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = DedupConfig::default();
        let a = noise(&mut rng, 50, 37);
        assert!((ncc(&a, &a, &cfg) - 1.0).abs() < 1e-6);
        let inv = Raster::new(
            a.width,
            a.height,
            a.pixels.iter().map(|p| 255 - p).collect(),
        );
        assert!((ncc(&a, &inv, &cfg) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_rasters() {
        let cfg = DedupConfig {
            resize_side: 8,
            ..Default::default()
        };
        let c = Raster::new(4, 4, vec![7; 16]);
        let d = Raster::new(3, 5, vec![7; 15]);
        let e = Raster::new(4, 4, vec![9; 16]);
        assert_eq!(ncc(&c, &d, &cfg), 1.0);
        assert_eq!(ncc(&c, &e, &cfg), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(ncc(&c, &noise(&mut rng, 4, 4), &cfg), 0.0);
    }

    #[test]
    fn symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DedupConfig {
            resize_side: 32,
            ..Default::default()
        };
        for _ in 0..20 {
            let a = noise(&mut rng, 20, 30);
            let b = noise(&mut rng, 33, 17);
            assert!((ncc(&a, &b, &cfg) - ncc(&b, &a, &cfg)).abs() <= 1e-12);
        }
    }

    #[test]
    fn resize_identity_at_same_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = noise(&mut rng, 9, 9);
        let v = resize_bilinear(&a, 9);
        assert!(v.iter().zip(&a.pixels).all(|(x, &p)| *x == p as f64));
    }

    #[test]
    fn single_image_is_singleton() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let imgs = vec![("only".to_string(), noise(&mut rng, 8, 8))];
        let g = find_identities("d", &imgs, None, &DedupConfig::default()).unwrap();
        assert_eq!(g.groups, vec![vec!["only".to_string()]]);
    }

    #[test]
    fn prefilter_requires_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let imgs = vec![("a".to_string(), noise(&mut rng, 8, 8))];
        let cfg = DedupConfig {
            use_feature_prefilter: true,
            ..Default::default()
        };
        let store = EmbeddingStore::new(crate::embedstore::Modality::Image, 2);
        assert!(matches!(
            find_identities("d", &imgs, Some(&store), &cfg),
            Err(DedupError::MissingFeature(id)) if id == "a"
        ));
    }

    fn bag(image: &str, texts: &[&str]) -> MilBag {
        MilBag {
            image_id: image.into(),
            text_ids: texts.iter().map(|t| t.to_string()).collect(),
            provenance: vec![Provenance::Top; texts.len()],
        }
    }

    #[test]
    fn merging_bags() {
        let m = BagManifest::new(
            "d".into(),
            vec![bag("i1", &["t1"]), bag("i2", &["t2"]), bag("i3", &["t3"])],
            vec![],
        );
        let groups = IdentityGroups {
            doc_id: "d".into(),
            groups: vec![vec!["i1".into(), "i2".into()], vec!["i3".into()]],
        };
        let merged = merge_bags(&m, &groups).unwrap();
        assert_eq!(merged.bag("i1").unwrap().text_ids, ["t1", "t2"]);
        assert_eq!(merged.bag("i2").unwrap().text_ids, ["t2", "t1"]);
        assert_eq!(merged.text_bags["t1"], ["i1", "i2"]);
        assert_eq!(merged.identity_groups, vec![vec!["i1", "i2"]]);
        assert_eq!(merge_bags(&merged, &groups).unwrap(), merged);

        let single = IdentityGroups::singletons("d", &["i1", "i2", "i3"]);
        assert_eq!(merge_bags(&m, &single).unwrap(), m);
    }

    #[test]
    fn three_way_union_without_duplicates() {
        let m = BagManifest::new(
            "d".into(),
            vec![
                bag("a", &["t1", "t2"]),
                bag("b", &["t2", "t3"]),
                bag("c", &["t3", "t1", "t4"]),
            ],
            vec![],
        );
        let groups = IdentityGroups {
            doc_id: "d".into(),
            groups: vec![vec!["a".into(), "b".into(), "c".into()]],
        };
        let merged = merge_bags(&m, &groups).unwrap();
        let expected: BTreeSet<&str> = ["t1", "t2", "t3", "t4"].into();
        for b in &merged.image_bags {
            let got: BTreeSet<&str> = b.text_ids.iter().map(String::as_str).collect();
            assert_eq!(got, expected);
            assert_eq!(b.text_ids.len(), 4);
        }
    }

    #[test]
    fn partition_errors() {
        let m = BagManifest::new("d".into(), vec![bag("a", &["t"]), bag("b", &["t"])], vec![]);
        let missing = IdentityGroups::singletons("d", &["a"]);
        assert!(matches!(
            merge_bags(&m, &missing),
            Err(DedupError::PartitionMismatch(_))
        ));
        let twice = IdentityGroups {
            doc_id: "d".into(),
            groups: vec![vec!["a".into(), "b".into()], vec!["b".into()]],
        };
        assert!(matches!(
            merge_bags(&m, &twice),
            Err(DedupError::PartitionMismatch(_))
        ));
        let unknown = IdentityGroups::singletons("d", &["a", "b", "zz"]);
        assert!(matches!(
            merge_bags(&m, &unknown),
            Err(DedupError::PartitionMismatch(_))
        ));
    }
}
