//! Recall@K over per-document candidate pools.
//!
//! Each document is its own retrieval problem: every bagged image queries
//! every bag-member text of the same document and vice versa. A query hits
//! at `k` when any of its positives ranks in the top `k`; ranking is by
//! cosine descending with ties broken by ascending id. Text-to-image
//! positives are widened to whole identity groups, so retrieving a
//! duplicate of the right picture is not penalized.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bagger::BagManifest;
use crate::embedstore::{unit, EmbeddingStore};
use crate::item_key;
use crate::milopt::{AdapterModel, OptError, Side};

pub const KS: [usize; 3] = [1, 5, 10];

/// Random-ranker Recall@1 measured on a large real-world corpus of
/// illustrated manuals (text retrieval, image retrieval). Corpus specific;
/// carried in reports for context and never compared against.
pub const PUBLISHED_CHANCE_I2T: f64 = 0.0114;
pub const PUBLISHED_CHANCE_T2I: f64 = 0.0067;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Recall {
    #[serde(rename = "r@1")]
    pub r1: f64,
    #[serde(rename = "r@5")]
    pub r5: f64,
    #[serde(rename = "r@10")]
    pub r10: f64,
}

impl Recall {
    pub fn at(&self, k: usize) -> f64 {
        match k {
            1 => self.r1,
            5 => self.r5,
            10 => self.r10,
            _ => panic!("recall is tracked at k in {KS:?}"),
        }
    }

    /// Recall from each query's best positive rank (0-based).
    pub fn from_ranks(ranks: &[Option<usize>]) -> Self {
        let rate = |k: usize| {
            if ranks.is_empty() {
                return 0.0;
            }
            ranks.iter().filter(|r| r.is_some_and(|r| r < k)).count() as f64 / ranks.len() as f64
        };
        Recall {
            r1: rate(1),
            r5: rate(5),
            r10: rate(10),
        }
    }

    fn mean<'a>(items: impl Iterator<Item = &'a Recall>) -> Self {
        let (mut acc, mut n) = (Recall::default(), 0usize);
        for r in items {
            acc.r1 += r.r1;
            acc.r5 += r.r5;
            acc.r10 += r.r10;
            n += 1;
        }
        if n > 0 {
            let n = n as f64;
            acc.r1 /= n;
            acc.r5 /= n;
            acc.r10 /= n;
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Chance {
    pub i2t: f64,
    pub t2i: f64,
}

impl Chance {
    fn mean<'a>(items: impl Iterator<Item = &'a Chance>) -> Self {
        let (mut acc, mut n) = (Chance::default(), 0usize);
        for c in items {
            acc.i2t += c.i2t;
            acc.t2i += c.t2i;
            n += 1;
        }
        if n > 0 {
            acc.i2t /= n as f64;
            acc.t2i /= n as f64;
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocMetrics {
    pub doc_id: String,
    pub n_images: usize,
    pub n_texts: usize,
    pub i2t: Recall,
    pub t2i: Recall,
    pub chance: Chance,
}

/// Best-positive rank of every query, in pool order.
#[derive(Debug, Clone, PartialEq)]
pub struct DocHits {
    pub images: Vec<String>,
    pub texts: Vec<String>,
    pub i2t: Vec<Option<usize>>,
    pub t2i: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_documents: usize,
    pub i2t: Recall,
    pub t2i: Recall,
    pub chance: Chance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub documents: Vec<DocMetrics>,
    pub manufacturers: BTreeMap<String, Summary>,
    /// Mean over manufacturers of the per-manufacturer means.
    pub overall: Summary,
    pub published_chance: Chance,
}

/// Retrieval pools of one document: bagged images and bag-member texts,
/// both sorted by id, plus the positive sets.
pub struct Pools {
    pub images: Vec<String>,
    pub texts: Vec<String>,
    /// Per image, indices into `texts`.
    pub i2t: Vec<Vec<usize>>,
    /// Per text, indices into `images`, identity groups included.
    pub t2i: Vec<Vec<usize>>,
}

pub fn pools(manifest: &BagManifest) -> Pools {
    let images: Vec<String> = manifest
        .image_bags
        .iter()
        .map(|b| b.image_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let texts: Vec<String> = manifest
        .image_bags
        .iter()
        .flat_map(|b| b.text_ids.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let img_pos: HashMap<&str, usize> = images
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let txt_pos: HashMap<&str, usize> = texts
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mut group_of: HashMap<&str, &[String]> = HashMap::new();
    for g in &manifest.identity_groups {
        for id in g {
            group_of.insert(id.as_str(), g.as_slice());
        }
    }

    let mut i2t = vec![BTreeSet::new(); images.len()];
    let mut t2i = vec![BTreeSet::new(); texts.len()];
    for bag in &manifest.image_bags {
        let i = img_pos[bag.image_id.as_str()];
        let credited: Vec<usize> = match group_of.get(bag.image_id.as_str()) {
            Some(g) => g
                .iter()
                .filter_map(|id| img_pos.get(id.as_str()).copied())
                .collect(),
            None => vec![i],
        };
        for t in &bag.text_ids {
            let t = txt_pos[t.as_str()];
            i2t[i].insert(t);
            t2i[t].insert(i);
            t2i[t].extend(credited.iter().copied());
        }
    }
    let flatten =
        |v: Vec<BTreeSet<usize>>| v.into_iter().map(|s| s.into_iter().collect()).collect();
    Pools {
        images,
        texts,
        i2t: flatten(i2t),
        t2i: flatten(t2i),
    }
}

/// 0-based rank of the best-placed positive among `scores`, where a
/// candidate's rank counts candidates scoring higher, or equal with a
/// smaller id. `None` when there are no positives.
pub fn best_rank(scores: &[f64], ids: &[String], positives: &[usize]) -> Option<usize> {
    positives
        .iter()
        .map(|&p| {
            let (sp, ip) = (scores[p], &ids[p]);
            scores
                .iter()
                .zip(ids)
                .filter(|(s, id)| **s > sp || (**s == sp && *id < ip))
                .count()
        })
        .min()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vectors(
    store: &EmbeddingStore,
    doc_id: &str,
    ids: &[String],
    model: Option<&AdapterModel>,
    side: Side,
) -> Result<Vec<Vec<f64>>, OptError> {
    ids.iter()
        .map(|id| {
            let key = item_key(doc_id, id);
            let raw = store
                .get_f64(&key)
                .ok_or_else(|| OptError::MissingEmbedding(key.clone()))?;
            let v = match model {
                Some(m) => m.embed(side, &raw),
                None => unit(&raw),
            };
            v.ok_or(OptError::Store(crate::embedstore::StoreError::ZeroNormRow(
                key,
            )))
        })
        .collect()
}

/// Best-positive ranks for every query of one document.
pub fn document_hits(
    image_store: &EmbeddingStore,
    text_store: &EmbeddingStore,
    manifest: &BagManifest,
    model: Option<&AdapterModel>,
) -> Result<DocHits, OptError> {
    let p = pools(manifest);
    let iv = vectors(image_store, &manifest.doc_id, &p.images, model, Side::Image)?;
    let tv = vectors(text_store, &manifest.doc_id, &p.texts, model, Side::Text)?;
    let i2t = iv
        .iter()
        .zip(&p.i2t)
        .map(|(x, pos)| {
            let scores: Vec<f64> = tv.iter().map(|y| dot(x, y)).collect();
            best_rank(&scores, &p.texts, pos)
        })
        .collect();
    let t2i = tv
        .iter()
        .zip(&p.t2i)
        .map(|(y, pos)| {
            let scores: Vec<f64> = iv.iter().map(|x| dot(x, y)).collect();
            best_rank(&scores, &p.images, pos)
        })
        .collect();
    Ok(DocHits {
        images: p.images,
        texts: p.texts,
        i2t,
        t2i,
    })
}

/// Expected Recall@1 of a uniformly random ranker: mean over queries of
/// positives / pool size.
pub fn chance_rates(manifest: &BagManifest) -> Chance {
    let p = pools(manifest);
    let rate = |pos: &[Vec<usize>], pool: usize| {
        if pos.is_empty() || pool == 0 {
            return 0.0;
        }
        pos.iter()
            .map(|s| s.len() as f64 / pool as f64)
            .sum::<f64>()
            / pos.len() as f64
    };
    Chance {
        i2t: rate(&p.i2t, p.texts.len()),
        t2i: rate(&p.t2i, p.images.len()),
    }
}

/// Recall@{1,5,10} in both directions for one (post-dedup) document.
pub fn eval_document(
    image_store: &EmbeddingStore,
    text_store: &EmbeddingStore,
    manifest: &BagManifest,
    model: Option<&AdapterModel>,
) -> Result<DocMetrics, OptError> {
    let hits = document_hits(image_store, text_store, manifest, model)?;
    Ok(DocMetrics {
        doc_id: manifest.doc_id.clone(),
        n_images: hits.images.len(),
        n_texts: hits.texts.len(),
        i2t: Recall::from_ranks(&hits.i2t),
        t2i: Recall::from_ranks(&hits.t2i),
        chance: chance_rates(manifest),
    })
}

fn summarize<'a>(docs: impl Iterator<Item = &'a DocMetrics> + Clone) -> Summary {
    Summary {
        n_documents: docs.clone().count(),
        i2t: Recall::mean(docs.clone().map(|d| &d.i2t)),
        t2i: Recall::mean(docs.clone().map(|d| &d.t2i)),
        chance: Chance::mean(docs.map(|d| &d.chance)),
    }
}

/// Unweighted mean over documents per manufacturer, then over
/// manufacturers. Documents without a tag are grouped under `"unknown"`.
pub fn aggregate(
    docs: &[DocMetrics],
    manufacturer_of: &BTreeMap<String, String>,
) -> RetrievalReport {
    let mut documents = docs.to_vec();
    documents.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    let mut by: BTreeMap<String, Vec<&DocMetrics>> = BTreeMap::new();
    for d in &documents {
        let m = manufacturer_of
            .get(&d.doc_id)
            .map_or("unknown", String::as_str);
        by.entry(m.to_string()).or_default().push(d);
    }
    let manufacturers: BTreeMap<String, Summary> = by
        .iter()
        .map(|(m, ds)| (m.clone(), summarize(ds.iter().copied())))
        .collect();
    let overall = Summary {
        n_documents: documents.len(),
        i2t: Recall::mean(manufacturers.values().map(|s| &s.i2t)),
        t2i: Recall::mean(manufacturers.values().map(|s| &s.t2i)),
        chance: Chance::mean(manufacturers.values().map(|s| &s.chance)),
    };
    RetrievalReport {
        documents,
        manufacturers,
        overall,
        published_chance: Chance {
            i2t: PUBLISHED_CHANCE_I2T,
            t2i: PUBLISHED_CHANCE_T2I,
        },
    }
}

impl RetrievalReport {
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    /// One row per (document, direction, k).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("doc_id,direction,k,recall\n");
        for d in &self.documents {
            for (dir, r) in [("i2t", &d.i2t), ("t2i", &d.t2i)] {
                for k in KS {
                    writeln!(out, "{},{dir},{k},{}", d.doc_id, r.at(k)).unwrap();
                }
            }
        }
        out
    }

    /// Fixed-width table: manufacturers, overall, chance.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let pct = |x: f64| format!("{:6.2}", 100.0 * x);
        let row = |out: &mut String, name: &str, n: String, s: &Summary| {
            writeln!(
                out,
                "{name:<16} {n:>5} | {} {} {} | {} {} {}",
                pct(s.i2t.r1),
                pct(s.i2t.r5),
                pct(s.i2t.r10),
                pct(s.t2i.r1),
                pct(s.t2i.r5),
                pct(s.t2i.r10)
            )
            .unwrap();
        };
        writeln!(
            out,
            "{:<16} {:>5} | {:>20} | {:>20}",
            "", "", "image -> text", "text -> image"
        )
        .unwrap();
        writeln!(
            out,
            "{:<16} {:>5} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6}",
            "manufacturer", "docs", "R@1", "R@5", "R@10", "R@1", "R@5", "R@10"
        )
        .unwrap();
        out.push_str(&"-".repeat(69));
        out.push('\n');
        for (m, s) in &self.manufacturers {
            row(&mut out, m, s.n_documents.to_string(), s);
        }
        out.push_str(&"-".repeat(69));
        out.push('\n');
        row(
            &mut out,
            "overall",
            self.overall.n_documents.to_string(),
            &self.overall,
        );
        writeln!(
            out,
            "{:<16} {:>5} | {} {:>13} | {} {:>13}",
            "chance",
            "",
            pct(self.overall.chance.i2t),
            "",
            pct(self.overall.chance.t2i),
            ""
        )
        .unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagger::{MilBag, Provenance};
    use crate::embedstore::Modality;

    fn bag(image: &str, texts: &[&str]) -> MilBag {
        MilBag {
            image_id: image.into(),
            text_ids: texts.iter().map(|s| s.to_string()).collect(),
            provenance: vec![Provenance::Left; texts.len()],
        }
    }

    fn doc(
        rows: &[(&str, [f32; 2])],
        texts: &[(&str, [f32; 2])],
        bags: Vec<MilBag>,
    ) -> (EmbeddingStore, EmbeddingStore, BagManifest) {
        let mut i = EmbeddingStore::new(Modality::Image, 2);
        let mut t = EmbeddingStore::new(Modality::Text, 2);
        for (id, v) in rows {
            i.push(item_key("d", id), v).unwrap();
        }
        for (id, v) in texts {
            t.push(item_key("d", id), v).unwrap();
        }
        (i, t, BagManifest::new("d".into(), bags, vec![]))
    }

    #[test]
    fn single_matching_pair_is_perfect() {
        let (i, t, m) = doc(
            &[("a", [1.0, 0.0])],
            &[("x", [1.0, 0.0])],
            vec![bag("a", &["x"])],
        );
        let r = eval_document(&i, &t, &m, None).unwrap();
        assert_eq!(
            r.i2t,
            Recall {
                r1: 1.0,
                r5: 1.0,
                r10: 1.0
            }
        );
        assert_eq!(r.t2i, r.i2t);
        assert_eq!(r.chance, Chance { i2t: 1.0, t2i: 1.0 });
    }

    #[test]
    fn ties_break_by_id() {
        let ids: Vec<String> = ["b", "a", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(best_rank(&[0.5, 0.5, 0.9], &ids, &[0]), Some(2));
        assert_eq!(best_rank(&[0.5, 0.5, 0.9], &ids, &[1]), Some(1));
        assert_eq!(best_rank(&[0.5, 0.5, 0.9], &ids, &[]), None);
    }

    #[test]
    fn identity_group_credits_duplicate() {
        // Two identical pictures; "y" is bagged only with "b" but "a" scores
        // higher for it. Credit only comes through the identity group.
        let (i, t, mut m) = doc(
            &[("a", [1.0, 0.0]), ("b", [0.9, 0.1])],
            &[("x", [0.0, 1.0]), ("y", [1.0, 0.0])],
            vec![bag("a", &["x"]), bag("b", &["y"])],
        );
        let plain = eval_document(&i, &t, &m, None).unwrap();
        m.identity_groups = vec![vec!["a".into(), "b".into()]];
        let grouped = eval_document(&i, &t, &m, None).unwrap();
        assert!(grouped.t2i.r1 >= plain.t2i.r1);
        assert_eq!(grouped.t2i.r1, 1.0);
    }

    #[test]
    fn chance_examples() {
        let texts: Vec<String> = (0..100).map(|k| format!("t{k:03}")).collect();
        let single: Vec<MilBag> = (0..100)
            .map(|k| bag(&format!("i{k:03}"), &[texts[k].as_str()]))
            .collect();
        let m = BagManifest::new("d".into(), single, vec![]);
        assert!((chance_rates(&m).i2t - 0.01).abs() < 1e-12);
        let five: Vec<MilBag> = (0..20)
            .map(|k| {
                let ts: Vec<&str> = texts[5 * k..5 * k + 5].iter().map(String::as_str).collect();
                bag(&format!("i{k:03}"), &ts)
            })
            .collect();
        let m = BagManifest::new("d".into(), five, vec![]);
        assert!((chance_rates(&m).i2t - 0.05).abs() < 1e-12);
    }

    fn metrics(id: &str, r1: f64) -> DocMetrics {
        DocMetrics {
            doc_id: id.into(),
            n_images: 1,
            n_texts: 1,
            i2t: Recall {
                r1,
                r5: r1,
                r10: r1,
            },
            t2i: Recall::default(),
            chance: Chance::default(),
        }
    }

    #[test]
    fn two_stage_mean() {
        let tags: BTreeMap<String, String> = [("p", "m1"), ("q", "m2"), ("r", "m2")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let docs = vec![metrics("p", 0.2), metrics("q", 0.4), metrics("r", 0.6)];
        let rep = aggregate(&docs, &tags);
        assert!((rep.overall.i2t.r1 - 0.35).abs() < 1e-12);
        let mut rev = docs.clone();
        rev.reverse();
        assert_eq!(aggregate(&rev, &tags).to_json(), rep.to_json());

        let one: BTreeMap<String, String> = [("p", "m"), ("q", "m")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let rep = aggregate(&docs[..2], &one);
        assert!((rep.overall.i2t.r1 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn csv_and_table_shapes() {
        let rep = aggregate(&[metrics("p", 0.5)], &BTreeMap::new());
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 1 + 6);
        assert!(csv.contains("p,i2t,1,0.5"));
        let table = rep.render_table();
        assert!(table.contains("unknown"));
        assert!(table.contains("overall"));
    }
}
