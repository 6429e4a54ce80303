//! Document-level folds and the shot settings built from them.
//!
//! Documents of each manufacturer are shuffled with a seed and dealt
//! round-robin into five folds. Settings:
//!
//! * many-shot: train on four folds of the target manufacturer, test on the
//!   fifth;
//! * zero-shot: train on every other manufacturer, test on the target;
//! * one-shot: zero-shot plus one target document in training;
//! * few-shot: zero-shot plus one target fold in training;
//! * all-data: everything in training, nothing held out.
//!
//! Repetition `k` picks fold `k` (many/few-shot) or the `k`-th document in
//! the seeded order (one-shot).

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::LayoutDocument;

pub const FOLDS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("manufacturer {manufacturer} has {count} documents, at least {FOLDS} needed")]
    TooFewDocuments { manufacturer: String, count: usize },
    #[error("unknown manufacturer {0}")]
    UnknownManufacturer(String),
    #[error("repetition index {index} out of range (< {limit})")]
    Index { index: usize, limit: usize },
    #[error("duplicate document id {0}")]
    DuplicateDocument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    ManyShot,
    ZeroShot,
    OneShot,
    FewShot,
    AllData,
}

impl std::str::FromStr for Setting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "many_shot" => Ok(Setting::ManyShot),
            "zero_shot" => Ok(Setting::ZeroShot),
            "one_shot" => Ok(Setting::OneShot),
            "few_shot" => Ok(Setting::FewShot),
            "all_data" => Ok(Setting::AllData),
            _ => Err(format!("unknown setting {s}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManufacturerFolds {
    /// Seeded document order; position `p` went to fold `p % 5`.
    pub order: Vec<String>,
    pub folds: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Folds {
    pub seed: u64,
    pub by_manufacturer: BTreeMap<String, ManufacturerFolds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub setting: Setting,
    pub target: String,
    pub repeat: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("split serializes");
        out.push(b'\n');
        out
    }
}

fn seed_for(seed: u64, manufacturer: &str) -> u64 {
    // FNV-1a over the tag so each manufacturer gets its own stream.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in manufacturer.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    seed ^ h
}

pub fn make_folds(corpus: &[LayoutDocument], seed: u64) -> Result<Folds, SplitError> {
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for doc in corpus {
        if !seen.insert(doc.doc_id.as_str()) {
            return Err(SplitError::DuplicateDocument(doc.doc_id.clone()));
        }
        groups
            .entry(doc.manufacturer.clone())
            .or_default()
            .push(doc.doc_id.clone());
    }
    let mut by_manufacturer = BTreeMap::new();
    for (manufacturer, mut docs) in groups {
        if docs.len() < FOLDS {
            return Err(SplitError::TooFewDocuments {
                count: docs.len(),
                manufacturer,
            });
        }
        docs.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, &manufacturer));
        docs.shuffle(&mut rng);
        let mut folds = vec![Vec::new(); FOLDS];
        for (p, d) in docs.iter().enumerate() {
            folds[p % FOLDS].push(d.clone());
        }
        by_manufacturer.insert(manufacturer, ManufacturerFolds { order: docs, folds });
    }
    Ok(Folds {
        seed,
        by_manufacturer,
    })
}

pub fn make_setting(
    folds: &Folds,
    setting: Setting,
    target: &str,
    index: usize,
) -> Result<SplitSpec, SplitError> {
    let all_docs = || {
        folds
            .by_manufacturer
            .values()
            .flat_map(|m| m.order.iter().cloned())
            .collect::<Vec<_>>()
    };
    let spec = |mut train: Vec<String>, mut test: Vec<String>| {
        train.sort();
        test.sort();
        SplitSpec {
            setting,
            target: target.to_string(),
            repeat: index,
            train,
            test,
            seed: folds.seed,
        }
    };
    if setting == Setting::AllData {
        return Ok(spec(all_docs(), Vec::new()));
    }

    let tf = folds
        .by_manufacturer
        .get(target)
        .ok_or_else(|| SplitError::UnknownManufacturer(target.to_string()))?;
    if index >= FOLDS {
        return Err(SplitError::Index {
            index,
            limit: FOLDS,
        });
    }
    let others: Vec<String> = folds
        .by_manufacturer
        .iter()
        .filter(|(m, _)| m.as_str() != target)
        .flat_map(|(_, f)| f.order.iter().cloned())
        .collect();

    Ok(match setting {
        Setting::ManyShot => {
            let train = (0..FOLDS)
                .filter(|&k| k != index)
                .flat_map(|k| tf.folds[k].iter().cloned())
                .collect();
            spec(train, tf.folds[index].clone())
        }
        Setting::ZeroShot => spec(others, tf.order.clone()),
        Setting::OneShot => {
            let doc = &tf.order[index];
            let mut train = others;
            train.push(doc.clone());
            let test = tf.order.iter().filter(|d| *d != doc).cloned().collect();
            spec(train, test)
        }
        Setting::FewShot => {
            let mut train = others;
            train.extend(tf.folds[index].iter().cloned());
            let test = (0..FOLDS)
                .filter(|&k| k != index)
                .flat_map(|k| tf.folds[k].iter().cloned())
                .collect();
            spec(train, test)
        }
        Setting::AllData => unreachable!(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(counts: &[(&str, usize)]) -> Vec<LayoutDocument> {
        counts
            .iter()
            .flat_map(|(m, n)| {
                (0..*n).map(move |i| LayoutDocument {
                    doc_id: format!("{m}-{i:02}"),
                    manufacturer: m.to_string(),
                    pages: vec![],
                })
            })
            .collect()
    }

    #[test]
    fn fold_sizes() {
        let f = make_folds(&corpus(&[("a", 10)]), 1).unwrap();
        assert!(f.by_manufacturer["a"].folds.iter().all(|f| f.len() == 2));
        let f = make_folds(&corpus(&[("a", 7)]), 1).unwrap();
        let sizes: Vec<usize> = f.by_manufacturer["a"].folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, [2, 2, 1, 1, 1]);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let c = corpus(&[("a", 12), ("b", 6)]);
        assert_eq!(make_folds(&c, 3).unwrap(), make_folds(&c, 3).unwrap());
        let mut rev = c.clone();
        rev.reverse();
        assert_eq!(
            make_folds(&c, 3).unwrap().by_manufacturer,
            make_folds(&rev, 3).unwrap().by_manufacturer
        );
        assert_ne!(
            make_folds(&c, 3).unwrap().by_manufacturer,
            make_folds(&c, 4).unwrap().by_manufacturer
        );
    }

    #[test]
    fn errors() {
        assert_eq!(
            make_folds(&corpus(&[("a", 4)]), 0),
            Err(SplitError::TooFewDocuments {
                manufacturer: "a".into(),
                count: 4
            })
        );
        let f = make_folds(&corpus(&[("a", 5)]), 0).unwrap();
        assert!(matches!(
            make_setting(&f, Setting::ManyShot, "a", 5),
            Err(SplitError::Index { .. })
        ));
        assert!(matches!(
            make_setting(&f, Setting::ZeroShot, "zz", 0),
            Err(SplitError::UnknownManufacturer(_))
        ));
    }

    #[test]
    fn zero_shot_excludes_target() {
        let f = make_folds(&corpus(&[("a", 5), ("b", 6)]), 0).unwrap();
        let s = make_setting(&f, Setting::ZeroShot, "a", 0).unwrap();
        assert!(s.train.iter().all(|d| d.starts_with("b-")));
        assert_eq!(s.test.len(), 5);
    }

    #[test]
    fn all_data_holds_out_nothing() {
        let f = make_folds(&corpus(&[("a", 5), ("b", 6)]), 0).unwrap();
        let s = make_setting(&f, Setting::AllData, "", 0).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (11, 0));
    }
}
