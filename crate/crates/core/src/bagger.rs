//! Automatic multiple-instance annotation.
//!
//! Each image is paired with at most five text blocks from its own page: the
//! nearest block on each side (left, right, top, bottom) and the block that
//! overlaps it the most. The resulting image bags are inverted into text bags
//! (text id to the images it was paired with).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::layout::{BBox, ImageRegion, LayoutDocument, Page, TextBlock};

pub const MAX_BAG: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Overlap,
    Left,
    Right,
    Top,
    Bottom,
    /// Inherited from an identical image elsewhere in the document.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilBag {
    #[serde(rename = "image")]
    pub image_id: String,
    #[serde(rename = "texts")]
    pub text_ids: Vec<String>,
    #[serde(rename = "tags")]
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagManifest {
    pub doc_id: String,
    #[serde(rename = "bags")]
    pub image_bags: Vec<MilBag>,
    #[serde(skip)]
    pub text_bags: BTreeMap<String, Vec<String>>,
    pub skipped_images: Vec<String>,
    /// Identity groups attached by deduplication (only non-singletons).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub identity_groups: Vec<Vec<String>>,
}

impl BagManifest {
    pub fn new(doc_id: String, image_bags: Vec<MilBag>, skipped_images: Vec<String>) -> Self {
        let mut m = BagManifest {
            doc_id,
            image_bags,
            text_bags: BTreeMap::new(),
            skipped_images,
            identity_groups: Vec::new(),
        };
        m.reinvert();
        m
    }

    /// Recompute `text_bags` from `image_bags`.
    pub fn reinvert(&mut self) {
        self.text_bags = invert(&self.image_bags);
    }

    pub fn from_json(bytes: &[u8]) -> serde_json::Result<Self> {
        let mut m: BagManifest = serde_json::from_slice(bytes)?;
        m.reinvert();
        Ok(m)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifests always serialize");
        out.push(b'\n');
        out
    }

    pub fn bag(&self, image_id: &str) -> Option<&MilBag> {
        self.image_bags.iter().find(|b| b.image_id == image_id)
    }
}

/// Map each text id to the sorted list of images whose bags contain it.
pub fn invert(bags: &[MilBag]) -> BTreeMap<String, Vec<String>> {
    let mut sets: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for bag in bags {
        for t in &bag.text_ids {
            sets.entry(t.clone())
                .or_default()
                .insert(bag.image_id.clone());
        }
    }
    sets.into_iter()
        .map(|(t, s)| (t, s.into_iter().collect()))
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

/// Edge gap and cross-axis overlap of `text` relative to `image` when it lies
/// strictly on `side`, `None` otherwise.
fn side_candidate(side: Side, image: &BBox, text: &BBox) -> Option<(f64, f64)> {
    let (separated, gap, overlap) = match side {
        Side::Left => (
            text.x1 <= image.x0,
            image.x0 - text.x1,
            text.y_overlap(image),
        ),
        Side::Right => (
            text.x0 >= image.x1,
            text.x0 - image.x1,
            text.y_overlap(image),
        ),
        Side::Top => (
            text.y1 <= image.y0,
            image.y0 - text.y1,
            text.x_overlap(image),
        ),
        Side::Bottom => (
            text.y0 >= image.y1,
            text.y0 - image.y1,
            text.x_overlap(image),
        ),
    };
    (separated && overlap > 0.0).then_some((gap, overlap))
}

/// Nearest block on `side`: smallest gap, then larger projection overlap,
/// then smallest id.
fn nearest_on_side<'a>(side: Side, image: &BBox, texts: &'a [TextBlock]) -> Option<&'a TextBlock> {
    texts
        .iter()
        .filter_map(|t| side_candidate(side, image, &t.bbox).map(|(g, o)| (g, o, t)))
        .min_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(b.1.total_cmp(&a.1))
                .then_with(|| a.2.id.cmp(&b.2.id))
        })
        .map(|(_, _, t)| t)
}

fn max_overlap<'a>(image: &BBox, texts: &'a [TextBlock]) -> Option<&'a TextBlock> {
    texts
        .iter()
        .map(|t| (t.bbox.intersection_area(image), t))
        .filter(|(a, _)| *a > 0.0)
        .min_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)))
        .map(|(_, t)| t)
}

fn bag_for(image: &ImageRegion, texts: &[TextBlock]) -> MilBag {
    let picks = [
        (Provenance::Overlap, max_overlap(&image.bbox, texts)),
        (
            Provenance::Left,
            nearest_on_side(Side::Left, &image.bbox, texts),
        ),
        (
            Provenance::Right,
            nearest_on_side(Side::Right, &image.bbox, texts),
        ),
        (
            Provenance::Top,
            nearest_on_side(Side::Top, &image.bbox, texts),
        ),
        (
            Provenance::Bottom,
            nearest_on_side(Side::Bottom, &image.bbox, texts),
        ),
    ];
    let mut bag = MilBag {
        image_id: image.id.clone(),
        text_ids: Vec::new(),
        provenance: Vec::new(),
    };
    for (tag, pick) in picks {
        if let Some(t) = pick {
            if !bag.text_ids.contains(&t.id) && bag.text_ids.len() < MAX_BAG {
                bag.text_ids.push(t.id.clone());
                bag.provenance.push(tag);
            }
        }
    }
    bag
}

/// Bags for every image on the page that has at least one associated text.
pub fn associate(page: &Page) -> Vec<MilBag> {
    page.images
        .iter()
        .map(|img| bag_for(img, &page.texts))
        .filter(|b| !b.text_ids.is_empty())
        .collect()
}

/// Assemble the document manifest: page bags in page order, the inverted
/// text bags and the images left without any text.
pub fn build_manifest(doc: &LayoutDocument) -> BagManifest {
    let mut bags = Vec::new();
    let mut skipped = Vec::new();
    for page in &doc.pages {
        for img in &page.images {
            let bag = bag_for(img, &page.texts);
            if bag.text_ids.is_empty() {
                skipped.push(img.id.clone());
            } else {
                bags.push(bag);
            }
        }
    }
    BagManifest::new(doc.doc_id.clone(), bags, skipped)
}
