//! Merging of fragmented text blocks.
//!
//! Every box is dilated (horizontally by a fraction of the page width,
//! vertically by a multiple of that), touching dilated boxes are linked, and
//! each connected component collapses into one block whose box is the hull
//! of the original boxes. The procedure repeats until no merged boxes touch,
//! which makes it idempotent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{BBox, Page, TextBlock};
use crate::unionfind::UnionFind;

#[derive(Debug, Error, PartialEq)]
pub enum MergeError {
    #[error("invalid merge config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMergeConfig", into = "RawMergeConfig")]
pub struct MergeConfig {
    horiz_frac: f64,
    vert_mult: f64,
}

#[derive(Serialize, Deserialize)]
struct RawMergeConfig {
    horiz_frac: f64,
    vert_mult: f64,
}

impl TryFrom<RawMergeConfig> for MergeConfig {
    type Error = MergeError;
    fn try_from(r: RawMergeConfig) -> Result<Self, Self::Error> {
        MergeConfig::new(r.horiz_frac, r.vert_mult)
    }
}

impl From<MergeConfig> for RawMergeConfig {
    fn from(c: MergeConfig) -> Self {
        RawMergeConfig {
            horiz_frac: c.horiz_frac,
            vert_mult: c.vert_mult,
        }
    }
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            horiz_frac: 0.01,
            vert_mult: 4.0,
        }
    }
}

impl MergeConfig {
    pub fn new(horiz_frac: f64, vert_mult: f64) -> Result<Self, MergeError> {
        if !(horiz_frac > 0.0 && horiz_frac < 0.5) {
            return Err(MergeError::Config(format!(
                "horiz_frac must lie in (0, 0.5), got {horiz_frac}"
            )));
        }
        if !(vert_mult > 0.0 && vert_mult.is_finite()) {
            return Err(MergeError::Config(format!(
                "vert_mult must be positive, got {vert_mult}"
            )));
        }
        Ok(MergeConfig {
            horiz_frac,
            vert_mult,
        })
    }

    pub fn horiz_frac(&self) -> f64 {
        self.horiz_frac
    }

    pub fn vert_mult(&self) -> f64 {
        self.vert_mult
    }
}

/// Grow a box symmetrically: total width by `δ = horiz_frac · page_width`,
/// total height by `vert_mult · δ`. The result is not clamped to the page.
pub fn dilate(bbox: &BBox, page_width: f64, cfg: &MergeConfig) -> BBox {
    let delta = cfg.horiz_frac * page_width;
    let dx = delta / 2.0;
    let dy = cfg.vert_mult * delta / 2.0;
    BBox::new(bbox.x0 - dx, bbox.y0 - dy, bbox.x1 + dx, bbox.y1 + dy)
}

/// Link every pair of touching boxes. Sweep over x so only boxes whose x
/// ranges intersect get compared.
fn touching_components(boxes: &[BBox]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[a].x0.total_cmp(&boxes[b].x0).then(a.cmp(&b)));

    let mut uf = UnionFind::new(boxes.len());
    let mut active: Vec<usize> = Vec::new();
    for &i in &order {
        let b = &boxes[i];
        active.retain(|&j| boxes[j].x1 >= b.x0);
        for &j in &active {
            if boxes[j].touches(b) {
                uf.union(i, j);
            }
        }
        active.push(i);
    }
    uf.groups()
}

fn reading_order(a: &TextBlock, b: &TextBlock) -> std::cmp::Ordering {
    a.bbox
        .y0
        .total_cmp(&b.bbox.y0)
        .then(a.bbox.x0.total_cmp(&b.bbox.x0))
        .then_with(|| a.id.cmp(&b.id))
}

/// Partition of the page's text blocks (as indices into `page.texts`) into
/// the groups that [`merge_blocks`] collapses.
pub fn merge_groups(page: &Page, cfg: &MergeConfig) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = (0..page.texts.len()).map(|i| vec![i]).collect();
    loop {
        let hulls: Vec<BBox> = groups
            .iter()
            .map(|g| {
                let hull = g
                    .iter()
                    .map(|&i| page.texts[i].bbox)
                    .reduce(|a, b| a.hull(&b))
                    .expect("groups are non-empty");
                dilate(&hull, page.width, cfg)
            })
            .collect();
        let components = touching_components(&hulls);
        if components.len() == groups.len() {
            break;
        }
        groups = components
            .into_iter()
            .map(|c| {
                let mut members: Vec<usize> = c
                    .into_iter()
                    .flat_map(|g| groups[g].iter().copied())
                    .collect();
                members.sort_unstable();
                members
            })
            .collect();
    }
    groups.sort_by_key(|g| g[0]);
    groups
}

/// Collapse touching (after dilation) text blocks into single blocks.
///
/// A merged block covers the hull of its members' original boxes, joins
/// their texts with single spaces in reading order (top to bottom, then
/// left to right) and takes the lexicographically smallest member id.
/// Output blocks are sorted in reading order.
pub fn merge_blocks(page: &Page, cfg: &MergeConfig) -> Page {
    let mut texts: Vec<TextBlock> = merge_groups(page, cfg)
        .into_iter()
        .map(|g| {
            let mut members: Vec<&TextBlock> = g.iter().map(|&i| &page.texts[i]).collect();
            if members.len() == 1 {
                return members[0].clone();
            }
            members.sort_by(|a, b| reading_order(a, b));
            let bbox = members
                .iter()
                .map(|t| t.bbox)
                .reduce(|a, b| a.hull(&b))
                .expect("non-empty");
            let id = members
                .iter()
                .map(|t| t.id.as_str())
                .min()
                .expect("non-empty")
                .to_string();
            let text = members
                .iter()
                .map(|t| t.text.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            TextBlock { id, bbox, text }
        })
        .collect();
    texts.sort_by(reading_order);
    Page {
        page_no: page.page_no,
        width: page.width,
        height: page.height,
        texts,
        images: page.images.clone(),
    }
}
