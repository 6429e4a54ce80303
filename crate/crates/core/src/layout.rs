//! Document layout model and the JSON layout-description format.
//!
//! Coordinates are page points with the origin at the top-left corner and
//! `y` growing downward. A layout file describes one document:
//!
//! ```json
//! {"doc_id": "d1", "manufacturer": "acme",
//!  "pages": [{"page_no": 1, "width": 600, "height": 800,
//!             "texts":  [{"id": "t1", "bbox": [10, 10, 90, 20], "text": "Oil filter"}],
//!             "images": [{"id": "i1", "bbox": [100, 100, 300, 300], "path": "img/1.png"}]}]}
//! ```
//!
//! Unknown fields are ignored.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LayoutError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("document has no pages")]
    EmptyDocument,
}

/// Axis-aligned box `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Area, zero for inverted or degenerate boxes.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x0.is_finite() && self.y0.is_finite() && self.x1.is_finite() && self.y1.is_finite()
    }

    /// Strictly positive extent on both axes.
    pub fn is_valid(&self) -> bool {
        self.is_finite() && self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        BBox {
            x0: self.x0.clamp(0.0, width),
            y0: self.y0.clamp(0.0, height),
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
        }
    }

    /// Closed-interval intersection test; touching edges count.
    pub fn touches(&self, other: &BBox) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// Length of the shared extent on the x axis (may be negative).
    pub fn x_overlap(&self, other: &BBox) -> f64 {
        self.x1.min(other.x1) - self.x0.max(other.x0)
    }

    /// Length of the shared extent on the y axis (may be negative).
    pub fn y_overlap(&self, other: &BBox) -> f64 {
        self.y1.min(other.y1) - self.y0.max(other.y0)
    }

    pub fn hull(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextBlock {
    pub id: String,
    pub bbox: BBox,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRegion {
    pub id: String,
    pub bbox: BBox,
    /// Raster path relative to the corpus directory.
    #[serde(rename = "path")]
    pub pixels_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub page_no: u32,
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub texts: Vec<TextBlock>,
    #[serde(default)]
    pub images: Vec<ImageRegion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutDocument {
    pub doc_id: String,
    pub manufacturer: String,
    pub pages: Vec<Page>,
}

impl LayoutDocument {
    pub fn text_count(&self) -> usize {
        self.pages.iter().map(|p| p.texts.len()).sum()
    }

    pub fn image_count(&self) -> usize {
        self.pages.iter().map(|p| p.images.len()).sum()
    }

    pub fn images(&self) -> impl Iterator<Item = (&Page, &ImageRegion)> {
        self.pages
            .iter()
            .flat_map(|p| p.images.iter().map(move |i| (p, i)))
    }
}

// Raw mirror of the file format so that shape errors surface as `Schema`
// before any validation runs.
#[derive(Deserialize)]
struct RawDocument {
    doc_id: String,
    manufacturer: String,
    pages: Vec<RawPage>,
}

#[derive(Deserialize)]
struct RawPage {
    page_no: u32,
    width: f64,
    height: f64,
    #[serde(default)]
    texts: Vec<RawText>,
    #[serde(default)]
    images: Vec<RawImage>,
}

#[derive(Deserialize)]
struct RawText {
    id: String,
    bbox: [f64; 4],
    text: String,
}

#[derive(Deserialize)]
struct RawImage {
    id: String,
    bbox: [f64; 4],
    path: String,
}

fn check_box(raw: [f64; 4], what: &str, id: &str) -> Result<BBox, LayoutError> {
    let b = BBox::from(raw);
    if !b.is_finite() {
        return Err(LayoutError::Schema(format!("{what} {id}: non-finite bbox")));
    }
    if b.x0 > b.x1 || b.y0 > b.y1 {
        return Err(LayoutError::Schema(format!(
            "{what} {id}: inverted bbox {raw:?}"
        )));
    }
    Ok(b)
}

/// Parse and validate a layout file.
///
/// Boxes are clamped to the page; those left with zero area are dropped.
/// Pages come back sorted by `page_no`.
pub fn parse_layout(bytes: &[u8]) -> Result<LayoutDocument, LayoutError> {
    let raw: RawDocument =
        serde_json::from_slice(bytes).map_err(|e| LayoutError::Schema(e.to_string()))?;
    if raw.pages.is_empty() {
        return Err(LayoutError::EmptyDocument);
    }

    let mut ids = HashSet::new();
    let mut page_nos = HashSet::new();
    let mut pages = Vec::with_capacity(raw.pages.len());
    for rp in raw.pages {
        if rp.page_no == 0 {
            return Err(LayoutError::Schema("page_no is 1-based".into()));
        }
        if !(rp.width.is_finite() && rp.height.is_finite() && rp.width > 0.0 && rp.height > 0.0) {
            return Err(LayoutError::Schema(format!(
                "page {}: bad dimensions",
                rp.page_no
            )));
        }
        if !page_nos.insert(rp.page_no) {
            return Err(LayoutError::DuplicateId(format!("page {}", rp.page_no)));
        }

        let mut texts = Vec::with_capacity(rp.texts.len());
        for t in rp.texts {
            let b = check_box(t.bbox, "text", &t.id)?;
            if !ids.insert(t.id.clone()) {
                return Err(LayoutError::DuplicateId(t.id));
            }
            let b = b.clamp_to(rp.width, rp.height);
            if b.area() > 0.0 {
                texts.push(TextBlock {
                    id: t.id,
                    bbox: b,
                    text: t.text,
                });
            }
        }
        let mut images = Vec::with_capacity(rp.images.len());
        for i in rp.images {
            let b = check_box(i.bbox, "image", &i.id)?;
            if !ids.insert(i.id.clone()) {
                return Err(LayoutError::DuplicateId(i.id));
            }
            let b = b.clamp_to(rp.width, rp.height);
            if b.area() > 0.0 {
                images.push(ImageRegion {
                    id: i.id,
                    bbox: b,
                    pixels_ref: i.path,
                });
            }
        }
        pages.push(Page {
            page_no: rp.page_no,
            width: rp.width,
            height: rp.height,
            texts,
            images,
        });
    }
    pages.sort_by_key(|p| p.page_no);

    Ok(LayoutDocument {
        doc_id: raw.doc_id,
        manufacturer: raw.manufacturer,
        pages,
    })
}

/// Serialize a document in the layout file format (pretty-printed).
pub fn write_layout(doc: &LayoutDocument) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(doc).expect("layout documents always serialize");
    out.push(b'\n');
    out
}

/// Strip control characters from one string. Newlines and tabs become spaces.
pub fn clean_text(s: &str) -> String {
    s.chars()
        .filter_map(|c| match c {
            '\n' | '\t' => Some(' '),
            c if c.is_control() => None,
            c => Some(c),
        })
        .collect()
}

/// Remove PDF parsing artifacts: control characters, empty or
/// whitespace-only blocks and zero-area blocks.
pub fn clean_text_blocks(doc: &LayoutDocument) -> LayoutDocument {
    let mut out = doc.clone();
    for page in &mut out.pages {
        page.texts = page
            .texts
            .iter()
            .filter(|t| t.bbox.area() > 0.0)
            .filter_map(|t| {
                let text = clean_text(&t.text);
                if text.trim().is_empty() {
                    None
                } else {
                    Some(TextBlock {
                        id: t.id.clone(),
                        bbox: t.bbox,
                        text,
                    })
                }
            })
            .collect();
    }
    out
}
