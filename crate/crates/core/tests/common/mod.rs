//! Brute-force reference implementations used by the integration tests.
//! They share no code with the library beyond plain data types.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet};

use milret::layout::{BBox, ImageRegion, Page, TextBlock};
use rand::Rng;

// ---------------------------------------------------------------- losses

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Textbook symmetric CLIP loss over singleton bags.
pub fn clip(images: &[Vec<f64>], texts: &[Vec<f64>], sigma: f64) -> f64 {
    let b = images.len();
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = (0..b).map(|j| dot(&images[i], &texts[j]) / sigma).collect();
        let col: Vec<f64> = (0..b).map(|j| dot(&images[j], &texts[i]) / sigma).collect();
        total += -(row[i] - lse(&row)) - (col[i] - lse(&col));
    }
    total / (2.0 * b as f64)
}

pub fn mil_nce(images: &[Vec<f64>], bags: &[Vec<Vec<f64>>], sigma: f64) -> f64 {
    let b = images.len();
    let mut total = 0.0;
    for i in 0..b {
        let pos: Vec<f64> = bags[i].iter().map(|y| dot(&images[i], y) / sigma).collect();
        let all_texts: Vec<f64> = bags
            .iter()
            .flatten()
            .map(|y| dot(&images[i], y) / sigma)
            .collect();
        let all_images: Vec<f64> = images
            .iter()
            .flat_map(|x| bags[i].iter().map(move |y| dot(x, y) / sigma))
            .collect();
        total += lse(&all_texts) - lse(&pos);
        total += lse(&all_images) - lse(&pos);
    }
    total / (2.0 * b as f64)
}

/// Min over bag members of the member's cross-entropy against all images.
fn t2i_best(images: &[Vec<f64>], bags: &[Vec<Vec<f64>>], i: usize, sigma: f64) -> f64 {
    bags[i]
        .iter()
        .map(|y| {
            let logits: Vec<f64> = images.iter().map(|x| dot(x, y) / sigma).collect();
            lse(&logits) - logits[i]
        })
        .fold(f64::INFINITY, f64::min)
}

fn other_bags(images: &[Vec<f64>], bags: &[Vec<Vec<f64>>], i: usize, sigma: f64) -> Vec<f64> {
    (0..images.len())
        .filter(|&j| j != i)
        .flat_map(|j| bags[j].iter().map(|y| dot(&images[i], y) / sigma))
        .collect()
}

pub fn mil_max(images: &[Vec<f64>], bags: &[Vec<Vec<f64>>], sigma: f64) -> f64 {
    let b = images.len();
    let mut total = 0.0;
    for i in 0..b {
        let best = bags[i]
            .iter()
            .map(|y| dot(&images[i], y))
            .fold(f64::NEG_INFINITY, f64::max)
            / sigma;
        let mut logits = vec![best];
        logits.extend(other_bags(images, bags, i, sigma));
        total += lse(&logits) - best;
        total += t2i_best(images, bags, i, sigma);
    }
    total / (2.0 * b as f64)
}

pub fn mil_softmax(images: &[Vec<f64>], bags: &[Vec<Vec<f64>>], sigma: f64, sigma_sm: f64) -> f64 {
    let b = images.len();
    let mut total = 0.0;
    for i in 0..b {
        let a: Vec<f64> = bags[i].iter().map(|y| dot(&images[i], y)).collect();
        let z: f64 = a.iter().map(|v| (v / sigma_sm).exp()).sum();
        let numerator: f64 = a
            .iter()
            .map(|v| (v / sigma_sm).exp() / z * (v / sigma).exp())
            .sum();
        let negatives: f64 = other_bags(images, bags, i, sigma)
            .iter()
            .map(|l| l.exp())
            .sum();
        total += -(numerator / (numerator + negatives)).ln();
        total += t2i_best(images, bags, i, sigma);
    }
    total / (2.0 * b as f64)
}

// ------------------------------------------------------ finite differences

/// Central differences of `f` at `x` with step `h`.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

pub fn random_unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

// ------------------------------------------------------------ text merge

fn closed_overlap(a: &BBox, b: &BBox) -> bool {
    a.x0 <= b.x1 && b.x0 <= a.x1 && a.y0 <= b.y1 && b.y0 <= a.y1
}

/// All-pairs flood fill over dilated group hulls, repeated until no group
/// changes.
pub fn merge_groups(page: &Page, horiz_frac: f64, vert_mult: f64) -> BTreeSet<Vec<usize>> {
    let delta = horiz_frac * page.width;
    let grow = |b: BBox| {
        BBox::new(
            b.x0 - delta / 2.0,
            b.y0 - vert_mult * delta / 2.0,
            b.x1 + delta / 2.0,
            b.y1 + vert_mult * delta / 2.0,
        )
    };
    let mut groups: Vec<Vec<usize>> = (0..page.texts.len()).map(|i| vec![i]).collect();
    loop {
        let boxes: Vec<BBox> = groups
            .iter()
            .map(|g| {
                let mut h = page.texts[g[0]].bbox;
                for &i in g {
                    let b = page.texts[i].bbox;
                    h = BBox::new(
                        h.x0.min(b.x0),
                        h.y0.min(b.y0),
                        h.x1.max(b.x1),
                        h.y1.max(b.y1),
                    );
                }
                grow(h)
            })
            .collect();
        let n = groups.len();
        let mut label: Vec<usize> = (0..n).collect();
        let mut changed = true;
        while changed {
            changed = false;
            for a in 0..n {
                for b in 0..n {
                    if closed_overlap(&boxes[a], &boxes[b]) && label[b] > label[a] {
                        label[b] = label[a];
                        changed = true;
                    }
                }
            }
        }
        let mut merged: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (g, members) in groups.iter().enumerate() {
            merged.entry(label[g]).or_default().extend(members);
        }
        if merged.len() == n {
            break;
        }
        groups = merged.into_values().collect();
    }
    groups
        .into_iter()
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect()
}

// ---------------------------------------------------------------- bagger

/// Expected bag of one image: overlap pick, then left/right/top/bottom
/// picks, found by sorting every candidate.
pub fn bag_for(image: &ImageRegion, texts: &[TextBlock]) -> Vec<String> {
    let im = image.bbox;
    let mut picks: Vec<String> = Vec::new();

    let mut overlapping: Vec<(f64, &str)> = texts
        .iter()
        .filter_map(|t| {
            let w = (t.bbox.x1.min(im.x1) - t.bbox.x0.max(im.x0)).max(0.0);
            let h = (t.bbox.y1.min(im.y1) - t.bbox.y0.max(im.y0)).max(0.0);
            (w * h > 0.0).then_some((w * h, t.id.as_str()))
        })
        .collect();
    overlapping.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
    picks.extend(overlapping.first().map(|(_, id)| id.to_string()));

    let x_ov = |b: &BBox| (b.x1.min(im.x1) - b.x0.max(im.x0)).max(0.0);
    let y_ov = |b: &BBox| (b.y1.min(im.y1) - b.y0.max(im.y0)).max(0.0);
    type Rule<'a> = Box<dyn Fn(&BBox) -> Option<(f64, f64)> + 'a>;
    let rules: [Rule; 4] = [
        Box::new(|b| (b.x1 <= im.x0 && y_ov(b) > 0.0).then(|| (im.x0 - b.x1, y_ov(b)))),
        Box::new(|b| (b.x0 >= im.x1 && y_ov(b) > 0.0).then(|| (b.x0 - im.x1, y_ov(b)))),
        Box::new(|b| (b.y1 <= im.y0 && x_ov(b) > 0.0).then(|| (im.y0 - b.y1, x_ov(b)))),
        Box::new(|b| (b.y0 >= im.y1 && x_ov(b) > 0.0).then(|| (b.y0 - im.y1, x_ov(b)))),
    ];
    for rule in &rules {
        let mut c: Vec<(f64, f64, &str)> = texts
            .iter()
            .filter_map(|t| rule(&t.bbox).map(|(g, o)| (g, o, t.id.as_str())))
            .collect();
        c.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then(b.1.partial_cmp(&a.1).unwrap())
                .then(a.2.cmp(b.2))
        });
        if let Some((_, _, id)) = c.first() {
            if !picks.iter().any(|p| p == id) {
                picks.push(id.to_string());
            }
        }
    }
    picks.truncate(5);
    picks
}

// ----------------------------------------------------------------- dedup

/// Connected components of the graph with an edge wherever `linked(i, j)`,
/// by depth-first search; groups sorted, then sorted among themselves.
pub fn components(n: usize, linked: impl Fn(usize, usize) -> bool) -> Vec<Vec<usize>> {
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut stack = vec![s];
        let mut group = Vec::new();
        seen[s] = true;
        while let Some(v) = stack.pop() {
            group.push(v);
            for w in 0..n {
                if !seen[w] && (linked(v, w) || linked(w, v)) {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        group.sort_unstable();
        out.push(group);
    }
    out.sort();
    out
}

/// Pixel-centre bilinear resize written from the definition.
pub fn resize(pixels: &[u8], w: usize, h: usize, side: usize) -> Vec<f64> {
    let coord = |d: usize, len: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * len as f64 / side as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let (y0, y1, fy) = coord(y, h);
        for x in 0..side {
            let (x0, x1, fx) = coord(x, w);
            let p = |xx: usize, yy: usize| pixels[yy * w + xx] as f64;
            out.push(
                (1.0 - fy) * ((1.0 - fx) * p(x0, y0) + fx * p(x1, y0))
                    + fy * ((1.0 - fx) * p(x0, y1) + fx * p(x1, y1)),
            );
        }
    }
    out
}

/// Cosine similarity of the mean-subtracted resized rasters (0 when either
/// has no variance).
pub fn ncc(a: (&[u8], usize, usize), b: (&[u8], usize, usize), side: usize) -> f64 {
    let centre = |v: Vec<f64>| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.into_iter().map(|x| x - m).collect::<Vec<_>>()
    };
    let x = centre(resize(a.0, a.1, a.2, side));
    let y = centre(resize(b.0, b.1, b.2, side));
    let nx = dot(&x, &x).sqrt();
    let ny = dot(&y, &y).sqrt();
    if nx < 1e-6 || ny < 1e-6 {
        // Flat images only match an identical flat image.
        let flat = |p: &[u8]| p.iter().all(|&v| v == p[0]);
        let same = nx < 1e-6 && ny < 1e-6 && flat(a.0) && flat(b.0) && a.0[0] == b.0[0];
        return if same { 1.0 } else { 0.0 };
    }
    dot(&x, &y) / (nx * ny)
}

// ------------------------------------------------------------- retrieval

/// Rank of the best positive after a full sort by (score desc, id asc).
pub fn best_rank(scores: &[f64], ids: &[String], positives: &[usize]) -> Option<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(ids[a].cmp(&ids[b]))
    });
    order.iter().position(|c| positives.contains(c))
}
