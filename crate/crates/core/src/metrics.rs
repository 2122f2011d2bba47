//! Segmentation metrics: Dice, adapted Rand index, variation of information
//! and Betti error, plus the region labeling they rely on.

use std::collections::{BTreeMap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::BinaryMask2D;
use crate::persistence::betti_numbers;

/// Per-pixel instance labels. Label 0 marks boundary pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap2D {
    width: usize,
    height: usize,
    labels: Vec<u32>,
}

impl LabelMap2D {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty label map {height}x{width}")));
        }
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self { width, height, labels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Largest label present.
    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Renames nonzero labels to `1..=K` in row-major first-encounter order.
    pub fn canonicalize(&self) -> Self {
        let mut map = HashMap::new();
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    return 0;
                }
                let next = map.len() as u32 + 1;
                *map.entry(l).or_insert(next)
            })
            .collect();
        Self { width: self.width, height: self.height, labels }
    }
}

/// Labels the 4-connected background regions of a membrane mask.
pub fn label_regions(mask: &BinaryMask2D) -> LabelMap2D {
    let (h, w) = (mask.height(), mask.width());
    let bits = mask.bits();
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if bits[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !bits[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
    }
    LabelMap2D { width: w, height: h, labels }
}

fn same_mask_dims(a: &BinaryMask2D, b: &BinaryMask2D) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn dice(a: &BinaryMask2D, b: &BinaryMask2D) -> Result<f64> {
    same_mask_dims(a, b)?;
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    let both = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count();
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Joint label counts over pixels whose ground-truth label is nonzero.
struct Contingency {
    joint: BTreeMap<(u32, u32), u64>,
    pred: BTreeMap<u32, u64>,
    gt: BTreeMap<u32, u64>,
    total: u64,
}

fn contingency(pred: &LabelMap2D, gt: &LabelMap2D) -> Result<Contingency> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut table = Contingency { joint: BTreeMap::new(), pred: BTreeMap::new(), gt: BTreeMap::new(), total: 0 };
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if g == 0 {
            continue;
        }
        *table.joint.entry((p, g)).or_default() += 1;
        *table.pred.entry(p).or_default() += 1;
        *table.gt.entry(g).or_default() += 1;
        table.total += 1;
    }
    if table.total == 0 {
        return Err(Error::Undefined("every pixel has ground-truth label 0".into()));
    }
    Ok(table)
}

fn sum_sq<'a>(counts: impl Iterator<Item = &'a u64>) -> f64 {
    counts.map(|&n| (n as f64) * (n as f64)).sum()
}

/// F-score of pairwise co-membership precision and recall. 1 is a perfect
/// match.
pub fn adapted_rand_index(pred: &LabelMap2D, gt: &LabelMap2D) -> Result<f64> {
    let t = contingency(pred, gt)?;
    let both = sum_sq(t.joint.values());
    let precision = both / sum_sq(t.pred.values());
    let recall = both / sum_sq(t.gt.values());
    Ok(2.0 * precision * recall / (precision + recall))
}

fn entropy<'a>(counts: impl Iterator<Item = &'a u64>, total: f64) -> f64 {
    counts
        .map(|&n| {
            let p = n as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// `H(pred | gt) + H(gt | pred)` in nats.
pub fn variation_of_information(pred: &LabelMap2D, gt: &LabelMap2D) -> Result<f64> {
    let t = contingency(pred, gt)?;
    let n = t.total as f64;
    let joint = entropy(t.joint.values(), n);
    let vi = 2.0 * joint - entropy(t.pred.values(), n) - entropy(t.gt.values(), n);
    Ok(vi.max(0.0))
}

/// Patch-sampling protocol for [`betti_error`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BettiProtocol {
    pub patch: usize,
    pub samples: usize,
    pub seed: u64,
    pub include_beta0: bool,
}

impl Default for BettiProtocol {
    fn default() -> Self {
        Self { patch: 64, samples: 100, seed: 0, include_beta0: false }
    }
}

/// Patch origins drawn by [`betti_error`]. Patches larger than the image are
/// shrunk to fit.
pub fn patch_origins(height: usize, width: usize, protocol: &BettiProtocol) -> Vec<(usize, usize)> {
    let size = protocol.patch.min(height).min(width);
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    (0..protocol.samples)
        .map(|_| (rng.gen_range(0..=height - size), rng.gen_range(0..=width - size)))
        .collect()
}

/// Mean absolute Betti-number difference over seeded random patches.
pub fn betti_error(pred: &BinaryMask2D, gt: &BinaryMask2D, protocol: &BettiProtocol) -> Result<f64> {
    same_mask_dims(pred, gt)?;
    if protocol.samples == 0 {
        return Err(Error::param("samples", "must be at least 1"));
    }
    if protocol.patch == 0 {
        return Err(Error::param("patch", "must be at least 1"));
    }
    let (h, w) = (gt.height(), gt.width());
    let size = protocol.patch.min(h).min(w);
    let mut total = 0usize;
    for (r, c) in patch_origins(h, w, protocol) {
        let (p0, p1) = betti_numbers(&pred.crop(r, c, size, size)?);
        let (g0, g1) = betti_numbers(&gt.crop(r, c, size, size)?);
        total += p1.abs_diff(g1);
        if protocol.include_beta0 {
            total += p0.abs_diff(g0);
        }
    }
    Ok(total as f64 / protocol.samples as f64)
}

/// Drops 4-connected foreground components with fewer than `min_pixels`
/// pixels.
pub fn remove_small_components(mask: &BinaryMask2D, min_pixels: usize) -> BinaryMask2D {
    if min_pixels == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let inverted = BinaryMask2D::from_fn(w, h, |r, c| !mask.get(r, c)).expect("same dims");
    let regions = label_regions(&inverted);
    let mut sizes = vec![0usize; regions.max_label() as usize + 1];
    for &l in regions.labels() {
        sizes[l as usize] += 1;
    }
    BinaryMask2D::from_fn(w, h, |r, c| {
        let l = regions.get(r, c);
        l != 0 && sizes[l as usize] >= min_pixels
    })
    .expect("same dims")
}
