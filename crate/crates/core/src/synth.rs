//! Synthetic anisotropic volumes with exactly known membrane topology.
//!
//! Each slice carries a membrane mask (ground truth), a noisy image of it, and
//! the instance labels of the regions the membrane separates. Structures drift
//! by a random walk from slice to slice, and broken membranes appear only in
//! the image, so ground-truth topology stays fixed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::field::{BinaryMask2D, ScalarField2D};
use crate::io::{write_tensor, RawTensor};
use crate::metrics::{label_regions, LabelMap2D};

pub const IMAGE_FILE: &str = "image.tact";
pub const MEMBRANE_FILE: &str = "membrane.tact";
pub const LABELS_FILE: &str = "labels.tact";

const MEMBRANE_LEVEL: f64 = 0.8;
const BACKGROUND_LEVEL: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Structure {
    /// `count` disjoint annuli laid out on a grid.
    Rings { count: usize },
    /// Full-span horizontal and vertical membranes roughly `cell` px apart.
    Tiling { cell: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub structure: Structure,
    /// Largest per-slice displacement, px.
    pub jitter: f64,
    pub noise: f64,
    /// Chance that a slice shows one gap in its membrane.
    pub break_prob: f64,
    /// Gap length along the membrane, px.
    pub gap: f64,
    pub seed: u64,
    /// Random left-right / up-down flip of the whole volume.
    pub flips: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            depth: 8,
            height: 64,
            width: 64,
            structure: Structure::Rings { count: 4 },
            jitter: 1.0,
            noise: 0.1,
            break_prob: 0.5,
            gap: 3.0,
            seed: 0,
            flips: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.height < 8 || self.width < 8 {
            return Err(Error::param("dims", "need depth >= 1 and slices of at least 8x8"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::param("jitter", "must be finite and >= 0"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::param("noise", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.break_prob) {
            return Err(Error::param("break_prob", "must lie in [0, 1]"));
        }
        if !(self.gap >= 2.0 && self.gap.is_finite()) {
            return Err(Error::param("gap", "must be at least 2 px"));
        }
        match self.structure {
            Structure::Rings { count } => {
                if count == 0 {
                    return Err(Error::param("rings", "need at least one ring"));
                }
                ring_layout(self, count)?;
            }
            Structure::Tiling { cell } => {
                if cell < 4 {
                    return Err(Error::param("cell", "cells must be at least 4 px"));
                }
                if self.gap + 4.0 > cell as f64 {
                    return Err(Error::param("gap", "must be at least 4 px shorter than a cell"));
                }
                if tiling_lines(self.height, cell).len() < 2 || tiling_lines(self.width, cell).len() < 2 {
                    return Err(Error::param("cell", "slices too small for one interior cell"));
                }
            }
        }
        Ok(())
    }

    /// Betti numbers every ground-truth membrane slice has.
    pub fn expected_betti(&self) -> (usize, usize) {
        match self.structure {
            Structure::Rings { count } => (count, count),
            Structure::Tiling { cell } => {
                let ny = tiling_lines(self.height, cell).len();
                let nx = tiling_lines(self.width, cell).len();
                (1, (nx - 1) * (ny - 1))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVolume {
    pub image: Vec<ScalarField2D<f64>>,
    pub membrane: Vec<BinaryMask2D>,
    pub labels: Vec<LabelMap2D>,
}

impl SyntheticVolume {
    pub fn membrane_fields(&self) -> Vec<ScalarField2D<f64>> {
        self.membrane.iter().map(|m| m.to_field()).collect()
    }
}

struct RingLayout {
    centers: Vec<(f64, f64)>,
    radius: f64,
    /// How far a center may drift from its grid position.
    slack: f64,
}

const RING_HALF_WIDTH: f64 = 1.0;

fn ring_layout(spec: &SyntheticSpec, count: usize) -> Result<RingLayout> {
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols);
    let (ch, cw) = (spec.height as f64 / rows as f64, spec.width as f64 / cols as f64);
    let half = ch.min(cw) / 2.0;
    let radius = (0.6 * half).floor();
    let slack = half - radius - RING_HALF_WIDTH - 1.5;
    if radius < 3.0 || slack < 0.0 {
        return Err(Error::param("rings", format!("{count} rings do not fit in {}x{}", spec.height, spec.width)));
    }
    let centers = (0..count)
        .map(|i| ((i / cols) as f64 * ch + ch / 2.0 - 0.5, (i % cols) as f64 * cw + cw / 2.0 - 0.5))
        .collect();
    Ok(RingLayout { centers, radius, slack })
}

/// Nominal line positions, at least two pixels from either border.
fn tiling_lines(len: usize, cell: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let mut p = 2.0 + (cell as f64) / 2.0;
    while p <= len as f64 - 3.0 {
        out.push(p);
        p += cell as f64;
    }
    out
}

fn step(rng: &mut ChaCha8Rng, jitter: f64) -> f64 {
    if jitter > 0.0 {
        rng.gen_range(-jitter..=jitter)
    } else {
        0.0
    }
}

/// Membrane mask plus one sampled gap (as a mask to erase from the image).
fn ring_slice(
    spec: &SyntheticSpec,
    layout: &RingLayout,
    offsets: &[(f64, f64)],
    gap: Option<(usize, f64)>,
) -> Result<(BinaryMask2D, BinaryMask2D)> {
    let (h, w) = (spec.height, spec.width);
    let centers: Vec<(f64, f64)> =
        layout.centers.iter().zip(offsets).map(|(&(r, c), &(dr, dc))| (r + dr, c + dc)).collect();
    let owner = |r: usize, c: usize| {
        centers.iter().position(|&(cr, cc)| {
            let d = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt();
            (d - layout.radius).abs() <= RING_HALF_WIDTH
        })
    };
    let membrane = BinaryMask2D::from_fn(w, h, |r, c| owner(r, c).is_some())?;
    let gap_mask = BinaryMask2D::from_fn(w, h, |r, c| match (gap, owner(r, c)) {
        (Some((ring, angle)), Some(o)) if o == ring => {
            let (cr, cc) = centers[ring];
            let a = (r as f64 - cr).atan2(c as f64 - cc);
            let diff = (a - angle + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
            diff.abs() * layout.radius <= spec.gap / 2.0
        }
        _ => false,
    })?;
    Ok((membrane, gap_mask))
}

fn tiling_slice(
    spec: &SyntheticSpec,
    rows: &[f64],
    cols: &[f64],
    gap: Option<(bool, usize, f64)>,
) -> Result<(BinaryMask2D, BinaryMask2D)> {
    let (h, w) = (spec.height, spec.width);
    let on = |x: usize, lines: &[f64]| lines.iter().position(|&p| (x as f64 - p).abs() <= 0.5);
    let membrane = BinaryMask2D::from_fn(w, h, |r, c| on(r, rows).is_some() || on(c, cols).is_some())?;
    // a gap cuts one line segment between two crossings
    let gap_mask = BinaryMask2D::from_fn(w, h, |r, c| match gap {
        Some((horizontal, line, at)) => {
            if horizontal {
                on(r, rows) == Some(line) && on(c, cols).is_none() && (c as f64 - at).abs() <= spec.gap / 2.0
            } else {
                on(c, cols) == Some(line) && on(r, rows).is_none() && (r as f64 - at).abs() <= spec.gap / 2.0
            }
        }
        None => false,
    })?;
    Ok((membrane, gap_mask))
}

/// Clamps each line to within `slack` of its nominal position.
fn settle_lines(lines: &mut [f64], nominal: &[f64], slack: f64) {
    for (p, &n) in lines.iter_mut().zip(nominal) {
        *p = p.clamp(n - slack, n + slack);
    }
}

/// A point on a line, strictly between two neighbouring crossings.
fn segment_point(rng: &mut ChaCha8Rng, cross: &[f64], gap: f64) -> f64 {
    let i = rng.gen_range(0..cross.len() - 1);
    let margin = gap / 2.0 + 1.0;
    let (a, b) = (cross[i] + margin, cross[i + 1] - margin);
    if a < b {
        rng.gen_range(a..=b)
    } else {
        (cross[i] + cross[i + 1]) / 2.0
    }
}

fn flip<T: Clone>(data: &[T], h: usize, w: usize, lr: bool, ud: bool) -> Vec<T> {
    (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let r = if ud { h - 1 - r } else { r };
            let c = if lr { w - 1 - c } else { c };
            data[r * w + c].clone()
        })
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticVolume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::param("noise", e.to_string()))?;
    let (h, w) = (spec.height, spec.width);
    let (flip_lr, flip_ud) = if spec.flips { (rng.gen_bool(0.5), rng.gen_bool(0.5)) } else { (false, false) };

    let mut masks = Vec::with_capacity(spec.depth);
    match spec.structure {
        Structure::Rings { count } => {
            let layout = ring_layout(spec, count)?;
            let mut offsets = vec![(0.0, 0.0); count];
            for _ in 0..spec.depth {
                for o in offsets.iter_mut() {
                    o.0 = (o.0 + step(&mut rng, spec.jitter)).clamp(-layout.slack, layout.slack);
                    o.1 = (o.1 + step(&mut rng, spec.jitter)).clamp(-layout.slack, layout.slack);
                }
                let gap = rng
                    .gen_bool(spec.break_prob)
                    .then(|| (rng.gen_range(0..count), rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)));
                masks.push(ring_slice(spec, &layout, &offsets, gap)?);
            }
        }
        Structure::Tiling { cell } => {
            let (nom_r, nom_c) = (tiling_lines(h, cell), tiling_lines(w, cell));
            let slack = ((cell as f64 - 4.0) / 2.0).min(1.5).max(0.0);
            let (mut rows, mut cols) = (nom_r.clone(), nom_c.clone());
            for _ in 0..spec.depth {
                for p in rows.iter_mut().chain(cols.iter_mut()) {
                    *p += step(&mut rng, spec.jitter);
                }
                settle_lines(&mut rows, &nom_r, slack);
                settle_lines(&mut cols, &nom_c, slack);
                let (rows_px, cols_px): (Vec<f64>, Vec<f64>) =
                    (rows.iter().map(|p| p.round()).collect(), cols.iter().map(|p| p.round()).collect());
                let gap = rng.gen_bool(spec.break_prob).then(|| {
                    let horizontal = rng.gen_bool(0.5);
                    if horizontal {
                        let line = rng.gen_range(0..rows_px.len());
                        (true, line, segment_point(&mut rng, &cols_px, spec.gap))
                    } else {
                        let line = rng.gen_range(0..cols_px.len());
                        (false, line, segment_point(&mut rng, &rows_px, spec.gap))
                    }
                });
                masks.push(tiling_slice(spec, &rows_px, &cols_px, gap)?);
            }
        }
    }

    let mut volume = SyntheticVolume { image: Vec::new(), membrane: Vec::new(), labels: Vec::new() };
    for (membrane, gap) in masks {
        let values: Vec<f64> = membrane
            .bits()
            .iter()
            .zip(gap.bits())
            .map(|(&m, &g)| {
                let base = if m && !g { MEMBRANE_LEVEL } else { BACKGROUND_LEVEL };
                base + noise.sample(&mut rng)
            })
            .collect();
        let membrane = BinaryMask2D::new(w, h, flip(membrane.bits(), h, w, flip_lr, flip_ud))?;
        let image = ScalarField2D::new_clamped(w, h, flip(&values, h, w, flip_lr, flip_ud))?;
        volume.labels.push(label_regions(&membrane));
        volume.membrane.push(membrane);
        volume.image.push(image);
    }
    Ok(volume)
}

/// Writes the three volumes of [`generate`] into `dir`.
pub fn gen_data(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<SyntheticVolume> {
    let dir = dir.as_ref();
    let volume = generate(spec)?;
    write_tensor(dir.join(IMAGE_FILE), &RawTensor::from_fields(&volume.image)?)?;
    write_tensor(dir.join(MEMBRANE_FILE), &RawTensor::from_fields(&volume.membrane_fields())?)?;
    write_tensor(dir.join(LABELS_FILE), &RawTensor::from_labels(&volume.labels)?)?;
    Ok(volume)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::threshold;
    use crate::persistence::betti_numbers;
    use proptest::prelude::*;

    fn rings(count: usize) -> SyntheticSpec {
        SyntheticSpec { depth: 6, height: 40, width: 40, structure: Structure::Rings { count }, ..Default::default() }
    }

    #[test]
    fn clean_generation_is_constant() {
        let spec = SyntheticSpec { jitter: 0.0, noise: 0.0, break_prob: 0.0, ..rings(3) };
        let v = generate(&spec).unwrap();
        assert!(v.image.windows(2).all(|p| p[0] == p[1]));
        assert!(v.membrane.windows(2).all(|p| p[0] == p[1]));
        assert_eq!(betti_numbers(&v.membrane[0]), (3, 3));
    }

    #[test]
    fn forced_breaks_open_every_slice() {
        let spec = SyntheticSpec { noise: 0.0, break_prob: 1.0, ..rings(1) };
        let v = generate(&spec).unwrap();
        for (img, gt) in v.image.iter().zip(&v.membrane) {
            assert_eq!(betti_numbers(gt), (1, 1));
            assert_eq!(betti_numbers(&threshold(img, 0.5)).1, 0);
        }
        let spec = SyntheticSpec {
            noise: 0.0,
            break_prob: 1.0,
            structure: Structure::Tiling { cell: 10 },
            ..rings(1)
        };
        let v = generate(&spec).unwrap();
        let (_, b1) = spec.expected_betti();
        for img in &v.image {
            assert_eq!(betti_numbers(&threshold(img, 0.5)).1, b1 - 1);
        }
    }

    #[test]
    fn labels_follow_membrane() {
        let v = generate(&SyntheticSpec { structure: Structure::Tiling { cell: 9 }, ..rings(1) }).unwrap();
        let (ny, nx) = (tiling_lines(40, 9).len(), tiling_lines(40, 9).len());
        for (l, m) in v.labels.iter().zip(&v.membrane) {
            assert_eq!(l.max_label() as usize, (nx + 1) * (ny + 1));
            for (i, &bit) in m.bits().iter().enumerate() {
                assert_eq!(bit, l.labels()[i] == 0);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&SyntheticSpec { break_prob: 1.5, ..rings(1) }).is_err());
        assert!(generate(&SyntheticSpec { jitter: -1.0, ..rings(1) }).is_err());
        assert!(generate(&rings(400)).is_err());
        assert!(generate(&SyntheticSpec { structure: Structure::Tiling { cell: 2 }, ..rings(1) }).is_err());
    }

    #[test]
    fn files_are_deterministic() {
        let spec = rings(2);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        gen_data(&spec, a.path()).unwrap();
        gen_data(&spec, b.path()).unwrap();
        for f in [IMAGE_FILE, MEMBRANE_FILE, LABELS_FILE] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ground_truth_topology_is_exact(
            seed in any::<u64>(),
            count in 1usize..6,
            cell in 7usize..14,
            jitter in 0.0f64..3.0,
            tiling in any::<bool>(),
            flips in any::<bool>(),
        ) {
            let structure = if tiling { Structure::Tiling { cell } } else { Structure::Rings { count } };
            let spec = SyntheticSpec { seed, jitter, flips, structure, depth: 4, height: 44, width: 36, ..Default::default() };
            let v = generate(&spec).unwrap();
            for m in &v.membrane {
                prop_assert_eq!(betti_numbers(m), spec.expected_betti());
            }
        }
    }
}
