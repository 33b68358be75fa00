//! Synthetic microscopy phantoms: a textured background, dim branched
//! cells, and bright compact interference blobs drawn over them.
//!
//! Generation is a pure function of the spec (seed included): identical
//! specs produce bit-identical samples. Ground truth masks cover kept
//! cells only, and never a pixel inside an interference blob; cells that
//! an interference blob covers past `drop_overlap` are dropped from the
//! mask entirely and recorded as such in the metadata.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::SegmentationSample;
use crate::error::{FdError, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhantomSpec {
    /// Canvas (height, width) in pixels.
    pub canvas_size: (usize, usize),
    pub cell_count: usize,
    pub interference_count: usize,
    /// Intensity added inside cells, relative to the background.
    pub cell_contrast: f64,
    /// Intensity added inside interference blobs; must exceed the cell
    /// contrast so blobs read as the brighter structure.
    pub interference_contrast: f64,
    /// A cell whose overlap with interference exceeds this fraction is
    /// dropped from the mask.
    pub drop_overlap: f64,
    /// Multiplier on cell feature sizes (soma radius, arm width and
    /// length). 1.0 gives fine structures; larger values give blob-like
    /// cells that coarse prediction grids can actually resolve.
    pub structure_scale: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(canvas_size: (usize, usize), cell_count: usize, interference_count: usize, seed: u64) -> Self {
        Self {
            canvas_size,
            cell_count,
            interference_count,
            cell_contrast: 0.12,
            interference_contrast: 0.55,
            drop_overlap: 0.5,
            structure_scale: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas_size;
        if h < 32 || w < 32 {
            return Err(FdError::Config(format!(
                "phantom canvas must be at least 32x32, got {h}x{w}"
            )));
        }
        if !(0.0..=1.0).contains(&self.cell_contrast)
            || !(0.0..=1.0).contains(&self.interference_contrast)
        {
            return Err(FdError::Config(
                "phantom contrasts must lie in [0,1]".into(),
            ));
        }
        if self.interference_contrast <= self.cell_contrast {
            return Err(FdError::Config(format!(
                "interference contrast {} must exceed cell contrast {}",
                self.interference_contrast, self.cell_contrast
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_overlap) {
            return Err(FdError::Config(format!(
                "drop_overlap must lie in [0,1], got {}",
                self.drop_overlap
            )));
        }
        if !self.structure_scale.is_finite() || self.structure_scale <= 0.0 {
            return Err(FdError::Config(format!(
                "structure_scale must be positive, got {}",
                self.structure_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CellMeta {
    pub center: (usize, usize),
    pub area: usize,
    /// Fraction of the cell's pixels covered by interference.
    pub overlap_ratio: f64,
    pub dropped: bool,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BlobMeta {
    pub center: (usize, usize),
    pub area: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PhantomMeta {
    pub spec: PhantomSpec,
    pub cells: Vec<CellMeta>,
    pub interference: Vec<BlobMeta>,
}

/// Intermediate result carrying the exact pixel supports, so the mask
/// composition rule can be checked from the outside.
pub struct PhantomParts {
    pub sample: SegmentationSample,
    pub meta: PhantomMeta,
    pub cell_pixels: Vec<Vec<(usize, usize)>>,
    pub interference_union: Array2<bool>,
}

fn smooth_noise(rng: &mut ChaCha20Rng, shape: (usize, usize), period: usize, amplitude: f64) -> Array2<f64> {
    let (h, w) = shape;
    let gh = h.div_ceil(period) + 1;
    let gw = w.div_ceil(period) + 1;
    let grid = Array2::from_shape_fn((gh, gw), |_| rng.random_range(-1.0..1.0));
    Array2::from_shape_fn((h, w), |(y, x)| {
        let fy = y as f64 / period as f64;
        let fx = x as f64 / period as f64;
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let wy = fy - y0 as f64;
        let wx = fx - x0 as f64;
        let v = grid[[y0, x0]] * (1.0 - wy) * (1.0 - wx)
            + grid[[y0, x0 + 1]] * (1.0 - wy) * wx
            + grid[[y0 + 1, x0]] * wy * (1.0 - wx)
            + grid[[y0 + 1, x0 + 1]] * wy * wx;
        amplitude * v
    })
}

fn stamp_disk(support: &mut Array2<bool>, cy: f64, cx: f64, radius: f64) {
    let (h, w) = support.dim();
    let y_lo = (cy - radius).floor().max(0.0) as usize;
    let y_hi = ((cy + radius).ceil() as usize).min(h.saturating_sub(1));
    let x_lo = (cx - radius).floor().max(0.0) as usize;
    let x_hi = ((cx + radius).ceil() as usize).min(w.saturating_sub(1));
    let r2 = radius * radius;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= r2 {
                support[[y, x]] = true;
            }
        }
    }
}

/// Rasterize one branched cell: a soma disk plus a few random-walk arms
/// of small thickness. Returns the pixel support.
fn draw_cell(rng: &mut ChaCha20Rng, shape: (usize, usize), unit: f64) -> (Array2<bool>, (usize, usize)) {
    let (h, w) = shape;
    let margin = (8.0 * unit).max(4.0).min(h.min(w) as f64 / 2.0 - 1.0);
    let cy = rng.random_range(margin..(h as f64 - margin));
    let cx = rng.random_range(margin..(w as f64 - margin));
    let soma = unit * rng.random_range(3.0..6.0);
    let mut support = Array2::from_elem(shape, false);
    stamp_disk(&mut support, cy, cx, soma);
    let arms = rng.random_range(3..=6);
    for _ in 0..arms {
        let mut angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut y = cy;
        let mut x = cx;
        let steps = rng.random_range(8..20);
        let step_len = unit * rng.random_range(1.2..2.2);
        let thickness = (unit * rng.random_range(0.8..1.6)).max(0.7);
        for _ in 0..steps {
            angle += rng.random_range(-0.5..0.5);
            y += step_len * angle.sin();
            x += step_len * angle.cos();
            if y < 1.0 || x < 1.0 || y > h as f64 - 2.0 || x > w as f64 - 2.0 {
                break;
            }
            stamp_disk(&mut support, y, x, thickness);
        }
    }
    (support, (cy.round() as usize, cx.round() as usize))
}

/// Rasterize one interference blob: a filled rotated ellipse with a
/// smooth radial intensity profile. Returns (support, profile, center).
fn draw_blob(
    rng: &mut ChaCha20Rng,
    shape: (usize, usize),
) -> (Array2<bool>, Array2<f64>, (usize, usize)) {
    let (h, w) = shape;
    let min_dim = h.min(w) as f64;
    let cy = rng.random_range(0.15 * h as f64..0.85 * h as f64);
    let cx = rng.random_range(0.15 * w as f64..0.85 * w as f64);
    let ry = rng.random_range(min_dim / 10.0..min_dim / 4.0);
    let rx = rng.random_range(min_dim / 10.0..min_dim / 4.0);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (sin_t, cos_t) = theta.sin_cos();
    let mut support = Array2::from_elem(shape, false);
    let mut profile = Array2::zeros(shape);
    let reach = ry.max(rx);
    let y_lo = (cy - reach).floor().max(0.0) as usize;
    let y_hi = ((cy + reach).ceil() as usize).min(h - 1);
    let x_lo = (cx - reach).floor().max(0.0) as usize;
    let x_hi = ((cx + reach).ceil() as usize).min(w - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let u = (dx * cos_t + dy * sin_t) / rx;
            let v = (-dx * sin_t + dy * cos_t) / ry;
            let d2 = u * u + v * v;
            if d2 <= 1.0 {
                support[[y, x]] = true;
                profile[[y, x]] = (1.0 - d2).powf(0.6);
            }
        }
    }
    (support, profile, (cy.round() as usize, cx.round() as usize))
}

/// Full generation with internal supports exposed.
pub fn generate_phantom_parts(spec: &PhantomSpec) -> Result<PhantomParts> {
    spec.validate()?;
    let (h, w) = spec.canvas_size;
    let shape = (h, w);
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let unit = (h.min(w) as f64 / 256.0).max(0.5) * spec.structure_scale;

    // textured background: three octaves of smoothed noise, total
    // amplitude 0.1 around a mid-gray base
    let mut image: Array2<f64> = Array2::from_elem(shape, 0.35);
    let min_dim = h.min(w);
    for (divisor, amp) in [(4usize, 0.05), (8, 0.033), (16, 0.017)] {
        let period = (min_dim / divisor).max(2);
        image = image + smooth_noise(&mut rng, shape, period, amp);
    }

    // dim branched cells
    let mut cell_pixels: Vec<Vec<(usize, usize)>> = Vec::with_capacity(spec.cell_count);
    let mut cell_centers = Vec::with_capacity(spec.cell_count);
    for _ in 0..spec.cell_count {
        let (support, center) = draw_cell(&mut rng, shape, unit);
        let mut pixels = Vec::new();
        for ((y, x), &on) in support.indexed_iter() {
            if on {
                image[[y, x]] += spec.cell_contrast;
                pixels.push((y, x));
            }
        }
        cell_pixels.push(pixels);
        cell_centers.push(center);
    }

    // bright interference blobs over everything
    let mut interference_union = Array2::from_elem(shape, false);
    let mut blob_meta = Vec::with_capacity(spec.interference_count);
    for _ in 0..spec.interference_count {
        let (support, profile, center) = draw_blob(&mut rng, shape);
        let mut area = 0usize;
        for ((y, x), &on) in support.indexed_iter() {
            if on {
                image[[y, x]] += spec.interference_contrast * profile[[y, x]];
                interference_union[[y, x]] = true;
                area += 1;
            }
        }
        blob_meta.push(BlobMeta { center, area });
    }

    // compose the mask: kept cells minus interference
    let mut mask = Array2::from_elem(shape, 0.0f32);
    let mut cell_meta = Vec::with_capacity(spec.cell_count);
    for (idx, pixels) in cell_pixels.iter().enumerate() {
        let area = pixels.len();
        let covered = pixels
            .iter()
            .filter(|&&(y, x)| interference_union[[y, x]])
            .count();
        let overlap_ratio = if area == 0 {
            0.0
        } else {
            covered as f64 / area as f64
        };
        let dropped = overlap_ratio > spec.drop_overlap;
        if !dropped {
            for &(y, x) in pixels {
                if !interference_union[[y, x]] {
                    mask[[y, x]] = 1.0;
                }
            }
        }
        cell_meta.push(CellMeta {
            center: cell_centers[idx],
            area,
            overlap_ratio,
            dropped,
        });
    }

    let image_f32 = image.mapv(|v| v.clamp(0.0, 1.0) as f32);
    let sample = SegmentationSample {
        id: format!("phantom_{:016x}", spec.seed),
        image: image_f32,
        mask,
    };
    sample.validate()?;
    Ok(PhantomParts {
        sample,
        meta: PhantomMeta {
            spec: spec.clone(),
            cells: cell_meta,
            interference: blob_meta,
        },
        cell_pixels,
        interference_union,
    })
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<(SegmentationSample, PhantomMeta)> {
    let parts = generate_phantom_parts(spec)?;
    Ok((parts.sample, parts.meta))
}

/// Generate `count` phantoms from consecutive seeds, with ids that sort
/// in generation order.
pub fn generate_set(
    base: &PhantomSpec,
    count: usize,
    id_prefix: &str,
) -> Result<Vec<(SegmentationSample, PhantomMeta)>> {
    (0..count)
        .map(|i| {
            let mut spec = base.clone();
            spec.seed = base.seed.wrapping_add(i as u64);
            let (mut sample, meta) = generate_phantom(&spec)?;
            sample.id = format!("{id_prefix}{i:04}");
            Ok((sample, meta))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> PhantomSpec {
        PhantomSpec::new((96, 96), 4, 2, seed)
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let spec = small_spec(7);
        let (a, meta_a) = generate_phantom(&spec).unwrap();
        let (b, _) = generate_phantom(&spec).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        assert_eq!(meta_a.cells.len(), 4);
        assert_eq!(meta_a.interference.len(), 2);

        let (c, _) = generate_phantom(&small_spec(8)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn mask_composition_matches_supports() {
        let parts = generate_phantom_parts(&small_spec(3)).unwrap();
        let (h, w) = parts.sample.mask.dim();
        let mut expected = Array2::from_elem((h, w), 0.0f32);
        for (cell, meta) in parts.cell_pixels.iter().zip(&parts.meta.cells) {
            if meta.dropped {
                continue;
            }
            for &(y, x) in cell {
                if !parts.interference_union[[y, x]] {
                    expected[[y, x]] = 1.0;
                }
            }
        }
        assert_eq!(parts.sample.mask, expected);
        // no mask pixel inside any interference blob
        for ((y, x), &m) in parts.sample.mask.indexed_iter() {
            if m == 1.0 {
                assert!(!parts.interference_union[[y, x]]);
            }
        }
    }

    #[test]
    fn heavy_overlap_drops_the_cell() {
        // a cell fully inside a wall of interference must be dropped
        let mut spec = small_spec(11);
        spec.cell_count = 3;
        spec.interference_count = 40;
        let parts = generate_phantom_parts(&spec).unwrap();
        let covered = parts.interference_union.iter().filter(|&&b| b).count();
        let total = parts.interference_union.len();
        assert!(covered as f64 > 0.8 * total as f64, "blob wall too sparse");
        assert!(parts.meta.cells.iter().any(|c| c.dropped));
        for (cell, meta) in parts.cell_pixels.iter().zip(&parts.meta.cells) {
            if meta.dropped {
                for &(y, x) in cell {
                    assert_eq!(parts.sample.mask[[y, x]], 0.0);
                }
            }
        }
    }

    #[test]
    fn drop_threshold_is_respected() {
        let mut spec = small_spec(5);
        spec.drop_overlap = 1.0;
        let parts = generate_phantom_parts(&spec).unwrap();
        // ratio can never exceed 1, so no cell is dropped
        assert!(parts.meta.cells.iter().all(|c| !c.dropped));

        spec.drop_overlap = 0.0;
        let parts = generate_phantom_parts(&spec).unwrap();
        for meta in &parts.meta.cells {
            assert_eq!(meta.dropped, meta.overlap_ratio > 0.0);
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = small_spec(0);
        spec.interference_contrast = spec.cell_contrast;
        assert!(matches!(generate_phantom(&spec), Err(FdError::Config(_))));

        let mut spec = small_spec(0);
        spec.canvas_size = (16, 96);
        assert!(matches!(generate_phantom(&spec), Err(FdError::Config(_))));

        let mut spec = small_spec(0);
        spec.drop_overlap = 1.5;
        assert!(matches!(generate_phantom(&spec), Err(FdError::Config(_))));

        let mut spec = small_spec(0);
        spec.structure_scale = 0.0;
        assert!(matches!(generate_phantom(&spec), Err(FdError::Config(_))));
    }

    #[test]
    fn oversized_structures_still_fit_the_canvas() {
        // feature sizes that dwarf the canvas must clamp, not panic
        let mut spec = small_spec(3);
        spec.structure_scale = 40.0;
        let (sample, meta) = generate_phantom(&spec).unwrap();
        assert_eq!(meta.cells.len(), spec.cell_count);
        assert!(sample.mask.iter().any(|&v| v == 1.0));
    }

    #[test]
    fn blobs_are_brighter_than_cells() {
        let parts = generate_phantom_parts(&small_spec(21)).unwrap();
        let img = &parts.sample.image;
        let mean_at = |pred: &dyn Fn(usize, usize) -> bool| {
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for ((y, x), &v) in img.indexed_iter() {
                if pred(y, x) {
                    sum += v as f64;
                    n += 1;
                }
            }
            sum / n.max(1) as f64
        };
        let blob_mean = mean_at(&|y, x| parts.interference_union[[y, x]]);
        let bg_mean = mean_at(&|y, x| {
            !parts.interference_union[[y, x]] && parts.sample.mask[[y, x]] == 0.0
        });
        let cell_mean = mean_at(&|y, x| parts.sample.mask[[y, x]] == 1.0);
        assert!(cell_mean > bg_mean, "cells should sit above background");
        assert!(blob_mean > cell_mean, "blobs should outshine cells");
    }

    #[test]
    fn empty_counts_give_background_only() {
        let mut spec = small_spec(2);
        spec.cell_count = 0;
        spec.interference_count = 0;
        let (sample, meta) = generate_phantom(&spec).unwrap();
        assert!(sample.mask.iter().all(|&v| v == 0.0));
        assert!(meta.cells.is_empty());
        assert!(meta.interference.is_empty());
        // background keeps its texture
        let min = sample.image.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = sample.image.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(max - min > 0.01, "background should not be flat");
    }

    #[test]
    fn generate_set_ids_are_ordered_and_distinct() {
        let set = generate_set(&small_spec(100), 3, "train_").unwrap();
        let ids: Vec<_> = set.iter().map(|(s, _)| s.id.clone()).collect();
        assert_eq!(ids, ["train_0000", "train_0001", "train_0002"]);
        assert_ne!(set[0].0.image, set[1].0.image);
    }
}
