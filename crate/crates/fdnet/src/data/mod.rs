//! Dataset handling: disk loading in the fixed layout, resizing, PNG IO
//! and deterministic synthetic phantoms (see [`phantom`]).
//!
//! Layout on disk: `root/images/{train,test}/<id>.png` paired with
//! `root/masks/{train,test}/<id>.png`. Images are 8-bit grayscale scaled
//! to [0,1]; masks binarize at >127.

pub mod phantom;

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{FdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = FdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(FdError::Config(format!(
                "split must be train or test, got {other}"
            ))),
        }
    }
}

/// One image/mask pair. Image intensities lie in [0,1]; the mask holds
/// exactly 0.0 or 1.0.
#[derive(Debug, Clone)]
pub struct SegmentationSample {
    pub id: String,
    pub image: Array2<f32>,
    pub mask: Array2<f32>,
}

impl SegmentationSample {
    /// Check the type invariants; loaders uphold them by construction,
    /// tests call this directly.
    pub fn validate(&self) -> Result<()> {
        if self.image.dim() != self.mask.dim() {
            return Err(FdError::Validation(format!(
                "sample {}: image {:?} vs mask {:?}",
                self.id,
                self.image.dim(),
                self.mask.dim()
            )));
        }
        if !self.image.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(FdError::Validation(format!(
                "sample {}: intensities outside [0,1]",
                self.id
            )));
        }
        if !self.mask.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(FdError::Validation(format!(
                "sample {}: mask is not binary",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
enum Backing {
    Disk { image: PathBuf, mask: PathBuf },
    Memory(SegmentationSample),
}

/// Ordered collection of samples for one split; disk entries load lazily.
#[derive(Debug)]
pub struct DatasetHandle {
    pub split: Split,
    ids: Vec<String>,
    backing: Vec<Backing>,
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, index: usize) -> Result<SegmentationSample> {
        match &self.backing[index] {
            Backing::Memory(s) => Ok(s.clone()),
            Backing::Disk { image, mask } => {
                let img = load_gray(image)?;
                let msk = load_gray(mask)?.mapv(|v| if v > 127.0 / 255.0 { 1.0 } else { 0.0 });
                let sample = SegmentationSample {
                    id: self.ids[index].clone(),
                    image: img,
                    mask: msk,
                };
                sample.validate()?;
                Ok(sample)
            }
        }
    }

    pub fn load_all(&self) -> Result<Vec<SegmentationSample>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// Wrap in-memory samples (synthetic data) in a handle; ids must be
    /// unique. Samples are reordered lexicographically by id.
    pub fn from_samples(split: Split, mut samples: Vec<SegmentationSample>) -> Result<Self> {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in samples.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(FdError::Validation(format!(
                    "duplicate sample id {}",
                    pair[0].id
                )));
            }
        }
        let ids = samples.iter().map(|s| s.id.clone()).collect();
        let backing = samples.into_iter().map(Backing::Memory).collect();
        Ok(Self {
            split,
            ids,
            backing,
        })
    }
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| FdError::io(dir.to_path_buf(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| FdError::io(dir.to_path_buf(), e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Scan `root/images/<split>` and `root/masks/<split>` for matching PNG
/// pairs. Missing or empty image directories are reported as
/// `DatasetNotFound`; unmatched files as `Pairing` errors naming them.
pub fn load_dataset(root: &Path, split: Split) -> Result<DatasetHandle> {
    let images_dir = root.join("images").join(split.as_str());
    let masks_dir = root.join("masks").join(split.as_str());
    if !images_dir.is_dir() {
        return Err(FdError::DatasetNotFound(images_dir));
    }
    if !masks_dir.is_dir() {
        return Err(FdError::DatasetNotFound(masks_dir));
    }
    let image_ids = png_stems(&images_dir)?;
    let mask_ids = png_stems(&masks_dir)?;
    if image_ids.is_empty() {
        return Err(FdError::DatasetNotFound(images_dir));
    }
    let image_set: std::collections::BTreeSet<&String> = image_ids.iter().collect();
    let mask_set: std::collections::BTreeSet<&String> = mask_ids.iter().collect();
    let mut orphans = Vec::new();
    for id in image_ids.iter().filter(|id| !mask_set.contains(id)) {
        orphans.push(format!("image {id} has no mask"));
    }
    for id in mask_ids.iter().filter(|id| !image_set.contains(id)) {
        orphans.push(format!("mask {id} has no image"));
    }
    if !orphans.is_empty() {
        return Err(FdError::Pairing(orphans.join("; ")));
    }
    let backing = image_ids
        .iter()
        .map(|id| Backing::Disk {
            image: images_dir.join(format!("{id}.png")),
            mask: masks_dir.join(format!("{id}.png")),
        })
        .collect();
    Ok(DatasetHandle {
        split,
        ids: image_ids,
        backing,
    })
}

/// Per-axis (index, index+1, fraction) for bilinear interpolation with
/// half-pixel centers; exact passthrough when sizes match.
fn lin_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5)
                .max(0.0)
                .min((n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn resize_bilinear(src: &Array2<f32>, target: (usize, usize)) -> Array2<f32> {
    let (h, w) = src.dim();
    let (th, tw) = target;
    let ty = lin_table(h, th);
    let tx = lin_table(w, tw);
    Array2::from_shape_fn((th, tw), |(oy, ox)| {
        let (y0, y1, wy) = ty[oy];
        let (x0, x1, wx) = tx[ox];
        let v = src[[y0, x0]] as f64 * (1.0 - wy) * (1.0 - wx)
            + src[[y0, x1]] as f64 * (1.0 - wy) * wx
            + src[[y1, x0]] as f64 * wy * (1.0 - wx)
            + src[[y1, x1]] as f64 * wy * wx;
        v as f32
    })
}

pub fn resize_nearest(src: &Array2<f32>, target: (usize, usize)) -> Array2<f32> {
    let (h, w) = src.dim();
    let (th, tw) = target;
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    Array2::from_shape_fn((th, tw), |(oy, ox)| {
        let iy = (((oy as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let ix = (((ox as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        src[[iy, ix]]
    })
}

/// Resize a sample to a backbone-compatible target: image bilinearly,
/// mask by nearest neighbor so it stays binary.
pub fn resize_sample(sample: &SegmentationSample, target: (usize, usize)) -> Result<SegmentationSample> {
    let (th, tw) = target;
    if th < 32 || tw < 32 || th % 32 != 0 || tw % 32 != 0 {
        return Err(FdError::Shape(format!(
            "resize target must be a multiple of 32 in both dims, got {th}x{tw}"
        )));
    }
    Ok(SegmentationSample {
        id: sample.id.clone(),
        image: resize_bilinear(&sample.image, target),
        mask: resize_nearest(&sample.mask, target),
    })
}

/// Load an 8-bit grayscale PNG as intensities in [0,1].
pub fn load_gray(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)
        .map_err(|e| FdError::image(path.to_path_buf(), e))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), data).unwrap())
}

/// Write intensities in [0,1] as an 8-bit grayscale PNG.
pub fn save_gray(path: &Path, data: &Array2<f32>) -> Result<()> {
    let (h, w) = data.dim();
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| FdError::image(path.to_path_buf(), e))
}
