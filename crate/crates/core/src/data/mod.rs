//! Bi-temporal patch datasets on disk.
//!
//! Layout: `<root>/<site>/<patch>/{A.png, B.png, mask.png}` with a
//! `<root>/manifest.json` listing sites, patches and the split assignment.
//! Images are 8-bit RGB scaled by 1/255, masks are 8-bit gray thresholded
//! at 128.

mod batch;
mod split;
mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use batch::{Batch, BatchIterator};
pub use split::{make_split_manifest, PatchRef, Split, SplitManifest, SplitRatios};
pub use synthetic::{generate_synthetic_dataset, synthesize_pair, SyntheticConfig, CHANGE_THRESHOLD};

pub const IMAGE_A: &str = "A.png";
pub const IMAGE_B: &str = "B.png";
pub const MASK: &str = "mask.png";
pub const MANIFEST: &str = "manifest.json";
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    Missing(PathBuf),
    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{path} is {found:?} but {expected:?} was expected")]
    DimensionMismatch { path: PathBuf, expected: (u32, u32), found: (u32, u32) },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type DataResult<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// One co-registered image pair and its change mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    /// `[3, H, W]` in `[0, 1]`.
    pub image_a: Tensor<f32>,
    /// `[3, H, W]` in `[0, 1]`.
    pub image_b: Tensor<f32>,
    /// `[H, W]` with values in `{0, 1}`.
    pub mask: Tensor<f32>,
    pub site_id: String,
    pub patch_id: String,
}

impl SamplePair {
    /// Normalizes in-memory images the same way [`load_sample`] does.
    pub fn from_images(a: &RgbImage, b: &RgbImage, mask: &GrayImage, site_id: &str, patch_id: &str) -> DataResult<Self> {
        if a.dimensions() != b.dimensions() || a.dimensions() != mask.dimensions() {
            return Err(DataError::Argument(format!(
                "image sizes differ: {:?}, {:?}, {:?}",
                a.dimensions(),
                b.dimensions(),
                mask.dimensions()
            )));
        }
        let (w, h) = a.dimensions();
        let mask = Tensor::from_fn([h as usize, w as usize], |i| {
            if mask.as_raw()[i] >= MASK_THRESHOLD {
                1.0
            } else {
                0.0
            }
        });
        Ok(Self {
            image_a: rgb_to_tensor(a),
            image_b: rgb_to_tensor(b),
            mask,
            site_id: site_id.to_string(),
            patch_id: patch_id.to_string(),
        })
    }
}

fn read_image(path: &Path) -> DataResult<image::DynamicImage> {
    if !path.is_file() {
        return Err(DataError::Missing(path.to_path_buf()));
    }
    let reader = image::ImageReader::open(path).map_err(io_err(path))?;
    let reader = reader.with_guessed_format().map_err(io_err(path))?;
    reader.decode().map_err(|e| DataError::Decode { path: path.to_path_buf(), message: e.to_string() })
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f32::from(raw[p * 3 + c]) / 255.0
    })
}

/// Byte image of a `[3, H, W]` tensor in `[0, 1]`.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let px = |c: usize| (t.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Gray image of a binary `[H, W]` mask (0 or 255).
pub fn mask_to_gray(mask: &Tensor<f32>) -> GrayImage {
    let w = mask.shape()[mask.rank() - 1];
    let h = mask.numel() / w;
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask.data()[y as usize * w + x as usize] >= 0.5 { 255 } else { 0 }])
    })
}

pub fn patch_dir(root: &Path, site_id: &str, patch_id: &str) -> PathBuf {
    root.join(site_id).join(patch_id)
}

/// Reads and normalizes one triplet.
pub fn load_sample(root: &Path, site_id: &str, patch_id: &str) -> DataResult<SamplePair> {
    let dir = patch_dir(root, site_id, patch_id);
    let a_path = dir.join(IMAGE_A);
    let a = read_image(&a_path)?.to_rgb8();
    let dims = a.dimensions();
    let check = |path: &Path, found: (u32, u32)| {
        if found == dims {
            Ok(())
        } else {
            Err(DataError::DimensionMismatch { path: path.to_path_buf(), expected: dims, found })
        }
    };
    let b_path = dir.join(IMAGE_B);
    let b = read_image(&b_path)?.to_rgb8();
    check(&b_path, b.dimensions())?;
    let m_path = dir.join(MASK);
    let m = read_image(&m_path)?.to_luma8();
    check(&m_path, m.dimensions())?;
    SamplePair::from_images(&a, &b, &m, site_id, patch_id)
}

/// Writes a triplet under the dataset layout.
pub fn write_sample(root: &Path, site_id: &str, patch_id: &str, a: &RgbImage, b: &RgbImage, mask: &GrayImage) -> DataResult<()> {
    let dir = patch_dir(root, site_id, patch_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (name, result) in [
        (IMAGE_A, a.save(dir.join(IMAGE_A))),
        (IMAGE_B, b.save(dir.join(IMAGE_B))),
        (MASK, mask.save(dir.join(MASK))),
    ] {
        result.map_err(|e| DataError::Io { path: dir.join(name), source: std::io::Error::other(e) })?;
    }
    Ok(())
}

/// Contents of `<root>/manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub sites: BTreeMap<String, Vec<String>>,
    pub split: SplitManifest,
}

impl DatasetManifest {
    pub fn read(root: &Path) -> DataResult<Self> {
        let path = root.join(MANIFEST);
        if !path.is_file() {
            return Err(DataError::Missing(path));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| DataError::Manifest { path, message: e.to_string() })
    }

    pub fn write(&self, root: &Path) -> DataResult<()> {
        let path = root.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }
}

/// Opened dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> DataResult<Self> {
        Ok(Self { root: root.to_path_buf(), manifest: DatasetManifest::read(root)? })
    }

    pub fn ids(&self, split: Split) -> &[PatchRef] {
        self.manifest.split.patches(split)
    }

    pub fn load(&self, id: &PatchRef) -> DataResult<SamplePair> {
        load_sample(&self.root, &id.site, &id.patch)
    }

    /// Every sample of `split`, in manifest order.
    pub fn load_split(&self, split: Split) -> DataResult<Vec<SamplePair>> {
        self.ids(split).iter().map(|id| self.load(id)).collect()
    }
}
