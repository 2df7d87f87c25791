use crate::error::{Error, Result};
use crate::net::{Patch, PATCH_CHANNELS, PATCH_SIDE};
use crate::tensor::Tensor;

use super::fast::{fast_detect, Keypoint};
use super::image::{bilinear, downsample};
use super::scene::SceneImage;

/// Images are reduced by this factor before detection and cropping.
pub const DOWNSAMPLE_FACTOR: usize = 4;

/// `n` patches cut from one view of one object.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBag {
    pub object_id: u32,
    pub view_id: u32,
    pub patches: Vec<Patch>,
    /// Patch centres in downsampled-image coordinates.
    pub keypoints: Vec<(f64, f64)>,
}

impl PatchBag {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Crop geometry and detector settings used to turn a view into a bag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BagParams {
    pub n: usize,
    /// Half side of the square crop, in downsampled pixels.
    pub patch_radius: usize,
    pub fast_threshold: f64,
    /// Detector output cap before the border filter.
    pub max_keypoints: usize,
}

impl Default for BagParams {
    fn default() -> Self {
        Self {
            n: 32,
            patch_radius: 16,
            fast_threshold: 0.05,
            max_keypoints: 75,
        }
    }
}

/// Whether a crop of half side `radius` centred on `(x, y)` fits in a
/// `w x h` image.
pub fn crop_fits(x: usize, y: usize, radius: usize, w: usize, h: usize) -> bool {
    x >= radius && y >= radius && x + radius <= w && y + radius <= h
}

/// Resamples the square `[x - r, x + r)` x `[y - r, y + r)` of a `[3, H, W]`
/// image to a 32x32 patch. With `r = 16` the sample grid falls exactly on
/// pixel centres. Values are rounded to single precision so bags survive
/// the dataset format unchanged.
pub fn crop_patch(image: &Tensor, x: f64, y: f64, radius: usize) -> Result<Patch> {
    let step = 2.0 * radius as f64 / PATCH_SIDE as f64;
    let x0 = x - radius as f64 + 0.5 * step - 0.5;
    let y0 = y - radius as f64 + 0.5 * step - 0.5;
    let mut data = Vec::with_capacity(Patch::LEN);
    for c in 0..PATCH_CHANNELS {
        for i in 0..PATCH_SIDE {
            for j in 0..PATCH_SIDE {
                let v = bilinear(image, c, x0 + j as f64 * step, y0 + i as f64 * step);
                data.push(f64::from(v as f32));
            }
        }
    }
    Patch::new(Tensor::new(&[PATCH_CHANNELS, PATCH_SIDE, PATCH_SIDE], data)?)
}

/// Cuts a bag of `n` patches from a view. `detections` are in downsampled
/// coordinates and assumed sorted by decreasing strength; the first `n` whose
/// crop fits inside the image are used. Too few usable detections is an
/// error: bags are never padded.
pub fn extract_bag(scene: &SceneImage, detections: &[Keypoint], n: usize, patch_radius: usize) -> Result<PatchBag> {
    if n == 0 || patch_radius == 0 {
        return Err(Error::InvalidArgument(
            "bag size and patch radius must be positive".into(),
        ));
    }
    let small = downsample(&scene.pixels, DOWNSAMPLE_FACTOR)?;
    let (h, w) = (small.shape()[1], small.shape()[2]);
    let usable: Vec<&Keypoint> = detections
        .iter()
        .filter(|k| crop_fits(k.x, k.y, patch_radius, w, h))
        .collect();
    if usable.len() < n {
        return Err(Error::NotEnoughKeypoints {
            found: usable.len(),
            needed: n,
        });
    }
    let mut patches = Vec::with_capacity(n);
    let mut keypoints = Vec::with_capacity(n);
    for k in &usable[..n] {
        let (x, y) = (k.x as f64, k.y as f64);
        patches.push(crop_patch(&small, x, y, patch_radius)?);
        keypoints.push((x, y));
    }
    Ok(PatchBag {
        object_id: scene.object_id,
        view_id: scene.view_id,
        patches,
        keypoints,
    })
}

/// Downsample, detect and crop: the whole view-to-bag pipeline.
pub fn bag_from_scene(scene: &SceneImage, params: &BagParams) -> Result<PatchBag> {
    let small = downsample(&scene.pixels, DOWNSAMPLE_FACTOR)?;
    let detections = fast_detect(&small, params.fast_threshold, params.max_keypoints)?;
    extract_bag(scene, &detections, params.n, params.patch_radius)
}
