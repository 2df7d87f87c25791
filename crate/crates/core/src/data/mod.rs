//! Weakly-labeled bag data: synthetic multi-view scenes, FAST keypoints,
//! patch bags and dataset files.

mod bag;
mod dataset;
mod fast;
mod image;
mod scene;

pub use bag::{bag_from_scene, crop_fits, crop_patch, extract_bag, BagParams, PatchBag, DOWNSAMPLE_FACTOR};
pub use dataset::{
    load_dataset, sample_triplet, save_dataset, BagDataset, BagTriplet, Split, TripletIndex, DATASET_MAGIC,
};
pub use fast::{corner_score, fast_detect, fast_detect_gray, Keypoint, ARC_LENGTH, CIRCLE};
pub use image::{bilinear, downsample, to_gray, GrayImage};
pub use scene::{generate_scene, homography_from_points, project, SceneConfig, SceneImage};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Scenes rejected for too few corners are re-rendered with a fresh seed at
/// most this many times per object.
const MAX_ATTEMPTS: u64 = 32;

/// Everything needed to synthesize bags for a set of objects.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub views: usize,
    pub scene: SceneConfig,
    pub bag: BagParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            views: 4,
            scene: SceneConfig::default(),
            bag: BagParams::default(),
        }
    }
}

/// Renders every object and cuts one bag per view. An object whose views do
/// not all yield `n` usable corners is re-rendered from a new seed.
pub fn build_dataset(object_ids: &[u32], split: Split, cfg: &DataConfig, seed: u64) -> Result<BagDataset> {
    let per_object = object_ids
        .par_iter()
        .map(|&id| object_bags(id, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    BagDataset::new(split, cfg.bag.n, per_object.into_iter().flatten().collect())
}

fn object_bags(object_id: u32, cfg: &DataConfig, seed: u64) -> Result<Vec<PatchBag>> {
    let mut last_err = None;
    for attempt in 0..MAX_ATTEMPTS {
        let scene_seed = derive_seed(seed, "scene", (u64::from(object_id) << 8) | attempt);
        let views = generate_scene(scene_seed, object_id, cfg.views, &cfg.scene)?;
        match views
            .iter()
            .map(|v| bag_from_scene(v, &cfg.bag))
            .collect::<Result<Vec<_>>>()
        {
            Ok(bags) => return Ok(bags),
            Err(e @ Error::NotEnoughKeypoints { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}
