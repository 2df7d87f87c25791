//! Run configuration: a JSON file whose every field has a default, with a
//! few values overridable from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use wlrn::bag_match::MatchConfig;
use wlrn::data::{BagParams, DataConfig, SceneConfig};
use wlrn::retrieval::default_tau_grid;
use wlrn::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub threads: usize,
    /// Run directory holding every input and output file.
    pub out: PathBuf,
    pub data: DataSection,
    pub matching: MatchingSection,
    pub train: TrainSection,
    pub retrieval: RetrievalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            out: PathBuf::from("run"),
            data: DataSection::default(),
            matching: MatchingSection::default(),
            train: TrainSection::default(),
            retrieval: RetrievalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub objects: usize,
    pub views: usize,
    pub n: usize,
    /// Objects per split as `[train, val, test]`; derived from `objects`
    /// (60/20/20) when absent.
    pub split: Option<[usize; 3]>,
    pub patch_radius: usize,
    pub fast_threshold: f64,
    pub max_keypoints: usize,
    pub scene_size: usize,
    pub primitives: usize,
    pub palette_size: usize,
    pub max_corner_jitter: f64,
    pub photometric_jitter: f64,
    pub max_noise_sigma: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let bag = BagParams::default();
        Self {
            objects: 50,
            views: 4,
            n: bag.n,
            split: None,
            patch_radius: bag.patch_radius,
            fast_threshold: bag.fast_threshold,
            max_keypoints: bag.max_keypoints,
            scene_size: scene.size,
            primitives: scene.primitives,
            palette_size: scene.palette_size,
            max_corner_jitter: scene.max_corner_jitter,
            photometric_jitter: scene.photometric_jitter,
            max_noise_sigma: scene.max_noise_sigma,
        }
    }
}

impl DataSection {
    pub fn split_sizes(&self) -> [usize; 3] {
        self.split.unwrap_or_else(|| {
            let held_out = self.objects / 5;
            [self.objects.saturating_sub(2 * held_out), held_out, held_out]
        })
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            views: self.views,
            scene: SceneConfig {
                size: self.scene_size,
                primitives: self.primitives,
                max_corner_jitter: self.max_corner_jitter,
                photometric_jitter: self.photometric_jitter,
                max_noise_sigma: self.max_noise_sigma,
                identity_warp: false,
                palette_size: self.palette_size,
            },
            bag: BagParams {
                n: self.n,
                patch_radius: self.patch_radius,
                fast_threshold: self.fast_threshold,
                max_keypoints: self.max_keypoints,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.objects >= 2,
            "data.objects must be at least 2 (triplets need a second object), got {}",
            self.objects
        );
        let split = self.split_sizes();
        ensure!(
            split.iter().sum::<usize>() == self.objects,
            "data.split {split:?} does not add up to {} objects",
            self.objects
        );
        ensure!(
            split.iter().all(|&s| s >= 2),
            "every split needs at least 2 objects, got {split:?} from {} objects",
            self.objects
        );
        ensure!(self.views >= 2, "data.views must be at least 2, got {}", self.views);
        ensure!(self.n >= 1, "data.n must be positive");
        ensure!(self.patch_radius >= 1, "data.patch_radius must be positive");
        ensure!(
            self.max_keypoints >= self.n,
            "data.max_keypoints ({}) is below the bag size {}",
            self.max_keypoints,
            self.n
        );
        ensure!(
            self.fast_threshold > 0.0 && self.fast_threshold < 1.0,
            "data.fast_threshold must lie in (0, 1)"
        );
        self.data_config().scene.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingSection {
    pub tau: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for MatchingSection {
    fn default() -> Self {
        let m = MatchConfig::default();
        Self {
            tau: m.tau,
            beta: m.beta,
            epsilon: m.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr0: f64,
    pub batch_size: usize,
    pub iters_per_round: usize,
    pub triplets_per_round: usize,
    pub rounds: usize,
    pub patience: usize,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub val_triplets: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr0: t.lr0,
            batch_size: t.batch_size,
            iters_per_round: t.iters_per_round,
            triplets_per_round: t.triplets_per_round,
            rounds: t.rounds,
            patience: t.patience,
            rmsprop_decay: t.rmsprop_decay,
            rmsprop_eps: t.rmsprop_eps,
            val_triplets: t.val_triplets,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub tau_grid: Vec<f64>,
    /// Codebook sizes for VLAD evaluation.
    pub k: Vec<usize>,
    pub kmeans_iters: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            tau_grid: default_tau_grid(),
            k: vec![1, 2, 4, 8],
            kmeans_iters: 100,
        }
    }
}

impl RetrievalSection {
    fn validate(&self) -> Result<()> {
        ensure!(!self.tau_grid.is_empty(), "retrieval.tau_grid is empty");
        if let Some(t) = self.tau_grid.iter().find(|t| !(**t > 0.0 && **t < 4.0)) {
            bail!("retrieval.tau_grid value {t} lies outside (0, 4)");
        }
        ensure!(!self.k.is_empty(), "retrieval.k is empty");
        ensure!(self.k.iter().all(|&k| k >= 1), "retrieval.k values must be positive");
        ensure!(self.kmeans_iters >= 1, "retrieval.kmeans_iters must be positive");
        Ok(())
    }
}

/// Values given on the command line; each replaces the file's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies overrides and
    /// validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(t) = overrides.threads {
            cfg.threads = t;
        }
        if let Some(o) = &overrides.out {
            cfg.out.clone_from(o);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.threads >= 1, "threads must be at least 1");
        self.data.validate()?;
        self.match_config()?;
        self.train_config()?.validate()?;
        self.retrieval.validate()?;
        Ok(())
    }

    pub fn match_config(&self) -> Result<MatchConfig> {
        let m = &self.matching;
        Ok(MatchConfig::new(m.tau, m.beta, m.epsilon)?)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            matching: self.match_config()?,
            lr0: t.lr0,
            batch_size: t.batch_size,
            iters_per_round: t.iters_per_round,
            triplets_per_round: t.triplets_per_round,
            rounds: t.rounds,
            patience: t.patience,
            rmsprop_decay: t.rmsprop_decay,
            rmsprop_eps: t.rmsprop_eps,
            val_triplets: t.val_triplets,
            seed: self.seed,
        })
    }
}
