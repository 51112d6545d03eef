//! Dataset preparation: frame subsampling, stratified splitting and the
//! procedural soiling-scene generator.
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64`, which produces the same stream on every platform.

mod corpus;
mod image;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{image_level_class, CoverageGrid};
use crate::error::{Error, Result};

pub use corpus::{load_corpus, write_corpus, Corpus, CorpusEntry, CorpusIndex, CorpusSample};
pub use image::RgbImage;
pub use synth::{scene_rng, synth_corpus, synth_scene, BlobSpec, SynthConfig, SynthScene};

/// Frame stride used when sampling video recordings.
pub const DEFAULT_FRAME_STRIDE: usize = 15;

/// Train/validation/test fractions.
pub const DEFAULT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Camera {
    Front,
    Rear,
    Left,
    Right,
}

impl Camera {
    pub const ALL: [Camera; 4] = [Camera::Front, Camera::Rear, Camera::Left, Camera::Right];

    pub fn name(self) -> &'static str {
        match self {
            Camera::Front => "front",
            Camera::Rear => "rear",
            Camera::Left => "left",
            Camera::Right => "right",
        }
    }
}

impl fmt::Display for Camera {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub image_id: String,
    pub camera: Camera,
    /// Split stratum; see [`DatasetItem::from_coverage`].
    pub stratum: String,
}

impl DatasetItem {
    /// Stratum is `(camera, image-level dominant class)`, where the image
    /// class is the coverage-weighted dominant class over all tiles.
    pub fn from_coverage(image_id: impl Into<String>, camera: Camera, grid: &CoverageGrid) -> Self {
        Self {
            image_id: image_id.into(),
            camera,
            stratum: format!("{camera}/{}", image_level_class(grid)),
        }
    }
}

/// Keeps frames `0, stride, 2*stride, ...`.
pub fn subsample_frames<T: Clone>(frames: &[T], stride: usize) -> Result<Vec<T>> {
    if stride == 0 {
        return Err(Error::Argument("frame stride must be at least 1".into()));
    }
    Ok(frames.iter().step_by(stride).cloned().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Argument(format!(
                "unknown split `{other}`, expected train, val or test"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitOutcome {
    pub manifest: SplitManifest,
    pub warnings: Vec<String>,
}

/// Largest-remainder apportionment of `n` items over `ratios`; ties on the
/// remainder go to the earlier split.
pub fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| n as f64 * r);
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let assigned: usize = sizes.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        sizes[k] += 1;
    }
    sizes
}

/// Stratified train/val/test split.
///
/// Strata are visited in sorted order; within a stratum the items are sorted
/// by id, shuffled with one ChaCha8 stream seeded from `seed`, and cut by
/// [`apportion`]. Strata with fewer than three items go wholly to train.
pub fn stratified_split(
    items: &[DatasetItem],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitOutcome> {
    if items.is_empty() {
        return Err(Error::Argument("cannot split an empty dataset".into()));
    }
    if ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite())
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Argument(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let mut seen = HashSet::with_capacity(items.len());
    for item in items {
        if !seen.insert(item.image_id.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate image id `{}`",
                item.image_id
            )));
        }
    }

    let mut strata: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for item in items {
        strata
            .entry(item.stratum.as_str())
            .or_default()
            .push(item.image_id.as_str());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = SplitManifest {
        seed,
        ratios,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut warnings = Vec::new();
    for (stratum, mut ids) in strata {
        ids.sort_unstable();
        if ids.len() < 3 {
            warnings.push(format!(
                "stratum `{stratum}` has {} item(s); assigned to train",
                ids.len()
            ));
            manifest.train.extend(ids.iter().map(|s| s.to_string()));
            continue;
        }
        ids.shuffle(&mut rng);
        let [n_train, n_val, _] = apportion(ids.len(), &ratios);
        let (train, rest) = ids.split_at(n_train);
        let (val, test) = rest.split_at(n_val);
        manifest.train.extend(train.iter().map(|s| s.to_string()));
        manifest.val.extend(val.iter().map(|s| s.to_string()));
        manifest.test.extend(test.iter().map(|s| s.to_string()));
    }
    Ok(SplitOutcome { manifest, warnings })
}
