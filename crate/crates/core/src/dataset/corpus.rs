//! On-disk corpus layout:
//!
//! ```text
//! <dir>/corpus.json            index: image size, tiling, image ids and cameras
//! <dir>/images/<id>.ppm        binary PPM
//! <dir>/annotations/<id>.json  polygon annotation
//! <dir>/coverage/<id>.csv      ground-truth tile coverage
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Camera, DatasetItem, RgbImage, SynthScene};
use crate::coverage::{read_ground_truth_csv, write_coverage_csv, CoverageGrid};
use crate::error::{Error, Result};
use crate::geometry::write_annotation_file;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub image_id: String,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub width: usize,
    pub height: usize,
    pub vtiles: usize,
    pub htiles: usize,
    pub items: Vec<CorpusEntry>,
}

impl CorpusIndex {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("corpus.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.line(), e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSample {
    pub image_id: String,
    pub camera: Camera,
    pub image: RgbImage,
    pub coverage: CoverageGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub index: CorpusIndex,
    pub samples: Vec<CorpusSample>,
}

impl Corpus {
    /// Split items, stratified by camera and image-level dominant class.
    pub fn items(&self) -> Vec<DatasetItem> {
        self.samples
            .iter()
            .map(|s| DatasetItem::from_coverage(s.image_id.clone(), s.camera, &s.coverage))
            .collect()
    }

    /// Samples whose ids appear in `ids`, in the order of `ids`.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&CorpusSample>> {
        let by_id: std::collections::HashMap<&str, &CorpusSample> = self
            .samples
            .iter()
            .map(|s| (s.image_id.as_str(), s))
            .collect();
        ids.iter()
            .map(|id| {
                by_id.get(id.as_str()).copied().ok_or_else(|| {
                    Error::Validation(format!("image id `{id}` is not in the corpus"))
                })
            })
            .collect()
    }
}

fn create_dir(path: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

pub fn write_corpus(dir: &Path, scenes: &[SynthScene]) -> Result<CorpusIndex> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::Argument("no scenes to write".into()))?;
    let spec = first.counts.spec;
    let images = create_dir(&dir.join("images"))?;
    let annotations = create_dir(&dir.join("annotations"))?;
    let coverage = create_dir(&dir.join("coverage"))?;
    let mut items = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let id = &scene.annotation.image_id;
        scene.image.write_ppm(&images.join(format!("{id}.ppm")))?;
        write_annotation_file(&scene.annotation, &annotations.join(format!("{id}.json")))?;
        write_coverage_csv(
            &scene.counts.to_coverage(),
            &coverage.join(format!("{id}.csv")),
        )?;
        items.push(CorpusEntry {
            image_id: id.clone(),
            camera: scene.camera,
        });
    }
    let index = CorpusIndex {
        width: spec.width(),
        height: spec.height(),
        vtiles: spec.vtiles,
        htiles: spec.htiles,
        items,
    };
    let path = dir.join("corpus.json");
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let index = CorpusIndex::read(dir)?;
    let mut samples = Vec::with_capacity(index.items.len());
    for item in &index.items {
        let img_path = dir.join("images").join(format!("{}.ppm", item.image_id));
        let image = RgbImage::read_ppm(&img_path)?;
        if image.width != index.width || image.height != index.height {
            return Err(Error::Validation(format!(
                "{}: image is {}x{}, corpus declares {}x{}",
                img_path.display(),
                image.width,
                image.height,
                index.width,
                index.height
            )));
        }
        let cov_path = dir.join("coverage").join(format!("{}.csv", item.image_id));
        let coverage = read_ground_truth_csv(&cov_path)?;
        if coverage.vtiles != index.vtiles || coverage.htiles != index.htiles {
            return Err(Error::Validation(format!(
                "{}: coverage is {}x{} tiles, corpus declares {}x{}",
                cov_path.display(),
                coverage.vtiles,
                coverage.htiles,
                index.vtiles,
                index.htiles
            )));
        }
        samples.push(CorpusSample {
            image_id: item.image_id.clone(),
            camera: item.camera,
            image,
            coverage,
        });
    }
    Ok(Corpus { index, samples })
}
