use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::ToyModel;
use super::{Tensor4, TensorGrid};
use crate::coverage::{dominant_labels, write_coverage_csv, write_labels_csv};
use crate::dataset::RgbImage;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictSummary {
    pub images: usize,
    /// Output values pulled back into `[0, 1]` before writing.
    pub clamped: usize,
    pub coverage_dir: PathBuf,
    pub labels_dir: PathBuf,
}

/// Writes `coverage/<id>.csv` and `labels/<id>.csv` under `out_dir` for each
/// image. Coverage values are clamped to `[0, 1]`; labels are the dominant
/// classes of the written coverage.
pub fn predict_to_files(
    model: &ToyModel<f32>,
    images: &[(String, RgbImage)],
    out_dir: &Path,
) -> Result<PredictSummary> {
    let coverage_dir = out_dir.join("coverage");
    let labels_dir = out_dir.join("labels");
    for dir in [&coverage_dir, &labels_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut clamped = 0;
    for chunk in images.chunks(64) {
        let grids: Vec<_> = chunk
            .iter()
            .map(|(_, img)| TensorGrid::from_rgb(img))
            .collect();
        let x = Tensor4::stack(&grids)?;
        let pass = model.forward(&x, false, false, false)?;
        if let Some(layer) = pass.first_non_finite() {
            return Err(Error::Numeric {
                layer,
                detail: "prediction is not finite".into(),
            });
        }
        for ((id, _), out) in chunk.iter().zip(model.head_outputs(&pass.output)) {
            let mut grid = out.into_grid();
            clamped += grid.clamp_unit();
            write_coverage_csv(&grid, &coverage_dir.join(format!("{id}.csv")))?;
            write_labels_csv(
                &dominant_labels(&grid),
                &labels_dir.join(format!("{id}.csv")),
            )?;
        }
    }
    Ok(PredictSummary {
        images: images.len(),
        clamped,
        coverage_dir,
        labels_dir,
    })
}
