//! Coverage RMSE and tile-classification metrics.
//!
//! For one image with `N` tiles and `C = 4` classes the coverage RMSE is
//!
//! ```text
//! RMSE = sqrt( sum_i (1/N) sum_j (t_ij - p_ij)^2 )
//! ```
//!
//! which equals `sqrt((1/N) * sum_i sum_j (t_ij - p_ij)^2)`. The per-class
//! RMSE restricts the inner sum to one class, so the squared per-class
//! values add up to the squared overall value over the same tiles.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::coverage::{dominant_labels, CoverageGrid, TileLabelGrid};
use crate::error::{Error, Result};
use crate::geometry::{SoilingClass, NUM_CLASSES};

fn check_shapes(truth: &CoverageGrid, pred: &CoverageGrid) -> Result<()> {
    if !truth.same_shape(pred) || truth.values.len() != pred.values.len() {
        return Err(Error::Dimension(format!(
            "truth grid is {}x{} tiles, prediction is {}x{}",
            truth.vtiles, truth.htiles, pred.vtiles, pred.htiles
        )));
    }
    if truth.values.is_empty() {
        return Err(Error::Dimension("grid has no tiles".into()));
    }
    Ok(())
}

/// Per-class sums of squared differences over all tiles.
fn squared_error_sums(truth: &CoverageGrid, pred: &CoverageGrid) -> [f64; NUM_CLASSES] {
    let mut sums = [0.0; NUM_CLASSES];
    for (t, p) in truth.values.iter().zip(&pred.values) {
        for c in 0..NUM_CLASSES {
            let d = t[c] - p[c];
            sums[c] += d * d;
        }
    }
    sums
}

/// Coverage RMSE of one image.
pub fn rmse_eq1(truth: &CoverageGrid, pred: &CoverageGrid) -> Result<f64> {
    check_shapes(truth, pred)?;
    let n = truth.num_tiles() as f64;
    let total: f64 = squared_error_sums(truth, pred).iter().sum();
    Ok((total / n).sqrt())
}

/// Per-class coverage RMSE of one image.
pub fn rmse_per_class(truth: &CoverageGrid, pred: &CoverageGrid) -> Result<[f64; NUM_CLASSES]> {
    check_shapes(truth, pred)?;
    let n = truth.num_tiles() as f64;
    Ok(squared_error_sums(truth, pred).map(|s| (s / n).sqrt()))
}

/// How the overall RMSE of several images is aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean of the per-image values.
    #[default]
    PerImageMean,
    /// One RMSE over all tiles of all images.
    PooledTiles,
}

/// Streaming accumulator for coverage RMSE over many images.
///
/// Per-class values are always pooled over every evaluated tile; the overall
/// value follows the chosen [`Pooling`].
#[derive(Clone, Debug, Default)]
pub struct RmseAccumulator {
    class_sums: [f64; NUM_CLASSES],
    tiles: usize,
    image_rmse_sum: f64,
    images: usize,
}

impl RmseAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, truth: &CoverageGrid, pred: &CoverageGrid) -> Result<()> {
        let image = rmse_eq1(truth, pred)?;
        let sums = squared_error_sums(truth, pred);
        for (acc, s) in self.class_sums.iter_mut().zip(sums) {
            *acc += s;
        }
        self.tiles += truth.num_tiles();
        self.image_rmse_sum += image;
        self.images += 1;
        Ok(())
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn per_class(&self) -> [f64; NUM_CLASSES] {
        if self.tiles == 0 {
            return [0.0; NUM_CLASSES];
        }
        self.class_sums.map(|s| (s / self.tiles as f64).sqrt())
    }

    pub fn overall(&self, pooling: Pooling) -> f64 {
        if self.images == 0 {
            return 0.0;
        }
        match pooling {
            Pooling::PerImageMean => self.image_rmse_sum / self.images as f64,
            Pooling::PooledTiles => {
                (self.class_sums.iter().sum::<f64>() / self.tiles as f64).sqrt()
            }
        }
    }
}

/// Tile confusion counts; rows are true classes, columns predicted classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn record(&mut self, truth: SoilingClass, pred: SoilingClass) {
        self.counts[truth.index()][pred.index()] += 1;
    }

    pub fn add_grids(&mut self, truth: &TileLabelGrid, pred: &TileLabelGrid) -> Result<()> {
        if truth.vtiles != pred.vtiles || truth.htiles != pred.htiles {
            return Err(Error::Dimension(format!(
                "truth labels are {}x{} tiles, prediction is {}x{}",
                truth.vtiles, truth.htiles, pred.vtiles, pred.htiles
            )));
        }
        for (&t, &p) in truth.labels.iter().zip(&pred.labels) {
            self.record(t, p);
        }
        Ok(())
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Confusion matrix over pairs of label grids.
pub fn confusion<'a>(
    pairs: impl IntoIterator<Item = (&'a TileLabelGrid, &'a TileLabelGrid)>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::default();
    for (t, p) in pairs {
        cm.add_grids(t, p)?;
    }
    Ok(cm)
}

/// Confusion counts from raw class ids, rejecting ids outside `0..4`.
pub fn confusion_from_ids(truth: &[u8], pred: &[u8]) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Dimension(format!(
            "{} true labels vs {} predicted labels",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(pred) {
        let (Some(t), Some(p)) = (SoilingClass::from_id(t), SoilingClass::from_id(p)) else {
            return Err(Error::Validation(format!(
                "label pair ({t},{p}) out of range 0..4"
            )));
        };
        cm.record(t, p);
    }
    Ok(cm)
}

/// Divides each row by its support; rows without support stay zero.
pub fn normalize_rows(cm: &ConfusionMatrix) -> [[f64; NUM_CLASSES]; NUM_CLASSES] {
    let mut out = [[0.0; NUM_CLASSES]; NUM_CLASSES];
    for (row, counts) in out.iter_mut().zip(&cm.counts) {
        let support: u64 = counts.iter().sum();
        if support > 0 {
            for (o, &c) in row.iter_mut().zip(counts) {
                *o = c as f64 / support as f64;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedPrecision {
    pub value: f64,
    /// Set when the matrix holds no samples; `value` is then 0.
    pub empty: bool,
}

/// Support-weighted one-vs-rest precision.
pub fn weighted_precision(cm: &ConfusionMatrix) -> WeightedPrecision {
    let total = cm.total();
    if total == 0 {
        return WeightedPrecision {
            value: 0.0,
            empty: true,
        };
    }
    let weighted: f64 = (0..NUM_CLASSES)
        .map(|c| {
            let col = cm.predicted(c);
            let precision = if col == 0 {
                0.0
            } else {
                cm.counts[c][c] as f64 / col as f64
            };
            cm.support(c) as f64 * precision
        })
        .sum();
    WeightedPrecision {
        value: weighted / total as f64,
        empty: false,
    }
}

/// Per-class recall, i.e. the diagonal of the row-normalized matrix.
pub fn per_class_accuracy(cm: &ConfusionMatrix) -> [f64; NUM_CLASSES] {
    let mut out = [0.0; NUM_CLASSES];
    for (c, o) in out.iter_mut().enumerate() {
        let support = cm.support(c);
        if support > 0 {
            *o = cm.counts[c][c] as f64 / support as f64;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub tiles: u64,
    pub pooling: Pooling,
    pub rmse_overall: f64,
    pub rmse_per_class: [f64; NUM_CLASSES],
    pub weighted_precision: f64,
    pub per_class_accuracy: [f64; NUM_CLASSES],
    pub confusion_raw: ConfusionMatrix,
    pub confusion_normalized: [[f64; NUM_CLASSES]; NUM_CLASSES],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Evaluates predicted coverage grids against ground truth. Tile labels for
/// the classification metrics are the dominant classes of each grid.
pub fn evaluate<'a>(
    pairs: impl IntoIterator<Item = (&'a CoverageGrid, &'a CoverageGrid)>,
    pooling: Pooling,
) -> Result<MetricsReport> {
    let mut rmse = RmseAccumulator::new();
    let mut cm = ConfusionMatrix::default();
    for (truth, pred) in pairs {
        rmse.add(truth, pred)?;
        cm.add_grids(&dominant_labels(truth), &dominant_labels(pred))?;
    }
    let wp = weighted_precision(&cm);
    let mut warnings = Vec::new();
    if wp.empty {
        warnings.push("no tiles evaluated; weighted precision reported as 0".to_string());
    }
    Ok(MetricsReport {
        images: rmse.images(),
        tiles: cm.total(),
        pooling,
        rmse_overall: rmse.overall(pooling),
        rmse_per_class: rmse.per_class(),
        weighted_precision: wp.value,
        per_class_accuracy: per_class_accuracy(&cm),
        confusion_raw: cm,
        confusion_normalized: normalize_rows(&cm),
        warnings,
    })
}

impl MetricsReport {
    /// Plain-text tables: per-class RMSE, then normalized and raw confusion.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Per class RMSE of tile level soiling detection ({} images, {} tiles)",
            self.images, self.tiles
        );
        let _ = writeln!(out, "{:<18}{:>10}", "Soiling Classes", "RMSE");
        for class in SoilingClass::ALL {
            let _ = writeln!(
                out,
                "{:<18}{:>10.4}",
                class.title(),
                self.rmse_per_class[class.index()]
            );
        }
        let _ = writeln!(out, "{:<18}{:>10.4}", "Overall", self.rmse_overall);
        let _ = writeln!(out);
        let _ = writeln!(out, "Tile-level soiling classification");
        let _ = write!(out, "{:<18}", "--");
        for _ in 0..2 {
            for class in SoilingClass::ALL {
                let _ = write!(out, "{:>16}", class.title());
            }
            let _ = write!(out, "  ");
        }
        let _ = writeln!(out);
        for class in SoilingClass::ALL {
            let c = class.index();
            let _ = write!(out, "{:<18}", class.title());
            for v in self.confusion_normalized[c] {
                let _ = write!(out, "{v:>16.2}");
            }
            let _ = write!(out, "  ");
            for v in self.confusion_raw.counts[c] {
                let _ = write!(out, "{v:>16}");
            }
            let _ = writeln!(out);
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "Weighted precision: {:.4}", self.weighted_precision);
        let _ = write!(out, "Per-class accuracy:");
        for class in SoilingClass::ALL {
            let _ = write!(
                out,
                " {}={:.4}",
                class.name(),
                self.per_class_accuracy[class.index()]
            );
        }
        let _ = writeln!(out);
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(values: Vec<[f64; 4]>, v: usize, h: usize) -> CoverageGrid {
        CoverageGrid {
            vtiles: v,
            htiles: h,
            values,
        }
    }

    fn random_grid(rng: &mut ChaCha8Rng, v: usize, h: usize) -> CoverageGrid {
        grid(
            (0..v * h)
                .map(|_| std::array::from_fn(|_| rng.random::<f64>()))
                .collect(),
            v,
            h,
        )
    }

    #[test]
    fn identical_grids_score_zero() {
        let g = CoverageGrid::filled(4, 4, [0.25, 0.25, 0.25, 0.25]);
        assert_eq!(rmse_eq1(&g, &g).unwrap(), 0.0);
        assert_eq!(rmse_per_class(&g, &g).unwrap(), [0.0; 4]);
    }

    #[test]
    fn clean_vs_opaque_is_sqrt_two() {
        for (v, h) in [(1, 1), (4, 4), (3, 5)] {
            let t = CoverageGrid::filled(v, h, [1.0, 0.0, 0.0, 0.0]);
            let p = CoverageGrid::filled(v, h, [0.0, 0.0, 0.0, 1.0]);
            assert!((rmse_eq1(&t, &p).unwrap() - 2f64.sqrt()).abs() < 1e-12);
            assert_eq!(rmse_per_class(&t, &p).unwrap(), [1.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn single_tile_half_error() {
        let t = CoverageGrid::filled(1, 1, [1.0, 0.0, 0.0, 0.0]);
        let p = CoverageGrid::filled(1, 1, [0.5, 0.5, 0.0, 0.0]);
        assert!((rmse_eq1(&t, &p).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let a = CoverageGrid::filled(4, 4, [1.0, 0.0, 0.0, 0.0]);
        let b = CoverageGrid::filled(2, 2, [1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(rmse_eq1(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(rmse_per_class(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn per_class_matches_scalar_loop_over_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<_> = (0..10)
            .map(|_| (random_grid(&mut rng, 4, 4), random_grid(&mut rng, 4, 4)))
            .collect();
        let mut acc = RmseAccumulator::new();
        for (t, p) in &pairs {
            acc.add(t, p).unwrap();
        }
        let got = acc.per_class();
        for c in 0..4 {
            let mut sum = 0.0;
            let mut n = 0usize;
            for (t, p) in &pairs {
                for i in 0..t.values.len() {
                    sum += (t.values[i][c] - p.values[i][c]).powi(2);
                    n += 1;
                }
            }
            let expect = (sum / n as f64).sqrt();
            assert!((got[c] - expect).abs() < 1e-12);
        }
        let mean: f64 = pairs
            .iter()
            .map(|(t, p)| rmse_eq1(t, p).unwrap())
            .sum::<f64>()
            / 10.0;
        assert!((acc.overall(Pooling::PerImageMean) - mean).abs() < 1e-12);
        let pooled_sq: f64 = got.iter().map(|v| v * v).sum();
        assert!((acc.overall(Pooling::PooledTiles).powi(2) - pooled_sq).abs() < 1e-12);
    }

    #[test]
    fn normalized_rows() {
        let cm = ConfusionMatrix::from_counts([
            [113627, 5022, 2305, 3853],
            [169, 6543, 2704, 1895],
            [0, 0, 0, 0],
            [0, 0, 0, 4],
        ]);
        let n = normalize_rows(&cm);
        let expect = [[0.91, 0.04, 0.02, 0.03], [0.01, 0.58, 0.24, 0.17]];
        for r in 0..2 {
            for c in 0..4 {
                assert!(
                    (n[r][c] - expect[r][c]).abs() <= 0.005,
                    "({r},{c}) {}",
                    n[r][c]
                );
            }
            assert!((n[r].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(n[2], [0.0; 4]);
        assert_eq!(n[3], [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn identity_predictions() {
        let labels: Vec<u8> = (0..40).map(|i| (i % 4) as u8).collect();
        let cm = confusion_from_ids(&labels, &labels).unwrap();
        for c in 0..4 {
            assert_eq!(cm.counts[c][c], cm.support(c));
        }
        let n = normalize_rows(&cm);
        for (r, row) in n.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert_eq!(*v, if r == c { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(weighted_precision(&cm).value, 1.0);
        assert_eq!(per_class_accuracy(&cm), [1.0; 4]);
    }

    #[test]
    fn all_predicted_opaque() {
        let truth: Vec<u8> = (0..40).map(|i| (i % 4) as u8).collect();
        let pred = vec![3u8; 40];
        let cm = confusion_from_ids(&truth, &pred).unwrap();
        let wp = weighted_precision(&cm);
        assert!((wp.value - 0.0625).abs() < 1e-15);
        assert!(!wp.empty);
        assert_eq!(per_class_accuracy(&cm), [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn empty_matrix_is_flagged() {
        let wp = weighted_precision(&ConfusionMatrix::default());
        assert_eq!(wp.value, 0.0);
        assert!(wp.empty);
        let report = evaluate(std::iter::empty(), Pooling::PerImageMean).unwrap();
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        assert!(matches!(
            confusion_from_ids(&[0, 4], &[0, 0]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn normalization_is_idempotent() {
        let cm =
            ConfusionMatrix::from_counts([[3, 1, 0, 0], [0, 2, 2, 0], [1, 1, 1, 1], [0, 0, 0, 0]]);
        let once = normalize_rows(&cm);
        for (r, row) in once.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if cm.support(r) > 0 {
                let again: Vec<f64> = row.iter().map(|v| v / sum).collect();
                for (a, b) in again.iter().zip(row) {
                    assert!((a - b).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn evaluate_identity_gives_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grids: Vec<_> = (0..5).map(|_| random_grid(&mut rng, 4, 4)).collect();
        let report = evaluate(grids.iter().map(|g| (g, g)), Pooling::PerImageMean).unwrap();
        assert_eq!(report.rmse_overall, 0.0);
        assert_eq!(report.tiles, 80);
        let off_diag: u64 = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .filter(|(r, c)| r != c)
            .map(|(r, c)| report.confusion_raw.counts[r][c])
            .sum();
        assert_eq!(off_diag, 0);
        let text = report.to_text();
        assert!(text.contains("Semitransparent"));
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
