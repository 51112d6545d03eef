//! Tile-level class coverage and dominant-class labels.
//!
//! The image is split into `vtiles x htiles` equal tiles. The coverage of a
//! class in a tile is the number of tile pixels of that class divided by the
//! number of pixels in the tile, so the four coverages of a ground-truth tile
//! always sum to one. Pixel counts are kept as integers ([`TileCounts`]) and
//! only turned into floats for export.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{ClassMap, SoilingClass, NUM_CLASSES};

/// Default tiling used throughout the toolkit.
pub const DEFAULT_VTILES: usize = 4;
pub const DEFAULT_HTILES: usize = 4;

/// Sum-to-one tolerance applied when reading ground-truth coverage files.
pub const GROUND_TRUTH_SUM_TOLERANCE: f64 = 1e-9;

pub const COVERAGE_HEADER: &str = "tile_row,tile_col,clean,transparent,semitransparent,opaque";
pub const LABEL_HEADER: &str = "tile_row,tile_col,label";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileGridSpec {
    pub vtiles: usize,
    pub htiles: usize,
    pub tile_h: usize,
    pub tile_w: usize,
}

impl TileGridSpec {
    /// Tiling of a `height x width` image; both must divide exactly.
    pub fn for_image(height: usize, width: usize, vtiles: usize, htiles: usize) -> Result<Self> {
        if vtiles == 0
            || htiles == 0
            || !height.is_multiple_of(vtiles)
            || !width.is_multiple_of(htiles)
        {
            return Err(Error::Tiling {
                height,
                width,
                vtiles,
                htiles,
            });
        }
        Ok(Self {
            vtiles,
            htiles,
            tile_h: height / vtiles,
            tile_w: width / htiles,
        })
    }

    pub fn height(&self) -> usize {
        self.vtiles * self.tile_h
    }

    pub fn width(&self) -> usize {
        self.htiles * self.tile_w
    }

    pub fn num_tiles(&self) -> usize {
        self.vtiles * self.htiles
    }

    pub fn tile_pixels(&self) -> usize {
        self.tile_h * self.tile_w
    }
}

/// Exact per-tile pixel counts per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileCounts {
    pub spec: TileGridSpec,
    pub counts: Vec<[u32; NUM_CLASSES]>,
}

impl TileCounts {
    pub fn tile(&self, row: usize, col: usize) -> [u32; NUM_CLASSES] {
        self.counts[row * self.spec.htiles + col]
    }

    /// Every tile accounts for all of its pixels.
    pub fn is_exact(&self) -> bool {
        let denom = self.spec.tile_pixels() as u64;
        self.counts
            .iter()
            .all(|c| c.iter().map(|&v| v as u64).sum::<u64>() == denom)
    }

    pub fn to_coverage(&self) -> CoverageGrid {
        let denom = self.spec.tile_pixels() as f64;
        CoverageGrid {
            vtiles: self.spec.vtiles,
            htiles: self.spec.htiles,
            values: self
                .counts
                .iter()
                .map(|c| c.map(|v| v as f64 / denom))
                .collect(),
        }
    }
}

/// Per-tile class coverage, row-major over tiles. Ground truth and
/// predictions share this shape.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageGrid {
    pub vtiles: usize,
    pub htiles: usize,
    pub values: Vec<[f64; NUM_CLASSES]>,
}

impl CoverageGrid {
    pub fn filled(vtiles: usize, htiles: usize, tile: [f64; NUM_CLASSES]) -> Self {
        Self {
            vtiles,
            htiles,
            values: vec![tile; vtiles * htiles],
        }
    }

    pub fn num_tiles(&self) -> usize {
        self.values.len()
    }

    pub fn tile(&self, row: usize, col: usize) -> [f64; NUM_CLASSES] {
        self.values[row * self.htiles + col]
    }

    pub fn same_shape(&self, other: &CoverageGrid) -> bool {
        self.vtiles == other.vtiles && self.htiles == other.htiles
    }

    pub fn max_sum_deviation(&self) -> f64 {
        self.values
            .iter()
            .map(|t| (t.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Clamps every value into `[0, 1]`, returning how many were changed.
    pub fn clamp_unit(&mut self) -> usize {
        let mut clamped = 0;
        for v in self.values.iter_mut().flatten() {
            let c = v.clamp(0.0, 1.0);
            if c != *v || v.is_nan() {
                clamped += 1;
                *v = if v.is_nan() { 0.0 } else { c };
            }
        }
        clamped
    }

    /// Mirrors the grid left to right.
    pub fn flipped_horizontally(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for row in 0..self.vtiles {
            for col in (0..self.htiles).rev() {
                values.push(self.tile(row, col));
            }
        }
        Self {
            vtiles: self.vtiles,
            htiles: self.htiles,
            values,
        }
    }
}

/// Dominant class per tile.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileLabelGrid {
    pub vtiles: usize,
    pub htiles: usize,
    pub labels: Vec<SoilingClass>,
}

impl TileLabelGrid {
    pub fn tile(&self, row: usize, col: usize) -> SoilingClass {
        self.labels[row * self.htiles + col]
    }
}

pub fn compute_tile_counts(map: &ClassMap, spec: &TileGridSpec) -> Result<TileCounts> {
    if map.height() != spec.height() || map.width() != spec.width() {
        return Err(Error::Tiling {
            height: map.height(),
            width: map.width(),
            vtiles: spec.vtiles,
            htiles: spec.htiles,
        });
    }
    let mut counts = vec![[0u32; NUM_CLASSES]; spec.num_tiles()];
    for row in 0..map.height() {
        let tile_row = row / spec.tile_h;
        for (col, class) in map.row(row).iter().enumerate() {
            counts[tile_row * spec.htiles + col / spec.tile_w][class.index()] += 1;
        }
    }
    Ok(TileCounts {
        spec: *spec,
        counts,
    })
}

/// Fraction of each class's pixels in every tile.
pub fn compute_coverage(map: &ClassMap, spec: &TileGridSpec) -> Result<CoverageGrid> {
    Ok(compute_tile_counts(map, spec)?.to_coverage())
}

/// Argmax over the four coverages; ties go to the more severe class.
pub fn dominant_class(tile: &[f64; NUM_CLASSES]) -> SoilingClass {
    let mut best = NUM_CLASSES - 1;
    for c in (0..NUM_CLASSES - 1).rev() {
        if tile[c] > tile[best] {
            best = c;
        }
    }
    SoilingClass::ALL[best]
}

pub fn dominant_labels(grid: &CoverageGrid) -> TileLabelGrid {
    TileLabelGrid {
        vtiles: grid.vtiles,
        htiles: grid.htiles,
        labels: grid.values.iter().map(dominant_class).collect(),
    }
}

/// Coverage-weighted dominant class over the whole image.
pub fn image_level_class(grid: &CoverageGrid) -> SoilingClass {
    let mut total = [0.0; NUM_CLASSES];
    for tile in &grid.values {
        for (t, v) in total.iter_mut().zip(tile) {
            *t += v;
        }
    }
    dominant_class(&total)
}

/// Shortest decimal with at least six fractional digits that parses back to
/// exactly `v`.
pub fn format_fraction(v: f64) -> String {
    let fixed = format!("{v:.6}");
    if fixed.parse::<f64>() == Ok(v) {
        fixed
    } else {
        format!("{v}")
    }
}

pub fn coverage_to_csv(grid: &CoverageGrid) -> String {
    let mut out = String::with_capacity(64 * (grid.num_tiles() + 1));
    out.push_str(COVERAGE_HEADER);
    out.push('\n');
    for row in 0..grid.vtiles {
        for col in 0..grid.htiles {
            let t = grid.tile(row, col);
            let _ = writeln!(
                out,
                "{row},{col},{},{},{},{}",
                format_fraction(t[0]),
                format_fraction(t[1]),
                format_fraction(t[2]),
                format_fraction(t[3])
            );
        }
    }
    out
}

pub fn write_coverage_csv(grid: &CoverageGrid, path: &Path) -> Result<()> {
    std::fs::write(path, coverage_to_csv(grid)).map_err(|e| Error::io(path, e))
}

/// Reads a coverage CSV without checking the sum-to-one property; use this
/// for predictions.
pub fn read_coverage_csv(path: &Path) -> Result<CoverageGrid> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coverage_csv(&text, path)
}

/// Reads a ground-truth coverage CSV: values must lie in `[0, 1]` and each
/// row must sum to one within [`GROUND_TRUTH_SUM_TOLERANCE`].
pub fn read_ground_truth_csv(path: &Path) -> Result<CoverageGrid> {
    let grid = read_coverage_csv(path)?;
    validate_ground_truth(&grid, path)?;
    Ok(grid)
}

pub fn validate_ground_truth(grid: &CoverageGrid, path: &Path) -> Result<()> {
    validate_ground_truth_within(grid, path, GROUND_TRUTH_SUM_TOLERANCE)
}

/// As [`validate_ground_truth`] with an explicit row-sum tolerance.
pub fn validate_ground_truth_within(
    grid: &CoverageGrid,
    path: &Path,
    sum_tolerance: f64,
) -> Result<()> {
    for (i, tile) in grid.values.iter().enumerate() {
        let (row, col) = (i / grid.htiles, i % grid.htiles);
        if tile.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "{}: tile ({row},{col}) has a coverage outside [0,1]",
                path.display()
            )));
        }
        let sum: f64 = tile.iter().sum();
        if !((sum - 1.0).abs() <= sum_tolerance) {
            return Err(Error::Validation(format!(
                "{}: tile ({row},{col}) coverages sum to {sum}, expected 1",
                path.display()
            )));
        }
    }
    Ok(())
}

/// Rows of a tile CSV after the header, with their 1-based line numbers.
fn tile_rows<'a>(text: &'a str, header: &str, path: &Path) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        Some((i, h)) => {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected header `{header}`, found `{}`", h.trim()),
            ))
        }
        None => return Err(Error::parse(path, 1, "empty file")),
    }
    Ok(lines
        .map(|(i, l)| (i + 1, l.split(',').map(str::trim).collect()))
        .collect())
}

/// Checks that rows enumerate a full grid in row-major order and returns
/// its shape.
fn grid_shape(indices: &[(usize, usize, usize)], path: &Path) -> Result<(usize, usize)> {
    let Some(&(_, _, _)) = indices.first() else {
        return Err(Error::parse(path, 2, "no tile rows"));
    };
    let htiles = indices.iter().take_while(|(_, r, _)| *r == 0).count();
    if htiles == 0 || !indices.len().is_multiple_of(htiles) {
        return Err(Error::parse(
            path,
            indices[0].0,
            "tile rows do not form a full grid",
        ));
    }
    for (k, &(line, r, c)) in indices.iter().enumerate() {
        if (r, c) != (k / htiles, k % htiles) {
            return Err(Error::parse(
                path,
                line,
                format!(
                    "expected tile ({},{}), found ({r},{c}); rows must be row-major",
                    k / htiles,
                    k % htiles
                ),
            ));
        }
    }
    Ok((indices.len() / htiles, htiles))
}

fn parse_index(field: &str, line: usize, path: &Path) -> Result<usize> {
    field
        .parse()
        .map_err(|_| Error::parse(path, line, format!("bad tile index `{field}`")))
}

pub fn parse_coverage_csv(text: &str, path: &Path) -> Result<CoverageGrid> {
    let rows = tile_rows(text, COVERAGE_HEADER, path)?;
    let mut indices = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len());
    for (line, fields) in rows {
        if fields.len() != 2 + NUM_CLASSES {
            return Err(Error::parse(
                path,
                line,
                format!(
                    "expected {} fields, found {}",
                    2 + NUM_CLASSES,
                    fields.len()
                ),
            ));
        }
        let r = parse_index(fields[0], line, path)?;
        let c = parse_index(fields[1], line, path)?;
        let mut tile = [0.0; NUM_CLASSES];
        for (slot, field) in tile.iter_mut().zip(&fields[2..]) {
            *slot = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, line, format!("bad coverage value `{field}`")))?;
        }
        indices.push((line, r, c));
        values.push(tile);
    }
    let (vtiles, htiles) = grid_shape(&indices, path)?;
    Ok(CoverageGrid {
        vtiles,
        htiles,
        values,
    })
}

pub fn labels_to_csv(grid: &TileLabelGrid) -> String {
    let mut out = String::from(LABEL_HEADER);
    out.push('\n');
    for row in 0..grid.vtiles {
        for col in 0..grid.htiles {
            let _ = writeln!(out, "{row},{col},{}", grid.tile(row, col).id());
        }
    }
    out
}

pub fn write_labels_csv(grid: &TileLabelGrid, path: &Path) -> Result<()> {
    std::fs::write(path, labels_to_csv(grid)).map_err(|e| Error::io(path, e))
}

/// Labels may be written as class ids (`0..=3`) or class names.
pub fn read_labels_csv(path: &Path) -> Result<TileLabelGrid> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels_csv(&text, path)
}

pub fn parse_labels_csv(text: &str, path: &Path) -> Result<TileLabelGrid> {
    let rows = tile_rows(text, LABEL_HEADER, path)?;
    let mut indices = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (line, fields) in rows {
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                line,
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        let r = parse_index(fields[0], line, path)?;
        let c = parse_index(fields[1], line, path)?;
        let label = fields[2]
            .parse::<SoilingClass>()
            .map_err(|_| Error::parse(path, line, format!("bad label `{}`", fields[2])))?;
        indices.push((line, r, c));
        labels.push(label);
    }
    let (vtiles, htiles) = grid_shape(&indices, path)?;
    Ok(TileLabelGrid {
        vtiles,
        htiles,
        labels,
    })
}
