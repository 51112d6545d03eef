use std::io::Write;
use std::path::Path;

use super::{AnnotationSet, Polygon, SoilingClass};
use crate::error::{Error, Result};

/// Per-pixel soiling classes, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    width: usize,
    height: usize,
    labels: Vec<SoilingClass>,
}

impl ClassMap {
    pub fn clean(width: usize, height: usize) -> Self {
        Self::from_labels(width, height, vec![SoilingClass::Clean; width * height])
    }

    pub(crate) fn from_labels(width: usize, height: usize, labels: Vec<SoilingClass>) -> Self {
        assert_eq!(labels.len(), width * height);
        Self {
            width,
            height,
            labels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[SoilingClass] {
        &self.labels
    }

    pub fn get(&self, col: usize, row: usize) -> SoilingClass {
        self.labels[row * self.width + col]
    }

    pub fn row(&self, row: usize) -> &[SoilingClass] {
        &self.labels[row * self.width..(row + 1) * self.width]
    }

    pub fn count(&self, class: SoilingClass) -> usize {
        self.labels.iter().filter(|&&c| c == class).count()
    }

    /// Encodes the map as PGM with the class id as gray level (maxval 3).
    pub fn to_pgm(&self, binary: bool) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.labels.len() * 2 + 32);
        if binary {
            write!(out, "P5\n{} {}\n3\n", self.width, self.height).unwrap();
            out.extend(self.labels.iter().map(|c| c.id()));
        } else {
            write!(out, "P2\n{} {}\n3\n", self.width, self.height).unwrap();
            for row in 0..self.height {
                let line: Vec<String> = self.row(row).iter().map(|c| c.id().to_string()).collect();
                writeln!(out, "{}", line.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn write_pgm(&self, path: &Path, binary: bool) -> Result<()> {
        std::fs::write(path, self.to_pgm(binary)).map_err(|e| Error::io(path, e))
    }
}

/// Scanline rasterization of an annotation into a class map.
///
/// Background is clean; polygons are painted in list order so the last one
/// wins on overlap. A pixel is inside a polygon iff its center is interior
/// under the even-odd rule, with the same half-open edge convention as
/// [`super::point_in_polygon`].
pub fn rasterize(ann: &AnnotationSet) -> Result<ClassMap> {
    ann.validate()?;
    let mut labels = vec![SoilingClass::Clean; ann.width * ann.height];
    let mut crossings = Vec::new();
    for poly in &ann.polygons {
        fill_polygon(poly, ann.width, ann.height, &mut labels, &mut crossings);
    }
    Ok(ClassMap::from_labels(ann.width, ann.height, labels))
}

fn fill_polygon(
    poly: &Polygon,
    width: usize,
    height: usize,
    labels: &mut [SoilingClass],
    crossings: &mut Vec<f64>,
) {
    let (_, ymin, _, ymax) = poly.bbox();
    let first_row = first_index_at_or_above(ymin, height);
    let end_row = first_index_at_or_above(ymax, height);
    let verts = &poly.vertices;
    let n = verts.len();

    for row in first_row..end_row {
        let y = row as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let (ax, ay) = verts[i];
            let (bx, by) = verts[(i + 1) % n];
            if (ay <= y) != (by <= y) {
                crossings.push(ax + (y - ay) * (bx - ax) / (by - ay));
            }
        }
        // The half-open span test toggles an even number of times around a closed ring.
        debug_assert!(crossings.len().is_multiple_of(2));
        crossings.sort_by(f64::total_cmp);

        let line = &mut labels[row * width..(row + 1) * width];
        for span in crossings.chunks_exact(2) {
            // Inside iff an odd number of crossings lie at or left of the center.
            let start = first_index_at_or_above(span[0], width);
            let end = first_index_at_or_above(span[1], width);
            if start < end {
                line[start..end].fill(poly.class);
            }
        }
    }
}

/// Smallest `i` in `0..=limit` with `i + 0.5 >= v`, or `limit` if none.
fn first_index_at_or_above(v: f64, limit: usize) -> usize {
    let guess = (v - 0.5).ceil();
    let mut i = if guess <= 0.0 {
        0
    } else if guess >= limit as f64 {
        limit
    } else {
        guess as usize
    };
    while i > 0 && (i - 1) as f64 + 0.5 >= v {
        i -= 1;
    }
    while i < limit && (i as f64 + 0.5) < v {
        i += 1;
    }
    i
}
