//! Polygon soiling annotations and their conversion to per-pixel class maps.
//!
//! Coordinates are real-valued pixels with the origin at the top-left image
//! corner and y pointing down. Pixel `(col, row)` is sampled at its center
//! `(col + 0.5, row + 0.5)`.

mod annotation;
mod pip;
mod raster;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use annotation::{parse_annotation_file, parse_annotation_str, write_annotation_file};
pub use pip::{point_in_polygon, polygon_area, rasterize_oracle};
pub use raster::{rasterize, ClassMap};

/// Number of soiling classes.
pub const NUM_CLASSES: usize = 4;

/// Soiling class of a pixel, polygon or tile. The discriminant is the class id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum SoilingClass {
    Clean = 0,
    Transparent = 1,
    #[serde(alias = "semi-transparent", alias = "semi_transparent")]
    Semitransparent = 2,
    Opaque = 3,
}

impl SoilingClass {
    pub const ALL: [SoilingClass; NUM_CLASSES] = [
        SoilingClass::Clean,
        SoilingClass::Transparent,
        SoilingClass::Semitransparent,
        SoilingClass::Opaque,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SoilingClass::Clean => "clean",
            SoilingClass::Transparent => "transparent",
            SoilingClass::Semitransparent => "semitransparent",
            SoilingClass::Opaque => "opaque",
        }
    }

    /// Title-cased label used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            SoilingClass::Clean => "Clean",
            SoilingClass::Transparent => "Transparent",
            SoilingClass::Semitransparent => "Semitransparent",
            SoilingClass::Opaque => "Opaque",
        }
    }
}

impl fmt::Display for SoilingClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SoilingClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clean" | "0" => Ok(SoilingClass::Clean),
            "transparent" | "1" => Ok(SoilingClass::Transparent),
            "semitransparent" | "semi-transparent" | "semi_transparent" | "2" => {
                Ok(SoilingClass::Semitransparent)
            }
            "opaque" | "3" => Ok(SoilingClass::Opaque),
            other => Err(Error::Validation(format!(
                "unknown soiling class `{other}`"
            ))),
        }
    }
}

/// A class-tagged polygon; the interior follows the even-odd rule.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pub vertices: Vec<(f64, f64)>,
    pub class: SoilingClass,
}

impl Polygon {
    pub fn new(vertices: Vec<(f64, f64)>, class: SoilingClass) -> Self {
        Self { vertices, class }
    }

    /// Axis-aligned rectangle with corners `(x0, y0)` and `(x1, y1)`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64, class: SoilingClass) -> Self {
        Self::new(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)], class)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.len() < 3 {
            return Err(Error::InvalidAnnotation(format!(
                "{} polygon has {} vertices, at least 3 required",
                self.class,
                self.vertices.len()
            )));
        }
        if let Some((i, _)) = self
            .vertices
            .iter()
            .enumerate()
            .find(|(_, (x, y))| !x.is_finite() || !y.is_finite())
        {
            return Err(Error::InvalidAnnotation(format!(
                "{} polygon has a non-finite coordinate at vertex {i}",
                self.class
            )));
        }
        Ok(())
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            vertices: self
                .vertices
                .iter()
                .map(|&(x, y)| (x + dx, y + dy))
                .collect(),
            class: self.class,
        }
    }

    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold(
            (
                f64::INFINITY,
                f64::INFINITY,
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
            ),
            |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        )
    }
}

/// Annotation of one image. Later polygons paint over earlier ones.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub polygons: Vec<Polygon>,
}

impl AnnotationSet {
    pub fn new(image_id: impl Into<String>, width: usize, height: usize) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            polygons: Vec::new(),
        }
    }

    pub fn with_polygon(mut self, polygon: Polygon) -> Self {
        self.polygons.push(polygon);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidAnnotation(format!(
                "image `{}` has empty size {}x{}",
                self.image_id, self.width, self.height
            )));
        }
        for (i, poly) in self.polygons.iter().enumerate() {
            poly.validate().map_err(|e| match e {
                Error::InvalidAnnotation(msg) => Error::InvalidAnnotation(format!(
                    "image `{}`, polygon {i}: {msg}",
                    self.image_id
                )),
                other => other,
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_ids_round_trip() {
        for c in SoilingClass::ALL {
            assert_eq!(SoilingClass::from_id(c.id()), Some(c));
            assert_eq!(c.name().parse::<SoilingClass>().unwrap(), c);
        }
        assert_eq!(SoilingClass::from_id(4), None);
        assert_eq!(
            "semi-transparent".parse::<SoilingClass>().unwrap(),
            SoilingClass::Semitransparent
        );
        assert!("mud".parse::<SoilingClass>().is_err());
    }

    #[test]
    fn validation_rejects_degenerate_polygons() {
        let two = Polygon::new(vec![(0.0, 0.0), (1.0, 1.0)], SoilingClass::Opaque);
        assert!(matches!(two.validate(), Err(Error::InvalidAnnotation(_))));

        let nan = Polygon::new(
            vec![(0.0, 0.0), (f64::NAN, 1.0), (1.0, 0.0)],
            SoilingClass::Opaque,
        );
        assert!(matches!(nan.validate(), Err(Error::InvalidAnnotation(_))));

        let ann = AnnotationSet::new("x", 0, 8);
        assert!(ann.validate().is_err());
    }
}
