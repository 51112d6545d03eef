//! JSON annotation files:
//!
//! ```json
//! {"image_id": "frame_000015", "width": 64, "height": 64,
//!  "polygons": [{"class": "opaque", "points": [[0,0],[4,0],[4,4],[0,4]]}]}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotationSet, Polygon, SoilingClass};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct RawPolygon {
    class: SoilingClass,
    points: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    image_id: String,
    width: usize,
    height: usize,
    #[serde(default)]
    polygons: Vec<RawPolygon>,
}

pub fn parse_annotation_str(text: &str, path: &Path) -> Result<AnnotationSet> {
    let raw: RawAnnotation =
        serde_json::from_str(text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
    let ann = AnnotationSet {
        image_id: raw.image_id,
        width: raw.width,
        height: raw.height,
        polygons: raw
            .polygons
            .into_iter()
            .map(|p| Polygon::new(p.points.iter().map(|&[x, y]| (x, y)).collect(), p.class))
            .collect(),
    };
    ann.validate()?;
    Ok(ann)
}

pub fn parse_annotation_file(path: &Path) -> Result<AnnotationSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotation_str(&text, path)
}

pub fn write_annotation_file(ann: &AnnotationSet, path: &Path) -> Result<()> {
    let raw = RawAnnotation {
        image_id: ann.image_id.clone(),
        width: ann.width,
        height: ann.height,
        polygons: ann
            .polygons
            .iter()
            .map(|p| RawPolygon {
                class: p.class,
                points: p.vertices.iter().map(|&(x, y)| [x, y]).collect(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&raw).expect("annotation serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{"image_id": "frame_000015", "width": 64, "height": 64,
 "polygons": [{"class": "opaque", "points": [[0,0],[4,0],[4,4],[0,4]]}]}"#;

    #[test]
    fn parses_documented_example() {
        let ann = parse_annotation_str(FIXTURE, Path::new("fixture.json")).unwrap();
        assert_eq!(ann.image_id, "frame_000015");
        assert_eq!((ann.width, ann.height), (64, 64));
        assert_eq!(ann.polygons.len(), 1);
        assert_eq!(ann.polygons[0].class, SoilingClass::Opaque);
        assert_eq!(ann.polygons[0].vertices[2], (4.0, 4.0));
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = "{\n\"image_id\": \"a\",\n\"width\": 4,\n\"height\": oops}";
        match parse_annotation_str(text, Path::new("bad.json")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_class_is_a_parse_error() {
        let text = r#"{"image_id":"a","width":4,"height":4,"polygons":[{"class":"mud","points":[[0,0],[1,0],[1,1]]}]}"#;
        assert!(matches!(
            parse_annotation_str(text, Path::new("x.json")),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn short_polygon_is_invalid() {
        let text = r#"{"image_id":"a","width":4,"height":4,"polygons":[{"class":"opaque","points":[[0,0],[1,0]]}]}"#;
        assert!(matches!(
            parse_annotation_str(text, Path::new("x.json")),
            Err(Error::InvalidAnnotation(_))
        ));
    }

    #[test]
    fn write_then_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let ann = parse_annotation_str(FIXTURE, Path::new("fixture.json")).unwrap();
        write_annotation_file(&ann, &path).unwrap();
        assert_eq!(parse_annotation_file(&path).unwrap(), ann);
    }
}
