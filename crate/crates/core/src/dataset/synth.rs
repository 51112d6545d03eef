//! Procedural soiling scenes with exact polygon ground truth.
//!
//! A scene is a smooth random background texture with star-shaped soiling
//! blobs painted over it. Transparent blobs show a lightly blurred, hazy
//! background; semi-transparent blobs a strongly blurred background mixed
//! with mud; opaque blobs are a nearly flat dark fill.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Camera, RgbImage};
use crate::coverage::{TileCounts, TileGridSpec, DEFAULT_HTILES, DEFAULT_VTILES};
use crate::error::{Error, Result};
use crate::geometry::{point_in_polygon, AnnotationSet, Polygon, SoilingClass, NUM_CLASSES};

/// Blob count and radius range (px) for one soiling class; both inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub count: (u32, u32),
    pub radius: (f64, f64),
}

impl BlobSpec {
    pub const NONE: BlobSpec = BlobSpec {
        count: (0, 0),
        radius: (1.0, 1.0),
    };

    pub fn new(count: (u32, u32), radius: (f64, f64)) -> Self {
        Self { count, radius }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub vtiles: usize,
    pub htiles: usize,
    pub transparent: BlobSpec,
    pub semitransparent: BlobSpec,
    pub opaque: BlobSpec,
    /// Vertex count range of each blob, inclusive.
    pub vertices: (u32, u32),
    /// Placement attempts per blob before it is dropped.
    pub max_retries: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            vtiles: DEFAULT_VTILES,
            htiles: DEFAULT_HTILES,
            transparent: BlobSpec::new((0, 2), (7.0, 16.0)),
            semitransparent: BlobSpec::new((0, 2), (7.0, 16.0)),
            opaque: BlobSpec::new((0, 2), (7.0, 16.0)),
            vertices: (6, 12),
            max_retries: 32,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn blob_spec(&self, class: SoilingClass) -> BlobSpec {
        match class {
            SoilingClass::Clean => BlobSpec::NONE,
            SoilingClass::Transparent => self.transparent,
            SoilingClass::Semitransparent => self.semitransparent,
            SoilingClass::Opaque => self.opaque,
        }
    }

    pub fn tile_spec(&self) -> Result<TileGridSpec> {
        TileGridSpec::for_image(self.height, self.width, self.vtiles, self.htiles)
    }

    pub fn validate(&self) -> Result<()> {
        self.tile_spec()?;
        for class in &SoilingClass::ALL[1..] {
            let spec = self.blob_spec(*class);
            if spec.count.0 > spec.count.1 {
                return Err(Error::Argument(format!(
                    "{class} blob count range is empty"
                )));
            }
            if !(spec.radius.0 > 0.0 && spec.radius.0 <= spec.radius.1 && spec.radius.1.is_finite())
            {
                return Err(Error::Argument(format!(
                    "{class} blob radius range {:?} is invalid",
                    spec.radius
                )));
            }
        }
        if self.vertices.0 < 3 || self.vertices.0 > self.vertices.1 {
            return Err(Error::Argument(format!(
                "vertex range {:?} must start at 3 or more",
                self.vertices
            )));
        }
        if self.max_retries == 0 {
            return Err(Error::Argument("max_retries must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub image: RgbImage,
    pub annotation: AnnotationSet,
    /// Tile pixel counts tracked while painting the label buffer.
    pub counts: TileCounts,
    pub camera: Camera,
    pub warnings: Vec<String>,
}

/// RNG for scene `index`: ChaCha8 seeded with `seed`, stream `index`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct Blob {
    class: SoilingClass,
    center: (f64, f64),
    radius: f64,
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Star-shaped polygon: vertices at jittered, increasing angles with radii
/// between 55% and 100% of `radius`.
fn star_polygon(rng: &mut ChaCha8Rng, blob: &Blob, vertices: (u32, u32)) -> Polygon {
    let n = rng.random_range(vertices.0..=vertices.1) as usize;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let step = std::f64::consts::TAU / n as f64;
    let pts = (0..n)
        .map(|k| {
            let a = phase + step * (k as f64 + rng.random_range(-0.3..0.3));
            let r = blob.radius * rng.random_range(0.55..=1.0);
            (blob.center.0 + r * a.cos(), blob.center.1 + r * a.sin())
        })
        .collect();
    Polygon::new(pts, blob.class)
}

/// Per-channel background in `[0, 1]`: vertical sky/road gradient plus a
/// few random plane waves and fine noise.
fn background(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Vec<[f32; 3]> {
    let sky: [f32; 3] = [
        rng.random_range(0.55..0.8),
        rng.random_range(0.6..0.85),
        rng.random_range(0.7..0.95),
    ];
    let road: [f32; 3] = {
        let g = rng.random_range(0.3..0.5);
        [
            g,
            g * rng.random_range(0.95..1.05),
            g * rng.random_range(0.9..1.1),
        ]
    };
    let horizon = rng.random_range(0.3..0.6) as f32;
    let waves: Vec<(f32, f32, f32, f32, [f32; 3])> = (0..4)
        .map(|_| {
            let fx = rng.random_range(-0.5..0.5);
            let fy = rng.random_range(-0.5..0.5);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let amp = rng.random_range(0.04..0.12);
            let tint = [
                rng.random_range(0.6..1.0),
                rng.random_range(0.6..1.0),
                rng.random_range(0.6..1.0),
            ];
            (fx, fy, phase, amp, tint)
        })
        .collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let v = y as f32 / height as f32;
        let t = ((v - horizon) * 8.0).tanh() * 0.5 + 0.5;
        for x in 0..width {
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                px[c] = sky[c] * (1.0 - t) + road[c] * t;
            }
            for &(fx, fy, phase, amp, tint) in &waves {
                let s = amp * (fx * x as f32 + fy * y as f32 + phase).sin();
                for c in 0..3 {
                    px[c] += s * tint[c];
                }
            }
            let noise = rng.random_range(-0.16f32..0.16);
            for p in &mut px {
                *p = (*p + noise).clamp(0.0, 1.0);
            }
            out.push(px);
        }
    }
    out
}

/// Separable box blur with edge clamping.
fn box_blur(src: &[[f32; 3]], width: usize, height: usize, radius: usize) -> Vec<[f32; 3]> {
    let pass = |src: &[[f32; 3]], horizontal: bool| -> Vec<[f32; 3]> {
        let mut out = vec![[0.0f32; 3]; src.len()];
        let norm = 1.0 / (2 * radius + 1) as f32;
        for y in 0..height {
            for x in 0..width {
                let mut acc = [0.0f32; 3];
                for d in -(radius as isize)..=radius as isize {
                    let (sx, sy) = if horizontal {
                        ((x as isize + d).clamp(0, width as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + d).clamp(0, height as isize - 1) as usize)
                    };
                    let p = src[sy * width + sx];
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
                out[y * width + x] = acc.map(|v| v * norm);
            }
        }
        out
    };
    let h = pass(src, true);
    pass(&h, false)
}

/// Generates one scene. Blobs are placed so that no two centers are closer
/// than half the sum of their radii; a blob that cannot be placed within
/// `max_retries` attempts is dropped with a warning.
pub fn synth_scene(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    image_id: &str,
    camera: Camera,
) -> Result<SynthScene> {
    cfg.validate()?;
    let spec = cfg.tile_spec()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut warnings = Vec::new();

    let mut classes = Vec::new();
    for class in &SoilingClass::ALL[1..] {
        let bs = cfg.blob_spec(*class);
        let n = rng.random_range(bs.count.0..=bs.count.1);
        classes.extend(std::iter::repeat_n(*class, n as usize));
    }
    classes.shuffle(rng);

    let mut blobs: Vec<Blob> = Vec::with_capacity(classes.len());
    for class in classes {
        let bs = cfg.blob_spec(class);
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let radius = sample_range(rng, bs.radius);
            let center = (
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
            );
            let clear = blobs.iter().all(|b| {
                let (dx, dy) = (b.center.0 - center.0, b.center.1 - center.1);
                (dx * dx + dy * dy).sqrt() >= 0.5 * (b.radius + radius)
            });
            if clear {
                blobs.push(Blob {
                    class,
                    center,
                    radius,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            warnings.push(format!(
                "{image_id}: dropped a {class} blob after {} placement attempts",
                cfg.max_retries
            ));
        }
    }

    let mut annotation = AnnotationSet::new(image_id, w, h);
    let mut labels = vec![SoilingClass::Clean; w * h];
    for blob in &blobs {
        let poly = star_polygon(rng, blob, cfg.vertices);
        paint(&poly, w, h, &mut labels);
        annotation.polygons.push(poly);
    }

    let mut counts = vec![[0u32; NUM_CLASSES]; spec.num_tiles()];
    for (i, class) in labels.iter().enumerate() {
        let (x, y) = (i % w, i / w);
        counts[(y / spec.tile_h) * spec.htiles + x / spec.tile_w][class.index()] += 1;
    }

    let image = render(rng, w, h, &labels);
    Ok(SynthScene {
        image,
        annotation,
        counts: TileCounts { spec, counts },
        camera,
        warnings,
    })
}

/// Pixel-center membership over the clipped bounding box.
fn paint(poly: &Polygon, w: usize, h: usize, labels: &mut [SoilingClass]) {
    let (x0, y0, x1, y1) = poly.bbox();
    let clip = |v: f64, n: usize| v.floor().clamp(0.0, n as f64) as usize;
    let (cx0, cx1) = (clip(x0, w), (clip(x1, w) + 1).min(w));
    let (cy0, cy1) = (clip(y0, h), (clip(y1, h) + 1).min(h));
    for y in cy0..cy1 {
        for x in cx0..cx1 {
            if point_in_polygon((x as f64 + 0.5, y as f64 + 0.5), poly) {
                labels[y * w + x] = poly.class;
            }
        }
    }
}

fn render(rng: &mut ChaCha8Rng, w: usize, h: usize, labels: &[SoilingClass]) -> RgbImage {
    let bg = background(rng, w, h);
    let light = box_blur(&bg, w, h, 1);
    let heavy = box_blur(&box_blur(&bg, w, h, 3), w, h, 3);
    let haze: [f32; 3] = {
        let g = rng.random_range(0.82..0.95);
        [g, g, g * rng.random_range(0.97..1.03)]
    };
    let mud: [f32; 3] = [
        rng.random_range(0.42..0.52),
        rng.random_range(0.33..0.41),
        rng.random_range(0.22..0.3),
    ];
    let dark: [f32; 3] = {
        let g = rng.random_range(0.08..0.16);
        [g * 1.3, g * 1.05, g * 0.8]
    };

    let mut image = RgbImage::new(w, h);
    for (i, class) in labels.iter().enumerate() {
        let px: [f32; 3] = match class {
            SoilingClass::Clean => bg[i],
            SoilingClass::Transparent => std::array::from_fn(|c| 0.6 * light[i][c] + 0.4 * haze[c]),
            SoilingClass::Semitransparent => {
                std::array::from_fn(|c| 0.35 * heavy[i][c] + 0.65 * mud[c])
            }
            SoilingClass::Opaque => {
                let n = rng.random_range(-0.015f32..0.015);
                dark.map(|v| v + n)
            }
        };
        let rgb = px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        image.set_pixel(i % w, i / w, rgb);
    }
    image
}

/// Generates `count` scenes in parallel. Scene `i` is named `synth_{i:06}`,
/// uses camera `i mod 4` and its own RNG stream, so the output does not
/// depend on thread scheduling.
pub fn synth_corpus(cfg: &SynthConfig, count: usize) -> Result<Vec<SynthScene>> {
    cfg.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = scene_rng(cfg.seed, i as u64);
            synth_scene(cfg, &mut rng, &format!("synth_{i:06}"), Camera::ALL[i % 4])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::{compute_tile_counts, TileGridSpec};
    use crate::geometry::rasterize;

    #[test]
    fn no_soiling_blobs_gives_clean_ground_truth() {
        let cfg = SynthConfig {
            transparent: BlobSpec::NONE,
            semitransparent: BlobSpec::NONE,
            opaque: BlobSpec::NONE,
            ..SynthConfig::default()
        };
        let scene = synth_scene(&cfg, &mut scene_rng(1, 0), "c", Camera::Front).unwrap();
        assert!(scene.annotation.polygons.is_empty());
        let cov = scene.counts.to_coverage();
        assert!(cov.values.iter().all(|t| *t == [1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let cfg = SynthConfig::default();
        let a = synth_scene(&cfg, &mut scene_rng(42, 3), "a", Camera::Left).unwrap();
        let b = synth_scene(&cfg, &mut scene_rng(42, 3), "a", Camera::Left).unwrap();
        assert_eq!(a, b);
        let c = synth_scene(&cfg, &mut scene_rng(42, 4), "a", Camera::Left).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn tracked_counts_match_scanline_rasterization() {
        let cfg = SynthConfig::default();
        let spec = TileGridSpec::for_image(64, 64, 4, 4).unwrap();
        for scene in synth_corpus(&cfg, 50).unwrap() {
            let map = rasterize(&scene.annotation).unwrap();
            assert_eq!(compute_tile_counts(&map, &spec).unwrap(), scene.counts);
        }
    }

    #[test]
    fn crowded_scene_drops_blobs_with_warning() {
        let cfg = SynthConfig {
            width: 16,
            height: 16,
            opaque: BlobSpec::new((30, 30), (12.0, 12.0)),
            max_retries: 4,
            ..SynthConfig::default()
        };
        let scene = synth_scene(&cfg, &mut scene_rng(0, 0), "x", Camera::Front).unwrap();
        assert!(!scene.warnings.is_empty());
        assert!(scene.annotation.polygons.len() < 30 + 4);
    }

    #[test]
    fn invalid_configs() {
        let bad_tiles = SynthConfig {
            width: 30,
            ..SynthConfig::default()
        };
        assert!(matches!(bad_tiles.validate(), Err(Error::Tiling { .. })));
        let bad_range = SynthConfig {
            opaque: BlobSpec::new((3, 1), (1.0, 2.0)),
            ..SynthConfig::default()
        };
        assert!(bad_range.validate().is_err());
        let bad_vertices = SynthConfig {
            vertices: (2, 5),
            ..SynthConfig::default()
        };
        assert!(bad_vertices.validate().is_err());
    }

    #[test]
    fn soiled_pixels_look_different_from_background() {
        let cfg = SynthConfig {
            transparent: BlobSpec::NONE,
            semitransparent: BlobSpec::NONE,
            opaque: BlobSpec::new((2, 2), (12.0, 14.0)),
            ..SynthConfig::default()
        };
        let scene = synth_scene(&cfg, &mut scene_rng(5, 0), "o", Camera::Front).unwrap();
        let map = rasterize(&scene.annotation).unwrap();
        let mean = |class: SoilingClass| {
            let (mut s, mut n) = (0.0, 0.0);
            for y in 0..64 {
                for x in 0..64 {
                    if map.get(x, y) == class {
                        let p = scene.image.pixel(x, y);
                        s += p.iter().map(|&v| v as f64).sum::<f64>() / 3.0;
                        n += 1.0;
                    }
                }
            }
            s / n
        };
        assert!(mean(SoilingClass::Opaque) < 60.0);
        assert!(mean(SoilingClass::Clean) > 60.0);
    }
}
