use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() + 20);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height).unwrap();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes, path)
    }

    pub fn from_ppm(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut header = Vec::with_capacity(4);
        while header.len() < 4 {
            // whitespace and comments
            while pos < bytes.len() {
                if bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                } else if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::parse(path, 1, "truncated PPM header"));
            }
            header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if header[0] != "P6" {
            return Err(Error::parse(
                path,
                1,
                format!("expected P6, found {}", header[0]),
            ));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(path, 1, format!("bad PPM header field `{s}`")))
        };
        let (width, height, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
        if maxval != 255 {
            return Err(Error::parse(
                path,
                1,
                format!("unsupported maxval {maxval}"),
            ));
        }
        // single whitespace byte before the raster
        pos += 1;
        let len = width * height * 3;
        if bytes.len() < pos + len {
            return Err(Error::parse(path, 1, "truncated PPM raster"));
        }
        Ok(Self {
            width,
            height,
            data: bytes[pos..pos + len].to_vec(),
        })
    }

    pub fn flipped_horizontally(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut img = RgbImage::new(3, 2);
        img.set_pixel(2, 1, [10, 20, 30]);
        img.set_pixel(0, 0, [255, 0, 7]);
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(RgbImage::from_ppm(&bytes, Path::new("m.ppm")).unwrap(), img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6 # made by hand\n1 1\n# max\n255\n".to_vec();
        bytes.extend([1, 2, 3]);
        let img = RgbImage::from_ppm(&bytes, Path::new("c.ppm")).unwrap();
        assert_eq!(img.pixel(0, 0), [1, 2, 3]);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(RgbImage::from_ppm(b"P3\n1 1\n255\n0 0 0", Path::new("a")).is_err());
        assert!(RgbImage::from_ppm(b"P6\n2 2\n255\n\x00", Path::new("a")).is_err());
        assert!(RgbImage::from_ppm(b"P6\n2", Path::new("a")).is_err());
    }

    #[test]
    fn flip() {
        let mut img = RgbImage::new(2, 1);
        img.set_pixel(0, 0, [1, 1, 1]);
        let f = img.flipped_horizontally();
        assert_eq!(f.pixel(1, 0), [1, 1, 1]);
        assert_eq!(f.pixel(0, 0), [0, 0, 0]);
    }
}
