use super::Real;
use crate::dataset::RgbImage;
use crate::error::{Error, Result};

/// Single image tensor, channels-first.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorGrid<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> TensorGrid<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    /// RGB scaled to `[0, 1]`.
    pub fn from_rgb(img: &RgbImage) -> Self {
        let (h, w) = (img.height, img.width);
        let mut t = Self::zeros(3, h, w);
        let scale = T::of(1.0 / 255.0);
        for y in 0..h {
            for x in 0..w {
                let p = img.pixel(x, y);
                for c in 0..3 {
                    t.data[(c * h + y) * w + x] = T::of(p[c] as f64) * scale;
                }
            }
        }
        t
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Batch tensor in NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.n, other.c, other.h, other.w)
    }

    pub fn stack(images: &[TensorGrid<T>]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Argument("empty batch".into()))?;
        let mut out = Self::zeros(images.len(), first.channels, first.height, first.width);
        let plane = first.data.len();
        for (i, img) in images.iter().enumerate() {
            if (img.channels, img.height, img.width) != (first.channels, first.height, first.width)
            {
                return Err(Error::Dimension(format!(
                    "batch image {i} is {}x{}x{}, expected {}x{}x{}",
                    img.channels, img.height, img.width, first.channels, first.height, first.width
                )));
            }
            out.data[i * plane..(i + 1) * plane].copy_from_slice(&img.data);
        }
        Ok(out)
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let start = (n * self.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane_len();
        let start = (n * self.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn sample(&self, n: usize) -> TensorGrid<T> {
        let len = self.sample_len();
        TensorGrid {
            channels: self.c,
            height: self.h,
            width: self.w,
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Rows `indices` of a larger batch, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let len = self.sample_len();
        let mut out = Self::zeros(indices.len(), self.c, self.h, self.w);
        for (k, &i) in indices.iter().enumerate() {
            out.data[k * len..(k + 1) * len].copy_from_slice(&self.data[i * len..(i + 1) * len]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}
