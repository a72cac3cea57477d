//! 8-bit RGB images, crops, bilinear resampling and conversion to tensors.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Interleaved 8-bit RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

/// Axis-aligned pixel rectangle `(x, y, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxRegion {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoxRegion {
    pub const MIN_SIDE: usize = 8;

    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    /// Errors unless the box lies inside a `width x height` image and both
    /// sides are at least [`Self::MIN_SIDE`].
    pub fn check_inside(&self, width: usize, height: usize) -> Result<()> {
        if self.w < Self::MIN_SIDE || self.h < Self::MIN_SIDE {
            return Err(Error::Data(format!(
                "box {}x{} is smaller than {} px",
                self.w,
                self.h,
                Self::MIN_SIDE
            )));
        }
        if self.x + self.w > width || self.y + self.h > height {
            return Err(Error::Data(format!(
                "box ({}, {}, {}, {}) is outside the {width}x{height} image",
                self.x, self.y, self.w, self.h
            )));
        }
        Ok(())
    }

    /// Whether the half-open pixel rectangles intersect.
    pub fn intersects(&self, other: &BoxRegion) -> bool {
        self.x < other.x + other.w && other.x < self.x + self.w && self.y < other.y + other.h && other.y < self.y + self.h
    }

    /// Grows the box by `margin` pixels on every side (saturating at zero).
    pub fn expand(&self, margin: usize) -> BoxRegion {
        let x = self.x.saturating_sub(margin);
        let y = self.y.saturating_sub(margin);
        BoxRegion {
            x,
            y,
            w: self.x + self.w + margin - x,
            h: self.y + self.h + margin - y,
        }
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Data(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    /// Quantizes planar `[0, 1]` values (`3 x h x w`): `round(255 v)` after clamping.
    pub fn from_planar(width: usize, height: usize, planes: &[f64]) -> Result<Self> {
        let plane = width * height;
        if planes.len() != 3 * plane {
            return Err(Error::Data(format!("planar buffer has {} values, need {}", planes.len(), 3 * plane)));
        }
        let mut data = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                data.push(quantize(planes[c * plane + i]));
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, region: &BoxRegion) -> Result<RgbImage> {
        region.check_inside(self.width, self.height)?;
        let mut data = Vec::with_capacity(region.w * region.h * 3);
        for y in region.y..region.y + region.h {
            let start = (y * self.width + region.x) * 3;
            data.extend_from_slice(&self.data[start..start + region.w * 3]);
        }
        Ok(RgbImage {
            width: region.w,
            height: region.h,
            data,
        })
    }

    pub fn hflip(&self) -> RgbImage {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(x, y));
            }
        }
        RgbImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Luma `0.299 R + 0.587 G + 0.114 B` per pixel, in `[0, 255]`.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Bilinear resample to `side x side` as a `3 x side x side` tensor in `[0, 1]`.
    ///
    /// Pixel centres are aligned (`src = (dst + 0.5) * scale - 0.5`, clamped at
    /// the borders), so an exact 2x reduction averages each 2x2 block and an
    /// equal size is the identity.
    pub fn to_tensor<F: Scalar>(&self, side: usize) -> Result<Tensor<F>> {
        if self.width == 0 || self.height == 0 || side == 0 {
            return Err(Error::Data(format!(
                "cannot resample a {}x{} image to {side}x{side}",
                self.width, self.height
            )));
        }
        let xs = axis_taps(self.width, side);
        let ys = axis_taps(self.height, side);
        let mut out = alloc::vec![F::zero(); 3 * side * side];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                for c in 0..3 {
                    let at = |x: usize, y: usize| self.data[(y * self.width + x) * 3 + c] as f64;
                    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                    let v = (top * (1.0 - fy) + bottom * fy) / 255.0;
                    out[(c * side + oy) * side + ox] = F::of(v);
                }
            }
        }
        Tensor::new(alloc::vec![3, side, side], out)
    }
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(s) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub(crate) fn quantize(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
}
