//! Row-major 2-D containers: latent grids, depth maps, and RGB images.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Continuous latent values at one scale level, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl LatentGrid {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            bail!(Shape, "latent grid must be at least 1x1, got {width}x{height}");
        }
        if values.len() != width * height {
            bail!(
                Shape,
                "latent grid {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            );
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            bail!(Numerics, "latent value at index {i} is not finite");
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0);
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Metric depth (meters) with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// All pixels valid; every value must be finite and positive.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let valid = vec![true; values.len()];
        Self::with_mask(width, height, values, valid)
    }

    pub fn with_mask(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            bail!(Shape, "depth map must be at least 1x1, got {width}x{height}");
        }
        if values.len() != width * height || valid.len() != values.len() {
            bail!(
                Shape,
                "depth map {width}x{height}: {} values, {} mask entries",
                values.len(),
                valid.len()
            );
        }
        for (i, (&v, &ok)) in values.iter().zip(&valid).enumerate() {
            if ok && !(v.is_finite() && v > 0.0) {
                bail!(Input, "valid depth at index {i} must be finite and > 0, got {v}");
            }
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Three-channel image with intensities in `[0, 1]`, pixel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRGB {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl ImageRGB {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            bail!(Shape, "image must be at least 1x1, got {width}x{height}");
        }
        if pixels.len() != width * height {
            bail!(Shape, "image {width}x{height} needs {} pixels, got {}", width * height, pixels.len());
        }
        for (i, p) in pixels.iter().enumerate() {
            if p.iter().any(|c| !(0.0..=1.0).contains(c)) {
                bail!(Input, "pixel {i} has intensity outside [0,1]: {p:?}");
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }
}
