//! Mapping between metric depth and the normalized log-depth latent space.
//!
//! `z = 2 (ln d - ln d_min) / (ln d_max - ln d_min) - 1`, with depths clamped
//! to `[d_min, d_max]` first, so every latent lies in `[-1, 1]`.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::grid::{DepthMap, LatentGrid};
use crate::math;
use crate::plan::ScaleConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDepth {
    d_min: f64,
    d_max: f64,
    ln_min: f64,
    ln_span: f64,
}

impl LogDepth {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        if !(d_min.is_finite() && d_min > 0.0) {
            bail!(Config, "d_min must be positive, got {d_min}");
        }
        if !(d_max.is_finite() && d_max > d_min) {
            bail!(Config, "d_max must exceed d_min ({d_max} <= {d_min})");
        }
        let ln_min = math::ln(d_min);
        Ok(Self {
            d_min,
            d_max,
            ln_min,
            ln_span: math::ln(d_max) - ln_min,
        })
    }

    pub fn from_config(cfg: &ScaleConfig) -> Self {
        Self::new(cfg.d_min(), cfg.d_max()).expect("validated scale config")
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    #[inline]
    pub fn clamp_depth(&self, d: f64) -> f64 {
        d.clamp(self.d_min, self.d_max)
    }

    #[inline]
    pub fn to_latent(&self, d: f64) -> f64 {
        2.0 * (math::ln(self.clamp_depth(d)) - self.ln_min) / self.ln_span - 1.0
    }

    /// Natural-log depth represented by latent `z` (no clamping).
    #[inline]
    pub fn ln_depth(&self, z: f64) -> f64 {
        self.ln_min + (z + 1.0) * 0.5 * self.ln_span
    }

    /// Depth for latent `z`; `z` is clamped to `[-1, 1]` so the result lies
    /// in `[d_min, d_max]`.
    #[inline]
    pub fn to_depth(&self, z: f64) -> f64 {
        self.clamp_depth(math::exp(self.ln_depth(z.clamp(-1.0, 1.0))))
    }

    /// Invalid pixels map to the latent midpoint (0).
    pub fn normalize(&self, d: &DepthMap) -> LatentGrid {
        let vals = d
            .values()
            .iter()
            .zip(d.valid_mask())
            .map(|(&v, &ok)| if ok { self.to_latent(v) } else { 0.0 })
            .collect();
        LatentGrid::new(d.width(), d.height(), vals).expect("finite latents")
    }

    pub fn denormalize(&self, z: &LatentGrid) -> DepthMap {
        let vals: Vec<f64> = z.values().iter().map(|&v| self.to_depth(v)).collect();
        DepthMap::new(z.width(), z.height(), vals).expect("depths within range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngPath, RngStream};

    #[test]
    fn endpoints_and_midpoint() {
        let n = LogDepth::new(0.1, 10.0).unwrap();
        assert!((n.to_latent(0.1) + 1.0).abs() < 1e-15);
        assert!((n.to_latent(10.0) - 1.0).abs() < 1e-15);
        assert!(n.to_latent((0.1f64 * 10.0).sqrt()).abs() < 1e-15);
        assert_eq!(n.to_latent(50.0), n.to_latent(10.0));
    }

    #[test]
    fn rejects_bad_range() {
        assert!(matches!(LogDepth::new(0.0, 1.0), Err(crate::Error::Config(_))));
        assert!(matches!(LogDepth::new(-1.0, 1.0), Err(crate::Error::Config(_))));
        assert!(LogDepth::new(1.0, 1.0).is_err());
    }

    #[test]
    fn round_trip_random_map() {
        let n = LogDepth::new(0.1, 10.0).unwrap();
        let s = RngStream::new(3);
        let vals: Vec<f64> = (0..4096)
            .map(|i| 0.05 + 12.0 * s.uniform(RngPath::new(0, 0, 0, i)))
            .collect();
        let d = DepthMap::new(64, 64, vals).unwrap();
        let back = n.denormalize(&n.normalize(&d));
        for (a, b) in d.values().iter().zip(back.values()) {
            assert!((n.clamp_depth(*a) - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}
