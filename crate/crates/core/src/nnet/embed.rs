//! Sinusoidal timestep embedding.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math;

/// Interleaved `[sin(t f_0), cos(t f_0), sin(t f_1), ...]` with frequencies
/// spaced geometrically from 1 down to 1/10000.
pub fn time_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; dim];
    time_embed_into(t, &mut out)?;
    Ok(out)
}

pub fn time_embed_into(t: usize, out: &mut [f64]) -> Result<()> {
    let dim = out.len();
    if dim == 0 || dim % 2 != 0 {
        bail!(Config, "time embedding dimension must be even and positive, got {dim}");
    }
    let half = dim / 2;
    for k in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            math::powf(1e-4, k as f64 / (half - 1) as f64)
        };
        let arg = t as f64 * freq;
        out[2 * k] = math::sin(arg);
        out[2 * k + 1] = math::cos(arg);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time() {
        let e = time_embed(0, 8).unwrap();
        for k in 0..4 {
            assert_eq!(e[2 * k], 0.0);
            assert_eq!(e[2 * k + 1], 1.0);
        }
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(matches!(time_embed(3, 7), Err(crate::Error::Config(_))));
    }

    #[test]
    fn bounded_and_distinct() {
        let all: Vec<Vec<f64>> = (0..=100).map(|t| time_embed(t, 16).unwrap()).collect();
        for e in &all {
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for a in 0..all.len() {
            for b in a + 1..all.len() {
                let d: f64 = all[a].iter().zip(&all[b]).map(|(x, y)| (x - y).abs()).sum();
                assert!(d > 1e-6, "embeddings of {a} and {b} coincide");
            }
        }
    }
}
