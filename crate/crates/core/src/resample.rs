//! Block-mean downsampling and cell-centered bilinear upsampling.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::grid::LatentGrid;

/// Each output cell is the mean of its `(w/tw) x (h/th)` source block.
pub fn downsample_mean(grid: &LatentGrid, target: (usize, usize)) -> Result<LatentGrid> {
    let (w, h) = grid.dims();
    let (tw, th) = target;
    if tw == 0 || th == 0 || tw > w || th > h || w % tw != 0 || h % th != 0 {
        bail!(Resample, "cannot block-average {w}x{h} down to {tw}x{th}");
    }
    let (bx, by) = (w / tw, h / th);
    let norm = 1.0 / (bx * by) as f64;
    let src = grid.values();
    let mut out = Vec::with_capacity(tw * th);
    for ty in 0..th {
        for tx in 0..tw {
            let mut acc = 0.0;
            for y in ty * by..(ty + 1) * by {
                let row = &src[y * w + tx * bx..y * w + (tx + 1) * bx];
                acc += row.iter().sum::<f64>();
            }
            out.push(acc * norm);
        }
    }
    LatentGrid::new(tw, th, out)
}

/// Source coordinate of target cell `i` under the half-pixel convention,
/// clamped to the valid sample range. Returns `(lo, hi, frac)`.
#[inline]
fn sample_axis(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let s = (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
    let s = s.clamp(0.0, (src - 1) as f64);
    let lo = s as usize; // floor, s >= 0
    let hi = (lo + 1).min(src - 1);
    (lo, hi, s - lo as f64)
}

/// Bilinear interpolation with cell-center alignment and edge clamping.
///
/// Output values stay within `[min, max]` of the input.
pub fn upsample_bilinear(grid: &LatentGrid, target: (usize, usize)) -> Result<LatentGrid> {
    let (w, h) = grid.dims();
    let (tw, th) = target;
    if tw < w || th < h {
        bail!(Resample, "upsample target {tw}x{th} is smaller than source {w}x{h}");
    }
    if (tw, th) == (w, h) {
        return Ok(grid.clone());
    }
    let xs: Vec<_> = (0..tw).map(|x| sample_axis(x, w, tw)).collect();
    let src = grid.values();
    let mut out = Vec::with_capacity(tw * th);
    for y in 0..th {
        let (y0, y1, fy) = sample_axis(y, h, th);
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    LatentGrid::new(tw, th, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn constant_survives_both_ways() {
        let g = LatentGrid::filled(8, 8, 0.3);
        let d = downsample_mean(&g, (2, 2)).unwrap();
        assert!(d.values().iter().all(|&v| v == 0.3));
        let u = upsample_bilinear(&d, (16, 16)).unwrap();
        assert!(u.values().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn two_by_two_mean() {
        let g = LatentGrid::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = downsample_mean(&g, (1, 1)).unwrap();
        assert_eq!(d.values(), &[2.5]);
    }

    #[test]
    fn identity_resolution() {
        let g = LatentGrid::new(4, 4, (0..16).map(|i| i as f64).collect()).unwrap();
        assert_eq!(downsample_mean(&g, (4, 4)).unwrap(), g);
        assert_eq!(upsample_bilinear(&g, (4, 4)).unwrap(), g);
    }

    #[test]
    fn one_by_two_to_one_by_four() {
        // Hand interpolation under the half-pixel convention:
        // source coords -0.25, 0.25, 0.75, 1.25 clamp to 0, .25, .75, 1.
        let g = LatentGrid::new(2, 1, vec![0.0, 1.0]).unwrap();
        let u = upsample_bilinear(&g, (4, 1)).unwrap();
        assert_eq!(u.values(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn errors() {
        let g = LatentGrid::zeros(4, 4);
        assert!(matches!(downsample_mean(&g, (3, 3)), Err(crate::Error::Resample(_))));
        assert!(matches!(upsample_bilinear(&g, (2, 2)), Err(crate::Error::Resample(_))));
    }

    fn grid_strategy() -> impl Strategy<Value = (usize, Vec<f64>)> {
        prop::sample::select(vec![1usize, 2, 4, 8, 16]).prop_flat_map(|n| {
            (Just(n), prop::collection::vec(-5.0f64..5.0, n * n))
        })
    }

    proptest! {
        #[test]
        fn downsample_preserves_mean((n, vals) in grid_strategy(), k in 0usize..5) {
            let g = LatentGrid::new(n, n, vals).unwrap();
            let t = (n >> k).max(1);
            let d = downsample_mean(&g, (t, t)).unwrap();
            let scale = g.values().iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64 + 1e-300;
            prop_assert!((d.mean() - g.mean()).abs() <= 1e-10 * scale.max(1.0));
        }

        #[test]
        fn upsample_stays_in_range((n, vals) in grid_strategy(), f in 1usize..4) {
            let g = LatentGrid::new(n, n, vals).unwrap();
            let lo = g.values().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = g.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let u = upsample_bilinear(&g, (n * f + 1, n * f)).unwrap();
            for &v in u.values() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
