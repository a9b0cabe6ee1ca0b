//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, domain, path)`, so the value used
//! for a given token, timestep and cell never depends on the order in which
//! work is scheduled.

use alloc::vec::Vec;

use crate::math;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Address of a single draw: `(level, token, timestep, draw)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RngPath {
    pub level: u32,
    pub token: u32,
    pub timestep: u32,
    pub draw: u32,
}

impl RngPath {
    pub const fn new(level: u32, token: u32, timestep: u32, draw: u32) -> Self {
        Self {
            level,
            token,
            timestep,
            draw,
        }
    }
}

/// A keyed stream of random numbers.
///
/// `domain` separates independent uses of the same seed (training steps,
/// sample indices, scene generation, ...). Use [`RngStream::derive`] to
/// obtain disjoint sub-streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    domain: u64,
}

impl RngStream {
    pub const fn new(seed: u64) -> Self {
        Self { seed, domain: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A sub-stream keyed by `tag`; distinct tags give unrelated streams.
    pub fn derive(&self, tag: u64) -> Self {
        Self {
            seed: self.seed,
            domain: mix64(self.domain ^ mix64(tag.wrapping_add(GOLDEN))),
        }
    }

    #[inline]
    fn key(&self, path: RngPath, lane: u64) -> u64 {
        let mut h = mix64(self.seed ^ GOLDEN);
        h = mix64(h ^ self.domain);
        h = mix64(h ^ (((path.level as u64) << 32) | path.token as u64));
        h = mix64(h ^ (((path.timestep as u64) << 32) | path.draw as u64));
        mix64(h ^ lane.wrapping_mul(GOLDEN))
    }

    /// Raw 64 random bits at `path`.
    pub fn bits(&self, path: RngPath) -> u64 {
        self.key(path, 0)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&self, path: RngPath) -> f64 {
        (self.key(path, 0) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (`n > 0`).
    pub fn below(&self, path: RngPath, n: u64) -> u64 {
        debug_assert!(n > 0);
        // 128-bit multiply-shift; bias is below 2^-64 relative.
        ((self.key(path, 0) as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal draw (Box-Muller on two independent lanes).
    pub fn normal(&self, path: RngPath) -> f64 {
        let u1 = ((self.key(path, 1) >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.key(path, 2) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        math::sqrt(-2.0 * math::ln(u1)) * math::cos(core::f64::consts::TAU * u2)
    }

    /// `n` standard normals at `(level, token, timestep, 0..n)`.
    pub fn normals(&self, level: u32, token: u32, timestep: u32, n: usize) -> Vec<f64> {
        (0..n)
            .map(|d| self.normal(RngPath::new(level, token, timestep, d as u32)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_path_same_value() {
        let a = RngStream::new(7).derive(3);
        let b = RngStream::new(7).derive(3);
        let p = RngPath::new(1, 2, 3, 4);
        assert_eq!(a.normal(p).to_bits(), b.normal(p).to_bits());
        assert_eq!(a.uniform(p).to_bits(), b.uniform(p).to_bits());
    }

    #[test]
    fn order_independent() {
        let s = RngStream::new(11);
        let forward: Vec<f64> = (0..50).map(|i| s.normal(RngPath::new(0, i, 0, 0))).collect();
        let backward: Vec<f64> = (0..50)
            .rev()
            .map(|i| s.normal(RngPath::new(0, i, 0, 0)))
            .collect();
        for (i, v) in forward.iter().enumerate() {
            assert_eq!(v.to_bits(), backward[49 - i].to_bits());
        }
    }

    #[test]
    fn derived_streams_differ() {
        let s = RngStream::new(1);
        let p = RngPath::default();
        assert_ne!(s.derive(0).bits(p), s.derive(1).bits(p));
        assert_ne!(s.bits(p), RngStream::new(2).bits(p));
    }

    #[test]
    fn normal_moments() {
        let s = RngStream::new(42);
        let n = 200_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        for i in 0..n {
            let x = s.normal(RngPath::new(0, 0, 0, i));
            m1 += x;
            m2 += x * x;
        }
        m1 /= n as f64;
        m2 /= n as f64;
        // 5 standard errors
        assert!(m1.abs() < 5.0 / (n as f64).sqrt(), "mean {m1}");
        assert!((m2 - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt(), "var {m2}");
    }

    #[test]
    fn uniform_range_and_below() {
        let s = RngStream::new(5);
        let mut counts = [0usize; 4];
        for i in 0..40_000 {
            let u = s.uniform(RngPath::new(0, 0, 0, i));
            assert!((0.0..1.0).contains(&u));
            counts[s.below(RngPath::new(1, 0, 0, i), 4) as usize] += 1;
        }
        for c in counts {
            assert!((c as i64 - 10_000).abs() < 500, "{counts:?}");
        }
    }
}
