//! Scale hierarchy configuration and the per-level token plan.

use alloc::vec::Vec;

use crate::error::{bail, Result};

/// One level of the hierarchy: a square latent grid cut into square patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec {
    pub resolution: usize,
    pub patch: usize,
}

impl LevelSpec {
    pub const fn new(resolution: usize, patch: usize) -> Self {
        Self { resolution, patch }
    }
}

/// Ordered coarse-to-fine levels plus the metric depth range.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleConfig {
    levels: Vec<LevelSpec>,
    d_min: f64,
    d_max: f64,
}

pub const DEFAULT_D_MIN: f64 = 0.1;
pub const DEFAULT_D_MAX: f64 = 10.0;

impl ScaleConfig {
    pub fn new(levels: Vec<LevelSpec>, d_min: f64, d_max: f64) -> Result<Self> {
        let cfg = Self { levels, d_min, d_max };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Desk-scale hierarchy 1 -> 4 -> 16 -> 64, finest patch 8.
    pub fn desk() -> Self {
        Self {
            levels: [(1, 1), (4, 1), (16, 1), (64, 8)]
                .into_iter()
                .map(|(r, p)| LevelSpec::new(r, p))
                .collect(),
            d_min: DEFAULT_D_MIN,
            d_max: DEFAULT_D_MAX,
        }
    }

    /// Four-level 1 -> 4 -> 16 -> 256 hierarchy with 16x16 finest patches,
    /// where every coarser level is tokenized per cell.
    pub fn full() -> Self {
        Self {
            levels: [(1, 1), (4, 1), (16, 1), (256, 16)]
                .into_iter()
                .map(|(r, p)| LevelSpec::new(r, p))
                .collect(),
            d_min: DEFAULT_D_MIN,
            d_max: DEFAULT_D_MAX,
        }
    }

    /// Same hierarchy, but the 16x16 level is grouped into 4x4 patches so it
    /// carries 16 tokens (the tabulated sequence length).
    pub fn full_table() -> Self {
        Self {
            levels: [(1, 1), (4, 1), (16, 4), (256, 16)]
                .into_iter()
                .map(|(r, p)| LevelSpec::new(r, p))
                .collect(),
            d_min: DEFAULT_D_MIN,
            d_max: DEFAULT_D_MAX,
        }
    }

    /// Look up a named hierarchy: `desk`, `full`, or `full-table`.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "full-table" | "full_table" => Ok(Self::full_table()),
            other => bail!(Config, "unknown scale config {other:?} (expected desk, full, full-table)"),
        }
    }

    pub fn with_depth_range(mut self, d_min: f64, d_max: f64) -> Result<Self> {
        self.d_min = d_min;
        self.d_max = d_max;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.levels.len();
        if !(2..=8).contains(&n) {
            bail!(Config, "hierarchy needs 2..=8 levels, got {n}");
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.resolution == 0 || l.patch == 0 {
                bail!(Config, "level {i}: resolution and patch must be positive");
            }
            if l.resolution % l.patch != 0 {
                bail!(Config, "level {i}: resolution {} not divisible by patch {}", l.resolution, l.patch);
            }
        }
        for (i, w) in self.levels.windows(2).enumerate() {
            if w[1].resolution <= w[0].resolution {
                bail!(
                    Config,
                    "resolutions must strictly increase: level {} has {} after {}",
                    i + 1,
                    w[1].resolution,
                    w[0].resolution
                );
            }
        }
        if !(self.d_min.is_finite() && self.d_min > 0.0) {
            bail!(Config, "d_min must be positive, got {}", self.d_min);
        }
        if !(self.d_max.is_finite() && self.d_max > self.d_min) {
            bail!(Config, "d_max must exceed d_min ({} <= {})", self.d_max, self.d_min);
        }
        Ok(())
    }

    pub fn levels(&self) -> &[LevelSpec] {
        &self.levels
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    /// Side length of the finest (output) grid.
    pub fn output_resolution(&self) -> usize {
        self.levels.last().map(|l| l.resolution).unwrap_or(0)
    }
}

/// Token layout of one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelPlan {
    pub resolution: usize,
    pub patch: usize,
    pub token_count: usize,
    pub token_dim: usize,
}

impl LevelPlan {
    /// Tokens per row of the patch grid.
    pub fn tokens_per_side(&self) -> usize {
        self.resolution / self.patch
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulePlan {
    levels: Vec<LevelPlan>,
}

impl SchedulePlan {
    pub fn levels(&self) -> &[LevelPlan] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, i: usize) -> Result<&LevelPlan> {
        match self.levels.get(i) {
            Some(l) => Ok(l),
            None => bail!(Config, "level {i} out of range (plan has {})", self.levels.len()),
        }
    }

    pub fn finest(&self) -> &LevelPlan {
        self.levels.last().expect("plan has at least two levels")
    }

    pub fn total_tokens(&self) -> usize {
        self.levels.iter().map(|l| l.token_count).sum()
    }
}

/// Token count `(res/patch)^2` and token dimension `patch^2` per level.
pub fn build_schedule_plan(cfg: &ScaleConfig) -> Result<SchedulePlan> {
    cfg.validate()?;
    let levels = cfg
        .levels()
        .iter()
        .map(|l| {
            let side = l.resolution / l.patch;
            LevelPlan {
                resolution: l.resolution,
                patch: l.patch,
                token_count: side * side,
                token_dim: l.patch * l.patch,
            }
        })
        .collect();
    Ok(SchedulePlan { levels })
}
