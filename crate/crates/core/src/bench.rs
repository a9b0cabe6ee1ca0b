//! Procedural RGB/depth scenes, depth metrics, and sequence cost accounting.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::grid::{DepthMap, ImageRGB};
use crate::math;
use crate::plan::SchedulePlan;
use crate::rng::{RngPath, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub resolution: usize,
    /// Inclusive range of foreground object counts.
    pub objects: (usize, usize),
    /// Meters; objects and background stay inside.
    pub depth_range: (f64, f64),
    /// Standard deviation of additive RGB noise.
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { seed: 0, resolution: 64, objects: (1, 4), depth_range: (0.5, 8.0), noise: 0.02 }
    }
}

impl SceneSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Checks the spec, and that its depth range lies in `[d_min, d_max]`.
    pub fn validate(&self, d_min: f64, d_max: f64) -> Result<()> {
        let (lo, hi) = self.depth_range;
        if self.resolution == 0 || self.objects.0 > self.objects.1 {
            bail!(Config, "scene needs a positive resolution and an ordered object range");
        }
        if !(lo > 0.0 && lo < hi && lo >= d_min && hi <= d_max) {
            bail!(Config, "scene depth range [{lo}, {hi}] must be increasing and inside [{d_min}, {d_max}]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            bail!(Config, "noise level must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub center: (f64, f64),
    pub half_size: (f64, f64),
    pub depth: f64,
    pub hue: [f64; 3],
}

impl SceneObject {
    /// Whether the center of pixel `(x, y)` lies inside the object.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.center.0) / self.half_size.0;
        let dy = (y as f64 + 0.5 - self.center.1) / self.half_size.1;
        match self.shape {
            Shape::Rectangle => math::abs(dx) <= 1.0 && math::abs(dy) <= 1.0,
            Shape::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }
}

/// Geometry behind a generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    /// Background depth at weight 0 and weight 1 of the gradient.
    pub background: (f64, f64),
    /// Gradient direction mix: weight = (u x + (1 - u) y) / (res - 1).
    pub direction: f64,
    pub background_hue: [f64; 3],
    pub objects: Vec<SceneObject>,
}

impl SceneLayout {
    pub fn background_depth(&self, x: usize, y: usize, res: usize) -> f64 {
        let span = (res.max(2) - 1) as f64;
        let t = (self.direction * x as f64 + (1.0 - self.direction) * y as f64) / span;
        self.background.0 + (self.background.1 - self.background.0) * t
    }
}

fn hue(rng: &RngStream, k: u32) -> [f64; 3] {
    let c = |j| 0.25 + 0.75 * rng.uniform(RngPath::new(2, k, 0, j));
    [c(0), c(1), c(2)]
}

/// Random layout for `spec`. Objects are always nearer than the background.
pub fn scene_layout(spec: &SceneSpec) -> SceneLayout {
    let rng = RngStream::new(spec.seed).derive(0x5ce);
    let u = |k: u32, j: u32| rng.uniform(RngPath::new(1, k, 0, j));
    let (lo, hi) = spec.depth_range;
    let res = spec.resolution as f64;
    // background in the far half of the range (log-uniform)
    let mid = math::sqrt(lo * hi);
    let far = |v: f64| math::exp(math::ln(mid) + v * (math::ln(hi) - math::ln(mid)));
    let background = (far(u(0, 0)), far(u(0, 1)));
    let bg_min = background.0.min(background.1);
    let count = spec.objects.0 + (u(0, 2) * (spec.objects.1 - spec.objects.0 + 1) as f64) as usize;
    let count = count.min(spec.objects.1);
    let objects = (0..count as u32)
        .map(|k| SceneObject {
            shape: if u(k + 1, 0) < 0.5 { Shape::Rectangle } else { Shape::Ellipse },
            center: (res * u(k + 1, 1), res * u(k + 1, 2)),
            half_size: (res * (0.1 + 0.15 * u(k + 1, 3)), res * (0.1 + 0.15 * u(k + 1, 4))),
            depth: math::exp(math::ln(lo) + u(k + 1, 5) * 0.95 * (math::ln(bg_min) - math::ln(lo))),
            hue: hue(&rng, k + 1),
        })
        .collect();
    SceneLayout { background, direction: u(0, 3), background_hue: hue(&rng, 0), objects }
}

/// Render a scene: depth is the nearest surface at each pixel, color is the
/// surface hue scaled by `near / depth` plus Gaussian noise, clamped.
pub fn gen_scene(spec: &SceneSpec) -> Result<(ImageRGB, DepthMap)> {
    if spec.resolution == 0 {
        bail!(Config, "scene resolution must be positive");
    }
    let layout = scene_layout(spec);
    let noise = RngStream::new(spec.seed).derive(0x401);
    let res = spec.resolution;
    let near = spec.depth_range.0;
    let mut depth = Vec::with_capacity(res * res);
    let mut px = Vec::with_capacity(res * res);
    for y in 0..res {
        for x in 0..res {
            let mut d = layout.background_depth(x, y, res);
            let mut h = layout.background_hue;
            for o in &layout.objects {
                if o.covers(x, y) && o.depth < d {
                    d = o.depth;
                    h = o.hue;
                }
            }
            let b = near / d;
            let i = (y * res + x) as u32;
            let c = |j: usize| (h[j] * b + spec.noise * noise.normal(RngPath::new(0, i, 0, j as u32))).clamp(0.0, 1.0);
            px.push([c(0), c(1), c(2)]);
            depth.push(d);
        }
    }
    Ok((ImageRGB::new(res, res, px)?, DepthMap::new(res, res, depth)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl MetricsReport {
    /// Field-wise mean.
    pub fn mean(reports: &[MetricsReport]) -> MetricsReport {
        let n = reports.len().max(1) as f64;
        let mut m = MetricsReport::default();
        for r in reports {
            m.abs_rel += r.abs_rel / n;
            m.sq_rel += r.sq_rel / n;
            m.rmse += r.rmse / n;
            m.rmse_log += r.rmse_log / n;
            m.delta1 += r.delta1 / n;
            m.delta2 += r.delta2 / n;
            m.delta3 += r.delta3 / n;
        }
        m
    }

    pub fn deltas_monotone(&self) -> bool {
        self.delta1 <= self.delta2 && self.delta2 <= self.delta3
    }
}

/// Standard depth metrics over pixels valid in both maps.
pub fn metrics(pred: &DepthMap, gt: &DepthMap) -> Result<MetricsReport> {
    if pred.dims() != gt.dims() {
        bail!(Shape, "prediction is {}x{}, ground truth {}x{}", pred.width(), pred.height(), gt.width(), gt.height());
    }
    let (mut n, mut ar, mut sr, mut se, mut sl) = (0usize, 0.0, 0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    for i in 0..gt.len() {
        if !(gt.valid_mask()[i] && pred.valid_mask()[i]) {
            continue;
        }
        let (p, g) = (pred.values()[i], gt.values()[i]);
        let e = p - g;
        n += 1;
        ar += math::abs(e) / g;
        sr += e * e / g;
        se += e * e;
        let l = math::ln(p) - math::ln(g);
        sl += l * l;
        let ratio = (p / g).max(g / p);
        for (k, w) in within.iter_mut().enumerate() {
            if ratio < math::powf(1.25, (k + 1) as f64) {
                *w += 1;
            }
        }
    }
    if n == 0 {
        bail!(Input, "no pixel is valid in both maps");
    }
    let nf = n as f64;
    Ok(MetricsReport {
        abs_rel: ar / nf,
        sq_rel: sr / nf,
        rmse: math::sqrt(se / nf),
        rmse_log: math::sqrt(sl / nf),
        delta1: within[0] as f64 / nf,
        delta2: within[1] as f64 / nf,
        delta3: within[2] as f64 / nf,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    /// `g{L}` for the coarsest level down to `g1` for the finest.
    pub name: String,
    pub resolution: usize,
    pub patch: usize,
    pub token_count: usize,
    pub token_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total_tokens: usize,
    /// Sequential stages of level-wise generation.
    pub level_stages: usize,
    /// Sequential steps of token-by-token generation at the output resolution.
    pub tokenwise_steps: usize,
}

impl CostReport {
    pub fn sequence_lengths(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.token_count).collect()
    }

    /// Levels whose sequence length differs from `other` (same level count),
    /// as `(name, ours, theirs)`.
    pub fn differences(&self, other: &CostReport) -> Vec<(String, usize, usize)> {
        self.rows
            .iter()
            .zip(&other.rows)
            .filter(|(a, b)| a.token_count != b.token_count)
            .map(|(a, b)| (a.name.clone(), a.token_count, b.token_count))
            .collect()
    }
}

pub fn cost_report(plan: &SchedulePlan) -> CostReport {
    let l = plan.len();
    let rows = plan
        .levels()
        .iter()
        .enumerate()
        .map(|(i, p)| CostRow {
            name: format!("g{}", l - i),
            resolution: p.resolution,
            patch: p.patch,
            token_count: p.token_count,
            token_dim: p.token_dim,
        })
        .collect();
    let r = plan.finest().resolution;
    CostReport { rows, total_tokens: plan.total_tokens(), level_stages: l, tokenwise_steps: r * r }
}

/// Fully valid square depth map from a per-pixel function.
pub fn depth_from_fn(res: usize, f: impl Fn(usize, usize) -> f64) -> Result<DepthMap> {
    let mut v = vec![0.0; res * res];
    for y in 0..res {
        for x in 0..res {
            v[y * res + x] = f(x, y);
        }
    }
    DepthMap::new(res, res, v)
}
