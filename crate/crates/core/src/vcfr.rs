//! Per-scale visual/depth conditioning.
//!
//! A small convolutional stack (two 3x3 convolutions with SiLU, replicate
//! padding) produces features at the finest resolution; average pooling
//! yields one feature grid per level. At each level the features are fused
//! with the current depth state through a channel-wise gate with a residual
//! path,
//!
//! ```text
//! g = f * sigmoid(w * z + b) + f
//! ```
//!
//! then mean-pooled per token. The mean log-depth of the state is appended
//! as a guidance scalar.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::grid::{ImageRGB, LatentGrid};
use crate::math;
use crate::nnet::{gemm, Strides};
use crate::normalize::LogDepth;
use crate::plan::SchedulePlan;
use crate::rng::{RngPath, RngStream};

/// Feature grid with channels interleaved per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }
}

/// One feature grid per level, coarse to fine.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    pub levels: Vec<FeatureGrid>,
}

/// Per-token conditions, `tokens x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector {
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl ConditionVector {
    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

const K: usize = 3;

/// Gather 3x3 neighborhoods (clamped at the border) into a
/// `(w*h) x (9*c)` matrix.
fn im2col(src: &[f64], w: usize, h: usize, c: usize) -> Vec<f64> {
    let mut cols = Vec::with_capacity(w * h * K * K * c);
    for y in 0..h {
        for x in 0..w {
            for ky in 0..K {
                let sy = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                for kx in 0..K {
                    let sx = (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                    let o = (sy * w + sx) * c;
                    cols.extend_from_slice(&src[o..o + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], w: usize, h: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h * c];
    let mut i = 0;
    for y in 0..h {
        for x in 0..w {
            for ky in 0..K {
                let sy = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                for kx in 0..K {
                    let sx = (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                    let o = (sy * w + sx) * c;
                    for (d, s) in out[o..o + c].iter_mut().zip(&cols[i..i + c]) {
                        *d += s;
                    }
                    i += c;
                }
            }
        }
    }
    out
}

#[inline]
fn silu(x: f64) -> f64 {
    x * math::sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = math::sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Two-layer 3x3 convolutional feature extractor.
///
/// Parameter layout: conv1 weights `(9*3) x F`, conv1 bias `F`, conv2
/// weights `(9*F) x F`, conv2 bias `F`. Weight rows are ordered
/// `(ky, kx, in_channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    channels: usize,
    params: Vec<f64>,
}

/// Intermediate values kept for [`FeatureExtractor::backward`].
#[derive(Debug, Clone)]
pub struct FeatureCache {
    width: usize,
    height: usize,
    cols1: Vec<f64>,
    pre1: Vec<f64>,
    cols2: Vec<f64>,
    pre2: Vec<f64>,
    pool: Vec<usize>,
}

impl FeatureExtractor {
    pub fn param_len(channels: usize) -> usize {
        K * K * 3 * channels + channels + K * K * channels * channels + channels
    }

    /// He-uniform initialization with zero biases.
    pub fn init(channels: usize, rng: &RngStream) -> Result<Self> {
        if channels == 0 {
            bail!(Config, "feature dimension must be positive");
        }
        let mut params = vec![0.0; Self::param_len(channels)];
        let n1 = K * K * 3 * channels;
        let b1 = math::sqrt(6.0 / (K * K * 3) as f64);
        for (i, p) in params[..n1].iter_mut().enumerate() {
            *p = b1 * (2.0 * rng.uniform(RngPath::new(0, 0, 0, i as u32)) - 1.0);
        }
        let o2 = n1 + channels;
        let n2 = K * K * channels * channels;
        let b2 = math::sqrt(6.0 / (K * K * channels) as f64);
        for (i, p) in params[o2..o2 + n2].iter_mut().enumerate() {
            *p = b2 * (2.0 * rng.uniform(RngPath::new(1, 0, 0, i as u32)) - 1.0);
        }
        Ok(Self { channels, params })
    }

    pub fn from_params(channels: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != Self::param_len(channels) {
            bail!(Shape, "feature extractor with {channels} channels needs {} params, got {}",
                Self::param_len(channels), params.len());
        }
        Ok(Self { channels, params })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let f = self.channels;
        let n1 = K * K * 3 * f;
        let n2 = K * K * f * f;
        let p = &self.params;
        (&p[..n1], &p[n1..n1 + f], &p[n1 + f..n1 + f + n2], &p[n1 + f + n2..])
    }

    fn conv(cols: &[f64], cells: usize, cin: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
        let f = b.len();
        let mut out = Vec::with_capacity(cells * f);
        for _ in 0..cells {
            out.extend_from_slice(b);
        }
        gemm(cells, K * K * cin, f, cols, Strides::row_major(K * K * cin), w, Strides::row_major(f), 1.0, &mut out);
        out
    }

    fn run(&self, image: &ImageRGB, plan: &SchedulePlan) -> Result<(VisualFeatures, FeatureCache)> {
        let res = plan.finest().resolution;
        if image.width() != res || image.height() != res {
            bail!(Shape, "image is {}x{}, finest level is {res}x{res}", image.width(), image.height());
        }
        let (w, h, f) = (res, res, self.channels);
        let rgb: Vec<f64> = image.pixels().iter().flat_map(|p| p.iter().copied()).collect();
        let (w1, b1, w2, b2) = self.split();
        let cols1 = im2col(&rgb, w, h, 3);
        let pre1 = Self::conv(&cols1, w * h, 3, w1, b1);
        let act1: Vec<f64> = pre1.iter().map(|&x| silu(x)).collect();
        let cols2 = im2col(&act1, w, h, f);
        let pre2 = Self::conv(&cols2, w * h, f, w2, b2);
        let fine: Vec<f64> = pre2.iter().map(|&x| silu(x)).collect();

        let mut levels = Vec::with_capacity(plan.len());
        let mut pool = Vec::with_capacity(plan.len());
        for l in plan.levels() {
            let r = l.resolution;
            let block = res / r;
            pool.push(block);
            let norm = 1.0 / (block * block) as f64;
            let mut data = vec![0.0; r * r * f];
            for y in 0..res {
                for x in 0..res {
                    let o = ((y / block) * r + x / block) * f;
                    let s = (y * res + x) * f;
                    for (d, v) in data[o..o + f].iter_mut().zip(&fine[s..s + f]) {
                        *d += v * norm;
                    }
                }
            }
            levels.push(FeatureGrid { width: r, height: r, channels: f, data });
        }
        Ok((
            VisualFeatures { levels },
            FeatureCache { width: w, height: h, cols1, pre1, cols2, pre2, pool },
        ))
    }

    /// Features for every level of `plan`; the image must match the finest
    /// resolution.
    pub fn extract(&self, image: &ImageRGB, plan: &SchedulePlan) -> Result<VisualFeatures> {
        Ok(self.run(image, plan)?.0)
    }

    pub fn extract_with_cache(&self, image: &ImageRGB, plan: &SchedulePlan) -> Result<(VisualFeatures, FeatureCache)> {
        self.run(image, plan)
    }

    /// Parameter gradients given per-level feature gradients (same layout as
    /// the extracted features).
    pub fn backward(&self, cache: &FeatureCache, d_levels: &[Vec<f64>]) -> Result<Vec<f64>> {
        let (w, h, f) = (cache.width, cache.height, self.channels);
        if d_levels.len() != cache.pool.len() {
            bail!(Shape, "got gradients for {} levels, cache has {}", d_levels.len(), cache.pool.len());
        }
        // un-pool into the finest grid
        let mut d_fine = vec![0.0; w * h * f];
        for (d, &block) in d_levels.iter().zip(&cache.pool) {
            let r = w / block;
            if d.len() != r * r * f {
                bail!(Shape, "level gradient has {} values, expected {}", d.len(), r * r * f);
            }
            let norm = 1.0 / (block * block) as f64;
            for y in 0..h {
                for x in 0..w {
                    let o = ((y / block) * r + x / block) * f;
                    let s = (y * w + x) * f;
                    for (g, v) in d_fine[s..s + f].iter_mut().zip(&d[o..o + f]) {
                        *g += v * norm;
                    }
                }
            }
        }
        let (_, _, w2, _) = self.split();
        let mut grads = vec![0.0; self.params.len()];
        let n1 = K * K * 3 * f;
        let n2 = K * K * f * f;
        let cells = w * h;

        let d_pre2: Vec<f64> = d_fine.iter().zip(&cache.pre2).map(|(g, &a)| g * silu_grad(a)).collect();
        {
            let (gw2, gb2) = grads[n1 + f..].split_at_mut(n2);
            gemm(K * K * f, cells, f, &cache.cols2, Strides::transposed(K * K * f), &d_pre2, Strides::row_major(f), 0.0, gw2);
            for row in d_pre2.chunks_exact(f) {
                for (g, v) in gb2.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        let mut d_cols2 = vec![0.0; cells * K * K * f];
        gemm(cells, f, K * K * f, &d_pre2, Strides::row_major(f), w2, Strides::transposed(f), 0.0, &mut d_cols2);
        let d_act1 = col2im(&d_cols2, w, h, f);
        let d_pre1: Vec<f64> = d_act1.iter().zip(&cache.pre1).map(|(g, &a)| g * silu_grad(a)).collect();
        {
            let (gw1, rest) = grads.split_at_mut(n1);
            gemm(K * K * 3, cells, f, &cache.cols1, Strides::transposed(K * K * 3), &d_pre1, Strides::row_major(f), 0.0, gw1);
            for row in d_pre1.chunks_exact(f) {
                for (g, v) in rest[..f].iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        Ok(grads)
    }
}

/// Channel-wise gate parameters of one level: `w` then `b`, each `F` long.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub params: Vec<f64>,
}

impl Gate {
    pub fn zeros(channels: usize) -> Self {
        Self { params: vec![0.0; 2 * channels] }
    }

    pub fn channels(&self) -> usize {
        self.params.len() / 2
    }

    pub fn w(&self) -> &[f64] {
        &self.params[..self.channels()]
    }

    pub fn b(&self) -> &[f64] {
        &self.params[self.channels()..]
    }
}

fn check_refine(f: &FeatureGrid, z: &LatentGrid, gate: &Gate, patch: usize) -> Result<()> {
    if (f.width, f.height) != z.dims() {
        bail!(Shape, "features are {}x{}, depth state is {}x{}", f.width, f.height, z.width(), z.height());
    }
    if gate.channels() != f.channels {
        bail!(Shape, "gate has {} channels, features have {}", gate.channels(), f.channels);
    }
    if patch == 0 || f.width % patch != 0 || f.height % patch != 0 {
        bail!(Shape, "patch {patch} does not tile {}x{}", f.width, f.height);
    }
    Ok(())
}

/// Gated fusion `f * sigmoid(w z + b) + f`, mean-pooled over each token's
/// `patch x patch` block. Tokens are row-major over the patch grid.
pub fn refine_condition(f: &FeatureGrid, z: &LatentGrid, gate: &Gate, patch: usize) -> Result<ConditionVector> {
    check_refine(f, z, gate, patch)?;
    let c = f.channels;
    let cols = f.width / patch;
    let tokens = cols * (f.height / patch);
    let norm = 1.0 / (patch * patch) as f64;
    let mut data = vec![0.0; tokens * c];
    for y in 0..f.height {
        for x in 0..f.width {
            let t = (y / patch) * cols + x / patch;
            let zv = z.get(x, y);
            let cell = f.cell(x, y);
            let out = &mut data[t * c..(t + 1) * c];
            for k in 0..c {
                let g = math::sigmoid(gate.w()[k] * zv + gate.b()[k]);
                out[k] += cell[k] * (g + 1.0) * norm;
            }
        }
    }
    Ok(ConditionVector { tokens, dim: c, data })
}

/// Gradients of [`refine_condition`] with respect to the features and the
/// gate, for upstream gradient `d_cond` (`tokens x F`).
pub fn refine_condition_backward(
    f: &FeatureGrid,
    z: &LatentGrid,
    gate: &Gate,
    patch: usize,
    d_cond: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_refine(f, z, gate, patch)?;
    let c = f.channels;
    let cols = f.width / patch;
    let tokens = cols * (f.height / patch);
    if d_cond.len() != tokens * c {
        bail!(Shape, "condition gradient has {} values, expected {}", d_cond.len(), tokens * c);
    }
    let norm = 1.0 / (patch * patch) as f64;
    let mut d_f = vec![0.0; f.data.len()];
    let mut d_gate = vec![0.0; 2 * c];
    for y in 0..f.height {
        for x in 0..f.width {
            let t = (y / patch) * cols + x / patch;
            let zv = z.get(x, y);
            let cell = f.cell(x, y);
            let o = (y * f.width + x) * c;
            for k in 0..c {
                let dg = d_cond[t * c + k] * norm;
                let s = math::sigmoid(gate.w()[k] * zv + gate.b()[k]);
                d_f[o + k] = dg * (s + 1.0);
                let ds = dg * cell[k] * s * (1.0 - s);
                d_gate[k] += ds * zv;
                d_gate[c + k] += ds;
            }
        }
    }
    Ok((d_f, d_gate))
}

/// Mean natural-log depth (meters) of a normalized latent state.
pub fn guidance_value(z: &LatentGrid, norm: &LogDepth) -> f64 {
    let sum: f64 = z.values().iter().map(|&v| norm.ln_depth(v.clamp(-1.0, 1.0))).sum();
    sum / z.len() as f64
}

/// Append the guidance scalar (mean log-depth of `z`) to every token.
pub fn append_guidance_token(cond: &ConditionVector, z: &LatentGrid, norm: &LogDepth) -> Result<ConditionVector> {
    if z.is_empty() {
        bail!(Shape, "guidance needs a non-empty depth state");
    }
    let g = guidance_value(z, norm);
    let dim = cond.dim + 1;
    let mut data = Vec::with_capacity(cond.tokens * dim);
    for t in 0..cond.tokens {
        data.extend_from_slice(cond.token(t));
        data.push(g);
    }
    Ok(ConditionVector { tokens: cond.tokens, dim, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{build_schedule_plan, ScaleConfig};

    fn plan() -> SchedulePlan {
        build_schedule_plan(&ScaleConfig::desk()).unwrap()
    }

    fn noisy_image(seed: u64, res: usize) -> ImageRGB {
        let s = RngStream::new(seed);
        let px = (0..res * res)
            .map(|i| {
                let u = |c| s.uniform(RngPath::new(0, i as u32, c, 0));
                [u(0), u(1), u(2)]
            })
            .collect();
        ImageRGB::new(res, res, px).unwrap()
    }

    fn random_grid(seed: u64, w: usize, c: usize) -> FeatureGrid {
        let s = RngStream::new(seed);
        FeatureGrid { width: w, height: w, channels: c, data: s.normals(0, 0, 0, w * w * c) }
    }

    #[test]
    fn constant_image_constant_features() {
        let fx = FeatureExtractor::init(16, &RngStream::new(1)).unwrap();
        let img = ImageRGB::filled(64, 64, [0.2, 0.5, 0.9]).unwrap();
        let feats = fx.extract(&img, &plan()).unwrap();
        assert_eq!(feats.levels.len(), 4);
        for lvl in &feats.levels {
            let first = lvl.cell(0, 0).to_vec();
            for y in 0..lvl.height {
                for x in 0..lvl.width {
                    for (a, b) in lvl.cell(x, y).iter().zip(&first) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn one_pixel_change_stays_in_receptive_field() {
        let fx = FeatureExtractor::init(8, &RngStream::new(2)).unwrap();
        let p = plan();
        let a = noisy_image(3, 64);
        let mut px = a.pixels().to_vec();
        let (cx, cy) = (20usize, 41usize);
        px[cy * 64 + cx] = [1.0 - px[cy * 64 + cx][0], 0.0, 1.0];
        let b = ImageRGB::new(64, 64, px).unwrap();
        let fa = fx.extract(&a, &p).unwrap();
        let fb = fx.extract(&b, &p).unwrap();
        // two 3x3 convolutions: radius 2 at the finest level
        for (la, lb) in fa.levels.iter().zip(&fb.levels) {
            let block = 64 / la.width;
            for y in 0..la.height {
                for x in 0..la.width {
                    let (x0, x1) = (x * block, (x + 1) * block - 1);
                    let (y0, y1) = (y * block, (y + 1) * block - 1);
                    let reach = x1 + 2 >= cx && x0 <= cx + 2 && y1 + 2 >= cy && y0 <= cy + 2;
                    let same = la.cell(x, y) == lb.cell(x, y);
                    if !reach {
                        assert!(same, "cell ({x},{y}) of {}x{} changed", la.width, la.height);
                    }
                }
            }
        }
        assert_ne!(fa.levels[3].cell(cx, cy), fb.levels[3].cell(cx, cy));
        assert_eq!(fa, fx.extract(&a, &p).unwrap());
    }

    #[test]
    fn resolution_mismatch() {
        let fx = FeatureExtractor::init(4, &RngStream::new(2)).unwrap();
        let img = ImageRGB::filled(32, 32, [0.0; 3]).unwrap();
        assert!(matches!(fx.extract(&img, &plan()), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn gate_at_rest_is_one_and_a_half() {
        let f = random_grid(4, 4, 3);
        let z = LatentGrid::zeros(4, 4);
        let mut gate = Gate::zeros(3);
        gate.params[..3].copy_from_slice(&[0.7, -1.0, 2.0]); // w irrelevant when z = 0
        let c = refine_condition(&f, &z, &gate, 2).unwrap();
        assert_eq!(c.tokens, 4);
        for t in 0..4 {
            let (tr, tc) = (t / 2, t % 2);
            for k in 0..3 {
                let mean: f64 = (0..2)
                    .flat_map(|dy| (0..2).map(move |dx| (tc * 2 + dx, tr * 2 + dy)))
                    .map(|(x, y)| f.cell(x, y)[k])
                    .sum::<f64>()
                    / 4.0;
                assert!((c.token(t)[k] - 1.5 * mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_features_zero_condition() {
        let f = FeatureGrid { width: 4, height: 4, channels: 2, data: vec![0.0; 32] };
        let z = LatentGrid::new(4, 4, RngStream::new(5).normals(0, 0, 0, 16)).unwrap();
        let gate = Gate { params: vec![1.0, 2.0, 0.5, -0.5] };
        let c = refine_condition(&f, &z, &gate, 1).unwrap();
        assert!(c.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refine_matches_per_cell_oracle() {
        let f = random_grid(6, 8, 4);
        let z = LatentGrid::new(8, 8, RngStream::new(7).normals(0, 0, 0, 64)).unwrap();
        let gate = Gate { params: RngStream::new(8).normals(0, 0, 0, 8) };
        let c = refine_condition(&f, &z, &gate, 4).unwrap();
        for t in 0..4 {
            for k in 0..4 {
                let mut acc = 0.0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        let (x, y) = ((t % 2) * 4 + dx, (t / 2) * 4 + dy);
                        let fv = f.data[(y * 8 + x) * 4 + k];
                        let s = 1.0 / (1.0 + (-(gate.params[k] * z.get(x, y) + gate.params[4 + k])).exp());
                        acc += fv * s + fv;
                    }
                }
                let want = acc / 16.0;
                assert!((c.token(t)[k] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
        assert_eq!(c, refine_condition(&f, &z, &gate, 4).unwrap());
        let z2 = LatentGrid::new(8, 8, RngStream::new(9).normals(0, 0, 0, 64)).unwrap();
        assert_ne!(c, refine_condition(&f, &z2, &gate, 4).unwrap());
    }

    #[test]
    fn refine_backward_matches_finite_differences() {
        let f = random_grid(10, 4, 3);
        let z = LatentGrid::new(4, 4, RngStream::new(11).normals(0, 0, 0, 16)).unwrap();
        let gate = Gate { params: RngStream::new(12).normals(0, 0, 0, 6) };
        let d = RngStream::new(13).normals(0, 0, 0, 4 * 3);
        let loss = |f: &FeatureGrid, g: &Gate| -> f64 {
            let c = refine_condition(f, &z, g, 2).unwrap();
            c.data.iter().zip(&d).map(|(a, b)| a * b).sum()
        };
        let (df, dg) = refine_condition_backward(&f, &z, &gate, 2, &d).unwrap();
        let h = 1e-5;
        for i in 0..f.data.len() {
            let mut p = f.clone();
            p.data[i] += h;
            let up = loss(&p, &gate);
            p.data[i] -= 2.0 * h;
            let num = (up - loss(&p, &gate)) / (2.0 * h);
            assert!((num - df[i]).abs() <= 1e-4 * num.abs().max(1e-6));
        }
        for i in 0..6 {
            let mut g = gate.clone();
            g.params[i] += h;
            let up = loss(&f, &g);
            g.params[i] -= 2.0 * h;
            let num = (up - loss(&f, &g)) / (2.0 * h);
            assert!((num - dg[i]).abs() <= 1e-4 * num.abs().max(1e-6));
        }
    }

    #[test]
    fn extractor_backward_matches_finite_differences() {
        let cfg = ScaleConfig::new(
            vec![crate::plan::LevelSpec::new(1, 1), crate::plan::LevelSpec::new(2, 1), crate::plan::LevelSpec::new(4, 2)],
            0.1,
            10.0,
        )
        .unwrap();
        let p = build_schedule_plan(&cfg).unwrap();
        let mut fx = FeatureExtractor::init(3, &RngStream::new(14)).unwrap();
        for (i, v) in fx.params_mut().iter_mut().enumerate() {
            *v += 0.1 * RngStream::new(15).normal(RngPath::new(0, 0, 0, i as u32));
        }
        let img = noisy_image(16, 4);
        let (feats, cache) = fx.extract_with_cache(&img, &p).unwrap();
        let dirs: Vec<Vec<f64>> = feats
            .levels
            .iter()
            .enumerate()
            .map(|(l, g)| RngStream::new(17).normals(l as u32, 0, 0, g.data.len()))
            .collect();
        let loss = |fx: &FeatureExtractor| -> f64 {
            let fs = fx.extract(&img, &p).unwrap();
            fs.levels.iter().zip(&dirs).map(|(g, d)| g.data.iter().zip(d).map(|(a, b)| a * b).sum::<f64>()).sum()
        };
        let grads = fx.backward(&cache, &dirs).unwrap();
        let h = 1e-5;
        for i in 0..fx.params().len() {
            let mut q = fx.clone();
            q.params_mut()[i] += h;
            let up = loss(&q);
            q.params_mut()[i] -= 2.0 * h;
            let num = (up - loss(&q)) / (2.0 * h);
            assert!((num - grads[i]).abs() <= 1e-4 * num.abs().max(1e-6), "param {i}: {num} vs {}", grads[i]);
        }
    }

    #[test]
    fn guidance_cases() {
        let n = LogDepth::new(0.1, 10.0).unwrap();
        let d = 2.5f64;
        let z = LatentGrid::filled(4, 4, n.to_latent(d));
        let cond = ConditionVector { tokens: 2, dim: 1, data: vec![0.0, 0.0] };
        let g = append_guidance_token(&cond, &z, &n).unwrap();
        assert_eq!(g.dim, 2);
        assert!((g.token(0)[1] - d.ln()).abs() < 1e-12);
        assert_eq!(g.token(0)[1], g.token(1)[1]);
        let mid = guidance_value(&LatentGrid::zeros(2, 2), &n);
        assert!((mid - (0.1f64 * 10.0).sqrt().ln()).abs() < 1e-12);

        let vals: Vec<f64> = (0..64).map(|i| 0.2 + 0.15 * i as f64).collect();
        let z = LatentGrid::new(8, 8, vals.iter().map(|&v| n.to_latent(v)).collect()).unwrap();
        let oracle = vals.iter().map(|v| v.ln()).sum::<f64>() / 64.0;
        assert!((guidance_value(&z, &n) - oracle).abs() <= 1e-12);
        // invariant to permuting cells
        let mut rev = z.values().to_vec();
        rev.reverse();
        let zr = LatentGrid::new(8, 8, rev).unwrap();
        assert!((guidance_value(&zr, &n) - oracle).abs() <= 1e-12);
    }
}
