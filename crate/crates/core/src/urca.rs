//! Robust consensus fusion of stochastic depth samples.
//!
//! Samples are first brought into a common affine frame by minimizing a
//! Charbonnier-smoothed pairwise L1 energy with a scale prior,
//!
//! ```text
//! E_align = mean_{pairs, pixels} rho(A_n - A_m) + lambda * sum_n (alpha_n - 1)^2,   A_n = alpha_n D_n + beta_n
//! ```
//!
//! then every pixel takes the minimizer of
//!
//! ```text
//! E(z) = sum_n rho((s_n - z) / (tau_s + delta)) + gamma * sum_k w_k rho((r_k - z) / (tau_r + delta))
//! ```
//!
//! over the aligned samples `s` and the aligned per-level recursive maps `r`.
//! The minimum value is the uncertainty proxy `U`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::fractal::GenerationTrace;
use crate::grid::DepthMap;
use crate::math;

/// Which generation traces feed the recursive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecursiveSource {
    /// Level maps of the first sample's trace.
    #[default]
    FirstSample,
    /// Per-level mean over all supplied traces.
    Averaged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UrcaConfig {
    pub lambda: f64,
    pub gamma: f64,
    /// Per-level weights summing to 1; `None` means uniform.
    pub level_weights: Option<Vec<f64>>,
    pub tau_s: f64,
    pub tau_r: f64,
    pub delta_stab: f64,
    pub eps_c: f64,
    /// Relative objective decrease below which alignment stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub recursive: RecursiveSource,
}

impl Default for UrcaConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            gamma: 0.5,
            level_weights: None,
            tau_s: 0.1,
            tau_r: 0.1,
            delta_stab: 1e-6,
            eps_c: 1e-3,
            tolerance: 1e-9,
            max_iterations: 200,
            recursive: RecursiveSource::FirstSample,
        }
    }
}

impl UrcaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            bail!(Config, "lambda must be positive, got {}", self.lambda);
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            bail!(Config, "gamma must be >= 0, got {}", self.gamma);
        }
        if !(self.tau_s > 0.0 && self.tau_r > 0.0 && self.delta_stab >= 0.0) {
            bail!(Config, "need tau_s, tau_r > 0 and delta_stab >= 0");
        }
        if !(self.eps_c > 0.0 && self.eps_c.is_finite()) {
            bail!(Config, "eps_c must be positive, got {}", self.eps_c);
        }
        if let Some(w) = &self.level_weights {
            if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || math::abs(w.iter().sum::<f64>() - 1.0) > 1e-9 {
                bail!(Config, "level weights must be non-negative and sum to 1: {w:?}");
            }
        }
        if self.max_iterations == 0 {
            bail!(Config, "max_iterations must be positive");
        }
        Ok(())
    }

    /// Weights for `k` levels.
    pub fn weights(&self, k: usize) -> Result<Vec<f64>> {
        match &self.level_weights {
            Some(w) if w.len() == k => Ok(w.clone()),
            Some(w) => bail!(Config, "{} level weights for {k} levels", w.len()),
            None if k == 0 => Ok(Vec::new()),
            None => Ok(vec![1.0 / k as f64; k]),
        }
    }
}

/// `sqrt(x^2 + eps^2) - eps`, evaluated without cancellation near 0.
#[inline]
pub fn charbonnier(x: f64, eps: f64) -> f64 {
    let s = math::sqrt(x * x + eps * eps);
    x * x / (s + eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub params: AlignmentParams,
    /// Objective before the first sweep and after every sweep.
    pub objective_history: Vec<f64>,
}

impl Alignment {
    pub fn iterations(&self) -> usize {
        self.objective_history.len() - 1
    }
}

/// Pixels valid in every map.
fn common_mask(maps: &[&DepthMap]) -> Result<Vec<usize>> {
    let dims = maps[0].dims();
    if maps.iter().any(|m| m.dims() != dims) {
        bail!(Shape, "depth maps have different resolutions");
    }
    let idx: Vec<usize> = (0..maps[0].len()).filter(|&p| maps.iter().all(|m| m.valid_mask()[p])).collect();
    if idx.is_empty() {
        bail!(Input, "no pixel is valid in every map");
    }
    Ok(idx)
}

/// The alignment energy for given affine parameters.
pub fn alignment_objective(samples: &[DepthMap], params: &AlignmentParams, cfg: &UrcaConfig) -> Result<f64> {
    let refs: Vec<&DepthMap> = samples.iter().collect();
    let idx = common_mask(&refs)?;
    let aligned: Vec<Vec<f64>> = samples
        .iter()
        .zip(params.alpha.iter().zip(&params.beta))
        .map(|(s, (&a, &b))| idx.iter().map(|&p| a * s.values()[p] + b).collect())
        .collect();
    Ok(objective(&aligned, &params.alpha, cfg))
}

fn objective(aligned: &[Vec<f64>], alpha: &[f64], cfg: &UrcaConfig) -> f64 {
    let n = aligned.len();
    let pairs = n * (n - 1) / 2;
    let mut pair_sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            pair_sum += aligned[i].iter().zip(&aligned[j]).map(|(a, b)| charbonnier(a - b, cfg.eps_c)).sum::<f64>();
        }
    }
    let prior: f64 = alpha.iter().map(|a| (a - 1.0) * (a - 1.0)).sum();
    pair_sum / (pairs * aligned[0].len()) as f64 + cfg.lambda * prior
}

/// Majorize-minimize update of one affine pair against fixed references.
///
/// Minimizes the quadratic IRLS bound of
/// `c * sum_refs sum_p rho(alpha d_p + beta - ref_p) + lambda (alpha - 1)^2`
/// around the current `(alpha, beta)`.
fn irls_affine(d: &[f64], refs: &[&[f64]], alpha: f64, beta: f64, c: f64, cfg: &UrcaConfig) -> (f64, f64) {
    let (mut sww, mut swd, mut swdd, mut swa, mut swda) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in refs {
        for (&dp, &ap) in d.iter().zip(r.iter()) {
            let res = alpha * dp + beta - ap;
            let w = 1.0 / math::sqrt(res * res + cfg.eps_c * cfg.eps_c);
            sww += w;
            swd += w * dp;
            swdd += w * dp * dp;
            swa += w * ap;
            swda += w * dp * ap;
        }
    }
    let (a11, a12, a22) = (c * swdd + 2.0 * cfg.lambda, c * swd, c * sww);
    let (b1, b2) = (c * swda + 2.0 * cfg.lambda, c * swa);
    let det = a11 * a22 - a12 * a12;
    if !(det > 0.0) || !det.is_finite() {
        return (alpha, beta);
    }
    ((b1 * a22 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det)
}

/// Solves `a x = b` in place by Gaussian elimination with partial pivoting.
/// `None` if `a` is singular.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| math::abs(a[i * n + col]).total_cmp(&math::abs(a[j * n + col])))?;
        if !(math::abs(a[piv * n + col]) > 1e-300) {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row * n + row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Exact minimizer of the squared-residual version of the alignment energy,
/// `c * sum_pairs |A_i - A_j|^2 + lambda * sum (alpha - 1)^2`, with
/// `mean(beta) = 0`. Unknowns are ordered `alpha_1..alpha_n, beta_1..beta_n`.
fn least_squares_alignment(raw: &[Vec<f64>], c: f64, lambda: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = raw.len();
    let p = raw[0].len() as f64;
    let sums: Vec<f64> = raw.iter().map(|r| r.iter().sum()).collect();
    let m = 2 * n;
    let mut h = vec![0.0; m * m];
    for i in 0..n {
        for j in 0..n {
            let k = c * if i == j { (n - 1) as f64 } else { -1.0 };
            let dot: f64 = raw[i].iter().zip(&raw[j]).map(|(a, b)| a * b).sum();
            h[i * m + j] = k * dot + if i == j { lambda } else { 0.0 };
            h[i * m + n + j] = k * sums[i];
            h[(n + j) * m + i] = k * sums[i];
            // the unit penalty on sum(beta) pins the shift gauge
            h[(n + i) * m + n + j] = k * p + 1.0;
        }
    }
    let mut rhs = vec![0.0; m];
    rhs[..n].iter_mut().for_each(|v| *v = lambda);
    let x = solve_dense(h, rhs)?;
    Some((x[..n].to_vec(), x[n..].to_vec()))
}

/// Block coordinate descent over per-sample affine pairs, with the shift
/// gauge fixed to `mean(beta) = 0` after every sweep. Starts from the exact
/// least-squares alignment when that already has the lower energy.
pub fn align_samples(samples: &[DepthMap], cfg: &UrcaConfig) -> Result<Alignment> {
    cfg.validate()?;
    let n = samples.len();
    if n < 2 {
        bail!(Input, "alignment needs at least 2 samples, got {n}");
    }
    let refs: Vec<&DepthMap> = samples.iter().collect();
    let idx = common_mask(&refs)?;
    let raw: Vec<Vec<f64>> = samples.iter().map(|s| idx.iter().map(|&p| s.values()[p]).collect()).collect();
    let mut alpha = vec![1.0; n];
    let mut beta = vec![0.0; n];
    if raw.iter().all(|r| r == &raw[0]) {
        return Ok(Alignment { params: AlignmentParams { alpha, beta }, objective_history: vec![0.0] });
    }
    let c = 1.0 / ((n * (n - 1) / 2) * idx.len()) as f64;
    let mut aligned = raw.clone();
    let mut start = objective(&aligned, &alpha, cfg);
    if let Some((a, b)) = least_squares_alignment(&raw, c, cfg.lambda) {
        let warm: Vec<Vec<f64>> =
            raw.iter().zip(a.iter().zip(&b)).map(|(r, (&a, &b))| r.iter().map(|d| a * d + b).collect()).collect();
        let e = objective(&warm, &a, cfg);
        if e < start {
            (alpha, beta, aligned, start) = (a, b, warm, e);
        }
    }
    let mut history = vec![start];
    for _ in 0..cfg.max_iterations {
        for k in 0..n {
            let others: Vec<&[f64]> = (0..n).filter(|&m| m != k).map(|m| aligned[m].as_slice()).collect();
            let (a, b) = irls_affine(&raw[k], &others, alpha[k], beta[k], c, cfg);
            alpha[k] = a;
            beta[k] = b;
            for (dst, &d) in aligned[k].iter_mut().zip(&raw[k]) {
                *dst = a * d + b;
            }
        }
        let shift = beta.iter().sum::<f64>() / n as f64;
        beta.iter_mut().for_each(|b| *b -= shift);
        aligned.iter_mut().flatten().for_each(|v| *v -= shift);
        let e = objective(&aligned, &alpha, cfg);
        let prev = history[history.len() - 1];
        history.push(e);
        if prev - e <= cfg.tolerance * prev.max(1e-12) {
            break;
        }
    }
    Ok(Alignment { params: AlignmentParams { alpha, beta }, objective_history: history })
}

/// `alpha * d + beta` per pixel. Pixels that were invalid, or whose mapped
/// value is not a positive depth, are invalid in the result.
pub fn apply_affine(sample: &DepthMap, alpha: f64, beta: f64) -> DepthMap {
    let mut values = Vec::with_capacity(sample.len());
    let mut valid = Vec::with_capacity(sample.len());
    for (&d, &ok) in sample.values().iter().zip(sample.valid_mask()) {
        let v = alpha * d + beta;
        let keep = ok && v > 0.0 && v.is_finite();
        values.push(if keep { v } else { 0.0 });
        valid.push(keep);
    }
    DepthMap::with_mask(sample.width(), sample.height(), values, valid)
        .unwrap_or_else(|_| unreachable!("affine output is masked to positive finite values"))
}

/// The per-pixel consensus energy.
pub fn consensus_energy(z: f64, s: &[f64], r: &[f64], weights: &[f64], cfg: &UrcaConfig) -> f64 {
    let ss = cfg.tau_s + cfg.delta_stab;
    let sr = cfg.tau_r + cfg.delta_stab;
    let mut e = s.iter().map(|&v| charbonnier((v - z) / ss, cfg.eps_c)).sum::<f64>();
    if cfg.gamma != 0.0 {
        e += cfg.gamma * r.iter().zip(weights).map(|(&v, &w)| w * charbonnier((v - z) / sr, cfg.eps_c)).sum::<f64>();
    }
    e
}

/// First and second derivatives of [`consensus_energy`] in `z`.
fn energy_derivatives(z: f64, s: &[f64], r: &[f64], weights: &[f64], cfg: &UrcaConfig) -> (f64, f64) {
    let eps2 = cfg.eps_c * cfg.eps_c;
    let add = |x: f64, scale: f64, w: f64, g: &mut f64, h: &mut f64| {
        let u = x / scale;
        let q = math::sqrt(u * u + eps2);
        *g -= w * u / q / scale;
        *h += w * eps2 / (q * q * q) / (scale * scale);
    };
    let (mut g, mut h) = (0.0, 0.0);
    let ss = cfg.tau_s + cfg.delta_stab;
    let sr = cfg.tau_r + cfg.delta_stab;
    for &v in s {
        add(v - z, ss, 1.0, &mut g, &mut h);
    }
    if cfg.gamma != 0.0 {
        for (&v, &w) in r.iter().zip(weights) {
            add(v - z, sr, cfg.gamma * w, &mut g, &mut h);
        }
    }
    (g, h)
}

/// Minimizer `M` and minimum `U` of the consensus energy at one pixel.
///
/// `weights` pairs with `r`. Ternary search over `[min, max]` of all inputs,
/// then one Newton step, kept only if it lowers the energy.
pub fn consensus_pixel(s: &[f64], r: &[f64], weights: &[f64], cfg: &UrcaConfig) -> Result<(f64, f64)> {
    if s.is_empty() {
        bail!(Input, "consensus needs at least one sample value");
    }
    if r.len() != weights.len() {
        bail!(Shape, "{} recursive values for {} weights", r.len(), weights.len());
    }
    let energy = |z: f64| consensus_energy(z, s, r, weights, cfg);
    let (mut lo, mut hi) = s.iter().chain(r).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let tol = 1e-12 * lo.abs().max(hi.abs()).max(1.0);
    while hi - lo > tol {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if energy(m1) <= energy(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
        if !(m1 > lo || m2 < hi) && hi - lo <= 4.0 * tol {
            break;
        }
    }
    let mut z = 0.5 * (lo + hi);
    let mut e = energy(z);
    let (g, h) = energy_derivatives(z, s, r, weights, cfg);
    if h > 0.0 {
        let zn = z - g / h;
        let en = energy(zn);
        if zn.is_finite() && en < e {
            z = zn;
            e = en;
        }
    }
    Ok((z, e.max(0.0)))
}

/// Fused depth and per-pixel uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusOutput {
    pub depth: DepthMap,
    /// Minimum consensus energy per pixel (0 where the depth is invalid).
    pub uncertainty: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub consensus: ConsensusOutput,
    /// `None` for a single sample.
    pub alignment: Option<Alignment>,
    /// Affine pair fitted to each recursive level map.
    pub level_affines: Vec<(f64, f64)>,
}

/// Robust affine fit of `map` onto `reference` over the shared valid pixels.
fn fit_to_reference(map: &[f64], reference: &[f64], cfg: &UrcaConfig) -> (f64, f64) {
    let c = 1.0 / map.len() as f64;
    let (mut a, mut b) = (1.0, 0.0);
    let energy = |a: f64, b: f64| {
        c * map.iter().zip(reference).map(|(d, r)| charbonnier(a * d + b - r, cfg.eps_c)).sum::<f64>()
            + cfg.lambda * (a - 1.0) * (a - 1.0)
    };
    let mut prev = energy(a, b);
    for _ in 0..cfg.max_iterations {
        (a, b) = irls_affine(map, &[reference], a, b, c, cfg);
        let e = energy(a, b);
        if prev - e <= cfg.tolerance * prev.max(1e-12) {
            break;
        }
        prev = e;
    }
    (a, b)
}

/// Align the samples (when more than one), align the recursive level maps
/// to their plain consensus, and solve the per-pixel consensus.
///
/// `traces` supplies the recursive level maps; pass an empty slice or set
/// `gamma = 0` to fuse samples only.
pub fn fuse(samples: &[DepthMap], traces: &[GenerationTrace], cfg: &UrcaConfig) -> Result<FusionResult> {
    cfg.validate()?;
    if samples.is_empty() {
        bail!(Input, "fusion needs at least one sample");
    }
    let dims = samples[0].dims();
    let mut maps: Vec<&DepthMap> = samples.iter().collect();
    for t in traces {
        maps.extend(t.level_depths.iter());
    }
    if maps.iter().any(|m| m.dims() != dims) {
        bail!(Shape, "samples and level maps must share one resolution");
    }
    let (w, h) = dims;
    let idx = common_mask(&maps)?;
    let alignment = if samples.len() > 1 { Some(align_samples(samples, cfg)?) } else { None };
    let aligned: Vec<Vec<f64>> = samples
        .iter()
        .enumerate()
        .map(|(n, s)| {
            let (a, b) = alignment.as_ref().map_or((1.0, 0.0), |al| (al.params.alpha[n], al.params.beta[n]));
            idx.iter().map(|&p| a * s.values()[p] + b).collect()
        })
        .collect();

    let use_recursive = cfg.gamma != 0.0 && !traces.is_empty();
    let mut levels: Vec<Vec<f64>> = Vec::new();
    let mut level_affines = Vec::new();
    if use_recursive {
        let k = traces[0].level_depths.len();
        if traces.iter().any(|t| t.level_depths.len() != k) {
            bail!(Shape, "traces have different level counts");
        }
        let chosen: &[GenerationTrace] = match cfg.recursive {
            RecursiveSource::FirstSample => &traces[..1],
            RecursiveSource::Averaged => traces,
        };
        let plain = UrcaConfig { gamma: 0.0, ..cfg.clone() };
        let mut column = vec![0.0; samples.len()];
        let reference: Vec<f64> = (0..idx.len())
            .map(|i| {
                for (c, a) in column.iter_mut().zip(&aligned) {
                    *c = a[i];
                }
                consensus_pixel(&column, &[], &[], &plain).map(|(m, _)| m)
            })
            .collect::<Result<_>>()?;
        for lvl in 0..k {
            let map: Vec<f64> = idx
                .iter()
                .map(|&p| chosen.iter().map(|t| t.level_depths[lvl].values()[p]).sum::<f64>() / chosen.len() as f64)
                .collect();
            let (a, b) = fit_to_reference(&map, &reference, cfg);
            level_affines.push((a, b));
            levels.push(map.iter().map(|d| a * d + b).collect());
        }
    }
    let weights = cfg.weights(levels.len())?;

    let mut depth = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    let mut uncertainty = vec![0.0; w * h];
    let mut s = vec![0.0; samples.len()];
    let mut r = vec![0.0; levels.len()];
    for (i, &p) in idx.iter().enumerate() {
        for (v, a) in s.iter_mut().zip(&aligned) {
            *v = a[i];
        }
        for (v, l) in r.iter_mut().zip(&levels) {
            *v = l[i];
        }
        let (m, u) = consensus_pixel(&s, &r, &weights, cfg)?;
        if m > 0.0 && m.is_finite() {
            depth[p] = m;
            valid[p] = true;
            uncertainty[p] = u;
        }
    }
    Ok(FusionResult {
        consensus: ConsensusOutput { depth: DepthMap::with_mask(w, h, depth, valid)?, uncertainty },
        alignment,
        level_affines,
    })
}

/// `U / (N + gamma)^1.5`: the energy per unit of term weight is a mean
/// residual in units of tau, and dividing once more by the square root of the
/// total weight turns it into a standard error of the consensus. Maps fused
/// from different sample counts are then on one scale.
pub fn normalize_uncertainty(u: &[f64], samples: usize, cfg: &UrcaConfig) -> Vec<f64> {
    let z = samples as f64 + cfg.gamma;
    let z = z * math::sqrt(z);
    u.iter().map(|v| v / z).collect()
}

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyStats {
    /// Lower edge of each of the [`HISTOGRAM_BINS`] bins over `[0, max]`.
    pub bin_left: Vec<f64>,
    pub counts: Vec<u64>,
    pub max: f64,
    pub threshold: f64,
    /// Fraction of entries strictly above the threshold.
    pub exceedance: f64,
}

pub fn uncertainty_stats(u: &[f64], threshold: f64) -> UncertaintyStats {
    let max = u.iter().copied().fold(0.0f64, f64::max);
    let width = max / HISTOGRAM_BINS as f64;
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &v in u {
        let b = if width > 0.0 { ((v / width) as usize).min(HISTOGRAM_BINS - 1) } else { 0 };
        counts[b] += 1;
    }
    let above = u.iter().filter(|&&v| v > threshold).count();
    UncertaintyStats {
        bin_left: (0..HISTOGRAM_BINS).map(|i| i as f64 * width).collect(),
        counts,
        max,
        threshold,
        exceedance: if u.is_empty() { 0.0 } else { above as f64 / u.len() as f64 },
    }
}
