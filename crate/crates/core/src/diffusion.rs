//! Noise schedule, forward noising, the noise-prediction loss, and the
//! ancestral reverse sampler with temperature.
//!
//! Timesteps are 1-based: `t = 1..=T`. `alpha_bar(0) = 1` denotes the clean
//! signal.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::grid::LatentGrid;
use crate::math;
use crate::rng::{RngPath, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

/// One row of the schedule audit table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRow {
    pub t: usize,
    pub beta: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub sigma: f64,
}

/// Linearly spaced `beta_t` from `beta_start` (t = 1) to `beta_end` (t = T).
///
/// `sigma_t = sqrt(beta_t)` for `t > 1` and `sigma_1 = 0`, so the last
/// reverse step is noiseless.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        bail!(Config, "schedule needs at least one timestep");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        bail!(Config, "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]");
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    let sigmas = betas
        .iter()
        .enumerate()
        .map(|(i, b)| if i == 0 { 0.0 } else { math::sqrt(*b) })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
        sigmas,
    })
}

impl NoiseSchedule {
    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return Err(Error::Timestep { t, max: self.len() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn rows(&self) -> impl Iterator<Item = ScheduleRow> + '_ {
        (1..=self.len()).map(|t| ScheduleRow {
            t,
            beta: self.beta(t),
            alpha: self.alpha(t),
            alpha_bar: self.alpha_bar(t),
            sigma: self.sigma(t),
        })
    }
}

/// `z_t = sqrt(abar_t) z* + sqrt(1 - abar_t) eps`, written into `out`.
/// `t = 0` returns `z*` unchanged.
pub fn forward_noise_into(z_star: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule, out: &mut [f64]) -> Result<()> {
    if z_star.len() != eps.len() || out.len() != eps.len() {
        bail!(Shape, "forward noise: z* has {}, eps {}, out {}", z_star.len(), eps.len(), out.len());
    }
    if t > sched.len() {
        return Err(Error::Timestep { t, max: sched.len() });
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (math::sqrt(ab), math::sqrt(1.0 - ab));
    for ((o, z), e) in out.iter_mut().zip(z_star).zip(eps) {
        *o = a * z + b * e;
    }
    Ok(())
}

pub fn forward_noise(z_star: &LatentGrid, t: usize, eps: &LatentGrid, sched: &NoiseSchedule) -> Result<LatentGrid> {
    if z_star.dims() != eps.dims() {
        bail!(Shape, "forward noise: z* is {:?}, eps is {:?}", z_star.dims(), eps.dims());
    }
    let mut out = vec![0.0; z_star.len()];
    forward_noise_into(z_star.values(), t, eps.values(), sched, &mut out)?;
    LatentGrid::new(z_star.width(), z_star.height(), out)
}

/// Mean squared error between true and predicted noise.
pub fn diffusion_loss(eps_true: &[f64], eps_pred: &[f64]) -> Result<f64> {
    if eps_true.len() != eps_pred.len() || eps_true.is_empty() {
        bail!(Shape, "diffusion loss: {} vs {} values", eps_true.len(), eps_pred.len());
    }
    let sum: f64 = eps_true
        .iter()
        .zip(eps_pred)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / eps_true.len() as f64)
}

pub fn diffusion_loss_grid(eps_true: &LatentGrid, eps_pred: &LatentGrid) -> Result<f64> {
    if eps_true.dims() != eps_pred.dims() {
        bail!(Shape, "diffusion loss: {:?} vs {:?}", eps_true.dims(), eps_pred.dims());
    }
    diffusion_loss(eps_true.values(), eps_pred.values())
}

/// One reverse step:
/// `z_{t-1} = (z_t - (1 - a_t)/sqrt(1 - abar_t) eps_pred) / sqrt(a_t) + tau sigma_t noise`.
pub fn reverse_step_into(
    z_t: &mut [f64],
    t: usize,
    eps_pred: &[f64],
    sched: &NoiseSchedule,
    temperature: f64,
    noise: &[f64],
) -> Result<()> {
    sched.check(t)?;
    if z_t.len() != eps_pred.len() || z_t.len() != noise.len() {
        bail!(Shape, "reverse step: z_t {}, eps {}, noise {}", z_t.len(), eps_pred.len(), noise.len());
    }
    let a = sched.alpha(t);
    let coef = (1.0 - a) / math::sqrt(1.0 - sched.alpha_bar(t));
    let inv_sqrt_a = 1.0 / math::sqrt(a);
    let stoch = temperature * sched.sigma(t);
    for ((z, e), n) in z_t.iter_mut().zip(eps_pred).zip(noise) {
        *z = (*z - coef * e) * inv_sqrt_a;
        if stoch != 0.0 {
            *z += stoch * n;
        }
    }
    Ok(())
}

pub fn reverse_step(
    z_t: &LatentGrid,
    t: usize,
    eps_pred: &LatentGrid,
    sched: &NoiseSchedule,
    temperature: f64,
    noise: &LatentGrid,
) -> Result<LatentGrid> {
    if z_t.dims() != eps_pred.dims() || z_t.dims() != noise.dims() {
        bail!(Shape, "reverse step grids differ in shape");
    }
    let mut out = z_t.values().to_vec();
    reverse_step_into(&mut out, t, eps_pred.values(), sched, temperature, noise.values())?;
    LatentGrid::new(z_t.width(), z_t.height(), out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Multiplier on the stochastic term; 0 gives a deterministic chain.
    pub temperature: f64,
    /// Reverse steps to run: `None` or `Some(T)` runs the full chain,
    /// `Some(0)` returns the initial draw. Strided sampling is not supported.
    pub steps: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            steps: None,
        }
    }
}

impl SamplerConfig {
    pub fn with_temperature(temperature: f64) -> Self {
        Self {
            temperature,
            steps: None,
        }
    }

    fn resolved_steps(&self, sched: &NoiseSchedule) -> Result<usize> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            bail!(Config, "temperature must be finite and >= 0, got {}", self.temperature);
        }
        match self.steps {
            None => Ok(sched.len()),
            Some(s) if s == 0 || s == sched.len() => Ok(s),
            Some(s) => bail!(Config, "strided sampling ({s} of {} steps) is not supported", sched.len()),
        }
    }
}

/// A noise predictor over a batch of `rows` independent chains.
///
/// `z_t` holds `rows * dim` values row-major; the result must have the same
/// length.
pub trait NoisePredictor {
    type Condition: ?Sized;

    fn predict(&self, z_t: &[f64], t: usize, condition: &Self::Condition, rows: usize) -> Result<Vec<f64>>;
}

/// Run the reverse chain from a given `z_T` (`rows * dim` values).
///
/// Stochastic draws use paths `(level, row, t, cell)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_from<P: NoisePredictor + ?Sized>(
    predictor: &P,
    condition: &P::Condition,
    mut z: Vec<f64>,
    rows: usize,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    rng: &RngStream,
    level: u32,
) -> Result<Vec<f64>> {
    let steps = sampler.resolved_steps(sched)?;
    if rows == 0 || z.len() % rows != 0 {
        bail!(Shape, "{} initial values do not split into {rows} rows", z.len());
    }
    let dim = z.len() / rows;
    let mut noise = vec![0.0; z.len()];
    for t in (sched.len() + 1 - steps..=sched.len()).rev() {
        let eps = predictor.predict(&z, t, condition, rows)?;
        if eps.len() != z.len() {
            bail!(Shape, "predictor returned {} values for {} inputs", eps.len(), z.len());
        }
        if sampler.temperature != 0.0 && sched.sigma(t) != 0.0 {
            for (i, n) in noise.iter_mut().enumerate() {
                *n = rng.normal(RngPath::new(level, (i / dim) as u32, t as u32, (i % dim) as u32));
            }
        }
        reverse_step_into(&mut z, t, &eps, sched, sampler.temperature, &noise)?;
    }
    Ok(z)
}

/// Initial Gaussian draw at paths `(level, row, 0, cell)`.
pub fn initial_noise(rng: &RngStream, level: u32, rows: usize, dim: usize) -> Vec<f64> {
    (0..rows * dim)
        .map(|i| rng.normal(RngPath::new(level, (i / dim) as u32, 0, (i % dim) as u32)))
        .collect()
}

/// Draw `z_T ~ N(0, I)` and run the full reverse chain.
#[allow(clippy::too_many_arguments)]
pub fn sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    condition: &P::Condition,
    rows: usize,
    dim: usize,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    rng: &RngStream,
    level: u32,
) -> Result<Vec<f64>> {
    let z = initial_noise(rng, level, rows, dim);
    sample_from(predictor, condition, z, rows, sched, sampler, rng, level)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns the exact noise that maps a fixed target onto `z_t`.
    struct ExactNoise<'a> {
        target: &'a [f64],
        sched: &'a NoiseSchedule,
    }

    impl NoisePredictor for ExactNoise<'_> {
        type Condition = ();
        fn predict(&self, z_t: &[f64], t: usize, _: &(), _rows: usize) -> Result<Vec<f64>> {
            let ab = self.sched.alpha_bar(t);
            Ok(z_t
                .iter()
                .zip(self.target)
                .map(|(z, s)| (z - ab.sqrt() * s) / (1.0 - ab).sqrt())
                .collect())
        }
    }

    struct Zero;
    impl NoisePredictor for Zero {
        type Condition = ();
        fn predict(&self, z_t: &[f64], _: usize, _: &(), _: usize) -> Result<Vec<f64>> {
            Ok(vec![0.0; z_t.len()])
        }
    }

    fn randn(seed: u64, n: usize) -> Vec<f64> {
        RngStream::new(seed).normals(0, 0, 0, n)
    }

    #[test]
    fn single_step_schedule() {
        let s = make_linear_schedule(1, 0.01, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 0.01);
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn linear_schedule_laws() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        // direct product accumulation oracle
        let mut prod = 1.0;
        for t in 1..=100 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 99.0;
            prod *= 1.0 - beta;
            assert!((s.alpha_bar(t) - prod).abs() <= 1e-15);
            assert_eq!(s.alpha_bar(t), s.alpha(t) * s.alpha_bar(t - 1));
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert_eq!(s.sigma(t), s.beta(t).sqrt());
            }
        }
        assert!(s.alpha_bar(100) < s.alpha_bar(1));
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn schedule_errors() {
        assert!(matches!(make_linear_schedule(10, 0.02, 0.01), Err(Error::Config(_))));
        assert!(make_linear_schedule(10, 0.0, 0.01).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let z = LatentGrid::new(4, 4, randn(1, 16)).unwrap();
        let e = LatentGrid::new(4, 4, randn(2, 16)).unwrap();
        assert_eq!(forward_noise(&z, 0, &e, &s).unwrap(), z);
        let zero = LatentGrid::zeros(4, 4);
        let out = forward_noise(&zero, 50, &e, &s).unwrap();
        for (o, ev) in out.values().iter().zip(e.values()) {
            assert_eq!(*o, (1.0 - s.alpha_bar(50)).sqrt() * ev);
        }
        let out = forward_noise(&z, 100, &e, &s).unwrap();
        let ab = s.alpha_bar(100);
        for i in 0..16 {
            let want = ab.sqrt() * z.values()[i] + (1.0 - ab).sqrt() * e.values()[i];
            assert!((out.values()[i] - want).abs() <= 1e-15);
        }
        let bad = LatentGrid::zeros(2, 2);
        assert!(matches!(forward_noise(&z, 1, &bad, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_cases() {
        let a = randn(3, 64);
        assert_eq!(diffusion_loss(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        assert!((diffusion_loss(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = randn(4, 64);
        // two-pass oracle: differences first, then squares summed
        let diffs: Vec<f64> = a.iter().zip(&c).map(|(x, y)| x - y).collect();
        let oracle = diffs.iter().map(|d| d * d).sum::<f64>() / 64.0;
        let got = diffusion_loss(&a, &c).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle);
        assert!(diffusion_loss(&a, &c[..10]).is_err());
    }

    #[test]
    fn reverse_step_exact_noise_at_t1() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let zs = randn(5, 8);
        let e = randn(6, 8);
        let mut z1 = vec![0.0; 8];
        forward_noise_into(&zs, 1, &e, &s, &mut z1).unwrap();
        reverse_step_into(&mut z1, 1, &e, &s, 0.0, &[0.0; 8]).unwrap();
        for (a, b) in z1.iter().zip(&zs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_step_zero_eps_is_rescale() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let z = randn(7, 8);
        let mut out = z.clone();
        reverse_step_into(&mut out, 40, &[0.0; 8], &s, 0.0, &randn(8, 8)).unwrap();
        for (o, v) in out.iter().zip(&z) {
            assert_eq!(*o, v * (1.0 / s.alpha(40).sqrt()));
        }
        let mut again = z.clone();
        reverse_step_into(&mut again, 40, &[0.0; 8], &s, 0.0, &randn(8, 8)).unwrap();
        assert_eq!(out, again);
        assert!(matches!(
            reverse_step_into(&mut again, 0, &[0.0; 8], &s, 0.0, &[0.0; 8]),
            Err(Error::Timestep { .. })
        ));
        assert!(reverse_step_into(&mut again, 101, &[0.0; 8], &s, 0.0, &[0.0; 8]).is_err());
    }

    #[test]
    fn exact_noise_chain_collapses() {
        for steps in [10, 100, 1000] {
            let s = make_linear_schedule(steps, 1e-4, 0.02).unwrap();
            let target = randn(9, 12);
            let p = ExactNoise { target: &target, sched: &s };
            let rng = RngStream::new(1);
            let out = sample(&p, &(), 3, 4, &s, &SamplerConfig::with_temperature(0.0), &rng, 0).unwrap();
            let err = out.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-9, "T={steps}: {err}");
        }
    }

    #[test]
    fn zero_steps_returns_initial_draw() {
        let s = make_linear_schedule(20, 1e-4, 0.02).unwrap();
        let rng = RngStream::new(2);
        let cfg = SamplerConfig { temperature: 1.0, steps: Some(0) };
        let out = sample(&Zero, &(), 2, 3, &s, &cfg, &rng, 1).unwrap();
        assert_eq!(out, initial_noise(&rng, 1, 2, 3));
        let strided = SamplerConfig { temperature: 1.0, steps: Some(5) };
        assert!(matches!(sample(&Zero, &(), 2, 3, &s, &strided, &rng, 1), Err(Error::Config(_))));
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let s = make_linear_schedule(20, 1e-4, 0.02).unwrap();
        let cfg = SamplerConfig::with_temperature(1.0);
        let a = sample(&Zero, &(), 4, 2, &s, &cfg, &RngStream::new(3), 0).unwrap();
        let b = sample(&Zero, &(), 4, 2, &s, &cfg, &RngStream::new(3), 0).unwrap();
        assert_eq!(a, b);
        let c = sample(&Zero, &(), 4, 2, &s, &cfg, &RngStream::new(4), 0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn temperature_only_touches_stochastic_term() {
        // With a single step sigma_1 = 0, so temperature must not matter.
        let s = make_linear_schedule(1, 0.01, 0.01).unwrap();
        let rng = RngStream::new(5);
        let hot = sample(&Zero, &(), 1, 4, &s, &SamplerConfig::with_temperature(3.0), &rng, 0).unwrap();
        let cold = sample(&Zero, &(), 1, 4, &s, &SamplerConfig::with_temperature(0.0), &rng, 0).unwrap();
        assert_eq!(hot, cold);
    }

    struct BadShape;
    impl NoisePredictor for BadShape {
        type Condition = ();
        fn predict(&self, _: &[f64], _: usize, _: &(), _: usize) -> Result<Vec<f64>> {
            Ok(vec![0.0; 1])
        }
    }

    #[test]
    fn predictor_shape_checked() {
        let s = make_linear_schedule(5, 1e-4, 0.02).unwrap();
        let r = sample(&BadShape, &(), 2, 2, &s, &SamplerConfig::default(), &RngStream::new(0), 0);
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
