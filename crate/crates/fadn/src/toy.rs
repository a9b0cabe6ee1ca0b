//! Two-cluster conditional diffusion on a 2-D latent.
//!
//! A small MLP learns the noise of a Gaussian mixture whose component is
//! given as a one-hot condition; sampling each component should reproduce its
//! mean and spread.

use fadn_core::diffusion::{make_linear_schedule, sample, NoisePredictor, NoiseSchedule, SamplerConfig};
use fadn_core::nnet::{adamw_step, lr_at, time_embed, Activation, AdamWConfig, AdamWState, LrSchedule, Mlp};
use fadn_core::{RngPath, RngStream};

use crate::error::Result;

const DIM: usize = 2;
const EMBED: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub base_lr: f64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub means: [[f64; DIM]; 2],
    pub stds: [[f64; DIM]; 2],
    /// Samples drawn per cluster for the statistics.
    pub samples: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 6000,
            batch: 64,
            hidden: vec![64, 64],
            base_lr: 2e-3,
            diffusion_steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            means: [[0.6, -0.4], [-0.5, 0.5]],
            stds: [[0.1, 0.1], [0.2, 0.15]],
            samples: 2000,
        }
    }
}

/// Per-cluster, per-dimension statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyRow {
    pub cluster: usize,
    pub dim: usize,
    pub data_mean: f64,
    pub sample_mean: f64,
    pub data_std: f64,
    pub sample_std: f64,
}

impl ToyRow {
    pub fn mean_error(&self) -> f64 {
        (self.sample_mean - self.data_mean).abs()
    }

    pub fn std_error(&self) -> f64 {
        (self.sample_std - self.data_std).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyReport {
    pub rows: Vec<ToyRow>,
    pub final_loss: f64,
}

struct Toy<'a> {
    mlp: &'a Mlp,
    embeds: &'a [Vec<f64>],
}

impl Toy<'_> {
    fn input(&self, z: &[f64], ts: &[usize], clusters: &[usize]) -> Vec<f64> {
        let width = DIM + EMBED + 2;
        let mut x = vec![0.0; clusters.len() * width];
        for (r, row) in x.chunks_exact_mut(width).enumerate() {
            row[..DIM].copy_from_slice(&z[r * DIM..(r + 1) * DIM]);
            row[DIM..DIM + EMBED].copy_from_slice(&self.embeds[ts[r]]);
            row[DIM + EMBED + clusters[r]] = 1.0;
        }
        x
    }
}

impl NoisePredictor for Toy<'_> {
    type Condition = usize;

    fn predict(&self, z_t: &[f64], t: usize, cluster: &usize, rows: usize) -> fadn_core::Result<Vec<f64>> {
        let x = self.input(z_t, &vec![t; rows], &vec![*cluster; rows]);
        self.mlp.infer(&x, rows)
    }
}

fn stats(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn train(cfg: &ToyConfig, sched: &NoiseSchedule, embeds: &[Vec<f64>]) -> Result<(Mlp, f64)> {
    let rng = RngStream::new(cfg.seed);
    let mut dims = vec![DIM + EMBED + 2];
    dims.extend(&cfg.hidden);
    dims.push(DIM);
    let mut mlp = Mlp::init(&dims, Activation::Silu, &rng.derive(1))?;
    let mut opt = AdamWState::new(mlp.param_count());
    let adam = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    let lr_sched = LrSchedule { base_lr: cfg.base_lr, warmup_steps: cfg.steps / 50, total_steps: cfg.steps, final_lr: 1e-5 };
    let clusters: Vec<usize> = (0..cfg.batch).map(|b| b % 2).collect();
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let r = rng.derive(2).derive(step);
        let mut z = vec![0.0; cfg.batch * DIM];
        let mut eps = vec![0.0; cfg.batch * DIM];
        let mut ts = vec![0usize; cfg.batch];
        for b in 0..cfg.batch {
            let c = clusters[b];
            let t = 1 + r.below(RngPath::new(0, b as u32, 0, 0), cfg.diffusion_steps as u64) as usize;
            let ab = sched.alpha_bar(t);
            for d in 0..DIM {
                let x0 = cfg.means[c][d] + cfg.stds[c][d] * r.normal(RngPath::new(1, b as u32, 0, d as u32));
                let e = r.normal(RngPath::new(2, b as u32, 0, d as u32));
                z[b * DIM + d] = ab.sqrt() * x0 + (1.0 - ab).sqrt() * e;
                eps[b * DIM + d] = e;
            }
            ts[b] = t;
        }
        let toy = Toy { mlp: &mlp, embeds };
        let x = toy.input(&z, &ts, &clusters);
        let (pred, cache) = mlp.forward(&x, cfg.batch)?;
        let n = pred.len() as f64;
        last = pred.iter().zip(&eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>() / n;
        let d_out: Vec<f64> = pred.iter().zip(&eps).map(|(p, e)| 2.0 * (p - e) / n).collect();
        let (grads, _) = mlp.backward(&cache, &d_out)?;
        adamw_step(mlp.params_mut(), &grads, &mut opt, lr_at(step, &lr_sched), &adam)?;
    }
    Ok((mlp, last))
}

pub fn run_toy(cfg: &ToyConfig) -> Result<ToyReport> {
    let sched = make_linear_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
    let embeds: Vec<Vec<f64>> =
        (0..=cfg.diffusion_steps).map(|t| time_embed(t, EMBED)).collect::<fadn_core::Result<_>>()?;
    let (mlp, final_loss) = train(cfg, &sched, &embeds)?;
    let toy = Toy { mlp: &mlp, embeds: &embeds };
    let rng = RngStream::new(cfg.seed).derive(3);
    let mut rows = Vec::new();
    for c in 0..2 {
        let z = sample(&toy, &c, cfg.samples, DIM, &sched, &SamplerConfig::with_temperature(1.0), &rng, c as u32)?;
        for d in 0..DIM {
            let (m, s) = stats(z.iter().skip(d).step_by(DIM).copied());
            rows.push(ToyRow {
                cluster: c,
                dim: d,
                data_mean: cfg.means[c][d],
                sample_mean: m,
                data_std: cfg.stds[c][d],
                sample_std: s,
            });
        }
    }
    Ok(ToyReport { rows, final_loss })
}
