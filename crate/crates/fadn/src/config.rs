//! Run configuration: plain `key=value` lines, `#` starts a comment.
//!
//! Every key is optional; missing keys keep their defaults. [`RunConfig::to_text`]
//! writes every key in a fixed order and [`RunConfig::hash`] is derived from
//! that text, so two configs with the same effective values share a hash.

use std::fmt::Write as _;
use std::path::Path;

use fadn_core::bench::SceneSpec;
use fadn_core::fractal::{FractalConfig, TrainingMode};
use fadn_core::nnet::Activation;
use fadn_core::urca::{RecursiveSource, UrcaConfig};
use fadn_core::ScaleConfig;
use sha2::{Digest, Sha256};

use crate::error::{io_err, FadnError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub scenes: usize,
    pub steps: u64,
    pub batch: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    /// `None` uses 5% of `steps`.
    pub warmup_steps: Option<u64>,
    /// Validation cadence in steps; 0 validates only before and after training.
    pub validate_every: u64,
    pub validation_scenes: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            scenes: 512,
            steps: 1200,
            batch: 1,
            base_lr: 1e-3,
            final_lr: 5e-7,
            warmup_steps: None,
            validate_every: 0,
            validation_scenes: 10,
        }
    }
}

impl TrainParams {
    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.steps / 20)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub test_scenes: usize,
    /// Temperature for single-sample evaluation.
    pub tau: f64,
    /// Temperature for multi-sample runs.
    pub multi_tau: f64,
    pub samples: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Exceedance threshold on normalized uncertainty.
    pub u0: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            test_scenes: 10,
            tau: 0.0,
            multi_tau: 1.0,
            samples: vec![1, 8],
            seeds: vec![0, 1, 2],
            u0: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scale_name: String,
    pub model: FractalConfig,
    pub urca: UrcaConfig,
    pub train: TrainParams,
    /// Scene template; `seed` is replaced per scene and `resolution` follows the plan.
    pub scene: SceneSpec,
    pub eval: EvalParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scale_name: "desk".into(),
            model: FractalConfig::default(),
            // residual scale of a desk-trained model
            urca: UrcaConfig { tau_s: 0.5, tau_r: 0.5, ..UrcaConfig::default() },
            train: TrainParams::default(),
            scene: SceneSpec::default(),
            eval: EvalParams::default(),
        }
    }
}

fn cfg_err(line: usize, msg: impl std::fmt::Display) -> FadnError {
    FadnError::Config(format!("line {line}: {msg}"))
}

fn parse<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| cfg_err(line, format!("bad value {v:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(line, key, s.trim())).collect()
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(cfg_err(line, format!("bad boolean {v:?} for {key}"))),
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}


/// Applies one model key; returns `false` when `k` is not a model key.
pub(crate) fn set_model_key(m: &mut FractalConfig, n: usize, k: &str, v: &str) -> Result<bool> {
    match k {
        "hidden" => m.hidden = parse_list(n, k, v)?,
        "activation" => {
            m.activation = match v {
                "silu" => Activation::Silu,
                "tanh" => Activation::Tanh,
                _ => return Err(cfg_err(n, format!("unknown activation {v:?}"))),
            }
        }
        "time_embed_dim" => m.time_embed_dim = parse(n, k, v)?,
        "feature_dim" => m.feature_dim = parse(n, k, v)?,
        "timestep_reuse" => m.timestep_reuse = parse(n, k, v)?,
        "min_level_rows" => m.min_level_rows = parse(n, k, v)?,
        "prior_std" => m.prior_std = parse(n, k, v)?,
        "diffusion_steps" => m.diffusion_steps = parse(n, k, v)?,
        "beta_start" => m.beta_start = parse(n, k, v)?,
        "beta_end" => m.beta_end = parse(n, k, v)?,
        "share_weights" => m.share_weights = parse_bool(n, k, v)?,
        "freeze_features" => m.freeze_features = parse_bool(n, k, v)?,
        "training_mode" => {
            m.training_mode = match v {
                "teacher" => TrainingMode::TeacherForcing,
                "self" => TrainingMode::SelfConditioning,
                _ => return Err(cfg_err(n, format!("unknown training mode {v:?}"))),
            }
        }
        "adamw_beta1" => m.adamw.beta1 = parse(n, k, v)?,
        "adamw_beta2" => m.adamw.beta2 = parse(n, k, v)?,
        "adamw_eps" => m.adamw.eps = parse(n, k, v)?,
        "weight_decay" => m.adamw.weight_decay = parse(n, k, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Model keys in canonical order (the scale is written by the caller).
pub(crate) fn model_text(m: &FractalConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k}={v}");
    };
        kv("hidden", join(&m.hidden));
        kv(
            "activation",
            match m.activation {
                Activation::Silu => "silu",
                Activation::Tanh => "tanh",
            }
            .into(),
        );
        kv("time_embed_dim", m.time_embed_dim.to_string());
        kv("feature_dim", m.feature_dim.to_string());
        kv("timestep_reuse", m.timestep_reuse.to_string());
    kv("min_level_rows", m.min_level_rows.to_string());
    kv("prior_std", m.prior_std.to_string());
        kv("diffusion_steps", m.diffusion_steps.to_string());
        kv("beta_start", m.beta_start.to_string());
        kv("beta_end", m.beta_end.to_string());
        kv("share_weights", m.share_weights.to_string());
        kv("freeze_features", m.freeze_features.to_string());
        kv(
            "training_mode",
            match m.training_mode {
                TrainingMode::TeacherForcing => "teacher",
                TrainingMode::SelfConditioning => "self",
            }
            .into(),
        );
        kv("adamw_beta1", m.adamw.beta1.to_string());
        kv("adamw_beta2", m.adamw.beta2.to_string());
        kv("adamw_eps", m.adamw.eps.to_string());
        kv("weight_decay", m.adamw.weight_decay.to_string());
    s
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut d_range = (c.model.scale.d_min(), c.model.scale.d_max());
        for (idx, raw) in text.lines().enumerate() {
            let n = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| cfg_err(n, format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "seed" => c.seed = parse(n, k, v)?,
                "scale" => c.scale_name = v.to_string(),
                "d_min" => d_range.0 = parse(n, k, v)?,
                "d_max" => d_range.1 = parse(n, k, v)?,
                "urca_lambda" => c.urca.lambda = parse(n, k, v)?,
                "urca_gamma" => c.urca.gamma = parse(n, k, v)?,
                "urca_tau_s" => c.urca.tau_s = parse(n, k, v)?,
                "urca_tau_r" => c.urca.tau_r = parse(n, k, v)?,
                "urca_delta_stab" => c.urca.delta_stab = parse(n, k, v)?,
                "urca_eps_c" => c.urca.eps_c = parse(n, k, v)?,
                "urca_tolerance" => c.urca.tolerance = parse(n, k, v)?,
                "urca_max_iterations" => c.urca.max_iterations = parse(n, k, v)?,
                "urca_recursive" => {
                    c.urca.recursive = match v {
                        "first" => RecursiveSource::FirstSample,
                        "averaged" => RecursiveSource::Averaged,
                        _ => return Err(cfg_err(n, format!("unknown recursive source {v:?}"))),
                    }
                }
                "urca_level_weights" => {
                    c.urca.level_weights = if v == "uniform" { None } else { Some(parse_list(n, k, v)?) }
                }
                "train_scenes" => c.train.scenes = parse(n, k, v)?,
                "train_steps" => c.train.steps = parse(n, k, v)?,
                "batch_size" => c.train.batch = parse(n, k, v)?,
                "base_lr" => c.train.base_lr = parse(n, k, v)?,
                "final_lr" => c.train.final_lr = parse(n, k, v)?,
                "warmup_steps" => c.train.warmup_steps = if v == "auto" { None } else { Some(parse(n, k, v)?) },
                "validate_every" => c.train.validate_every = parse(n, k, v)?,
                "validation_scenes" => c.train.validation_scenes = parse(n, k, v)?,
                "scene_objects_min" => c.scene.objects.0 = parse(n, k, v)?,
                "scene_objects_max" => c.scene.objects.1 = parse(n, k, v)?,
                "scene_depth_min" => c.scene.depth_range.0 = parse(n, k, v)?,
                "scene_depth_max" => c.scene.depth_range.1 = parse(n, k, v)?,
                "scene_noise" => c.scene.noise = parse(n, k, v)?,
                "test_scenes" => c.eval.test_scenes = parse(n, k, v)?,
                "eval_tau" => c.eval.tau = parse(n, k, v)?,
                "multi_tau" => c.eval.multi_tau = parse(n, k, v)?,
                "samples" => c.eval.samples = parse_list(n, k, v)?,
                "sample_seeds" => c.eval.seeds = parse_list(n, k, v)?,
                "u0" => c.eval.u0 = parse(n, k, v)?,
                _ => {
                    if !set_model_key(&mut c.model, n, k, v)? {
                        return Err(cfg_err(n, format!("unknown key {k:?}")));
                    }
                }
            }
        }
        c.model.scale = ScaleConfig::named(&c.scale_name)?.with_depth_range(d_range.0, d_range.1)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.urca.validate()?;
        self.scene_spec(0).validate(self.model.scale.d_min(), self.model.scale.d_max())?;
        let t = &self.train;
        if t.scenes == 0 || t.batch == 0 || t.validation_scenes == 0 {
            return Err(FadnError::Config("train_scenes, batch_size and validation_scenes must be positive".into()));
        }
        if !(t.base_lr > 0.0 && t.final_lr >= 0.0 && t.final_lr <= t.base_lr) {
            return Err(FadnError::Config("need base_lr > 0 and 0 <= final_lr <= base_lr".into()));
        }
        let e = &self.eval;
        if e.test_scenes == 0 || e.seeds.is_empty() || e.samples.is_empty() || e.samples.contains(&0) {
            return Err(FadnError::Config("test_scenes, sample_seeds and samples (all >= 1) must be non-empty".into()));
        }
        if !(e.tau >= 0.0 && e.multi_tau >= 0.0 && e.u0.is_finite()) {
            return Err(FadnError::Config("temperatures must be >= 0 and u0 finite".into()));
        }
        Ok(())
    }

    /// Scene spec for one scene seed at the model's output resolution.
    pub fn scene_spec(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            resolution: self.model.scale.output_resolution(),
            ..self.scene.clone()
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let u = &self.urca;
        let t = &self.train;
        let e = &self.eval;
        let mut s = format!(
            "seed={}\nscale={}\nd_min={}\nd_max={}\n",
            self.seed,
            self.scale_name,
            m.scale.d_min(),
            m.scale.d_max()
        );
        s.push_str(&model_text(m));
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("urca_lambda", u.lambda.to_string());
        kv("urca_gamma", u.gamma.to_string());
        kv("urca_tau_s", u.tau_s.to_string());
        kv("urca_tau_r", u.tau_r.to_string());
        kv("urca_delta_stab", u.delta_stab.to_string());
        kv("urca_eps_c", u.eps_c.to_string());
        kv("urca_tolerance", u.tolerance.to_string());
        kv("urca_max_iterations", u.max_iterations.to_string());
        kv(
            "urca_recursive",
            match u.recursive {
                RecursiveSource::FirstSample => "first",
                RecursiveSource::Averaged => "averaged",
            }
            .into(),
        );
        kv(
            "urca_level_weights",
            u.level_weights.as_deref().map_or_else(|| "uniform".into(), join),
        );
        kv("train_scenes", t.scenes.to_string());
        kv("train_steps", t.steps.to_string());
        kv("batch_size", t.batch.to_string());
        kv("base_lr", t.base_lr.to_string());
        kv("final_lr", t.final_lr.to_string());
        kv("warmup_steps", t.warmup_steps.map_or_else(|| "auto".into(), |w| w.to_string()));
        kv("validate_every", t.validate_every.to_string());
        kv("validation_scenes", t.validation_scenes.to_string());
        kv("scene_objects_min", self.scene.objects.0.to_string());
        kv("scene_objects_max", self.scene.objects.1.to_string());
        kv("scene_depth_min", self.scene.depth_range.0.to_string());
        kv("scene_depth_max", self.scene.depth_range.1.to_string());
        kv("scene_noise", self.scene.noise.to_string());
        kv("test_scenes", e.test_scenes.to_string());
        kv("eval_tau", e.tau.to_string());
        kv("multi_tau", e.multi_tau.to_string());
        kv("samples", join(&e.samples));
        kv("sample_seeds", join(&e.seeds));
        kv("u0", e.u0.to_string());
        s
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
