//! Coarse-to-fine fractal generator.
//!
//! Level `i` turns the previous level's latent (upsampled to its own
//! resolution, or zeros at the first level) plus image features into a new
//! latent by running a conditional reverse diffusion chain over its tokens.
//! Training is teacher-forced by default: each level is conditioned on the
//! encoded ground truth of the level above it.
//!
//! Predictor input per token row:
//!
//! ```text
//! z_t (token_dim) | time embedding (E) | condition (F + 1) | state (token_dim, or 5 * token_dim with context)
//! ```
//!
//! The 4-neighborhood patch context is used at the finest level only.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use alloc::format;

use crate::diffusion::{self, make_linear_schedule, NoisePredictor, NoiseSchedule, SamplerConfig};
use crate::error::{bail, Result};
use crate::grid::{DepthMap, ImageRGB, LatentGrid};
use crate::math;
use crate::nnet::{adamw_step, time_embed, Activation, AdamWConfig, AdamWState, Mlp};
use crate::normalize::LogDepth;
use crate::patches::{grid_to_tokens, split_patches_with_context, tokens_to_grid};
use crate::plan::{build_schedule_plan, ScaleConfig, SchedulePlan};
use crate::resample::{downsample_mean, upsample_bilinear};
use crate::rng::{RngPath, RngStream};
use crate::vcfr::{
    append_guidance_token, refine_condition, refine_condition_backward, ConditionVector, FeatureExtractor, Gate,
    VisualFeatures,
};

/// What coarser-level latent conditions each level during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainingMode {
    /// Encoded ground truth of the coarser level.
    #[default]
    TeacherForcing,
    /// Latents sampled from the current model (no gradient through them).
    SelfConditioning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractalConfig {
    pub scale: ScaleConfig,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
    pub feature_dim: usize,
    /// Timestep draws per condition per training example.
    pub timestep_reuse: usize,
    /// Coarse levels with few tokens take extra timestep draws until they
    /// reach this many rows per example.
    pub min_level_rows: usize,
    /// Spread of a token around its state, in latent units. When positive,
    /// the network predicts only what the Gaussian prior centered on the
    /// state leaves unexplained:
    /// `eps = s (z_t - a state) / v + a prior_std / sqrt(v) * net`, with
    /// `a = sqrt(alpha_bar)`, `s = sqrt(1 - alpha_bar)`, `v = a^2 prior_std^2 + s^2`.
    /// Zero makes the network output the noise directly.
    pub prior_std: f64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// One predictor per distinct input/output shape instead of per level.
    pub share_weights: bool,
    /// Keep the random feature extractor fixed.
    pub freeze_features: bool,
    pub training_mode: TrainingMode,
    pub adamw: AdamWConfig,
}

impl Default for FractalConfig {
    fn default() -> Self {
        Self {
            scale: ScaleConfig::desk(),
            hidden: vec![256, 256, 256],
            activation: Activation::Silu,
            time_embed_dim: 16,
            feature_dim: 16,
            timestep_reuse: 4,
            min_level_rows: 64,
            prior_std: 0.1,
            diffusion_steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            share_weights: false,
            freeze_features: false,
            training_mode: TrainingMode::TeacherForcing,
            adamw: AdamWConfig::default(),
        }
    }
}

impl FractalConfig {
    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            bail!(Config, "hidden widths must be non-empty and positive: {:?}", self.hidden);
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            bail!(Config, "time embedding dimension must be even and positive, got {}", self.time_embed_dim);
        }
        if self.feature_dim == 0 {
            bail!(Config, "feature dimension must be positive");
        }
        if self.timestep_reuse == 0 {
            bail!(Config, "timestep reuse must be at least 1");
        }
        if !(self.prior_std >= 0.0 && self.prior_std.is_finite()) {
            bail!(Config, "prior spread must be finite and non-negative, got {}", self.prior_std);
        }
        make_linear_schedule(self.diffusion_steps, self.beta_start, self.beta_end)?;
        Ok(())
    }
}

/// Everything a level's denoiser sees besides `z_t` and `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelInputs {
    pub level: usize,
    pub tokens: usize,
    pub token_dim: usize,
    /// Depth state at this level's resolution.
    pub state: LatentGrid,
    /// Per-token condition: refined features plus the guidance scalar.
    pub cond: ConditionVector,
    /// Per-token state values (with neighbor context at the finest level).
    pub state_tokens: Vec<f64>,
    pub state_dim: usize,
}

/// Noise prediction for one level.
///
/// `z_t` holds `ts.len()` rows of `inputs.token_dim` values; row `r` belongs
/// to token `r % inputs.tokens` and is at timestep `ts[r]`.
pub trait LevelDenoiser {
    fn denoise(&self, inputs: &LevelInputs, z_t: &[f64], ts: &[usize]) -> Result<Vec<f64>>;
}

/// Hooks into [`FractalModel::generate_with`].
pub trait GenerationObserver {
    fn level_started(&mut self, _inputs: &LevelInputs) {}
    fn level_finished(&mut self, _level: usize, _latent: &LatentGrid) {}
}

impl GenerationObserver for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    /// Sampled latent of every level, coarse to fine.
    pub latents: Vec<LatentGrid>,
    /// Every level decoded and upsampled to the output resolution.
    pub level_depths: Vec<DepthMap>,
    pub depth: DepthMap,
}

/// Gradients for every parameter group, in [`FractalModel::param_groups`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub groups: Vec<Vec<f64>>,
}

impl ModelGrads {
    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.groups.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().flatten().all(|g| g.is_finite())
    }
}

/// A named, flat parameter block.
#[derive(Debug, Clone, Copy)]
pub struct ParamGroup<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

/// Per-level target latents: `downsample_mean(log_normalize(gt))`.
pub fn encode_targets(gt: &DepthMap, plan: &SchedulePlan, norm: &LogDepth) -> Result<Vec<LatentGrid>> {
    let res = plan.finest().resolution;
    if gt.dims() != (res, res) {
        bail!(Shape, "depth map is {}x{}, finest level is {res}x{res}", gt.width(), gt.height());
    }
    let fine = norm.normalize(gt);
    plan.levels()
        .iter()
        .map(|l| if l.resolution == res { Ok(fine.clone()) } else { downsample_mean(&fine, (l.resolution, l.resolution)) })
        .collect()
}

/// Decode a level latent and upsample it to the output resolution.
pub fn decode_level_depth(latent: &LatentGrid, plan: &SchedulePlan, level: usize, norm: &LogDepth) -> Result<DepthMap> {
    let l = plan.level(level)?;
    if latent.dims() != (l.resolution, l.resolution) {
        bail!(Shape, "level {level} latent is {}x{}, expected {r}x{r}", latent.width(), latent.height(), r = l.resolution);
    }
    let res = plan.finest().resolution;
    Ok(norm.denormalize(&upsample_bilinear(latent, (res, res))?))
}

/// Denoiser returning the exact noise that separates `z_t` from fixed
/// per-level target tokens. A verification stand-in for a perfect model.
#[derive(Debug, Clone)]
pub struct TargetOracle {
    targets: Vec<Vec<f64>>,
    alpha_bars: Vec<f64>,
}

impl TargetOracle {
    /// `targets[i]` is level `i`'s target grid.
    pub fn new(targets: &[LatentGrid], plan: &SchedulePlan, sched: &NoiseSchedule) -> Result<Self> {
        if targets.len() != plan.len() {
            bail!(Shape, "{} targets for {} levels", targets.len(), plan.len());
        }
        let targets = targets
            .iter()
            .zip(plan.levels())
            .map(|(g, l)| grid_to_tokens(g, l.patch))
            .collect::<Result<_>>()?;
        let alpha_bars = (0..=sched.len()).map(|t| sched.alpha_bar(t)).collect();
        Ok(Self { targets, alpha_bars })
    }
}

impl LevelDenoiser for TargetOracle {
    fn denoise(&self, inputs: &LevelInputs, z_t: &[f64], ts: &[usize]) -> Result<Vec<f64>> {
        let target = &self.targets[inputs.level];
        let d = inputs.token_dim;
        let mut out = Vec::with_capacity(z_t.len());
        for (r, &t) in ts.iter().enumerate() {
            let ab = self.alpha_bars[t];
            let tok = r % inputs.tokens;
            for j in 0..d {
                out.push((z_t[r * d + j] - math::sqrt(ab) * target[tok * d + j]) / math::sqrt(1.0 - ab));
            }
        }
        Ok(out)
    }
}

struct Chain<'a, D: ?Sized>(&'a D);

impl<D: LevelDenoiser + ?Sized> NoisePredictor for Chain<'_, D> {
    type Condition = LevelInputs;

    fn predict(&self, z_t: &[f64], t: usize, inputs: &LevelInputs, rows: usize) -> Result<Vec<f64>> {
        self.0.denoise(inputs, z_t, &vec![t; rows])
    }
}

/// Timesteps, noise, and noised latents for one level of one training example.
struct LevelBatch {
    ts: Vec<usize>,
    eps: Vec<f64>,
    z_t: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FractalModel {
    config: FractalConfig,
    plan: SchedulePlan,
    schedule: NoiseSchedule,
    norm: LogDepth,
    features: FeatureExtractor,
    gates: Vec<Gate>,
    mlps: Vec<Mlp>,
    mlp_index: Vec<usize>,
    group_names: Vec<String>,
    opt: Vec<AdamWState>,
    step: u64,
    /// Row `t` holds the embedding of timestep `t`.
    embeddings: Vec<f64>,
}

impl FractalModel {
    /// Fresh model; `rng` seeds all initial weights.
    pub fn new(config: FractalConfig, rng: &RngStream) -> Result<Self> {
        config.validate()?;
        let plan = build_schedule_plan(&config.scale)?;
        let dims = Self::mlp_dims(&config, &plan);
        let (mlp_index, shapes) = Self::mlp_layout(&config, &dims);
        let features = FeatureExtractor::init(config.feature_dim, &rng.derive(1))?;
        let mlps = shapes
            .iter()
            .enumerate()
            .map(|(j, d)| Mlp::init(d, config.activation, &rng.derive(100 + j as u64)))
            .collect::<Result<Vec<_>>>()?;
        let gates = vec![Gate::zeros(config.feature_dim); plan.len()];
        Self::assemble(config, plan, features, gates, mlps, mlp_index, 0)
    }

    /// Rebuild from parameter groups in [`FractalModel::param_groups`] order.
    pub fn from_parts(config: FractalConfig, groups: Vec<Vec<f64>>, step: u64) -> Result<Self> {
        config.validate()?;
        let plan = build_schedule_plan(&config.scale)?;
        let dims = Self::mlp_dims(&config, &plan);
        let (mlp_index, shapes) = Self::mlp_layout(&config, &dims);
        let expected = 1 + plan.len() + shapes.len();
        if groups.len() != expected {
            bail!(Shape, "expected {expected} parameter groups, got {}", groups.len());
        }
        let mut it = groups.into_iter();
        let features = FeatureExtractor::from_params(config.feature_dim, it.next().unwrap_or_default())?;
        let mut gates = Vec::with_capacity(plan.len());
        for i in 0..plan.len() {
            let params = it.next().unwrap_or_default();
            if params.len() != 2 * config.feature_dim {
                bail!(Shape, "gate {i} has {} values, expected {}", params.len(), 2 * config.feature_dim);
            }
            gates.push(Gate { params });
        }
        let mlps = shapes
            .iter()
            .zip(it)
            .map(|(d, p)| Mlp::from_params(d, config.activation, p))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(config, plan, features, gates, mlps, mlp_index, step)
    }

    fn assemble(
        config: FractalConfig,
        plan: SchedulePlan,
        features: FeatureExtractor,
        gates: Vec<Gate>,
        mlps: Vec<Mlp>,
        mlp_index: Vec<usize>,
        step: u64,
    ) -> Result<Self> {
        let schedule = make_linear_schedule(config.diffusion_steps, config.beta_start, config.beta_end)?;
        let norm = LogDepth::from_config(&config.scale);
        let e = config.time_embed_dim;
        let mut embeddings = vec![0.0; e];
        for t in 1..=schedule.len() {
            embeddings.extend(time_embed(t, e)?);
        }
        let mut group_names = vec!["features".to_string()];
        group_names.extend((0..plan.len()).map(|i| format!("gate.{i}")));
        group_names.extend((0..mlps.len()).map(|j| format!("mlp.{j}")));
        let mut model = Self {
            config,
            plan,
            schedule,
            norm,
            features,
            gates,
            mlps,
            mlp_index,
            group_names,
            opt: Vec::new(),
            step,
            embeddings,
        };
        model.opt = model.param_groups().iter().map(|g| AdamWState::new(g.values.len())).collect();
        Ok(model)
    }

    fn mlp_dims(config: &FractalConfig, plan: &SchedulePlan) -> Vec<Vec<usize>> {
        let last = plan.len() - 1;
        plan.levels()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let state = if i == last { 5 } else { 1 } * l.token_dim;
                let mut d = vec![l.token_dim + config.time_embed_dim + config.feature_dim + 1 + state];
                d.extend_from_slice(&config.hidden);
                d.push(l.token_dim);
                d
            })
            .collect()
    }

    fn mlp_layout(config: &FractalConfig, dims: &[Vec<usize>]) -> (Vec<usize>, Vec<Vec<usize>>) {
        let mut shapes: Vec<Vec<usize>> = Vec::new();
        let mut index = Vec::with_capacity(dims.len());
        for d in dims {
            match shapes.iter().position(|s| s == d).filter(|_| config.share_weights) {
                Some(j) => index.push(j),
                None => {
                    index.push(shapes.len());
                    shapes.push(d.clone());
                }
            }
        }
        (index, shapes)
    }

    pub fn config(&self) -> &FractalConfig {
        &self.config
    }

    pub fn plan(&self) -> &SchedulePlan {
        &self.plan
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn normalizer(&self) -> &LogDepth {
        &self.norm
    }

    pub fn features(&self) -> &FeatureExtractor {
        &self.features
    }

    /// Index of the predictor used by each level.
    pub fn mlp_index(&self) -> &[usize] {
        &self.mlp_index
    }

    pub fn mlp(&self, level: usize) -> &Mlp {
        &self.mlps[self.mlp_index[level]]
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Features, then one gate per level, then the predictors.
    pub fn param_groups(&self) -> Vec<ParamGroup<'_>> {
        let mut values: Vec<&[f64]> = vec![self.features.params()];
        values.extend(self.gates.iter().map(|g| g.params.as_slice()));
        values.extend(self.mlps.iter().map(|m| m.params()));
        self.group_names.iter().zip(values).map(|(n, v)| ParamGroup { name: n, values: v }).collect()
    }

    /// Layer widths of every predictor, in group order.
    pub fn mlp_shapes(&self) -> Vec<&[usize]> {
        self.mlps.iter().map(|m| m.dims()).collect()
    }

    fn group_mut(&mut self, g: usize) -> &mut [f64] {
        let l = self.gates.len();
        match g {
            0 => self.features.params_mut(),
            g if g <= l => &mut self.gates[g - 1].params,
            g => self.mlps[g - 1 - l].params_mut(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.param_groups().iter().map(|g| g.values.len()).sum()
    }

    fn embedding(&self, t: usize) -> &[f64] {
        let e = self.config.time_embed_dim;
        &self.embeddings[t * e..(t + 1) * e]
    }

    pub fn extract_features(&self, image: &ImageRGB) -> Result<VisualFeatures> {
        self.features.extract(image, &self.plan)
    }

    /// Depth state of `level`: zeros at the first level, otherwise the
    /// previous level's latent upsampled to this level's resolution.
    pub fn level_state(&self, level: usize, prev: Option<&LatentGrid>) -> Result<LatentGrid> {
        let r = self.plan.level(level)?.resolution;
        match (level, prev) {
            (0, _) => Ok(LatentGrid::zeros(r, r)),
            (_, Some(p)) => {
                let pr = self.plan.level(level - 1)?.resolution;
                if p.dims() != (pr, pr) {
                    bail!(Shape, "level {} latent is {}x{}, expected {pr}x{pr}", level - 1, p.width(), p.height());
                }
                upsample_bilinear(p, (r, r))
            }
            (_, None) => bail!(Input, "level {level} needs the previous level's latent"),
        }
    }

    pub fn level_inputs(&self, level: usize, feats: &VisualFeatures, state: &LatentGrid) -> Result<LevelInputs> {
        let l = *self.plan.level(level)?;
        let f = feats
            .levels
            .get(level)
            .ok_or_else(|| crate::Error::Shape(format!("no features for level {level}")))?;
        let cond = refine_condition(f, state, &self.gates[level], l.patch)?;
        let cond = append_guidance_token(&cond, state, &self.norm)?;
        let (state_tokens, state_dim) = if level + 1 == self.plan.len() {
            let mut v = Vec::with_capacity(5 * state.len());
            for p in split_patches_with_context(state, l.patch)? {
                p.flatten_into(&mut v);
            }
            (v, 5 * l.token_dim)
        } else {
            (grid_to_tokens(state, l.patch)?, l.token_dim)
        };
        Ok(LevelInputs {
            level,
            tokens: l.token_count,
            token_dim: l.token_dim,
            state: state.clone(),
            cond,
            state_tokens,
            state_dim,
        })
    }

    /// Predictor input matrix, one row per entry of `ts`.
    fn predictor_input(&self, inputs: &LevelInputs, z_t: &[f64], ts: &[usize]) -> Result<Vec<f64>> {
        let d = inputs.token_dim;
        if z_t.len() != ts.len() * d || ts.len() % inputs.tokens != 0 {
            bail!(Shape, "{} latent values for {} rows of width {d}", z_t.len(), ts.len());
        }
        let s = inputs.state_dim;
        let width = d + self.config.time_embed_dim + inputs.cond.dim + s;
        let mut x = Vec::with_capacity(ts.len() * width);
        for (r, &t) in ts.iter().enumerate() {
            if t == 0 || t > self.schedule.len() {
                return Err(crate::Error::Timestep { t, max: self.schedule.len() });
            }
            let tok = r % inputs.tokens;
            x.extend_from_slice(&z_t[r * d..(r + 1) * d]);
            x.extend_from_slice(self.embedding(t));
            x.extend_from_slice(inputs.cond.token(tok));
            x.extend_from_slice(&inputs.state_tokens[tok * s..(tok + 1) * s]);
        }
        Ok(x)
    }

    /// Per-row `(skip, out)` coefficients of the prior parameterization.
    fn prior_coefficients(&self, t: usize) -> (f64, f64) {
        let p = self.config.prior_std;
        if p == 0.0 {
            return (0.0, 1.0);
        }
        let ab = self.schedule.alpha_bar(t);
        let v = ab * p * p + (1.0 - ab);
        (math::sqrt(1.0 - ab) / v, math::sqrt(ab) * p / math::sqrt(v))
    }

    /// Turns raw network output into a noise prediction, in place.
    fn apply_prior(&self, inputs: &LevelInputs, z_t: &[f64], ts: &[usize], out: &mut [f64]) {
        let (d, s) = (inputs.token_dim, inputs.state_dim);
        for (r, &t) in ts.iter().enumerate() {
            let (skip, scale) = self.prior_coefficients(t);
            let a = math::sqrt(self.schedule.alpha_bar(t));
            let tok = r % inputs.tokens;
            let mean = &inputs.state_tokens[tok * s..tok * s + d];
            for k in 0..d {
                let i = r * d + k;
                out[i] = skip * (z_t[i] - a * mean[k]) + scale * out[i];
            }
        }
    }

    fn draw_batch(&self, level: usize, target: &[f64], tokens: usize, dim: usize, rng: &RngStream) -> Result<LevelBatch> {
        let reuse = self.config.timestep_reuse.max(self.config.min_level_rows.div_ceil(tokens));
        let rows = tokens * reuse;
        let t_rng = rng.derive(1);
        let e_rng = rng.derive(2);
        let big_t = self.schedule.len() as u64;
        let mut ts = Vec::with_capacity(rows);
        let mut eps = Vec::with_capacity(rows * dim);
        for r in 0..rows {
            ts.push(t_rng.below(RngPath::new(level as u32, r as u32, 0, 0), big_t) as usize + 1);
            eps.extend(e_rng.normals(level as u32, r as u32, 0, dim));
        }
        let mut z_t = vec![0.0; rows * dim];
        for r in 0..rows {
            let tok = r % tokens;
            diffusion::forward_noise_into(
                &target[tok * dim..(tok + 1) * dim],
                ts[r],
                &eps[r * dim..(r + 1) * dim],
                &self.schedule,
                &mut z_t[r * dim..(r + 1) * dim],
            )?;
        }
        Ok(LevelBatch { ts, eps, z_t })
    }

    /// Latents each level is conditioned on during training.
    fn conditioning_latents(&self, image: &ImageRGB, targets: &[LatentGrid], rng: &RngStream) -> Result<Vec<LatentGrid>> {
        match self.config.training_mode {
            TrainingMode::TeacherForcing => Ok(targets.to_vec()),
            TrainingMode::SelfConditioning => {
                Ok(self.generate(image, &rng.derive(3), &SamplerConfig::default())?.latents)
            }
        }
    }

    /// Per-level diffusion losses of an arbitrary denoiser, using the same
    /// timestep and noise draws as [`FractalModel::compute_gradients`].
    pub fn evaluate_loss_with<D: LevelDenoiser + ?Sized>(
        &self,
        denoiser: &D,
        image: &ImageRGB,
        gt: &DepthMap,
        rng: &RngStream,
    ) -> Result<Vec<f64>> {
        let targets = encode_targets(gt, &self.plan, &self.norm)?;
        let feats = self.extract_features(image)?;
        let cond_src = self.conditioning_latents(image, &targets, rng)?;
        let mut losses = Vec::with_capacity(self.plan.len());
        for (i, l) in self.plan.levels().iter().enumerate() {
            let state = self.level_state(i, i.checked_sub(1).map(|p| &cond_src[p]))?;
            let inputs = self.level_inputs(i, &feats, &state)?;
            let target = grid_to_tokens(&targets[i], l.patch)?;
            let b = self.draw_batch(i, &target, l.token_count, l.token_dim, rng)?;
            let pred = denoiser.denoise(&inputs, &b.z_t, &b.ts)?;
            losses.push(diffusion::diffusion_loss(&b.eps, &pred)?);
        }
        Ok(losses)
    }

    /// Per-level losses and their gradients for one training example. The
    /// objective is the sum of the per-level mean squared errors.
    pub fn compute_gradients(&self, image: &ImageRGB, gt: &DepthMap, rng: &RngStream) -> Result<(Vec<f64>, ModelGrads)> {
        let targets = encode_targets(gt, &self.plan, &self.norm)?;
        let (feats, fcache) = self.features.extract_with_cache(image, &self.plan)?;
        let cond_src = self.conditioning_latents(image, &targets, rng)?;
        let mut grads = ModelGrads {
            groups: self.param_groups().iter().map(|g| vec![0.0; g.values.len()]).collect(),
        };
        let f = self.config.feature_dim;
        let e = self.config.time_embed_dim;
        let mut d_feats = Vec::with_capacity(self.plan.len());
        let mut losses = Vec::with_capacity(self.plan.len());
        for (i, l) in self.plan.levels().iter().enumerate() {
            let state = self.level_state(i, i.checked_sub(1).map(|p| &cond_src[p]))?;
            let inputs = self.level_inputs(i, &feats, &state)?;
            let target = grid_to_tokens(&targets[i], l.patch)?;
            let b = self.draw_batch(i, &target, l.token_count, l.token_dim, rng)?;
            let x = self.predictor_input(&inputs, &b.z_t, &b.ts)?;
            let rows = b.ts.len();
            let mlp = self.mlp(i);
            let (mut pred, cache) = mlp.forward(&x, rows)?;
            self.apply_prior(&inputs, &b.z_t, &b.ts, &mut pred);
            losses.push(diffusion::diffusion_loss(&b.eps, &pred)?);
            let scale = 2.0 / pred.len() as f64;
            let d = l.token_dim;
            let d_out: Vec<f64> = pred
                .iter()
                .zip(&b.eps)
                .enumerate()
                .map(|(i, (p, q))| scale * self.prior_coefficients(b.ts[i / d]).1 * (p - q))
                .collect();
            let (g, dx) = mlp.backward(&cache, &d_out)?;
            for (a, v) in grads.groups[1 + self.plan.len() + self.mlp_index[i]].iter_mut().zip(&g) {
                *a += v;
            }
            let width = x.len() / rows;
            let off = l.token_dim + e;
            let mut d_cond = vec![0.0; l.token_count * f];
            for r in 0..rows {
                let tok = r % l.token_count;
                for k in 0..f {
                    d_cond[tok * f + k] += dx[r * width + off + k];
                }
            }
            let (df, dg) = refine_condition_backward(&feats.levels[i], &state, &self.gates[i], l.patch, &d_cond)?;
            grads.groups[1 + i] = dg;
            d_feats.push(df);
        }
        if !self.config.freeze_features {
            grads.groups[0] = self.features.backward(&fcache, &d_feats)?;
        }
        Ok((losses, grads))
    }

    /// One AdamW update. Nothing changes if any gradient is non-finite.
    pub fn apply_gradients(&mut self, grads: &ModelGrads, lr: f64) -> Result<()> {
        if grads.groups.len() != self.opt.len() {
            bail!(Shape, "{} gradient groups for {} parameter groups", grads.groups.len(), self.opt.len());
        }
        if !grads.is_finite() {
            bail!(Numerics, "non-finite gradient at step {}", self.step);
        }
        let cfg = self.config.adamw;
        let mut opt = core::mem::take(&mut self.opt);
        let result = (|| {
            for (g, (grad, state)) in grads.groups.iter().zip(opt.iter_mut()).enumerate() {
                if g == 0 && self.config.freeze_features {
                    continue;
                }
                adamw_step(self.group_mut(g), grad, state, lr, &cfg)?;
            }
            Ok(())
        })();
        self.opt = opt;
        result?;
        self.step += 1;
        Ok(())
    }

    /// Gradients averaged over `batch`, then one optimizer step. Example `k`
    /// draws from `rng.derive(k)`. Returns per-level losses averaged over the
    /// batch. On a non-finite loss the model is left untouched.
    pub fn train_batch(&mut self, batch: &[(&ImageRGB, &DepthMap)], rng: &RngStream, lr: f64) -> Result<Vec<f64>> {
        if batch.is_empty() {
            bail!(Input, "empty training batch");
        }
        let mut total: Option<(Vec<f64>, ModelGrads)> = None;
        for (k, (img, gt)) in batch.iter().enumerate() {
            let (l, g) = self.compute_gradients(img, gt, &rng.derive(k as u64))?;
            match total.as_mut() {
                None => total = Some((l, g)),
                Some((tl, tg)) => {
                    tl.iter_mut().zip(&l).for_each(|(a, b)| *a += b);
                    tg.add_assign(&g);
                }
            }
        }
        let (mut losses, mut grads) = total.unwrap_or_else(|| unreachable!());
        let s = 1.0 / batch.len() as f64;
        losses.iter_mut().for_each(|l| *l *= s);
        if losses.iter().any(|l| !l.is_finite()) {
            bail!(Numerics, "non-finite loss {losses:?} at step {}", self.step);
        }
        grads.scale(s);
        self.apply_gradients(&grads, lr)?;
        Ok(losses)
    }

    /// Single-example [`FractalModel::train_batch`].
    pub fn train_step(&mut self, image: &ImageRGB, gt: &DepthMap, rng: &RngStream, lr: f64) -> Result<Vec<f64>> {
        self.train_batch(&[(image, gt)], rng, lr)
    }

    /// Sample one level's latent given the previous level's latent.
    pub fn sample_level<D: LevelDenoiser + ?Sized>(
        &self,
        denoiser: &D,
        level: usize,
        feats: &VisualFeatures,
        prev: Option<&LatentGrid>,
        rng: &RngStream,
        sampler: &SamplerConfig,
    ) -> Result<(LevelInputs, LatentGrid)> {
        let l = *self.plan.level(level)?;
        let state = self.level_state(level, prev)?;
        let inputs = self.level_inputs(level, feats, &state)?;
        let mut z = diffusion::sample(
            &Chain(denoiser),
            &inputs,
            l.token_count,
            l.token_dim,
            &self.schedule,
            sampler,
            rng,
            level as u32,
        )?;
        // latents live in [-1, 1]; keep the next level's state in range
        z.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        let latent = tokens_to_grid(&z, l.patch, l.resolution, l.resolution)?;
        Ok((inputs, latent))
    }

    /// Full coarse-to-fine generation with an arbitrary denoiser.
    pub fn generate_with<D: LevelDenoiser + ?Sized, O: GenerationObserver + ?Sized>(
        &self,
        denoiser: &D,
        image: &ImageRGB,
        rng: &RngStream,
        sampler: &SamplerConfig,
        observer: &mut O,
    ) -> Result<GenerationTrace> {
        let feats = self.extract_features(image)?;
        let mut latents: Vec<LatentGrid> = Vec::with_capacity(self.plan.len());
        for i in 0..self.plan.len() {
            let l = *self.plan.level(i)?;
            let state = self.level_state(i, latents.last())?;
            let inputs = self.level_inputs(i, &feats, &state)?;
            observer.level_started(&inputs);
            let mut z = diffusion::sample(
                &Chain(denoiser),
                &inputs,
                l.token_count,
                l.token_dim,
                &self.schedule,
                sampler,
                rng,
                i as u32,
            )?;
            z.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            let latent = tokens_to_grid(&z, l.patch, l.resolution, l.resolution)?;
            observer.level_finished(i, &latent);
            latents.push(latent);
        }
        let level_depths = latents
            .iter()
            .enumerate()
            .map(|(i, z)| decode_level_depth(z, &self.plan, i, &self.norm))
            .collect::<Result<Vec<_>>>()?;
        let depth = level_depths[level_depths.len() - 1].clone();
        Ok(GenerationTrace { latents, level_depths, depth })
    }

    pub fn generate(&self, image: &ImageRGB, rng: &RngStream, sampler: &SamplerConfig) -> Result<GenerationTrace> {
        self.generate_with(self, image, rng, sampler, &mut ())
    }
}

impl LevelDenoiser for FractalModel {
    fn denoise(&self, inputs: &LevelInputs, z_t: &[f64], ts: &[usize]) -> Result<Vec<f64>> {
        let x = self.predictor_input(inputs, z_t, ts)?;
        let mut out = self.mlp(inputs.level).infer(&x, ts.len())?;
        self.apply_prior(inputs, z_t, ts, &mut out);
        Ok(out)
    }
}
