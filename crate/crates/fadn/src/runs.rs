//! Experiment runners: training, evaluation, multi-sample fusion, and the
//! small dump helpers the CLI uses. Every runner writes into an output
//! directory with a `manifest.txt`; CSV files contain no timing data so
//! repeated runs with the same config are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fadn_core::bench::{cost_report, gen_scene, metrics, MetricsReport};
use fadn_core::diffusion::{NoiseSchedule, SamplerConfig};
use fadn_core::fractal::{FractalModel, GenerationTrace};
use fadn_core::nnet::{lr_at, LrSchedule};
use fadn_core::plan::build_schedule_plan;
use fadn_core::urca::{fuse, normalize_uncertainty, uncertainty_stats};
use fadn_core::{DepthMap, Error as CoreError, ImageRGB, RngPath, RngStream, ScaleConfig};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{io_err, FadnError, Result};
use crate::io::{read_depth_pfm, read_latent_pfm, write_depth_pfm, write_depth_pgm, write_latent_pfm, write_rgb_pfm};
use crate::toy::{run_toy, ToyConfig, ToyReport};

pub type Scene = (ImageRGB, DepthMap);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 10,
            Split::Validation => 11,
            Split::Test => 12,
        }
    }
}

/// Scene seed for item `i` of a split.
pub fn scene_seed(seed: u64, split: Split, i: usize) -> u64 {
    RngStream::new(seed).derive(split.tag()).bits(RngPath::new(0, i as u32, 0, 0))
}

pub fn dataset(cfg: &RunConfig, split: Split, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| Ok(gen_scene(&cfg.scene_spec(scene_seed(cfg.seed, split, i)))?))
        .collect()
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// Writes `manifest.txt` (`key=value` lines) and `config.txt`.
pub fn write_manifest(dir: &Path, cfg: &RunConfig, entries: &[(&str, String)]) -> Result<()> {
    let mut text = format!("seed={}\nconfig_hash={}\n", cfg.seed, cfg.hash());
    for (k, v) in entries {
        text.push_str(&format!("{k}={v}\n"));
    }
    write_text(&dir.join("manifest.txt"), &text)?;
    write_text(&dir.join("config.txt"), &cfg.to_text())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(FadnError::from)
}

const METRIC_HEADER: [&str; 7] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"];

fn metric_fields(m: &MetricsReport) -> [String; 7] {
    [m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3].map(|v| v.to_string())
}

pub fn write_schedule_csv(path: &Path, sched: &NoiseSchedule) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["t", "beta", "alpha", "alpha_bar", "sigma"])?;
    for r in sched.rows() {
        w.write_record([r.t.to_string(), r.beta.to_string(), r.alpha.to_string(), r.alpha_bar.to_string(), r.sigma.to_string()])?;
    }
    w.flush().map_err(io_err(path))
}

/// Mean metrics of `model` over `scenes` with one generation each.
pub fn evaluate(model: &FractalModel, scenes: &[Scene], rng: &RngStream, tau: f64) -> Result<Vec<MetricsReport>> {
    let sampler = SamplerConfig::with_temperature(tau);
    scenes
        .iter()
        .enumerate()
        .map(|(k, (img, gt))| {
            let trace = model.generate(img, &rng.derive(k as u64), &sampler)?;
            Ok(metrics(&trace.depth, gt)?)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FractalModel,
    /// `(step, mean metrics)`; the first entry is the untrained model.
    pub validation: Vec<(u64, MetricsReport)>,
    pub final_losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Fisher-Yates order of `n` items for one epoch.
fn epoch_order(rng: &RngStream, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(RngPath::new(epoch as u32, i as u32, (epoch >> 32) as u32, 0), i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

/// Trains a fresh model. Writes `loss.csv`, `validation.csv`,
/// `schedule.csv`, `untrained.fadn` and `checkpoint.fadn` into `out`.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    create_dir(out)?;
    let root = RngStream::new(cfg.seed);
    let mut model = FractalModel::new(cfg.model.clone(), &root.derive(1))?;
    write_manifest(out, cfg, &[("command", "train".into()), ("tau", cfg.eval.tau.to_string())])?;
    write_schedule_csv(&out.join("schedule.csv"), model.schedule())?;
    checkpoint::save(&out.join("untrained.fadn"), &model)?;

    let train = dataset(cfg, Split::Train, cfg.train.scenes)?;
    let val = dataset(cfg, Split::Validation, cfg.train.validation_scenes)?;
    let val_rng = root.derive(3);
    let t = &cfg.train;
    let sched = LrSchedule { base_lr: t.base_lr, warmup_steps: t.warmup(), total_steps: t.steps, final_lr: t.final_lr };

    let levels = model.plan().len();
    let mut loss_csv = csv_writer(&out.join("loss.csv"))?;
    let mut header = vec!["step".to_string(), "lr".to_string()];
    header.extend((0..levels).map(|l| format!("loss_level{l}")));
    header.push("loss_total".into());
    loss_csv.write_record(&header)?;
    let mut val_csv = csv_writer(&out.join("validation.csv"))?;
    let mut vh = vec!["step"];
    vh.extend(METRIC_HEADER);
    val_csv.write_record(&vh)?;

    let mut validation = Vec::new();
    let mut validate = |model: &FractalModel, step: u64, w: &mut csv::Writer<fs::File>| -> Result<()> {
        let m = MetricsReport::mean(&evaluate(model, &val, &val_rng, cfg.eval.tau)?);
        let mut rec = vec![step.to_string()];
        rec.extend(metric_fields(&m));
        w.write_record(&rec)?;
        eprintln!("step {step}: validation rmse {:.4} delta1 {:.3}", m.rmse, m.delta1);
        validation.push((step, m));
        Ok(())
    };
    validate(&model, 0, &mut val_csv)?;

    let started = Instant::now();
    let order_rng = root.derive(4);
    let step_rng = root.derive(2);
    let per_epoch = (train.len() / t.batch).max(1) as u64;
    let mut order = Vec::new();
    let mut final_losses = Vec::new();
    for step in 0..t.steps {
        let epoch = step / per_epoch;
        if step % per_epoch == 0 {
            order = epoch_order(&order_rng, epoch, train.len());
        }
        let base = (step % per_epoch) as usize * t.batch;
        let batch: Vec<(&ImageRGB, &DepthMap)> =
            (0..t.batch).map(|j| &train[order[(base + j) % train.len()]]).map(|(i, d)| (i, d)).collect();
        let lr = lr_at(step, &sched);
        let losses = match model.train_batch(&batch, &step_rng.derive(step), lr) {
            Ok(l) => l,
            Err(e @ CoreError::Numerics(_)) => {
                let dump = out.join("failed.fadn");
                checkpoint::save(&dump, &model)?;
                eprintln!("step {step}: {e}; state written to {}", dump.display());
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        let mut rec = vec![step.to_string(), lr.to_string()];
        rec.extend(losses.iter().map(|v| v.to_string()));
        rec.push(losses.iter().sum::<f64>().to_string());
        loss_csv.write_record(&rec)?;
        if (step + 1) % 100 == 0 {
            eprintln!("step {}: loss {:.4} ({:.0?})", step + 1, losses.iter().sum::<f64>(), started.elapsed());
        }
        final_losses = losses;
        let done = step + 1;
        if t.validate_every > 0 && done % t.validate_every == 0 && done != t.steps {
            validate(&model, done, &mut val_csv)?;
        }
    }
    validate(&model, t.steps, &mut val_csv)?;
    loss_csv.flush().map_err(io_err(out))?;
    val_csv.flush().map_err(io_err(out))?;
    let ckpt = out.join("checkpoint.fadn");
    checkpoint::save(&ckpt, &model)?;
    Ok(TrainOutcome { model, validation, final_losses, checkpoint: ckpt })
}

/// Single-sample evaluation on the test split; writes `metrics.csv` with one
/// row per scene and a final `mean` row.
pub fn run_eval(cfg: &RunConfig, model: &FractalModel, out: &Path) -> Result<MetricsReport> {
    create_dir(out)?;
    write_manifest(out, cfg, &[("command", "eval".into()), ("tau", cfg.eval.tau.to_string())])?;
    let test = dataset(cfg, Split::Test, cfg.eval.test_scenes)?;
    let reports = evaluate(model, &test, &RngStream::new(cfg.seed).derive(5), cfg.eval.tau)?;
    let mean = MetricsReport::mean(&reports);
    let path = out.join("metrics.csv");
    let mut w = csv_writer(&path)?;
    let mut h = vec!["scene"];
    h.extend(METRIC_HEADER);
    w.write_record(&h)?;
    for (k, r) in reports.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(metric_fields(r));
        w.write_record(&rec)?;
    }
    let mut rec = vec!["mean".to_string()];
    rec.extend(metric_fields(&mean));
    w.write_record(&rec)?;
    w.flush().map_err(io_err(&path))?;
    Ok(mean)
}

/// One fused estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSample {
    pub trace_count: usize,
    pub metrics: MetricsReport,
    /// Fraction of valid pixels whose normalized uncertainty exceeds `u0`.
    pub exceedance: f64,
    pub mean_uncertainty: f64,
}

/// Stream for the `n`-sample estimate of one scene. Different `n` never share
/// a stream, so adding sample counts leaves the others unchanged.
pub fn multisample_stream(sample_seed: u64, scene: usize, n: usize) -> RngStream {
    RngStream::new(sample_seed).derive(scene as u64).derive(1_000 + n as u64)
}

/// Generates `n` samples at temperature `tau` and fuses them.
pub fn fused_estimate(
    cfg: &RunConfig,
    model: &FractalModel,
    scene: &Scene,
    n: usize,
    rng: &RngStream,
) -> Result<(FusedSample, Vec<f64>)> {
    let (img, gt) = scene;
    let sampler = SamplerConfig::with_temperature(cfg.eval.multi_tau);
    let traces: Vec<GenerationTrace> =
        (0..n).map(|i| model.generate(img, &rng.derive(i as u64), &sampler)).collect::<fadn_core::Result<_>>()?;
    let samples: Vec<DepthMap> = traces.iter().map(|t| t.depth.clone()).collect();
    let fused = fuse(&samples, &traces, &cfg.urca)?;
    let depth = &fused.consensus.depth;
    let u = normalize_uncertainty(&fused.consensus.uncertainty, n, &cfg.urca);
    let valid_u: Vec<f64> = u.iter().zip(depth.valid_mask()).filter(|(_, &ok)| ok).map(|(&v, _)| v).collect();
    let stats = uncertainty_stats(&valid_u, cfg.eval.u0);
    let mean_u = valid_u.iter().sum::<f64>() / valid_u.len().max(1) as f64;
    let sample = FusedSample { trace_count: n, metrics: metrics(depth, gt)?, exceedance: stats.exceedance, mean_uncertainty: mean_u };
    Ok((sample, u))
}

/// Per-`N` averages over all seeds and scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSummary {
    pub n: usize,
    pub metrics: MetricsReport,
    pub exceedance: f64,
    pub mean_uncertainty: f64,
}

/// For every sample seed, test scene and `N` in the config: `N` generations,
/// fusion, metrics and uncertainty exceedance. Writes `multisample.csv`
/// (one row per estimate) and `multisample_summary.csv` (one row per `N`).
pub fn run_multisample(cfg: &RunConfig, model: &FractalModel, out: &Path) -> Result<Vec<MultiSummary>> {
    create_dir(out)?;
    write_manifest(
        out,
        cfg,
        &[("command", "fuse".into()), ("tau", cfg.eval.multi_tau.to_string()), ("u0", cfg.eval.u0.to_string())],
    )?;
    let test = dataset(cfg, Split::Test, cfg.eval.test_scenes)?;
    let path = out.join("multisample.csv");
    let mut w = csv_writer(&path)?;
    let mut h = vec!["sample_seed", "scene", "n"];
    h.extend(METRIC_HEADER);
    h.extend(["exceedance", "mean_uncertainty"]);
    w.write_record(&h)?;
    let ns = &cfg.eval.samples;
    let mut acc: Vec<Vec<FusedSample>> = vec![Vec::new(); ns.len()];
    let started = Instant::now();
    for &s in &cfg.eval.seeds {
        for (k, scene) in test.iter().enumerate() {
            for (j, &n) in ns.iter().enumerate() {
                let (f, _) = fused_estimate(cfg, model, scene, n, &multisample_stream(s, k, n))?;
                let mut rec = vec![s.to_string(), k.to_string(), n.to_string()];
                rec.extend(metric_fields(&f.metrics));
                rec.push(f.exceedance.to_string());
                rec.push(f.mean_uncertainty.to_string());
                w.write_record(&rec)?;
                acc[j].push(f);
            }
        }
        eprintln!("sample seed {s} done ({:.0?})", started.elapsed());
    }
    w.flush().map_err(io_err(&path))?;
    let summary: Vec<MultiSummary> = ns
        .iter()
        .zip(&acc)
        .map(|(&n, rows)| {
            let c = rows.len().max(1) as f64;
            MultiSummary {
                n,
                metrics: MetricsReport::mean(&rows.iter().map(|r| r.metrics).collect::<Vec<_>>()),
                exceedance: rows.iter().map(|r| r.exceedance).sum::<f64>() / c,
                mean_uncertainty: rows.iter().map(|r| r.mean_uncertainty).sum::<f64>() / c,
            }
        })
        .collect();
    let spath = out.join("multisample_summary.csv");
    let mut w = csv_writer(&spath)?;
    let mut h = vec!["n"];
    h.extend(METRIC_HEADER);
    h.extend(["exceedance", "mean_uncertainty"]);
    w.write_record(&h)?;
    for s in &summary {
        let mut rec = vec![s.n.to_string()];
        rec.extend(metric_fields(&s.metrics));
        rec.push(s.exceedance.to_string());
        rec.push(s.mean_uncertainty.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(&spath))?;
    Ok(summary)
}

/// Toy two-cluster run; writes `toy.csv`.
pub fn run_toy_experiment(toy: &ToyConfig, out: &Path) -> Result<ToyReport> {
    create_dir(out)?;
    let report = run_toy(toy)?;
    let path = out.join("toy.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["cluster", "dim", "data_mean", "sample_mean", "data_std", "sample_std"])?;
    for r in &report.rows {
        w.write_record([
            r.cluster.to_string(),
            r.dim.to_string(),
            r.data_mean.to_string(),
            r.sample_mean.to_string(),
            r.data_std.to_string(),
            r.sample_std.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(report)
}

/// Per-level latents, decoded level depths and the final depth, plus a manifest.
pub fn dump_trace(dir: &Path, cfg: &RunConfig, trace: &GenerationTrace, tau: f64, scene: u64) -> Result<()> {
    create_dir(dir)?;
    for (i, z) in trace.latents.iter().enumerate() {
        write_latent_pfm(&dir.join(format!("latent_level{i}.pfm")), z)?;
    }
    for (i, d) in trace.level_depths.iter().enumerate() {
        write_depth_pfm(&dir.join(format!("depth_level{i}.pfm")), d)?;
    }
    write_depth_pfm(&dir.join("depth.pfm"), &trace.depth)?;
    write_depth_pgm(&dir.join("depth.pgm"), &trace.depth)?;
    write_manifest(dir, cfg, &[("command", "sample".into()), ("tau", tau.to_string()), ("scene_seed", scene.to_string())])
}

pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    create_dir(dir)?;
    write_rgb_pfm(&dir.join("rgb.pfm"), &scene.0)?;
    write_depth_pfm(&dir.join("depth.pfm"), &scene.1)?;
    write_depth_pgm(&dir.join("depth.pgm"), &scene.1)
}

/// Per-level sequence table for a named hierarchy. For `full` and
/// `full-table`, which differ only in how the 16x16 level is tokenized, the
/// levels where the two disagree are flagged.
pub fn plan_text(name: &str) -> Result<String> {
    let report = cost_report(&build_schedule_plan(&ScaleConfig::named(name)?)?);
    let mut s = String::from("level,name,resolution,patch,sequence_length,token_dim\n");
    for (i, r) in report.rows.iter().enumerate() {
        s.push_str(&format!("{i},{},{},{},{},{}\n", r.name, r.resolution, r.patch, r.token_count, r.token_dim));
    }
    s.push_str(&format!(
        "# sequence lengths: ({})\n",
        report.sequence_lengths().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
    ));
    s.push_str(&format!(
        "# total tokens {}; {} level stages vs {} token-wise steps\n",
        report.total_tokens, report.level_stages, report.tokenwise_steps
    ));
    let other = match name {
        "full" => Some("full-table"),
        "full-table" | "full_table" => Some("full"),
        _ => None,
    };
    if let Some(o) = other {
        let theirs = cost_report(&build_schedule_plan(&ScaleConfig::named(o)?)?);
        for (level, ours, alt) in report.differences(&theirs) {
            s.push_str(&format!(
                "# discrepancy {level}: sequence length {ours} here, {alt} under the {o} tokenization\n"
            ));
        }
    }
    Ok(s)
}

/// Reads a directory written by [`dump_trace`].
pub fn load_trace(dir: &Path) -> Result<GenerationTrace> {
    let mut latents = Vec::new();
    let mut level_depths = Vec::new();
    for i in 0.. {
        let z = dir.join(format!("latent_level{i}.pfm"));
        if !z.exists() {
            break;
        }
        latents.push(read_latent_pfm(&z)?);
        level_depths.push(read_depth_pfm(&dir.join(format!("depth_level{i}.pfm")))?);
    }
    let depth = read_depth_pfm(&dir.join("depth.pfm"))?;
    Ok(GenerationTrace { latents, level_depths, depth })
}

/// Summary of a file-based fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct FileFusion {
    pub samples: usize,
    pub exceedance: f64,
    pub max_uncertainty: f64,
}

/// Fuses depth PFMs (plus optional trace directories for the recursive
/// term). Writes `fused.pfm`, `fused.pgm`, `uncertainty.pfm` (normalized),
/// and `uncertainty_hist.csv`.
pub fn fuse_files(cfg: &RunConfig, inputs: &[PathBuf], traces: &[PathBuf], out: &Path) -> Result<FileFusion> {
    create_dir(out)?;
    let samples: Vec<DepthMap> = inputs.iter().map(|p| read_depth_pfm(p)).collect::<Result<_>>()?;
    let traces: Vec<GenerationTrace> = traces.iter().map(|p| load_trace(p)).collect::<Result<_>>()?;
    let fused = fuse(&samples, &traces, &cfg.urca)?;
    let depth = &fused.consensus.depth;
    write_depth_pfm(&out.join("fused.pfm"), depth)?;
    write_depth_pgm(&out.join("fused.pgm"), depth)?;
    let u = normalize_uncertainty(&fused.consensus.uncertainty, samples.len(), &cfg.urca);
    let grid = fadn_core::LatentGrid::new(depth.width(), depth.height(), u.clone())?;
    write_latent_pfm(&out.join("uncertainty.pfm"), &grid)?;
    let valid_u: Vec<f64> = u.iter().zip(depth.valid_mask()).filter(|(_, &ok)| ok).map(|(&v, _)| v).collect();
    let stats = uncertainty_stats(&valid_u, cfg.eval.u0);
    let path = out.join("uncertainty_hist.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["bin_left", "count"])?;
    for (b, c) in stats.bin_left.iter().zip(&stats.counts) {
        w.write_record([b.to_string(), c.to_string()])?;
    }
    w.flush().map_err(io_err(&path))?;
    write_manifest(
        out,
        cfg,
        &[
            ("command", "fuse".into()),
            ("samples", samples.len().to_string()),
            ("u0", cfg.eval.u0.to_string()),
            ("exceedance", stats.exceedance.to_string()),
        ],
    )?;
    Ok(FileFusion { samples: samples.len(), exceedance: stats.exceedance, max_uncertainty: stats.max })
}
