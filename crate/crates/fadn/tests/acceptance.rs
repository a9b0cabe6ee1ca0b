//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! for each, then fails if any criterion failed.
//!
//! The trained model from the training smoke run is reused by the
//! multi-sample checks, and the determinism check repeats the toy, training
//! and multi-sample runs in fresh directories. Expect roughly 20 minutes on
//! one core. Artifacts are kept under the cargo target tmp dir.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fadn::runs::{self, MultiSummary};
use fadn::toy::ToyConfig;
use fadn::RunConfig;
use fadn_core::bench::{gen_scene, MetricsReport, SceneSpec};
use fadn_core::diffusion::{forward_noise_into, make_linear_schedule, sample, NoisePredictor, NoiseSchedule, SamplerConfig};
use fadn_core::fractal::{FractalConfig, FractalModel};
use fadn_core::nnet::{grad_check, Activation, Mlp};
use fadn_core::plan::LevelSpec;
use fadn_core::urca::{align_samples, apply_affine, consensus_energy, consensus_pixel, UrcaConfig};
use fadn_core::{DepthMap, RngPath, RngStream, ScaleConfig};

// pinned tolerances
const GRAD_REL: f64 = 1e-4;
const MOMENT_SE: f64 = 4.0;
const COLLAPSE_INF: f64 = 1e-9;
const TOY_MEAN: f64 = 0.1;
const TOY_STD: f64 = 0.15;
const TOY_MAX_STEPS: u64 = 20_000;
const CONSENSUS_M: f64 = 1e-3;
const CONSENSUS_U_REL: f64 = 1e-6;
const GRID_STEP: f64 = 1e-5;
const ALIGN_L1: f64 = 0.05;
const EXCEEDANCE_U0: f64 = 1.0;
const RMSE_REDUCTION: f64 = 0.40;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

struct Suite {
    lines: Vec<String>,
    failed: usize,
}

impl Suite {
    fn record(&mut self, id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let mut o = f();
        let took = start.elapsed();
        if let Some(l) = limit {
            if took > l {
                o.pass = false;
                o.detail.push_str(&format!("; over the {}s limit", l.as_secs()));
            }
        }
        let line = format!(
            "criterion {id:>2} {:<4} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
        report(&line);
        self.failed += usize::from(!o.pass);
        self.lines.push(line);
    }
}

// straight to the stderr handle: the harness captures print! output of
// passing tests, and these lines are the suite's report
fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn fresh_dir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn gradient_exactness() -> Outcome {
    let rng = RngStream::new(101);
    let mut worst = 0.0f64;
    for (k, act) in [Activation::Silu, Activation::Tanh].into_iter().enumerate() {
        let mlp = Mlp::init(&[7, 12, 12, 12, 5], act, &rng.derive(k as u64)).unwrap();
        let rows = 4;
        let x = rng.derive(10 + k as u64).normals(0, 0, 0, rows * 7);
        let w = rng.derive(20 + k as u64).normals(0, 0, 0, rows * 5);
        let r = grad_check(&mlp, &x, rows, &w, GRAD_REL).unwrap();
        worst = worst.max(r.max_rel_error).max(r.max_input_rel_error);
    }

    // the whole model: features, gates and per-level predictors under the diffusion loss
    let cfg = FractalConfig {
        scale: ScaleConfig::new(vec![LevelSpec::new(1, 1), LevelSpec::new(2, 1), LevelSpec::new(4, 2)], 0.1, 10.0).unwrap(),
        hidden: vec![6, 5],
        time_embed_dim: 4,
        feature_dim: 3,
        timestep_reuse: 2,
        min_level_rows: 0,
        diffusion_steps: 10,
        ..FractalConfig::default()
    };
    let base = FractalModel::new(cfg.clone(), &rng.derive(30)).unwrap();
    let jitter = rng.derive(31);
    let groups: Vec<Vec<f64>> = base
        .param_groups()
        .iter()
        .enumerate()
        .map(|(g, p)| p.values.iter().enumerate().map(|(i, v)| v + 0.2 * jitter.normal(RngPath::new(g as u32, i as u32, 0, 0))).collect())
        .collect();
    let model = FractalModel::from_parts(cfg.clone(), groups.clone(), 0).unwrap();
    let (img, gt) = gen_scene(&SceneSpec { resolution: 4, ..SceneSpec::default() }.with_seed(7)).unwrap();
    let step_rng = RngStream::new(32);
    let (_, grads) = model.compute_gradients(&img, &gt, &step_rng).unwrap();
    let total = |g: Vec<Vec<f64>>| -> f64 {
        let m = FractalModel::from_parts(cfg.clone(), g, 0).unwrap();
        m.evaluate_loss_with(&m, &img, &gt, &step_rng).unwrap().iter().sum()
    };
    let h = 1e-5;
    let mut count = 0;
    for g in 0..groups.len() {
        for i in 0..groups[g].len() {
            let mut p = groups.clone();
            p[g][i] += h;
            let up = total(p.clone());
            p[g][i] -= 2.0 * h;
            let down = total(p);
            let num = (up - down) / (2.0 * h);
            let a = grads.groups[g][i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
            count += 1;
        }
    }
    Outcome::new(worst <= GRAD_REL, format!("max relative error {worst:.2e} <= {GRAD_REL:e} (MLPs plus {count} model parameters)"))
}

fn schedule_law() -> Outcome {
    let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
    let decreasing = (1..100).all(|t| s.alpha_bar(t + 1) < s.alpha_bar(t));
    let dim = 16;
    let rng = RngStream::new(202);
    let z_star = rng.normals(0, 0, 0, dim);
    let norm2: f64 = z_star.iter().map(|v| v * v).sum();
    let draws = 10_000;
    let mut worst = 0.0f64;
    let mut z = vec![0.0; dim];
    for t in [1usize, 50, 100] {
        let vals: Vec<f64> = (0..draws)
            .map(|d| {
                let eps = rng.normals(t as u32, d as u32, 1, dim);
                forward_noise_into(&z_star, t, &eps, &s, &mut z).unwrap();
                z.iter().map(|v| v * v).sum()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / draws as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        let want = s.alpha_bar(t) * norm2 + (1.0 - s.alpha_bar(t)) * dim as f64;
        worst = worst.max((mean - want).abs() / se);
    }
    Outcome::new(
        decreasing && worst <= MOMENT_SE,
        format!("alpha_bar strictly decreasing: {decreasing}; worst moment deviation {worst:.2} SE <= {MOMENT_SE}"),
    )
}

struct ExactNoise<'a> {
    target: &'a [f64],
    sched: &'a NoiseSchedule,
}

impl NoisePredictor for ExactNoise<'_> {
    type Condition = ();
    fn predict(&self, z_t: &[f64], t: usize, _: &(), _: usize) -> fadn_core::Result<Vec<f64>> {
        let ab = self.sched.alpha_bar(t);
        Ok(z_t.iter().zip(self.target).map(|(z, s)| (z - ab.sqrt() * s) / (1.0 - ab).sqrt()).collect())
    }
}

fn exact_noise_collapse() -> Outcome {
    let mut worst = 0.0f64;
    let target = RngStream::new(303).normals(0, 0, 0, 48).iter().map(|v| v.tanh()).collect::<Vec<_>>();
    for (lo, hi) in [(1e-4, 0.02), (1e-3, 0.2)] {
        for steps in [10, 100, 1000] {
            let s = make_linear_schedule(steps, lo, hi).unwrap();
            let p = ExactNoise { target: &target, sched: &s };
            let z = sample(&p, &(), 6, 8, &s, &SamplerConfig::with_temperature(0.0), &RngStream::new(steps as u64), 0).unwrap();
            worst = worst.max(z.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    Outcome::new(worst <= COLLAPSE_INF, format!("max |z0 - z*| {worst:.2e} <= {COLLAPSE_INF:e} for T in 10, 100, 1000"))
}

fn toy(dir: &Path) -> Outcome {
    let cfg = ToyConfig::default();
    let report = runs::run_toy_experiment(&cfg, dir).unwrap();
    let mean = report.rows.iter().map(|r| r.mean_error()).fold(0.0, f64::max);
    let std = report.rows.iter().map(|r| r.std_error()).fold(0.0, f64::max);
    Outcome::new(
        cfg.steps <= TOY_MAX_STEPS && mean <= TOY_MEAN && std <= TOY_STD,
        format!("{} steps; worst mean error {mean:.4} <= {TOY_MEAN}, worst std error {std:.4} <= {TOY_STD}", cfg.steps),
    )
}

fn grid_argmin(s: &[f64], r: &[f64], w: &[f64], cfg: &UrcaConfig) -> (f64, f64) {
    let lo = s.iter().chain(r).copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().chain(r).copied().fold(f64::NEG_INFINITY, f64::max);
    let steps = ((hi - lo) / GRID_STEP).round() as usize;
    let mut best = (lo, consensus_energy(lo, s, r, w, cfg));
    for i in 1..=steps {
        let z = lo + i as f64 * GRID_STEP;
        let e = consensus_energy(z, s, r, w, cfg);
        if e < best.1 {
            best = (z, e);
        }
    }
    // one evaluation at the parabola vertex through the best grid triple;
    // a smooth minimum between lattice points is otherwise missed by up to
    // half a step, which costs more than the U tolerance at high curvature
    let (z, e) = best;
    let (a, c) = (consensus_energy(z - GRID_STEP, s, r, w, cfg), consensus_energy(z + GRID_STEP, s, r, w, cfg));
    let den = a - 2.0 * e + c;
    if den > 0.0 {
        let v = z + 0.5 * GRID_STEP * (a - c) / den;
        let ev = consensus_energy(v, s, r, w, cfg);
        if ev < e {
            return (v, ev);
        }
    }
    best
}

fn consensus_oracle() -> Outcome {
    let rng = RngStream::new(505);
    let (mut dm, mut du) = (0.0f64, 0.0f64);
    let mut below_grid = true;
    for p in 0..1000u32 {
        let u = |j: u32| rng.uniform(RngPath::new(p, j, 0, 0));
        let n = 1 + (u(0) * 10.0) as usize;
        let raw: Vec<f64> = (0..4).map(|k| u(40 + k)).collect();
        let sum: f64 = raw.iter().sum();
        let cfg = UrcaConfig {
            gamma: 2.0 * u(1),
            tau_s: 0.05 + 0.5 * u(2),
            tau_r: 0.05 + 0.5 * u(3),
            delta_stab: 1e-3 * u(4),
            eps_c: 1e-4 * 100f64.powf(u(5)),
            level_weights: Some(raw.iter().map(|w| w / sum).collect()),
            ..UrcaConfig::default()
        };
        let w = cfg.weights(4).unwrap();
        // depths on the oracle lattice, so the grid contains every kink
        let q = |x: f64| 1.0 + (x * 100_000.0).floor() * GRID_STEP;
        let s: Vec<f64> = (0..n as u32).map(|k| q(u(10 + k))).collect();
        let r: Vec<f64> = (0..4).map(|k| q(u(30 + k))).collect();
        let (m, e) = consensus_pixel(&s, &r, &w, &cfg).unwrap();
        let (gm, ge) = grid_argmin(&s, &r, &w, &cfg);
        dm = dm.max((m - gm).abs());
        below_grid &= e <= ge * (1.0 + 1e-12);
        du = du.max((e - ge).abs() / ge.max(f64::MIN_POSITIVE));
    }
    Outcome::new(
        dm <= CONSENSUS_M && du <= CONSENSUS_U_REL && below_grid,
        format!(
            "1000 pixels: max |M - M_grid| {dm:.2e} <= {CONSENSUS_M:e}, max relative U gap {du:.2e} <= {CONSENSUS_U_REL:e}; U never above the grid minimum: {below_grid}"
        ),
    )
}

fn alignment_recovery() -> Outcome {
    let spec = SceneSpec { resolution: 64, ..SceneSpec::default() };
    let mut worst_l1 = 0.0f64;
    let mut monotone = true;
    for trial in 0..3u64 {
        let (_, base) = gen_scene(&spec.with_seed(600 + trial)).unwrap();
        let rng = RngStream::new(606).derive(trial);
        let samples: Vec<DepthMap> = (0..5u32)
            .map(|n| {
                let a = 0.8 + 0.4 * rng.uniform(RngPath::new(1, n, 0, 0));
                let b = -0.3 + 0.6 * rng.uniform(RngPath::new(1, n, 0, 1));
                let noise = rng.normals(2, n, 0, base.len());
                let v = base.values().iter().zip(&noise).map(|(d, e)| a * d + b + 0.01 * e).collect();
                DepthMap::new(64, 64, v).unwrap()
            })
            .collect();
        let cfg = UrcaConfig::default();
        let al = align_samples(&samples, &cfg).unwrap();
        monotone &= al.objective_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
        let maps: Vec<DepthMap> =
            samples.iter().enumerate().map(|(n, s)| apply_affine(s, al.params.alpha[n], al.params.beta[n])).collect();
        let (mut acc, mut pairs) = (0.0, 0);
        for i in 0..maps.len() {
            for j in i + 1..maps.len() {
                let d: f64 = maps[i].values().iter().zip(maps[j].values()).map(|(a, b)| (a - b).abs()).sum();
                acc += d / maps[i].len() as f64;
                pairs += 1;
            }
        }
        worst_l1 = worst_l1.max(acc / pairs as f64);
    }
    Outcome::new(
        monotone && worst_l1 <= ALIGN_L1,
        format!("objective non-increasing: {monotone}; worst mean pairwise L1 {worst_l1:.4} m <= {ALIGN_L1} m"),
    )
}

fn deltas_ok(m: &MetricsReport) -> bool {
    m.deltas_monotone()
}

fn by_n(summary: &[MultiSummary], n: usize) -> &MultiSummary {
    summary.iter().find(|s| s.n == n).expect("sample count present")
}

fn plan_fidelity() -> Outcome {
    let run = |scale: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_fadn")).args(["plan", "--scale", scale]).output().unwrap();
        (out.status.success(), String::from_utf8(out.stdout).unwrap())
    };
    let (ok_full, full) = run("full");
    let (ok_desk, desk) = run("desk");
    let full_ok = ok_full && full.contains("# sequence lengths: (1, 16, 256, 256)") && full.contains("# discrepancy g2:");
    let desk_ok = ok_desk && desk.contains("# sequence lengths: (1, 16, 256, 64)") && !desk.contains("discrepancy");
    Outcome::new(full_ok && desk_ok, format!("full (1, 16, 256, 256) with g2 flagged: {full_ok}; desk (1, 16, 256, 64): {desk_ok}"))
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Vec<String> {
    names
        .iter()
        .filter(|n| fs::read(a.join(n)).ok().is_none_or(|x| Some(x) != fs::read(b.join(n)).ok()))
        .map(|n| n.to_string())
        .collect()
}

#[test]
fn acceptance() {
    let mut suite = Suite { lines: Vec::new(), failed: 0 };
    suite.record(1, "gradient exactness", secs(30), gradient_exactness);
    suite.record(2, "schedule law", secs(10), schedule_law);
    suite.record(3, "exact-noise collapse", secs(5), exact_noise_collapse);
    let toy_a = fresh_dir("toy_a");
    suite.record(4, "toy conditional diffusion", secs(90), || toy(&toy_a));
    suite.record(5, "consensus oracle", secs(60), consensus_oracle);
    suite.record(6, "alignment recovery", secs(30), alignment_recovery);
    suite.record(9, "plan fidelity", secs(1), plan_fidelity);

    let cfg = RunConfig::default();
    let train_a = fresh_dir("train_a");
    let mut model = None;
    suite.record(10, "end-to-end training smoke", secs(600), || {
        let out = runs::run_train(&cfg, &train_a).unwrap();
        let first = &out.validation.first().unwrap().1;
        let last = &out.validation.last().unwrap().1;
        let reduction = 1.0 - last.rmse / first.rmse;
        let all_monotone = out.validation.iter().all(|(_, m)| deltas_ok(m));
        model = Some(out.model);
        Outcome::new(
            reduction >= RMSE_REDUCTION && all_monotone && cfg.train.scenes == 512,
            format!(
                "{} scenes; validation RMSE {:.3} -> {:.3} ({:.1}% lower, need {:.0}%); deltas monotone on all {} reports: {all_monotone}",
                cfg.train.scenes,
                first.rmse,
                last.rmse,
                100.0 * reduction,
                100.0 * RMSE_REDUCTION,
                out.validation.len()
            ),
        )
    });
    let model = model.expect("training finished");

    let multi_a = fresh_dir("multi_a");
    let mut summary = Vec::new();
    suite.record(7, "multi-sample trend", secs(900), || {
        summary = runs::run_multisample(&cfg, &model, &multi_a).unwrap();
        let (one, eight) = (by_n(&summary, 1), by_n(&summary, 8));
        let enough = cfg.eval.test_scenes >= 10 && cfg.eval.seeds.len() >= 3;
        Outcome::new(
            enough && eight.metrics.rmse <= one.metrics.rmse && eight.metrics.delta1 >= one.metrics.delta1,
            format!(
                "{} scenes x {} seeds; RMSE N=1 {:.4} -> N=8 {:.4}; delta1 {:.4} -> {:.4}",
                cfg.eval.test_scenes,
                cfg.eval.seeds.len(),
                one.metrics.rmse,
                eight.metrics.rmse,
                one.metrics.delta1,
                eight.metrics.delta1
            ),
        )
    });
    suite.record(8, "uncertainty tail shrink", None, || {
        let (one, eight) = (by_n(&summary, 1), by_n(&summary, 8));
        Outcome::new(
            cfg.eval.u0 == EXCEEDANCE_U0 && eight.exceedance <= one.exceedance,
            format!("fraction with U > {EXCEEDANCE_U0}: N=1 {:.4} -> N=8 {:.4}", one.exceedance, eight.exceedance),
        )
    });

    suite.record(11, "determinism", None, || {
        let toy_b = fresh_dir("toy_b");
        runs::run_toy_experiment(&ToyConfig::default(), &toy_b).unwrap();
        let mut diff = same_files(&toy_a, &toy_b, &["toy.csv"]);
        let train_b = fresh_dir("train_b");
        let again = runs::run_train(&cfg, &train_b).unwrap();
        diff.extend(same_files(&train_a, &train_b, &["loss.csv", "validation.csv", "schedule.csv", "checkpoint.fadn"]));
        let multi_b = fresh_dir("multi_b");
        runs::run_multisample(&cfg, &again.model, &multi_b).unwrap();
        diff.extend(same_files(&multi_a, &multi_b, &["multisample.csv", "multisample_summary.csv"]));
        Outcome::new(
            diff.is_empty(),
            if diff.is_empty() { "toy, training and multi-sample outputs bit-identical".to_string() } else { format!("differing: {}", diff.join(", ")) },
        )
    });

    report(&format!("{} of {} criteria passed", suite.lines.len() - suite.failed, suite.lines.len()));
    assert_eq!(suite.failed, 0, "failed criteria:\n{}", suite.lines.iter().filter(|l| l.contains(" FAIL ")).cloned().collect::<Vec<_>>().join("\n"));
}
