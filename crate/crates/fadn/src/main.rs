use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fadn::runs::{self, Split};
use fadn::{checkpoint, FadnError, Result, RunConfig};
use fadn_core::bench::gen_scene;
use fadn_core::diffusion::SamplerConfig;
use fadn_core::RngStream;

#[derive(Parser)]
#[command(name = "fadn", version, about = "Fractal depth diffusion: train, sample, fuse")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// key=value config file; defaults apply to missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on generated scenes
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides train_steps
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Single-sample metrics on the test split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sampling temperature (default: eval_tau)
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Generate one depth map and dump the per-level trace
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        /// Test scene index
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
    /// Robust fusion: of depth PFM files (--inputs), or of N generations per
    /// test scene for each N (--checkpoint)
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "inputs", conflicts_with = "inputs")]
        checkpoint: Option<PathBuf>,
        /// Comma-separated depth PFM files to fuse
        #[arg(long, value_delimiter = ',')]
        inputs: Option<Vec<PathBuf>>,
        /// Trace directories (from `sample`) for the cross-level term
        #[arg(long, value_delimiter = ',', requires = "inputs")]
        traces: Option<Vec<PathBuf>>,
        /// Comma-separated sample counts (default: samples)
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Print per-level token counts for a hierarchy
    Plan {
        /// desk, full or full-table (default: the config's scale)
        #[arg(long)]
        scale: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render one synthetic scene
    Scene {
        #[command(flatten)]
        common: Common,
        /// Scene seed
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Train { common, steps } => {
            let mut cfg = load_config(common.config.as_deref(), common.seed)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let outcome = runs::run_train(&cfg, &common.out)?;
            let first = outcome.validation.first().map(|v| v.1.rmse).unwrap_or(f64::NAN);
            let last = outcome.validation.last().map(|v| v.1.rmse).unwrap_or(f64::NAN);
            println!("validation rmse {first:.4} -> {last:.4}; checkpoint {}", outcome.checkpoint.display());
        }
        Command::Eval { common, checkpoint: ck, tau } => {
            let mut cfg = load_config(common.config.as_deref(), common.seed)?;
            if let Some(t) = tau {
                cfg.eval.tau = t;
            }
            let model = checkpoint::load(&ck)?;
            let m = runs::run_eval(&cfg, &model, &common.out)?;
            println!(
                "abs_rel {:.4} sq_rel {:.4} rmse {:.4} rmse_log {:.4} delta1 {:.3} delta2 {:.3} delta3 {:.3}",
                m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3
            );
        }
        Command::Sample { common, checkpoint: ck, tau, scene } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let tau = tau.unwrap_or(cfg.eval.tau);
            let model = checkpoint::load(&ck)?;
            let seed = runs::scene_seed(cfg.seed, Split::Test, scene);
            let s = gen_scene(&cfg.scene_spec(seed))?;
            let trace = model.generate(&s.0, &RngStream::new(cfg.seed).derive(6), &SamplerConfig::with_temperature(tau))?;
            runs::write_scene(&common.out.join("scene"), &s)?;
            runs::dump_trace(&common.out, &cfg, &trace, tau, seed)?;
            let m = fadn_core::bench::metrics(&trace.depth, &s.1)?;
            println!("rmse {:.4} delta1 {:.3}; trace in {}", m.rmse, m.delta1, common.out.display());
        }
        Command::Fuse { common, checkpoint: ck, inputs, traces, n, tau } => {
            let mut cfg = load_config(common.config.as_deref(), common.seed)?;
            if let Some(inputs) = inputs {
                let f = runs::fuse_files(&cfg, &inputs, &traces.unwrap_or_default(), &common.out)?;
                println!(
                    "fused {} maps; fraction of pixels with U > {} is {:.4} (max U {:.4})",
                    f.samples, cfg.eval.u0, f.exceedance, f.max_uncertainty
                );
                return Ok(());
            }
            let ck = ck.expect("clap enforces --checkpoint without --inputs");
            if let Some(n) = n {
                cfg.eval.samples = n;
            }
            if let Some(t) = tau {
                cfg.eval.multi_tau = t;
            }
            cfg.validate()?;
            let model = checkpoint::load(&ck)?;
            for s in runs::run_multisample(&cfg, &model, &common.out)? {
                println!(
                    "N={} rmse {:.4} abs_rel {:.4} delta1 {:.3} exceedance {:.4}",
                    s.n, s.metrics.rmse, s.metrics.abs_rel, s.metrics.delta1, s.exceedance
                );
            }
        }
        Command::Plan { scale, config } => {
            let name = match (scale, config) {
                (Some(s), _) => s,
                (None, Some(p)) => RunConfig::load(&p)?.scale_name,
                (None, None) => RunConfig::default().scale_name,
            };
            print!("{}", runs::plan_text(&name)?);
        }
        Command::Scene { common, scene_seed } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let s = gen_scene(&cfg.scene_spec(scene_seed))?;
            runs::write_scene(&common.out, &s)?;
            println!("scene {scene_seed} written to {}", common.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let FadnError::Io { source, .. } = &e {
                eprintln!("  caused by: {source}");
            }
            ExitCode::FAILURE
        }
    }
}
