use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use idcanvas::harness::{self, check, AblationSuite, ExperimentConfig, Manifest};
use idcanvas::metrics::{RankingThresholds, SIM_GT_MIN, SIM_REF_MIN};
use idcanvas::synth::{generate_dataset, write_dataset};

#[derive(Parser)]
#[command(name = "idcanvas", version, about = "Toy location-canvas identity conditioning experiments")]
struct Cli {
    /// key = value config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long = "cfg-scale", global = true)]
    cfg_scale: Option<f64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone, Copy)]
struct Thresholds {
    #[arg(long = "sim-gt-min", default_value_t = SIM_GT_MIN)]
    sim_gt_min: f64,
    #[arg(long = "sim-ref-min", default_value_t = SIM_REF_MIN)]
    sim_ref_min: f64,
}

impl From<Thresholds> for RankingThresholds {
    fn from(t: Thresholds) -> Self {
        RankingThresholds {
            sim_gt_min: t.sim_gt_min,
            sim_ref_min: t.sim_ref_min,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the training scenes (images, references, canvases, masks).
    GenData {
        /// Number of scenes; defaults to train_scenes.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model; writes logs and checkpoints under --out.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample held-out scenes from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Score a checkpoint on the held-out scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        thresholds: Thresholds,
    },
    /// Run an ablation suite: attention_mask, curriculum, lambda_sweep, components.
    Ablate {
        suite: String,
        #[command(flatten)]
        thresholds: Thresholds,
    },
    /// Gradient and oracle suites.
    Check {
        #[arg(long, default_value_t = 10)]
        points: usize,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = &cli.config {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.apply_text(&text)?;
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.steps {
        cfg.steps = v;
    }
    if let Some(v) = cli.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = cli.cfg_scale {
        cfg.cfg_scale = v;
    }
    if let Some(v) = &cli.out {
        cfg.out = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_check(points: usize) -> Result<bool> {
    let mut ok = true;
    let mut report = |name: &str, pass: bool, detail: String| {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };
    for r in check::op_gradient_suite(points, 1)? {
        report(&format!("grad {}", r.name), r.passed(), format!("max rel err {:.2e}", r.max_rel_error));
    }
    let m = check::model_gradient_check(points, 7)?;
    report("grad full model", m.passed(), format!("max rel err {:.2e}", m.max_rel_error));
    let (layouts, bad) = check::mask_oracle_enumeration(4, 6)?;
    report("mask rule", bad == 0, format!("{layouts} layouts, {bad} mismatched entries"));
    let poles = check::cp_pole_values(20, 3)?;
    let pass = poles
        .iter()
        .all(|&(g, r)| (-1.0..=-0.995).contains(&g) && (0.995..=1.0).contains(&r));
    report("cp poles", pass, format!("{} triples", poles.len()));
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Cmd::GenData { count } => {
            Manifest::new("gen-data", &cfg).write(&cfg.out, &cfg)?;
            let scenes = generate_dataset(&cfg.scene_config(), cfg.seed, count.unwrap_or(cfg.train_scenes), None)?;
            write_dataset(&cfg.scene_config(), &scenes, cfg.out.join("data"))?;
            println!("wrote {} scenes to {}", scenes.len(), cfg.out.join("data").display());
        }
        Cmd::Train { resume } => {
            let out = harness::run_train(&cfg, resume.as_deref())?;
            if let Some(r) = out.records.last() {
                println!("step {} L_fm {} L_fs {} L {}", r.step, r.l_fm, r.l_fs, r.l);
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Cmd::Sample { checkpoint, count } => {
            let imgs = harness::run_sample(&cfg, &checkpoint, count)?;
            println!("wrote {} samples to {}", imgs.len(), cfg.out.display());
        }
        Cmd::Eval { checkpoint, thresholds } => {
            let ev = harness::run_eval(&cfg, &checkpoint, &thresholds.into())?;
            print!("{}", harness::eval::summary_text(&ev));
        }
        Cmd::Ablate { suite, thresholds } => {
            let suite: AblationSuite = suite.parse()?;
            let rows = harness::run_ablation(suite, &cfg, &thresholds.into())?;
            print!("{}", harness::ablate::rows_to_csv(suite, &rows));
        }
        Cmd::Check { points } => {
            if points == 0 {
                bail!("--points must be at least 1");
            }
            return run_check(points);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
