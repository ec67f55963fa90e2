use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tactile_core::bench::{emit_report, height_ambiguity, run_benchmark, BenchConfig, StateSource};
use tactile_core::filter::{train_inloop, train_stage1, train_stage2, FilterCheckpoint, FilterTrainer};
use tactile_core::pipeline::{
    collect_offline_data, load_offline_data, run_pipeline, run_stage_from, stage_plans, stage_seed, worker_settings,
    PipelineConfig, RunLayout, StageId,
};
use tactile_core::policy::PolicyCheckpoint;

#[derive(Parser)]
#[command(
    name = "tactile",
    version,
    about = "Tactile in-hand cube reorientation: training and benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterStage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Inloop,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy stage (S1, S2 or S5) of a run.
    TrainPolicy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage: StageId,
        /// Continue from a checkpoint of the same stage (e.g. checkpoints/latest.json).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the particle filter outside the pipeline.
    TrainFilter {
        #[arg(long, value_enum)]
        stage: FilterStage,
        /// Policy checkpoint used to collect data.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Directory with train/validation/test splits; collected if missing.
        #[arg(long)]
        data: PathBuf,
        /// Filter checkpoint to continue from (required for 2 and inloop).
        #[arg(long)]
        filter: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output checkpoint; defaults to `<data>/filter-<stage>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole curriculum, optionally restarting at a later stage.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from_stage: Option<StageId>,
    },
    /// Run the 24-goal benchmark for a policy, with or without the filter.
    Bench {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        filter: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        runs_per_cell: usize,
        #[arg(long, default_value_t = 8)]
        workers: usize,
        /// Also measure per-axis estimate error after this many seconds.
        #[arg(long)]
        height_seconds: Option<f64>,
        #[arg(long, default_value_t = 50)]
        height_episodes: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => Ok(PipelineConfig::load(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn train_policy(config: &Path, stage: StageId, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(Some(config))?;
    let plan = stage_plans(&cfg)
        .into_iter()
        .find(|p| p.stage == stage)
        .expect("every stage has a plan");
    if plan.reward.is_none() {
        bail!("{stage} trains the filter; use train-filter or pipeline");
    }
    let resume = resume
        .map(|p| PolicyCheckpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let layout = RunLayout::new(cfg.run_dir());
    let outcome = run_stage_from(&cfg, &plan, &layout, resume)?;
    println!(
        "{stage}: benchmark rate {:.3} [{:.3}, {:.3}], checkpoint {}",
        outcome.bench_rate,
        outcome.bench_ci.0,
        outcome.bench_ci.1,
        layout.policy_checkpoint(stage).display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_filter(
    stage: FilterStage,
    policy: Option<&Path>,
    data: &Path,
    filter: Option<&Path>,
    config: Option<&Path>,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let fc = &cfg.filter;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = policy.map(PolicyCheckpoint::load).transpose()?.map(|c| c.agent.actor);
    let offline = if data.join("train.tfds").exists() {
        load_offline_data(data)?
    } else {
        let Some(p) = &policy else {
            bail!(
                "{} holds no dataset and no --policy was given to collect one",
                data.display()
            );
        };
        collect_offline_data(&cfg, p, data, rng.gen())?
    };
    let prior = filter.map(FilterCheckpoint::load).transpose()?;
    let (name, trainer) = match stage {
        FilterStage::One => {
            let mut t = FilterTrainer::new(fc, &mut rng);
            let r = train_stage1(
                &mut t,
                &offline.train.sequences,
                &offline.validation.sequences,
                fc,
                rng.gen(),
            )?;
            println!(
                "stage 1: {} epochs, final validation loss {:.5}, identity baseline {:.5}",
                r.val_loss.len(),
                r.val_loss.last().copied().unwrap_or(f64::NAN),
                r.identity_val_loss
            );
            ("stage1", t)
        }
        FilterStage::Two => {
            let Some(prior) = prior else {
                bail!("stage 2 continues from --filter")
            };
            let mut t = prior.trainer;
            let r = train_stage2(
                &mut t,
                &offline.train.sequences,
                &offline.validation.sequences,
                fc,
                rng.gen(),
            )?;
            println!("stage 2: validation unrolled loss per epoch {:?}", r.val_loss);
            ("stage2", t)
        }
        FilterStage::Inloop => {
            let (Some(prior), Some(policy)) = (prior, &policy) else {
                bail!("in-loop training needs --filter and --policy")
            };
            let mut t = prior.trainer;
            let plan = &stage_plans(&cfg)[3];
            let settings = worker_settings(&cfg, plan);
            let mut dataset = offline.train.clone();
            let baseline = offline.stats.success_rate();
            let r = train_inloop(
                &mut t,
                policy,
                &settings,
                &mut dataset,
                &offline.test.sequences,
                baseline,
                fc,
                rng.gen(),
            )?;
            for (i, it) in r.iterations.iter().enumerate() {
                println!(
                    "iteration {}: position error {:.4} m, rotation error {:.4} rad",
                    i + 1,
                    it.eval.position_error,
                    it.eval.rotation_error
                );
            }
            dataset.save(&data.join("combined.tfds"))?;
            ("inloop", t)
        }
    };
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| data.join(format!("filter-{name}.json")));
    FilterCheckpoint {
        stage: name.into(),
        config: fc.clone(),
        trainer,
    }
    .save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn pipeline(config: &Path, from: Option<StageId>) -> Result<()> {
    let cfg = load_config(Some(config))?;
    let summary = run_pipeline(&cfg, from)?;
    println!("stage  rate    95% interval      reference");
    for o in &summary.stages {
        println!(
            "{:<5}  {:.3}  [{:.3}, {:.3}]    {:.2}",
            o.stage, o.bench_rate, o.bench_ci.0, o.bench_ci.1, o.plan.reference_rate
        );
    }
    println!("summary: {}", RunLayout::new(cfg.run_dir()).summary().display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bench(
    policy: &Path,
    filter: Option<&Path>,
    seed: u64,
    out: &Path,
    runs_per_cell: usize,
    workers: usize,
    height_seconds: Option<f64>,
    height_episodes: usize,
) -> Result<()> {
    let policy = PolicyCheckpoint::load(policy)?.agent.actor;
    let filter = filter.map(FilterCheckpoint::load).transpose()?;
    let cfg = BenchConfig {
        runs_per_cell,
        workers,
        ..BenchConfig::default()
    };
    let source = match &filter {
        Some(f) => StateSource::Filter(&f.trainer),
        None => StateSource::Simulator,
    };
    let start = std::time::Instant::now();
    let report = run_benchmark(&policy, source, &cfg, seed)?;
    emit_report(&report, out)?;
    println!(
        "{} episodes in {:.0} s: success rate {:.3} [{:.3}, {:.3}]",
        report.trials,
        start.elapsed().as_secs_f64(),
        report.rate,
        report.ci_low,
        report.ci_high
    );
    for r in &report.per_friction {
        println!(
            "  eta_spin {:>7.0e}: {:.3} ({}/{})",
            r.eta_spin, r.rate, r.successes, r.trials
        );
    }
    if let Some(secs) = height_seconds {
        let Some(f) = &filter else {
            bail!("--height-seconds needs --filter")
        };
        let steps = (secs / (cfg.sim.dt * cfg.sim.substeps as f64)).round() as u32;
        let h = height_ambiguity(
            &policy,
            &f.trainer,
            cfg.particles,
            height_episodes,
            steps,
            stage_seed(seed, StageId::S5),
        )?;
        println!(
            "median estimate error after {secs} s: x {:.4} y {:.4} z {:.4} m ({} replaced)",
            h.median_error[0], h.median_error[1], h.median_error[2], h.discarded
        );
        let file = std::fs::File::create(out.join("height.json"))?;
        serde_json::to_writer_pretty(file, &h)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::TrainPolicy { config, stage, resume } => train_policy(&config, stage, resume.as_deref()),
        Command::TrainFilter {
            stage,
            policy,
            data,
            filter,
            config,
            seed,
            out,
        } => train_filter(
            stage,
            policy.as_deref(),
            &data,
            filter.as_deref(),
            config.as_deref(),
            seed,
            out.as_deref(),
        ),
        Command::Pipeline { config, from_stage } => pipeline(&config, from_stage),
        Command::Bench {
            policy,
            filter,
            seed,
            out,
            runs_per_cell,
            workers,
            height_seconds,
            height_episodes,
        } => bench(
            &policy,
            filter.as_deref(),
            seed,
            &out,
            runs_per_cell,
            workers,
            height_seconds,
            height_episodes,
        ),
    }
}
