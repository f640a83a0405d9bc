//! Command-line driver. Every command reads one config file; artifacts go
//! under the output directory and carry the config hash.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::classify::{read_metrics_csv, write_metrics_csv, MetricsRow};
use crate::cohort::{read_cohort_with_header, write_cohort_with_header, TrajectoryRecord};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::guidance::{read_trajectories, write_trajectories, GeneratedTrajectory};
use crate::io::{write_atomic, write_jsonl, ArtifactHeader};
use crate::pipeline::{self, Checkpoint, CohortSplits, GeneratedSplits, SweepAxis};

#[derive(Debug, Parser)]
#[command(name = "trajdiff", version, about = "Trajectory diffusion experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a cohort and write train/val/test splits.
    GenCohort(Common),
    /// Curriculum-train the denoiser and fit the guidance models.
    Train(Common),
    /// Generate trajectories for the train and test splits.
    Sample(SampleArgs),
    /// Fit classifiers and write baseline-only / unguided / guided metrics.
    Eval(EvalArgs),
    /// Run the full pipeline for each value of one hyperparameter.
    Sweep(SweepArgs),
    /// Run the single-component ablations and the full model.
    Ablate(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Accept artifacts written under a different config.
    #[arg(long)]
    pub allow_hash_mismatch: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, conflicts_with = "unguided")]
    pub guided: bool,
    #[arg(long)]
    pub unguided: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// T_steps, D_max or N.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<usize>,
}

/// Resolved config plus output location.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub allow_hash_mismatch: bool,
}

impl Context {
    pub fn from_common(c: &Common) -> Result<Self> {
        let mut config = RunConfig::load(&c.config)?;
        if let Some(s) = c.seed {
            config.seed = s;
        }
        let out = c.out.clone().unwrap_or_else(|| PathBuf::from(&config.output_dir));
        Ok(Self {
            config,
            out,
            allow_hash_mismatch: c.allow_hash_mismatch,
        })
    }

    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            config,
            out: out.into(),
            allow_hash_mismatch: false,
        }
    }

    fn hash(&self) -> String {
        self.config.hash()
    }

    fn header(&self, kind: &str) -> ArtifactHeader {
        ArtifactHeader::new(kind, &self.hash())
    }

    fn check(&self, path: &Path, found: Option<&str>) -> Result<()> {
        let expected = self.hash();
        match found {
            Some(h) if h == expected => Ok(()),
            _ if self.allow_hash_mismatch => {
                log::warn!("{}: config hash mismatch accepted", path.display());
                Ok(())
            }
            found => Err(Error::HashMismatch {
                artifact: path.to_path_buf(),
                found: found.unwrap_or("none").to_owned(),
                expected,
            }),
        }
    }

    pub fn cohort_path(&self, split: &str) -> PathBuf {
        self.out.join("cohort").join(format!("{split}.jsonl"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out.join("checkpoint.json")
    }

    pub fn trajectory_path(&self, guided: bool, split: &str) -> PathBuf {
        let mode = if guided { "guided" } else { "unguided" };
        self.out.join("trajectories").join(format!("{mode}-{split}.jsonl"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out.join("metrics.csv")
    }

    fn read_split(&self, split: &str) -> Result<Vec<TrajectoryRecord>> {
        let path = self.cohort_path(split);
        let (header, records) = read_cohort_with_header(&path)?;
        self.check(&path, header.as_ref().map(|h| h.config_hash.as_str()))?;
        Ok(records)
    }

    fn read_splits(&self) -> Result<CohortSplits> {
        Ok(CohortSplits {
            train: self.read_split("train")?,
            val: self.read_split("val")?,
            test: self.read_split("test")?,
        })
    }

    fn read_traj(&self, guided: bool, split: &str) -> Result<Vec<GeneratedTrajectory>> {
        let path = self.trajectory_path(guided, split);
        let (header, t) = read_trajectories(&path)?;
        self.check(&path, header.as_ref().map(|h| h.config_hash.as_str()))?;
        Ok(t)
    }
}

pub fn cmd_gen_cohort(ctx: &Context) -> Result<CohortSplits> {
    let splits = pipeline::build_splits(&ctx.config)?;
    for (name, recs) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        write_cohort_with_header(recs, &ctx.header(&format!("cohort-{name}")), &ctx.cohort_path(name))?;
    }
    log::info!(
        "cohort: {} train / {} val / {} test",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(splits)
}

pub fn cmd_train(ctx: &Context) -> Result<Checkpoint> {
    let train = ctx.read_split("train")?;
    let (models, state) = pipeline::train_models(&ctx.config, &train)?;
    let ckpt = Checkpoint::from_models(&models, &ctx.hash());
    write_atomic(&ctx.checkpoint_path(), ckpt.to_json().as_bytes())?;
    write_atomic(&ctx.out.join("phases.csv"), &pipeline::rows_csv(&state.phases)?)?;
    write_jsonl(&ctx.out.join("augmentation.jsonl"), Some(&ctx.header("augmentation")), &state.augmentation_log)?;
    Ok(ckpt)
}

pub fn load_checkpoint(ctx: &Context) -> Result<pipeline::TrainedModels> {
    let path = ctx.checkpoint_path();
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ckpt = Checkpoint::from_json(&text)?;
    ctx.check(&path, Some(&ckpt.config_hash))?;
    ckpt.into_models(&ctx.config)
}

/// Generates for both splits; unguided means one candidate per step.
pub fn cmd_sample(ctx: &Context, guided: bool) -> Result<GeneratedSplits> {
    let models = load_checkpoint(ctx)?;
    let splits = CohortSplits {
        train: ctx.read_split("train")?,
        val: Vec::new(),
        test: ctx.read_split("test")?,
    };
    let n = if guided { models.candidates(&ctx.config) } else { 1 };
    let g = pipeline::generate_splits(&ctx.config, &models, &splits, n)?;
    let header = ctx.header("trajectories");
    write_trajectories(&ctx.trajectory_path(guided, "train"), Some(&header), &g.train)?;
    write_trajectories(&ctx.trajectory_path(guided, "test"), Some(&header), &g.test)?;
    Ok(g)
}

pub fn cmd_eval(ctx: &Context, run_id: &str) -> Result<Vec<MetricsRow>> {
    let splits = ctx.read_splits()?;
    let load = |guided: bool| -> Result<GeneratedSplits> {
        Ok(GeneratedSplits {
            n: 0,
            train: ctx.read_traj(guided, "train")?,
            test: ctx.read_traj(guided, "test")?,
        })
    };
    let rows = pipeline::evaluate(&ctx.config, &splits, &load(false)?, &load(true)?, run_id)?;
    write_metrics_csv(&ctx.metrics_path(), &rows)?;
    Ok(rows)
}

pub fn cmd_sweep(ctx: &Context, axis: &str, values: &[usize]) -> Result<Vec<pipeline::SweepRow>> {
    let axis: SweepAxis = axis.parse()?;
    let rows = pipeline::sweep(&ctx.config, axis, values)?;
    write_atomic(&ctx.out.join(format!("sweep-{}.csv", axis.name())), &pipeline::rows_csv(&rows)?)?;
    Ok(rows)
}

pub fn cmd_ablate(ctx: &Context) -> Result<Vec<pipeline::AblationRow>> {
    let rows = pipeline::ablate(&ctx.config)?;
    write_atomic(&ctx.out.join("ablation.csv"), &pipeline::rows_csv(&rows)?)?;
    Ok(rows)
}

fn set_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Run a parsed command.
pub fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::GenCohort(c) | Command::Train(c) | Command::Ablate(c) => c,
        Command::Sample(s) => &s.common,
        Command::Eval(e) => &e.common,
        Command::Sweep(s) => &s.common,
    };
    set_threads(common.threads)?;
    let ctx = Context::from_common(common)?;
    match &cli.command {
        Command::GenCohort(_) => cmd_gen_cohort(&ctx).map(drop),
        Command::Train(_) => cmd_train(&ctx).map(drop),
        Command::Sample(s) => cmd_sample(&ctx, !s.unguided).map(drop),
        Command::Eval(_) => {
            let rows = cmd_eval(&ctx, &format!("seed{}", ctx.config.seed))?;
            for r in &rows {
                println!("{:<14} acc {:.3} auc {}", r.mode, r.acc, r.auc.map_or("n/a".into(), |a| format!("{a:.3}")));
            }
            Ok(())
        }
        Command::Sweep(s) => {
            for r in cmd_sweep(&ctx, &s.axis, &s.values)? {
                println!("{}={} acc {:.3} auc {:?}", r.axis, r.value, r.acc, r.auc);
            }
            Ok(())
        }
        Command::Ablate(_) => {
            for r in cmd_ablate(&ctx)? {
                println!("{:<24} acc {:.3} auc {:?}", r.setting, r.acc, r.auc);
            }
            Ok(())
        }
    }
}

/// Read back a metrics file written by `eval`.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    read_metrics_csv(path)
}
