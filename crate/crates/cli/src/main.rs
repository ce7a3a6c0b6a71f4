use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adm_core::eval::{emit_report, magnitude_report, render_csv, render_histogram_csv, render_markdown, ReportFormat};
use adm_core::pipeline::{
    evaluate_model, expand_novel_branch, load_checkpoint, make_synthetic_stream, merge_check, pretrain_base,
    run_experiment_on, save_checkpoint, train_task, StreamSpec,
};
use adm_core::{ExperimentConfig, MergeMode};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

/// Incremental novel class discovery with mergeable convolution branches.
#[derive(Parser)]
#[command(name = "adm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (`key = value` lines); defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory for metrics and checkpoints.
    #[arg(long, value_name = "DIR", default_value = "runs/adm")]
    out: PathBuf,
    /// Overrides the configured merge mode.
    #[arg(long, value_parser = ["imm", "aff", "amm"])]
    mode: Option<String>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = &self.mode {
            cfg.set("merge_mode", mode)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn mode_override(&self) -> Result<Option<MergeMode>> {
        self.mode.as_deref().map(|m| m.parse().map_err(anyhow::Error::from)).transpose()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and fold the base network; writes `base.admc` and the base metrics.
    Pretrain(Common),
    /// Full experiment: pretrain, then expand, train, evaluate and merge per task.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write the last-block magnitude histogram of old-class inputs,
        /// taken from the trained but unmerged model of the first task.
        #[arg(long)]
        magnitudes: bool,
    },
    /// Score a checkpoint against the task stream regenerated from the config.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score; defaults to `<out>/model.admc`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Merge randomized novel branches and report the largest output change.
    MergeCheck {
        #[command(flatten)]
        common: Common,
        /// Random inputs to compare on.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Largest tolerated logit difference.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f32,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Pretrain(common) => pretrain(&common),
        Command::Run { common, magnitudes } => run(&common, magnitudes),
        Command::Eval { common, checkpoint } => eval(&common, checkpoint),
        Command::MergeCheck {
            common,
            samples,
            tolerance,
        } => check_merge(&common, samples, tolerance),
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn pretrain(common: &Common) -> Result<ExitCode> {
    let cfg = common.config()?;
    prepare_out(&common.out)?;
    let stream = make_synthetic_stream(&StreamSpec::from_config(&cfg))?;
    let outcome = pretrain_base(&cfg, &stream.base_train)?;
    let path = common.out.join("base.admc");
    save_checkpoint(&outcome.model, &path)?;
    let reports = evaluate_model(&outcome.model, &stream)?;
    emit_report(&reports, &common.out.join("base_metrics.csv"), ReportFormat::Csv)?;
    println!(
        "pretrained {} base classes: train accuracy {:.4}, test accuracy {:.4}, final loss {:.4}",
        cfg.base_classes,
        outcome.train_accuracy,
        reports[0].old_acc,
        outcome.epoch_losses.last().copied().unwrap_or(f32::NAN)
    );
    println!("checkpoint written to {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn run(common: &Common, magnitudes: bool) -> Result<ExitCode> {
    let cfg = common.config()?;
    prepare_out(&common.out)?;
    fs::write(common.out.join("config.txt"), cfg.render())?;
    let stream = make_synthetic_stream(&StreamSpec::from_config(&cfg))?;
    let report = run_experiment_on(&cfg, &stream, Some(&common.out))?;
    print!("{}", render_markdown(&report.reports()));
    for t in &report.tasks {
        if let Some(post) = &t.post_merge {
            println!(
                "task {}: old {:.4} before merge, {:.4} after",
                t.task, t.pre_merge.old_acc, post.old_acc
            );
        }
    }
    if magnitudes {
        write_magnitudes(&cfg, &stream, &common.out)?;
    }
    println!("metrics and checkpoint written to {}", common.out.display());
    Ok(ExitCode::SUCCESS)
}

fn write_magnitudes(cfg: &ExperimentConfig, stream: &adm_core::TaskStream, out: &Path) -> Result<()> {
    let Some(task) = stream.novel.first() else {
        bail!("the configuration has no novel task to measure");
    };
    let mut model = pretrain_base(cfg, &stream.base_train)?.model;
    expand_novel_branch(&mut model, task.train.num_classes, cfg.merge_mode, cfg)?;
    train_task(&mut model, &task.train, cfg)?;
    let report = magnitude_report(&model, &stream.base_test.x, 20)?;
    fs::write(out.join("magnitudes.csv"), render_histogram_csv(&report))?;
    println!(
        "mean max magnitude on old classes: base {:.4}, novel {:.4}",
        report.base.mean, report.novel.mean
    );
    Ok(())
}

fn eval(common: &Common, checkpoint: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = common.config()?;
    let path = checkpoint.unwrap_or_else(|| common.out.join("model.admc"));
    let model = load_checkpoint(&path, &cfg.arch).with_context(|| format!("loading {}", path.display()))?;
    let stream = make_synthetic_stream(&StreamSpec::from_config(&cfg))?;
    let reports = evaluate_model(&model, &stream)?;
    print!("{}", render_csv(&reports));
    if common.out.is_dir() {
        emit_report(&reports, &common.out.join("eval.csv"), ReportFormat::Csv)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn check_merge(common: &Common, samples: usize, tolerance: f32) -> Result<ExitCode> {
    let cfg = common.config()?;
    let modes = match common.mode_override()? {
        Some(m) => vec![m],
        None => vec![MergeMode::Imm, MergeMode::Amm, MergeMode::Aff],
    };
    let mut ok = true;
    for mode in modes {
        match merge_check(&cfg, mode, samples) {
            Ok(c) => {
                let pass = c.max_abs_diff <= tolerance && c.backbone_params_after == c.backbone_params_before;
                ok &= pass;
                println!(
                    "{mode}: max |dual - merged| = {:.3e}, backbone params {} -> {} -> {} [{}]",
                    c.max_abs_diff,
                    c.backbone_params_before,
                    c.backbone_params_expanded,
                    c.backbone_params_after,
                    if pass { "ok" } else { "FAILED" }
                );
            }
            Err(e) if mode == MergeMode::Aff => println!("{mode}: not mergeable ({e})"),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
