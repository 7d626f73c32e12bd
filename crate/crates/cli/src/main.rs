use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use biadapt::ablation::{AblationGrid, Variant};
use biadapt::experiment::{build_scenario, config_digest, evaluable_domains, heatmaps, RunError};
use biadapt::{parse_config, run_ablation, run_experiment, ExperimentSpec, Preset};
use biadapt_core::eval::{emit_report, evaluate_domains};
use biadapt_core::nets::ModelState;
use biadapt_core::synthdata::export_domain;
use biadapt_core::trainer::TrainTrace;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "biadapt", version, about = "Bi-directional domain adaptation for forgery detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key: value` config file; unset keys come from the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training and data seed (overrides `seed` and `data_seed`).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper-parity", "baseline"])]
    preset: String,
}

impl Common {
    fn spec(&self) -> Result<ExperimentSpec, RunError> {
        let preset: Preset = self.preset.parse()?;
        let mut spec = match &self.config {
            Some(p) => parse_config(p, preset)?,
            None => preset.spec(),
        };
        if let Some(s) = self.seed {
            spec = spec.with_seed(s);
        }
        if let Some(o) = &self.out {
            spec.out_dir = o.clone();
        }
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Export the scenario's domains as `real/` and `fake/` PNG folders.
    Generate(Common),
    /// Baseline, forward and backward runs with reports and checkpoints.
    Train(Common),
    /// Evaluate a checkpoint on the scenario's test splits.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run an ablation grid and write a merged table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',', default_values_t = biadapt::ablation::STANDARD_VARIANTS.map(String::from))]
        variants: Vec<String>,
        /// Comma-separated seeds; defaults to the spec's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Grad-CAM heatmaps of a checkpoint on the first test images.
    Gradcam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Images per domain.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("BIADAPT_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("BIADAPT_THREADS must be a positive integer, got `{v}`"))?;
        anyhow::ensure!(n > 0, "BIADAPT_THREADS must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<ModelState, RunError> {
    Ok(ModelState::load(path)?)
}

fn run(cmd: Command) -> Result<(), RunError> {
    match cmd {
        Command::Generate(c) => {
            let spec = c.spec()?;
            spec.validate()?;
            let scenario = build_scenario(&spec.scenario, spec.backbone.image_side)?;
            for d in std::iter::once(&scenario.source).chain(&scenario.targets) {
                let dir = spec.out_dir.join(&d.domain_id);
                let n = export_domain(d, &dir)?;
                println!("{}: {n} images -> {}", d.domain_id, dir.display());
            }
        }
        Command::Train(c) => {
            let outcome = run_experiment(&c.spec()?)?;
            for r in &outcome.reports {
                let aucs: Vec<String> = r.domains.iter().map(|d| format!("{} {:.4}", d.id, d.auc)).collect();
                println!("{:9} {}", r.stage, aucs.join("  "));
            }
            println!("artifacts in {}", outcome.out_dir.display());
        }
        Command::Evaluate { common, checkpoint } => {
            let spec = common.spec()?;
            spec.validate()?;
            let state = load_checkpoint(&checkpoint)?;
            let scenario = build_scenario(&spec.scenario, state.backbone.image_side)?;
            let run_id = checkpoint.display().to_string();
            let report = evaluate_domains(&state, &evaluable_domains(&scenario), &run_id, "evaluate", &config_digest(&spec))?;
            emit_report(&report, &TrainTrace::default(), &[], &spec.out_dir, spec.overwrite)?;
            for d in &report.domains {
                println!("{} {:.4}", d.id, d.auc);
            }
        }
        Command::Ablate { common, variants, seeds } => {
            let spec = common.spec()?;
            let variants = variants
                .iter()
                .map(|n| {
                    Variant::standard(n).ok_or_else(|| {
                        biadapt::ConfigError::Invalid(format!(
                            "unknown variant `{n}` (known: {})",
                            biadapt::ablation::STANDARD_VARIANTS.join(", ")
                        ))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let seeds = if seeds.is_empty() { vec![spec.train.seed] } else { seeds };
            let grid = AblationGrid {
                scenarios: vec![spec.scenario.clone()],
                base: spec,
                variants,
                seeds,
            };
            let table = run_ablation(&grid, Some(&grid.base.out_dir), |_| {})?;
            print!("{}", table.to_markdown());
        }
        Command::Gradcam { common, checkpoint, count } => {
            let spec = common.spec()?;
            spec.validate()?;
            let state = load_checkpoint(&checkpoint)?;
            let scenario = build_scenario(&spec.scenario, state.backbone.image_side)?;
            std::fs::create_dir_all(&spec.out_dir).map_err(|e| RunError::Io {
                path: spec.out_dir.clone(),
                source: e,
            })?;
            for h in heatmaps(&state, &scenario, count)? {
                let p = spec.out_dir.join(h.file_name());
                h.map.to_rgb8().save(&p).map_err(|e| biadapt_core::Error::Ingestion {
                    path: p.clone(),
                    reason: e.to_string(),
                })?;
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e.record()).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
