use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use osdx_cli::config::{Combination, ExperimentConfig, Task};
use osdx_cli::reproduce::{cmd_reproduce, effective_kb_config, effective_train_config};
use osdx_cli::stages::{
    cmd_ensemble, cmd_evaluate, cmd_kb_gen, cmd_simulate, cmd_simulate_profiles, cmd_site_plan, cmd_split,
    cmd_train, load_split, EvalOptions, EvalTarget, TrainRequest,
};
use osdx_cli::CliError;
use osdx_core::kbmodel::load_kb;
use osdx_core::metrics::summary_csv;
use osdx_core::openset::LossMode;
use osdx_core::seed;

#[derive(Parser)]
#[command(name = "osdx", version, about = "Open-set diagnosis workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic knowledge base.
    KbGen(Common),
    /// Simulate profile cases (no --split) or experiment datasets.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Site plan; switches to per-site Task 2 datasets.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Build the label split, or redraw the extras of a base split.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        select: Vec<PathBuf>,
        #[arg(long)]
        extra: Vec<PathBuf>,
        #[arg(long, required = true)]
        val: Vec<PathBuf>,
        #[arg(long)]
        loss_mode: String,
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Combine expert models into a naive or learned ensemble.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        expert: Vec<PathBuf>,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        heldout: Option<PathBuf>,
        /// `naive CE|BG|EOS`, or CE+CE, BG+CE, EOS+CE, EOS+BG, EOS+EOS.
        #[arg(long)]
        combination: String,
        #[arg(long, default_value = "ensemble")]
        name: String,
    },
    /// Score a model or ensemble on known and unknown test sets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "ensemble", required_unless_present = "ensemble")]
        model: Option<PathBuf>,
        #[arg(long)]
        ensemble: Option<PathBuf>,
        #[arg(long)]
        known: PathBuf,
        #[arg(long)]
        unknown: PathBuf,
        #[arg(long, default_value = "eval")]
        name: String,
    },
    /// Run every stage for every replicate and write the summary table.
    Reproduce(Common),
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut config = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    let out = common
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((config, out))
}

fn show(label: &str, path: &Path) {
    println!("{label}: {}", path.display());
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::KbGen(common) => {
            let (config, out) = load_config(&common)?;
            show("knowledge base", &cmd_kb_gen(&effective_kb_config(&config), &out)?);
        }
        Command::Simulate { common, kb, split, plan } => {
            let (config, out) = load_config(&common)?;
            match split {
                None => show("profiles", &cmd_simulate_profiles(&kb, &config, config.seed, &out)?),
                Some(split) => {
                    let files = cmd_simulate(&kb, &split, plan.as_deref(), &config, config.seed, &out)?;
                    println!("{}", serde_json::to_string_pretty(&files).map_err(osdx_core::Error::from)?);
                }
            }
        }
        Command::Split { common, kb, profiles, base, replicate } => {
            let (config, out) = load_config(&common)?;
            let split_path = out.join("split.json");
            let extra_seed = seed::derive(config.seed, &[seed::tag::EXTRA, replicate]);
            let split = cmd_split(&kb, profiles.as_deref(), base.as_deref(), &config.split, extra_seed, &split_path)?;
            println!(
                "split: {} select, {} unknown, {} extra; {} components explain {:.4}",
                split.l_select.len(),
                split.l_unknown.len(),
                split.l_extra.len(),
                split.pca_components_retained,
                split.variance_explained
            );
            if config.task == Task::Task2 {
                let overlap = config.task2.overlap_percent[0];
                let plan_seed = seed::derive(config.seed, &[seed::tag::SITE_PLAN, replicate, 0]);
                let plan_path = out.join("site_plan.json");
                let plan = cmd_site_plan(&kb, &split_path, &config, overlap, plan_seed, &plan_path)?;
                println!("site plan: {} sites, measured overlap {:.4}", plan.sites.len(), plan.overlap_fraction);
            }
        }
        Command::Train { common, select, extra, val, loss_mode, name } => {
            let (config, out) = load_config(&common)?;
            let loss_mode: LossMode = loss_mode.parse()?;
            let req = TrainRequest { select, extra, val, loss_mode, config: effective_train_config(&config) };
            let outcome = cmd_train(&req, &out.join(format!("{name}.json")))?;
            println!("trained {} epochs, best epoch {}", outcome.epochs, outcome.best_epoch);
            show("model", &outcome.model_path);
        }
        Command::Ensemble { common, expert, kb, split, heldout, combination, name } => {
            let (config, out) = load_config(&common)?;
            let combination = Combination::parse(&combination)?;
            let kb = load_kb(&kb)?;
            let split = load_split(&split, &kb)?;
            let l_select: Vec<u32> = split.l_select.iter().copied().collect();
            let outcome = cmd_ensemble(
                &expert,
                &l_select,
                heldout.as_deref(),
                combination,
                &effective_train_config(&config),
                &out.join(format!("{name}.json")),
            )?;
            show("ensemble", &outcome.manifest_path);
        }
        Command::Evaluate { common, model, ensemble, known, unknown, name } => {
            let (config, out) = load_config(&common)?;
            let target = match (model, ensemble) {
                (Some(m), _) => EvalTarget::Model(m),
                (None, Some(e)) => EvalTarget::Ensemble(e),
                (None, None) => return Err(CliError::Config("pass --model or --ensemble".into())),
            };
            let options = EvalOptions::from_config(&config);
            let metrics = cmd_evaluate(&target, &known, &unknown, &options, &name, &out)?;
            let rows = osdx_cli::stages::summary_rows(&[&metrics], &options)?;
            print!("{}", summary_csv(&rows));
        }
        Command::Reproduce(common) => {
            let (config, out) = load_config(&common)?;
            let report = cmd_reproduce(&config, &out)?;
            print!("{}", summary_csv(&report.summary));
            show("table", &report.table_path);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("osdx: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
