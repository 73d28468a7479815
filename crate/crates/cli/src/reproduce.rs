//! End-to-end runs over all replicates.
//!
//! The knowledge base, the selected and unknown sets and the test cases are
//! fixed by the master seed; each replicate redraws `L_extra` (and, for
//! Task 2, the site plan) and retrains everything downstream.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use osdx_core::kbmodel::KbConfig;
use osdx_core::metrics::{summary_csv, SummaryRow};
use osdx_core::openset::{LossMode, TrainConfig};
use osdx_core::seed;

use crate::config::{ExperimentConfig, Task};
use crate::stages::{
    cmd_ensemble, cmd_evaluate, cmd_kb_gen, cmd_simulate, cmd_simulate_profiles, cmd_site_plan, cmd_split,
    cmd_train, summary_rows, AlgorithmMetrics, DataFiles, EvalOptions, EvalTarget, TrainRequest,
};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub const ORACLE_LABEL: &str = "oracle BG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub replicate: usize,
    /// Task 2 only.
    pub overlap_percent: Option<f64>,
    pub measured_overlap: Option<f64>,
    pub rows: Vec<AlgorithmMetrics>,
    /// Task 2 only: every expert file was byte-identical after ensembling.
    pub experts_unchanged: Option<bool>,
    pub dir: PathBuf,
}

impl ReplicateReport {
    pub fn row(&self, algorithm: &str) -> Option<&AlgorithmMetrics> {
        self.rows.iter().find(|r| r.algorithm == algorithm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReproduceReport {
    pub task: Task,
    pub fpr_targets: Vec<f64>,
    pub recall_k: Vec<usize>,
    pub replicates: Vec<ReplicateReport>,
    pub summary: Vec<SummaryRow>,
    pub table_path: PathBuf,
}

impl ReproduceReport {
    /// CCR (percent) of `algorithm` at `target` in replicate `r` and, for
    /// Task 2, at the given overlap.
    pub fn ccr(&self, r: usize, overlap: Option<f64>, algorithm: &str, target: f64) -> Option<f64> {
        let i = self.fpr_targets.iter().position(|&t| t == target)?;
        self.replicates
            .iter()
            .find(|rep| rep.replicate == r && rep.overlap_percent == overlap)?
            .row(algorithm)?
            .ccr[i]
    }
}

fn task1_label(mode: LossMode) -> String {
    mode.to_string()
}

fn overlap_label(label: &str, overlap: f64, sweep: bool) -> String {
    if sweep {
        format!("{label} [{overlap}% overlap]")
    } else {
        label.to_string()
    }
}

fn train_seed(base: &TrainConfig, parts: &[u64]) -> TrainConfig {
    TrainConfig {
        seed: seed::derive(base.seed, parts),
        ..base.clone()
    }
}

fn mode_index(mode: LossMode) -> u64 {
    LossMode::ALL.iter().position(|&m| m == mode).expect("listed") as u64
}

/// KB generator settings with the seed tied to the master seed.
pub fn effective_kb_config(config: &ExperimentConfig) -> KbConfig {
    KbConfig {
        seed: seed::derive(config.seed, &[seed::tag::KB, config.kb.seed]),
        ..config.kb.clone()
    }
}

/// Training settings with the seed tied to the master seed.
pub fn effective_train_config(config: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        seed: seed::derive(config.seed, &[seed::tag::TRAIN, config.train.seed]),
        ..config.train.clone()
    }
}

/// Runs every stage for every replicate and writes `table.csv` plus
/// `replicates.json` into `out_dir`.
pub fn cmd_reproduce(config: &ExperimentConfig, out_dir: &Path) -> Result<ReproduceReport> {
    config.validate()?;
    let master = config.seed;
    let kb_config = effective_kb_config(config);
    let train_base = effective_train_config(config);
    let kb_path = cmd_kb_gen(&kb_config, out_dir)?;
    let profiles = cmd_simulate_profiles(&kb_path, config, master, out_dir)?;
    let base_split = out_dir.join("split_base.json");
    cmd_split(
        &kb_path,
        Some(&profiles),
        None,
        &config.split,
        seed::derive(master, &[seed::tag::EXTRA, 0]),
        &base_split,
    )?;
    let options = EvalOptions::from_config(config);

    let mut replicates = Vec::new();
    for r in 0..config.replicates {
        let rep_dir = out_dir.join(format!("rep{r}"));
        let split_path = rep_dir.join("split.json");
        let split = cmd_split(
            &kb_path,
            None,
            Some(&base_split),
            &config.split,
            seed::derive(master, &[seed::tag::EXTRA, r as u64]),
            &split_path,
        )?;
        match config.task {
            Task::Task1 => {
                let data = cmd_simulate(&kb_path, &split_path, None, config, master, &rep_dir.join("data"))?;
                let rows = run_task1(config, &train_base, r, &data, &rep_dir, &options)?;
                replicates.push(ReplicateReport {
                    replicate: r,
                    overlap_percent: None,
                    measured_overlap: None,
                    rows,
                    experts_unchanged: None,
                    dir: rep_dir,
                });
            }
            Task::Task2 => {
                let sweep = config.task2.overlap_percent.len() > 1;
                for (oi, &overlap) in config.task2.overlap_percent.iter().enumerate() {
                    let dir = rep_dir.join(format!("overlap{overlap}"));
                    let plan_path = dir.join("site_plan.json");
                    let plan_seed = seed::derive(master, &[seed::tag::SITE_PLAN, r as u64, oi as u64]);
                    let plan = cmd_site_plan(&kb_path, &split_path, config, overlap, plan_seed, &plan_path)?;
                    let data = cmd_simulate(&kb_path, &split_path, Some(&plan_path), config, master, &dir.join("data"))?;
                    let l_select: Vec<u32> = split.l_select.iter().copied().collect();
                    let ctx = Task2Context {
                        config,
                        train_base: &train_base,
                        replicate: r,
                        overlap_index: oi,
                        data: &data,
                        l_select: &l_select,
                        dir: &dir,
                        options: &options,
                    };
                    let (mut rows, unchanged) = run_task2(&ctx)?;
                    for row in &mut rows {
                        row.algorithm = overlap_label(&row.algorithm, overlap, sweep);
                    }
                    replicates.push(ReplicateReport {
                        replicate: r,
                        overlap_percent: Some(overlap),
                        measured_overlap: Some(plan.overlap_fraction),
                        rows,
                        experts_unchanged: Some(unchanged),
                        dir,
                    });
                }
            }
        }
    }

    let all_rows: Vec<&AlgorithmMetrics> = replicates.iter().flat_map(|r| r.rows.iter()).collect();
    let summary = summary_rows(&all_rows, &options)?;
    let table_path = out_dir.join("table.csv");
    let write = |p: &Path, bytes: Vec<u8>| {
        fs::write(p, bytes).map_err(|e| CliError::Pipeline(osdx_core::Error::Io { path: p.to_path_buf(), source: e }))
    };
    write(&table_path, summary_csv(&summary).into_bytes())?;
    let mut json = serde_json::to_vec_pretty(&replicates).map_err(osdx_core::Error::from)?;
    json.push(b'\n');
    write(&out_dir.join("replicates.json"), json)?;
    Ok(ReproduceReport {
        task: config.task,
        fpr_targets: config.fpr_targets.clone(),
        recall_k: config.recall_k.clone(),
        replicates,
        summary,
        table_path,
    })
}

fn run_task1(
    config: &ExperimentConfig,
    train_base: &TrainConfig,
    r: usize,
    data: &DataFiles,
    rep_dir: &Path,
    options: &EvalOptions,
) -> Result<Vec<AlgorithmMetrics>> {
    let mut rows = Vec::new();
    let missing = || CliError::Config("task 1 data files missing".into());
    for &mode in &config.loss_modes {
        let req = TrainRequest {
            select: vec![data.train_select.clone().ok_or_else(missing)?],
            extra: vec![data.extra_train.clone().ok_or_else(missing)?],
            val: vec![data.val_select.clone().ok_or_else(missing)?],
            loss_mode: mode,
            config: train_seed(train_base, &[r as u64, mode_index(mode)]),
        };
        let label = task1_label(mode);
        let out = cmd_train(&req, &rep_dir.join("models").join(format!("{label}.json")))?;
        rows.push(cmd_evaluate(
            &EvalTarget::Model(out.model_path),
            &data.test_select,
            &data.test_unknown,
            options,
            &label,
            &rep_dir.join("eval"),
        )?);
    }
    Ok(rows)
}

struct Task2Context<'a> {
    config: &'a ExperimentConfig,
    train_base: &'a TrainConfig,
    replicate: usize,
    overlap_index: usize,
    data: &'a DataFiles,
    l_select: &'a [u32],
    dir: &'a Path,
    options: &'a EvalOptions,
}

fn run_task2(ctx: &Task2Context<'_>) -> Result<(Vec<AlgorithmMetrics>, bool)> {
    let combinations = ctx.config.combinations()?;
    let mut expert_modes: Vec<LossMode> = Vec::new();
    for c in &combinations {
        if !expert_modes.contains(&c.expert_mode()) {
            expert_modes.push(c.expert_mode());
        }
    }
    expert_modes.sort_by_key(|&m| mode_index(m));
    let models_dir = ctx.dir.join("models");
    let (r, oi) = (ctx.replicate as u64, ctx.overlap_index as u64);

    // Each site expert sees only its own site's files.
    let mut experts: Vec<(LossMode, Vec<PathBuf>)> = Vec::new();
    for &mode in &expert_modes {
        let mut paths = Vec::new();
        for (i, site) in ctx.data.sites.iter().enumerate() {
            let req = TrainRequest {
                select: vec![site.train_select.clone()],
                extra: vec![site.extra_train.clone()],
                val: vec![site.val_select.clone()],
                loss_mode: mode,
                config: train_seed(ctx.train_base, &[r, oi, mode_index(mode), i as u64]),
            };
            paths.push(cmd_train(&req, &models_dir.join(format!("site{i}_{mode}.json")))?.model_path);
        }
        experts.push((mode, paths));
    }

    let heldout = ctx.data.heldout.as_deref();
    let mut rows = Vec::new();
    let mut unchanged = true;
    for (ci, combination) in combinations.iter().enumerate() {
        let paths = &experts
            .iter()
            .find(|(m, _)| *m == combination.expert_mode())
            .expect("trained above")
            .1;
        let label = combination.label();
        let file = label.replace(' ', "_").replace('+', "-");
        let out = cmd_ensemble(
            paths,
            ctx.l_select,
            heldout,
            *combination,
            &train_seed(ctx.train_base, &[r, oi, 100 + ci as u64]),
            &ctx.dir.join("ensembles").join(format!("{file}.json")),
        )?;
        unchanged &= out.experts_unchanged;
        rows.push(cmd_evaluate(
            &EvalTarget::Ensemble(out.manifest_path),
            &ctx.data.test_select,
            &ctx.data.test_unknown,
            ctx.options,
            &label,
            &ctx.dir.join("eval"),
        )?);
    }

    if ctx.config.task2.oracle {
        let sites = &ctx.data.sites;
        let req = TrainRequest {
            select: sites.iter().map(|s| s.train_select.clone()).collect(),
            extra: sites.iter().map(|s| s.extra_train.clone()).collect(),
            val: sites.iter().map(|s| s.val_select.clone()).collect(),
            loss_mode: LossMode::Bg,
            config: train_seed(ctx.train_base, &[r, oi, 200]),
        };
        let out = cmd_train(&req, &models_dir.join("oracle_BG.json"))?;
        rows.push(cmd_evaluate(
            &EvalTarget::Model(out.model_path),
            &ctx.data.test_select,
            &ctx.data.test_unknown,
            ctx.options,
            ORACLE_LABEL,
            &ctx.dir.join("eval"),
        )?);
    }
    Ok((rows, unchanged))
}

