//! Experiment configuration: one JSON document, every field optional.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use osdx_core::casesim::SimConfig;
use osdx_core::ensemble::MOE_VAL_STRIDE;
use osdx_core::kbmodel::KbConfig;
use osdx_core::openset::{LossMode, TrainConfig};
use osdx_core::splits::{CaseCounts, SplitConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Task1,
    Task2,
}

/// A Table 2 row: either a naive ensemble of one expert type, or a learned
/// mixture `<expert loss>+<head loss>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combination {
    Naive(LossMode),
    Learned { experts: LossMode, head: LossMode },
}

pub const LEARNED_ROWS: [(LossMode, LossMode); 5] = [
    (LossMode::Ce, LossMode::Ce),
    (LossMode::Bg, LossMode::Ce),
    (LossMode::Eos, LossMode::Ce),
    (LossMode::Eos, LossMode::Bg),
    (LossMode::Eos, LossMode::Eos),
];

impl Combination {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("naive") {
            let mode = rest.trim().parse().map_err(|_| bad_combination(s))?;
            return Ok(Combination::Naive(mode));
        }
        let (a, b) = s.split_once('+').ok_or_else(|| bad_combination(s))?;
        let experts: LossMode = a.parse().map_err(|_| bad_combination(s))?;
        let head: LossMode = b.parse().map_err(|_| bad_combination(s))?;
        if !LEARNED_ROWS.contains(&(experts, head)) {
            return Err(bad_combination(s));
        }
        Ok(Combination::Learned { experts, head })
    }

    pub fn expert_mode(self) -> LossMode {
        match self {
            Combination::Naive(m) => m,
            Combination::Learned { experts, .. } => experts,
        }
    }

    pub fn label(self) -> String {
        match self {
            Combination::Naive(m) => format!("naive {m}"),
            Combination::Learned { experts, head } => format!("{experts}+{head}"),
        }
    }
}

fn bad_combination(s: &str) -> CliError {
    CliError::Config(format!(
        "unknown ensemble combination `{s}`; expected `naive CE|BG|EOS` or one of CE+CE, BG+CE, EOS+CE, EOS+BG, EOS+EOS"
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Task2Config {
    pub m_sites: usize,
    /// Overlap levels to run; more than one gives the overlap sweep.
    pub overlap_percent: Vec<f64>,
    /// Extra conditions per site; `None` splits `|L_extra|` evenly.
    pub extras_per_site: Option<usize>,
    pub heldout_per_select: usize,
    pub heldout_per_extra: usize,
    pub combinations: Vec<String>,
    /// Train the centrally pooled BG reference model.
    pub oracle: bool,
}

impl Default for Task2Config {
    fn default() -> Self {
        let mut combinations: Vec<String> = LossMode::ALL.iter().map(|m| format!("naive {m}")).collect();
        combinations.extend(LEARNED_ROWS.iter().map(|(e, h)| format!("{e}+{h}")));
        Task2Config {
            m_sites: 4,
            overlap_percent: vec![50.0],
            extras_per_site: None,
            heldout_per_select: 10,
            heldout_per_extra: 10,
            combinations,
            oracle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kb: KbConfig,
    pub sim: SimConfig,
    pub split: SplitConfig,
    pub counts: CaseCounts,
    pub train: TrainConfig,
    pub task: Task,
    /// Loss modes trained in Task 1.
    pub loss_modes: Vec<LossMode>,
    pub task2: Task2Config,
    pub replicates: usize,
    pub fpr_targets: Vec<f64>,
    pub recall_k: Vec<usize>,
    pub entropy_bins: usize,
    /// Master seed; `--seed` overrides it.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kb: KbConfig::default(),
            sim: SimConfig::default(),
            split: SplitConfig::default(),
            counts: CaseCounts::default(),
            train: TrainConfig::default(),
            task: Task::Task1,
            loss_modes: LossMode::ALL.to_vec(),
            task2: Task2Config::default(),
            replicates: 3,
            fpr_targets: vec![0.1, 0.2, 0.3],
            recall_k: vec![1, 3],
            entropy_bins: 50,
            seed: 0,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn combinations(&self) -> Result<Vec<Combination>, CliError> {
        self.task2.combinations.iter().map(|s| Combination::parse(s)).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |m: String| Err(CliError::Config(m));
        if self.replicates == 0 {
            return cfg("replicates must be at least 1".into());
        }
        if self.loss_modes.is_empty() {
            return cfg("loss_modes must not be empty".into());
        }
        if self.fpr_targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return cfg("fpr_targets must lie in [0, 1]".into());
        }
        if self.recall_k.contains(&0) {
            return cfg("recall_k entries must be at least 1".into());
        }
        if self.entropy_bins == 0 {
            return cfg("entropy_bins must be at least 1".into());
        }
        if self.task2.m_sites == 0 {
            return cfg("task2.m_sites must be at least 1".into());
        }
        if self.task2.overlap_percent.is_empty()
            || self.task2.overlap_percent.iter().any(|p| !(0.0..=100.0).contains(p))
        {
            return cfg("task2.overlap_percent must list values in [0, 100]".into());
        }
        let learned = self.combinations()?.iter().any(|c| matches!(c, Combination::Learned { .. }));
        if self.task == Task::Task2 && learned && self.task2.heldout_per_select < MOE_VAL_STRIDE {
            return cfg(format!(
                "task2.heldout_per_select must be at least {MOE_VAL_STRIDE} to leave validation cases for learned ensembles"
            ));
        }
        self.kb.validate()?;
        self.sim.validate()?;
        self.train.validate()?;
        self.counts.select_partition()?;
        Ok(())
    }
}
