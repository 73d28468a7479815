//! Pipeline stages. Each stage reads the previous stage's files, checks the
//! hashes that tie them together, and writes its own artifacts.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use osdx_core::casesim::{load_dataset, save_dataset, simulate_dataset, CaseSimulator, CasesPerDisease, Dataset};
use osdx_core::ensemble::{
    evaluate, load_ensemble, save_ensemble, train_moe, EnsembleManifest, ExpertRef, ExpertSet, Scorer,
};
use osdx_core::kbmodel::{generate_synthetic_kb, load_kb, save_kb, sha256_hex, KbConfig, KnowledgeBase};
use osdx_core::metrics::{ccr_at_fpr, histogram_csv, oscr_csv, summary_csv, SummaryRow};
use osdx_core::openset::{load_model, save_model, train, LossMode, MlpModel, ModelProvenance, TrainConfig};
use osdx_core::seed;
use osdx_core::splits::{
    build_label_split, build_pooled_heldout, build_site_data, build_site_plan, build_task1_splits,
    resample_extras, simulate_select_test, simulate_unknown_test, LabelSplit, SitePlan, SplitConfig,
};
use osdx_core::Error;

use crate::config::{Combination, ExperimentConfig};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Pipeline(Error::Io { path: dir.to_path_buf(), source: e }))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Pipeline(Error::Io { path: path.to_path_buf(), source: e }))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Pipeline(Error::Io { path: path.to_path_buf(), source: e }))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    bytes.push(b'\n');
    write(path, bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read(path)?).map_err(Error::from)?)
}

fn expect_hash(what: &str, expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(CliError::Pipeline(Error::HashMismatch {
            what: what.to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        }))
    }
}

/// `target` expressed relative to directory `base`.
fn relative_to(target: &Path, base: &Path) -> PathBuf {
    let (Ok(t), Ok(b)) = (target.canonicalize(), base.canonicalize()) else {
        return target.to_path_buf();
    };
    let tc: Vec<Component> = t.components().collect();
    let bc: Vec<Component> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c);
    }
    out
}

pub fn cmd_kb_gen(config: &KbConfig, out_dir: &Path) -> Result<PathBuf> {
    let kb = generate_synthetic_kb(config)?;
    create_dir(out_dir)?;
    let path = out_dir.join("kb.json");
    save_kb(&kb, &path)?;
    Ok(path)
}

/// Simulates the per-disease cases whose mean encodings feed the PCA split.
pub fn cmd_simulate_profiles(kb_path: &Path, config: &ExperimentConfig, data_seed: u64, out_dir: &Path) -> Result<PathBuf> {
    let kb = load_kb(kb_path)?;
    let sim = CaseSimulator::new(&kb, config.sim.clone())?;
    let seed_value = seed::derive(data_seed, &[seed::tag::PROFILE]);
    let ds = simulate_dataset(
        &sim,
        &kb.all_disease_ids(),
        &CasesPerDisease::Uniform(config.split.profile_cases_per_disease),
        seed_value,
    )?;
    create_dir(out_dir)?;
    let path = out_dir.join("profiles.jsonl");
    save_dataset(&ds, &path, &kb.content_hash(), seed_value)?;
    Ok(path)
}

fn load_checked_dataset(path: &Path, kb_hash: &str) -> Result<Dataset> {
    let (ds, header) = load_dataset(path)?;
    expect_hash(&format!("knowledge base of {}", path.display()), kb_hash, &header.kb_hash)?;
    Ok(ds)
}

pub fn load_split(path: &Path, kb: &KnowledgeBase) -> Result<LabelSplit> {
    let split: LabelSplit = read_json(path)?;
    expect_hash(&format!("knowledge base of {}", path.display()), &kb.content_hash(), &split.kb_hash)?;
    let problems = split.check();
    if !problems.is_empty() {
        return Err(CliError::Pipeline(Error::Validation(problems)));
    }
    Ok(split)
}

/// Builds the label split from profile cases, or re-draws the extras of an
/// existing split when `base` is given.
pub fn cmd_split(
    kb_path: &Path,
    profiles: Option<&Path>,
    base: Option<&Path>,
    config: &SplitConfig,
    extra_seed: u64,
    out_path: &Path,
) -> Result<LabelSplit> {
    let kb = load_kb(kb_path)?;
    let split = match (base, profiles) {
        (Some(b), _) => {
            let base = load_split(b, &kb)?;
            let n_extra = config.n_extra.unwrap_or(base.l_select.len());
            resample_extras(&kb, &base, n_extra, extra_seed)?
        }
        (None, Some(p)) => {
            let ds = load_checked_dataset(p, &kb.content_hash())?;
            build_label_split(&kb, &ds, config, extra_seed)?
        }
        (None, None) => {
            return Err(CliError::Config("split needs either a profile dataset or a base split".into()));
        }
    };
    write_json(out_path, &split)?;
    Ok(split)
}

/// Divides `L_select` over sites; site extras come from diseases outside the
/// selected and unknown sets.
pub fn cmd_site_plan(
    kb_path: &Path,
    split_path: &Path,
    config: &ExperimentConfig,
    overlap_percent: f64,
    plan_seed: u64,
    out_path: &Path,
) -> Result<SitePlan> {
    let kb = load_kb(kb_path)?;
    let split = load_split(split_path, &kb)?;
    let pool: BTreeSet<u32> = kb
        .all_disease_ids()
        .into_iter()
        .filter(|d| !split.l_select.contains(d) && !split.l_unknown.contains(d))
        .collect();
    let m = config.task2.m_sites;
    let per_site = config.task2.extras_per_site.unwrap_or(split.l_extra.len() / m);
    let mut rng = seed::derived_rng(plan_seed, &[seed::tag::SITE_PLAN]);
    let mut plan = build_site_plan(&split.l_select, &pool, m, overlap_percent, per_site, &mut rng)?;
    plan.kb_hash = kb.content_hash();
    plan.seed = plan_seed;
    write_json(out_path, &plan)?;
    Ok(plan)
}

/// Dataset files written by [`cmd_simulate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFiles {
    pub test_select: PathBuf,
    pub test_unknown: PathBuf,
    /// Task 1 only.
    pub train_select: Option<PathBuf>,
    pub val_select: Option<PathBuf>,
    pub extra_train: Option<PathBuf>,
    /// Task 2 only, one entry per site.
    pub sites: Vec<SiteFiles>,
    pub heldout: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteFiles {
    pub train_select: PathBuf,
    pub val_select: PathBuf,
    pub extra_train: PathBuf,
}

/// Simulates every dataset of one experiment. With a site plan the training
/// data are per-site files plus the pooled heldout set; test sets are the
/// same in both tasks.
pub fn cmd_simulate(
    kb_path: &Path,
    split_path: &Path,
    plan_path: Option<&Path>,
    config: &ExperimentConfig,
    data_seed: u64,
    out_dir: &Path,
) -> Result<DataFiles> {
    let kb = load_kb(kb_path)?;
    let kb_hash = kb.content_hash();
    let split = load_split(split_path, &kb)?;
    let sim = CaseSimulator::new(&kb, config.sim.clone())?;
    create_dir(out_dir)?;
    let save = |ds: &Dataset, name: &str| -> Result<PathBuf> {
        let p = out_dir.join(name);
        save_dataset(ds, &p, &kb_hash, data_seed)?;
        Ok(p)
    };
    let counts = &config.counts;
    match plan_path {
        None => {
            let d = build_task1_splits(&sim, &split, counts, data_seed)?;
            Ok(DataFiles {
                test_select: save(&d.test_select, "test_select.jsonl")?,
                test_unknown: save(&d.test_unknown, "test_unknown.jsonl")?,
                train_select: Some(save(&d.train_select, "train_select.jsonl")?),
                val_select: Some(save(&d.val_select, "val_select.jsonl")?),
                extra_train: Some(save(&d.extra_train, "extra_train.jsonl")?),
                sites: Vec::new(),
                heldout: None,
            })
        }
        Some(pp) => {
            let plan: SitePlan = read_json(pp)?;
            expect_hash("knowledge base of the site plan", &kb_hash, &plan.kb_hash)?;
            if plan.l_select() != split.l_select {
                return Err(CliError::Pipeline(Error::Domain(
                    "site plan does not cover the split's selected conditions".into(),
                )));
            }
            let site_seed = seed::derive(data_seed, &[seed::tag::SITE_CASES, plan.seed]);
            let sites = build_site_data(&sim, &plan, counts, site_seed)?;
            let mut site_files = Vec::with_capacity(sites.len());
            for (i, s) in sites.iter().enumerate() {
                site_files.push(SiteFiles {
                    train_select: save(&s.train_select, &format!("site{i}_train_select.jsonl"))?,
                    val_select: save(&s.val_select, &format!("site{i}_val_select.jsonl"))?,
                    extra_train: save(&s.extra_train, &format!("site{i}_extra_train.jsonl"))?,
                });
            }
            let heldout = build_pooled_heldout(
                &sim,
                &split.l_select,
                &plan.pooled_extras(),
                config.task2.heldout_per_select,
                config.task2.heldout_per_extra,
                seed::derive(data_seed, &[seed::tag::HELDOUT, plan.seed]),
            )?;
            Ok(DataFiles {
                test_select: save(&simulate_select_test(&sim, &split, counts, data_seed)?, "test_select.jsonl")?,
                test_unknown: save(&simulate_unknown_test(&sim, &split, counts, data_seed)?, "test_unknown.jsonl")?,
                train_select: None,
                val_select: None,
                extra_train: None,
                sites: site_files,
                heldout: Some(save(&heldout, "heldout.jsonl")?),
            })
        }
    }
}

/// Inputs of one model fit. Output classes are the union of the label
/// spaces of the `select` files; `extra` files are ignored for CE.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRequest {
    pub select: Vec<PathBuf>,
    pub extra: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub loss_mode: LossMode,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model_path: PathBuf,
    pub file_hash: String,
    pub epochs: usize,
    pub best_epoch: usize,
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<(Dataset, String, String)>> {
    paths
        .iter()
        .map(|p| {
            let (ds, h) = load_dataset(p)?;
            Ok((ds, h.kb_hash, h.content_hash))
        })
        .collect()
}

pub fn cmd_train(req: &TrainRequest, model_path: &Path) -> Result<TrainOutcome> {
    if req.select.is_empty() || req.val.is_empty() {
        return Err(CliError::Config("train needs at least one select and one validation dataset".into()));
    }
    let extra_paths: &[PathBuf] = if req.loss_mode.uses_extras() { &req.extra } else { &[] };
    let select = load_all(&req.select)?;
    let extra = load_all(extra_paths)?;
    let val = load_all(&req.val)?;
    let kb_hash = select[0].1.clone();
    for (_, h, _) in select.iter().chain(&extra).chain(&val) {
        expect_hash("knowledge base of training data", &kb_hash, h)?;
    }
    let classes: Vec<u32> = select
        .iter()
        .flat_map(|(d, _, _)| d.label_space.iter().copied())
        .collect::<BTreeSet<u32>>()
        .into_iter()
        .collect();
    let train_set = Dataset::concat(select.iter().chain(&extra).map(|(d, _, _)| d))?;
    let val_set = Dataset::concat(val.iter().map(|(d, _, _)| d))?;
    let init = MlpModel::init(
        train_set.vocab_size,
        req.config.hidden_units,
        &classes,
        req.loss_mode,
        req.config.seed,
    )?;
    let (model, history) = train(init, &train_set, &val_set, &req.config)?;
    let provenance = ModelProvenance {
        train_config: Some(req.config.clone()),
        data_hashes: select.iter().chain(&extra).chain(&val).map(|(_, _, c)| c.clone()).collect(),
        kb_hash,
    };
    if let Some(parent) = model_path.parent() {
        create_dir(parent)?;
    }
    let file_hash = save_model(&model, &provenance, model_path)?;
    write(&model_path.with_extension("history.csv"), history.to_csv())?;
    Ok(TrainOutcome {
        model_path: model_path.to_path_buf(),
        file_hash,
        epochs: history.epochs.len(),
        best_epoch: history.best_epoch,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutcome {
    pub manifest_path: PathBuf,
    /// Expert files hash the same before and after the ensemble stage.
    pub experts_unchanged: bool,
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}

/// Builds a naive or learned ensemble over expert model files.
pub fn cmd_ensemble(
    experts: &[PathBuf],
    l_select: &[u32],
    heldout: Option<&Path>,
    combination: Combination,
    config: &TrainConfig,
    manifest_path: &Path,
) -> Result<EnsembleOutcome> {
    let before: Vec<String> = experts.iter().map(|p| file_hash(p)).collect::<Result<_>>()?;
    let mut models = Vec::with_capacity(experts.len());
    for (p, h) in experts.iter().zip(&before) {
        let (m, _, hash) = load_model(p)?;
        expect_hash(&format!("expert {}", p.display()), h, &hash)?;
        if m.loss_mode != combination.expert_mode() {
            return Err(CliError::Config(format!(
                "{} expects {} experts but {} is {}",
                combination.label(),
                combination.expert_mode(),
                p.display(),
                m.loss_mode
            )));
        }
        models.push(m);
    }
    let set = ExpertSet::new(models, l_select)?;
    let moe = match combination {
        Combination::Naive(_) => None,
        Combination::Learned { head, .. } => {
            let path = heldout.ok_or_else(|| CliError::Config("learned ensembles need a heldout dataset".into()))?;
            let (ds, _) = load_dataset(path)?;
            let (moe, history) = train_moe(&set, &ds, head, config)?;
            write(&manifest_path.with_extension("history.csv"), history.to_csv())?;
            Some(moe)
        }
    };
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    create_dir(base)?;
    let refs = experts
        .iter()
        .zip(&before)
        .map(|(p, h)| ExpertRef {
            path: relative_to(p, base).to_string_lossy().into_owned(),
            sha256: h.clone(),
        })
        .collect();
    let manifest = EnsembleManifest::new(&combination.label(), &set.l_select, refs, moe.as_ref());
    save_ensemble(&manifest, manifest_path)?;
    let after: Vec<String> = experts.iter().map(|p| file_hash(p)).collect::<Result<_>>()?;
    Ok(EnsembleOutcome {
        manifest_path: manifest_path.to_path_buf(),
        experts_unchanged: before == after,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalTarget {
    Model(PathBuf),
    Ensemble(PathBuf),
}

/// Metrics of one algorithm on one replicate. Rates are percentages; `None`
/// marks an unreachable operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmMetrics {
    pub algorithm: String,
    /// Aligned with the configured FPR targets.
    pub ccr: Vec<Option<f64>>,
    /// Aligned with the configured recall cut-offs.
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub fpr_targets: Vec<f64>,
    pub recall_k: Vec<usize>,
    pub entropy_bins: usize,
}

impl EvalOptions {
    pub fn from_config(c: &ExperimentConfig) -> Self {
        EvalOptions {
            fpr_targets: c.fpr_targets.clone(),
            recall_k: c.recall_k.clone(),
            entropy_bins: c.entropy_bins,
        }
    }
}

pub fn ccr_metric(target: f64) -> String {
    format!("CCR@FPR={target}")
}

pub fn recall_metric(k: usize) -> String {
    format!("recall@{k}")
}

/// Scores the known and unknown test sets and writes `<name>.oscr.csv`,
/// `<name>.summary.csv`, `<name>.entropy.csv` and `<name>.metrics.json`.
pub fn cmd_evaluate(
    target: &EvalTarget,
    known: &Path,
    unknown: &Path,
    options: &EvalOptions,
    name: &str,
    out_dir: &Path,
) -> Result<AlgorithmMetrics> {
    let (known_ds, kh) = load_dataset(known)?;
    let (unknown_ds, uh) = load_dataset(unknown)?;
    expect_hash("knowledge base of the unknown test set", &kh.kb_hash, &uh.kb_hash)?;
    let evaluation = match target {
        EvalTarget::Model(p) => {
            let (model, provenance, _) = load_model(p)?;
            expect_hash("knowledge base of the model", &kh.kb_hash, &provenance.kb_hash)?;
            evaluate(Scorer::Model(&model), &known_ds, &unknown_ds)?
        }
        EvalTarget::Ensemble(p) => {
            let loaded = load_ensemble(p)?;
            evaluate(loaded.scorer(), &known_ds, &unknown_ds)?
        }
    };
    let curve = evaluation.oscr()?;
    let ccr: Vec<Option<f64>> = options
        .fpr_targets
        .iter()
        .map(|&t| ccr_at_fpr(&curve, t).ccr().map(|c| 100.0 * c))
        .collect();
    let recall = options
        .recall_k
        .iter()
        .map(|&k| evaluation.recall_at_k(k).map(|r| 100.0 * r))
        .collect::<std::result::Result<Vec<f64>, _>>()?;
    let metrics = AlgorithmMetrics {
        algorithm: name.to_string(),
        ccr,
        recall,
    };
    create_dir(out_dir)?;
    write(&out_dir.join(format!("{name}.oscr.csv")), oscr_csv(&curve))?;
    write(
        &out_dir.join(format!("{name}.entropy.csv")),
        histogram_csv(&evaluation.entropy_histogram(options.entropy_bins)?),
    )?;
    write(&out_dir.join(format!("{name}.summary.csv")), summary_csv(&summary_rows(&[&metrics], options)?))?;
    write_json(&out_dir.join(format!("{name}.metrics.json")), &metrics)?;
    Ok(metrics)
}

/// Mean and std across replicates for each algorithm, in first-seen order.
pub fn summary_rows(per_replicate: &[&AlgorithmMetrics], options: &EvalOptions) -> Result<Vec<SummaryRow>> {
    let mut names: Vec<&str> = Vec::new();
    for m in per_replicate {
        if !names.contains(&m.algorithm.as_str()) {
            names.push(&m.algorithm);
        }
    }
    let mut rows = Vec::new();
    for name in names {
        let runs: Vec<&&AlgorithmMetrics> = per_replicate.iter().filter(|m| m.algorithm == name).collect();
        for (i, &t) in options.fpr_targets.iter().enumerate() {
            let values: Vec<Option<f64>> = runs.iter().map(|m| m.ccr[i]).collect();
            rows.push(SummaryRow::from_replicates(name, &ccr_metric(t), &values)?);
        }
        for (i, &k) in options.recall_k.iter().enumerate() {
            let values: Vec<Option<f64>> = runs.iter().map(|m| Some(m.recall[i])).collect();
            rows.push(SummaryRow::from_replicates(name, &recall_metric(k), &values)?);
        }
    }
    Ok(rows)
}
