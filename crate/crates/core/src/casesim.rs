//! Clinical vignette simulation.
//!
//! A case is drawn for a fixed disease in one Bernoulli pass: demographics
//! first (one value per demographic exclusion group), then every linked
//! symptom in random order, each switched on with the probability its
//! frequency level maps to unless a rival from its exclusion group is
//! already present. Cases outside the allowed symptom count are rejected and
//! redrawn.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kbmodel::{FindingKind, KnowledgeBase, MAX_FREQUENCY};
use crate::seed;

/// Maps frequency levels 1..=5 to presence probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable(pub [f64; MAX_FREQUENCY as usize]);

impl Default for FrequencyTable {
    fn default() -> Self {
        FrequencyTable([0.05, 0.2, 0.5, 0.75, 0.9])
    }
}

impl FrequencyTable {
    pub fn probability(&self, level: u8) -> Result<f64> {
        if !(1..=MAX_FREQUENCY).contains(&level) {
            return Err(Error::Domain(format!(
                "frequency level {level} outside 1..={MAX_FREQUENCY}"
            )));
        }
        Ok(self.0[level as usize - 1])
    }

    /// Caller guarantees `level` is in range.
    pub fn probability_unchecked(&self, level: u8) -> f64 {
        self.0[level as usize - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.0.iter().all(|p| *p > 0.0 && *p < 1.0) && self.0.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "frequency_table",
                "must be strictly increasing within (0, 1)",
            ))
        }
    }
}

pub fn frequency_to_probability(level: u8) -> Result<f64> {
    FrequencyTable::default().probability(level)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub frequency_table: FrequencyTable,
    pub min_symptoms: usize,
    pub max_symptoms: usize,
    pub max_attempts: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            frequency_table: FrequencyTable::default(),
            min_symptoms: 5,
            max_symptoms: 8,
            max_attempts: 100,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.frequency_table.validate()?;
        if self.min_symptoms > self.max_symptoms {
            return Err(Error::config("min_symptoms", "exceeds max_symptoms"));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("max_attempts", "must be at least 1"));
        }
        Ok(())
    }
}

/// One simulated patient: the true disease and the sorted present findings.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClinicalCase {
    #[serde(rename = "d")]
    pub disease_id: u32,
    #[serde(rename = "x")]
    pub present_findings: Vec<u32>,
}

/// Checks a case against the vocabulary, exclusion groups and symptom bounds.
pub fn check_case(kb: &KnowledgeBase, case: &ClinicalCase, config: &SimConfig) -> Vec<String> {
    let mut problems = Vec::new();
    if !case.present_findings.windows(2).all(|w| w[0] < w[1]) {
        problems.push("findings not strictly sorted".to_string());
    }
    let mut groups_seen = BTreeMap::new();
    let mut symptoms = 0;
    for &f in &case.present_findings {
        let Some(finding) = kb.findings.get(f as usize) else {
            problems.push(format!("finding {f} outside vocabulary"));
            continue;
        };
        if finding.kind == FindingKind::Symptom {
            symptoms += 1;
        }
        if let Some(g) = finding.exclusion_group {
            *groups_seen.entry(g).or_insert(0) += 1;
        }
    }
    for (g, n) in &groups_seen {
        if *n > 1 {
            problems.push(format!("{n} findings from exclusion group {g}"));
        }
    }
    for (g, _) in kb.demographic_groups() {
        if groups_seen.get(&g) != Some(&1) {
            problems.push(format!("demographic group {g} not represented exactly once"));
        }
    }
    if symptoms < config.min_symptoms || symptoms > config.max_symptoms {
        problems.push(format!(
            "{symptoms} symptoms outside {}..={}",
            config.min_symptoms, config.max_symptoms
        ));
    }
    problems
}

struct DiseaseProfile {
    /// (finding id, presence probability, exclusion group)
    symptoms: Vec<(u32, f64, Option<u32>)>,
    /// Per demographic group: members and their sampling weights.
    demographics: Vec<(u32, Vec<u32>, Vec<f64>)>,
}

/// Reusable simulator with per-disease lookups precomputed.
pub struct CaseSimulator<'kb> {
    kb: &'kb KnowledgeBase,
    config: SimConfig,
    profiles: Vec<DiseaseProfile>,
}

impl<'kb> CaseSimulator<'kb> {
    pub fn new(kb: &'kb KnowledgeBase, config: SimConfig) -> Result<Self> {
        config.validate()?;
        let table = config.frequency_table;
        let mut levels: Vec<BTreeMap<u32, u8>> = vec![BTreeMap::new(); kb.n_diseases()];
        for l in &kb.links {
            levels[l.disease_id as usize].insert(l.finding_id, l.frequency);
        }
        let demo_groups: Vec<(u32, Vec<u32>)> = kb
            .demographic_groups()
            .map(|(g, m)| (g, m.to_vec()))
            .collect();
        let profiles = levels
            .iter()
            .map(|linked| {
                let symptoms = linked
                    .iter()
                    .filter_map(|(&f, &level)| {
                        let finding = &kb.findings[f as usize];
                        (finding.kind == FindingKind::Symptom).then(|| {
                            (f, table.probability_unchecked(level), finding.exclusion_group)
                        })
                    })
                    .collect();
                let demographics = demo_groups
                    .iter()
                    .map(|(g, members)| {
                        let any_linked = members.iter().any(|m| linked.contains_key(m));
                        // Unlinked groups are uniform; unlinked members of a
                        // partially linked group get the lowest table weight.
                        let weights = members
                            .iter()
                            .map(|m| match linked.get(m) {
                                Some(&level) => table.probability_unchecked(level),
                                None if any_linked => table.0[0],
                                None => 1.0,
                            })
                            .collect();
                        (*g, members.clone(), weights)
                    })
                    .collect();
                DiseaseProfile {
                    symptoms,
                    demographics,
                }
            })
            .collect();
        Ok(CaseSimulator {
            kb,
            config,
            profiles,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn kb(&self) -> &KnowledgeBase {
        self.kb
    }

    pub fn simulate<R: Rng + ?Sized>(&self, disease_id: u32, rng: &mut R) -> Result<ClinicalCase> {
        let profile = self.profiles.get(disease_id as usize).ok_or(Error::Simulation {
            disease: disease_id,
            reason: "unknown disease id".into(),
        })?;
        if profile.symptoms.len() < self.config.min_symptoms {
            return Err(Error::Simulation {
                disease: disease_id,
                reason: format!(
                    "only {} linked symptoms, {} required",
                    profile.symptoms.len(),
                    self.config.min_symptoms
                ),
            });
        }

        let mut overfull: Option<(Vec<u32>, Vec<u32>)> = None;
        let mut order: Vec<usize> = (0..profile.symptoms.len()).collect();
        for _ in 0..self.config.max_attempts {
            let mut taken_groups: Vec<u32> = Vec::new();
            let mut demographics = Vec::with_capacity(profile.demographics.len());
            for (g, members, weights) in &profile.demographics {
                demographics.push(members[weighted_index(weights, rng)]);
                taken_groups.push(*g);
            }
            order.shuffle(rng);
            let mut symptoms = Vec::new();
            for &i in &order {
                let (f, p, group) = profile.symptoms[i];
                if let Some(g) = group {
                    if taken_groups.contains(&g) {
                        continue;
                    }
                }
                if rng.gen::<f64>() < p {
                    symptoms.push(f);
                    if let Some(g) = group {
                        taken_groups.push(g);
                    }
                }
            }
            let n = symptoms.len();
            if (self.config.min_symptoms..=self.config.max_symptoms).contains(&n) {
                return Ok(assemble(disease_id, demographics, symptoms));
            }
            if n > self.config.max_symptoms {
                overfull = Some((demographics, symptoms));
            }
        }

        // Attempts exhausted: trim the most recent over-full draw.
        match overfull {
            Some((demographics, mut symptoms)) => {
                symptoms.shuffle(rng);
                symptoms.truncate(self.config.max_symptoms);
                Ok(assemble(disease_id, demographics, symptoms))
            }
            None => Err(Error::Simulation {
                disease: disease_id,
                reason: format!(
                    "could not reach {} symptoms in {} attempts",
                    self.config.min_symptoms, self.config.max_attempts
                ),
            }),
        }
    }
}

fn weighted_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn assemble(disease_id: u32, demographics: Vec<u32>, symptoms: Vec<u32>) -> ClinicalCase {
    let mut present = demographics;
    present.extend(symptoms);
    present.sort_unstable();
    ClinicalCase {
        disease_id,
        present_findings: present,
    }
}

/// Simulates one case with the default simulator settings.
pub fn simulate_case<R: Rng + ?Sized>(
    kb: &KnowledgeBase,
    disease_id: u32,
    rng: &mut R,
) -> Result<ClinicalCase> {
    CaseSimulator::new(kb, SimConfig::default())?.simulate(disease_id, rng)
}

/// A labelled collection of cases over a shared vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub cases: Vec<ClinicalCase>,
    pub vocab_size: usize,
    pub label_space: BTreeSet<u32>,
}

impl Dataset {
    pub fn empty(vocab_size: usize) -> Self {
        Dataset {
            cases: Vec::new(),
            vocab_size,
            label_space: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.cases.iter().enumerate() {
            if !self.label_space.contains(&c.disease_id) {
                return Err(Error::Format(format!(
                    "case #{i} has disease {} outside the label space",
                    c.disease_id
                )));
            }
            if let Some(&f) = c.present_findings.iter().find(|&&f| f as usize >= self.vocab_size) {
                return Err(Error::Format(format!(
                    "case #{i} has finding {f} outside vocabulary of {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Concatenates datasets over the same vocabulary.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Result<Dataset> {
        let mut out: Option<Dataset> = None;
        for p in parts {
            match &mut out {
                None => out = Some(p.clone()),
                Some(acc) => {
                    if acc.vocab_size != p.vocab_size {
                        return Err(Error::Dimension {
                            op: "Dataset::concat",
                            expected: format!("vocab {}", acc.vocab_size),
                            got: format!("vocab {}", p.vocab_size),
                        });
                    }
                    acc.cases.extend(p.cases.iter().cloned());
                    acc.label_space.extend(p.label_space.iter().copied());
                }
            }
        }
        Ok(out.unwrap_or_default())
    }

    /// Cases whose disease is in `labels`; the label space shrinks accordingly.
    pub fn restrict(&self, labels: &BTreeSet<u32>) -> Dataset {
        Dataset {
            cases: self
                .cases
                .iter()
                .filter(|c| labels.contains(&c.disease_id))
                .cloned()
                .collect(),
            vocab_size: self.vocab_size,
            label_space: self.label_space.intersection(labels).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CasesPerDisease {
    Uniform(usize),
    Table(BTreeMap<u32, usize>),
}

impl CasesPerDisease {
    pub fn count(&self, disease: u32) -> usize {
        match self {
            CasesPerDisease::Uniform(n) => *n,
            CasesPerDisease::Table(t) => t.get(&disease).copied().unwrap_or(0),
        }
    }
}

/// Simulates `counts` cases for every disease in `labels`.
///
/// Case `i` of disease `d` is drawn from a stream keyed by
/// `(master_seed, d, i)`, so output does not depend on processing order.
pub fn simulate_dataset(
    sim: &CaseSimulator<'_>,
    labels: &BTreeSet<u32>,
    counts: &CasesPerDisease,
    master_seed: u64,
) -> Result<Dataset> {
    simulate_indexed(sim, labels, |d| 0..counts.count(d), master_seed)
}

/// Like [`simulate_dataset`] but with an explicit case-index range per disease.
pub fn simulate_indexed<I>(
    sim: &CaseSimulator<'_>,
    labels: &BTreeSet<u32>,
    indices: impl Fn(u32) -> I,
    master_seed: u64,
) -> Result<Dataset>
where
    I: IntoIterator<Item = usize>,
{
    let mut cases = Vec::new();
    for &d in labels {
        for i in indices(d) {
            let mut rng = seed::derived_rng(master_seed, &[u64::from(d), i as u64]);
            cases.push(sim.simulate(d, &mut rng)?);
        }
    }
    Ok(Dataset {
        cases,
        vocab_size: sim.kb().n_findings(),
        label_space: labels.clone(),
    })
}

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Sidecar header written next to every dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub vocab_size: usize,
    pub label_space: BTreeSet<u32>,
    pub n_cases: usize,
    pub kb_hash: String,
    pub seed: u64,
    /// Hash of the JSON-Lines body.
    pub content_hash: String,
}

pub fn header_path(path: &Path) -> PathBuf {
    path.with_extension("header.json")
}

fn encode_cases(dataset: &Dataset) -> Vec<u8> {
    let mut body = Vec::new();
    for c in &dataset.cases {
        serde_json::to_writer(&mut body, c).expect("case serialization cannot fail");
        body.push(b'\n');
    }
    body
}

/// Writes `<path>` as JSON-Lines and `<stem>.header.json` beside it.
pub fn save_dataset(dataset: &Dataset, path: &Path, kb_hash: &str, seed: u64) -> Result<DatasetHeader> {
    let body = encode_cases(dataset);
    let header = DatasetHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        vocab_size: dataset.vocab_size,
        label_space: dataset.label_space.clone(),
        n_cases: dataset.len(),
        kb_hash: kb_hash.to_string(),
        seed,
        content_hash: crate::kbmodel::sha256_hex(&body),
    };
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(&body).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    let hp = header_path(path);
    let mut bytes = serde_json::to_vec_pretty(&header)?;
    bytes.push(b'\n');
    fs::write(&hp, bytes).map_err(|e| Error::io(&hp, e))?;
    Ok(header)
}

pub fn load_dataset_header(path: &Path) -> Result<DatasetHeader> {
    let hp = header_path(path);
    let bytes = fs::read(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: DatasetHeader = serde_json::from_slice(&bytes)?;
    if header.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            what: "dataset",
            found: header.schema_version,
            expected: DATASET_SCHEMA_VERSION,
        });
    }
    Ok(header)
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, DatasetHeader)> {
    let header = load_dataset_header(path)?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut cases = Vec::with_capacity(header.n_cases);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        cases.push(serde_json::from_str::<ClinicalCase>(&line)?);
    }
    let dataset = Dataset {
        cases,
        vocab_size: header.vocab_size,
        label_space: header.label_space.clone(),
    };
    let found = crate::kbmodel::sha256_hex(&encode_cases(&dataset));
    if found != header.content_hash {
        return Err(Error::HashMismatch {
            what: path.display().to_string(),
            expected: header.content_hash,
            found,
        });
    }
    dataset.validate()?;
    Ok((dataset, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kbmodel::{
        generate_synthetic_kb, Disease, DiseaseFindingLink, Finding, KbConfig, Prevalence,
    };

    /// Two demographic groups (3 ages, 2 sexes) and a handful of symptoms.
    fn toy_kb(symptom_links: &[(u32, u8)], groups: &[Vec<u32>]) -> KnowledgeBase {
        let mut findings = Vec::new();
        let mut exclusion_groups = vec![vec![0, 1, 2], vec![3, 4]];
        for id in 0..5u32 {
            findings.push(Finding {
                id,
                name: format!("demo_{id}"),
                kind: FindingKind::Demographic,
                exclusion_group: Some(if id < 3 { 0 } else { 1 }),
            });
        }
        for id in 5..20u32 {
            findings.push(Finding {
                id,
                name: format!("s{id}"),
                kind: FindingKind::Symptom,
                exclusion_group: None,
            });
        }
        for g in groups {
            let gid = exclusion_groups.len() as u32;
            for &f in g {
                findings[f as usize].exclusion_group = Some(gid);
            }
            exclusion_groups.push(g.clone());
        }
        let links = symptom_links
            .iter()
            .map(|&(f, frequency)| DiseaseFindingLink {
                disease_id: 0,
                finding_id: f,
                frequency,
                evoking_strength: 0,
            })
            .collect();
        let kb = KnowledgeBase {
            findings,
            diseases: vec![Disease {
                id: 0,
                name: "d0".into(),
                prevalence: Prevalence::Common,
            }],
            links,
            exclusion_groups,
        };
        assert!(crate::kbmodel::validate_kb(&kb).is_empty());
        kb
    }

    #[test]
    fn frequency_table_values() {
        assert_eq!(frequency_to_probability(5).unwrap(), 0.9);
        assert_eq!(frequency_to_probability(1).unwrap(), 0.05);
        for k in 1..5 {
            assert!(frequency_to_probability(k + 1).unwrap() > frequency_to_probability(k).unwrap());
        }
        assert!(frequency_to_probability(0).is_err());
        assert!(frequency_to_probability(6).is_err());
    }

    #[test]
    fn five_certain_symptoms_always_give_five() {
        let kb = toy_kb(&[(5, 5), (6, 5), (7, 5), (8, 5), (9, 5)], &[]);
        let sim = CaseSimulator::new(&kb, SimConfig::default()).unwrap();
        for i in 0..10_000u64 {
            let mut rng = seed::derived_rng(42, &[i]);
            let case = sim.simulate(0, &mut rng).unwrap();
            let symptoms: Vec<u32> = case.present_findings.iter().copied().filter(|&f| f >= 5).collect();
            assert_eq!(symptoms, vec![5, 6, 7, 8, 9]);
            assert!(check_case(&kb, &case, sim.config()).is_empty());
        }
    }

    #[test]
    fn rival_symptoms_never_co_occur() {
        let links: Vec<(u32, u8)> = (5..13).map(|f| (f, 5)).collect();
        let kb = toy_kb(&links, &[vec![5, 6]]);
        let sim = CaseSimulator::new(&kb, SimConfig::default()).unwrap();
        for i in 0..2_000u64 {
            let case = sim.simulate(0, &mut seed::derived_rng(1, &[i])).unwrap();
            let has = |f| case.present_findings.contains(&f);
            assert!(!(has(5) && has(6)));
        }
    }

    #[test]
    fn same_stream_same_case() {
        let kb = generate_synthetic_kb(&KbConfig {
            n_diseases: 12,
            n_findings: 200,
            n_very_common: 3,
            n_exclusion_groups: 5,
            seed: 2,
            ..KbConfig::default()
        })
        .unwrap();
        let a = simulate_case(&kb, 4, &mut seed::rng(9)).unwrap();
        let b = simulate_case(&kb, 4, &mut seed::rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_symptoms_is_an_error() {
        let kb = toy_kb(&[(5, 5), (6, 5), (7, 5)], &[]);
        let err = simulate_case(&kb, 0, &mut seed::rng(0)).unwrap_err();
        assert!(matches!(err, Error::Simulation { disease: 0, .. }));

        // Reachable in principle, practically never: 6 symptoms at p = 0.05.
        let kb = toy_kb(&[(5, 1), (6, 1), (7, 1), (8, 1), (9, 1), (10, 1)], &[]);
        let err = simulate_case(&kb, 0, &mut seed::rng(0)).unwrap_err();
        assert!(err.to_string().contains("disease 0"));
    }

    #[test]
    fn overfull_draws_are_trimmed() {
        let links: Vec<(u32, u8)> = (5..20).map(|f| (f, 5)).collect();
        let kb = toy_kb(&links, &[]);
        let sim = CaseSimulator::new(&kb, SimConfig::default()).unwrap();
        for i in 0..200u64 {
            let case = sim.simulate(0, &mut seed::derived_rng(3, &[i])).unwrap();
            assert!(check_case(&kb, &case, sim.config()).is_empty());
        }
    }

    #[test]
    fn presence_rate_matches_level_under_high_acceptance() {
        // Seven near-certain symptoms keep acceptance near 0.97; symptom 12 is
        // the level-3 probe.
        let mut links: Vec<(u32, u8)> = (5..12).map(|f| (f, 5)).collect();
        links.push((12, 3));
        let kb = toy_kb(&links, &[]);
        let sim = CaseSimulator::new(&kb, SimConfig::default()).unwrap();
        let n = 10_000;
        let hits = (0..n as u64)
            .filter(|&i| {
                sim.simulate(0, &mut seed::derived_rng(77, &[i]))
                    .unwrap()
                    .present_findings
                    .contains(&12)
            })
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.5).abs() <= 0.05, "rate {rate}");
    }

    #[test]
    fn dataset_counts_and_order_independence() {
        let kb = generate_synthetic_kb(&KbConfig {
            n_diseases: 20,
            n_findings: 250,
            n_very_common: 5,
            n_exclusion_groups: 6,
            seed: 8,
            ..KbConfig::default()
        })
        .unwrap();
        let sim = CaseSimulator::new(&kb, SimConfig::default()).unwrap();
        let labels: BTreeSet<u32> = [3, 7, 11].into();
        let ds = simulate_dataset(&sim, &labels, &CasesPerDisease::Uniform(25), 5).unwrap();
        assert_eq!(ds.len(), 75);
        assert_eq!(ds.vocab_size, 250);
        ds.validate().unwrap();

        // Simulating one disease alone yields the same cases.
        let only7 = simulate_dataset(&sim, &[7].into(), &CasesPerDisease::Uniform(25), 5).unwrap();
        let from_full: Vec<_> = ds.cases.iter().filter(|c| c.disease_id == 7).cloned().collect();
        assert_eq!(only7.cases, from_full);

        let empty = simulate_dataset(&sim, &BTreeSet::new(), &CasesPerDisease::Uniform(25), 5).unwrap();
        assert!(empty.is_empty());

        let table = CasesPerDisease::Table([(3, 2), (7, 0), (11, 4)].into());
        assert_eq!(simulate_dataset(&sim, &labels, &table, 5).unwrap().len(), 6);
    }

    #[test]
    fn dataset_file_round_trip() {
        let kb = generate_synthetic_kb(&KbConfig {
            n_diseases: 10,
            n_findings: 150,
            n_very_common: 3,
            n_exclusion_groups: 4,
            seed: 1,
            ..KbConfig::default()
        })
        .unwrap();
        let sim = CaseSimulator::new(&kb, SimConfig::default()).unwrap();
        let ds = simulate_dataset(&sim, &[0, 1, 2].into(), &CasesPerDisease::Uniform(4), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cases.jsonl");
        let header = save_dataset(&ds, &path, &kb.content_hash(), 3).unwrap();
        let (back, h2) = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(header, h2);
        let first = std::fs::read_to_string(&path).unwrap();
        let line = first.lines().next().unwrap();
        assert!(line.starts_with("{\"d\":0,\"x\":["), "{line}");

        std::fs::write(&path, first.replacen("\"d\":0", "\"d\":1", 1)).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::HashMismatch { .. })));
    }
}
