//! Knowledge-base data model and the seeded synthetic generator.
//!
//! A knowledge base holds diseases, findings (demographic variables and
//! symptoms), disease-finding links annotated with frequency and evoking
//! strength, and exclusion groups of findings that cannot co-occur. Age
//! buckets and sexes are ordinary demographic findings placed in their own
//! exclusion groups, so "exactly one age, exactly one sex" falls out of the
//! same mechanism that keeps e.g. dry and productive cough apart.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::casesim::FrequencyTable;
use crate::error::{Error, Result};
use crate::seed;

pub const KB_SCHEMA_VERSION: u32 = 1;

pub const MAX_FREQUENCY: u8 = 5;
pub const MAX_EVOKING_STRENGTH: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    Demographic,
    Symptom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub id: u32,
    pub name: String,
    pub kind: FindingKind,
    pub exclusion_group: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prevalence {
    VeryCommon,
    Common,
    Rare,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disease {
    pub id: u32,
    pub name: String,
    pub prevalence: Prevalence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseFindingLink {
    pub disease_id: u32,
    pub finding_id: u32,
    /// 1 (rare in patients with the disease) ..= 5 (almost always present).
    pub frequency: u8,
    /// 0 ..= 5. Stored for fidelity; the simulator does not read it.
    pub evoking_strength: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub findings: Vec<Finding>,
    pub diseases: Vec<Disease>,
    pub links: Vec<DiseaseFindingLink>,
    pub exclusion_groups: Vec<Vec<u32>>,
}

#[derive(Serialize)]
struct KbFileRef<'a> {
    schema_version: u32,
    findings: &'a [Finding],
    diseases: &'a [Disease],
    links: &'a [DiseaseFindingLink],
    exclusion_groups: &'a [Vec<u32>],
}

#[derive(Deserialize)]
struct KbFile {
    schema_version: u32,
    findings: Vec<Finding>,
    diseases: Vec<Disease>,
    links: Vec<DiseaseFindingLink>,
    exclusion_groups: Vec<Vec<u32>>,
}

impl KnowledgeBase {
    pub fn n_findings(&self) -> usize {
        self.findings.len()
    }

    pub fn n_diseases(&self) -> usize {
        self.diseases.len()
    }

    /// Links of one disease, in stored order.
    pub fn links_of(&self, disease_id: u32) -> impl Iterator<Item = &DiseaseFindingLink> {
        self.links.iter().filter(move |l| l.disease_id == disease_id)
    }

    pub fn diseases_with(&self, prevalence: Prevalence) -> BTreeSet<u32> {
        self.diseases
            .iter()
            .filter(|d| d.prevalence == prevalence)
            .map(|d| d.id)
            .collect()
    }

    pub fn all_disease_ids(&self) -> BTreeSet<u32> {
        self.diseases.iter().map(|d| d.id).collect()
    }

    /// Exclusion groups whose members are demographic findings.
    pub fn demographic_groups(&self) -> impl Iterator<Item = (u32, &[u32])> {
        self.exclusion_groups
            .iter()
            .enumerate()
            .filter(|(_, g)| {
                g.iter().any(|&f| {
                    self.findings
                        .get(f as usize)
                        .is_some_and(|f| f.kind == FindingKind::Demographic)
                })
            })
            .map(|(i, g)| (i as u32, g.as_slice()))
    }

    /// Canonical JSON encoding of the KB file.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let file = KbFileRef {
            schema_version: KB_SCHEMA_VERSION,
            findings: &self.findings,
            diseases: &self.diseases,
            links: &self.links,
            exclusion_groups: &self.exclusion_groups,
        };
        serde_json::to_vec(&file).expect("knowledge base serialization cannot fail")
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let probe: serde_json::Value = serde_json::from_slice(bytes)?;
        let version = probe
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Format("knowledge base file lacks `schema_version`".into()))?;
        if version != u64::from(KB_SCHEMA_VERSION) {
            return Err(Error::SchemaVersion {
                what: "knowledge base",
                found: version.try_into().unwrap_or(u32::MAX),
                expected: KB_SCHEMA_VERSION,
            });
        }
        let file: KbFile = serde_json::from_value(probe)?;
        debug_assert_eq!(file.schema_version, KB_SCHEMA_VERSION);
        let kb = KnowledgeBase {
            findings: file.findings,
            diseases: file.diseases,
            links: file.links,
            exclusion_groups: file.exclusion_groups,
        };
        let violations = validate_kb(&kb);
        if violations.is_empty() {
            Ok(kb)
        } else {
            Err(Error::Validation(violations))
        }
    }

    /// Hex SHA-256 of the canonical encoding; used to chain pipeline stages.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_json_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeSpec {
    pub min: usize,
    pub max: usize,
}

impl RangeSpec {
    pub fn new(min: usize, max: usize) -> Self {
        RangeSpec { min, max }
    }
}

/// One demographic variable, e.g. age buckets or sex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicGroupTemplate {
    pub name: String,
    pub values: Vec<String>,
    /// Probability that a disease prefers one value of this variable.
    /// Diseases without a preference leave the group unlinked.
    pub preference_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KbConfig {
    pub n_diseases: usize,
    /// Total vocabulary size, demographic findings included.
    pub n_findings: usize,
    pub n_very_common: usize,
    pub symptoms_per_disease_range: RangeSpec,
    pub n_exclusion_groups: usize,
    pub exclusion_group_size: RangeSpec,
    pub demographics: Vec<DemographicGroupTemplate>,
    /// Symptoms are partitioned into this many organ-system pools; a disease
    /// draws most of its symptoms from one pool, which is what gives
    /// neighbouring diseases overlapping presentations.
    pub n_body_systems: usize,
    /// Symptoms per pool; the rest are reachable only off-pool. `None` deals
    /// every symptom into some pool.
    pub symptoms_per_system: Option<usize>,
    /// Probability that each symptom of a disease comes from its own pool.
    pub system_affinity: f64,
    /// Probability that a pooled symptom takes the pool's shared frequency
    /// level instead of a fresh one. Both are uniform on 1..5.
    pub system_level_sharing: f64,
    /// Lower bound on the expected number of present symptoms per disease.
    /// Frequency levels are redrawn until it holds (capped at 75% of the symptoms
    /// that can co-occur), so every generated disease can reach the
    /// simulator's minimum symptom count.
    pub min_expected_symptoms: f64,
    pub seed: u64,
}

impl Default for KbConfig {
    fn default() -> Self {
        KbConfig {
            n_diseases: 830,
            n_findings: 2052,
            n_very_common: 160,
            symptoms_per_disease_range: RangeSpec::new(10, 30),
            n_exclusion_groups: 40,
            exclusion_group_size: RangeSpec::new(2, 4),
            demographics: default_demographics(),
            n_body_systems: 24,
            symptoms_per_system: Some(20),
            system_affinity: 0.95,
            system_level_sharing: 0.9,
            min_expected_symptoms: 5.5,
            seed: 0,
        }
    }
}

pub fn default_demographics() -> Vec<DemographicGroupTemplate> {
    vec![
        DemographicGroupTemplate {
            name: "age".into(),
            values: ["0_17", "18_34", "35_49", "50_64", "65_plus"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            preference_rate: 1.0,
        },
        DemographicGroupTemplate {
            name: "sex".into(),
            values: vec!["female".into(), "male".into()],
            preference_rate: 0.3,
        },
    ]
}

impl KbConfig {
    pub fn n_demographic_findings(&self) -> usize {
        self.demographics.iter().map(|g| g.values.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_diseases == 0 {
            return Err(Error::config("n_diseases", "must be at least 1"));
        }
        if self.n_very_common > self.n_diseases {
            return Err(Error::config(
                "n_very_common",
                format!("{} exceeds n_diseases {}", self.n_very_common, self.n_diseases),
            ));
        }
        let r = &self.symptoms_per_disease_range;
        if r.min == 0 || r.min > r.max {
            return Err(Error::config(
                "symptoms_per_disease_range",
                format!("{}..{} is empty or starts at 0", r.min, r.max),
            ));
        }
        let n_demo = self.n_demographic_findings();
        if self.n_findings < n_demo + r.max {
            return Err(Error::config(
                "n_findings",
                format!(
                    "{} cannot hold {n_demo} demographic findings plus {} symptoms per disease",
                    self.n_findings, r.max
                ),
            ));
        }
        let g = &self.exclusion_group_size;
        if self.n_exclusion_groups > 0 && (g.min < 2 || g.min > g.max) {
            return Err(Error::config(
                "exclusion_group_size",
                format!("{}..{} must be non-empty with groups of at least 2", g.min, g.max),
            ));
        }
        let n_symptoms = self.n_findings - n_demo;
        if self.n_exclusion_groups * g.max > n_symptoms {
            return Err(Error::config(
                "n_exclusion_groups",
                format!(
                    "{} groups of up to {} do not fit in {n_symptoms} symptoms",
                    self.n_exclusion_groups, g.max
                ),
            ));
        }
        for t in &self.demographics {
            if t.values.len() < 2 {
                return Err(Error::config(
                    "demographics",
                    format!("group `{}` needs at least two values", t.name),
                ));
            }
            if !(0.0..=1.0).contains(&t.preference_rate) {
                return Err(Error::config(
                    "demographics",
                    format!("group `{}` preference_rate outside [0, 1]", t.name),
                ));
            }
        }
        if self.symptoms_per_system == Some(0) {
            return Err(Error::config("symptoms_per_system", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.system_affinity) {
            return Err(Error::config("system_affinity", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.system_level_sharing) {
            return Err(Error::config("system_level_sharing", "must lie in [0, 1]"));
        }
        if !self.min_expected_symptoms.is_finite() || self.min_expected_symptoms < 0.0 {
            return Err(Error::config("min_expected_symptoms", "must be finite and non-negative"));
        }
        Ok(())
    }
}

const PREFERRED_DEMOGRAPHIC_LEVEL: u8 = 5;
const OTHER_DEMOGRAPHIC_LEVEL: u8 = 2;
const MAX_LEVEL_REDRAWS: usize = 1000;

/// Expected symptom count with each exclusion group capped at its most
/// frequent member, since at most one member can be present.
fn expected_present(chosen: &[u32], levels: &[u8], findings: &[Finding], table: &FrequencyTable) -> f64 {
    let mut free = 0.0;
    let mut grouped: BTreeMap<u32, f64> = BTreeMap::new();
    for (&f, &l) in chosen.iter().zip(levels) {
        let p = table.probability_unchecked(l);
        match findings[f as usize].exclusion_group {
            Some(g) => {
                let best = grouped.entry(g).or_insert(0.0);
                *best = best.max(p);
            }
            None => free += p,
        }
    }
    free + grouped.values().sum::<f64>()
}

/// Raises the lowest levels one step at a time until the floor holds or
/// every level is at the maximum.
fn raise_to_floor(chosen: &[u32], levels: &mut [u8], findings: &[Finding], table: &FrequencyTable, floor: f64) {
    while expected_present(chosen, levels, findings, table) < floor {
        match (0..levels.len()).filter(|&i| levels[i] < MAX_FREQUENCY).min_by_key(|&i| levels[i]) {
            Some(i) => levels[i] += 1,
            None => return,
        }
    }
}

/// Symptoms that can co-occur at most: ungrouped ones plus one per group.
fn independent_units<'a>(chosen: impl IntoIterator<Item = &'a u32>, findings: &[Finding]) -> usize {
    let mut free = 0;
    let mut groups = BTreeSet::new();
    for &f in chosen {
        match findings[f as usize].exclusion_group {
            Some(g) => {
                groups.insert(g);
            }
            None => free += 1,
        }
    }
    free + groups.len()
}

/// Generates a knowledge base. Pure function of `config`, seed included.
pub fn generate_synthetic_kb(config: &KbConfig) -> Result<KnowledgeBase> {
    config.validate()?;
    let mut rng = seed::derived_rng(config.seed, &[seed::tag::KB]);

    let mut findings = Vec::with_capacity(config.n_findings);
    let mut exclusion_groups: Vec<Vec<u32>> = Vec::new();
    let mut demographic_groups = Vec::new();
    for template in &config.demographics {
        let group_id = exclusion_groups.len() as u32;
        let mut members = Vec::new();
        for value in &template.values {
            let id = findings.len() as u32;
            findings.push(Finding {
                id,
                name: format!("{}_{}", template.name, value),
                kind: FindingKind::Demographic,
                exclusion_group: Some(group_id),
            });
            members.push(id);
        }
        demographic_groups.push(members.clone());
        exclusion_groups.push(members);
    }
    let first_symptom = findings.len();
    for id in first_symptom..config.n_findings {
        findings.push(Finding {
            id: id as u32,
            name: format!("symptom_{:04}", id - first_symptom),
            kind: FindingKind::Symptom,
            exclusion_group: None,
        });
    }
    let symptom_ids: Vec<u32> = (first_symptom as u32..config.n_findings as u32).collect();

    let mut shuffled = symptom_ids.clone();
    shuffled.shuffle(&mut rng);
    let n_systems = config.n_body_systems.clamp(1, symptom_ids.len());
    let mut systems: Vec<Vec<u32>> = vec![Vec::new(); n_systems];
    let dealt = config
        .symptoms_per_system
        .map_or(shuffled.len(), |k| (k * n_systems).min(shuffled.len()));
    for (i, &s) in shuffled[..dealt].iter().enumerate() {
        systems[i % n_systems].push(s);
    }
    let mut shared_level = vec![0u8; config.n_findings];
    for pool in &mut systems {
        pool.sort_unstable();
        for &f in pool.iter() {
            shared_level[f as usize] = rng.gen_range(1..=MAX_FREQUENCY);
        }
    }

    // Symptom exclusion groups are carved out of a single system pool where
    // possible, so diseases of that system actually link to rival findings.
    let mut grouped: HashSet<u32> = HashSet::new();
    for _ in 0..config.n_exclusion_groups {
        let size = rng.gen_range(config.exclusion_group_size.min..=config.exclusion_group_size.max);
        let system = rng.gen_range(0..n_systems);
        let mut candidates: Vec<u32> = systems[system]
            .iter()
            .copied()
            .filter(|f| !grouped.contains(f))
            .collect();
        if candidates.len() < size {
            candidates = symptom_ids
                .iter()
                .copied()
                .filter(|f| !grouped.contains(f))
                .collect();
        }
        let mut members: Vec<u32> = candidates.choose_multiple(&mut rng, size).copied().collect();
        members.sort_unstable();
        let group_id = exclusion_groups.len() as u32;
        for &m in &members {
            grouped.insert(m);
            findings[m as usize].exclusion_group = Some(group_id);
        }
        exclusion_groups.push(members);
    }

    // Prevalence: exactly n_very_common very common; the rest split evenly,
    // with common taking the odd one out.
    let mut order: Vec<u32> = (0..config.n_diseases as u32).collect();
    order.shuffle(&mut rng);
    let mut prevalence = vec![Prevalence::Rare; config.n_diseases];
    let rest = config.n_diseases - config.n_very_common;
    let n_common = rest - rest / 2;
    for (rank, &d) in order.iter().enumerate() {
        prevalence[d as usize] = if rank < config.n_very_common {
            Prevalence::VeryCommon
        } else if rank < config.n_very_common + n_common {
            Prevalence::Common
        } else {
            Prevalence::Rare
        };
    }

    let table = FrequencyTable::default();
    let range = &config.symptoms_per_disease_range;
    let mut diseases = Vec::with_capacity(config.n_diseases);
    let mut links = Vec::new();
    for d in 0..config.n_diseases as u32 {
        diseases.push(Disease {
            id: d,
            name: format!("disease_{d:04}"),
            prevalence: prevalence[d as usize],
        });

        let mut disease_links = Vec::new();
        for (template, members) in config.demographics.iter().zip(&demographic_groups) {
            if rng.gen_bool(template.preference_rate) {
                let preferred = rng.gen_range(0..members.len());
                for (i, &f) in members.iter().enumerate() {
                    let level = if i == preferred {
                        PREFERRED_DEMOGRAPHIC_LEVEL
                    } else {
                        OTHER_DEMOGRAPHIC_LEVEL
                    };
                    disease_links.push((f, level));
                }
            }
        }

        let n_symptoms = rng.gen_range(range.min..=range.max).min(symptom_ids.len());
        let pool = &systems[rng.gen_range(0..n_systems)];
        let max_symptoms = range.max.min(symptom_ids.len());
        let mut chosen: BTreeSet<u32> = BTreeSet::new();
        // Tops up past the drawn count while exclusion groups leave too few
        // symptoms that can co-occur to reach the floor.
        while chosen.len() < n_symptoms
            || (chosen.len() < max_symptoms
                && 0.75 * (independent_units(&chosen, &findings) as f64) < config.min_expected_symptoms)
        {
            let from_pool = rng.gen_bool(config.system_affinity)
                && pool.iter().any(|f| !chosen.contains(f));
            let candidate = if from_pool {
                pool[rng.gen_range(0..pool.len())]
            } else {
                symptom_ids[rng.gen_range(0..symptom_ids.len())]
            };
            chosen.insert(candidate);
        }
        let chosen: Vec<u32> = chosen.into_iter().collect();

        let floor = config.min_expected_symptoms.min(0.75 * independent_units(&chosen, &findings) as f64);
        let inherited: Vec<u8> = chosen
            .iter()
            .map(|&f| match shared_level[f as usize] {
                l if l > 0 && pool.contains(&f) && rng.gen_bool(config.system_level_sharing) => l,
                _ => 0,
            })
            .collect();
        let mut levels: Vec<u8> = Vec::new();
        for attempt in 0..MAX_LEVEL_REDRAWS {
            // The second half of the redraws drops inheritance.
            let keep = attempt < MAX_LEVEL_REDRAWS / 2;
            levels = inherited
                .iter()
                .map(|&l| if keep && l > 0 { l } else { rng.gen_range(1..=MAX_FREQUENCY) })
                .collect();
            let expected = expected_present(&chosen, &levels, &findings, &table);
            if expected >= floor {
                break;
            }
        }
        raise_to_floor(&chosen, &mut levels, &findings, &table, floor);
        disease_links.extend(chosen.iter().copied().zip(levels));
        disease_links.sort_unstable_by_key(|&(f, _)| f);
        for (f, frequency) in disease_links {
            links.push(DiseaseFindingLink {
                disease_id: d,
                finding_id: f,
                frequency,
                evoking_strength: rng.gen_range(0..=MAX_EVOKING_STRENGTH),
            });
        }
    }

    let kb = KnowledgeBase {
        findings,
        diseases,
        links,
        exclusion_groups,
    };
    debug_assert!(validate_kb(&kb).is_empty());
    Ok(kb)
}

/// Lists every broken invariant; empty iff the KB is well formed.
pub fn validate_kb(kb: &KnowledgeBase) -> Vec<String> {
    let mut violations = Vec::new();
    let n_findings = kb.findings.len();
    let n_diseases = kb.diseases.len();

    for (i, f) in kb.findings.iter().enumerate() {
        if f.id as usize != i {
            violations.push(format!("finding #{i} has id {} (ids must be dense)", f.id));
        }
        match f.exclusion_group {
            None if f.kind == FindingKind::Demographic => violations.push(format!(
                "demographic finding {} (`{}`) has no exclusion group",
                f.id, f.name
            )),
            Some(g) => match kb.exclusion_groups.get(g as usize) {
                None => violations.push(format!(
                    "finding {} references missing exclusion group {g}",
                    f.id
                )),
                Some(members) if !members.contains(&f.id) => violations.push(format!(
                    "finding {} claims exclusion group {g} which does not list it",
                    f.id
                )),
                Some(_) => {}
            },
            None => {}
        }
    }
    for (i, d) in kb.diseases.iter().enumerate() {
        if d.id as usize != i {
            violations.push(format!("disease #{i} has id {} (ids must be dense)", d.id));
        }
    }

    let mut owner: Vec<Option<usize>> = vec![None; n_findings];
    for (g, members) in kb.exclusion_groups.iter().enumerate() {
        for &f in members {
            match owner.get_mut(f as usize) {
                None => violations.push(format!(
                    "exclusion group {g} references unknown finding {f}"
                )),
                Some(Some(prev)) => violations.push(format!(
                    "exclusion groups {prev} and {g} overlap on finding {f}"
                )),
                Some(slot) => *slot = Some(g),
            }
        }
    }

    let mut pairs = HashSet::new();
    let mut has_symptom = vec![false; n_diseases];
    for (k, l) in kb.links.iter().enumerate() {
        let disease_ok = (l.disease_id as usize) < n_diseases;
        let finding_ok = (l.finding_id as usize) < n_findings;
        if !disease_ok {
            violations.push(format!("dangling disease reference in link #{k}"));
        }
        if !finding_ok {
            violations.push(format!("dangling finding reference in link #{k}"));
        }
        if !(1..=MAX_FREQUENCY).contains(&l.frequency) {
            violations.push(format!(
                "link #{k} frequency {} outside 1..={MAX_FREQUENCY}",
                l.frequency
            ));
        }
        if l.evoking_strength > MAX_EVOKING_STRENGTH {
            violations.push(format!(
                "link #{k} evoking strength {} outside 0..={MAX_EVOKING_STRENGTH}",
                l.evoking_strength
            ));
        }
        if !pairs.insert((l.disease_id, l.finding_id)) {
            violations.push(format!(
                "duplicate link #{k} for (disease {}, finding {})",
                l.disease_id, l.finding_id
            ));
        }
        if disease_ok && finding_ok && kb.findings[l.finding_id as usize].kind == FindingKind::Symptom {
            has_symptom[l.disease_id as usize] = true;
        }
    }
    for (d, ok) in has_symptom.iter().enumerate() {
        if !ok {
            violations.push(format!("disease {d} has no linked symptom"));
        }
    }
    violations
}

pub fn save_kb(kb: &KnowledgeBase, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, kb.to_json_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_kb(path: impl AsRef<Path>) -> Result<KnowledgeBase> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    KnowledgeBase::from_json_bytes(&bytes)
}
