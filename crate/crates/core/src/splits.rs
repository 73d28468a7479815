//! Label splits and dataset partitions.
//!
//! `L_select` is the set of very common diseases. Hard unknowns are the
//! unique nearest neighbours of each selected disease in a PCA projection of
//! mean one-hot case profiles; `L_extra` is a uniform sample of what remains.
//! Task 2 spreads `L_select` over several sites with a controlled fraction of
//! conditions shared between sites.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::casesim::{simulate_indexed, CaseSimulator, Dataset};
use crate::error::{Error, Result};
use crate::kbmodel::{KnowledgeBase, Prevalence};
use crate::numerics::{gram, matmul, sym_eigen, Matrix};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSplit {
    pub l_select: BTreeSet<u32>,
    pub l_unknown: BTreeSet<u32>,
    pub l_extra: BTreeSet<u32>,
    pub pca_components_retained: usize,
    pub variance_explained: f64,
    pub kb_hash: String,
    pub seed: u64,
}

impl LabelSplit {
    /// Pairwise-disjointness violations, if any.
    pub fn check(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let pairs = [
            ("l_select", &self.l_select, "l_unknown", &self.l_unknown),
            ("l_select", &self.l_select, "l_extra", &self.l_extra),
            ("l_unknown", &self.l_unknown, "l_extra", &self.l_extra),
        ];
        for (an, a, bn, b) in pairs {
            let shared: Vec<_> = a.intersection(b).collect();
            if !shared.is_empty() {
                problems.push(format!("{an} and {bn} share {shared:?}"));
            }
        }
        problems
    }
}

/// Averages the binary finding vectors of each disease's cases; row `i` is disease `i`.
pub fn mean_onehot_profiles(kb: &KnowledgeBase, cases: &Dataset) -> Result<Matrix> {
    let n = kb.n_diseases();
    let d = kb.n_findings();
    let mut profiles = Matrix::zeros(n, d);
    let mut counts = vec![0usize; n];
    for c in &cases.cases {
        let row = c.disease_id as usize;
        if row >= n {
            return Err(Error::Domain(format!("case for unknown disease {}", c.disease_id)));
        }
        counts[row] += 1;
        let r = profiles.row_mut(row);
        for &f in &c.present_findings {
            let slot = r.get_mut(f as usize).ok_or_else(|| {
                Error::Domain(format!("finding {f} outside vocabulary of {d}"))
            })?;
            *slot += 1.0;
        }
    }
    for (i, &k) in counts.iter().enumerate() {
        if k == 0 {
            return Err(Error::Domain(format!("disease {i} has no cases to profile")));
        }
        let inv = 1.0 / k as f64;
        profiles.row_mut(i).iter_mut().for_each(|v| *v *= inv);
    }
    Ok(profiles)
}

#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// `N x k` scores of the centred rows.
    pub reduced: Matrix,
    /// `D x k` orthonormal principal directions.
    pub components: Matrix,
    /// Retained covariance eigenvalues, descending.
    pub variances: Vec<f64>,
    pub variance_explained: f64,
}

impl PcaProjection {
    pub fn n_components(&self) -> usize {
        self.components.cols()
    }
}

/// PCA keeping the fewest components whose cumulative variance reaches
/// `variance_target`, capped at `max_components`.
///
/// When there are fewer rows than columns the `N x N` Gram matrix of the
/// centred data is decomposed instead of the `D x D` covariance; both share
/// the same non-zero spectrum.
pub fn pca_reduce(profiles: &Matrix, variance_target: f64, max_components: usize) -> Result<PcaProjection> {
    let (n, d) = profiles.shape();
    if n < 2 {
        return Err(Error::Domain("PCA needs at least two rows".into()));
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(Error::config("variance_target", "must lie in (0, 1]"));
    }
    if max_components == 0 {
        return Err(Error::config("max_components", "must be at least 1"));
    }

    let mut centred = profiles.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| profiles[(i, j)]).sum::<f64>() / n as f64;
        for i in 0..n {
            centred[(i, j)] -= mean;
        }
    }
    let denom = (n - 1) as f64;
    let total = centred.as_slice().iter().map(|v| v * v).sum::<f64>() / denom;
    if total <= f64::EPSILON * (n * d) as f64 {
        return Err(Error::Domain("all rows are identical; total variance is zero".into()));
    }

    let gram_route = n < d;
    let eig = if gram_route {
        sym_eigen(&gram(&centred))?
    } else {
        sym_eigen(&gram(&centred.transpose()))?
    };
    let variances: Vec<f64> = eig.values.iter().map(|v| v / denom).collect();
    let positive = variances
        .iter()
        .take_while(|&&v| v > 1e-12 * variances[0].max(f64::MIN_POSITIVE))
        .count();

    let mut k = 0;
    let mut cumulative = 0.0;
    while k < positive && k < max_components {
        cumulative += variances[k];
        k += 1;
        if cumulative / total >= variance_target - 1e-12 {
            break;
        }
    }

    let components = if gram_route {
        // v_j = X^T u_j / sqrt(lambda_j)
        let mut comps = Matrix::zeros(d, k);
        for j in 0..k {
            let scale = 1.0 / eig.values[j].sqrt();
            for i in 0..n {
                let u = eig.vectors[(i, j)] * scale;
                if u == 0.0 {
                    continue;
                }
                for (f, &x) in centred.row(i).iter().enumerate() {
                    comps[(f, j)] += u * x;
                }
            }
        }
        comps
    } else {
        eig.vectors.leading_columns(k)
    };
    let reduced = matmul(&centred, &components)?;
    Ok(PcaProjection {
        reduced,
        components,
        variances: variances[..k].to_vec(),
        variance_explained: cumulative / total,
    })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Picks, for each selected disease in ascending id order, its nearest
/// not-yet-chosen candidate in `reduced` (row = disease id). Ties go to the
/// lower candidate id. Returns unknowns in selection order.
pub fn select_unknowns(
    reduced: &Matrix,
    l_select: &BTreeSet<u32>,
    candidates: &BTreeSet<u32>,
) -> Result<Vec<u32>> {
    if let Some(c) = candidates.iter().find(|c| l_select.contains(c)) {
        return Err(Error::Domain(format!("candidate {c} is also in l_select")));
    }
    if let Some(&bad) = l_select
        .iter()
        .chain(candidates)
        .find(|&&id| id as usize >= reduced.rows())
    {
        return Err(Error::Domain(format!("disease {bad} has no row in the projection")));
    }
    let mut pool: Vec<u32> = candidates.iter().copied().collect();
    let mut chosen = Vec::with_capacity(l_select.len());
    for &s in l_select {
        let anchor = reduced.row(s as usize);
        let best = pool
            .iter()
            .enumerate()
            .map(|(pos, &c)| (pos, squared_distance(anchor, reduced.row(c as usize))))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((pos, _)) => chosen.push(pool.remove(pos)),
            None => return Err(Error::PoolExhausted { selected: chosen }),
        }
    }
    Ok(chosen)
}

/// Uniform sample of `n` ids from `pool` without replacement.
pub fn sample_extras<R: Rng + ?Sized>(pool: &BTreeSet<u32>, n: usize, rng: &mut R) -> Result<BTreeSet<u32>> {
    if n > pool.len() {
        return Err(Error::Domain(format!(
            "cannot sample {n} extras from a pool of {}",
            pool.len()
        )));
    }
    let ids: Vec<u32> = pool.iter().copied().collect();
    Ok(index::sample(rng, ids.len(), n).into_iter().map(|i| ids[i]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub variance_target: f64,
    pub max_components: usize,
    /// Size of `L_extra`; `None` means `|L_select|`.
    pub n_extra: Option<usize>,
    /// Cases simulated per disease for the PCA profiles.
    pub profile_cases_per_disease: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            variance_target: 0.9,
            max_components: 500,
            n_extra: None,
            profile_cases_per_disease: 100,
        }
    }
}

/// Full label split: very common diseases, their PCA nearest neighbours, and
/// a uniform sample of the rest. `extra_seed` drives only the extra sample.
pub fn build_label_split(
    kb: &KnowledgeBase,
    profile_cases: &Dataset,
    config: &SplitConfig,
    extra_seed: u64,
) -> Result<LabelSplit> {
    let l_select = kb.diseases_with(Prevalence::VeryCommon);
    let candidates: BTreeSet<u32> = kb.all_disease_ids().difference(&l_select).copied().collect();
    let profiles = mean_onehot_profiles(kb, profile_cases)?;
    let pca = pca_reduce(&profiles, config.variance_target, config.max_components)?;
    let l_unknown: BTreeSet<u32> = select_unknowns(&pca.reduced, &l_select, &candidates)?
        .into_iter()
        .collect();
    let remaining: BTreeSet<u32> = candidates.difference(&l_unknown).copied().collect();
    let n_extra = config.n_extra.unwrap_or(l_select.len());
    let l_extra = sample_extras(
        &remaining,
        n_extra,
        &mut seed::derived_rng(extra_seed, &[seed::tag::EXTRA_SAMPLE]),
    )?;
    Ok(LabelSplit {
        l_select,
        l_unknown,
        l_extra,
        pca_components_retained: pca.n_components(),
        variance_explained: pca.variance_explained,
        kb_hash: kb.content_hash(),
        seed: extra_seed,
    })
}

/// Re-draws `L_extra` for a new replicate, keeping select and unknown sets.
pub fn resample_extras(kb: &KnowledgeBase, split: &LabelSplit, n_extra: usize, extra_seed: u64) -> Result<LabelSplit> {
    let remaining: BTreeSet<u32> = kb
        .all_disease_ids()
        .into_iter()
        .filter(|d| !split.l_select.contains(d) && !split.l_unknown.contains(d))
        .collect();
    let l_extra = sample_extras(
        &remaining,
        n_extra,
        &mut seed::derived_rng(extra_seed, &[seed::tag::EXTRA_SAMPLE]),
    )?;
    Ok(LabelSplit {
        l_extra,
        seed: extra_seed,
        ..split.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseCounts {
    pub cases_per_select: usize,
    pub cases_per_extra: usize,
    pub cases_per_unknown: usize,
    pub test_frac: f64,
    pub val_frac: f64,
}

impl Default for CaseCounts {
    fn default() -> Self {
        CaseCounts {
            cases_per_select: 1000,
            cases_per_extra: 100,
            cases_per_unknown: 1000,
            test_frac: 0.2,
            val_frac: 0.1,
        }
    }
}

/// Case-index ranges of one selected disease.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectPartition {
    pub test: Range<usize>,
    pub val: Range<usize>,
    pub train: Range<usize>,
}

impl CaseCounts {
    pub fn select_partition(&self) -> Result<SelectPartition> {
        if !(0.0..=1.0).contains(&self.test_frac) {
            return Err(Error::config("test_frac", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(Error::config("val_frac", "must lie in [0, 1)"));
        }
        let n = self.cases_per_select;
        let n_test = (n as f64 * self.test_frac).round() as usize;
        let rest = n - n_test;
        let n_val = (rest as f64 * self.val_frac).round() as usize;
        if rest == n_val {
            return Err(Error::Domain(format!(
                "test_frac {} and val_frac {} leave no training cases",
                self.test_frac, self.val_frac
            )));
        }
        Ok(SelectPartition {
            test: 0..n_test,
            val: n_test..n_test + n_val,
            train: n_test + n_val..n,
        })
    }

    /// Training-plus-validation cases per selected condition.
    pub fn select_trainval(&self) -> Result<usize> {
        let p = self.select_partition()?;
        Ok(p.val.len() + p.train.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDatasets {
    pub train_select: Dataset,
    pub val_select: Dataset,
    pub test_select: Dataset,
    pub extra_train: Dataset,
    pub test_unknown: Dataset,
}

/// Held-out test cases of the selected diseases; shared by both tasks.
pub fn simulate_select_test(
    sim: &CaseSimulator<'_>,
    split: &LabelSplit,
    counts: &CaseCounts,
    master_seed: u64,
) -> Result<Dataset> {
    let part = counts.select_partition()?;
    simulate_indexed(
        sim,
        &split.l_select,
        |_| part.test.clone(),
        seed::derive(master_seed, &[seed::tag::SELECT]),
    )
}

pub fn simulate_unknown_test(
    sim: &CaseSimulator<'_>,
    split: &LabelSplit,
    counts: &CaseCounts,
    master_seed: u64,
) -> Result<Dataset> {
    simulate_indexed(
        sim,
        &split.l_unknown,
        |_| 0..counts.cases_per_unknown,
        seed::derive(master_seed, &[seed::tag::UNKNOWN]),
    )
}

/// Task 1 partitions. Selected diseases are split per disease by case index
/// (test, then validation, then training); extra cases all go to training and
/// unknown cases all go to test.
pub fn build_task1_splits(
    sim: &CaseSimulator<'_>,
    split: &LabelSplit,
    counts: &CaseCounts,
    master_seed: u64,
) -> Result<SplitDatasets> {
    let part = counts.select_partition()?;
    let select_seed = seed::derive(master_seed, &[seed::tag::SELECT]);
    Ok(SplitDatasets {
        train_select: simulate_indexed(sim, &split.l_select, |_| part.train.clone(), select_seed)?,
        val_select: simulate_indexed(sim, &split.l_select, |_| part.val.clone(), select_seed)?,
        test_select: simulate_select_test(sim, split, counts, master_seed)?,
        extra_train: simulate_indexed(
            sim,
            &split.l_extra,
            |_| 0..counts.cases_per_extra,
            seed::derive(master_seed, &[seed::tag::EXTRA]),
        )?,
        test_unknown: simulate_unknown_test(sim, split, counts, master_seed)?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Site {
    pub l_rel: BTreeSet<u32>,
    pub l_extra_local: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SitePlan {
    pub sites: Vec<Site>,
    pub requested_overlap_percent: f64,
    /// Measured fraction of `L_select` held by more than one site.
    pub overlap_fraction: f64,
    pub kb_hash: String,
    pub seed: u64,
}

impl SitePlan {
    pub fn l_select(&self) -> BTreeSet<u32> {
        self.sites.iter().flat_map(|s| s.l_rel.iter().copied()).collect()
    }

    pub fn pooled_extras(&self) -> BTreeSet<u32> {
        self.sites
            .iter()
            .flat_map(|s| s.l_extra_local.iter().copied())
            .collect()
    }

    pub fn measured_overlap(&self) -> f64 {
        measured_overlap(&self.sites)
    }
}

fn measured_overlap(sites: &[Site]) -> f64 {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for s in sites {
        for &c in &s.l_rel {
            *counts.entry(c).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return 0.0;
    }
    counts.values().filter(|&&n| n > 1).count() as f64 / counts.len() as f64
}

/// Distributes `l_select` over `m_sites` sites.
///
/// Conditions are shuffled and dealt round-robin. The first
/// `round(overlap_percent% * |l_select|)` of them are also dealt to a second
/// site, shifted by a block-dependent offset so every block of `m_sites`
/// duplicates lands on distinct sites and site sizes stay balanced. Each site
/// then draws `extras_per_site` extra conditions from `remaining_pool`,
/// without replacement across sites.
pub fn build_site_plan<R: Rng + ?Sized>(
    l_select: &BTreeSet<u32>,
    remaining_pool: &BTreeSet<u32>,
    m_sites: usize,
    overlap_percent: f64,
    extras_per_site: usize,
    rng: &mut R,
) -> Result<SitePlan> {
    if m_sites == 0 {
        return Err(Error::config("m_sites", "must be at least 1"));
    }
    if !(0.0..=100.0).contains(&overlap_percent) {
        return Err(Error::config("overlap_percent", "must lie in [0, 100]"));
    }
    if let Some(c) = remaining_pool.iter().find(|c| l_select.contains(c)) {
        return Err(Error::Domain(format!("pool condition {c} is in l_select")));
    }
    let mut order: Vec<u32> = l_select.iter().copied().collect();
    order.shuffle(rng);

    let mut sites = vec![
        Site {
            l_rel: BTreeSet::new(),
            l_extra_local: BTreeSet::new(),
        };
        m_sites
    ];
    for (i, &c) in order.iter().enumerate() {
        sites[i % m_sites].l_rel.insert(c);
    }
    if m_sites > 1 {
        let n_dup = (overlap_percent / 100.0 * order.len() as f64).round() as usize;
        for (i, &c) in order.iter().take(n_dup).enumerate() {
            let shift = 1 + (i / m_sites) % (m_sites - 1);
            sites[(i % m_sites + shift) % m_sites].l_rel.insert(c);
        }
    }

    let needed = m_sites * extras_per_site;
    if needed > remaining_pool.len() {
        return Err(Error::Domain(format!(
            "extra pool of {} cannot supply {extras_per_site} extras to each of {m_sites} sites",
            remaining_pool.len()
        )));
    }
    let pool: Vec<u32> = remaining_pool.iter().copied().collect();
    let drawn: Vec<u32> = index::sample(rng, pool.len(), needed)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    for (site, chunk) in sites.iter_mut().zip(drawn.chunks(extras_per_site.max(1))) {
        if extras_per_site > 0 {
            site.l_extra_local = chunk.iter().copied().collect();
        }
    }

    let overlap_fraction = measured_overlap(&sites);
    Ok(SitePlan {
        sites,
        requested_overlap_percent: overlap_percent,
        overlap_fraction,
        kb_hash: String::new(),
        seed: 0,
    })
}

/// Per-site training data; nothing here crosses sites.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteData {
    pub train_select: Dataset,
    pub val_select: Dataset,
    pub extra_train: Dataset,
}

/// Simulates each site's own cases. Site `i` draws from its own stream, so a
/// condition held by two sites gets two independent case sets.
pub fn build_site_data(
    sim: &CaseSimulator<'_>,
    plan: &SitePlan,
    counts: &CaseCounts,
    master_seed: u64,
) -> Result<Vec<SiteData>> {
    let n_trainval = counts.select_trainval()?;
    let n_val = counts.select_partition()?.val.len();
    plan.sites
        .iter()
        .enumerate()
        .map(|(i, site)| {
            let site_seed = seed::derive(master_seed, &[seed::tag::SITE_CASES, i as u64]);
            Ok(SiteData {
                val_select: simulate_indexed(sim, &site.l_rel, |_| 0..n_val, site_seed)?,
                train_select: simulate_indexed(sim, &site.l_rel, |_| n_val..n_trainval, site_seed)?,
                extra_train: simulate_indexed(
                    sim,
                    &site.l_extra_local,
                    |_| 0..counts.cases_per_extra,
                    seed::derive(site_seed, &[seed::tag::EXTRA]),
                )?,
            })
        })
        .collect()
}

/// The small pooled set used to fit learned ensembles.
pub fn build_pooled_heldout(
    sim: &CaseSimulator<'_>,
    l_select: &BTreeSet<u32>,
    extras: &BTreeSet<u32>,
    per_select: usize,
    per_extra: usize,
    master_seed: u64,
) -> Result<Dataset> {
    let base = seed::derive(master_seed, &[seed::tag::HELDOUT]);
    let select = simulate_indexed(sim, l_select, |_| 0..per_select, base)?;
    let extra = simulate_indexed(sim, extras, |_| 0..per_extra, seed::derive(base, &[seed::tag::EXTRA]))?;
    Dataset::concat([&select, &extra])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casesim::{ClinicalCase, SimConfig};
    use crate::kbmodel::{generate_synthetic_kb, KbConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn case(d: u32, x: &[u32]) -> ClinicalCase {
        ClinicalCase {
            disease_id: d,
            present_findings: x.to_vec(),
        }
    }

    fn small_kb() -> KnowledgeBase {
        generate_synthetic_kb(&KbConfig {
            n_diseases: 60,
            n_findings: 400,
            n_very_common: 12,
            n_exclusion_groups: 10,
            n_body_systems: 8,
            seed: 21,
            ..KbConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn two_case_mean_profile() {
        let kb = generate_synthetic_kb(&KbConfig {
            n_diseases: 1,
            n_findings: 4,
            n_very_common: 0,
            symptoms_per_disease_range: crate::kbmodel::RangeSpec::new(1, 1),
            n_exclusion_groups: 0,
            demographics: vec![],
            ..KbConfig::default()
        })
        .unwrap();
        let ds = Dataset {
            cases: vec![case(0, &[1, 2]), case(0, &[2, 3])],
            vocab_size: 4,
            label_space: [0].into(),
        };
        let p = mean_onehot_profiles(&kb, &ds).unwrap();
        assert_eq!(p.row(0), &[0.0, 0.5, 1.0, 0.5]);

        let empty = Dataset::empty(4);
        assert!(mean_onehot_profiles(&kb, &empty).is_err());
    }

    #[test]
    fn rank_one_rows_need_one_component() {
        let rows: Vec<Vec<f64>> = (0..6).map(|t| vec![t as f64, t as f64, 0.0]).collect();
        let pca = pca_reduce(&Matrix::from_rows(&rows).unwrap(), 0.9, 10).unwrap();
        assert_eq!(pca.n_components(), 1);
        assert!((pca.variance_explained - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_are_rejected() {
        let rows = vec![vec![1.0, 2.0, 3.0]; 4];
        assert!(matches!(
            pca_reduce(&Matrix::from_rows(&rows).unwrap(), 0.9, 3),
            Err(Error::Domain(_))
        ));
    }

    fn pairwise_distance_error(a: &Matrix, b: &Matrix) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..a.rows() {
            for j in 0..a.rows() {
                let da = squared_distance(a.row(i), a.row(j)).sqrt();
                let db = squared_distance(b.row(i), b.row(j)).sqrt();
                worst = worst.max((da - db).abs());
            }
        }
        worst
    }

    #[test]
    fn full_rank_projection_is_an_isometry() {
        let mut rng = seed::rng(5);
        let data: Vec<f64> = (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = Matrix::from_vec(20, 6, data).unwrap();
        let pca = pca_reduce(&m, 1.0, 6).unwrap();
        assert_eq!(pca.n_components(), 6);
        assert!(pairwise_distance_error(&m, &pca.reduced) <= 1e-8);

        // Wide input goes through the Gram route.
        let data: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wide = Matrix::from_vec(5, 12, data).unwrap();
        let pca = pca_reduce(&wide, 1.0, 12).unwrap();
        assert_eq!(pca.n_components(), 4);
        assert!(pairwise_distance_error(&wide, &pca.reduced) <= 1e-8);
        let vtv = matmul(&pca.components.transpose(), &pca.components).unwrap();
        assert!(vtv.max_abs_diff(&Matrix::identity(4)) <= 1e-8);
    }

    #[test]
    fn gram_and_covariance_routes_agree() {
        let mut rng = seed::rng(6);
        let data: Vec<f64> = (0..56).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = Matrix::from_vec(7, 8, data).unwrap();
        let wide = pca_reduce(&m, 0.8, 8).unwrap();
        // Stacking the rows twice makes the matrix tall (covariance route)
        // while scaling every covariance eigenvalue by the same factor.
        let tall_rows: Vec<Vec<f64>> = (0..7).map(|i| m.row(i).to_vec()).chain((0..7).map(|i| m.row(i).to_vec())).collect();
        let tall = pca_reduce(&Matrix::from_rows(&tall_rows).unwrap(), 0.8, 8).unwrap();
        assert_eq!(wide.n_components(), tall.n_components());
        assert!((wide.variance_explained - tall.variance_explained).abs() < 1e-10);
    }

    #[test]
    fn nearest_unknowns_by_hand() {
        // 1-D: A=0 at 0.0, B=1 at 10.0, P=2 at 0.1, Q=3 at 9.8, R=4 at 50.
        let m = Matrix::from_vec(5, 1, vec![0.0, 10.0, 0.1, 9.8, 50.0]).unwrap();
        let u = select_unknowns(&m, &[0, 1].into(), &[2, 3, 4].into()).unwrap();
        assert_eq!(u, vec![2, 3]);

        // One candidate equidistant from both selected diseases goes to the
        // lower id; the second falls back to the next nearest.
        let m = Matrix::from_vec(5, 1, vec![0.0, 2.0, 1.0, 4.0, 9.0]).unwrap();
        let u = select_unknowns(&m, &[0, 1].into(), &[2, 3, 4].into()).unwrap();
        assert_eq!(u, vec![2, 3]);

        // Ties between candidates break toward the lower id.
        let m = Matrix::from_vec(3, 1, vec![0.0, 1.0, -1.0]).unwrap();
        assert_eq!(select_unknowns(&m, &[0].into(), &[1, 2].into()).unwrap(), vec![1]);
    }

    #[test]
    fn exhausted_pool_returns_partial_selection() {
        let m = Matrix::from_vec(3, 1, vec![0.0, 1.0, 5.0]).unwrap();
        match select_unknowns(&m, &[0, 1].into(), &[2].into()) {
            Err(Error::PoolExhausted { selected }) => assert_eq!(selected, vec![2]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extras_sampling_edges() {
        let pool: BTreeSet<u32> = (100..610).collect();
        let mut rng = seed::rng(1);
        let e = sample_extras(&pool, 160, &mut rng).unwrap();
        assert_eq!(e.len(), 160);
        assert!(e.is_subset(&pool));
        assert_eq!(sample_extras(&pool, pool.len(), &mut rng).unwrap(), pool);
        assert!(sample_extras(&pool, 0, &mut rng).unwrap().is_empty());
        assert!(sample_extras(&pool, 511, &mut rng).is_err());
        assert_eq!(
            sample_extras(&pool, 10, &mut seed::rng(3)).unwrap(),
            sample_extras(&pool, 10, &mut seed::rng(3)).unwrap()
        );
    }

    #[test]
    fn label_split_is_disjoint() {
        let kb = small_kb();
        let sim = CaseSimulator::new(&kb, SimConfig::default()).unwrap();
        let profiles = crate::casesim::simulate_dataset(
            &sim,
            &kb.all_disease_ids(),
            &crate::casesim::CasesPerDisease::Uniform(20),
            1,
        )
        .unwrap();
        let split = build_label_split(&kb, &profiles, &SplitConfig::default(), 4).unwrap();
        assert!(split.check().is_empty());
        assert_eq!(split.l_select.len(), 12);
        assert_eq!(split.l_unknown.len(), 12);
        assert_eq!(split.l_extra.len(), 12);
        assert!(split.variance_explained >= 0.9);

        let again = resample_extras(&kb, &split, 12, 5).unwrap();
        assert_eq!(again.l_select, split.l_select);
        assert_eq!(again.l_unknown, split.l_unknown);
        assert!(again.check().is_empty());
    }

    #[test]
    fn task1_partition_sizes() {
        let counts = CaseCounts::default();
        let p = counts.select_partition().unwrap();
        assert_eq!((p.test.len(), p.val.len(), p.train.len()), (200, 80, 720));
        // Default split of 160 select and 160 unknown conditions.
        assert_eq!(160 * p.test.len() + 160 * counts.cases_per_unknown, 192_000);

        let degenerate = CaseCounts {
            test_frac: 1.0,
            ..CaseCounts::default()
        };
        assert!(matches!(degenerate.select_partition(), Err(Error::Domain(_))));
    }

    #[test]
    fn task1_datasets_are_disjoint_and_reproducible() {
        let kb = small_kb();
        let sim = CaseSimulator::new(&kb, SimConfig::default()).unwrap();
        let split = LabelSplit {
            l_select: [0, 1, 2].into(),
            l_unknown: [3, 4].into(),
            l_extra: [5].into(),
            pca_components_retained: 0,
            variance_explained: 1.0,
            kb_hash: String::new(),
            seed: 0,
        };
        let counts = CaseCounts {
            cases_per_select: 50,
            cases_per_extra: 7,
            cases_per_unknown: 11,
            ..CaseCounts::default()
        };
        let a = build_task1_splits(&sim, &split, &counts, 9).unwrap();
        assert_eq!(a.test_select.len(), 30);
        assert_eq!(a.val_select.len(), 12);
        assert_eq!(a.train_select.len(), 108);
        assert_eq!(a.extra_train.len(), 7);
        assert_eq!(a.test_unknown.len(), 22);
        assert_eq!(a, build_task1_splits(&sim, &split, &counts, 9).unwrap());

        // Case streams are keyed by (stream, disease, index); partitions use
        // disjoint index ranges of the same stream.
        let p = counts.select_partition().unwrap();
        assert!(p.test.end <= p.val.start && p.val.end <= p.train.start);
        let full = simulate_indexed(&sim, &split.l_select, |_| 0..50, seed::derive(9, &[seed::tag::SELECT])).unwrap();
        let mut rebuilt = Vec::new();
        for d in [0u32, 1, 2] {
            let own = |ds: &Dataset| ds.cases.iter().filter(|c| c.disease_id == d).cloned().collect::<Vec<_>>();
            rebuilt.extend(own(&a.test_select));
            rebuilt.extend(own(&a.val_select));
            rebuilt.extend(own(&a.train_select));
        }
        assert_eq!(rebuilt, full.cases);
    }

    #[test]
    fn site_plan_examples() {
        let select: BTreeSet<u32> = (0..160).collect();
        let pool: BTreeSet<u32> = (160..830).collect();
        let mut rng = seed::rng(2);

        let zero = build_site_plan(&select, &pool, 4, 0.0, 10, &mut rng).unwrap();
        assert!(zero.sites.iter().all(|s| s.l_rel.len() == 40));
        assert_eq!(zero.overlap_fraction, 0.0);

        let full = build_site_plan(&select, &pool, 4, 100.0, 10, &mut rng).unwrap();
        assert!(full.sites.iter().all(|s| s.l_rel.len() == 80));
        assert_eq!(full.overlap_fraction, 1.0);
        for c in &select {
            assert_eq!(full.sites.iter().filter(|s| s.l_rel.contains(c)).count(), 2);
        }

        let half = build_site_plan(&select, &pool, 4, 50.0, 10, &mut rng).unwrap();
        assert!(half.sites.iter().all(|s| s.l_rel.len() == 60));
        assert_eq!(half.overlap_fraction, 0.5);

        let single = build_site_plan(&select, &pool, 1, 50.0, 10, &mut rng).unwrap();
        assert_eq!(single.sites.len(), 1);
        assert_eq!(single.sites[0].l_rel, select);

        let extras: Vec<_> = half.sites.iter().flat_map(|s| s.l_extra_local.iter()).collect();
        let unique: BTreeSet<_> = extras.iter().collect();
        assert_eq!(extras.len(), 40);
        assert_eq!(unique.len(), 40);

        assert!(build_site_plan(&select, &(160..190).collect(), 4, 0.0, 10, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn site_plan_covers_select_and_hits_overlap(
            n in 1usize..120,
            m in 1usize..7,
            overlap in 0.0f64..=100.0,
            seed_value in any::<u64>(),
        ) {
            let select: BTreeSet<u32> = (0..n as u32).collect();
            let pool: BTreeSet<u32> = (1000..1100).collect();
            let plan = build_site_plan(&select, &pool, m, overlap, 3, &mut seed::rng(seed_value)).unwrap();
            prop_assert_eq!(plan.l_select(), select.clone());
            for s in &plan.sites {
                prop_assert!(s.l_extra_local.is_disjoint(&select));
            }
            if m > 1 {
                let target = overlap / 100.0;
                prop_assert!((plan.overlap_fraction - target).abs() <= 1.0 / n as f64 + 1e-12);
            }
            // Site sizes stay within one block of each other.
            let sizes: Vec<usize> = plan.sites.iter().map(|s| s.l_rel.len()).collect();
            let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
            prop_assert!(spread <= 2);
        }

        #[test]
        fn unknowns_unique_and_disjoint(seed_value in any::<u64>(), n_sel in 1usize..8, n_cand in 8usize..16) {
            let mut rng = seed::rng(seed_value);
            let rows = n_sel + n_cand;
            let data: Vec<f64> = (0..rows * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = Matrix::from_vec(rows, 3, data).unwrap();
            let select: BTreeSet<u32> = (0..n_sel as u32).collect();
            let cand: BTreeSet<u32> = (n_sel as u32..rows as u32).collect();
            let u = select_unknowns(&m, &select, &cand).unwrap();
            let set: BTreeSet<u32> = u.iter().copied().collect();
            prop_assert_eq!(set.len(), n_sel);
            prop_assert!(set.is_disjoint(&select));
        }
    }
}
