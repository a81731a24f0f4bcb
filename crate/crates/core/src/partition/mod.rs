//! Two-stage clean/noisy partitioning of the training set from Stage-1 loss
//! trajectories.
//!
//! Stage one clusters the trajectories of each (domain, observed label) group
//! with the first level of first-neighbor clustering. Stage two averages each
//! cluster and splits the cluster scores with a two-component Gaussian
//! mixture; every sample inherits its cluster's side, and the component with
//! the lower mean is the clean one.

pub mod finch;
pub mod gmm;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::evidential::TrajectoryStore;
use crate::par::{self, Exec};
use crate::synth::Sample;

pub use finch::{first_neighbors, first_partition};
pub use gmm::{EmConfig, Gmm};

#[derive(Debug, Clone, PartialEq)]
pub struct FinchPartition {
    pub id: usize,
    pub domain: usize,
    pub label: usize,
    /// Sample ids, ascending.
    pub members: Vec<usize>,
    pub mean_trajectory: Vec<f64>,
}

impl FinchPartition {
    /// Scalar score: mean over epochs of the member-averaged trajectory.
    pub fn score(&self) -> f64 {
        mean(&self.mean_trajectory)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn average_trajectory(store: &TrajectoryStore, ids: &[usize]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; store.epochs()];
    for &id in ids {
        for (a, l) in acc.iter_mut().zip(store.trajectory(id)?) {
            *a += l;
        }
    }
    acc.iter_mut().for_each(|a| *a /= ids.len().max(1) as f64);
    Ok(acc)
}

/// Runs first-neighbor clustering independently on the trajectories of every
/// (domain, observed label) group. Partitions come back ordered by group and
/// then by smallest member, with ids numbered in that order.
pub fn group_and_cluster(
    store: &TrajectoryStore,
    samples: &[Sample],
    exec: Exec,
) -> Result<Vec<FinchPartition>> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for s in samples {
        store.trajectory(s.id)?;
        groups
            .entry((s.domain, s.observed_label))
            .or_default()
            .push(s.id);
    }
    let keyed: Vec<((usize, usize), Vec<usize>)> = groups
        .into_iter()
        .map(|(k, mut ids)| {
            ids.sort_unstable();
            (k, ids)
        })
        .collect();
    let clustered: Vec<Result<Vec<FinchPartition>>> =
        par::map(exec, &keyed, |((domain, label), ids)| {
            let points: Vec<&[f64]> = ids
                .iter()
                .map(|&id| store.trajectory(id))
                .collect::<Result<_>>()?;
            first_partition(&points)
                .into_iter()
                .map(|idx| {
                    let members: Vec<usize> = idx.iter().map(|&i| ids[i]).collect();
                    Ok(FinchPartition {
                        id: 0,
                        domain: *domain,
                        label: *label,
                        mean_trajectory: average_trajectory(store, &members)?,
                        members,
                    })
                })
                .collect()
        });
    let mut out = Vec::new();
    for group in clustered {
        out.extend(group?);
    }
    for (i, p) in out.iter_mut().enumerate() {
        p.id = i;
    }
    Ok(out)
}

/// One scalar score per partition.
pub fn partition_means(parts: &[FinchPartition]) -> Vec<f64> {
    parts.iter().map(FinchPartition::score).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GmmInput {
    /// Scalar partition score.
    #[default]
    Scalar,
    /// Full averaged trajectory with diagonal covariance.
    Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GmmScope {
    #[default]
    Global,
    PerDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub gmm_input: GmmInput,
    pub scope: GmmScope,
    pub em: EmConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleAssignment {
    pub sample_id: usize,
    pub partition_id: usize,
    pub partition_score: f64,
    pub noisy: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSide {
    pub partition_id: usize,
    pub score: f64,
    /// Posterior of the high-loss component.
    pub noisy_responsibility: f64,
    pub noisy: bool,
}

/// Clean/noisy assignment of every source sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CleanNoisyPartition {
    /// Sorted by sample id.
    pub entries: Vec<SampleAssignment>,
    pub sides: Vec<PartitionSide>,
    pub degenerate: bool,
}

impl CleanNoisyPartition {
    pub fn from_entries(mut entries: Vec<SampleAssignment>) -> Self {
        entries.sort_by_key(|e| e.sample_id);
        Self {
            entries,
            sides: Vec::new(),
            degenerate: false,
        }
    }

    pub fn clean_ids(&self) -> BTreeSet<usize> {
        self.entries
            .iter()
            .filter(|e| !e.noisy)
            .map(|e| e.sample_id)
            .collect()
    }

    pub fn noisy_ids(&self) -> BTreeSet<usize> {
        self.entries
            .iter()
            .filter(|e| e.noisy)
            .map(|e| e.sample_id)
            .collect()
    }

    pub fn is_noisy(&self, id: usize) -> Option<bool> {
        self.entries
            .binary_search_by_key(&id, |e| e.sample_id)
            .ok()
            .map(|i| self.entries[i].noisy)
    }
}

fn split_group(parts: &[&FinchPartition], cfg: &PartitionConfig) -> (Vec<PartitionSide>, bool) {
    let scores: Vec<f64> = parts.iter().map(|p| p.score()).collect();
    let distinct = scores.iter().any(|&s| s != scores[0]);
    if !distinct {
        log::warn!(
            "all {} partition scores are identical; assigning every sample to the clean set",
            scores.len()
        );
        let sides = parts
            .iter()
            .map(|p| PartitionSide {
                partition_id: p.id,
                score: p.score(),
                noisy_responsibility: 0.0,
                noisy: false,
            })
            .collect();
        return (sides, true);
    }
    let points: Vec<Vec<f64>> = match cfg.gmm_input {
        GmmInput::Scalar => scores.iter().map(|&s| vec![s]).collect(),
        GmmInput::Trajectory => parts.iter().map(|p| p.mean_trajectory.clone()).collect(),
    };
    let gmm = Gmm::fit(&points, &cfg.em);
    let low = gmm.low_component();
    let sides = parts
        .iter()
        .zip(&points)
        .map(|(p, x)| {
            let r = gmm.responsibilities(x);
            PartitionSide {
                partition_id: p.id,
                score: p.score(),
                noisy_responsibility: r[1 - low],
                noisy: gmm.assign(x) != low,
            }
        })
        .collect();
    (sides, false)
}

/// Splits partitions into clean and noisy; members inherit their partition's
/// side.
pub fn gmm_split(parts: &[FinchPartition], cfg: &PartitionConfig) -> Result<CleanNoisyPartition> {
    ensure!(!parts.is_empty(), Config, "no partitions to split");
    let groups: Vec<Vec<&FinchPartition>> = match cfg.scope {
        GmmScope::Global => vec![parts.iter().collect()],
        GmmScope::PerDomain => {
            let mut by: BTreeMap<usize, Vec<&FinchPartition>> = BTreeMap::new();
            for p in parts {
                by.entry(p.domain).or_default().push(p);
            }
            by.into_values().collect()
        }
    };
    let mut sides = Vec::new();
    let mut degenerate = false;
    for g in &groups {
        let (s, d) = split_group(g, cfg);
        sides.extend(s);
        degenerate |= d;
    }
    sides.sort_by_key(|s| s.partition_id);
    let by_id: BTreeMap<usize, &PartitionSide> =
        sides.iter().map(|s| (s.partition_id, s)).collect();
    let mut entries = Vec::new();
    for p in parts {
        let side = by_id[&p.id];
        entries.extend(p.members.iter().map(|&sample_id| SampleAssignment {
            sample_id,
            partition_id: p.id,
            partition_score: side.score,
            noisy: side.noisy,
        }));
    }
    let mut out = CleanNoisyPartition::from_entries(entries);
    for w in out.entries.windows(2) {
        if w[0].sample_id == w[1].sample_id {
            return Err(Error::Integrity(format!(
                "sample {} appears in more than one partition",
                w[0].sample_id
            )));
        }
    }
    out.sides = sides;
    out.degenerate = degenerate;
    Ok(out)
}

/// Full two-stage partitioning.
pub fn uts_elc(
    store: &TrajectoryStore,
    samples: &[Sample],
    cfg: &PartitionConfig,
    exec: Exec,
) -> Result<(Vec<FinchPartition>, CleanNoisyPartition)> {
    let parts = group_and_cluster(store, samples, exec)?;
    let split = gmm_split(&parts, cfg)?;
    Ok((parts, split))
}

/// Fraction of `samples` whose clean/noisy assignment matches the hidden
/// clean flag. Samples absent from the partition count as misassigned.
pub fn evaluate_partition(partition: &CleanNoisyPartition, samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|s| partition.is_noisy(s.id) == Some(!s.is_clean()))
        .count();
    hits as f64 / samples.len() as f64
}

fn singleton_partition(ids: &[usize], scores: &[f64], noisy: &[bool]) -> CleanNoisyPartition {
    CleanNoisyPartition::from_entries(
        ids.iter()
            .enumerate()
            .map(|(i, &sample_id)| SampleAssignment {
                sample_id,
                partition_id: i,
                partition_score: scores[i],
                noisy: noisy[i],
            })
            .collect(),
    )
}

/// Baseline: a single Gaussian mixture over per-sample mean losses.
pub fn plain_gmm_partition(
    store: &TrajectoryStore,
    samples: &[Sample],
    em: &EmConfig,
) -> Result<CleanNoisyPartition> {
    ensure!(!samples.is_empty(), Config, "no samples to split");
    let ids: Vec<usize> = samples.iter().map(|s| s.id).collect();
    let scores: Vec<f64> = ids
        .iter()
        .map(|&id| store.trajectory(id).map(mean))
        .collect::<Result<_>>()?;
    let gmm = Gmm::fit_scalar(&scores, em);
    let low = gmm.low_component();
    let noisy: Vec<bool> = scores.iter().map(|&s| gmm.assign(&[s]) != low).collect();
    Ok(singleton_partition(&ids, &scores, &noisy))
}

/// Baseline: first-neighbor clustering on all trajectories, repeated on
/// cluster means until two clusters remain (closest-pair merges finish the
/// job when a level would overshoot). The lower-loss cluster is clean.
pub fn plain_finch_partition(
    store: &TrajectoryStore,
    samples: &[Sample],
) -> Result<CleanNoisyPartition> {
    ensure!(!samples.is_empty(), Config, "no samples to split");
    let ids: Vec<usize> = samples.iter().map(|s| s.id).collect();
    let traj: Vec<&[f64]> = ids
        .iter()
        .map(|&id| store.trajectory(id))
        .collect::<Result<_>>()?;
    let centroid = |members: &[usize]| -> Vec<f64> {
        let mut c = vec![0.0; store.epochs()];
        for &m in members {
            for (a, v) in c.iter_mut().zip(traj[m]) {
                *a += v;
            }
        }
        c.iter_mut().for_each(|a| *a /= members.len() as f64);
        c
    };
    let mut clusters: Vec<Vec<usize>> = first_partition(&traj);
    while clusters.len() > 2 {
        let means: Vec<Vec<f64>> = clusters.iter().map(|c| centroid(c)).collect();
        let next = first_partition(&means);
        if next.len() >= 2 {
            clusters = next
                .iter()
                .map(|g| {
                    g.iter()
                        .flat_map(|&k| clusters[k].iter().copied())
                        .collect()
                })
                .collect();
            continue;
        }
        while clusters.len() > 2 {
            let means: Vec<Vec<f64>> = clusters.iter().map(|c| centroid(c)).collect();
            let mut best = (0, 1, f64::INFINITY);
            for a in 0..means.len() {
                for b in a + 1..means.len() {
                    let d: f64 = means[a]
                        .iter()
                        .zip(&means[b])
                        .map(|(x, y)| (x - y).powi(2))
                        .sum();
                    if d < best.2 {
                        best = (a, b, d);
                    }
                }
            }
            let absorbed = clusters.remove(best.1);
            clusters[best.0].extend(absorbed);
        }
    }
    let scores: Vec<f64> = clusters.iter().map(|c| mean(&centroid(c))).collect();
    let noisy_cluster = if clusters.len() == 2 && scores[1] > scores[0] {
        Some(1)
    } else if clusters.len() == 2 {
        Some(0)
    } else {
        None
    };
    let mut entries = Vec::with_capacity(ids.len());
    for (k, c) in clusters.iter().enumerate() {
        for &m in c {
            entries.push(SampleAssignment {
                sample_id: ids[m],
                partition_id: k,
                partition_score: scores[k],
                noisy: Some(k) == noisy_cluster,
            });
        }
    }
    Ok(CleanNoisyPartition::from_entries(entries))
}
