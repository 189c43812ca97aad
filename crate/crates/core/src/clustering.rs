//! Client-to-cluster assignment, EM re-clustering and cluster number tuning.

use std::collections::HashMap;

use ndarray::Array2;

use crate::data::GroundTruthGrouping;
use crate::error::{shape_err, FedError, Result};
use crate::nn::ParamVector;
use crate::similarity::{similarity_matrix, sq_dist, ReductionMap, SimilarityMatrix};

/// One-hot client-to-cluster assignment, stored as a cluster index per
/// client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    labels: Vec<usize>,
    k: usize,
}

impl Assignment {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(FedError::State("an assignment needs at least one cluster".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(FedError::State(format!(
                "cluster index {bad} out of range for K={k}"
            )));
        }
        Ok(Self { labels, k })
    }

    /// Every client in cluster 0.
    pub fn single(m: usize) -> Self {
        Self {
            labels: vec![0; m],
            k: 1,
        }
    }

    /// Parses an `m x K` matrix whose rows must each hold a single 1.
    pub fn from_matrix(matrix: &Array2<f64>) -> Result<Self> {
        let k = matrix.ncols();
        let mut labels = Vec::with_capacity(matrix.nrows());
        for (i, row) in matrix.rows().into_iter().enumerate() {
            let ones: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1.0)
                .map(|(c, _)| c)
                .collect();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones.len() != 1 || zeros != k - 1 {
                return Err(FedError::State(format!("row {i} is not one-hot")));
            }
            labels.push(ones[0]);
        }
        Self::new(labels, k)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn client_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn cluster_of(&self, client: usize) -> usize {
        self.labels[client]
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.labels.len(), self.k));
        for (i, &l) in self.labels.iter().enumerate() {
            out[[i, l]] = 1.0;
        }
        out
    }

    pub fn member_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Cluster centers and their member counts. A zero count marks an empty
/// cluster that kept its previous center.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSet {
    pub centers: Vec<ParamVector>,
    pub member_counts: Vec<usize>,
}

impl ClusterSet {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty_cluster(&self, k: usize) -> bool {
        self.member_counts[k] == 0
    }

    pub fn empty_clusters(&self) -> Vec<usize> {
        (0..self.k()).filter(|&k| self.is_empty_cluster(k)).collect()
    }
}

/// Row-wise argmax; ties go to the lowest cluster index.
pub fn assign_by_similarity(sim: &SimilarityMatrix) -> Result<Assignment> {
    let k = sim.values.ncols();
    let labels = sim
        .values
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Assignment::new(labels, k)
}

/// Assigns each client to the center with the highest low-rank cosine.
pub fn e_step(clients: &[ParamVector], clusters: &ClusterSet, map: &ReductionMap) -> Result<Assignment> {
    if clusters.k() == 0 {
        return Err(FedError::State("E-step with an empty cluster set".into()));
    }
    let sim = similarity_matrix(clients, &clusters.centers, map, map.created_round)?;
    assign_by_similarity(&sim)
}

fn mean_of(clients: &[ParamVector], members: &[usize]) -> Vec<f64> {
    let dim = clients[members[0]].len();
    let mut acc = vec![0.0; dim];
    for &i in members {
        acc.iter_mut()
            .zip(clients[i].as_slice())
            .for_each(|(a, b)| *a += b);
    }
    let n = members.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Recomputes each center as the unweighted mean of its members; empty
/// clusters keep their previous center.
pub fn m_step(clients: &[ParamVector], assignment: &Assignment, previous: &ClusterSet) -> Result<ClusterSet> {
    if assignment.client_count() != clients.len() {
        return shape_err(format!(
            "assignment covers {} clients, {} models given",
            assignment.client_count(),
            clients.len()
        ));
    }
    if assignment.k() != previous.k() {
        return shape_err(format!(
            "assignment has K={} but {} previous centers",
            assignment.k(),
            previous.k()
        ));
    }
    let mut centers = Vec::with_capacity(assignment.k());
    let mut counts = Vec::with_capacity(assignment.k());
    for k in 0..assignment.k() {
        let members = assignment.members(k);
        if members.is_empty() {
            log::debug!("cluster {k} is empty, keeping its center");
            centers.push(previous.centers[k].clone());
        } else {
            let split = clients[members[0]].split_index();
            centers.push(ParamVector::new(mean_of(clients, &members), split)?);
        }
        counts.push(members.len());
    }
    Ok(ClusterSet {
        centers,
        member_counts: counts,
    })
}

/// Granularity of one cluster.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterGranularity {
    pub member_count: usize,
    /// Mean squared distance of members to their center (0 when empty).
    pub dist_intra: f64,
    /// `None` when K = 1.
    pub dist_inter: Option<f64>,
    /// `dist_intra / dist_inter`; 0 when `dist_inter` is 0.
    pub g_c: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GranularityReport {
    pub clusters: Vec<ClusterGranularity>,
}

impl GranularityReport {
    /// Ratios that are defined.
    pub fn ratios(&self) -> Vec<f64> {
        self.clusters.iter().filter_map(|c| c.g_c).collect()
    }
}

pub fn granularity(
    clients: &[ParamVector],
    assignment: &Assignment,
    clusters: &ClusterSet,
) -> Result<GranularityReport> {
    if assignment.k() != clusters.k() || assignment.client_count() != clients.len() {
        return shape_err("assignment, clients and clusters disagree in size");
    }
    let k_total = clusters.k();
    let mut out = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let members = assignment.members(k);
        let center = clusters.centers[k].as_slice();
        let dist_intra = if members.is_empty() {
            0.0
        } else {
            members
                .iter()
                .map(|&i| sq_dist(clients[i].as_slice(), center))
                .sum::<f64>()
                / members.len() as f64
        };
        let dist_inter = (k_total > 1).then(|| {
            // the j = k term is zero
            clusters
                .centers
                .iter()
                .map(|c| sq_dist(center, c.as_slice()))
                .sum::<f64>()
                / (k_total - 1) as f64
        });
        let g_c = dist_inter.map(|inter| if inter > 0.0 { dist_intra / inter } else { 0.0 });
        out.push(ClusterGranularity {
            member_count: members.len(),
            dist_intra,
            dist_inter,
            g_c,
        });
    }
    Ok(GranularityReport { clusters: out })
}

/// Result of one cluster-number-tuning pass.
#[derive(Clone, Debug)]
pub struct CntOutcome {
    pub clusters: ClusterSet,
    pub assignment: Assignment,
    /// `(merged cluster, absorbing cluster)` in pre-call indices.
    pub merges: Vec<(usize, usize)>,
    /// Pre-call indices of the clusters that were split.
    pub splits: Vec<usize>,
    /// Granularity of the input state.
    pub report: GranularityReport,
}

impl CntOutcome {
    pub fn k(&self) -> usize {
        self.clusters.k()
    }

    pub fn changed(&self) -> bool {
        !self.merges.is_empty() || !self.splits.is_empty()
    }
}

/// Splits `members` around their two farthest-apart models, followed by
/// one E/M iteration restricted to those members.
fn split_members(
    clients: &[ParamVector],
    members: &[usize],
    map: &ReductionMap,
) -> Result<Option<(Vec<usize>, Vec<usize>)>> {
    let mut best = (0, 1, f64::NEG_INFINITY);
    for (x, &i) in members.iter().enumerate() {
        for &j in &members[x + 1..] {
            let d = sq_dist(clients[i].as_slice(), clients[j].as_slice());
            if d > best.2 {
                best = (i, j, d);
            }
        }
    }
    let seeds = ClusterSet {
        centers: vec![clients[best.0].clone(), clients[best.1].clone()],
        member_counts: vec![1, 1],
    };
    let local: Vec<ParamVector> = members.iter().map(|&i| clients[i].clone()).collect();
    let local_assignment = e_step(&local, &seeds, map)?;
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (pos, &i) in members.iter().enumerate() {
        if local_assignment.cluster_of(pos) == 0 {
            first.push(i);
        } else {
            second.push(i);
        }
    }
    if first.is_empty() || second.is_empty() {
        return Ok(None);
    }
    Ok(Some((first, second)))
}

/// Cluster number tuning.
///
/// Granularity is evaluated on the input state. Clusters with `g_c < a`
/// merge into their nearest surviving cluster (in ascending `g_c` order),
/// then clusters with `g_c > b` that took no part in a merge are split.
/// When `K = 1` the ratio is undefined and the cluster is split whenever it
/// has two members. Any change is followed by one global E-step and M-step.
/// If nothing qualifies the input is returned unchanged.
pub fn cnt(
    clients: &[ParamVector],
    assignment: &Assignment,
    clusters: &ClusterSet,
    map: &ReductionMap,
    lower: f64,
    upper: f64,
) -> Result<CntOutcome> {
    if !(lower > 0.0 && lower < upper) {
        return Err(FedError::Config(format!(
            "CNT thresholds must satisfy 0 < a < b, got a={lower}, b={upper}"
        )));
    }
    let report = granularity(clients, assignment, clusters)?;
    let k_total = clusters.k();
    let m = clients.len();
    let mut alive = vec![true; k_total];
    let mut touched = vec![false; k_total];
    let mut labels = assignment.labels().to_vec();
    let mut merges = Vec::new();

    let mut merge_candidates: Vec<usize> = (0..k_total)
        .filter(|&k| report.clusters[k].g_c.is_some_and(|g| g < lower))
        .collect();
    merge_candidates.sort_by(|&x, &y| {
        let gx = report.clusters[x].g_c.unwrap();
        let gy = report.clusters[y].g_c.unwrap();
        gx.total_cmp(&gy).then(x.cmp(&y))
    });
    for k in merge_candidates {
        if touched[k] || alive.iter().filter(|&&a| a).count() <= 1 {
            continue;
        }
        let target = (0..k_total)
            .filter(|&j| j != k && alive[j])
            .map(|j| {
                (
                    j,
                    sq_dist(clusters.centers[k].as_slice(), clusters.centers[j].as_slice()),
                )
            })
            .fold(None, |best: Option<(usize, f64)>, (j, d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((j, d)),
            });
        let Some((target, _)) = target else { continue };
        alive[k] = false;
        touched[k] = true;
        touched[target] = true;
        for l in labels.iter_mut().filter(|l| **l == k) {
            *l = target;
        }
        merges.push((k, target));
    }

    let mut splits = Vec::new();
    let mut new_groups: Vec<Vec<usize>> = Vec::new();
    for k in 0..k_total {
        let wants_split = match report.clusters[k].g_c {
            Some(g) => g > upper,
            None => true,
        };
        let live = alive.iter().filter(|&&a| a).count() + new_groups.len();
        if !wants_split || touched[k] || !alive[k] || live >= m {
            continue;
        }
        let members = assignment.members(k);
        if members.len() < 2 {
            continue;
        }
        match split_members(clients, &members, map)? {
            Some((_, second)) => {
                splits.push(k);
                new_groups.push(second);
            }
            None => log::debug!("split of cluster {k} left one side empty, skipped"),
        }
    }

    if merges.is_empty() && splits.is_empty() {
        return Ok(CntOutcome {
            clusters: clusters.clone(),
            assignment: assignment.clone(),
            merges,
            splits,
            report,
        });
    }

    // compact surviving clusters, then append the split-off halves
    let mut remap = vec![usize::MAX; k_total];
    let mut prev_centers = Vec::new();
    for k in 0..k_total {
        if alive[k] {
            remap[k] = prev_centers.len();
            prev_centers.push(clusters.centers[k].clone());
        }
    }
    for l in labels.iter_mut() {
        *l = remap[*l];
    }
    for group in &new_groups {
        let id = prev_centers.len();
        prev_centers.push(clients[group[0]].clone());
        for &i in group {
            labels[i] = id;
        }
    }
    let k_new = prev_centers.len();
    let intermediate = Assignment::new(labels, k_new)?;
    let previous = ClusterSet {
        member_counts: vec![0; k_new],
        centers: prev_centers,
    };
    let regrouped = m_step(clients, &intermediate, &previous)?;
    let final_assignment = e_step(clients, &regrouped, map)?;
    let final_clusters = m_step(clients, &final_assignment, &regrouped)?;
    Ok(CntOutcome {
        clusters: final_clusters,
        assignment: final_assignment,
        merges,
        splits,
        report,
    })
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between the learned assignment and the truth.
pub fn adjusted_rand_index(predicted: &Assignment, truth: &GroundTruthGrouping) -> Result<f64> {
    ari_from_labels(predicted.labels(), &truth.group_of_client)
}

pub fn ari_from_labels(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return shape_err(format!(
            "partitions cover {} and {} clients",
            predicted.len(),
            truth.len()
        ));
    }
    let n = predicted.len();
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        *table.entry((p, t)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    let expected = if total > 0.0 {
        sum_rows * sum_cols / total
    } else {
        0.0
    };
    let max = 0.5 * (sum_rows + sum_cols);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
