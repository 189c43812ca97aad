//! Datasets, non-IID client partitioning and synthetic clustered tasks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use ndarray::{Array2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, FedError, Result};
use crate::nn::Batch;
use crate::rng::seeded;

/// Labelled examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return shape_err("dataset has no examples");
        }
        if features.nrows() != labels.len() {
            return shape_err(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_count) {
            return shape_err(format!("label {y} out of range for {class_count} classes"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(FedError::Parse("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Indices of every example, grouped by class.
    pub fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.class_count];
        for (i, &y) in self.labels.iter().enumerate() {
            pools[y].push(i);
        }
        pools
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut hist = vec![0; self.class_count];
        for &i in indices {
            hist[self.labels[i]] += 1;
        }
        hist
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            self.features.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Parses the plain-text format: a `d=<int>,C=<int>,N=<int>` header,
    /// then `N` rows of `d` comma-separated features followed by the label.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| FedError::Parse("empty dataset file".into()))??;
        let mut d = None;
        let mut c = None;
        let mut n = None;
        for field in header.trim().split(',') {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| FedError::Parse(format!("bad header field `{field}`")))?;
            let value: usize = value
                .trim()
                .parse()
                .map_err(|_| FedError::Parse(format!("bad header value `{field}`")))?;
            match key.trim() {
                "d" => d = Some(value),
                "C" => c = Some(value),
                "N" => n = Some(value),
                other => return Err(FedError::Parse(format!("unknown header key `{other}`"))),
            }
        }
        let (d, c, n) = match (d, c, n) {
            (Some(d), Some(c), Some(n)) => (d, c, n),
            _ => return Err(FedError::Parse("header must define d, C and N".into())),
        };
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(FedError::Parse(format!(
                    "row {} has {} fields, expected {}",
                    row + 1,
                    fields.len(),
                    d + 1
                )));
            }
            for f in &fields[..d] {
                features.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| FedError::Parse(format!("row {}: bad feature `{f}`", row + 1)))?,
                );
            }
            labels.push(
                fields[d]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| FedError::Parse(format!("row {}: bad label `{}`", row + 1, fields[d])))?,
            );
        }
        if labels.len() != n {
            return Err(FedError::Parse(format!(
                "header announces {n} rows, found {}",
                labels.len()
            )));
        }
        let features =
            Array2::from_shape_vec((n, d), features).map_err(|e| FedError::Parse(e.to_string()))?;
        Dataset::new(features, labels, c)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "d={},C={},N={}",
            self.input_dim(),
            self.class_count,
            self.len()
        )?;
        for (row, y) in self.features.rows().into_iter().zip(&self.labels) {
            let mut line = String::new();
            for v in row {
                write!(line, "{v},").unwrap();
            }
            writeln!(out, "{line}{y}")?;
        }
        Ok(())
    }
}

/// One client's share of a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientPartition {
    pub client_id: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Class counts over the training indices.
    pub label_histogram: Vec<usize>,
}

impl ClientPartition {
    pub fn total_size(&self) -> usize {
        self.train_indices.len() + self.test_indices.len()
    }

    /// Training label distribution as proportions.
    pub fn label_distribution(&self) -> Vec<f64> {
        let total: usize = self.label_histogram.iter().sum();
        self.label_histogram
            .iter()
            .map(|&h| if total == 0 { 0.0 } else { h as f64 / total as f64 })
            .collect()
    }
}

/// Latent client groups of a synthetic task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthGrouping {
    pub group_of_client: Vec<usize>,
    pub group_count: usize,
}

/// Per-client sample budget and holdout share.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Allocation {
    pub min_size: usize,
    pub max_size: usize,
    pub test_fraction: f64,
}

impl Default for Allocation {
    fn default() -> Self {
        Self {
            min_size: 50,
            max_size: 350,
            test_fraction: 0.2,
        }
    }
}

impl Allocation {
    pub fn validate(&self) -> Result<()> {
        if self.min_size < 2 || self.min_size > self.max_size {
            return Err(FedError::Config(format!(
                "client size range [{}, {}] is infeasible (need 2 <= min <= max)",
                self.min_size, self.max_size
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(FedError::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }

    fn draw_size<R: Rng>(&self, rng: &mut R) -> usize {
        rng.random_range(self.min_size..=self.max_size)
    }
}

/// Draws from Dirichlet(alpha * 1) working in log space, so tiny
/// concentrations do not underflow to an all-zero vector.
pub fn sample_dirichlet<R: Rng>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let log_gammas: Vec<f64> = if alpha >= 1.0 {
        let gamma = Gamma::new(alpha, 1.0).expect("alpha is positive");
        (0..k).map(|_| gamma.sample(rng).ln()).collect()
    } else {
        // Gamma(a) = Gamma(a + 1) * U^(1/a)
        let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha is positive");
        (0..k)
            .map(|_| {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                gamma.sample(rng).ln() + u.ln() / alpha
            })
            .collect()
    };
    let max = log_gammas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = log_gammas.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Class pools consumed without replacement; once a pool runs dry the
/// class is sampled with replacement from all of its examples.
struct PoolSampler {
    pools: Vec<Vec<usize>>,
    full: Vec<Vec<usize>>,
}

impl PoolSampler {
    fn new<R: Rng>(dataset: &Dataset, rng: &mut R) -> Self {
        let full = dataset.class_pools();
        let mut pools = full.clone();
        for p in &mut pools {
            p.shuffle(rng);
        }
        Self { pools, full }
    }

    fn present(&self) -> Vec<bool> {
        self.full.iter().map(|p| !p.is_empty()).collect()
    }

    fn take<R: Rng>(&mut self, class: usize, rng: &mut R) -> usize {
        match self.pools[class].pop() {
            Some(i) => i,
            None => self.full[class][rng.random_range(0..self.full[class].len())],
        }
    }
}

/// Splits a client's (possibly repeated) indices into train and test so
/// that repeated indices stay on one side.
fn split_holdout<R: Rng>(
    client_id: usize,
    indices: &[usize],
    test_fraction: f64,
    dataset: &Dataset,
    rng: &mut R,
) -> ClientPartition {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in indices {
        *counts.entry(i).or_insert(0) += 1;
    }
    let mut distinct: Vec<(usize, usize)> = counts.into_iter().collect();
    distinct.shuffle(rng);
    let target = ((indices.len() as f64 * test_fraction).round() as usize).max(1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (pos, (idx, mult)) in distinct.iter().enumerate() {
        // the last distinct index always trains
        let to_test = test.len() < target && pos + 1 < distinct.len();
        let side = if to_test { &mut test } else { &mut train };
        side.extend(std::iter::repeat_n(*idx, *mult));
    }
    train.sort_unstable();
    test.sort_unstable();
    let label_histogram = dataset.class_histogram(&train);
    ClientPartition {
        client_id,
        train_indices: train,
        test_indices: test,
        label_histogram,
    }
}

/// Holds out a random share of a client's own dataset.
pub fn holdout_partition(
    dataset: &Dataset,
    client_id: usize,
    test_fraction: f64,
    seed: u64,
) -> ClientPartition {
    let mut rng = seeded(seed);
    let all: Vec<usize> = (0..dataset.len()).collect();
    split_holdout(client_id, &all, test_fraction, dataset, &mut rng)
}

fn check_partition_args(dataset: &Dataset, m: usize, alloc: &Allocation) -> Result<()> {
    if m == 0 {
        return Err(FedError::Config("client count must be at least 1".into()));
    }
    alloc.validate()?;
    if dataset.is_empty() {
        return Err(FedError::Config("cannot partition an empty dataset".into()));
    }
    Ok(())
}

/// Label-skewed split: every client draws its class mix from
/// Dirichlet(alpha) and its size uniformly from the allocation range.
pub fn dirichlet_partition(
    dataset: &Dataset,
    m: usize,
    alpha: f64,
    alloc: &Allocation,
    seed: u64,
) -> Result<Vec<ClientPartition>> {
    check_partition_args(dataset, m, alloc)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FedError::Config(format!(
            "Dirichlet concentration must be positive, got {alpha}"
        )));
    }
    let mut rng = seeded(seed);
    let mut sampler = PoolSampler::new(dataset, &mut rng);
    let present = sampler.present();
    let c = dataset.class_count;
    let mut out = Vec::with_capacity(m);
    for client in 0..m {
        let size = alloc.draw_size(&mut rng);
        let mut props = sample_dirichlet(alpha, c, &mut rng);
        for (p, &ok) in props.iter_mut().zip(&present) {
            if !ok {
                *p = 0.0;
            }
        }
        if props.iter().sum::<f64>() <= 0.0 {
            // all mass fell on absent classes
            props = present.iter().map(|&ok| if ok { 1.0 } else { 0.0 }).collect();
        }
        let chooser = WeightedIndex::new(&props).expect("non-negative weights with positive sum");
        let indices: Vec<usize> = (0..size)
            .map(|_| {
                let class = chooser.sample(&mut rng);
                sampler.take(class, &mut rng)
            })
            .collect();
        out.push(split_holdout(
            client,
            &indices,
            alloc.test_fraction,
            dataset,
            &mut rng,
        ));
    }
    Ok(out)
}

/// Pathological split: each client only sees `labels_per_client` classes.
/// The first clients jointly cover every class when `m * n >= C`.
pub fn pathological_partition(
    dataset: &Dataset,
    m: usize,
    labels_per_client: usize,
    alloc: &Allocation,
    seed: u64,
) -> Result<Vec<ClientPartition>> {
    check_partition_args(dataset, m, alloc)?;
    let c = dataset.class_count;
    if labels_per_client == 0 || labels_per_client > c {
        return Err(FedError::Config(format!(
            "labels per client must lie in [1, {c}], got {labels_per_client}"
        )));
    }
    let mut rng = seeded(seed);
    let mut sampler = PoolSampler::new(dataset, &mut rng);
    let present = sampler.present();
    let mut perm: Vec<usize> = (0..c).collect();
    perm.shuffle(&mut rng);
    let covering = c.div_ceil(labels_per_client);
    let mut out = Vec::with_capacity(m);
    for client in 0..m {
        let classes: Vec<usize> = if client < covering {
            (0..labels_per_client)
                .map(|j| perm[(client * labels_per_client + j) % c])
                .collect()
        } else {
            rand::seq::index::sample(&mut rng, c, labels_per_client).into_vec()
        };
        let usable: Vec<usize> = classes.into_iter().filter(|&k| present[k]).collect();
        if usable.is_empty() {
            return Err(FedError::InsufficientData(format!(
                "client {client} drew only classes absent from the dataset"
            )));
        }
        let size = alloc.draw_size(&mut rng);
        let indices: Vec<usize> = (0..size)
            .map(|_| {
                let class = usable[rng.random_range(0..usable.len())];
                sampler.take(class, &mut rng)
            })
            .collect();
        out.push(split_holdout(
            client,
            &indices,
            alloc.test_fraction,
            dataset,
            &mut rng,
        ));
    }
    Ok(out)
}

/// Orthonormal basis from Gram-Schmidt on a Gaussian matrix.
fn random_orthonormal<R: Rng>(d: usize, rng: &mut R) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((d, d));
    let mut row = 0;
    while row < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for prev in 0..row {
            let dot: f64 = v.iter().zip(q.row(prev)).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q.row(prev)).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        q.row_mut(row)
            .iter_mut()
            .zip(&v)
            .for_each(|(dst, a)| *dst = a / norm);
        row += 1;
    }
    q
}

/// Linear softmax teacher: `y = perm(argmax(W R x + noise))`.
#[derive(Clone, Debug)]
pub struct Teacher {
    /// Effective weight matrix `W R`, `C x d`.
    pub weights: Array2<f64>,
    /// Output label for each teacher argmax.
    pub label_map: Vec<usize>,
    pub noise: f64,
}

impl Teacher {
    pub fn label<R: Rng>(&self, x: &[f64], rng: &mut R) -> usize {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (c, w) in self.weights.rows().into_iter().enumerate() {
            let eps: f64 = rng.sample(StandardNormal);
            let v = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.noise * eps;
            if v > best_val {
                best_val = v;
                best = c;
            }
        }
        self.label_map[best]
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        let d = self.weights.ncols();
        let c = self.weights.nrows();
        let mut features = Array2::<f64>::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for mut row in features.rows_mut() {
            row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            labels.push(self.label(row.as_slice().unwrap(), rng));
        }
        Dataset::new(features, labels, c)
    }
}

/// Parameters of a synthetic task with latent client groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub groups: usize,
    pub clients_per_group: usize,
    pub input_dim: usize,
    pub class_count: usize,
    /// Scales both the input rotation and the label shift between groups.
    pub task_shift: f64,
    /// Standard deviation of the logit noise.
    pub noise: f64,
    #[serde(default)]
    pub allocation: Allocation,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.clients_per_group == 0 || self.input_dim == 0 {
            return Err(FedError::Config(
                "groups, clients_per_group and input_dim must be positive".into(),
            ));
        }
        if self.class_count < 2 {
            return Err(FedError::Config("class_count must be at least 2".into()));
        }
        if !(self.task_shift >= 0.0 && self.noise >= 0.0) {
            return Err(FedError::Config(
                "task_shift and noise must be non-negative".into(),
            ));
        }
        self.allocation.validate()
    }

    pub fn client_count(&self) -> usize {
        self.groups * self.clients_per_group
    }

    /// Group `g` rotates input-space coordinate pairs by
    /// `task_shift * 2 pi g / G` and shifts labels cyclically by
    /// `round(task_shift * g * C / G)`, so with `task_shift = 1` the groups
    /// are spread evenly around both cycles.
    pub fn teachers(&self) -> Vec<Teacher> {
        let mut rng = seeded(self.seed ^ 0x7EAC_4E55);
        let (d, c) = (self.input_dim, self.class_count);
        let base = Array2::from_shape_fn((c, d), |_| rng.sample::<f64, _>(StandardNormal));
        let basis = random_orthonormal(d, &mut rng);
        (0..self.groups)
            .map(|g| {
                let frac = self.task_shift * g as f64 / self.groups as f64;
                let angle = frac * std::f64::consts::TAU;
                let (s, co) = angle.sin_cos();
                // B(theta) in the random basis: R = Q^T B Q
                let mut block = Array2::<f64>::eye(d);
                for p in 0..d / 2 {
                    let (i, j) = (2 * p, 2 * p + 1);
                    block[[i, i]] = co;
                    block[[i, j]] = -s;
                    block[[j, i]] = s;
                    block[[j, j]] = co;
                }
                let rotation = basis.t().dot(&block).dot(&basis);
                let shift = (frac * c as f64).round() as usize % c;
                Teacher {
                    weights: base.dot(&rotation),
                    label_map: (0..c).map(|k| (k + shift) % c).collect(),
                    noise: self.noise,
                }
            })
            .collect()
    }
}

/// Per-client datasets and the grouping they were generated from.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub datasets: Vec<Dataset>,
    pub grouping: GroundTruthGrouping,
}

/// Clients `g * clients_per_group ..` belong to group `g` and sample from
/// that group's teacher.
pub fn synthetic_clustered_task(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let teachers = spec.teachers();
    let mut rng = seeded(spec.seed);
    let mut datasets = Vec::with_capacity(spec.client_count());
    let mut group_of_client = Vec::with_capacity(spec.client_count());
    for (g, teacher) in teachers.iter().enumerate() {
        for _ in 0..spec.clients_per_group {
            let n = spec.allocation.draw_size(&mut rng);
            datasets.push(teacher.sample(n, &mut rng)?);
            group_of_client.push(g);
        }
    }
    Ok(SyntheticTask {
        datasets,
        grouping: GroundTruthGrouping {
            group_of_client,
            group_count: spec.groups,
        },
    })
}

/// Single-teacher pool, the usual source for label-skew partitions.
pub fn teacher_pool(
    samples: usize,
    input_dim: usize,
    class_count: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    let spec = SyntheticTaskSpec {
        groups: 1,
        clients_per_group: 1,
        input_dim,
        class_count,
        task_shift: 0.0,
        noise,
        allocation: Allocation::default(),
        seed,
    };
    spec.validate()?;
    let teacher = spec.teachers().remove(0);
    teacher.sample(samples, &mut seeded(seed.wrapping_add(1)))
}

/// KL(p~ || q~) in nats over epsilon-smoothed, renormalized histograms.
pub fn label_kl(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64> {
    if p.len() != q.len() {
        return shape_err(format!("distributions of length {} and {}", p.len(), q.len()));
    }
    if !(epsilon > 0.0) {
        return Err(FedError::Config("smoothing epsilon must be positive".into()));
    }
    if p.iter().chain(q).any(|v| !(*v >= 0.0)) {
        return Err(FedError::Config("distributions must be non-negative".into()));
    }
    let zp: f64 = p.iter().map(|v| v + epsilon).sum();
    let zq: f64 = q.iter().map(|v| v + epsilon).sum();
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(a, b)| {
            let pa = (a + epsilon) / zp;
            let qb = (b + epsilon) / zq;
            pa * (pa / qb).ln()
        })
        .sum();
    Ok(kl.max(0.0))
}

pub const DEFAULT_KL_EPSILON: f64 = 1e-6;

/// `client_id,train_size,test_size,class_0..class_{C-1}`.
pub fn partition_report(partitions: &[ClientPartition]) -> String {
    let c = partitions.first().map_or(0, |p| p.label_histogram.len());
    let mut out = String::from("client_id,train_size,test_size");
    for k in 0..c {
        write!(out, ",class_{k}").unwrap();
    }
    out.push('\n');
    for p in partitions {
        write!(
            out,
            "{},{},{}",
            p.client_id,
            p.train_indices.len(),
            p.test_indices.len()
        )
        .unwrap();
        for h in &p.label_histogram {
            write!(out, ",{h}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n_per_class: usize, c: usize) -> Dataset {
        let n = n_per_class * c;
        let features = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        let labels = (0..n).map(|i| i % c).collect();
        Dataset::new(features, labels, c).unwrap()
    }

    fn check_invariants(parts: &[ClientPartition], alloc: &Allocation) {
        for p in parts {
            let size = p.total_size();
            assert!(size >= alloc.min_size && size <= alloc.max_size);
            assert!(p.train_indices.iter().all(|i| !p.test_indices.contains(i)));
            assert_eq!(p.label_histogram.iter().sum::<usize>(), p.train_indices.len());
            assert!(!p.test_indices.is_empty());
        }
    }

    #[test]
    fn single_client_gets_everything_it_draws() {
        let ds = balanced(200, 4);
        let alloc = Allocation::default();
        let parts = dirichlet_partition(&ds, 1, 0.5, &alloc, 9).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].client_id, 0);
        check_invariants(&parts, &alloc);
    }

    #[test]
    fn huge_alpha_is_nearly_balanced() {
        let ds = balanced(2000, 2);
        let alloc = Allocation::default();
        let parts = dirichlet_partition(&ds, 100, 1e9, &alloc, 4).unwrap();
        check_invariants(&parts, &alloc);
        let mad: f64 = parts
            .iter()
            .map(|p| {
                let all = ds.class_histogram(&[p.train_indices.clone(), p.test_indices.clone()].concat());
                let total = all.iter().sum::<usize>() as f64;
                all.iter().map(|&h| (h as f64 / total - 0.5).abs()).sum::<f64>() / 2.0
            })
            .sum::<f64>()
            / parts.len() as f64;
        assert!(mad < 0.05, "mean absolute deviation {mad}");
    }

    // Monte Carlo over 2e5 Dirichlet(0.01 * 1_10) draws puts
    // P(max proportion > 0.8) at 0.883.
    #[test]
    fn tiny_alpha_concentrates_on_one_class() {
        let ds = balanced(500, 10);
        let alloc = Allocation::default();
        let mut peaked_total = 0;
        for seed in 0..5 {
            let parts = dirichlet_partition(&ds, 100, 0.01, &alloc, seed).unwrap();
            check_invariants(&parts, &alloc);
            let peaked = parts
                .iter()
                .filter(|p| {
                    let all = ds.class_histogram(&[p.train_indices.clone(), p.test_indices.clone()].concat());
                    let total: usize = all.iter().sum();
                    *all.iter().max().unwrap() as f64 > 0.8 * total as f64
                })
                .count();
            peaked_total += peaked;
        }
        let rate = peaked_total as f64 / 500.0;
        assert!(rate >= 0.85, "rate {rate}");
    }

    #[test]
    fn exhausted_pools_fall_back_to_replacement() {
        let ds = balanced(10, 2);
        let alloc = Allocation {
            min_size: 40,
            max_size: 60,
            test_fraction: 0.2,
        };
        let parts = dirichlet_partition(&ds, 5, 1.0, &alloc, 1).unwrap();
        check_invariants(&parts, &alloc);
    }

    #[test]
    fn infeasible_ranges_are_rejected() {
        let ds = balanced(10, 2);
        let bad = Allocation {
            min_size: 10,
            max_size: 5,
            test_fraction: 0.2,
        };
        assert!(matches!(
            dirichlet_partition(&ds, 3, 1.0, &bad, 0),
            Err(FedError::Config(_))
        ));
        assert!(dirichlet_partition(&ds, 0, 1.0, &Allocation::default(), 0).is_err());
        assert!(dirichlet_partition(&ds, 2, 0.0, &Allocation::default(), 0).is_err());
    }

    #[test]
    fn partitions_are_reproducible() {
        let ds = balanced(100, 5);
        let alloc = Allocation::default();
        assert_eq!(
            dirichlet_partition(&ds, 8, 0.3, &alloc, 77).unwrap(),
            dirichlet_partition(&ds, 8, 0.3, &alloc, 77).unwrap()
        );
        assert_eq!(
            pathological_partition(&ds, 8, 2, &alloc, 77).unwrap(),
            pathological_partition(&ds, 8, 2, &alloc, 77).unwrap()
        );
    }

    #[test]
    fn single_label_clients() {
        let ds = balanced(300, 10);
        let parts = pathological_partition(&ds, 10, 1, &Allocation::default(), 3).unwrap();
        for p in &parts {
            assert_eq!(p.label_histogram.iter().filter(|&&h| h > 0).count(), 1);
        }
    }

    #[test]
    fn three_labels_cover_all_classes() {
        let ds = balanced(300, 10);
        let alloc = Allocation::default();
        let parts = pathological_partition(&ds, 100, 3, &alloc, 8).unwrap();
        check_invariants(&parts, &alloc);
        let mut union = [false; 10];
        for p in &parts {
            let all = ds.class_histogram(&[p.train_indices.clone(), p.test_indices.clone()].concat());
            assert!(all.iter().filter(|&&h| h > 0).count() <= 3);
            for (k, &h) in all.iter().enumerate() {
                union[k] |= h > 0;
            }
        }
        assert!(union.iter().all(|&u| u));
    }

    #[test]
    fn all_labels_allowed_when_n_equals_c() {
        let ds = balanced(300, 4);
        let parts = pathological_partition(&ds, 5, 4, &Allocation::default(), 1).unwrap();
        assert!(parts.iter().any(|p| p.label_histogram.iter().all(|&h| h > 0)));
        assert!(pathological_partition(&ds, 5, 5, &Allocation::default(), 1).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = [0.5, 0.5];
        assert!(label_kl(&p, &p, 1e-6).unwrap().abs() < 1e-12);
        let q = [0.25, 0.75];
        let direct = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let forward = label_kl(&p, &q, 1e-12).unwrap();
        assert!((forward - direct).abs() < 1e-9);
        assert!((forward - 0.1438).abs() < 1e-4);
        let reverse = label_kl(&q, &p, 1e-12).unwrap();
        let direct_rev = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((reverse - direct_rev).abs() < 1e-9);
        assert!((reverse - 0.1308).abs() < 1e-4);
        assert!((forward - reverse).abs() > 1e-3);
        assert!(label_kl(&p, &[1.0], 1e-6).is_err());
    }

    #[test]
    fn dataset_text_round_trip() {
        let ds = teacher_pool(25, 3, 4, 0.1, 5).unwrap();
        let mut buf = Vec::new();
        ds.write(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("d=3,C=4,N=25\n"));
        let back = Dataset::read(&buf[..]).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn dataset_reader_rejects_bad_rows() {
        assert!(Dataset::read("d=2,C=2,N=1\n1.0,2\n".as_bytes()).is_err());
        assert!(Dataset::read("d=2,C=2,N=2\n1.0,2.0,1\n".as_bytes()).is_err());
        assert!(Dataset::read("d=2,C=2,N=1\n1.0,2.0,3\n".as_bytes()).is_err());
        assert!(Dataset::read("x=2\n".as_bytes()).is_err());
    }

    #[test]
    fn synthetic_groups() {
        let spec = SyntheticTaskSpec {
            groups: 1,
            clients_per_group: 4,
            input_dim: 6,
            class_count: 3,
            task_shift: 1.0,
            noise: 0.1,
            allocation: Allocation::default(),
            seed: 2,
        };
        let task = synthetic_clustered_task(&spec).unwrap();
        assert_eq!(task.grouping.group_of_client, vec![0; 4]);
        assert_eq!(task.datasets.len(), 4);

        let flat = SyntheticTaskSpec {
            groups: 3,
            task_shift: 0.0,
            ..spec
        };
        let teachers = flat.teachers();
        for t in &teachers[1..] {
            assert_eq!(t.label_map, teachers[0].label_map);
            for (a, b) in t.weights.iter().zip(teachers[0].weights.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partition_report_layout() {
        let ds = balanced(50, 3);
        let parts = dirichlet_partition(&ds, 3, 1.0, &Allocation::default(), 0).unwrap();
        let report = partition_report(&parts);
        let lines: Vec<&str> = report.lines().collect();
        assert_eq!(lines[0], "client_id,train_size,test_size,class_0,class_1,class_2");
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.split(',').count() == 6));
    }
}
