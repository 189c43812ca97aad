//! Server loop: client sampling, local updates, aggregation, re-clustering,
//! cluster number tuning and evaluation.

use std::fs::File;
use std::io::BufReader;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::clustering::{
    adjusted_rand_index, cnt, e_step, granularity, m_step, Assignment, ClusterSet, GranularityReport,
};
use crate::config::{DataConfig, Mode, RunConfig, SourceConfig};
use crate::data::{
    dirichlet_partition, holdout_partition, pathological_partition, synthetic_clustered_task, teacher_pool,
    ClientPartition, Dataset, GroundTruthGrouping,
};
use crate::error::{FedError, Result};
use crate::nn::{loss_and_grad, predict, regularized_step, MlpSpec, ParamVector};
use crate::rng::{stream, INIT_STREAM, SAMPLING_STREAM, WARMUP_ROUND};
use crate::similarity::{sq_dist, update_map, ReductionMap};
use crate::stats::mean_std;

/// A client's data: its source dataset and the indices it owns.
#[derive(Clone, Debug)]
pub struct ClientData {
    pub dataset: Arc<Dataset>,
    pub partition: ClientPartition,
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub params: ParamVector,
    pub data: ClientData,
}

/// Server-side state between rounds.
#[derive(Clone, Debug)]
pub struct ServerState {
    /// Index of the next round to run.
    pub round: u64,
    pub global_embedding: Vec<f64>,
    pub clusters: ClusterSet,
    pub assignment: Assignment,
    /// `None` in FedAvg mode, which never clusters.
    pub map: Option<ReductionMap>,
}

/// Per-round summary.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub round: u64,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
    pub mean_train_loss: f64,
    pub k: usize,
    pub g_c_mean: Option<f64>,
    pub g_c_std: Option<f64>,
    pub ari: Option<f64>,
}

/// One cluster's granularity at the end of a round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterTraceRow {
    pub round: u64,
    pub k: usize,
    pub cluster: usize,
    pub dist_intra: f64,
    pub dist_inter: Option<f64>,
    pub g_c: Option<f64>,
    pub member_count: usize,
}

/// Hyperparameters of one LocalUpdate call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalParams {
    pub eta: f64,
    pub mu: f64,
    pub lambda: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl LocalParams {
    pub fn from_config(config: &RunConfig) -> Self {
        let (mu, lambda) = config.effective_strengths();
        Self {
            eta: config.eta,
            mu,
            lambda,
            local_epochs: config.local_epochs,
            batch_size: config.batch_size,
        }
    }

    fn unregularized(self) -> Self {
        Self {
            mu: 0.0,
            lambda: 0.0,
            ..self
        }
    }
}

/// Draws one mini-batch of training indices without replacement; the whole
/// training set when it is no larger than `batch_size`.
pub fn sample_batch_indices<R: Rng + ?Sized>(train: &[usize], batch_size: usize, rng: &mut R) -> Vec<usize> {
    if train.len() <= batch_size {
        return train.to_vec();
    }
    index::sample(rng, train.len(), batch_size)
        .into_iter()
        .map(|i| train[i])
        .collect()
}

/// Result of a local update.
#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub client: ClientState,
    /// Mean supervised loss over the local steps; `None` if skipped.
    pub mean_loss: Option<f64>,
}

/// Runs `local_epochs` regularized SGD steps, each on a fresh random batch,
/// against anchors fixed for the whole call.
pub fn local_update<R: Rng + ?Sized>(
    spec: &MlpSpec,
    client: &ClientState,
    center: &ParamVector,
    global_embedding: &[f64],
    params: &LocalParams,
    rng: &mut R,
) -> Result<LocalOutcome> {
    let train = &client.data.partition.train_indices;
    if train.is_empty() {
        log::warn!("client {} has no training data, skipped", client.client_id);
        return Ok(LocalOutcome {
            client: client.clone(),
            mean_loss: None,
        });
    }
    let mut w = client.params.clone();
    let mut loss_sum = 0.0;
    for _ in 0..params.local_epochs {
        let idx = sample_batch_indices(train, params.batch_size, rng);
        let batch = client.data.dataset.batch(&idx)?;
        let (loss, grad) = loss_and_grad(spec, &w, &batch)?;
        loss_sum += loss;
        w = regularized_step(
            &w,
            &grad,
            center,
            global_embedding,
            params.eta,
            params.mu,
            params.lambda,
        )?;
    }
    if !w.is_finite() {
        return Err(FedError::Numeric {
            layer: spec.depth() - 1,
        });
    }
    Ok(LocalOutcome {
        client: ClientState {
            params: w,
            ..client.clone()
        },
        mean_loss: Some(loss_sum / params.local_epochs as f64),
    })
}

/// Unweighted mean of the clients' embedding slices.
pub fn aggregate_global_embedding(clients: &[ClientState]) -> Result<Vec<f64>> {
    let first = clients
        .first()
        .ok_or_else(|| FedError::State("cannot aggregate an empty client set".into()))?;
    let mut acc = vec![0.0; first.params.split_index()];
    for c in clients {
        acc.iter_mut()
            .zip(c.params.embedding())
            .for_each(|(a, b)| *a += b);
    }
    let n = clients.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

fn mean_params(models: &[&ParamVector]) -> Result<ParamVector> {
    let mut acc = vec![0.0; models[0].len()];
    for m in models {
        acc.iter_mut().zip(m.as_slice()).for_each(|(a, b)| *a += b);
    }
    let n = models.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    ParamVector::new(acc, models[0].split_index())
}

/// The model a client is evaluated with in the given mode.
pub fn evaluation_model<'a>(mode: Mode, client: &'a ClientState, state: &'a ServerState) -> &'a ParamVector {
    if mode.restarts_from_server() {
        &state.clusters.centers[state.assignment.cluster_of(client.client_id)]
    } else {
        &client.params
    }
}

/// Top-1 accuracy of each client on its own test split.
pub fn client_accuracies(
    spec: &MlpSpec,
    mode: Mode,
    clients: &[ClientState],
    state: &ServerState,
) -> Result<Vec<f64>> {
    clients
        .par_iter()
        .map(|c| {
            let test = &c.data.partition.test_indices;
            if test.is_empty() {
                return Ok(0.0);
            }
            let batch = c.data.dataset.batch(test)?;
            let preds = predict(spec, evaluation_model(mode, c, state), &batch.features)?;
            let correct = preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
            Ok(correct as f64 / test.len() as f64)
        })
        .collect()
}

/// Mean and population standard deviation of test accuracy.
pub fn evaluate(
    spec: &MlpSpec,
    mode: Mode,
    clients: &[ClientState],
    state: &ServerState,
) -> Result<(f64, f64)> {
    let acc = client_accuracies(spec, mode, clients, state)?;
    Ok(mean_std(&acc))
}

/// Mean squared distance of each client to its cluster center.
pub fn mean_intra_distance(clients: &[ClientState], state: &ServerState) -> f64 {
    let total: f64 = clients
        .iter()
        .map(|c| {
            let center = &state.clusters.centers[state.assignment.cluster_of(c.client_id)];
            sq_dist(c.params.as_slice(), center.as_slice())
        })
        .sum();
    total / clients.len() as f64
}

/// Clients sampled in `round`, in ascending id order.
pub fn sample_clients(config: &RunConfig, m: usize, round: u64) -> Vec<usize> {
    let mut rng = stream(config.seed, round, SAMPLING_STREAM);
    let mut chosen = index::sample(&mut rng, m, config.sample_size(m)).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Everything produced by one round.
#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub metrics: MetricsRecord,
    pub trace: Vec<ClusterTraceRow>,
    pub sampled: Vec<usize>,
    pub cnt_changed: bool,
}

fn models_of(clients: &[ClientState]) -> Vec<ParamVector> {
    clients.iter().map(|c| c.params.clone()).collect()
}

fn trace_rows(round: u64, report: &GranularityReport) -> Vec<ClusterTraceRow> {
    let k = report.clusters.len();
    report
        .clusters
        .iter()
        .enumerate()
        .map(|(i, c)| ClusterTraceRow {
            round,
            k,
            cluster: i,
            dist_intra: c.dist_intra,
            dist_inter: c.dist_inter,
            g_c: c.g_c,
            member_count: c.member_count,
        })
        .collect()
}

/// One round of the server loop. Returns the next state, all clients and
/// the round's outputs.
pub fn run_round(
    spec: &MlpSpec,
    state: &ServerState,
    clients: &[ClientState],
    config: &RunConfig,
    truth: Option<&GroundTruthGrouping>,
) -> Result<(ServerState, Vec<ClientState>, RoundOutput)> {
    let round = state.round;
    let m = clients.len();
    let sampled = sample_clients(config, m, round);
    let local = LocalParams::from_config(config);
    let mode = config.mode;

    let outcomes: Vec<LocalOutcome> = sampled
        .par_iter()
        .map(|&i| {
            let center = &state.clusters.centers[state.assignment.cluster_of(i)];
            let start = if mode.restarts_from_server() {
                ClientState {
                    params: center.clone(),
                    ..clients[i].clone()
                }
            } else {
                clients[i].clone()
            };
            let mut rng = stream(config.seed, round, i as u64);
            local_update(spec, &start, center, &state.global_embedding, &local, &mut rng)
        })
        .collect::<Result<_>>()?;

    let losses: Vec<f64> = outcomes.iter().filter_map(|o| o.mean_loss).collect();
    let mean_loss = mean_std(&losses).0;
    let updated: Vec<ClientState> = outcomes.into_iter().map(|o| o.client).collect();
    let mut next_clients = clients.to_vec();
    for c in &updated {
        next_clients[c.client_id] = c.clone();
    }

    let mut next = state.clone();
    next.round = round + 1;
    let mut cnt_changed = false;
    if mode == Mode::Fedavg {
        let refs: Vec<&ParamVector> = updated.iter().map(|c| &c.params).collect();
        let global = mean_params(&refs)?;
        next.global_embedding = global.embedding().to_vec();
        next.clusters = ClusterSet {
            centers: vec![global],
            member_counts: vec![m],
        };
        next.assignment = Assignment::single(m);
    } else {
        next.global_embedding = aggregate_global_embedding(&updated)?;
        let models = models_of(&next_clients);
        if config.refreshes_map(round) || next.map.is_none() {
            next.map = Some(update_map(&models, config.reduction_dim, round)?);
        }
        let map = next.map.as_ref().unwrap();
        let assignment = e_step(&models, &state.clusters, map)?;
        let clusters = m_step(&models, &assignment, &state.clusters)?;
        next.assignment = assignment;
        next.clusters = clusters;
        if config.runs_cnt(round) {
            let outcome = cnt(
                &models,
                &next.assignment,
                &next.clusters,
                map,
                config.cnt_lower,
                config.cnt_upper,
            )?;
            cnt_changed = outcome.changed();
            if cnt_changed {
                log::debug!(
                    "round {round}: CNT merges {:?} splits {:?}, K {} -> {}",
                    outcome.merges,
                    outcome.splits,
                    next.clusters.k(),
                    outcome.k()
                );
            }
            next.clusters = outcome.clusters;
            next.assignment = outcome.assignment;
        }
    }

    let report = granularity(&models_of(&next_clients), &next.assignment, &next.clusters)?;
    let (acc_mean, acc_std) = evaluate(spec, mode, &next_clients, &next)?;
    let ratios = report.ratios();
    let (g_mean, g_std) = mean_std(&ratios);
    let ari = match truth {
        Some(t) => Some(adjusted_rand_index(&next.assignment, t)?),
        None => None,
    };
    let metrics = MetricsRecord {
        round,
        mean_test_accuracy: acc_mean,
        std_test_accuracy: acc_std,
        mean_train_loss: mean_loss,
        k: next.clusters.k(),
        g_c_mean: (!ratios.is_empty()).then_some(g_mean),
        g_c_std: (!ratios.is_empty()).then_some(g_std),
        ari,
    };
    Ok((
        next,
        next_clients,
        RoundOutput {
            metrics,
            trace: trace_rows(round, &report),
            sampled,
            cnt_changed,
        },
    ))
}

fn load_source(source: &SourceConfig) -> Result<Dataset> {
    match (&source.path, &source.teacher) {
        (Some(path), None) => Dataset::read(BufReader::new(File::open(path)?)),
        (None, Some(t)) => teacher_pool(t.samples, t.input_dim, t.class_count, t.noise, t.seed),
        _ => Err(FedError::Config(
            "data.source needs exactly one of `path` or `teacher`".into(),
        )),
    }
}

/// Generated client data plus the latent grouping when known.
pub struct ClientSetup {
    pub clients: Vec<ClientData>,
    pub truth: Option<GroundTruthGrouping>,
    pub input_dim: usize,
    pub class_count: usize,
}

pub fn build_client_data(data: &DataConfig) -> Result<ClientSetup> {
    match data {
        DataConfig::Synthetic(spec) => {
            let task = synthetic_clustered_task(spec)?;
            let clients = task
                .datasets
                .into_iter()
                .enumerate()
                .map(|(i, ds)| {
                    let partition = holdout_partition(
                        &ds,
                        i,
                        spec.allocation.test_fraction,
                        spec.seed.wrapping_add(1 + i as u64),
                    );
                    ClientData {
                        dataset: Arc::new(ds),
                        partition,
                    }
                })
                .collect();
            Ok(ClientSetup {
                clients,
                truth: Some(task.grouping),
                input_dim: spec.input_dim,
                class_count: spec.class_count,
            })
        }
        DataConfig::Dirichlet(d) => {
            let ds = Arc::new(load_source(&d.source)?);
            let parts = dirichlet_partition(&ds, d.clients, d.alpha, &d.allocation, d.seed)?;
            Ok(shared_setup(ds, parts))
        }
        DataConfig::Pathological(p) => {
            let ds = Arc::new(load_source(&p.source)?);
            let parts = pathological_partition(&ds, p.clients, p.labels_per_client, &p.allocation, p.seed)?;
            Ok(shared_setup(ds, parts))
        }
    }
}

fn shared_setup(ds: Arc<Dataset>, parts: Vec<ClientPartition>) -> ClientSetup {
    let (input_dim, class_count) = (ds.input_dim(), ds.class_count);
    ClientSetup {
        clients: parts
            .into_iter()
            .map(|partition| ClientData {
                dataset: Arc::clone(&ds),
                partition,
            })
            .collect(),
        truth: None,
        input_dim,
        class_count,
    }
}

/// A complete simulation: model spec, clients and server state.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub config: RunConfig,
    pub spec: MlpSpec,
    pub clients: Vec<ClientState>,
    pub state: ServerState,
    pub truth: Option<GroundTruthGrouping>,
}

impl Simulation {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let setup = build_client_data(&config.data)?;
        let mut sizes = vec![setup.input_dim];
        sizes.extend(&config.model.hidden);
        sizes.push(setup.class_count);
        let spec = MlpSpec::new(sizes, config.model.activation)?;
        Self::from_parts(config, spec, setup.clients, setup.truth)
    }

    /// Initializes every client with one common random model. With
    /// `k_init > 1` all clients first run one unregularized local update,
    /// then `k_init` distinct client models seed the clusters.
    pub fn from_parts(
        config: RunConfig,
        spec: MlpSpec,
        data: Vec<ClientData>,
        truth: Option<GroundTruthGrouping>,
    ) -> Result<Self> {
        config.validate()?;
        let m = data.len();
        if m == 0 {
            return Err(FedError::Config("no clients".into()));
        }
        if config.mode != Mode::Fedavg && config.k_init > m {
            return Err(FedError::Config(format!(
                "k_init = {} exceeds the {} clients",
                config.k_init, m
            )));
        }
        if let Some(t) = &truth {
            if t.group_of_client.len() != m {
                return Err(FedError::Config(
                    "ground truth does not cover every client".into(),
                ));
            }
        }
        let init = spec.init_params(&mut stream(config.seed, WARMUP_ROUND, INIT_STREAM));
        let mut clients: Vec<ClientState> = data
            .into_iter()
            .enumerate()
            .map(|(i, data)| ClientState {
                client_id: i,
                params: init.clone(),
                data,
            })
            .collect();

        let single = |center: ParamVector| ServerState {
            round: 0,
            global_embedding: center.embedding().to_vec(),
            clusters: ClusterSet {
                centers: vec![center],
                member_counts: vec![m],
            },
            assignment: Assignment::single(m),
            map: None,
        };
        let state = if config.mode == Mode::Fedavg || config.k_init == 1 {
            single(init.clone())
        } else {
            let warm = LocalParams::from_config(&config).unregularized();
            let phi = init.embedding().to_vec();
            clients = clients
                .par_iter()
                .map(|c| {
                    let mut rng = stream(config.seed, WARMUP_ROUND, c.client_id as u64);
                    local_update(&spec, c, &init, &phi, &warm, &mut rng).map(|o| o.client)
                })
                .collect::<Result<_>>()?;
            let models = models_of(&clients);
            let map = update_map(&models, config.reduction_dim, 0)?;
            let mut rng = stream(config.seed, WARMUP_ROUND, INIT_STREAM);
            let seeds = index::sample(&mut rng, m, config.k_init).into_vec();
            let seeded = ClusterSet {
                centers: seeds.iter().map(|&i| models[i].clone()).collect(),
                member_counts: vec![1; seeds.len()],
            };
            let assignment = e_step(&models, &seeded, &map)?;
            let clusters = m_step(&models, &assignment, &seeded)?;
            ServerState {
                round: 0,
                global_embedding: aggregate_global_embedding(&clients)?,
                clusters,
                assignment,
                map: Some(map),
            }
        };
        Ok(Self {
            config,
            spec,
            clients,
            state,
            truth,
        })
    }

    pub fn step(&mut self) -> Result<RoundOutput> {
        let (state, clients, out) = run_round(
            &self.spec,
            &self.state,
            &self.clients,
            &self.config,
            self.truth.as_ref(),
        )?;
        self.state = state;
        self.clients = clients;
        Ok(out)
    }

    pub fn models(&self) -> Vec<ParamVector> {
        models_of(&self.clients)
    }

    pub fn partitions(&self) -> Vec<ClientPartition> {
        self.clients.iter().map(|c| c.data.partition.clone()).collect()
    }
}

/// Metrics, cluster trace and final state of a finished run.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub metrics: Vec<MetricsRecord>,
    pub trace: Vec<ClusterTraceRow>,
    pub simulation: Simulation,
}

pub fn run_experiment(config: RunConfig) -> Result<ExperimentResult> {
    let mut sim = Simulation::new(config)?;
    run_simulation(&mut sim).map(|(metrics, trace)| ExperimentResult {
        metrics,
        trace,
        simulation: sim,
    })
}

/// Runs the remaining configured rounds of an initialized simulation.
pub fn run_simulation(sim: &mut Simulation) -> Result<(Vec<MetricsRecord>, Vec<ClusterTraceRow>)> {
    let mut metrics = Vec::with_capacity(sim.config.rounds);
    let mut trace = Vec::new();
    while (sim.state.round as usize) < sim.config.rounds {
        let out = sim.step()?;
        metrics.push(out.metrics);
        trace.extend(out.trace);
    }
    Ok((metrics, trace))
}

/// Same as [`run_experiment`] on a dedicated pool of `threads` workers.
pub fn run_experiment_with_threads(config: RunConfig, threads: usize) -> Result<ExperimentResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| FedError::State(format!("cannot build worker pool: {e}")))?;
    pool.install(|| run_experiment(config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Allocation, SyntheticTaskSpec};

    fn tiny_config() -> RunConfig {
        RunConfig {
            eta: 0.05,
            mu: 0.5,
            lambda: 0.1,
            k_init: 2,
            reduction_dim: 4,
            cnt_lower: 0.2,
            cnt_upper: 0.8,
            cnt_enabled: true,
            rounds: 3,
            sample_fraction: 0.5,
            local_epochs: 2,
            batch_size: 8,
            map_refresh_period: 2,
            cnt_period: 100,
            seed: 5,
            mode: Mode::Fedac,
            model: Default::default(),
            data: DataConfig::Synthetic(SyntheticTaskSpec {
                groups: 2,
                clients_per_group: 3,
                input_dim: 4,
                class_count: 3,
                task_shift: 1.0,
                noise: 0.1,
                allocation: Allocation {
                    min_size: 20,
                    max_size: 30,
                    test_fraction: 0.2,
                },
                seed: 1,
            }),
        }
    }

    #[test]
    fn embedding_mean_examples() {
        let sim = Simulation::new(tiny_config()).unwrap();
        let template = sim.clients[0].clone();
        let with = |v: Vec<f64>| ClientState {
            params: ParamVector::new(v, 1).unwrap(),
            ..template.clone()
        };
        let agg = aggregate_global_embedding(&[with(vec![1.0, 9.0]), with(vec![3.0, -4.0])]).unwrap();
        assert_eq!(agg, vec![2.0]);
        assert_eq!(
            aggregate_global_embedding(&[with(vec![1.5, 0.0])]).unwrap(),
            vec![1.5]
        );
        assert!(aggregate_global_embedding(&[]).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let sim = Simulation::new(tiny_config()).unwrap();
        let c = &sim.clients[0];
        let center = &sim.state.clusters.centers[0];
        let params = LocalParams {
            eta: 0.0,
            mu: 1.0,
            lambda: 1.0,
            local_epochs: 3,
            batch_size: 4,
        };
        let out = local_update(
            &sim.spec,
            c,
            center,
            &sim.state.global_embedding,
            &params,
            &mut stream(0, 0, 0),
        )
        .unwrap();
        assert_eq!(out.client.params, c.params);
    }

    #[test]
    fn empty_train_set_is_skipped() {
        let sim = Simulation::new(tiny_config()).unwrap();
        let mut c = sim.clients[0].clone();
        c.data.partition.train_indices.clear();
        let params = LocalParams::from_config(&sim.config);
        let out = local_update(
            &sim.spec,
            &c,
            &c.params,
            &sim.state.global_embedding,
            &params,
            &mut stream(0, 0, 0),
        )
        .unwrap();
        assert!(out.mean_loss.is_none());
        assert_eq!(out.client.params, c.params);
    }

    #[test]
    fn batch_sampling() {
        let train: Vec<usize> = (10..20).collect();
        assert_eq!(sample_batch_indices(&train, 32, &mut stream(0, 0, 0)), train);
        let b = sample_batch_indices(&train, 4, &mut stream(0, 0, 0));
        assert_eq!(b.len(), 4);
        let mut dedup = b.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 4);
        assert!(b.iter().all(|i| train.contains(i)));
    }

    #[test]
    fn k_init_larger_than_clients_is_rejected() {
        let mut cfg = tiny_config();
        cfg.k_init = 7;
        assert!(matches!(Simulation::new(cfg), Err(FedError::Config(_))));
    }

    #[test]
    fn zero_rounds_returns_initial_state() {
        let mut cfg = tiny_config();
        cfg.rounds = 0;
        let init = Simulation::new(cfg.clone()).unwrap();
        let res = run_experiment(cfg).unwrap();
        assert!(res.metrics.is_empty());
        assert_eq!(res.simulation.state.round, 0);
        assert_eq!(res.simulation.models(), init.models());
        assert_eq!(res.simulation.state.clusters, init.state.clusters);
    }
}
