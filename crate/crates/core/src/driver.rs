//! End-to-end training: shard the data, agree on basis points, build the
//! kernel blocks and run the trust-region solver on worker 0 while the
//! others answer its requests.

use std::collections::{BTreeMap, HashSet};
use std::net::{SocketAddr, TcpListener};
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::allreduce::{
    bytes_to_f64s, f64s_to_bytes, local_mesh, tcp, CommCounters, Communicator, Transport, TreeTopology,
};
use crate::basis::{exchange_random_points, extend_block, dedupe_new_points, kmeans_worker, BasisPolicy, KMeansReport};
use crate::data::{open_dataset, shard_ids, Dataset, Shard, SparseExample, SparseVec};
use crate::error::{Error, Result};
use crate::kernel::{build_kernel_block, w_row_ranges, BasisSet, BasisSource, HyperParams, KernelBlock};
use crate::objective::{local_fun_grad, local_hessian_vec, Loss, LossState, ModelState};
use crate::tron::{minimize, Oracle, TronConfig, TronTrace};

const ROOT: usize = 0;

const CMD_FUN_GRAD: u8 = 1;
const CMD_HESS_VEC: u8 = 2;
const CMD_STOP: u8 = 3;

/// Hyperparameters that worked well on well-known benchmark sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub lambda: f64,
    pub sigma: f64,
}

pub const PRESETS: [Preset; 4] = [
    Preset { name: "vehicle", lambda: 8.0, sigma: 2.0 },
    Preset { name: "covtype", lambda: 0.005, sigma: 0.09 },
    Preset { name: "ccat", lambda: 8.0, sigma: 0.7 },
    Preset { name: "mnist8m", lambda: 8.0, sigma: 7.0 },
];

pub fn preset(name: &str) -> Option<HyperParams> {
    PRESETS
        .iter()
        .find(|p| p.name.eq_ignore_ascii_case(name))
        .map(|p| HyperParams { lambda: p.lambda, sigma: p.sigma })
}

/// Where the basis points come from.
#[derive(Debug, Clone, PartialEq)]
pub enum BasisChoice {
    Policy(BasisPolicy),
    /// A fixed set; stage `s` uses its first `stages[s]` points.
    Given(BasisSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub params: HyperParams,
    pub loss: Loss,
    /// Basis sizes, increasing. A single entry trains once.
    pub stages: Vec<usize>,
    pub basis: BasisChoice,
    pub kmeans_iters: usize,
    pub p: usize,
    pub fanout: usize,
    pub seed: u64,
    pub tron: TronConfig,
    /// How long a worker waits on a peer before giving up.
    pub timeout: Duration,
}

impl TrainConfig {
    pub fn new(params: HyperParams, m: usize, p: usize) -> Self {
        TrainConfig {
            params,
            loss: Loss::SquaredHinge,
            stages: vec![m],
            basis: BasisChoice::Policy(BasisPolicy::Random),
            kmeans_iters: 3,
            p,
            fanout: 2,
            seed: 0,
            tron: TronConfig::default(),
            timeout: Duration::from_secs(3600),
        }
    }

    pub fn m(&self) -> usize {
        self.stages.last().copied().unwrap_or(0)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        self.params.validate()?;
        self.tron.validate()?;
        if self.p == 0 || self.p > n {
            return Err(Error::Config(format!("need 1 <= p <= n, got p={} with n={n}", self.p)));
        }
        if self.fanout == 0 {
            return Err(Error::Config("tree fanout must be at least 1".into()));
        }
        if self.stages.is_empty() || self.stages[0] == 0 || self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("basis sizes must be positive and increasing, got {:?}", self.stages)));
        }
        if self.m() > n {
            return Err(Error::Config(format!("m={} exceeds the {n} training examples", self.m())));
        }
        if let BasisChoice::Given(b) = &self.basis {
            if b.m() < self.m() {
                return Err(Error::Config(format!("given basis has {} points, need {}", b.m(), self.m())));
            }
            if b.sigma != self.params.sigma {
                return Err(Error::Config("given basis was built for a different sigma".into()));
            }
        }
        Ok(())
    }
}

/// Root side of the solver protocol: each call is one broadcast command
/// followed by the reductions the workers answer with.
///
/// Command payload: `[cmd u8 | commit u8 | f64 vector]`. `commit` carries
/// the accept/reject decision for the previous `fun_grad` point, so workers
/// know which mask to take curvature from without an extra round.
pub struct DistributedOracle<'a, T: Transport> {
    comm: &'a mut Communicator<T>,
    block: &'a KernelBlock,
    lambda: f64,
    loss: Loss,
    state: WorkerState,
    pending: bool,
    pub fun_grad_calls: u64,
    pub hess_vec_calls: u64,
}

#[derive(Default)]
struct WorkerState {
    current: Option<LossState>,
    trial: Option<LossState>,
}

impl WorkerState {
    fn commit(&mut self, accept: bool) {
        if accept {
            if let Some(t) = self.trial.take() {
                self.current = Some(t);
            }
        } else {
            self.trial = None;
        }
    }
}

fn command(cmd: u8, commit: bool, v: &[f64]) -> Vec<u8> {
    let mut out = vec![cmd, u8::from(commit)];
    out.extend(f64s_to_bytes(v));
    out
}

fn fun_grad_round<T: Transport>(
    comm: &mut Communicator<T>,
    block: &KernelBlock,
    state: &mut WorkerState,
    beta: &[f64],
    lambda: f64,
    loss: Loss,
) -> Result<(f64, Vec<f64>)> {
    let (s, parts, g) = local_fun_grad(block, beta, lambda, loss)?;
    state.trial = Some(s);
    let f = comm.allreduce_sum(&[parts.reg, parts.loss])?;
    let g = comm.allreduce_sum(&g)?;
    Ok((0.5 * lambda * f[0] + f[1], g))
}

fn hess_vec_round<T: Transport>(
    comm: &mut Communicator<T>,
    block: &KernelBlock,
    state: &WorkerState,
    d: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    let s = state
        .current
        .as_ref()
        .ok_or_else(|| Error::Protocol("Hd requested before any accepted point".into()))?;
    comm.allreduce_sum(&local_hessian_vec(block, s, d, lambda)?)
}

impl<'a, T: Transport> DistributedOracle<'a, T> {
    pub fn new(comm: &'a mut Communicator<T>, block: &'a KernelBlock, lambda: f64, loss: Loss) -> Result<Self> {
        if comm.rank() != ROOT {
            return Err(Error::Config("the solver runs on worker 0".into()));
        }
        Ok(DistributedOracle {
            comm,
            block,
            lambda,
            loss,
            state: WorkerState::default(),
            pending: false,
            fun_grad_calls: 0,
            hess_vec_calls: 0,
        })
    }

    fn send(&mut self, cmd: u8, v: &[f64]) -> Result<()> {
        let commit = std::mem::take(&mut self.pending);
        self.state.commit(commit);
        self.comm.broadcast(Some(command(cmd, commit, v)), ROOT)?;
        Ok(())
    }

    /// Releases the workers' serve loops.
    pub fn finish(mut self) -> Result<()> {
        self.send(CMD_STOP, &[])
    }
}

impl<T: Transport> Oracle for DistributedOracle<'_, T> {
    fn dim(&self) -> usize {
        self.block.m()
    }

    fn fun_grad(&mut self, beta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.fun_grad_calls += 1;
        self.send(CMD_FUN_GRAD, beta)?;
        fun_grad_round(self.comm, self.block, &mut self.state, beta, self.lambda, self.loss)
    }

    fn accept(&mut self, accepted: bool) {
        self.pending = accepted;
    }

    fn hess_vec(&mut self, d: &[f64]) -> Result<Vec<f64>> {
        self.hess_vec_calls += 1;
        self.send(CMD_HESS_VEC, d)?;
        hess_vec_round(self.comm, self.block, &self.state, d, self.lambda)
    }
}

/// Worker side of the solver protocol; returns when the root says stop.
pub fn serve<T: Transport>(comm: &mut Communicator<T>, block: &KernelBlock, lambda: f64, loss: Loss) -> Result<()> {
    let mut state = WorkerState::default();
    loop {
        let msg = comm.broadcast(None, ROOT)?;
        if msg.len() < 2 {
            return Err(Error::Protocol("truncated solver command".into()));
        }
        state.commit(msg[1] == 1);
        let v = bytes_to_f64s(&msg[2..])?;
        match msg[0] {
            CMD_FUN_GRAD => {
                fun_grad_round(comm, block, &mut state, &v, lambda, loss)?;
            }
            CMD_HESS_VEC => {
                hess_vec_round(comm, block, &state, &v, lambda)?;
            }
            CMD_STOP => return Ok(()),
            other => return Err(Error::Protocol(format!("unknown solver command {other}"))),
        }
    }
}

/// Per-stage timings and solver results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub m: usize,
    pub basis_time: f64,
    pub kmeans_time: f64,
    pub kernel_time: f64,
    pub tron_time: f64,
    /// Objective at the zero-padded previous solution (the solver's first
    /// evaluation).
    pub warm_start_objective: f64,
    pub final_objective: f64,
    pub trace: TronTrace,
    pub kernel_evals: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub lambda: f64,
    pub sigma: f64,
    pub loss: Loss,
    pub stages: Vec<usize>,
    pub basis: String,
    pub kmeans_iters: usize,
    pub p: usize,
    pub fanout: usize,
    pub seed: u64,
    pub tron: TronConfig,
    pub n: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Seconds for `"1"` loading and sharding, `"2"` basis exchange, `"3"`
    /// kernel blocks, `"4"` optimization, summed over stages.
    pub step_times: BTreeMap<String, f64>,
    /// Lloyd iterations, kept out of step 2.
    pub kmeans_time: f64,
    pub kmeans_inertia: Vec<f64>,
    /// Trace of the last stage.
    pub tron_trace: TronTrace,
    pub final_objective: f64,
    pub test_accuracy: Option<f64>,
    pub stages: Vec<StageReport>,
    /// Worker 0's collective counts.
    pub comm: CommCounters,
    pub config: ConfigEcho,
}

impl TrainReport {
    pub fn step_time(&self, step: u8) -> f64 {
        self.step_times.get(&step.to_string()).copied().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// What one worker ends up with.
#[derive(Debug, Clone)]
pub struct WorkerOutcome {
    pub rank: usize,
    pub basis: BasisSet,
    pub block: KernelBlock,
    pub shard: Shard,
    /// Set on worker 0 only.
    pub beta: Option<Vec<f64>>,
    pub stages: Vec<StageReport>,
    pub step_times: [f64; 4],
    pub kmeans: KMeansReport,
    pub comm: CommCounters,
}

fn secs(since: Instant) -> f64 {
    since.elapsed().as_secs_f64()
}

fn basis_label(cfg: &TrainConfig, dim: usize) -> String {
    match &cfg.basis {
        BasisChoice::Given(_) => "given".into(),
        BasisChoice::Policy(p) => p.resolve(cfg.m(), dim).as_str().into(),
    }
}

fn broadcast_points<T: Transport>(comm: &mut Communicator<T>, points: Option<&[SparseVec]>) -> Result<Vec<SparseVec>> {
    let payload = points.map(|pts| {
        BasisSet { points: pts.to_vec(), source: BasisSource::Random, sigma: 1.0 }.encode()
    });
    Ok(BasisSet::decode(&comm.broadcast(payload, ROOT)?)?.points)
}

/// One worker's part of a training job. `load_time` is the time already
/// spent reading the data, billed to step 1.
pub fn run_worker<T: Transport>(
    comm: &mut Communicator<T>,
    examples: &[SparseExample],
    dim: usize,
    cfg: &TrainConfig,
    load_time: f64,
) -> Result<WorkerOutcome> {
    let rank = comm.rank();
    let p = comm.size();
    let n = examples.len();
    cfg.validate(n).map_err(|e| e.at_step(1))?;
    if p != cfg.p {
        return Err(Error::Config(format!("configured for p={} but the job has {p} workers", cfg.p)));
    }
    let params = cfg.params;
    let mut steps = [load_time, 0.0, 0.0, 0.0];

    // Step 1: keep this worker's shard.
    let t = Instant::now();
    let shard = (|| -> Result<Shard> {
        let global_ids = shard_ids(n, p, rank, cfg.seed)?;
        let examples = global_ids.iter().map(|&i| examples[i].clone()).collect();
        comm.barrier()?;
        Ok(Shard { worker_id: rank, examples, global_ids })
    })()
    .map_err(|e| e.at_step(1))?;
    steps[0] += secs(t);

    let source = match &cfg.basis {
        BasisChoice::Given(_) => None,
        BasisChoice::Policy(policy) => Some(policy.resolve(cfg.m(), dim)),
    };
    let mut picked = HashSet::new();
    let mut basis = BasisSet { points: Vec::new(), source: source.unwrap_or(BasisSource::Random), sigma: params.sigma };
    let mut block: Option<KernelBlock> = None;
    let mut beta: Vec<f64> = Vec::new();
    let mut stages = Vec::new();
    let mut kmeans = KMeansReport::default();

    for (s, &target) in cfg.stages.iter().enumerate() {
        let m_old = basis.m();
        let count = target - m_old;

        // Step 2: one exchange of the new basis points.
        let t = Instant::now();
        let mut new_points = (|| -> Result<Vec<SparseVec>> {
            match &cfg.basis {
                BasisChoice::Given(given) => {
                    let mine = (rank == ROOT).then(|| &given.points[m_old..target]);
                    broadcast_points(comm, mine)
                }
                BasisChoice::Policy(_) => exchange_random_points(comm, &shard, count, cfg.seed, s as u64, &mut picked),
            }
        })()
        .map_err(|e| e.at_step(2))?;
        let basis_time = secs(t);

        let t = Instant::now();
        let mut kmeans_time = 0.0;
        if s == 0 && source == Some(BasisSource::KMeans) {
            let init = BasisSet { points: new_points, source: BasisSource::Random, sigma: params.sigma };
            let (centers, report) =
                kmeans_worker(comm, &shard, &init, cfg.kmeans_iters, dim).map_err(|e| e.at_step(2))?;
            new_points = centers.points;
            kmeans = report;
            kmeans_time = secs(t);
        }

        // Step 3: kernel blocks for the new points.
        let t = Instant::now();
        let built = (|| -> Result<KernelBlock> {
            let b = match block.take() {
                None => {
                    let points = dedupe_new_points(&[], new_points);
                    basis.points = points;
                    let range = w_row_ranges(basis.m(), p)[rank].clone();
                    build_kernel_block(&shard, &basis, &params, range)?
                }
                Some(mut b) => {
                    let points = dedupe_new_points(&basis.points, new_points);
                    extend_block(&mut b, &shard, &basis.points, &points, params.sigma, rank, p);
                    basis.points.extend(points);
                    b
                }
            };
            comm.barrier()?;
            Ok(b)
        })()
        .map_err(|e| e.at_step(3))?;
        let kernel_time = secs(t);
        let kernel_evals = built.c_evals + built.w_evals;
        beta.resize(basis.m(), 0.0);

        // Step 4: the solver on worker 0, serve loops elsewhere.
        let t = Instant::now();
        let solved = if rank == ROOT {
            (|| -> Result<(Vec<f64>, TronTrace)> {
                let mut oracle = DistributedOracle::new(comm, &built, params.lambda, cfg.loss)?;
                let (x, trace) = minimize(&mut oracle, &beta, &cfg.tron)?;
                debug_assert_eq!(oracle.fun_grad_calls, trace.fun_grad_calls);
                oracle.finish()?;
                Ok((x, trace))
            })()
            .map(Some)
        } else {
            serve(comm, &built, params.lambda, cfg.loss).map(|()| None)
        }
        .map_err(|e| e.at_step(4))?;
        let tron_time = secs(t);

        if let Some((x, trace)) = solved {
            beta = x;
            log::info!(
                "stage m={}: f={:.6e} after {} iterations ({:?})",
                basis.m(),
                trace.final_f(),
                trace.records.len(),
                trace.termination
            );
            stages.push(StageReport {
                m: basis.m(),
                basis_time,
                kmeans_time,
                kernel_time,
                tron_time,
                warm_start_objective: trace.initial_f,
                final_objective: trace.final_f(),
                trace,
                kernel_evals,
            });
        }
        steps[1] += basis_time;
        steps[2] += kernel_time;
        steps[3] += tron_time;
        block = Some(built);
    }

    Ok(WorkerOutcome {
        rank,
        basis,
        block: block.expect("at least one stage"),
        shard,
        beta: (rank == ROOT).then_some(beta),
        stages,
        step_times: steps,
        kmeans,
        comm: comm.counters(),
    })
}

fn report_from(root: &WorkerOutcome, cfg: &TrainConfig, n: usize, dim: usize) -> TrainReport {
    let last = root.stages.last().expect("root records every stage");
    TrainReport {
        step_times: (1..=4).map(|k| (k.to_string(), root.step_times[k - 1])).collect(),
        kmeans_time: root.stages.iter().map(|s| s.kmeans_time).sum(),
        kmeans_inertia: root.kmeans.inertia.clone(),
        tron_trace: last.trace.clone(),
        final_objective: last.final_objective,
        test_accuracy: None,
        stages: root.stages.clone(),
        comm: root.comm,
        config: ConfigEcho {
            lambda: cfg.params.lambda,
            sigma: cfg.params.sigma,
            loss: cfg.loss,
            stages: cfg.stages.clone(),
            basis: basis_label(cfg, dim),
            kmeans_iters: cfg.kmeans_iters,
            p: cfg.p,
            fanout: cfg.fanout,
            seed: cfg.seed,
            tron: cfg.tron,
            n,
            dim,
        },
    }
}

fn model_from(root: &WorkerOutcome, cfg: &TrainConfig, dim: usize) -> Result<ModelState> {
    let beta = root.beta.clone().expect("worker 0 holds the solution");
    ModelState::new(beta, root.basis.clone(), cfg.params, cfg.loss, dim)
}

/// Picks the most informative error from a failed job: a worker's own
/// failure rather than the disconnects it caused elsewhere.
fn root_cause(errors: Vec<Error>) -> Error {
    fn is_transport(e: &Error) -> bool {
        match e {
            Error::Transport { .. } => true,
            Error::Step { source, .. } => is_transport(source),
            _ => false,
        }
    }
    let mut errors = errors;
    match errors.iter().position(|e| !is_transport(e)) {
        Some(i) => errors.swap_remove(i),
        None => errors.swap_remove(0),
    }
}

/// Runs every worker of a job as a thread of this process.
pub fn run_local(
    data: &Dataset,
    cfg: &TrainConfig,
    load_time: f64,
    log_rounds: bool,
) -> Result<(Vec<WorkerOutcome>, Vec<Vec<crate::allreduce::RoundRecord>>)> {
    cfg.validate(data.len())?;
    let topo = TreeTopology::new(cfg.p, cfg.fanout, ROOT)?;
    let comms = local_mesh(&topo, cfg.timeout);
    let results: Vec<Result<(WorkerOutcome, Vec<crate::allreduce::RoundRecord>)>> = thread::scope(|s| {
        let handles: Vec<_> = comms
            .into_iter()
            .map(|mut comm| {
                s.spawn(move || {
                    if log_rounds {
                        comm.enable_round_log();
                    }
                    let out = run_worker(&mut comm, &data.examples, data.dim, cfg, load_time)?;
                    Ok((out, comm.take_round_log()))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
    });
    let mut outcomes = Vec::new();
    let mut logs = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok((o, l)) => {
                outcomes.push(o);
                logs.push(l);
            }
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        return Err(root_cause(errors));
    }
    Ok((outcomes, logs))
}

/// Trains on an in-memory dataset with in-process workers.
pub fn train_local(data: &Dataset, test: Option<&[SparseExample]>, cfg: &TrainConfig) -> Result<(ModelState, TrainReport)> {
    train_loaded(data, test, cfg, 0.0)
}

fn train_loaded(
    data: &Dataset,
    test: Option<&[SparseExample]>,
    cfg: &TrainConfig,
    load_time: f64,
) -> Result<(ModelState, TrainReport)> {
    let (outcomes, _) = run_local(data, cfg, load_time, false)?;
    let root = &outcomes[ROOT];
    let model = model_from(root, cfg, data.dim)?;
    let mut report = report_from(root, cfg, data.len(), data.dim);
    report.test_accuracy = test.map(|t| evaluate(&model, t));
    Ok((model, report))
}

/// Loads `train_path` (LIBSVM text, optionally gzipped) and trains with
/// in-process workers.
pub fn train_files(
    train_path: impl AsRef<Path>,
    test_path: Option<&Path>,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainReport)> {
    let t = Instant::now();
    let data = open_dataset(train_path).map_err(|e| e.at_step(1))?;
    let load_time = secs(t);
    let test = test_path.map(open_dataset).transpose()?;
    let dim = data.dim.max(test.as_ref().map_or(0, |t| t.dim));
    let data = Dataset { dim, ..data };
    train_loaded(&data, test.as_ref().map(|t| t.examples.as_slice()), cfg, load_time)
}

/// One process of a TCP job. Every process reads the full training file and
/// keeps its shard. Worker 0 returns the model and report.
pub fn train_tcp(
    rank: usize,
    hosts: &[SocketAddr],
    train_path: impl AsRef<Path>,
    test_path: Option<&Path>,
    cfg: &TrainConfig,
) -> Result<Option<(ModelState, TrainReport)>> {
    if hosts.len() != cfg.p || rank >= cfg.p {
        return Err(Error::Config(format!("rank {rank} with {} hosts for p={}", hosts.len(), cfg.p)));
    }
    let listener = TcpListener::bind(hosts[rank])?;
    let topo = TreeTopology::new(cfg.p, cfg.fanout, ROOT)?;
    let t = Instant::now();
    let data = open_dataset(train_path).map_err(|e| e.at_step(1))?;
    let mut comm = tcp::connect(rank, hosts, &topo, listener, cfg.timeout).map_err(|e| e.at_step(1))?;
    let load_time = secs(t);
    let out = run_worker(&mut comm, &data.examples, data.dim, cfg, load_time)?;
    if rank != ROOT {
        return Ok(None);
    }
    let model = model_from(&out, cfg, data.dim)?;
    let mut report = report_from(&out, cfg, data.len(), data.dim);
    if let Some(path) = test_path {
        report.test_accuracy = Some(evaluate(&model, &open_dataset(path)?.examples));
    }
    Ok(Some((model, report)))
}

/// `+1` where the decision value is `>= 0`, `-1` otherwise.
pub fn predict(model: &ModelState, examples: &[SparseExample]) -> Vec<f64> {
    examples.iter().map(|e| if model.decision(&e.features) >= 0.0 { 1.0 } else { -1.0 }).collect()
}

/// Fraction of examples whose predicted label matches.
pub fn evaluate(model: &ModelState, examples: &[SparseExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = predict(model, examples).iter().zip(examples).filter(|(p, e)| **p == e.label).count();
    hits as f64 / examples.len() as f64
}
