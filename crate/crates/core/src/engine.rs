//! Fitting drivers: serial ECME, synchronous parallel ECME and the
//! asynchronous partial-barrier variant, sharing one manager-worker protocol.

use std::collections::BTreeMap;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::cm::{select_rho, update_a, update_beta, update_nu, update_psi, AggregateStats};
use crate::dec::DecParams;
use crate::error::{Error, Result};
use crate::estep::{GridAxis, GridSums, Partition, PartitionStats};
use crate::model::{observed_loglik, Dataset, Theta};
use crate::numeric::{symmetrize, ExactSum, MatrixSum};
use crate::rng::{rng_from, stream};

pub const WATCHDOG_ITERATIONS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Ecme,
    Pecme,
    Adecme,
}

impl std::fmt::Display for EngineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EngineKind::Ecme => "ecme",
            EngineKind::Pecme => "pecme",
            EngineKind::Adecme => "adecme",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Default,
    Random,
    Explicit(Theta),
}

/// Artificial per-exchange worker latency, used to emulate heterogeneous hardware.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayModel {
    None,
    /// Each exchange sleeps a uniform draw from [min_ms, max_ms].
    Uniform { min_ms: f64, max_ms: f64 },
    /// Each exchange sleeps per_subject_us per subject; the last worker
    /// (when there are at least two) sleeps slow_factor times longer.
    OneSlowWorker { per_subject_us: f64, slow_factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub engine: EngineKind,
    pub epsilon: f64,
    pub max_iter: u64,
    pub workers_k: usize,
    pub gamma: f64,
    pub zeta: f64,
    pub seed: u64,
    pub init: Init,
    pub trace_loglik: bool,
    pub trace_theta: bool,
    pub delay: DelayModel,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            engine: EngineKind::Ecme,
            epsilon: 1e-7,
            max_iter: 1000,
            workers_k: 4,
            gamma: 0.875,
            zeta: 0.05,
            seed: 0,
            init: Init::Default,
            trace_loglik: false,
            trace_theta: false,
            delay: DelayModel::None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if self.workers_k == 0 {
            return Err(Error::Config("at least one worker is required".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.zeta) {
            return Err(Error::Config(format!("zeta must lie in [0, 1), got {}", self.zeta)));
        }
        match self.delay {
            DelayModel::Uniform { min_ms, max_ms } if !(min_ms >= 0.0 && max_ms >= min_ms) => {
                Err(Error::Config(format!("invalid uniform delay [{min_ms}, {max_ms}] ms")))
            }
            DelayModel::OneSlowWorker { per_subject_us, slow_factor }
                if !(per_subject_us >= 0.0 && slow_factor >= 0.0) =>
            {
                Err(Error::Config("slow-worker delay must be non-negative".into()))
            }
            _ => Ok(()),
        }
    }

    /// Number of fresh partitions the asynchronous manager waits for.
    pub fn wait_count(&self) -> usize {
        ((self.gamma * self.workers_k as f64).ceil() as usize).clamp(1, self.workers_k)
    }
}

/// Wall-clock seconds spent in each part of an iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTimings {
    pub total: f64,
    pub e_step: f64,
    pub dec: f64,
    pub psi: f64,
    pub a: f64,
    pub beta: f64,
    pub nu: f64,
}

impl StepTimings {
    fn accumulate(&mut self, other: &StepTimings) {
        self.total += other.total;
        self.e_step += other.e_step;
        self.dec += other.dec;
        self.psi += other.psi;
        self.a += other.a;
        self.beta += other.beta;
        self.nu += other.nu;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitFlags {
    /// Iterations whose ν root fell outside the search bracket.
    pub nu_clamped: u64,
    /// Iterations whose Ψ update needed eigenvalue flooring.
    pub psi_projected: u64,
    /// The starting coefficients needed a ridge term.
    pub ridge_init: bool,
    /// Largest stamp lag of any cached partition used in an aggregate.
    pub max_stale_lag: u64,
    /// Lag → number of (worker, iteration) aggregates with that lag.
    pub stale_lag_histogram: BTreeMap<u64, u64>,
    /// Asynchronous iterations that waited for every worker.
    pub full_sync_iterations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub engine: EngineKind,
    pub theta_hat: Theta,
    pub theta_init: Theta,
    pub iterations: u64,
    pub converged: bool,
    pub comm_rounds: u64,
    pub loglik_initial: Option<f64>,
    pub loglik_trace: Vec<f64>,
    pub step_timings: StepTimings,
    pub iteration_timings: Vec<StepTimings>,
    pub flags: FitFlags,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub theta_trace: Vec<Theta>,
}

pub fn check_convergence(theta_prev: &Theta, theta_next: &Theta, epsilon: f64) -> Result<bool> {
    Ok(theta_prev.max_abs_diff(theta_next)? < epsilon)
}

fn stacked(data: &Dataset) -> (DMatrix<f64>, DMatrix<f64>) {
    let rows = data.total_rows();
    let mut x = DMatrix::zeros(rows, data.q);
    let mut y = DMatrix::zeros(rows, data.p);
    let mut r = 0;
    for s in &data.subjects {
        let n = s.n_rows();
        x.rows_mut(r, n).copy_from(&s.x);
        y.rows_mut(r, n).copy_from(&s.y);
        r += n;
    }
    (x, y)
}

/// Starting values: pooled least squares, small signed skewness, pooled
/// residual covariance, ν = 10 and (ρ₁, ρ₂) = (0.5, 0.5). Returns whether a
/// ridge term was needed.
pub fn default_init(data: &Dataset, seed: u64) -> Result<(Theta, bool)> {
    let (x, y) = stacked(data);
    let gram = symmetrize(&x.tr_mul(&x));
    let rhs = x.tr_mul(&y);
    let (beta, ridge) = match nalgebra::Cholesky::new(gram.clone()) {
        Some(c) => (c.solve(&rhs), false),
        None => {
            let bumped = gram + DMatrix::identity(data.q, data.q) * 1e-6;
            let c = nalgebra::Cholesky::new(bumped)
                .ok_or_else(|| Error::Estimation("pooled covariate matrix is degenerate even with a ridge".into()))?;
            log::warn!("pooled covariate cross-product is singular; using a 1e-6 ridge for the start");
            (c.solve(&rhs), true)
        }
    };
    let resid = &y - &x * &beta;
    let rows = resid.nrows() as f64;
    let mean = resid.row_mean();
    let centered = DMatrix::from_fn(resid.nrows(), data.p, |i, j| resid[(i, j)] - mean[j]);
    let mut psi = symmetrize(&(centered.tr_mul(&centered) / (rows - 1.0).max(1.0)));
    if nalgebra::Cholesky::new(psi.clone()).is_none() {
        let eig = psi.clone().symmetric_eigen();
        let floor = (1e-8 * eig.eigenvalues.max()).max(1e-8);
        let clipped = eig.eigenvalues.map(|v| v.max(floor));
        psi = symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()));
    }
    let mut rng = rng_from(seed, &[stream::INIT]);
    let a_row = DVector::from_fn(data.p, |_, _| if rng.random::<bool>() { 0.01 } else { -0.01 });
    let theta = Theta::new(beta, a_row, psi, 10.0, DecParams { rho1: 0.5, rho2: 0.5 })?;
    Ok((theta, ridge))
}

/// Default start with β jittered by N(0, 0.1²) and ν drawn from U[3, 30].
pub fn random_init(data: &Dataset, seed: u64) -> Result<(Theta, bool)> {
    let (mut theta, ridge) = default_init(data, seed)?;
    let mut rng = rng_from(seed, &[stream::INIT, 1]);
    let jitter = Normal::new(0.0, 0.1).expect("valid normal");
    theta.beta.iter_mut().for_each(|b| *b += jitter.sample(&mut rng));
    theta.nu = Uniform::new_inclusive(3.0, 30.0).expect("valid range").sample(&mut rng);
    Ok((theta, ridge))
}

fn starting_point(data: &Dataset, cfg: &FitConfig) -> Result<(Theta, bool)> {
    match &cfg.init {
        Init::Default => default_init(data, cfg.seed),
        Init::Random => random_init(data, cfg.seed),
        Init::Explicit(theta) => {
            if theta.p() != data.p || theta.q() != data.q {
                return Err(Error::Config(format!(
                    "explicit start has q={}, p={} but the data have q={}, p={}",
                    theta.q(),
                    theta.p(),
                    data.q,
                    data.p
                )));
            }
            Ok((theta.clone(), false))
        }
    }
}

// ---------------------------------------------------------------------------
// Manager-worker protocol

#[derive(Debug, Clone)]
enum Request {
    EStep { theta: Arc<Theta>, stamp: u64, with_grid: bool },
    RefreshA(Arc<Theta>),
    RefreshPsi(Arc<Theta>),
    Grid(Arc<Theta>, GridAxis),
}

#[derive(Debug)]
enum Reply {
    Stats(PartitionStats),
    AStats(MatrixSum, ExactSum),
    PsiStats(MatrixSum),
    Grid(Vec<ExactSum>),
}

struct WorkerDelay {
    model: DelayModel,
    factor: f64,
    subjects: usize,
    rng: crate::rng::Rng,
}

impl WorkerDelay {
    fn new(model: &DelayModel, worker: usize, k: usize, subjects: usize, seed: u64) -> Self {
        let factor = match model {
            DelayModel::OneSlowWorker { slow_factor, .. } if k >= 2 && worker == k - 1 => *slow_factor,
            _ => 1.0,
        };
        Self {
            model: model.clone(),
            factor,
            subjects,
            rng: rng_from(seed, &[stream::DELAY, worker as u64]),
        }
    }

    fn pause(&mut self) {
        let micros = match self.model {
            DelayModel::None => return,
            DelayModel::Uniform { min_ms, max_ms } => {
                1e3 * if max_ms > min_ms { self.rng.random_range(min_ms..max_ms) } else { min_ms }
            }
            DelayModel::OneSlowWorker { per_subject_us, .. } => per_subject_us * self.subjects as f64 * self.factor,
        };
        if micros > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(micros * 1e-6));
        }
    }
}

fn serve(part: &mut Partition, req: &Request) -> Result<Reply> {
    Ok(match req {
        Request::EStep { theta, stamp, with_grid } => Reply::Stats(part.estep(theta, *stamp, *with_grid)?),
        Request::RefreshA(theta) => {
            let (s1, s2) = part.refresh_a(theta)?;
            Reply::AStats(s1, s2)
        }
        Request::RefreshPsi(theta) => Reply::PsiStats(part.refresh_psi(theta)?),
        Request::Grid(theta, axis) => Reply::Grid(part.grid(theta, *axis)?),
    })
}

struct Envelope {
    worker: usize,
    result: Result<Reply>,
}

/// k worker threads, each owning one partition.
struct Pool {
    senders: Vec<Sender<Arc<Request>>>,
    replies: Receiver<Envelope>,
    handles: Vec<JoinHandle<()>>,
}

impl Pool {
    fn spawn(partitions: Vec<Vec<crate::model::Subject>>, delay: &DelayModel, seed: u64) -> Result<Self> {
        let k = partitions.len();
        let (reply_tx, replies) = mpsc::channel();
        let mut senders = Vec::with_capacity(k);
        let mut handles = Vec::with_capacity(k);
        for (worker, subjects) in partitions.into_iter().enumerate() {
            let (tx, rx) = mpsc::channel::<Arc<Request>>();
            let reply_tx = reply_tx.clone();
            let mut pause = WorkerDelay::new(delay, worker, k, subjects.len(), seed);
            let handle = std::thread::Builder::new()
                .name(format!("worker-{worker}"))
                .spawn(move || {
                    let mut part = Partition::new(subjects);
                    while let Ok(req) = rx.recv() {
                        let result = serve(&mut part, &req);
                        pause.pause();
                        if reply_tx.send(Envelope { worker, result }).is_err() {
                            break;
                        }
                    }
                })
                .map_err(Error::Io)?;
            senders.push(tx);
            handles.push(handle);
        }
        Ok(Self { senders, replies, handles })
    }

    fn k(&self) -> usize {
        self.senders.len()
    }

    fn send(&self, worker: usize, req: Arc<Request>) -> Result<()> {
        self.senders[worker]
            .send(req)
            .map_err(|_| Error::Worker(format!("worker {worker} is no longer running")))
    }

    /// Next reply, failing if a worker we are waiting on has died.
    fn receive(&self, awaited: &[bool]) -> Result<Envelope> {
        loop {
            match self.replies.recv_timeout(Duration::from_millis(200)) {
                Ok(env) => return Ok(env),
                Err(RecvTimeoutError::Timeout) => {
                    if let Some(w) = (0..self.k()).find(|&w| awaited[w] && self.handles[w].is_finished()) {
                        return Err(Error::Worker(format!("worker {w} stopped unexpectedly")));
                    }
                }
                Err(RecvTimeoutError::Disconnected) => return Err(Error::Worker("all workers stopped".into())),
            }
        }
    }

    fn try_receive(&self) -> Option<Envelope> {
        self.replies.try_recv().ok()
    }

    /// Full barrier: send `req` to every worker and return replies in worker order.
    fn broadcast(&self, req: Request) -> Result<Vec<Reply>> {
        let req = Arc::new(req);
        for w in 0..self.k() {
            self.send(w, req.clone())?;
        }
        let mut slots: Vec<Option<Reply>> = (0..self.k()).map(|_| None).collect();
        let mut awaited = vec![true; self.k()];
        for _ in 0..self.k() {
            let env = self.receive(&awaited)?;
            awaited[env.worker] = false;
            slots[env.worker] = Some(env.result?);
        }
        Ok(slots.into_iter().map(|r| r.expect("one reply per worker")).collect())
    }
}

impl Drop for Pool {
    fn drop(&mut self) {
        self.senders.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

/// Executes protocol requests either inline (serial engine) or on a pool.
enum Exchange {
    Inline { part: Box<Partition>, delay: WorkerDelay },
    Pool(Pool),
}

impl Exchange {
    fn all(&mut self, req: Request) -> Result<Vec<Reply>> {
        match self {
            Exchange::Inline { part, delay } => {
                let r = serve(part, &req)?;
                delay.pause();
                Ok(vec![r])
            }
            Exchange::Pool(pool) => pool.broadcast(req),
        }
    }
}

fn split_subjects(data: &Dataset, k: usize) -> Result<Vec<Vec<crate::model::Subject>>> {
    let n = data.len();
    if k > n {
        return Err(Error::Config(format!("{k} workers requested for only {n} subjects")));
    }
    Ok((0..k).map(|j| data.subjects[j * n / k..(j + 1) * n / k].to_vec()).collect())
}

fn merge_stats(replies: Vec<Reply>) -> Result<PartitionStats> {
    let mut total: Option<PartitionStats> = None;
    for r in replies {
        let Reply::Stats(s) = r else { return Err(Error::Worker("unexpected reply to an E step".into())) };
        match &mut total {
            Some(t) => t.merge(&s),
            None => total = Some(s),
        }
    }
    total.ok_or_else(|| Error::Worker("no statistics received".into()))
}

fn merge_a(replies: Vec<Reply>, p: usize) -> Result<(DVector<f64>, f64)> {
    let mut s1 = MatrixSum::zeros(p, 1);
    let mut s2 = ExactSum::new();
    for r in replies {
        let Reply::AStats(a1, a2) = r else { return Err(Error::Worker("unexpected reply to a skewness refresh".into())) };
        s1.merge(&a1);
        s2.merge(&a2);
    }
    Ok((s1.vector(), s2.value()))
}

fn merge_psi(replies: Vec<Reply>, p: usize) -> Result<DMatrix<f64>> {
    let mut s = MatrixSum::zeros(p, p);
    for r in replies {
        let Reply::PsiStats(m) = r else { return Err(Error::Worker("unexpected reply to a scale refresh".into())) };
        s.merge(&m);
    }
    Ok(s.value())
}

fn merge_grid(replies: Vec<Reply>) -> Result<Vec<f64>> {
    let mut total: Option<Vec<ExactSum>> = None;
    for r in replies {
        let Reply::Grid(g) = r else { return Err(Error::Worker("unexpected reply to a grid pass".into())) };
        match &mut total {
            Some(t) => t.iter_mut().zip(&g).for_each(|(a, b)| a.merge(b)),
            None => total = Some(g),
        }
    }
    Ok(total.ok_or_else(|| Error::Worker("no grid values received".into()))?.iter().map(ExactSum::value).collect())
}

fn finite_or_abort(theta: &Theta, iteration: u64) -> Result<()> {
    if theta.is_finite() {
        Ok(())
    } else {
        Err(Error::Estimation(format!("non-finite parameter update at iteration {iteration}")))
    }
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    *slot += start.elapsed().as_secs_f64();
    out
}

struct Recorder<'a> {
    data: &'a Dataset,
    cfg: &'a FitConfig,
    result: FitResult,
}

impl<'a> Recorder<'a> {
    fn new(data: &'a Dataset, cfg: &'a FitConfig, theta0: Theta, ridge: bool) -> Result<Self> {
        let loglik_initial = if cfg.trace_loglik { Some(observed_loglik(data, &theta0)?) } else { None };
        Ok(Self {
            data,
            cfg,
            result: FitResult {
                engine: cfg.engine,
                theta_hat: theta0.clone(),
                theta_init: theta0,
                iterations: 0,
                converged: false,
                comm_rounds: 0,
                loglik_initial,
                loglik_trace: Vec::new(),
                step_timings: StepTimings::default(),
                iteration_timings: Vec::new(),
                flags: FitFlags { ridge_init: ridge, ..FitFlags::default() },
                theta_trace: Vec::new(),
            },
        })
    }

    /// Records iterate t+1; returns true when the stopping rule fires.
    fn record(&mut self, next: Theta, timings: StepTimings) -> Result<bool> {
        let r = &mut self.result;
        r.iterations += 1;
        finite_or_abort(&next, r.iterations)?;
        let done = check_convergence(&r.theta_hat, &next, self.cfg.epsilon)?;
        if self.cfg.trace_loglik {
            r.loglik_trace.push(observed_loglik(self.data, &next)?);
        }
        if self.cfg.trace_theta {
            r.theta_trace.push(next.clone());
        }
        r.step_timings.accumulate(&timings);
        r.iteration_timings.push(timings);
        r.theta_hat = next;
        r.converged = done;
        Ok(done || r.iterations >= self.cfg.max_iter)
    }
}

fn with_params(beta: &DMatrix<f64>, a_row: &DVector<f64>, psi: &DMatrix<f64>, nu: f64, dec: DecParams) -> Theta {
    Theta { beta: beta.clone(), a_row: a_row.clone(), psi: psi.clone(), nu, dec }
}

/// Serial (inline) or synchronous parallel (pool) driver: five exchanges per iteration.
fn run_synchronous(data: &Dataset, cfg: &FitConfig, mut exchange: Exchange, counts_rounds: bool) -> Result<FitResult> {
    let (theta0, ridge) = starting_point(data, cfg)?;
    let mut rec = Recorder::new(data, cfg, theta0, ridge)?;
    let p = data.p;
    loop {
        let t = rec.result.theta_hat.clone();
        let mut tm = StepTimings::default();
        let start = Instant::now();
        let stamp = rec.result.iterations;

        let stats = timed(&mut tm.e_step, || {
            merge_stats(exchange.all(Request::EStep { theta: Arc::new(t.clone()), stamp, with_grid: false })?)
        })?;
        let agg = AggregateStats::from_partition(&stats);
        let beta = timed(&mut tm.beta, || update_beta(&agg))?;
        let nu = timed(&mut tm.nu, || update_nu(&agg))?;
        rec.result.flags.nu_clamped += nu.clamped as u64;

        let with_beta = with_params(&beta, &t.a_row, &t.psi, t.nu, t.dec);
        let a_row = timed(&mut tm.a, || {
            let (s_a1, s_a2) = merge_a(exchange.all(Request::RefreshA(Arc::new(with_beta)))?, p)?;
            update_a(&AggregateStats { s_a1, s_a2, ..agg.clone() })
        })?;

        let with_a = with_params(&beta, &a_row, &t.psi, t.nu, t.dec);
        let psi = timed(&mut tm.psi, || {
            let s_psi = merge_psi(exchange.all(Request::RefreshPsi(Arc::new(with_a)))?, p)?;
            update_psi(&AggregateStats { s_psi, ..agg.clone() })
        })?;
        rec.result.flags.psi_projected += psi.projected as u64;

        let partial = with_params(&beta, &a_row, &psi.psi, nu.nu, t.dec);
        let dec = timed(&mut tm.dec, || {
            let shared = Arc::new(partial.clone());
            let rho1 =
                select_rho(&merge_grid(exchange.all(Request::Grid(shared.clone(), GridAxis::Rho1 { rho2: t.dec.rho2 }))?)?)?;
            let rho2 = select_rho(&merge_grid(exchange.all(Request::Grid(shared, GridAxis::Rho2 { rho1 }))?)?)?;
            Ok(DecParams { rho1, rho2 })
        })?;

        if counts_rounds {
            rec.result.comm_rounds += 5;
        }
        tm.total = start.elapsed().as_secs_f64();
        let next = with_params(&beta, &a_row, &psi.psi, nu.nu, dec);
        if rec.record(next, tm)? {
            return Ok(rec.result);
        }
    }
}

pub fn fit_ecme(data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let delay = WorkerDelay::new(&cfg.delay, 0, 1, data.len(), cfg.seed);
    let exchange = Exchange::Inline { part: Box::new(Partition::new(data.subjects.clone())), delay };
    let mut r = run_synchronous(data, cfg, exchange, false)?;
    r.engine = EngineKind::Ecme;
    Ok(r)
}

pub fn fit_pecme(data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let pool = Pool::spawn(split_subjects(data, cfg.workers_k)?, &cfg.delay, cfg.seed)?;
    let mut r = run_synchronous(data, cfg, Exchange::Pool(pool), true)?;
    r.engine = EngineKind::Pecme;
    Ok(r)
}

/// Per-worker bookkeeping held by the asynchronous manager.
struct WorkerSlot {
    cached: Option<PartitionStats>,
    busy: bool,
    last_heard: u64,
}

pub fn fit_adecme(data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let (theta0, ridge) = starting_point(data, cfg)?;
    let pool = Pool::spawn(split_subjects(data, cfg.workers_k)?, &cfg.delay, cfg.seed)?;
    let k = pool.k();
    let mut rec = Recorder::new(data, cfg, theta0, ridge)?;
    rec.result.engine = EngineKind::Adecme;
    let mut slots: Vec<WorkerSlot> =
        (0..k).map(|_| WorkerSlot { cached: None, busy: false, last_heard: 0 }).collect();
    let mut sync_rng = rng_from(cfg.seed, &[stream::SYNC]);

    let absorb = |slots: &mut Vec<WorkerSlot>, env: Envelope, iteration: u64| -> Result<Option<u64>> {
        let slot = &mut slots[env.worker];
        slot.busy = false;
        slot.last_heard = iteration;
        match env.result? {
            Reply::Stats(s) => {
                let stamp = s.stamp;
                if slot.cached.as_ref().is_none_or(|c| c.stamp <= stamp) {
                    slot.cached = Some(s);
                }
                Ok(Some(stamp))
            }
            _ => Err(Error::Worker("unexpected reply in the asynchronous protocol".into())),
        }
    };

    loop {
        let t = rec.result.theta_hat.clone();
        let stamp = rec.result.iterations;
        let iteration = stamp + 1;
        let mut tm = StepTimings::default();
        let start = Instant::now();
        let warmup = stamp == 0;
        let full = warmup || (cfg.zeta > 0.0 && sync_rng.random::<f64>() < cfg.zeta);
        let need = if full { k } else { cfg.wait_count() };
        if full && !warmup {
            rec.result.flags.full_sync_iterations += 1;
        }

        let stats = timed(&mut tm.e_step, || {
            while let Some(env) = pool.try_receive() {
                absorb(&mut slots, env, iteration)?;
            }
            let req = Arc::new(Request::EStep { theta: Arc::new(t.clone()), stamp, with_grid: true });
            for (w, slot) in slots.iter_mut().enumerate() {
                if !slot.busy {
                    pool.send(w, req.clone())?;
                    slot.busy = true;
                }
            }
            let mut fresh = vec![false; k];
            while fresh.iter().filter(|f| **f).count() < need {
                let awaited: Vec<bool> = slots.iter().map(|s| s.busy).collect();
                let env = pool.receive(&awaited)?;
                let w = env.worker;
                if absorb(&mut slots, env, iteration)? == Some(stamp) {
                    fresh[w] = true;
                } else {
                    pool.send(w, req.clone())?;
                    slots[w].busy = true;
                }
            }
            for (w, slot) in slots.iter().enumerate() {
                if iteration - slot.last_heard > WATCHDOG_ITERATIONS {
                    return Err(Error::Worker(format!(
                        "worker {w} silent for more than {WATCHDOG_ITERATIONS} iterations"
                    )));
                }
            }
            let mut total = PartitionStats::empty(data.q, data.p, stamp);
            total.grid = Some(GridSums { rho1: vec![ExactSum::new(); 11], rho2: vec![ExactSum::new(); 11] });
            for slot in &slots {
                let cached = slot.cached.as_ref().ok_or_else(|| Error::Worker("missing warm-up statistics".into()))?;
                let lag = stamp - cached.stamp;
                *rec.result.flags.stale_lag_histogram.entry(lag).or_insert(0) += 1;
                rec.result.flags.max_stale_lag = rec.result.flags.max_stale_lag.max(lag);
                total.merge(cached);
            }
            Ok(total)
        })?;
        rec.result.comm_rounds += 1;

        let agg = AggregateStats::from_partition(&stats);
        let beta = timed(&mut tm.beta, || update_beta(&agg))?;
        let nu = timed(&mut tm.nu, || update_nu(&agg))?;
        rec.result.flags.nu_clamped += nu.clamped as u64;
        let a_row = timed(&mut tm.a, || update_a(&agg))?;
        let psi = timed(&mut tm.psi, || update_psi(&agg))?;
        rec.result.flags.psi_projected += psi.projected as u64;
        let dec = timed(&mut tm.dec, || {
            let grid = stats.grid.as_ref().expect("grid requested").values();
            Ok(DecParams { rho1: select_rho(&grid.rho1_values)?, rho2: select_rho(&grid.rho2_values)? })
        })?;
        tm.total = start.elapsed().as_secs_f64();
        let next = with_params(&beta, &a_row, &psi.psi, nu.nu, dec);
        if rec.record(next, tm)? {
            return Ok(rec.result);
        }
    }
}

pub fn fit(data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    match cfg.engine {
        EngineKind::Ecme => fit_ecme(data, cfg),
        EngineKind::Pecme => fit_pecme(data, cfg),
        EngineKind::Adecme => fit_adecme(data, cfg),
    }
}

/// Outcome of several fits from different starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub best: FitResult,
    pub chosen: usize,
    pub final_logliks: Vec<f64>,
}

/// Runs the configured start plus `restarts − 1` random starts and keeps the
/// fit with the highest final observed log-likelihood.
pub fn fit_with_restarts(data: &Dataset, cfg: &FitConfig, restarts: usize) -> Result<RestartOutcome> {
    let mut best: Option<(FitResult, usize)> = None;
    let mut best_ll = f64::NEG_INFINITY;
    let mut final_logliks = Vec::new();
    for r in 0..restarts.max(1) {
        let run_cfg = if r == 0 {
            cfg.clone()
        } else {
            FitConfig {
                init: Init::Random,
                seed: crate::rng::derive_seed(cfg.seed, &[stream::RESTART, r as u64]),
                ..cfg.clone()
            }
        };
        let res = fit(data, &run_cfg)?;
        let ll = observed_loglik(data, &res.theta_hat)?;
        final_logliks.push(ll);
        if best.is_none() || ll > best_ll {
            best_ll = ll;
            best = Some((res, r));
        }
    }
    let (best, chosen) = best.expect("at least one fit");
    Ok(RestartOutcome { best, chosen, final_logliks })
}
