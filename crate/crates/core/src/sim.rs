//! One simulation run: GPU kernels issue I/O through host queues into the
//! FTL and the timed flash backend.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::engine::{Engine, SimTime};
use crate::flash::{FlashBackend, FlashError, FlashTransaction, RequestId, TxnCause, TxnKind};
use crate::ftl::{Ftl, FtlError, FtlStats, ReadPiece, TxnChain, WriteFragment};
use crate::gpu::{KernelDescriptor, KernelScheduler, Trace};
use crate::host::{split_request, HostError, IoOp, IoRequest, QueuePair};
use crate::metrics::{MetricsCollector, MetricsReport};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ftl(#[from] FtlError),
    #[error(transparent)]
    Flash(#[from] FlashError),
    #[error("kernel {kernel}: {source}")]
    Host {
        kernel: u64,
        #[source]
        source: HostError,
    },
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Dispatch,
    IssueIo { run: usize, io: usize },
    ComputeDone { run: usize },
    TxnDone { txn: u64 },
    FlushWrites,
}

#[derive(Debug)]
struct KernelRun {
    kernel: usize,
    workload: usize,
    pending_ios: usize,
    compute_done: bool,
}

#[derive(Debug)]
struct RequestState {
    run: usize,
    remaining: usize,
}

#[derive(Debug)]
struct ChainState {
    stages: VecDeque<Vec<FlashTransaction>>,
    remaining: usize,
}

#[derive(Debug)]
struct InflightTxn {
    txn: FlashTransaction,
    chain: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub report: MetricsReport,
    pub ftl: FtlStats,
    /// Kernels executed, counting replicas.
    pub kernels: u64,
    pub requests: u64,
}

/// A single run over one or more workloads.
pub struct Simulator<'t> {
    kernels: &'t [KernelDescriptor],
    engine: Engine<Event>,
    flash: FlashBackend,
    ftl: Ftl,
    queues: Vec<QueuePair>,
    backlog: Vec<VecDeque<IoRequest>>,
    queue_of_workload: Vec<usize>,
    scheduler: KernelScheduler<usize>,
    free_slots: u32,
    runs: Vec<KernelRun>,
    requests: HashMap<RequestId, RequestState>,
    chains: HashMap<u64, ChainState>,
    inflight: HashMap<u64, InflightTxn>,
    write_batch: Vec<WriteFragment>,
    batch_origins: Vec<RequestId>,
    flush_scheduled: bool,
    next_request: u64,
    next_chain: u64,
    next_txn: u64,
    metrics: MetricsCollector,
    sector_bytes: u64,
    precondition: bool,
}

impl<'t> Simulator<'t> {
    pub fn new(cfg: &RunConfig, trace: &'t Trace) -> Result<Self, SimError> {
        cfg.validate()?;
        let geometry = cfg.geometry;
        let flash = FlashBackend::new(geometry, cfg.timing)?;
        let ftl = Ftl::new(geometry, cfg.ftl_config())?;
        let workloads = trace.workloads();
        let queue_count = if cfg.queue_count == 0 {
            workloads.len().max(1)
        } else {
            cfg.queue_count as usize
        };
        let queues = (0..queue_count)
            .map(|q| QueuePair::new(q as u32, cfg.queue_depth, geometry.sector_bytes))
            .collect();
        let per_workload = workloads
            .iter()
            .map(|(_, ids)| {
                ids.iter()
                    .flat_map(|&k| {
                        let grid = trace.kernels[k].grid_blocks;
                        std::iter::repeat_n((grid, k), trace.kernels[k].replicas as usize)
                    })
                    .collect()
            })
            .collect();
        let mut workload_of = vec![0; trace.kernels.len()];
        for (w, (_, ids)) in workloads.iter().enumerate() {
            for &k in ids {
                workload_of[k] = w;
            }
        }
        Ok(Simulator {
            kernels: &trace.kernels,
            engine: Engine::new(),
            flash,
            ftl,
            queues,
            backlog: vec![VecDeque::new(); queue_count],
            queue_of_workload: (0..workloads.len()).map(|w| w % queue_count).collect(),
            scheduler: KernelScheduler::new(cfg.scheduler, per_workload),
            free_slots: cfg.scheduler.core_count,
            runs: Vec::new(),
            requests: HashMap::new(),
            chains: HashMap::new(),
            inflight: HashMap::new(),
            write_batch: Vec::new(),
            batch_origins: Vec::new(),
            flush_scheduled: false,
            next_request: 0,
            next_chain: 0,
            next_txn: 0,
            metrics: MetricsCollector::new(),
            sector_bytes: u64::from(geometry.sector_bytes),
            precondition: true,
        })
    }

    /// Whether data read by the trace is written before the run starts
    /// (untimed). On by default.
    pub fn with_precondition(mut self, on: bool) -> Self {
        self.precondition = on;
        self
    }

    pub fn ftl(&self) -> &Ftl {
        &self.ftl
    }

    /// Writes every read target that is not yet mapped, in trace order, one
    /// request per flush. No simulated time passes.
    fn precondition_reads(&mut self) -> Result<(), SimError> {
        let geometry = *self.ftl.geometry();
        for k in self.kernels {
            for io in k.ios.iter().filter(|io| io.op == IoOp::Read) {
                let frags = split_request(io.offset_bytes, io.length_bytes, &geometry)
                    .map_err(|source| SimError::Host { kernel: k.kernel_id, source })?;
                let mut missing = false;
                for f in &frags {
                    let pieces = self.ftl.translate_read(f.lpn, f.first_sector, f.sector_count)?;
                    missing |= pieces.iter().any(|p| matches!(p, ReadPiece::Unmapped { .. }));
                }
                if missing {
                    let batch: Vec<_> = frags
                        .iter()
                        .map(|f| WriteFragment::new(f.lpn, f.first_sector, f.sector_count))
                        .collect();
                    self.ftl.allocate_write(&batch)?;
                    self.ftl.flush();
                }
            }
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<RunResult, SimError> {
        if self.precondition {
            self.precondition_reads()?;
        }
        self.engine.schedule(SimTime::ZERO, Event::Dispatch).expect("schedule at start");
        while let Some((_, _, event)) = self.engine.pop() {
            self.handle(event)?;
        }
        let sim_end = self.engine.now().ns();
        debug_assert!(self.requests.is_empty() && self.inflight.is_empty());
        let report = self.metrics.report(sim_end, self.flash.plane_busy_ns().to_vec());
        Ok(RunResult {
            report,
            ftl: self.ftl.stats(),
            kernels: self.runs.len() as u64,
            requests: self.next_request,
        })
    }

    fn handle(&mut self, event: Event) -> Result<(), SimError> {
        match event {
            Event::Dispatch => self.dispatch(),
            Event::IssueIo { run, io } => self.issue_io(run, io),
            Event::ComputeDone { run } => {
                self.runs[run].compute_done = true;
                self.maybe_finish_kernel(run);
                Ok(())
            }
            Event::TxnDone { txn } => self.txn_done(txn),
            Event::FlushWrites => self.flush_writes(),
        }
    }

    fn dispatch(&mut self) -> Result<(), SimError> {
        let now = self.engine.now();
        while self.free_slots > 0 {
            let Some((workload, kernel)) = self.scheduler.next_kernel() else {
                break;
            };
            self.free_slots -= 1;
            let k = &self.kernels[kernel];
            let run = self.runs.len();
            self.runs.push(KernelRun {
                kernel,
                workload,
                pending_ios: k.ios.len(),
                compute_done: false,
            });
            for (i, io) in k.ios.iter().enumerate() {
                self.engine.schedule_in(io.delta_ns, Event::IssueIo { run, io: i });
            }
            self.engine
                .schedule(now + k.exec_ns, Event::ComputeDone { run })
                .expect("future event");
        }
        Ok(())
    }

    fn maybe_finish_kernel(&mut self, run: usize) {
        let r = &self.runs[run];
        if r.compute_done && r.pending_ios == 0 {
            self.free_slots += 1;
            self.engine.schedule_in(0, Event::Dispatch);
        }
    }

    fn issue_io(&mut self, run: usize, io: usize) -> Result<(), SimError> {
        let r = &self.runs[run];
        let k = &self.kernels[r.kernel];
        let spec = k.ios[io];
        let queue = self.queue_of_workload[r.workload];
        let id = self.next_request;
        self.next_request += 1;
        let req = IoRequest::new(id, queue as u32, spec.op, spec.offset_bytes, spec.length_bytes);
        self.requests.insert(req.id, RequestState { run, remaining: 0 });
        if self.queues[queue].is_full() {
            self.backlog[queue].push_back(req);
            Ok(())
        } else {
            self.submit(req)
        }
    }

    fn kernel_of(&self, id: RequestId) -> u64 {
        self.requests
            .get(&id)
            .map_or(0, |s| self.kernels[self.runs[s.run].kernel].kernel_id)
    }

    fn submit(&mut self, req: IoRequest) -> Result<(), SimError> {
        let now = self.engine.now();
        let id = req.id;
        let (queue, op, offset, length) = (req.queue_id as usize, req.op, req.offset_bytes, req.length_bytes);
        self.queues[queue]
            .enqueue(req, now)
            .map_err(|source| SimError::Host { kernel: self.kernel_of(id), source })?;
        let frags = split_request(offset, length, self.ftl.geometry())
            .map_err(|source| SimError::Host { kernel: self.kernel_of(id), source })?;
        match op {
            IoOp::Read => {
                let mut txns = Vec::new();
                for f in frags {
                    for piece in self.ftl.translate_read(f.lpn, f.first_sector, f.sector_count)? {
                        match piece {
                            ReadPiece::Flash { location, sectors } => txns.push(
                                FlashTransaction::new(TxnKind::Read, location, sectors, TxnCause::HostRead)
                                    .with_origins(vec![id]),
                            ),
                            ReadPiece::Unmapped { sectors } => self.metrics.record_unmapped(u64::from(sectors)),
                        }
                    }
                }
                if txns.is_empty() {
                    self.complete_request(id)?;
                } else {
                    self.requests.get_mut(&id).expect("tracked").remaining = txns.len();
                    for txn in txns {
                        self.start_chain(TxnChain { stages: vec![vec![txn]] })?;
                    }
                }
            }
            IoOp::Write => {
                self.write_batch.extend(
                    frags
                        .iter()
                        .map(|f| WriteFragment::new(f.lpn, f.first_sector, f.sector_count).with_origin(id)),
                );
                self.batch_origins.push(id);
                if !self.flush_scheduled {
                    self.flush_scheduled = true;
                    self.engine.schedule_in(0, Event::FlushWrites);
                }
            }
        }
        Ok(())
    }

    /// Hands the writes gathered during this tick to the FTL as one batch.
    fn flush_writes(&mut self) -> Result<(), SimError> {
        self.flush_scheduled = false;
        let batch = std::mem::take(&mut self.write_batch);
        let origins = std::mem::take(&mut self.batch_origins);
        let mut chains = self.ftl.allocate_write(&batch)?;
        chains.extend(self.ftl.flush());
        for chain in &mut chains {
            if chain.is_gc() {
                // collection that made room for this batch delays it
                if let Some(erase) = chain.stages.last_mut().and_then(|s| s.last_mut()) {
                    erase.origins = origins.clone();
                }
            }
            for txn in chain.transactions() {
                for o in &txn.origins {
                    if let Some(state) = self.requests.get_mut(o) {
                        state.remaining += 1;
                    }
                }
            }
        }
        for chain in chains {
            self.start_chain(chain)?;
        }
        for id in origins {
            if self.requests.get(&id).is_some_and(|s| s.remaining == 0) {
                self.complete_request(id)?;
            }
        }
        Ok(())
    }

    fn start_chain(&mut self, chain: TxnChain) -> Result<(), SimError> {
        let key = self.next_chain;
        self.next_chain += 1;
        self.chains.insert(
            key,
            ChainState {
                stages: chain.stages.into(),
                remaining: 0,
            },
        );
        self.submit_next_stage(key)
    }

    fn submit_next_stage(&mut self, key: u64) -> Result<(), SimError> {
        let now = self.engine.now();
        let state = self.chains.get_mut(&key).expect("chain tracked");
        let Some(stage) = state.stages.pop_front() else {
            self.chains.remove(&key);
            return Ok(());
        };
        state.remaining = stage.len();
        for mut txn in stage {
            let window = self.flash.submit(&mut txn, now)?;
            let id = self.next_txn;
            self.next_txn += 1;
            self.engine
                .schedule(window.complete, Event::TxnDone { txn: id })
                .expect("completion is not in the past");
            self.inflight.insert(id, InflightTxn { txn, chain: key });
        }
        Ok(())
    }

    fn txn_done(&mut self, id: u64) -> Result<(), SimError> {
        let InflightTxn { txn, chain } = self.inflight.remove(&id).expect("txn tracked");
        self.metrics.record_txn(&txn);
        for o in &txn.origins {
            let done = match self.requests.get_mut(o) {
                Some(state) => {
                    state.remaining -= 1;
                    state.remaining == 0
                }
                None => false,
            };
            if done {
                self.complete_request(*o)?;
            }
        }
        let state = self.chains.get_mut(&chain).expect("chain tracked");
        state.remaining -= 1;
        if state.remaining == 0 {
            self.submit_next_stage(chain)?;
        }
        Ok(())
    }

    fn complete_request(&mut self, id: RequestId) -> Result<(), SimError> {
        let now = self.engine.now();
        let state = self.requests.remove(&id).expect("request tracked");
        let queue = self.queue_of_workload[self.runs[state.run].workload];
        let kernel = self.kernels[self.runs[state.run].kernel].kernel_id;
        self.queues[queue]
            .complete(id, now)
            .map_err(|source| SimError::Host { kernel, source })?;
        for done in self.queues[queue].poll_completions() {
            self.metrics.record(&done, self.sector_bytes);
        }
        self.runs[state.run].pending_ios -= 1;
        self.maybe_finish_kernel(state.run);
        while !self.queues[queue].is_full() {
            let Some(next) = self.backlog[queue].pop_front() else {
                break;
            };
            self.submit(next)?;
        }
        Ok(())
    }
}

/// Builds and runs one simulation.
pub fn run_trace(cfg: &RunConfig, trace: &Trace) -> Result<RunResult, SimError> {
    Simulator::new(cfg, trace)?.run()
}
