//! Trace-driven GPU front end: kernel trace records, the trace file format
//! and the kernel scheduling policies.
//!
//! A trace file holds one JSON object per line:
//!
//! ```text
//! {"workload":"bert","kernel":0,"name":"gemm","grid":128,"block":256,"exec_ns":12000,
//!  "ios":[{"delta_ns":0,"op":"R","offset":4096,"len":4096}]}
//! ```
//!
//! Compacted traces additionally carry group header lines
//! `{"group":3,"n":1000,"m":10}`; the kernel records that follow a header
//! belong to that group and are replayed so the group's total is `n`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::host::IoOp;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: field `{field}` is negative")]
    NegativeField { line: usize, field: &'static str },
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelIo {
    pub delta_ns: u64,
    pub op: IoOp,
    pub offset_bytes: u64,
    pub length_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelDescriptor {
    pub workload: Arc<str>,
    pub kernel_id: u64,
    pub name: Arc<str>,
    pub grid_blocks: u32,
    pub block_threads: u32,
    pub exec_ns: u64,
    pub ios: Vec<KernelIo>,
    /// How many times the record is replayed (1 unless the trace was
    /// compacted).
    pub replicas: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IoRecord {
    delta_ns: i64,
    op: String,
    offset: i64,
    len: i64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelRecord {
    workload: String,
    kernel: i64,
    name: String,
    grid: i64,
    block: i64,
    exec_ns: i64,
    ios: Vec<IoRecord>,
}

/// Replication header of a compacted trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupHeader {
    pub group: u64,
    pub n: u64,
    pub m: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    /// Kernel records in file order.
    pub kernels: Vec<KernelDescriptor>,
}

impl Trace {
    /// Workload names in first-appearance order with the indices of their
    /// kernels in file order.
    pub fn workloads(&self) -> Vec<(Arc<str>, Vec<usize>)> {
        let mut out: Vec<(Arc<str>, Vec<usize>)> = Vec::new();
        for (i, k) in self.kernels.iter().enumerate() {
            match out.iter_mut().find(|(w, _)| *w == k.workload) {
                Some((_, list)) => list.push(i),
                None => out.push((k.workload.clone(), vec![i])),
            }
        }
        out
    }

    /// Kernel count after replication.
    pub fn replayed_kernels(&self) -> u64 {
        self.kernels.iter().map(|k| k.replicas).sum()
    }
}

fn non_negative(v: i64, line: usize, field: &'static str) -> Result<u64, TraceError> {
    u64::try_from(v).map_err(|_| TraceError::NegativeField { line, field })
}

fn small(v: i64, line: usize, field: &'static str) -> Result<u32, TraceError> {
    let v = non_negative(v, line, field)?;
    u32::try_from(v).map_err(|_| TraceError::Parse {
        line,
        message: format!("field `{field}` is too large"),
    })
}

fn convert(rec: KernelRecord, line: usize, names: &mut BTreeMap<String, Arc<str>>) -> Result<KernelDescriptor, TraceError> {
    let mut intern = |s: String| -> Arc<str> {
        names.entry(s.clone()).or_insert_with(|| Arc::from(s)).clone()
    };
    let grid_blocks = small(rec.grid, line, "grid")?;
    if grid_blocks == 0 {
        return Err(TraceError::Parse {
            line,
            message: "grid must be at least 1".into(),
        });
    }
    let mut ios = Vec::with_capacity(rec.ios.len());
    for io in rec.ios {
        let op = match io.op.as_str() {
            "R" => IoOp::Read,
            "W" => IoOp::Write,
            other => {
                return Err(TraceError::Parse {
                    line,
                    message: format!("unknown op `{other}`"),
                })
            }
        };
        ios.push(KernelIo {
            delta_ns: non_negative(io.delta_ns, line, "delta_ns")?,
            op,
            offset_bytes: non_negative(io.offset, line, "offset")?,
            length_bytes: non_negative(io.len, line, "len")?,
        });
    }
    Ok(KernelDescriptor {
        workload: intern(rec.workload),
        kernel_id: non_negative(rec.kernel, line, "kernel")?,
        name: intern(rec.name),
        grid_blocks,
        block_threads: small(rec.block, line, "block")?,
        exec_ns: non_negative(rec.exec_ns, line, "exec_ns")?,
        ios,
        replicas: 1,
    })
}

/// Reads a trace (plain or compacted).
pub fn load_trace<R: BufRead>(source: R) -> Result<Trace, TraceError> {
    let mut kernels = Vec::new();
    let mut names = BTreeMap::new();
    let mut current: Option<GroupHeader> = None;
    let mut groups: BTreeMap<u64, (GroupHeader, Vec<usize>)> = BTreeMap::new();
    let mut last_line = 0;
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let is_header = value.get("group").is_some();
        if is_header {
            let h: GroupHeader = serde_json::from_value(value).map_err(|e| TraceError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if h.m == 0 || h.m > h.n {
                return Err(TraceError::Parse {
                    line: line_no,
                    message: format!("group {} needs 1 <= m <= n", h.group),
                });
            }
            let entry = groups.entry(h.group).or_insert((h, Vec::new()));
            if entry.0 != h {
                return Err(TraceError::Parse {
                    line: line_no,
                    message: format!("conflicting headers for group {}", h.group),
                });
            }
            current = Some(h);
        } else {
            let rec: KernelRecord = serde_json::from_value(value).map_err(|e| TraceError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let desc = convert(rec, line_no, &mut names)?;
            if let Some(h) = current {
                groups.get_mut(&h.group).expect("header registered").1.push(kernels.len());
            }
            kernels.push(desc);
        }
    }
    for (header, members) in groups.values() {
        if members.len() as u64 != header.m {
            return Err(TraceError::Parse {
                line: last_line,
                message: format!(
                    "group {} declares m={} but has {} records",
                    header.group,
                    header.m,
                    members.len()
                ),
            });
        }
        // largest remainder: every fractional part is equal, so the first
        // `n mod m` records take the extra replica
        let base = header.n / header.m;
        let extra = header.n % header.m;
        for (rank, &k) in members.iter().enumerate() {
            kernels[k].replicas = base + u64::from((rank as u64) < extra);
        }
    }
    Ok(Trace { kernels })
}

/// Serializes one kernel record as a trace line (without newline).
pub fn format_kernel(k: &KernelDescriptor) -> String {
    let rec = KernelRecord {
        workload: k.workload.to_string(),
        kernel: k.kernel_id as i64,
        name: k.name.to_string(),
        grid: i64::from(k.grid_blocks),
        block: i64::from(k.block_threads),
        exec_ns: k.exec_ns as i64,
        ios: k
            .ios
            .iter()
            .map(|io| IoRecord {
                delta_ns: io.delta_ns as i64,
                op: io.op.to_string(),
                offset: io.offset_bytes as i64,
                len: io.length_bytes as i64,
            })
            .collect(),
    };
    serde_json::to_string(&rec).expect("kernel record serializes")
}

pub fn format_header(h: &GroupHeader) -> String {
    serde_json::to_string(h).expect("header serializes")
}

pub fn write_trace<'a, W, I>(sink: &mut W, kernels: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a KernelDescriptor>,
{
    for k in kernels {
        writeln!(sink, "{}", format_kernel(k))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SchedPolicy {
    RoundRobin,
    LargeChunk,
    Auto,
}

impl SchedPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            SchedPolicy::RoundRobin => "rr",
            SchedPolicy::LargeChunk => "large_chunk",
            SchedPolicy::Auto => "auto",
        }
    }
}

impl fmt::Display for SchedPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchedPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rr" | "round_robin" => Ok(SchedPolicy::RoundRobin),
            "large_chunk" | "lc" => Ok(SchedPolicy::LargeChunk),
            "auto" => Ok(SchedPolicy::Auto),
            other => Err(format!("unknown policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulerConfig {
    pub policy: SchedPolicy,
    /// Block stride used by the large-chunk trigger.
    pub block_stride: u32,
    /// Core count used by the trigger; also the number of kernel slots.
    pub core_count: u32,
    /// Kernels taken from one workload before rotating under large chunk.
    pub chunk_len: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            policy: SchedPolicy::RoundRobin,
            block_stride: 2,
            core_count: 16,
            chunk_len: 32,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.block_stride == 0 || self.core_count == 0 || self.chunk_len == 0 {
            return Err("block_stride, core_count and chunk_len must be >= 1".into());
        }
        Ok(())
    }
}

/// The policy that applies to a kernel with `n_blocks` thread blocks.
pub fn select_policy(n_blocks: u32, cfg: &SchedulerConfig) -> SchedPolicy {
    match cfg.policy {
        SchedPolicy::Auto => {
            if u64::from(n_blocks) < u64::from(cfg.block_stride) * u64::from(cfg.core_count) {
                SchedPolicy::LargeChunk
            } else {
                SchedPolicy::RoundRobin
            }
        }
        explicit => explicit,
    }
}

/// Chooses which workload supplies the next kernel.
#[derive(Debug)]
pub struct KernelScheduler<T> {
    cfg: SchedulerConfig,
    queues: Vec<VecDeque<(u32, T)>>,
    current: Option<usize>,
    served_in_chunk: u32,
}

impl<T> KernelScheduler<T> {
    /// `workloads[w]` lists `(grid_blocks, item)` in issue order.
    pub fn new(cfg: SchedulerConfig, workloads: Vec<Vec<(u32, T)>>) -> Self {
        KernelScheduler {
            cfg,
            queues: workloads.into_iter().map(VecDeque::from).collect(),
            current: None,
            served_in_chunk: 0,
        }
    }

    pub fn is_exhausted(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    pub fn remaining(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    /// Next kernel and the workload it came from, or `None` when every
    /// workload is exhausted.
    pub fn next_kernel(&mut self) -> Option<(usize, T)> {
        if let Some(w) = self.current {
            if let Some(&(grid, _)) = self.queues[w].front() {
                let stay = select_policy(grid, &self.cfg) == SchedPolicy::LargeChunk
                    && self.served_in_chunk < self.cfg.chunk_len;
                if stay {
                    self.served_in_chunk += 1;
                    return self.queues[w].pop_front().map(|(_, t)| (w, t));
                }
            }
        }
        let n = self.queues.len();
        let start = self.current.map_or(0, |w| w + 1);
        let w = (0..n)
            .map(|i| (start + i) % n)
            .find(|&w| !self.queues[w].is_empty())?;
        self.current = Some(w);
        self.served_in_chunk = 1;
        self.queues[w].pop_front().map(|(_, t)| (w, t))
    }
}
