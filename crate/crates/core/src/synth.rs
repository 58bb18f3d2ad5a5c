//! Synthetic kernel traces. Every generator is a pure function of its
//! parameters and seed.
//!
//! | name | kernels | I/O |
//! |---|---|---|
//! | `rand-write-4k` | exec ~U(8, 12) us | `ios` 4 KB writes at random aligned offsets |
//! | `rand-read-4k` | exec ~U(8, 12) us | `ios` 4 KB reads at random aligned offsets |
//! | `seq` | exec 20 us | `ios` 128 KB sequential writes, wrapping at the span |
//! | `backprop` | two alternating large-grid kernels, exec ~N(50 us, 5%) | 16 KB reads then writes over a slowly advancing local window |
//! | `hotspot` | small-grid kernel, exec ~N(20 us, 5%) | every 8th kernel bursts 32 4 KB reads in the hottest 10% of the span |
//! | `lavamd` | exec lognormal around 80 us | 70/30 read/write mix, sizes 4 to 64 KB |
//! | `bimodal` | exec 1 us or 100 us (2% jitter), one name | one 4 KB read |
//! | `grouped-normal` | `groups` kernel shapes, exec ~N(mu_g, (cv_g mu_g)^2) | none |
//!
//! With `streams > 1` the kernels are dealt round-robin to that many
//! workloads so scheduling policies have something to choose between.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use thiserror::Error;

use crate::gpu::{KernelDescriptor, KernelIo};
use crate::host::IoOp;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SynthError {
    #[error("unknown generator `{0}`")]
    UnknownGenerator(String),
    #[error("span of {0} bytes is too small")]
    SpanTooSmall(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    RandWrite4k,
    RandRead4k,
    Sequential,
    Backprop,
    Hotspot,
    Lavamd,
    Bimodal,
    GroupedNormal,
}

impl Generator {
    pub const ALL: [Generator; 8] = [
        Generator::RandWrite4k,
        Generator::RandRead4k,
        Generator::Sequential,
        Generator::Backprop,
        Generator::Hotspot,
        Generator::Lavamd,
        Generator::Bimodal,
        Generator::GroupedNormal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Generator::RandWrite4k => "rand-write-4k",
            Generator::RandRead4k => "rand-read-4k",
            Generator::Sequential => "seq",
            Generator::Backprop => "backprop",
            Generator::Hotspot => "hotspot",
            Generator::Lavamd => "lavamd",
            Generator::Bimodal => "bimodal",
            Generator::GroupedNormal => "grouped-normal",
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Generator {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Generator::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| SynthError::UnknownGenerator(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub kernels: usize,
    pub seed: u64,
    /// Workload label; defaults to the generator name.
    pub workload: Option<String>,
    /// Addressable byte range for I/O offsets.
    pub span_bytes: u64,
    pub ios_per_kernel: usize,
    /// Number of kernel shapes for `grouped-normal`.
    pub groups: usize,
    /// Fixed coefficient of variation for `grouped-normal` groups; drawn
    /// from [0.05, 0.3] when unset.
    pub cv: Option<f64>,
    /// Concurrent workloads in the trace. Kernel `k` goes to workload
    /// `<name>-s<k mod streams>` when this exceeds 1.
    pub streams: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            kernels: 1_000,
            seed: 0,
            workload: None,
            span_bytes: 1 << 30,
            ios_per_kernel: 1,
            groups: 20,
            cv: None,
            streams: 1,
        }
    }
}

/// Per-group parameters of the `grouped-normal` generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupShape {
    pub grid: u32,
    pub mean_ns: f64,
    pub std_ns: f64,
}

const KB4: u64 = 4096;

struct Ctx {
    rng: ChaCha8Rng,
    workload: Arc<str>,
    span_units: u64,
}

impl Ctx {
    fn offset(&mut self, len: u64) -> u64 {
        let units = len / KB4;
        self.rng.random_range(0..=self.span_units - units) * KB4
    }

    fn kernel(&self, id: usize, name: &Arc<str>, grid: u32, block: u32, exec_ns: u64, ios: Vec<KernelIo>) -> KernelDescriptor {
        KernelDescriptor {
            workload: self.workload.clone(),
            kernel_id: id as u64,
            name: name.clone(),
            grid_blocks: grid,
            block_threads: block,
            exec_ns,
            ios,
            replicas: 1,
        }
    }
}

fn io(delta_ns: u64, op: IoOp, offset_bytes: u64, length_bytes: u64) -> KernelIo {
    KernelIo { delta_ns, op, offset_bytes, length_bytes }
}

fn normal_ns(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> u64 {
    let d = Normal::new(mean, std).expect("finite normal parameters");
    d.sample(rng).round().max(1.0) as u64
}

/// Group shapes used by `grouped-normal` for the given parameters.
pub fn group_shapes(params: &SynthParams) -> Vec<GroupShape> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x0005_eed0_f6a0_u64);
    (0..params.groups)
        .map(|g| {
            let mean_ns = 10f64.powf(rng.random_range(4.0..6.0)).round();
            let cv = params.cv.unwrap_or_else(|| rng.random_range(0.05..0.3));
            GroupShape {
                grid: 32 << (g % 6),
                mean_ns,
                std_ns: cv * mean_ns,
            }
        })
        .collect()
}

pub fn generate(generator: Generator, params: &SynthParams) -> Result<Vec<KernelDescriptor>, SynthError> {
    if params.span_bytes < 128 * 1024 {
        return Err(SynthError::SpanTooSmall(params.span_bytes));
    }
    let mut c = Ctx {
        rng: ChaCha8Rng::seed_from_u64(params.seed),
        workload: Arc::from(params.workload.as_deref().unwrap_or(generator.as_str())),
        span_units: params.span_bytes / KB4,
    };
    let n = params.kernels;
    let mut out = Vec::with_capacity(n);
    match generator {
        Generator::RandWrite4k | Generator::RandRead4k => {
            let (op, name) = if generator == Generator::RandWrite4k {
                (IoOp::Write, Arc::from("rand_write"))
            } else {
                (IoOp::Read, Arc::from("rand_read"))
            };
            for k in 0..n {
                let exec = c.rng.random_range(8_000..=12_000);
                let ios = (0..params.ios_per_kernel)
                    .map(|_| io(0, op, c.offset(KB4), KB4))
                    .collect();
                out.push(c.kernel(k, &name, 256, 256, exec, ios));
            }
        }
        Generator::Sequential => {
            let name: Arc<str> = Arc::from("stream");
            let len = 128 * 1024;
            let wrap = params.span_bytes / len * len;
            let mut cursor = 0;
            for k in 0..n {
                let ios = (0..params.ios_per_kernel)
                    .map(|i| {
                        let o = io(i as u64 * 1_000, IoOp::Write, cursor, len);
                        cursor = (cursor + len) % wrap;
                        o
                    })
                    .collect();
                out.push(c.kernel(k, &name, 512, 256, 20_000, ios));
            }
        }
        Generator::Backprop => {
            let names: [Arc<str>; 2] = [Arc::from("layerforward"), Arc::from("adjust_weights")];
            let chunk = 16 * 1024;
            let window = 64 * chunk;
            let mut base = 0;
            for k in 0..n {
                let exec = normal_ns(&mut c.rng, 50_000.0, 2_500.0);
                let op = if k % 2 == 0 { IoOp::Read } else { IoOp::Write };
                let ios = (0..params.ios_per_kernel)
                    .map(|i| {
                        let slot = c.rng.random_range(0..64u64);
                        io(i as u64 * 2_000, op, base + slot * chunk, chunk)
                    })
                    .collect();
                if k % 2 == 1 && k % 16 == 15 {
                    base = (base + window) % (params.span_bytes / window * window).max(window);
                }
                out.push(c.kernel(k, &names[k % 2], 4096, 256, exec, ios));
            }
        }
        Generator::Hotspot => {
            let name: Arc<str> = Arc::from("calculate_temp");
            let hot_units = (c.span_units / 10).max(1);
            for k in 0..n {
                let exec = normal_ns(&mut c.rng, 20_000.0, 1_000.0);
                let ios = if k % 8 == 7 {
                    (0..32)
                        .map(|i| io(i * 100, IoOp::Read, c.rng.random_range(0..hot_units) * KB4, KB4))
                        .collect()
                } else {
                    Vec::new()
                };
                out.push(c.kernel(k, &name, 64, 256, exec, ios));
            }
        }
        Generator::Lavamd => {
            let name: Arc<str> = Arc::from("kernel_gpu_cuda");
            let exec_dist = LogNormal::new(80_000f64.ln(), 0.4).expect("valid lognormal");
            for k in 0..n {
                let exec = exec_dist.sample(&mut c.rng).round().max(1.0) as u64;
                let ios = (0..params.ios_per_kernel)
                    .map(|i| {
                        let len = KB4 << c.rng.random_range(0..5u32);
                        let op = if c.rng.random_bool(0.7) { IoOp::Read } else { IoOp::Write };
                        let off = c.offset(len);
                        io(i as u64 * 1_500, op, off, len)
                    })
                    .collect();
                out.push(c.kernel(k, &name, 1000, 128, exec, ios));
            }
        }
        Generator::Bimodal => {
            let name: Arc<str> = Arc::from("bimodal");
            for k in 0..n {
                let mean = if c.rng.random_bool(0.5) { 1_000.0 } else { 100_000.0 };
                let exec = normal_ns(&mut c.rng, mean, mean * 0.02);
                let off = c.offset(KB4);
                out.push(c.kernel(k, &name, 128, 128, exec, vec![io(0, IoOp::Read, off, KB4)]));
            }
        }
        Generator::GroupedNormal => {
            let shapes = group_shapes(params);
            let names: Vec<Arc<str>> = (0..shapes.len()).map(|g| Arc::from(format!("g{g}"))).collect();
            for k in 0..n {
                let g = k % shapes.len().max(1);
                let s = shapes[g];
                let exec = normal_ns(&mut c.rng, s.mean_ns, s.std_ns);
                out.push(c.kernel(k, &names[g], s.grid, 256, exec, Vec::new()));
            }
        }
    }
    if params.streams > 1 {
        let names: Vec<Arc<str>> = (0..params.streams)
            .map(|s| Arc::from(format!("{}-s{s}", c.workload)))
            .collect();
        for (k, kernel) in out.iter_mut().enumerate() {
            kernel.workload = names[k % params.streams].clone();
        }
    }
    Ok(out)
}
