//! Discrete-event simulator of a multi-queue SSD driven by GPU kernel
//! traces.
//!
//! A run wires together a deterministic event engine ([`engine`]), a
//! timed flash backend ([`flash`]), a page/sector mapping FTL with greedy
//! garbage collection ([`ftl`]), host submission/completion queues
//! ([`host`]) and a trace-driven GPU front end ([`gpu`]). [`sim`] executes
//! one configuration, [`sweep`] runs policy combinations in parallel and
//! [`metrics`] renders CSV and SVG output. [`sampler`] compacts large
//! kernel traces and [`synth`] generates synthetic ones.
//!
//! ```
//! use ssdsim::{run_trace, RunConfig, Trace};
//!
//! let result = run_trace(&RunConfig::default(), &Trace::default()).unwrap();
//! assert_eq!(result.report.sim_end_ns, 0);
//! ```

pub mod config;
pub mod engine;
pub mod flash;
pub mod ftl;
pub mod gpu;
pub mod host;
pub mod metrics;
pub mod sampler;
pub mod sim;
pub mod sweep;
pub mod synth;

pub use config::{ConfigError, RunConfig};
pub use engine::{Engine, SimTime};
pub use flash::{FlashBackend, FlashGeometry, FlashTiming, FlashTransaction, PhysicalLocation};
pub use ftl::{AllocationMode, Ftl, FtlConfig, MappingMode, Scheme};
pub use gpu::{load_trace, KernelDescriptor, SchedPolicy, SchedulerConfig, Trace};
pub use host::{IoOp, IoRequest, QueuePair};
pub use metrics::{MetricsReport, ReportRow};
pub use sim::{run_trace, RunResult, Simulator};
pub use sweep::sweep;

pub type KernelGroup = sampler::KernelGroup<f64>;
pub type SamplerConfig = sampler::SamplerConfig<f64>;
pub type Prediction = sampler::Prediction<f64>;

pub type KernelGroupF32 = sampler::KernelGroup<f32>;
pub type SamplerConfigF32 = sampler::SamplerConfig<f32>;
pub type PredictionF32 = sampler::Prediction<f32>;
