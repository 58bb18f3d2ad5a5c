use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ssdsim::gpu::{load_trace, write_trace, SchedPolicy, Trace};
use ssdsim::metrics::render_all;
use ssdsim::sampler::{emit_sampled_trace, min_samples, predict_total, sample_trace};
use ssdsim::sweep::{run_row, sweep};
use ssdsim::synth::{generate, Generator, SynthParams};
use ssdsim::{RunConfig, SamplerConfig, Scheme};

#[derive(Parser)]
#[command(name = "ssdsim", version, about = "GPU-trace-driven multi-queue SSD simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate all traces together under one configuration.
    Run(SimArgs),
    /// Simulate each trace under every policy and scheme combination.
    Sweep {
        #[command(flatten)]
        sim: SimArgs,
        /// Comma-separated scheduling policies.
        #[arg(long, default_value = "rr,large_chunk", value_delimiter = ',')]
        policies: Vec<SchedPolicy>,
        /// Comma-separated allocation schemes.
        #[arg(long, default_value = "cwdp,cdwp,wcdp", value_delimiter = ',')]
        schemes: Vec<Scheme>,
    },
    /// Write a synthetic trace.
    Synth {
        /// Generator: rand-write-4k, rand-read-4k, seq, backprop, hotspot,
        /// lavamd, bimodal, grouped-normal.
        #[arg(long)]
        kind: Generator,
        #[arg(long, default_value_t = 1000)]
        kernels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workload: Option<String>,
        /// Addressable bytes for I/O offsets.
        #[arg(long, default_value_t = 1 << 30)]
        span: u64,
        /// I/O requests per kernel (rand-*, seq, backprop, lavamd).
        #[arg(long, default_value_t = 1)]
        ios: usize,
        /// Kernel shapes for grouped-normal.
        #[arg(long, default_value_t = 20)]
        groups: usize,
        /// Fixed coefficient of variation for grouped-normal.
        #[arg(long)]
        cv: Option<f64>,
        /// Deal kernels round-robin over this many workloads.
        #[arg(long, default_value_t = 1)]
        streams: usize,
    },
    /// Compact a trace by statistical kernel sampling.
    Sample {
        #[arg(long)]
        trace: PathBuf,
        /// Relative error bound at 95% confidence.
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        cv_threshold: f64,
        #[arg(long, default_value_t = 4)]
        min_split: usize,
        /// Compacted trace output file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SimArgs {
    /// Configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trace file; repeat for several workloads.
    #[arg(long = "trace", required = true)]
    traces: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV and charts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override a configuration key, e.g. `--set channels=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl SimArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        for o in &self.overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("override `{o}` is not KEY=VALUE");
            };
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_trace(path: &Path) -> Result<Trace> {
    let file = File::open(path).with_context(|| format!("cannot open trace {}", path.display()))?;
    load_trace(BufReader::new(file)).with_context(|| format!("in trace {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn report_outputs(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn cmd_run(args: &SimArgs) -> Result<()> {
    let cfg = args.config()?;
    let mut trace = Trace::default();
    for path in &args.traces {
        trace.kernels.extend(read_trace(path)?.kernels);
    }
    let label = args.traces.iter().map(|p| stem(p)).collect::<Vec<_>>().join("+");
    let row = run_row(&cfg, &label, &trace)?;
    print!("{}\n{}\n", ssdsim::metrics::CSV_HEADER, row.csv_line());
    report_outputs(&render_all(&[row], &args.out)?);
    Ok(())
}

fn cmd_sweep(args: &SimArgs, policies: &[SchedPolicy], schemes: &[Scheme]) -> Result<()> {
    if policies.is_empty() || schemes.is_empty() {
        bail!("policies and schemes must be non-empty");
    }
    let cfg = args.config()?;
    let workloads = args
        .traces
        .iter()
        .map(|p| Ok((stem(p), read_trace(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows = sweep(&cfg, &workloads, policies, schemes)?;
    let mut out = std::io::stdout().lock();
    ssdsim::metrics::write_csv(&rows, &mut out)?;
    drop(out);
    report_outputs(&render_all(&rows, &args.out)?);
    Ok(())
}

fn cmd_synth(kind: Generator, params: &SynthParams, out: Option<&Path>) -> Result<()> {
    let kernels = generate(kind, params)?;
    match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?);
            write_trace(&mut w, &kernels)?;
            w.flush()?;
            eprintln!("wrote {} kernels to {}", kernels.len(), path.display());
        }
        None => {
            let mut w = BufWriter::new(std::io::stdout().lock());
            write_trace(&mut w, &kernels)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn cmd_sample(trace_path: &Path, cfg: &SamplerConfig, out: &Path) -> Result<()> {
    let trace = read_trace(trace_path)?;
    let groups = sample_trace(&trace.kernels, cfg)?;
    let prediction = predict_total(&groups)?;
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("cannot create {}", out.display()))?);
    let written = emit_sampled_trace(&groups, &trace.kernels, &mut w)?;
    w.flush()?;
    let total = trace.kernels.len();
    let ratio = if written == 0 { 0.0 } else { total as f64 / written as f64 };
    println!("groups {}", groups.len());
    for (i, g) in groups.iter().enumerate() {
        println!(
            "group {i} {} grid={} block={} n={} m={} mean_ns={:.1} cv={:.4}",
            g.key.name,
            g.key.grid,
            g.key.block,
            g.len(),
            min_samples(g, cfg)?,
            g.mean_ns,
            g.cv()
        );
    }
    println!("predicted_total_ns {:.1}", prediction.total_ns);
    println!("half_width_ns {:.1}", prediction.half_width_ns);
    println!("kernels {total} sampled {written} compression {ratio:.2}x");
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => cmd_run(&args),
        Command::Sweep { sim, policies, schemes } => cmd_sweep(&sim, &policies, &schemes),
        Command::Synth {
            kind,
            kernels,
            seed,
            out,
            workload,
            span,
            ios,
            groups,
            cv,
            streams,
        } => {
            let params = SynthParams {
                kernels,
                seed,
                workload,
                span_bytes: span,
                ios_per_kernel: ios,
                groups,
                cv,
                streams,
            };
            cmd_synth(kind, &params, out.as_deref())
        }
        Command::Sample {
            trace,
            epsilon,
            seed,
            cv_threshold,
            min_split,
            out,
        } => {
            let cfg = SamplerConfig {
                epsilon_rel: epsilon,
                cv_split_threshold: cv_threshold,
                min_split_size: min_split,
                rng_seed: seed,
            };
            cmd_sample(&trace, &cfg, &out)
        }
    }
}
