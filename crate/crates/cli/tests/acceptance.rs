//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssdsim::flash::{transfer_ns, FlashGeometry, TxnCause, TxnKind};
use ssdsim::ftl::{
    format_plane_order, plane_order, table_footprint_bytes, AllocationMode, AllocationPolicy, Ftl,
    FtlConfig, GcConfig, MappingGranularity, MappingMode, Scheme, TxnChain, WriteFragment,
};
use ssdsim::gpu::{select_policy, KernelDescriptor, KernelIo, SchedPolicy, SchedulerConfig, Trace};
use ssdsim::host::IoOp;
use ssdsim::sampler::{min_samples, predict_total, sample_trace};
use ssdsim::sim::Simulator;
use ssdsim::synth::{generate, Generator, SynthParams};
use ssdsim::{RunConfig, SamplerConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn geometry(channels: u32, ways: u32, dies: u32, planes: u32, blocks: u32, pages: u32) -> FlashGeometry {
    FlashGeometry {
        channels,
        ways_per_channel: ways,
        dies_per_way: dies,
        planes_per_die: planes,
        blocks_per_plane: blocks,
        pages_per_block: pages,
        page_bytes: 16384,
        sector_bytes: 4096,
    }
}

fn ftl(g: FlashGeometry, mapping: MappingMode, mode: AllocationMode, threshold: f64, track: bool) -> Ftl {
    Ftl::new(
        g,
        FtlConfig {
            mapping,
            allocation: AllocationPolicy { mode, scheme: Scheme::Cwdp },
            gc: GcConfig { free_block_threshold: threshold, enabled: true },
            track_content: track,
        },
    )
    .expect("valid ftl")
}

fn one_kernel(ios: Vec<KernelIo>) -> Trace {
    Trace {
        kernels: vec![KernelDescriptor {
            workload: Arc::from("w"),
            kernel_id: 0,
            name: Arc::from("k"),
            grid_blocks: 1,
            block_threads: 1,
            exec_ns: 0,
            ios,
            replicas: 1,
        }],
    }
}

fn io(op: IoOp, offset: u64, len: u64) -> KernelIo {
    KernelIo { delta_ns: 0, op, offset_bytes: offset, length_bytes: len }
}

#[derive(Default)]
struct Counts {
    reads: u64,
    host_reads: u64,
    programs: u64,
    gc_programs: u64,
}

fn tally(into: &mut Counts, chains: &[TxnChain]) {
    for t in chains.iter().flat_map(TxnChain::transactions) {
        match t.kind {
            TxnKind::Read => {
                into.reads += 1;
                if matches!(t.cause, TxnCause::HostRead | TxnCause::Rmw) {
                    into.host_reads += 1;
                }
            }
            TxnKind::Program => {
                into.programs += 1;
                if t.cause == TxnCause::Gc {
                    into.gc_programs += 1;
                }
            }
            TxnKind::Erase => {}
        }
    }
}

/// 8 planes on 8 channels, 8 simultaneous full-page writes.
fn plane_parallel() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.geometry = geometry(8, 1, 1, 1, 16, 16);
    cfg.mapping = MappingMode::Coarse;
    let t_xfer = transfer_ns(&cfg.geometry, &cfg.timing, 4).unwrap();
    let t_prog = cfg.timing.program_ns;

    cfg.allocation = AllocationMode::Dynamic;
    let dyn_trace = one_kernel((0..8).map(|l| io(IoOp::Write, l * 16384, 16384)).collect());
    let dynamic = Simulator::new(&cfg, &dyn_trace).unwrap().run().unwrap().report.sim_end_ns;

    cfg.allocation = AllocationMode::Static;
    let static_trace = one_kernel((0..8).map(|l| io(IoOp::Write, l * 8 * 16384, 16384)).collect());
    let stat = Simulator::new(&cfg, &static_trace).unwrap().run().unwrap().report.sim_end_ns;

    // hand schedule: parallel buses then parallel arrays, versus one bus
    // feeding one plane whose programs run back to back
    let dyn_oracle = t_xfer + t_prog;
    let static_oracle = t_xfer + 8 * t_prog;
    let bound = ((8 * t_xfer + t_prog) as f64 * 1.01) as u64;
    let ratio = stat as f64 / dynamic as f64;
    outcome(
        dynamic == dyn_oracle && stat == static_oracle && dynamic <= bound && stat >= 8 * t_prog && ratio >= 6.0,
        format!("dynamic {dynamic} ns (bound {bound}), static {stat} ns (>= {}), ratio {ratio:.2}", 8 * t_prog),
    )
}

/// 10,000 random 4 KB overwrites of pre-populated 16 KB pages.
fn rmw_elimination() -> Outcome {
    let g = geometry(8, 1, 1, 2, 64, 64);
    let pages = 4096u64;
    let mut results = Vec::new();
    for mapping in [MappingMode::Coarse, MappingMode::Fine] {
        let mut f = ftl(g, mapping, AllocationMode::Dynamic, 0.05, false);
        for lpn in 0..pages {
            f.allocate_write(&[WriteFragment::new(lpn, 0, 4)]).unwrap();
        }
        f.flush();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Counts::default();
        for _ in 0..10_000 {
            let frag = WriteFragment::new(rng.random_range(0..pages), rng.random_range(0..4), 1);
            let chains = f.allocate_write(&[frag]).unwrap();
            tally(&mut c, &chains);
        }
        tally(&mut c, &f.flush());
        results.push(c);
    }
    let (coarse, fine) = (&results[0], &results[1]);
    let limit = 10_000u64.div_ceil(4) + fine.gc_programs;
    outcome(
        coarse.host_reads == 10_000 && fine.host_reads == 0 && fine.reads == 0 && fine.programs <= limit,
        format!(
            "coarse host reads {}, fine host reads {}, fine programs {} (limit {limit})",
            coarse.host_reads, fine.host_reads, fine.programs
        ),
    )
}

/// Writes w, x to page 0 and y, z to page 1, both pages already written.
fn four_write_replay() -> Outcome {
    let g = geometry(4, 1, 1, 1, 8, 8);
    let batch = [
        WriteFragment::new(0, 0, 1),
        WriteFragment::new(0, 1, 1),
        WriteFragment::new(1, 0, 1),
        WriteFragment::new(1, 1, 1),
    ];
    let mut out = Vec::new();
    for mapping in [MappingMode::Fine, MappingMode::Coarse] {
        let mut f = ftl(g, mapping, AllocationMode::Dynamic, 0.2, false);
        f.allocate_write(&[WriteFragment::new(0, 0, 4), WriteFragment::new(1, 0, 4)]).unwrap();
        f.flush();
        let before = f.stats().invalidated_sectors;
        let mut c = Counts::default();
        tally(&mut c, &f.allocate_write(&batch).unwrap());
        tally(&mut c, &f.flush());
        out.push((c, f.stats().invalidated_sectors - before));
    }
    let (fine, fine_inv) = (&out[0].0, out[0].1);
    let (coarse, _) = (&out[1].0, out[1].1);
    outcome(
        fine.programs == 1 && fine.reads == 0 && fine_inv == 4 && coarse.reads == 2 && coarse.programs == 2,
        format!(
            "fine {} program / {} invalidations, coarse {} reads + {} programs",
            fine.programs, fine_inv, coarse.reads, coarse.programs
        ),
    )
}

/// 4 KB random reads at queue depths 1..128 on a 32-plane device.
fn queue_depth_scaling() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.geometry = geometry(32, 1, 1, 1, 16, 64);
    cfg.mapping = MappingMode::Fine;
    cfg.allocation = AllocationMode::Dynamic;
    cfg.queue_count = 1;
    let requests = 4096u64;
    let mut units: Vec<u64> = (0..cfg.geometry.total_pages() / 2).collect();
    units.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let trace = one_kernel(units[..requests as usize].iter().map(|&u| io(IoOp::Read, u * 4096, 4096)).collect());
    let depths = [1u32, 2, 4, 8, 16, 32, 64, 128];
    let mut iops = Vec::new();
    for &d in &depths {
        cfg.queue_depth = d;
        let r = Simulator::new(&cfg, &trace).unwrap().run().unwrap();
        assert_eq!(r.report.completed, requests);
        iops.push(r.report.iops);
    }
    let mut pass = iops.windows(2).all(|w| w[1] >= w[0]);
    let mut ratios = Vec::new();
    for i in 0..depths.len() - 1 {
        if depths[i] < 32 {
            let r = iops[i + 1] / iops[i];
            ratios.push(format!("{}->{}: {r:.3}", depths[i], depths[i + 1]));
            pass &= r >= 1.8;
        }
    }
    let sat: Vec<f64> = depths.iter().zip(&iops).filter(|(&d, _)| d > 32).map(|(_, &v)| v).collect();
    let (lo, hi) = sat.iter().fold((f64::MAX, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
    let variation = (hi - lo) / lo;
    pass &= variation < 0.10;
    outcome(
        pass,
        format!("{}; variation beyond 32: {:.2}%", ratios.join(", "), variation * 100.0),
    )
}

fn enumerate(scheme: Scheme, g: &FlashGeometry) -> String {
    let (c, w, d, p) = (g.channels, g.ways_per_channel, g.dies_per_way, g.planes_per_die);
    let mut out = String::new();
    let mut line = |c: u32, w: u32, d: u32, p: u32| out.push_str(&format!("(c{c},w{w},d{d},p{p})\n"));
    match scheme {
        Scheme::Cwdp => {
            for pi in 0..p { for di in 0..d { for wi in 0..w { for ci in 0..c { line(ci, wi, di, pi) } } } }
        }
        Scheme::Cdwp => {
            for pi in 0..p { for wi in 0..w { for di in 0..d { for ci in 0..c { line(ci, wi, di, pi) } } } }
        }
        Scheme::Wcdp => {
            for pi in 0..p { for di in 0..d { for ci in 0..c { for wi in 0..w { line(ci, wi, di, pi) } } } }
        }
    }
    out
}

fn scheme_ordering() -> Outcome {
    let g = geometry(2, 2, 2, 2, 4, 4);
    let mut pass = true;
    for scheme in Scheme::ALL {
        let got = format_plane_order(&plane_order(scheme, &g));
        let got = if got.ends_with('\n') { got } else { got + "\n" };
        pass &= got == enumerate(scheme, &g);
    }
    let first_cwdp = format_plane_order(&plane_order(Scheme::Cwdp, &g));
    pass &= first_cwdp.starts_with("(c0,w0,d0,p0)\n(c1,w0,d0,p0)\n(c0,w1,d0,p0)\n");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let g = geometry(
            rng.random_range(1..6),
            rng.random_range(1..6),
            rng.random_range(1..4),
            rng.random_range(1..4),
            4,
            4,
        );
        for scheme in Scheme::ALL {
            let order = plane_order(scheme, &g);
            let distinct: HashSet<_> = order.iter().map(|p| g.plane_index(*p)).collect();
            pass &= order.len() == g.total_planes() as usize && distinct.len() == order.len();
        }
    }
    outcome(pass, "3 schemes on 2x2x2x2 match the enumeration; 50 random geometries bijective".into())
}

fn scheduler_trigger() -> Outcome {
    let mut checked = 0u64;
    let mut mismatches = 0u64;
    for cores in [16u32, 64, 128] {
        for stride in 1..=64u32 {
            for n_blocks in 1..=64u32 {
                let auto = SchedulerConfig { policy: SchedPolicy::Auto, block_stride: stride, core_count: cores, chunk_len: 32 };
                let expected = if n_blocks < stride * cores { SchedPolicy::LargeChunk } else { SchedPolicy::RoundRobin };
                mismatches += u64::from(select_policy(n_blocks, &auto) != expected);
                for explicit in [SchedPolicy::RoundRobin, SchedPolicy::LargeChunk] {
                    let cfg = SchedulerConfig { policy: explicit, ..auto };
                    mismatches += u64::from(select_policy(n_blocks, &cfg) != explicit);
                }
                checked += 3;
            }
        }
    }
    outcome(mismatches == 0, format!("{checked} cases, {mismatches} mismatches"))
}

fn sampler_confidence() -> Outcome {
    let cfg = SamplerConfig::default();
    let mut within = 0;
    let mut worst = 0.0f64;
    for seed in 0..200u64 {
        let params = SynthParams { kernels: 20_000, seed, groups: 20, ..Default::default() };
        let kernels = generate(Generator::GroupedNormal, &params).unwrap();
        let truth: f64 = kernels.iter().map(|k| k.exec_ns as f64).sum();
        let groups = sample_trace(&kernels, &SamplerConfig { rng_seed: seed, ..cfg }).unwrap();
        let y = predict_total(&groups).unwrap().total_ns;
        let err = (y - truth).abs() / truth;
        worst = worst.max(err);
        within += usize::from(err <= cfg.epsilon_rel);
    }
    let constant = SynthParams { kernels: 2_000, groups: 20, cv: Some(0.0), ..Default::default() };
    let kernels = generate(Generator::GroupedNormal, &constant).unwrap();
    let truth: f64 = kernels.iter().map(|k| k.exec_ns as f64).sum();
    let groups = sample_trace(&kernels, &cfg).unwrap();
    let ones = groups.iter().all(|g| g.var_ns2 == 0.0 && min_samples(g, &cfg).unwrap() == 1);
    let exact = predict_total(&groups).unwrap().total_ns == truth;
    outcome(
        within >= 186 && ones && exact,
        format!("{within}/200 runs within 5% (worst {:.4}); zero-variance groups m=1: {ones}, exact: {exact}", worst),
    )
}

fn mapping_growth() -> Outcome {
    let mut pass = true;
    let mut detail = String::new();
    for g in [FlashGeometry::default(), geometry(2, 1, 1, 1, 8, 8), geometry(16, 4, 2, 2, 128, 256)] {
        let capacity = g.capacity_bytes();
        let coarse = table_footprint_bytes(&MappingGranularity::new(MappingMode::Coarse, &g), capacity);
        let fine = table_footprint_bytes(&MappingGranularity::new(MappingMode::Fine, &g), capacity);
        let ratio = u64::from(g.page_bytes / g.sector_bytes);
        pass &= fine == ratio * coarse;
        if detail.is_empty() {
            detail = format!("fine {fine} B = {ratio} x coarse {coarse} B");
        }
    }
    outcome(pass, detail)
}

/// 100,000 random aligned operations per mapping/allocation pair against a
/// flat array of sector versions.
fn ftl_oracle() -> Outcome {
    let g = geometry(2, 1, 1, 1, 8, 8);
    let mut detail = Vec::new();
    let mut pass = true;
    for mapping in [MappingMode::Coarse, MappingMode::Fine] {
        for mode in [AllocationMode::Static, AllocationMode::Dynamic] {
            let mut f = ftl(g, mapping, mode, 0.2, true);
            let pages = f.logical_pages();
            let mut model = vec![None::<u64>; (pages * 4) as usize];
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut ok = true;
            for step in 0..100_000u64 {
                let lpn = rng.random_range(0..pages);
                let first = rng.random_range(0..4u32);
                let count = rng.random_range(1..=4 - first);
                match rng.random_range(0..10) {
                    0..=4 => {
                        f.allocate_write(&[WriteFragment::new(lpn, first, count).with_tag(step)]).unwrap();
                        for s in first..first + count {
                            model[(lpn * 4 + u64::from(s)) as usize] = Some(step);
                        }
                    }
                    5 => {
                        f.flush();
                    }
                    _ => {
                        let got = f.read_content(lpn, first, count).unwrap();
                        let want: Vec<_> = (first..first + count).map(|s| model[(lpn * 4 + u64::from(s)) as usize]).collect();
                        ok &= got == want;
                    }
                }
                if step % 10_000 == 0 {
                    ok &= f.check_integrity();
                }
                if !ok {
                    break;
                }
            }
            let gc = f.stats().gc_runs;
            pass &= ok && gc > 0;
            detail.push(format!("{mapping}/{}: {} ({gc} gc runs)", mode.as_str(), if ok { "match" } else { "MISMATCH" }));
        }
    }
    outcome(pass, detail.join(", "))
}

fn sweep_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_ssdsim");
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = "channels = 4\nways_per_channel = 2\ndies_per_way = 1\nplanes_per_die = 2\nblocks_per_plane = 32\npages_per_block = 32\ncore_count = 4\nchunk_len = 8\nseed = 11\n";
    std::fs::write(d.join("sim.cfg"), config).unwrap();
    for kind in ["backprop", "hotspot", "lavamd"] {
        let status = Command::new(bin)
            .args(["synth", "--kind", kind, "--kernels", "120", "--ios", "3", "--span", "16777216", "--streams", "3", "--seed", "11", "--out"])
            .arg(d.join(format!("{kind}.jsonl")))
            .output()
            .unwrap();
        assert!(status.status.success());
    }
    let run = |out: &Path| {
        let o = Command::new(bin)
            .arg("sweep")
            .arg("--config")
            .arg(d.join("sim.cfg"))
            .args(["--seed", "11"])
            .args(["backprop", "hotspot", "lavamd"].iter().flat_map(|k| ["--trace".to_string(), d.join(format!("{k}.jsonl")).display().to_string()]))
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run(&d.join("a"));
    run(&d.join("b"));
    let files = ["report.csv", "maxima.csv", "iops.svg", "response_time.svg", "sim_end_time.svg"];
    let same = files
        .iter()
        .all(|f| std::fs::read(d.join("a").join(f)).unwrap() == std::fs::read(d.join("b").join(f)).unwrap());
    let rows = std::fs::read_to_string(d.join("a/report.csv")).unwrap().lines().count() - 1;
    outcome(same && rows == 18, format!("{} files byte-identical across two runs, {rows} rows", files.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("plane-parallel throughput", plane_parallel, Some(Duration::from_secs(1))),
        ("RMW elimination", rmw_elimination, Some(Duration::from_secs(5))),
        ("four-write micro replay", four_write_replay, None),
        ("queue-depth scaling", queue_depth_scaling, Some(Duration::from_secs(30))),
        ("scheme ordering", scheme_ordering, None),
        ("scheduler trigger", scheduler_trigger, None),
        ("sampler confidence", sampler_confidence, Some(Duration::from_secs(60))),
        ("mapping-table growth", mapping_growth, None),
        ("FTL oracle equivalence", ftl_oracle, Some(Duration::from_secs(10))),
        ("sweep determinism", sweep_determinism, None),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|l| elapsed <= l);
        let pass = result.pass && in_time;
        failed += usize::from(!pass);
        let budget = limit.map_or(String::new(), |l| format!(" / {}s", l.as_secs()));
        println!(
            "[{}] {:>2} {name}: {} ({:.2}s{budget})",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 10 acceptance criteria passed");
}
