//! Run metrics: IOPS, device response time, simulation end time and
//! transaction counters, with CSV and SVG chart output.
//!
//! CSV columns, in order:
//! `workload,policy,scheme,mapping,allocation,iops,resp_mean_ns,resp_p50_ns,resp_p99_ns,resp_max_ns,sim_end_ns,reads,programs,erases,rmw_reads,waf`

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::flash::{FlashTransaction, TxnCause, TxnKind};
use crate::host::{CompletedRequest, IoOp};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("span is zero")]
    ZeroSpan,
    #[error("no reports to render")]
    Empty,
    #[error("writing {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub const CSV_HEADER: &str = "workload,policy,scheme,mapping,allocation,iops,resp_mean_ns,resp_p50_ns,resp_p99_ns,resp_max_ns,sim_end_ns,reads,programs,erases,rmw_reads,waf";

/// Completions per simulated second.
pub fn compute_iops(completed: u64, span_ns: u64) -> Result<f64, MetricsError> {
    if span_ns == 0 {
        return Err(MetricsError::ZeroSpan);
    }
    Ok(completed as f64 * 1e9 / span_ns as f64)
}

/// Log-scale histogram with 2% wide bins. Zero is kept in its own bin.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogHistogram {
    bins: BTreeMap<u32, u64>,
    count: u64,
    sum: u128,
    min: u64,
    max: u64,
}

const BIN_GROWTH: f64 = 1.02;

impl LogHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    fn bin_of(v: u64) -> u32 {
        if v == 0 {
            0
        } else {
            1 + ((v as f64).ln() / BIN_GROWTH.ln()).floor() as u32
        }
    }

    fn bin_mid(bin: u32) -> f64 {
        if bin == 0 {
            0.0
        } else {
            BIN_GROWTH.powf(f64::from(bin - 1) + 0.5)
        }
    }

    pub fn record(&mut self, v: u64) {
        *self.bins.entry(Self::bin_of(v)).or_insert(0) += 1;
        if self.count == 0 {
            self.min = v;
            self.max = v;
        } else {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.count += 1;
        self.sum += u128::from(v);
    }

    pub fn merge(&mut self, other: &LogHistogram) {
        if other.count == 0 {
            return;
        }
        for (&b, &c) in &other.bins {
            *self.bins.entry(b).or_insert(0) += c;
        }
        if self.count == 0 {
            self.min = other.min;
            self.max = other.max;
        } else {
            self.min = self.min.min(other.min);
            self.max = self.max.max(other.max);
        }
        self.count += other.count;
        self.sum += other.sum;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn min(&self) -> u64 {
        self.min
    }

    pub fn max(&self) -> u64 {
        self.max
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum as f64 / self.count as f64
        }
    }

    /// Approximate quantile `q` in `[0, 1]`, within one bin (2%) of the
    /// exact order statistic and clamped to the observed range.
    pub fn quantile(&self, q: f64) -> u64 {
        if self.count == 0 {
            return 0;
        }
        let rank = ((q.clamp(0.0, 1.0) * self.count as f64).ceil() as u64).max(1);
        let mut seen = 0;
        for (&b, &c) in &self.bins {
            seen += c;
            if seen >= rank {
                let v = Self::bin_mid(b).round() as u64;
                return v.clamp(self.min, self.max);
            }
        }
        self.max
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsCollector {
    pub response: LogHistogram,
    pub completed_reads: u64,
    pub completed_writes: u64,
    pub host_read_sectors: u64,
    pub host_written_sectors: u64,
    /// Host read sectors served by flash READs.
    pub flash_read_sectors: u64,
    /// Host read sectors of unmapped data, returned as zeros.
    pub unmapped_read_sectors: u64,
    pub reads: u64,
    pub programs: u64,
    pub erases: u64,
    pub rmw_reads: u64,
    pub programmed_sectors: u64,
}

impl MetricsCollector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, done: &CompletedRequest, sector_bytes: u64) {
        self.response.record(done.response_ns);
        let sectors = done.request.length_bytes / sector_bytes;
        match done.request.op {
            IoOp::Read => {
                self.completed_reads += 1;
                self.host_read_sectors += sectors;
            }
            IoOp::Write => {
                self.completed_writes += 1;
                self.host_written_sectors += sectors;
            }
        }
    }

    pub fn record_unmapped(&mut self, sectors: u64) {
        self.unmapped_read_sectors += sectors;
    }

    pub fn record_txn(&mut self, txn: &FlashTransaction) {
        match txn.kind {
            TxnKind::Read => {
                self.reads += 1;
                match txn.cause {
                    TxnCause::Rmw => self.rmw_reads += 1,
                    TxnCause::HostRead => self.flash_read_sectors += u64::from(txn.sectors.len()),
                    _ => {}
                }
            }
            TxnKind::Program => {
                self.programs += 1;
                self.programmed_sectors += u64::from(txn.sectors.len());
            }
            TxnKind::Erase => self.erases += 1,
        }
    }

    pub fn merge(&mut self, other: &MetricsCollector) {
        self.response.merge(&other.response);
        self.completed_reads += other.completed_reads;
        self.completed_writes += other.completed_writes;
        self.host_read_sectors += other.host_read_sectors;
        self.host_written_sectors += other.host_written_sectors;
        self.flash_read_sectors += other.flash_read_sectors;
        self.unmapped_read_sectors += other.unmapped_read_sectors;
        self.reads += other.reads;
        self.programs += other.programs;
        self.erases += other.erases;
        self.rmw_reads += other.rmw_reads;
        self.programmed_sectors += other.programmed_sectors;
    }

    pub fn completed(&self) -> u64 {
        self.completed_reads + self.completed_writes
    }

    pub fn report(&self, sim_end_ns: u64, per_plane_busy_ns: Vec<u64>) -> MetricsReport {
        let completed = self.completed();
        let iops = if completed == 0 {
            0.0
        } else {
            compute_iops(completed, sim_end_ns).unwrap_or(0.0)
        };
        let waf = if self.host_written_sectors == 0 {
            0.0
        } else {
            self.programmed_sectors as f64 / self.host_written_sectors as f64
        };
        MetricsReport {
            completed,
            iops,
            resp_mean_ns: self.response.mean(),
            resp_p50_ns: self.response.quantile(0.50),
            resp_p99_ns: self.response.quantile(0.99),
            resp_max_ns: self.response.max(),
            sim_end_ns,
            reads: self.reads,
            programs: self.programs,
            erases: self.erases,
            rmw_reads: self.rmw_reads,
            waf,
            host_read_sectors: self.host_read_sectors,
            flash_read_sectors: self.flash_read_sectors,
            unmapped_read_sectors: self.unmapped_read_sectors,
            per_plane_busy_ns,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub completed: u64,
    pub iops: f64,
    pub resp_mean_ns: f64,
    pub resp_p50_ns: u64,
    pub resp_p99_ns: u64,
    pub resp_max_ns: u64,
    pub sim_end_ns: u64,
    pub reads: u64,
    pub programs: u64,
    pub erases: u64,
    pub rmw_reads: u64,
    pub waf: f64,
    pub host_read_sectors: u64,
    pub flash_read_sectors: u64,
    pub unmapped_read_sectors: u64,
    pub per_plane_busy_ns: Vec<u64>,
}

/// A report and the configuration cell that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub workload: String,
    pub policy: String,
    pub scheme: String,
    pub mapping: String,
    pub allocation: String,
    pub report: MetricsReport,
}

impl ReportRow {
    /// `policy/scheme/mapping/allocation`
    pub fn combination(&self) -> String {
        format!("{}/{}/{}/{}", self.policy, self.scheme, self.mapping, self.allocation)
    }

    pub fn label(&self) -> String {
        format!("{}|{}", self.workload, self.combination())
    }

    pub fn csv_line(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{:.3},{:.1},{},{},{},{},{},{},{},{},{:.6}",
            self.workload,
            self.policy,
            self.scheme,
            self.mapping,
            self.allocation,
            r.iops,
            r.resp_mean_ns,
            r.resp_p50_ns,
            r.resp_p99_ns,
            r.resp_max_ns,
            r.sim_end_ns,
            r.reads,
            r.programs,
            r.erases,
            r.rmw_reads,
            r.waf
        )
    }
}

pub fn write_csv<W: Write>(rows: &[ReportRow], sink: &mut W) -> std::io::Result<()> {
    writeln!(sink, "{CSV_HEADER}")?;
    for row in rows {
        writeln!(sink, "{}", row.csv_line())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Iops,
    ResponseTime,
    SimEndTime,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Iops, Metric::ResponseTime, Metric::SimEndTime];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Iops => "iops",
            Metric::ResponseTime => "response_time",
            Metric::SimEndTime => "sim_end_time",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Metric::Iops => "IOPS",
            Metric::ResponseTime => "Device Response Time (ns)",
            Metric::SimEndTime => "Simulation End Time (ns)",
        }
    }

    pub fn value(self, r: &MetricsReport) -> f64 {
        match self {
            Metric::Iops => r.iops,
            Metric::ResponseTime => r.resp_mean_ns,
            Metric::SimEndTime => r.sim_end_ns as f64,
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Iops)
    }
}

/// Index of the best row for `metric`; ties go to the earliest row.
pub fn best_row(rows: &[ReportRow], metric: Metric) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, row) in rows.iter().enumerate() {
        let v = metric.value(&row.report);
        let better = match best {
            None => true,
            Some(b) => {
                let bv = metric.value(&rows[b].report);
                if metric.higher_is_better() {
                    v > bv
                } else {
                    v < bv
                }
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

pub fn write_maxima<W: Write>(rows: &[ReportRow], sink: &mut W) -> std::io::Result<()> {
    writeln!(sink, "metric,workload,policy,scheme,mapping,allocation,value")?;
    for metric in Metric::ALL {
        if let Some(i) = best_row(rows, metric) {
            let r = &rows[i];
            writeln!(
                sink,
                "{},{},{},{},{},{},{:.3}",
                metric.name(),
                r.workload,
                r.policy,
                r.scheme,
                r.mapping,
                r.allocation,
                metric.value(&r.report)
            )?;
        }
    }
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

/// Grouped bar chart as a standalone SVG document. `series[s].1[c]` is the
/// bar of series `s` in category `c`.
pub fn bar_chart_svg(title: &str, categories: &[String], series: &[(String, Vec<Option<f64>>)]) -> String {
    let bar_w = 18.0;
    let gap = 24.0;
    let left = 90.0;
    let top = 40.0;
    let plot_h = 300.0;
    let group_w = bar_w * series.len().max(1) as f64 + gap;
    let plot_w = group_w * categories.len().max(1) as f64;
    let legend_h = 18.0 * series.len() as f64;
    let width = left + plot_w + 20.0;
    let height = top + plot_h + 60.0 + legend_h;
    let max = series
        .iter()
        .flat_map(|(_, v)| v.iter().flatten().copied())
        .fold(0.0f64, f64::max);
    let scale = if max > 0.0 { plot_h / max } else { 0.0 };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    let axis_y = top + plot_h;
    let _ = writeln!(
        svg,
        r#"<line x1="{left:.1}" y1="{top:.1}" x2="{left:.1}" y2="{axis_y:.1}" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{left:.1}" y1="{axis_y:.1}" x2="{:.1}" y2="{axis_y:.1}" stroke="black"/>"#,
        left + plot_w
    );
    for tick in 0..=4 {
        let v = max * f64::from(tick) / 4.0;
        let y = axis_y - v * scale;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 4.0,
            y + 4.0,
            format_tick(v)
        );
    }
    for (c, cat) in categories.iter().enumerate() {
        let x0 = left + gap / 2.0 + group_w * c as f64;
        for (s, (_, values)) in series.iter().enumerate() {
            if let Some(v) = values.get(c).copied().flatten() {
                let h = v * scale;
                let _ = writeln!(
                    svg,
                    r#"<rect x="{:.2}" y="{:.2}" width="{bar_w:.2}" height="{h:.2}" fill="{}"><title>{}</title></rect>"#,
                    x0 + bar_w * s as f64,
                    axis_y - h,
                    PALETTE[s % PALETTE.len()],
                    format_tick(v)
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + bar_w * series.len() as f64 / 2.0,
            axis_y + 16.0,
            escape(cat)
        );
    }
    for (s, (name, _)) in series.iter().enumerate() {
        let y = axis_y + 36.0 + 18.0 * s as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{left:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            y - 10.0,
            PALETTE[s % PALETTE.len()],
            left + 18.0,
            y,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn format_tick(v: f64) -> String {
    if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.1}k", v / 1e3)
    } else {
        format!("{v:.1}")
    }
}

fn first_seen(items: impl Iterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in items {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Chart of one metric: workloads on the x axis, one bar per combination.
pub fn metric_chart(rows: &[ReportRow], metric: Metric) -> String {
    let workloads = first_seen(rows.iter().map(|r| r.workload.clone()));
    let combos = first_seen(rows.iter().map(ReportRow::combination));
    let series = combos
        .iter()
        .map(|c| {
            let values = workloads
                .iter()
                .map(|w| {
                    rows.iter()
                        .find(|r| &r.workload == w && &r.combination() == c)
                        .map(|r| metric.value(&r.report))
                })
                .collect();
            (c.clone(), values)
        })
        .collect::<Vec<_>>();
    bar_chart_svg(&format!("{} by Combination", metric.title()), &workloads, &series)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), MetricsError> {
    std::fs::write(path, contents).map_err(|source| MetricsError::IoFailure {
        path: path.to_owned(),
        source,
    })
}

/// Writes `report.csv`, `maxima.csv` and one SVG per metric into `dir`.
pub fn render_all(rows: &[ReportRow], dir: &Path) -> Result<Vec<PathBuf>, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    std::fs::create_dir_all(dir).map_err(|source| MetricsError::IoFailure {
        path: dir.to_owned(),
        source,
    })?;
    let mut written = Vec::new();
    let mut csv = Vec::new();
    write_csv(rows, &mut csv).expect("in-memory write");
    let path = dir.join("report.csv");
    write_file(&path, &csv)?;
    written.push(path);
    let mut maxima = Vec::new();
    write_maxima(rows, &mut maxima).expect("in-memory write");
    let path = dir.join("maxima.csv");
    write_file(&path, &maxima)?;
    written.push(path);
    for metric in Metric::ALL {
        let path = dir.join(format!("{}.svg", metric.name()));
        write_file(&path, metric_chart(rows, metric).as_bytes())?;
        written.push(path);
    }
    Ok(written)
}
