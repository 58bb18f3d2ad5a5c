//! Policy-combination sweeps. Each cell owns its simulator, so cells run in
//! parallel; rows are sorted by label afterwards.

use rayon::prelude::*;
use thiserror::Error;

use crate::config::RunConfig;
use crate::ftl::Scheme;
use crate::gpu::{SchedPolicy, Trace};
use crate::metrics::ReportRow;
use crate::sim::{run_trace, SimError};

#[derive(Debug, Error)]
#[error("cell {cell}: {source}")]
pub struct SweepError {
    pub cell: String,
    #[source]
    pub source: SimError,
}

/// Runs `trace` under `cfg` and labels the report.
pub fn run_row(cfg: &RunConfig, workload: &str, trace: &Trace) -> Result<ReportRow, SimError> {
    let result = run_trace(cfg, trace)?;
    Ok(ReportRow {
        workload: workload.to_owned(),
        policy: cfg.scheduler.policy.to_string(),
        scheme: cfg.scheme.to_string(),
        mapping: cfg.mapping.to_string(),
        allocation: cfg.allocation.to_string(),
        report: result.report,
    })
}

/// Every `(workload, policy, scheme)` combination on top of `base`.
pub fn sweep(
    base: &RunConfig,
    workloads: &[(String, Trace)],
    policies: &[SchedPolicy],
    schemes: &[Scheme],
) -> Result<Vec<ReportRow>, SweepError> {
    let mut cells = Vec::new();
    for (w, (name, _)) in workloads.iter().enumerate() {
        for &policy in policies {
            for &scheme in schemes {
                let mut cfg = base.clone();
                cfg.scheduler.policy = policy;
                cfg.scheme = scheme;
                let label = format!("{name}|{policy}/{scheme}");
                cells.push((w, cfg, label));
            }
        }
    }
    let mut rows = cells
        .into_par_iter()
        .map(|(w, cfg, label)| {
            let (name, trace) = &workloads[w];
            run_row(&cfg, name, trace).map_err(|source| SweepError { cell: label, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    rows.sort_by_key(ReportRow::label);
    Ok(rows)
}
