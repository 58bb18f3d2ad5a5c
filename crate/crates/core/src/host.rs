//! Multi-queue host interface: submission/completion queue pairs, request
//! splitting and response-time capture.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::engine::SimTime;
use crate::flash::{FlashGeometry, RequestId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HostError {
    #[error("queue {queue} is full (depth {depth})")]
    QueueFull { queue: u32, depth: u32 },
    #[error("request at offset {offset} length {length} is not aligned to {align} bytes")]
    UnalignedAccess { offset: u64, length: u64, align: u32 },
    #[error("request {0:?} is not outstanding")]
    UnknownRequest(RequestId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IoOp {
    Read,
    Write,
}

impl fmt::Display for IoOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IoOp::Read => "R",
            IoOp::Write => "W",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoRequest {
    pub id: RequestId,
    pub queue_id: u32,
    pub op: IoOp,
    pub offset_bytes: u64,
    pub length_bytes: u64,
    pub submit_time: Option<SimTime>,
    pub complete_time: Option<SimTime>,
}

impl IoRequest {
    pub fn new(id: u64, queue_id: u32, op: IoOp, offset_bytes: u64, length_bytes: u64) -> Self {
        IoRequest {
            id: RequestId(id),
            queue_id,
            op,
            offset_bytes,
            length_bytes,
            submit_time: None,
            complete_time: None,
        }
    }

    pub fn response_ns(&self) -> Option<u64> {
        Some(self.complete_time? - self.submit_time?)
    }
}

/// The part of a request that falls inside one logical page.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageFragment {
    pub lpn: u64,
    pub first_sector: u32,
    pub sector_count: u32,
}

fn check_alignment(offset: u64, length: u64, align: u32) -> Result<(), HostError> {
    let a = u64::from(align);
    if length == 0 || !offset.is_multiple_of(a) || !length.is_multiple_of(a) {
        return Err(HostError::UnalignedAccess {
            offset,
            length,
            align,
        });
    }
    Ok(())
}

/// Cuts a sector-aligned byte range at page boundaries.
pub fn split_request(
    offset_bytes: u64,
    length_bytes: u64,
    geometry: &FlashGeometry,
) -> Result<Vec<PageFragment>, HostError> {
    check_alignment(offset_bytes, length_bytes, geometry.sector_bytes)?;
    let sector = u64::from(geometry.sector_bytes);
    let spp = u64::from(geometry.sectors_per_page());
    let mut first = offset_bytes / sector;
    let end = (offset_bytes + length_bytes) / sector;
    let mut out = Vec::new();
    while first < end {
        let lpn = first / spp;
        let in_page = first % spp;
        let count = (spp - in_page).min(end - first);
        out.push(PageFragment {
            lpn,
            first_sector: in_page as u32,
            sector_count: count as u32,
        });
        first += count;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletedRequest {
    pub request: IoRequest,
    pub response_ns: u64,
}

/// A submission queue and its completion queue.
#[derive(Debug)]
pub struct QueuePair {
    id: u32,
    depth: u32,
    align: u32,
    inflight: BTreeMap<RequestId, (u64, IoRequest)>,
    completed: Vec<(u64, IoRequest)>,
    next_seq: u64,
}

impl QueuePair {
    pub fn new(id: u32, depth: u32, sector_bytes: u32) -> Self {
        assert!(depth >= 1, "queue depth must be at least 1");
        QueuePair {
            id,
            depth,
            align: sector_bytes,
            inflight: BTreeMap::new(),
            completed: Vec::new(),
            next_seq: 0,
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Requests submitted but not yet reaped from the completion queue.
    pub fn outstanding(&self) -> usize {
        self.inflight.len() + self.completed.len()
    }

    pub fn is_full(&self) -> bool {
        self.outstanding() >= self.depth as usize
    }

    /// Places `req` in the submission queue, stamping its submit time.
    pub fn enqueue(&mut self, mut req: IoRequest, now: SimTime) -> Result<(), HostError> {
        check_alignment(req.offset_bytes, req.length_bytes, self.align)?;
        if self.is_full() {
            return Err(HostError::QueueFull {
                queue: self.id,
                depth: self.depth,
            });
        }
        req.queue_id = self.id;
        req.submit_time = Some(now);
        req.complete_time = None;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.inflight.insert(req.id, (seq, req));
        Ok(())
    }

    /// Posts a completion entry for an in-flight request.
    pub fn complete(&mut self, id: RequestId, now: SimTime) -> Result<(), HostError> {
        let (seq, mut req) = self
            .inflight
            .remove(&id)
            .ok_or(HostError::UnknownRequest(id))?;
        req.complete_time = Some(now);
        self.completed.push((seq, req));
        Ok(())
    }

    /// Reaps every posted completion. Completions are ordered by time, then
    /// by submission order.
    pub fn poll_completions(&mut self) -> Vec<CompletedRequest> {
        let mut done = std::mem::take(&mut self.completed);
        done.sort_by_key(|(seq, r)| (r.complete_time, *seq));
        done.into_iter()
            .map(|(_, request)| {
                let response_ns = request.response_ns().expect("completed request is stamped");
                CompletedRequest {
                    request,
                    response_ns,
                }
            })
            .collect()
    }
}
