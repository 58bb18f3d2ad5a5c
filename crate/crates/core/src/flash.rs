//! Flash back end: geometry, timing parameters and the per-channel /
//! per-plane occupancy model that decides when a transaction completes.

use std::fmt;

use num_rational::Ratio;
use num_traits::Zero;
use thiserror::Error;

use crate::engine::SimTime;

/// Channel bus throughput in bytes per nanosecond, kept exact.
pub type BusRate = Ratio<u64>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlashError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid timing: {0}")]
    InvalidTiming(String),
    #[error("location {0} is outside the flash geometry")]
    OutOfGeometry(PhysicalLocation),
    #[error("sector count {count} outside 1..={max}")]
    InvalidSectorCount { count: u32, max: u32 },
    #[error("transaction carries no sectors")]
    EmptyPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlashGeometry {
    pub channels: u32,
    pub ways_per_channel: u32,
    pub dies_per_way: u32,
    pub planes_per_die: u32,
    pub blocks_per_plane: u32,
    pub pages_per_block: u32,
    pub page_bytes: u32,
    pub sector_bytes: u32,
}

impl Default for FlashGeometry {
    fn default() -> Self {
        FlashGeometry {
            channels: 8,
            ways_per_channel: 4,
            dies_per_way: 2,
            planes_per_die: 2,
            blocks_per_plane: 64,
            pages_per_block: 128,
            page_bytes: 16 * 1024,
            sector_bytes: 4 * 1024,
        }
    }
}

impl FlashGeometry {
    pub fn validate(&self) -> Result<(), FlashError> {
        let counts = [
            ("channels", self.channels),
            ("ways_per_channel", self.ways_per_channel),
            ("dies_per_way", self.dies_per_way),
            ("planes_per_die", self.planes_per_die),
            ("blocks_per_plane", self.blocks_per_plane),
            ("pages_per_block", self.pages_per_block),
            ("page_bytes", self.page_bytes),
            ("sector_bytes", self.sector_bytes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(FlashError::InvalidGeometry(format!("{name} must be >= 1")));
            }
        }
        if !self.page_bytes.is_multiple_of(self.sector_bytes) {
            return Err(FlashError::InvalidGeometry(
                "page_bytes must be a multiple of sector_bytes".into(),
            ));
        }
        if self.sectors_per_page() > SectorMask::CAPACITY {
            return Err(FlashError::InvalidGeometry(format!(
                "at most {} sectors per page are supported",
                SectorMask::CAPACITY
            )));
        }
        if self.total_sectors() >= u64::from(u32::MAX) {
            return Err(FlashError::InvalidGeometry(
                "device has too many sectors".into(),
            ));
        }
        Ok(())
    }

    /// Total plane count, the unit of array-level parallelism.
    pub fn total_planes(&self) -> u32 {
        self.channels * self.ways_per_channel * self.dies_per_way * self.planes_per_die
    }

    pub fn sectors_per_page(&self) -> u32 {
        self.page_bytes / self.sector_bytes
    }

    pub fn sectors_per_block(&self) -> u32 {
        self.sectors_per_page() * self.pages_per_block
    }

    pub fn total_pages(&self) -> u64 {
        u64::from(self.total_planes())
            * u64::from(self.blocks_per_plane)
            * u64::from(self.pages_per_block)
    }

    pub fn total_sectors(&self) -> u64 {
        self.total_pages() * u64::from(self.sectors_per_page())
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.total_pages() * u64::from(self.page_bytes)
    }

    /// Canonical flat plane index: channel-major, then way, die, plane.
    pub fn plane_index(&self, p: PlaneAddr) -> usize {
        let idx = ((p.channel * self.ways_per_channel + p.way) * self.dies_per_way + p.die)
            * self.planes_per_die
            + p.plane;
        idx as usize
    }

    pub fn plane_addr(&self, index: usize) -> PlaneAddr {
        let mut rest = index as u32;
        let plane = rest % self.planes_per_die;
        rest /= self.planes_per_die;
        let die = rest % self.dies_per_way;
        rest /= self.dies_per_way;
        let way = rest % self.ways_per_channel;
        rest /= self.ways_per_channel;
        PlaneAddr {
            channel: rest,
            way,
            die,
            plane,
        }
    }

    pub fn contains(&self, loc: &PhysicalLocation) -> bool {
        loc.channel < self.channels
            && loc.way < self.ways_per_channel
            && loc.die < self.dies_per_way
            && loc.plane < self.planes_per_die
            && loc.block < self.blocks_per_plane
            && loc.page < self.pages_per_block
            && loc.sector < self.sectors_per_page()
    }

    /// Flat index of a physical page.
    pub fn page_index(&self, loc: &PhysicalLocation) -> u64 {
        let plane = self.plane_index(loc.plane_addr()) as u64;
        (plane * u64::from(self.blocks_per_plane) + u64::from(loc.block))
            * u64::from(self.pages_per_block)
            + u64::from(loc.page)
    }

    /// Flat index of a physical sector.
    pub fn sector_index(&self, loc: &PhysicalLocation) -> u64 {
        self.page_index(loc) * u64::from(self.sectors_per_page()) + u64::from(loc.sector)
    }

    pub fn location_of_sector(&self, index: u64) -> PhysicalLocation {
        let spp = u64::from(self.sectors_per_page());
        let sector = (index % spp) as u32;
        let mut rest = index / spp;
        let page = (rest % u64::from(self.pages_per_block)) as u32;
        rest /= u64::from(self.pages_per_block);
        let block = (rest % u64::from(self.blocks_per_plane)) as u32;
        rest /= u64::from(self.blocks_per_plane);
        let p = self.plane_addr(rest as usize);
        PhysicalLocation {
            channel: p.channel,
            way: p.way,
            die: p.die,
            plane: p.plane,
            block,
            page,
            sector,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlashTiming {
    pub read_ns: u64,
    pub program_ns: u64,
    pub erase_ns: u64,
    pub channel_bytes_per_ns: BusRate,
    pub command_overhead_ns: u64,
}

impl Default for FlashTiming {
    fn default() -> Self {
        FlashTiming {
            read_ns: 50_000,
            program_ns: 660_000,
            erase_ns: 3_500_000,
            channel_bytes_per_ns: Ratio::new(2, 5),
            command_overhead_ns: 200,
        }
    }
}

impl FlashTiming {
    pub fn validate(&self) -> Result<(), FlashError> {
        if self.read_ns == 0 || self.program_ns == 0 || self.erase_ns == 0 {
            return Err(FlashError::InvalidTiming(
                "array latencies must be positive".into(),
            ));
        }
        if self.channel_bytes_per_ns.is_zero() {
            return Err(FlashError::InvalidTiming(
                "bus rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Parses a non-negative decimal such as `0.4` or `12` into an exact ratio.
pub fn parse_rate(text: &str) -> Option<BusRate> {
    let text = text.trim();
    let (int_part, frac_part) = match text.split_once('.') {
        Some((i, f)) => (i, f),
        None => (text, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let all_digits = |s: &str| s.bytes().all(|b| b.is_ascii_digit());
    if !all_digits(int_part) || !all_digits(frac_part) || frac_part.len() > 12 {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let numer: u64 = digits.parse().ok()?;
    let denom = 10u64.checked_pow(frac_part.len() as u32)?;
    Some(Ratio::new(numer, denom))
}

/// Formats a rate back to its shortest decimal form.
pub fn format_rate(rate: &BusRate) -> String {
    let (n, d) = (*rate.numer(), *rate.denom());
    let int = n / d;
    let mut rem = n % d;
    if rem == 0 {
        return int.to_string();
    }
    let mut out = format!("{int}.");
    for _ in 0..18 {
        if rem == 0 {
            break;
        }
        rem *= 10;
        out.push(char::from(b'0' + (rem / d) as u8));
        rem %= d;
    }
    out
}

/// Bus occupancy of moving `sector_count` sectors over one channel.
pub fn transfer_ns(
    geometry: &FlashGeometry,
    timing: &FlashTiming,
    sector_count: u32,
) -> Result<u64, FlashError> {
    let max = geometry.sectors_per_page();
    if sector_count == 0 || sector_count > max {
        return Err(FlashError::InvalidSectorCount {
            count: sector_count,
            max,
        });
    }
    let bytes = u64::from(sector_count) * u64::from(geometry.sector_bytes);
    let rate = timing.channel_bytes_per_ns;
    let scaled = bytes * rate.denom();
    let numer = *rate.numer();
    Ok(timing.command_overhead_ns + scaled.div_ceil(numer))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PlaneAddr {
    pub channel: u32,
    pub way: u32,
    pub die: u32,
    pub plane: u32,
}

impl fmt::Display for PlaneAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(c{},w{},d{},p{})",
            self.channel, self.way, self.die, self.plane
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PhysicalLocation {
    pub channel: u32,
    pub way: u32,
    pub die: u32,
    pub plane: u32,
    pub block: u32,
    pub page: u32,
    pub sector: u32,
}

impl PhysicalLocation {
    pub fn new(plane: PlaneAddr, block: u32, page: u32, sector: u32) -> Self {
        PhysicalLocation {
            channel: plane.channel,
            way: plane.way,
            die: plane.die,
            plane: plane.plane,
            block,
            page,
            sector,
        }
    }

    pub fn plane_addr(&self) -> PlaneAddr {
        PlaneAddr {
            channel: self.channel,
            way: self.way,
            die: self.die,
            plane: self.plane,
        }
    }

    /// Same page, sector zeroed.
    pub fn page_start(&self) -> Self {
        PhysicalLocation { sector: 0, ..*self }
    }
}

impl fmt::Display for PhysicalLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(c{},w{},d{},p{},b{},pg{},s{})",
            self.channel, self.way, self.die, self.plane, self.block, self.page, self.sector
        )
    }
}

/// Set of sector slots within one page.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct SectorMask(pub u64);

impl SectorMask {
    pub const CAPACITY: u32 = 64;

    pub fn full(sectors_per_page: u32) -> Self {
        if sectors_per_page >= 64 {
            SectorMask(u64::MAX)
        } else {
            SectorMask((1u64 << sectors_per_page) - 1)
        }
    }

    pub fn range(first: u32, count: u32) -> Self {
        SectorMask(Self::full(count).0 << first)
    }

    pub fn single(sector: u32) -> Self {
        SectorMask(1 << sector)
    }

    pub fn insert(&mut self, sector: u32) {
        self.0 |= 1 << sector;
    }

    pub fn contains(&self, sector: u32) -> bool {
        self.0 & (1 << sector) != 0
    }

    pub fn len(&self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: SectorMask) -> SectorMask {
        SectorMask(self.0 | other.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        let bits = self.0;
        (0..64u32).filter(move |s| bits & (1 << s) != 0)
    }
}

/// Identifier of a host request; carried by the transactions serving it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TxnKind {
    Read,
    Program,
    Erase,
}

/// Why a transaction exists, for accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TxnCause {
    HostRead,
    HostWrite,
    /// Read half of a read-modify-write.
    Rmw,
    Gc,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlashTransaction {
    pub kind: TxnKind,
    pub target: PhysicalLocation,
    pub sectors: SectorMask,
    pub cause: TxnCause,
    pub origins: Vec<RequestId>,
    pub issue_time: Option<SimTime>,
    pub complete_time: Option<SimTime>,
}

impl FlashTransaction {
    pub fn new(kind: TxnKind, target: PhysicalLocation, sectors: SectorMask, cause: TxnCause) -> Self {
        FlashTransaction {
            kind,
            target: target.page_start(),
            sectors,
            cause,
            origins: Vec::new(),
            issue_time: None,
            complete_time: None,
        }
    }

    pub fn with_origins(mut self, origins: Vec<RequestId>) -> Self {
        self.origins = origins;
        self
    }
}

/// Occupancy intervals of one resource, kept sorted; new work is placed in
/// the earliest gap that fits.
#[derive(Debug, Default, Clone)]
struct Timeline {
    busy: Vec<(u64, u64)>,
}

impl Timeline {
    fn prune(&mut self, now: u64) {
        let keep_from = self.busy.partition_point(|&(_, end)| end <= now);
        if keep_from > 0 {
            self.busy.drain(..keep_from);
        }
    }

    fn reserve(&mut self, earliest: u64, duration: u64) -> u64 {
        let mut start = earliest;
        let mut insert_at = self.busy.len();
        for (i, &(s, e)) in self.busy.iter().enumerate() {
            if e <= start {
                continue;
            }
            if start + duration <= s {
                insert_at = i;
                break;
            }
            start = start.max(e);
        }
        self.busy.insert(insert_at, (start, start + duration));
        debug_assert!(self.busy.windows(2).all(|w| w[0].1 <= w[1].0));
        start
    }
}

/// When each phase of a serviced transaction ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServiceWindow {
    pub bus: Option<(SimTime, SimTime)>,
    pub array: (SimTime, SimTime),
    pub complete: SimTime,
}

/// Busy bookkeeping for every channel bus and plane array.
pub struct FlashBackend {
    geometry: FlashGeometry,
    timing: FlashTiming,
    channels: Vec<Timeline>,
    plane_free_at: Vec<u64>,
    plane_busy_ns: Vec<u64>,
    channel_busy_ns: Vec<u64>,
    record: Option<Vec<(TxnKind, PhysicalLocation, ServiceWindow)>>,
}

impl FlashBackend {
    pub fn new(geometry: FlashGeometry, timing: FlashTiming) -> Result<Self, FlashError> {
        geometry.validate()?;
        timing.validate()?;
        let planes = geometry.total_planes() as usize;
        let channels = geometry.channels as usize;
        Ok(FlashBackend {
            geometry,
            timing,
            channels: vec![Timeline::default(); channels],
            plane_free_at: vec![0; planes],
            plane_busy_ns: vec![0; planes],
            channel_busy_ns: vec![0; channels],
            record: None,
        })
    }

    /// Keeps every service window for later inspection.
    pub fn with_recording(mut self) -> Self {
        self.record = Some(Vec::new());
        self
    }

    pub fn geometry(&self) -> &FlashGeometry {
        &self.geometry
    }

    pub fn timing(&self) -> &FlashTiming {
        &self.timing
    }

    /// Reserves bus and array time for `txn` issued at `now`, stamping its
    /// issue and completion times.
    pub fn submit(
        &mut self,
        txn: &mut FlashTransaction,
        now: SimTime,
    ) -> Result<ServiceWindow, FlashError> {
        let target = txn.target;
        if !self.geometry.contains(&target) {
            return Err(FlashError::OutOfGeometry(target));
        }
        if txn.kind != TxnKind::Erase && txn.sectors.is_empty() {
            return Err(FlashError::EmptyPayload);
        }
        let t = now.ns();
        let ch = target.channel as usize;
        let plane = self.geometry.plane_index(target.plane_addr());
        self.channels[ch].prune(t);

        let window = match txn.kind {
            TxnKind::Program => {
                let xfer = transfer_ns(&self.geometry, &self.timing, txn.sectors.len())?;
                let bus_start = self.channels[ch].reserve(t, xfer);
                let bus_end = bus_start + xfer;
                let array_start = bus_end.max(self.plane_free_at[plane]);
                let array_end = array_start + self.timing.program_ns;
                self.plane_free_at[plane] = array_end;
                self.channel_busy_ns[ch] += xfer;
                ServiceWindow {
                    bus: Some((SimTime(bus_start), SimTime(bus_end))),
                    array: (SimTime(array_start), SimTime(array_end)),
                    complete: SimTime(array_end),
                }
            }
            TxnKind::Read => {
                let xfer = transfer_ns(&self.geometry, &self.timing, txn.sectors.len())?;
                let array_start = t.max(self.plane_free_at[plane]);
                let array_end = array_start + self.timing.read_ns;
                self.plane_free_at[plane] = array_end;
                let bus_start = self.channels[ch].reserve(array_end, xfer);
                let bus_end = bus_start + xfer;
                self.channel_busy_ns[ch] += xfer;
                ServiceWindow {
                    bus: Some((SimTime(bus_start), SimTime(bus_end))),
                    array: (SimTime(array_start), SimTime(array_end)),
                    complete: SimTime(bus_end),
                }
            }
            TxnKind::Erase => {
                let array_start = t.max(self.plane_free_at[plane]);
                let array_end = array_start + self.timing.erase_ns;
                self.plane_free_at[plane] = array_end;
                ServiceWindow {
                    bus: None,
                    array: (SimTime(array_start), SimTime(array_end)),
                    complete: SimTime(array_end),
                }
            }
        };
        self.plane_busy_ns[plane] += window.array.1 - window.array.0;
        txn.issue_time = Some(now);
        txn.complete_time = Some(window.complete);
        if let Some(log) = self.record.as_mut() {
            log.push((txn.kind, target, window));
        }
        Ok(window)
    }

    pub fn plane_busy_ns(&self) -> &[u64] {
        &self.plane_busy_ns
    }

    pub fn channel_busy_ns(&self) -> &[u64] {
        &self.channel_busy_ns
    }

    pub fn recorded(&self) -> &[(TxnKind, PhysicalLocation, ServiceWindow)] {
        self.record.as_deref().unwrap_or(&[])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geometry(c: u32, w: u32, d: u32, p: u32) -> FlashGeometry {
        FlashGeometry {
            channels: c,
            ways_per_channel: w,
            dies_per_way: d,
            planes_per_die: p,
            blocks_per_plane: 4,
            pages_per_block: 4,
            ..FlashGeometry::default()
        }
    }

    /// Timing with a 40,000 ns full-page transfer.
    fn timing_40us() -> FlashTiming {
        FlashTiming {
            channel_bytes_per_ns: Ratio::new(16_384, 40_000),
            command_overhead_ns: 0,
            ..FlashTiming::default()
        }
    }

    fn program(loc: PhysicalLocation) -> FlashTransaction {
        FlashTransaction::new(TxnKind::Program, loc, SectorMask::full(4), TxnCause::HostWrite)
    }

    fn loc(g: &FlashGeometry, plane: usize) -> PhysicalLocation {
        PhysicalLocation::new(g.plane_addr(plane), 0, 0, 0)
    }

    #[test]
    fn transfer_formula() {
        let g = FlashGeometry::default();
        let mut t = FlashTiming::default();
        t.command_overhead_ns = 0;
        assert_eq!(transfer_ns(&g, &t, 4).unwrap(), 40_960);
        t.command_overhead_ns = 200;
        assert_eq!(transfer_ns(&g, &t, 1).unwrap(), 10_440);
        assert!(matches!(
            transfer_ns(&g, &t, 0),
            Err(FlashError::InvalidSectorCount { .. })
        ));
    }

    #[test]
    fn rate_parsing_is_exact() {
        assert_eq!(parse_rate("0.4"), Some(Ratio::new(2, 5)));
        assert_eq!(parse_rate("12"), Some(Ratio::from_integer(12)));
        assert_eq!(parse_rate(".5"), Some(Ratio::new(1, 2)));
        assert_eq!(parse_rate("abc"), None);
        assert_eq!(parse_rate("-1"), None);
        assert_eq!(format_rate(&Ratio::new(2, 5)), "0.4");
        assert_eq!(format_rate(&Ratio::new(1024, 1)), "1024");
    }

    #[test]
    fn single_program_on_idle_device() {
        let g = geometry(2, 1, 1, 2);
        let mut fb = FlashBackend::new(g, timing_40us()).unwrap();
        let mut txn = program(loc(&g, 0));
        let w = fb.submit(&mut txn, SimTime(1_000)).unwrap();
        assert_eq!(w.complete, SimTime(1_000 + 700_000));
        assert_eq!(txn.complete_time, Some(SimTime(701_000)));
    }

    #[test]
    fn same_channel_programs_serialize_on_bus_only() {
        let g = geometry(1, 1, 1, 2);
        let mut fb = FlashBackend::new(g, timing_40us()).unwrap();
        let a = fb.submit(&mut program(loc(&g, 0)), SimTime(0)).unwrap();
        let b = fb.submit(&mut program(loc(&g, 1)), SimTime(0)).unwrap();
        assert_eq!(a.complete, SimTime(40_000 + 660_000));
        assert_eq!(b.complete, SimTime(80_000 + 660_000));
    }

    #[test]
    fn same_plane_programs_serialize_on_array() {
        let g = geometry(1, 1, 1, 1);
        let mut fb = FlashBackend::new(g, timing_40us()).unwrap();
        let a = fb.submit(&mut program(loc(&g, 0)), SimTime(0)).unwrap();
        let b = fb.submit(&mut program(loc(&g, 0)), SimTime(0)).unwrap();
        assert_eq!(a.complete, SimTime(700_000));
        assert_eq!(b.complete, SimTime(1_360_000));
    }

    #[test]
    fn read_uses_plane_then_bus() {
        let g = geometry(1, 1, 1, 1);
        let t = FlashTiming::default();
        let mut fb = FlashBackend::new(g, t).unwrap();
        let mut txn = FlashTransaction::new(TxnKind::Read, loc(&g, 0), SectorMask::single(2), TxnCause::HostRead);
        let w = fb.submit(&mut txn, SimTime(0)).unwrap();
        assert_eq!(w.array, (SimTime(0), SimTime(50_000)));
        assert_eq!(w.complete, SimTime(50_000 + 10_440));
    }

    #[test]
    fn erase_occupies_plane_only() {
        let g = geometry(1, 1, 1, 1);
        let mut fb = FlashBackend::new(g, FlashTiming::default()).unwrap();
        let mut txn = FlashTransaction::new(TxnKind::Erase, loc(&g, 0), SectorMask::default(), TxnCause::Gc);
        let w = fb.submit(&mut txn, SimTime(5)).unwrap();
        assert_eq!(w.bus, None);
        assert_eq!(w.complete, SimTime(3_500_005));
    }

    #[test]
    fn bus_gap_is_reused() {
        // a read leaves the bus idle during tR; a program may slip in front
        let g = geometry(1, 1, 1, 2);
        let mut fb = FlashBackend::new(g, timing_40us()).unwrap();
        let mut read = FlashTransaction::new(TxnKind::Read, loc(&g, 0), SectorMask::single(0), TxnCause::HostRead);
        let r = fb.submit(&mut read, SimTime(0)).unwrap();
        let p = fb.submit(&mut program(loc(&g, 1)), SimTime(0)).unwrap();
        assert_eq!(r.bus.unwrap().0, SimTime(50_000));
        assert_eq!(p.bus.unwrap(), (SimTime(0), SimTime(40_000)));
    }

    #[test]
    fn out_of_geometry_rejected() {
        let g = geometry(1, 1, 1, 1);
        let mut fb = FlashBackend::new(g, FlashTiming::default()).unwrap();
        let mut bad = program(PhysicalLocation { channel: 3, ..loc(&g, 0) });
        assert!(matches!(fb.submit(&mut bad, SimTime(0)), Err(FlashError::OutOfGeometry(_))));
    }

    #[test]
    fn parallel_planes_versus_single_plane() {
        let n = 8;
        let g = geometry(n, 1, 1, 1);
        let t = timing_40us();
        let mut spread = FlashBackend::new(g, t).unwrap();
        let ends: Vec<_> = (0..n as usize)
            .map(|p| spread.submit(&mut program(loc(&g, p)), SimTime(0)).unwrap().complete)
            .collect();
        assert!(ends.iter().all(|&e| e == SimTime(700_000)));

        let mut single = FlashBackend::new(g, t).unwrap();
        let last = (0..n)
            .map(|_| single.submit(&mut program(loc(&g, 0)), SimTime(0)).unwrap().complete)
            .max()
            .unwrap();
        assert!(last.ns() >= 40_000 + u64::from(n) * t.program_ns);
    }

    #[test]
    fn plane_index_roundtrip() {
        let g = geometry(3, 2, 2, 2);
        for i in 0..g.total_planes() as usize {
            assert_eq!(g.plane_index(g.plane_addr(i)), i);
        }
        let l = PhysicalLocation::new(g.plane_addr(5), 3, 2, 1);
        assert_eq!(g.location_of_sector(g.sector_index(&l)), l);
    }

    fn overlaps(mut v: Vec<(SimTime, SimTime)>) -> bool {
        v.sort();
        v.windows(2).any(|w| w[1].0 < w[0].1)
    }

    proptest! {
        #[test]
        fn resources_never_double_booked(
            ops in proptest::collection::vec((0u8..3, 0usize..4, 0u64..2_000_000, 1u32..=4), 1..60)
        ) {
            let g = geometry(2, 1, 1, 2);
            let mut fb = FlashBackend::new(g, FlashTiming::default()).unwrap().with_recording();
            let mut ops = ops;
            ops.sort_by_key(|o| o.2);
            for (kind, plane, at, sectors) in ops {
                let kind = [TxnKind::Read, TxnKind::Program, TxnKind::Erase][kind as usize];
                let mut txn = FlashTransaction::new(kind, loc(&g, plane), SectorMask::full(sectors), TxnCause::HostRead);
                let w = fb.submit(&mut txn, SimTime(at)).unwrap();
                prop_assert!(w.complete >= SimTime(at));
            }
            for p in 0..4 {
                let a: Vec<_> = fb.recorded().iter()
                    .filter(|(_, l, _)| g.plane_index(l.plane_addr()) == p)
                    .map(|(_, _, w)| w.array).collect();
                prop_assert!(!overlaps(a));
            }
            for c in 0..2 {
                let b: Vec<_> = fb.recorded().iter()
                    .filter(|(_, l, _)| l.channel == c)
                    .filter_map(|(_, _, w)| w.bus).collect();
                prop_assert!(!overlaps(b));
            }
        }
    }
}
