//! Flash translation layer.
//!
//! Host writes arrive as page-scoped [`WriteFragment`]s. Coarse mapping
//! writes whole pages, reading the old page first when a mapped page is only
//! partially overwritten. Fine mapping packs sectors into an open page per
//! plane and programs a page once it fills or on [`Ftl::flush`].
//!
//! Physical placement is either static (plane picked from the logical page
//! number) or dynamic (a global round-robin cursor over the scheme's plane
//! order, advanced once per newly opened page). Garbage collection is greedy
//! by valid-sector count and runs per plane whenever a plane is about to open
//! a block while its erased-block count sits below the low-water mark.

mod mapping;
mod order;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::flash::{
    FlashError, FlashGeometry, FlashTransaction, PhysicalLocation, PlaneAddr, RequestId,
    SectorMask, TxnCause, TxnKind,
};

pub use mapping::{
    table_footprint_bytes, MappingGranularity, MappingMode, MappingTable, ENTRY_BYTES,
};
pub use order::{format_plane_order, plane_order, Scheme};

const NO_DATA: u64 = u64::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum FtlError {
    #[error("no erased page left in any eligible plane")]
    OutOfSpace,
    #[error("logical page {lpn} is beyond the {logical_pages}-page logical space")]
    OutOfRange { lpn: u64, logical_pages: u64 },
    #[error("sector range {first}+{count} does not fit in a page")]
    UnalignedAccess { first: u32, count: u32 },
    #[error("geometry leaves no room for data: {0}")]
    GeometryTooSmall(String),
    #[error("invalid gc threshold {0}")]
    InvalidGcThreshold(f64),
    #[error(transparent)]
    Flash(#[from] FlashError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AllocationMode {
    Static,
    Dynamic,
}

impl AllocationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AllocationMode::Static => "static",
            AllocationMode::Dynamic => "dynamic",
        }
    }
}

impl fmt::Display for AllocationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AllocationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "static" => Ok(AllocationMode::Static),
            "dynamic" => Ok(AllocationMode::Dynamic),
            other => Err(format!("unknown allocation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocationPolicy {
    pub mode: AllocationMode,
    pub scheme: Scheme,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcConfig {
    pub free_block_threshold: f64,
    pub enabled: bool,
}

impl Default for GcConfig {
    fn default() -> Self {
        GcConfig {
            free_block_threshold: 0.05,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FtlConfig {
    pub mapping: MappingMode,
    pub allocation: AllocationPolicy,
    pub gc: GcConfig,
    /// Keep a version tag per physical sector so reads can be checked.
    pub track_content: bool,
}

/// A write confined to one logical page.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteFragment {
    pub lpn: u64,
    pub first_sector: u32,
    pub sector_count: u32,
    pub origin: Option<RequestId>,
    /// Content version written to every sector of the fragment.
    pub tag: Option<u64>,
}

impl WriteFragment {
    pub fn new(lpn: u64, first_sector: u32, sector_count: u32) -> Self {
        WriteFragment {
            lpn,
            first_sector,
            sector_count,
            origin: None,
            tag: None,
        }
    }

    pub fn with_origin(mut self, origin: RequestId) -> Self {
        self.origin = Some(origin);
        self
    }

    pub fn with_tag(mut self, tag: u64) -> Self {
        self.tag = Some(tag);
        self
    }

    fn mask(&self) -> SectorMask {
        SectorMask::range(self.first_sector, self.sector_count)
    }
}

/// Transactions grouped into stages; a stage is issued once every
/// transaction of the previous stage has completed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TxnChain {
    pub stages: Vec<Vec<FlashTransaction>>,
}

impl TxnChain {
    fn single(txn: FlashTransaction) -> Self {
        TxnChain {
            stages: vec![vec![txn]],
        }
    }

    pub fn transactions(&self) -> impl Iterator<Item = &FlashTransaction> {
        self.stages.iter().flatten()
    }

    pub fn is_gc(&self) -> bool {
        self.transactions().any(|t| t.cause == TxnCause::Gc && t.kind == TxnKind::Erase)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadPiece {
    Flash {
        location: PhysicalLocation,
        sectors: SectorMask,
    },
    /// Never-written sectors; served as zeros without touching flash.
    Unmapped { sectors: u32 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FtlStats {
    pub host_programs: u64,
    pub rmw_reads: u64,
    pub gc_runs: u64,
    pub gc_relocated_sectors: u64,
    pub invalidated_sectors: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockState {
    Free,
    Active,
    Full,
}

#[derive(Debug, Clone)]
struct BlockInfo {
    state: BlockState,
    valid_sectors: u32,
}

#[derive(Debug, Clone)]
struct OpenPage {
    block: u32,
    page: u32,
    filled: u32,
    slots: SectorMask,
    origins: Vec<RequestId>,
    host: bool,
}

#[derive(Debug, Clone)]
struct PlaneState {
    blocks: Vec<BlockInfo>,
    free: VecDeque<u32>,
    active: Option<(u32, u32)>,
    open: Option<OpenPage>,
}

pub struct Ftl {
    geometry: FlashGeometry,
    config: FtlConfig,
    granularity: MappingGranularity,
    order: Vec<usize>,
    planes: Vec<PlaneState>,
    table: MappingTable,
    content: Option<Vec<u64>>,
    logical_pages: u64,
    cursor: usize,
    dynamic_open: Option<usize>,
    low_water: u32,
    in_gc: bool,
    pending: Vec<TxnChain>,
    stats: FtlStats,
}

impl Ftl {
    pub fn new(geometry: FlashGeometry, config: FtlConfig) -> Result<Self, FtlError> {
        geometry.validate()?;
        let t = config.gc.free_block_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(FtlError::InvalidGcThreshold(t));
        }
        let blocks = geometry.blocks_per_plane;
        let low_water = ((t * f64::from(blocks)).ceil() as u32).max(2);
        let spare = low_water + 2;
        if blocks <= spare {
            return Err(FtlError::GeometryTooSmall(format!(
                "{blocks} blocks per plane but {spare} are held back for garbage collection"
            )));
        }
        let planes = geometry.total_planes();
        let logical_pages =
            u64::from(planes) * u64::from(blocks - spare) * u64::from(geometry.pages_per_block);

        let granularity = MappingGranularity::new(config.mapping, &geometry);
        let spp = u64::from(geometry.sectors_per_page());
        let (logical_units, physical_units) = match config.mapping {
            MappingMode::Coarse => (logical_pages, geometry.total_pages()),
            MappingMode::Fine => (logical_pages * spp, geometry.total_sectors()),
        };
        let table = MappingTable::new(granularity, logical_units, physical_units);
        let order = plane_order(config.allocation.scheme, &geometry)
            .into_iter()
            .map(|p| geometry.plane_index(p))
            .collect();
        let plane_state = PlaneState {
            blocks: vec![
                BlockInfo {
                    state: BlockState::Free,
                    valid_sectors: 0,
                };
                blocks as usize
            ],
            free: (0..blocks).collect(),
            active: None,
            open: None,
        };
        let content = config
            .track_content
            .then(|| vec![NO_DATA; geometry.total_sectors() as usize]);
        Ok(Ftl {
            planes: vec![plane_state; planes as usize],
            geometry,
            config,
            granularity,
            order,
            table,
            content,
            logical_pages,
            cursor: 0,
            dynamic_open: None,
            low_water,
            in_gc: false,
            pending: Vec::new(),
            stats: FtlStats::default(),
        })
    }

    pub fn geometry(&self) -> &FlashGeometry {
        &self.geometry
    }

    pub fn config(&self) -> &FtlConfig {
        &self.config
    }

    pub fn granularity(&self) -> MappingGranularity {
        self.granularity
    }

    pub fn table(&self) -> &MappingTable {
        &self.table
    }

    pub fn stats(&self) -> FtlStats {
        self.stats
    }

    /// Size of the host-visible address space in pages.
    pub fn logical_pages(&self) -> u64 {
        self.logical_pages
    }

    pub fn logical_bytes(&self) -> u64 {
        self.logical_pages * u64::from(self.geometry.page_bytes)
    }

    pub fn free_blocks(&self, plane: PlaneAddr) -> usize {
        self.planes[self.geometry.plane_index(plane)].free.len()
    }

    pub fn block_valid_sectors(&self, plane: PlaneAddr, block: u32) -> u32 {
        self.planes[self.geometry.plane_index(plane)].blocks[block as usize].valid_sectors
    }

    fn spp(&self) -> u32 {
        self.geometry.sectors_per_page()
    }

    fn loc(&self, plane: usize, block: u32, page: u32, sector: u32) -> PhysicalLocation {
        PhysicalLocation::new(self.geometry.plane_addr(plane), block, page, sector)
    }

    fn check_fragment(&self, lpn: u64, first: u32, count: u32) -> Result<(), FtlError> {
        if lpn >= self.logical_pages {
            return Err(FtlError::OutOfRange {
                lpn,
                logical_pages: self.logical_pages,
            });
        }
        if count == 0 || first + count > self.spp() {
            return Err(FtlError::UnalignedAccess { first, count });
        }
        Ok(())
    }

    fn static_plane(&self, lpn: u64) -> usize {
        self.order[(lpn % self.order.len() as u64) as usize]
    }

    fn sector_of(&self, plane: usize, block: u32, page: u32, slot: u32) -> u64 {
        self.geometry
            .sector_index(&self.loc(plane, block, page, slot))
    }

    /// Reserves the next erased page of `plane`, collecting garbage first if
    /// a new block must be opened while erased blocks are scarce.
    fn take_page(&mut self, plane: usize) -> Result<(u32, u32), FtlError> {
        if self.planes[plane].active.is_none()
            && !self.in_gc
            && self.config.gc.enabled
            && self.below_low_water(plane)
        {
            self.collect_plane(plane)?;
        }
        let ppb = self.geometry.pages_per_block;
        let ps = &mut self.planes[plane];
        let (block, page) = match ps.active {
            Some(bp) => bp,
            None => {
                let block = ps.free.pop_front().ok_or(FtlError::OutOfSpace)?;
                ps.blocks[block as usize].state = BlockState::Active;
                (block, 0)
            }
        };
        if page + 1 == ppb {
            ps.blocks[block as usize].state = BlockState::Full;
            ps.active = None;
        } else {
            ps.active = Some((block, page + 1));
        }
        Ok((block, page))
    }

    fn below_low_water(&self, plane: usize) -> bool {
        // low_water >= ceil(threshold * blocks), so this covers the fraction test
        (self.planes[plane].free.len() as u32) < self.low_water
    }

    fn collect_plane(&mut self, plane: usize) -> Result<(), FtlError> {
        for _ in 0..self.geometry.blocks_per_plane {
            if !self.below_low_water(plane) {
                break;
            }
            match self.gc_once(plane, false)? {
                Some(chain) => self.pending.push(chain),
                None => break,
            }
        }
        Ok(())
    }

    fn next_dynamic_plane(&mut self) -> usize {
        let p = self.order[self.cursor];
        self.cursor = (self.cursor + 1) % self.order.len();
        p
    }

    /// Takes a fresh page on the next plane the policy allows.
    fn place_page(&mut self, lpn: u64) -> Result<(usize, u32, u32), FtlError> {
        match self.config.allocation.mode {
            AllocationMode::Static => {
                let plane = self.static_plane(lpn);
                let (b, pg) = self.take_page(plane)?;
                Ok((plane, b, pg))
            }
            AllocationMode::Dynamic => {
                for _ in 0..self.order.len() {
                    let plane = self.next_dynamic_plane();
                    match self.take_page(plane) {
                        Ok((b, pg)) => return Ok((plane, b, pg)),
                        Err(FtlError::OutOfSpace) => continue,
                        Err(e) => return Err(e),
                    }
                }
                Err(FtlError::OutOfSpace)
            }
        }
    }

    fn invalidate_physical(&mut self, physical: u64) {
        let spu = self.granularity.sectors_per_unit(&self.geometry);
        let first_sector = physical * u64::from(spu);
        let loc = self.geometry.location_of_sector(first_sector);
        let plane = self.geometry.plane_index(loc.plane_addr());
        self.planes[plane].blocks[loc.block as usize].valid_sectors -= spu;
        self.stats.invalidated_sectors += u64::from(spu);
    }

    fn validate_physical(&mut self, plane: usize, block: u32) {
        let spu = self.granularity.sectors_per_unit(&self.geometry);
        self.planes[plane].blocks[block as usize].valid_sectors += spu;
    }

    /// Applies a batch of host writes and returns the transactions that are
    /// ready to issue. Under fine mapping, sectors left in partially filled
    /// pages stay buffered until [`Ftl::flush`].
    pub fn allocate_write(&mut self, batch: &[WriteFragment]) -> Result<Vec<TxnChain>, FtlError> {
        for f in batch {
            self.check_fragment(f.lpn, f.first_sector, f.sector_count)?;
        }
        match self.config.mapping {
            MappingMode::Coarse => self.write_coarse(batch)?,
            MappingMode::Fine => {
                for f in batch {
                    self.write_fine(f)?;
                }
            }
        }
        Ok(std::mem::take(&mut self.pending))
    }

    fn write_coarse(&mut self, batch: &[WriteFragment]) -> Result<(), FtlError> {
        // merge fragments touching the same page, first-appearance order
        struct Merged {
            lpn: u64,
            mask: SectorMask,
            origins: Vec<RequestId>,
            tags: Vec<(SectorMask, Option<u64>)>,
        }
        let mut merged: Vec<Merged> = Vec::new();
        for f in batch {
            let slot = match merged.iter().position(|m| m.lpn == f.lpn) {
                Some(i) => i,
                None => {
                    merged.push(Merged {
                        lpn: f.lpn,
                        mask: SectorMask::default(),
                        origins: Vec::new(),
                        tags: Vec::new(),
                    });
                    merged.len() - 1
                }
            };
            let m = &mut merged[slot];
            m.mask = m.mask.union(f.mask());
            if let Some(o) = f.origin {
                if !m.origins.contains(&o) {
                    m.origins.push(o);
                }
            }
            m.tags.push((f.mask(), f.tag));
        }

        let spp = self.spp();
        let full = SectorMask::full(spp);
        for m in merged {
            // placement may run GC, which can move the old copy
            let (plane, block, page) = self.place_page(m.lpn)?;
            let old = self.table.lookup(m.lpn);
            let new_loc = self.loc(plane, block, page, 0);

            if let Some(content) = self.content.as_mut() {
                let new_base = self.geometry.sector_index(&new_loc);
                for s in 0..spp {
                    let written = m
                        .tags
                        .iter()
                        .rev()
                        .find(|(mask, _)| mask.contains(s))
                        .map(|(_, tag)| tag.unwrap_or(NO_DATA));
                    content[(new_base + u64::from(s)) as usize] = match (written, old) {
                        (Some(tag), _) => tag,
                        (None, Some(old_page)) => content[(old_page * u64::from(spp) + u64::from(s)) as usize],
                        (None, None) => NO_DATA,
                    };
                }
            }

            let program = FlashTransaction::new(TxnKind::Program, new_loc, full, TxnCause::HostWrite)
                .with_origins(m.origins);
            let chain = match old {
                Some(old_page) if m.mask != full => {
                    let old_loc = self
                        .geometry
                        .location_of_sector(old_page * u64::from(spp));
                    self.stats.rmw_reads += 1;
                    TxnChain {
                        stages: vec![
                            vec![FlashTransaction::new(TxnKind::Read, old_loc, full, TxnCause::Rmw)],
                            vec![program],
                        ],
                    }
                }
                _ => TxnChain::single(program),
            };
            self.stats.host_programs += 1;

            let new_phys = self.geometry.page_index(&new_loc);
            if let Some(old_phys) = self.table.remap(m.lpn, new_phys) {
                self.invalidate_physical(old_phys);
            }
            self.validate_physical(plane, block);
            self.pending.push(chain);
        }
        Ok(())
    }

    fn write_fine(&mut self, f: &WriteFragment) -> Result<(), FtlError> {
        let spp = u64::from(self.spp());
        for s in f.first_sector..f.first_sector + f.sector_count {
            let unit = f.lpn * spp + u64::from(s);
            if let Some(old) = self.table.unmap(unit) {
                self.invalidate_physical(old);
            }
            let plane = self.fine_target_plane(f.lpn)?;
            if let Some(txn) = self.append_sector(plane, unit, f.origin, f.tag.unwrap_or(NO_DATA), true)? {
                self.stats.host_programs += 1;
                self.pending.push(TxnChain::single(txn));
            }
        }
        Ok(())
    }

    /// Plane whose open page receives the next host sector, opening a page
    /// if none is open.
    fn fine_target_plane(&mut self, lpn: u64) -> Result<usize, FtlError> {
        match self.config.allocation.mode {
            AllocationMode::Static => {
                let plane = self.static_plane(lpn);
                self.ensure_open(plane)?;
                Ok(plane)
            }
            AllocationMode::Dynamic => {
                if let Some(p) = self.dynamic_open {
                    if self.planes[p].open.is_some() {
                        return Ok(p);
                    }
                }
                for _ in 0..self.order.len() {
                    let plane = self.next_dynamic_plane();
                    match self.ensure_open(plane) {
                        Ok(()) => {
                            self.dynamic_open = Some(plane);
                            return Ok(plane);
                        }
                        Err(FtlError::OutOfSpace) => continue,
                        Err(e) => return Err(e),
                    }
                }
                Err(FtlError::OutOfSpace)
            }
        }
    }

    fn ensure_open(&mut self, plane: usize) -> Result<(), FtlError> {
        if self.planes[plane].open.is_none() {
            let (block, page) = self.take_page(plane)?;
            self.planes[plane].open = Some(OpenPage {
                block,
                page,
                filled: 0,
                slots: SectorMask::default(),
                origins: Vec::new(),
                host: false,
            });
        }
        Ok(())
    }

    /// Places one logical sector in `plane`'s open page; returns the page's
    /// PROGRAM if that filled it.
    fn append_sector(
        &mut self,
        plane: usize,
        unit: u64,
        origin: Option<RequestId>,
        tag: u64,
        host: bool,
    ) -> Result<Option<FlashTransaction>, FtlError> {
        self.ensure_open(plane)?;
        let spp = self.spp();
        let (block, page, slot) = {
            let open = self.planes[plane].open.as_mut().expect("page opened above");
            let slot = open.filled;
            open.filled += 1;
            open.slots.insert(slot);
            open.host |= host;
            if let Some(o) = origin {
                if !open.origins.contains(&o) {
                    open.origins.push(o);
                }
            }
            (open.block, open.page, slot)
        };
        let physical = self.sector_of(plane, block, page, slot);
        self.table.remap(unit, physical);
        self.validate_physical(plane, block);
        if let Some(content) = self.content.as_mut() {
            content[physical as usize] = tag;
        }
        if slot + 1 == spp {
            Ok(Some(self.close_open(plane)))
        } else {
            Ok(None)
        }
    }

    fn close_open(&mut self, plane: usize) -> FlashTransaction {
        let open = self.planes[plane].open.take().expect("open page present");
        if self.dynamic_open == Some(plane) {
            self.dynamic_open = None;
        }
        let cause = if open.host {
            TxnCause::HostWrite
        } else {
            TxnCause::Gc
        };
        FlashTransaction::new(
            TxnKind::Program,
            self.loc(plane, open.block, open.page, 0),
            open.slots,
            cause,
        )
        .with_origins(open.origins)
    }

    /// Programs every partially filled page and returns all outstanding
    /// transactions.
    pub fn flush(&mut self) -> Vec<TxnChain> {
        for &plane in &self.order.clone() {
            if self.planes[plane].open.is_some() {
                let txn = self.close_open(plane);
                if txn.cause == TxnCause::HostWrite {
                    self.stats.host_programs += 1;
                }
                self.pending.push(TxnChain::single(txn));
            }
        }
        self.dynamic_open = None;
        std::mem::take(&mut self.pending)
    }

    /// Current physical locations of a page-scoped logical range.
    pub fn translate_read(
        &self,
        lpn: u64,
        first_sector: u32,
        sector_count: u32,
    ) -> Result<Vec<ReadPiece>, FtlError> {
        self.check_fragment(lpn, first_sector, sector_count)?;
        let spp = u64::from(self.spp());
        let mask = SectorMask::range(first_sector, sector_count);
        let mut pieces = Vec::new();
        let mut unmapped = 0;
        match self.config.mapping {
            MappingMode::Coarse => match self.table.lookup(lpn) {
                Some(page) => pieces.push(ReadPiece::Flash {
                    location: self.geometry.location_of_sector(page * spp),
                    sectors: mask,
                }),
                None => unmapped = sector_count,
            },
            MappingMode::Fine => {
                for s in mask.iter() {
                    match self.table.lookup(lpn * spp + u64::from(s)) {
                        Some(physical) => {
                            let loc = self.geometry.location_of_sector(physical);
                            let page = loc.page_start();
                            let existing = pieces.iter_mut().find(|p| {
                                matches!(p, ReadPiece::Flash { location, .. } if *location == page)
                            });
                            match existing {
                                Some(ReadPiece::Flash { sectors, .. }) => sectors.insert(loc.sector),
                                _ => pieces.push(ReadPiece::Flash {
                                    location: page,
                                    sectors: SectorMask::single(loc.sector),
                                }),
                            }
                        }
                        None => unmapped += 1,
                    }
                }
            }
        }
        if unmapped > 0 {
            pieces.push(ReadPiece::Unmapped { sectors: unmapped });
        }
        Ok(pieces)
    }

    /// Content tags of a logical range (requires `track_content`). `None`
    /// means the sector reads back as zeros.
    pub fn read_content(
        &self,
        lpn: u64,
        first_sector: u32,
        sector_count: u32,
    ) -> Result<Vec<Option<u64>>, FtlError> {
        self.check_fragment(lpn, first_sector, sector_count)?;
        let content = self
            .content
            .as_ref()
            .expect("content tracking is disabled");
        let spp = u64::from(self.spp());
        let out = (first_sector..first_sector + sector_count)
            .map(|s| {
                let physical_sector = match self.config.mapping {
                    MappingMode::Coarse => self.table.lookup(lpn).map(|p| p * spp + u64::from(s)),
                    MappingMode::Fine => self.table.lookup(lpn * spp + u64::from(s)),
                };
                physical_sector
                    .map(|p| content[p as usize])
                    .filter(|&t| t != NO_DATA)
            })
            .collect();
        Ok(out)
    }

    /// Forces one greedy collection pass on `plane`.
    pub fn garbage_collect(&mut self, plane: PlaneAddr) -> Result<Vec<TxnChain>, FtlError> {
        let idx = self.geometry.plane_index(plane);
        if let Some(chain) = self.gc_once(idx, true)? {
            self.pending.push(chain);
        }
        Ok(std::mem::take(&mut self.pending))
    }

    fn pick_victim(&self, plane: usize) -> Option<u32> {
        let open_block = self.planes[plane].open.as_ref().map(|o| o.block as usize);
        self.planes[plane]
            .blocks
            .iter()
            .enumerate()
            .filter(|(i, b)| b.state == BlockState::Full && Some(*i) != open_block)
            .min_by_key(|(i, b)| (b.valid_sectors, *i))
            .map(|(i, _)| i as u32)
    }

    fn gc_once(&mut self, plane: usize, forced: bool) -> Result<Option<TxnChain>, FtlError> {
        let Some(victim) = self.pick_victim(plane) else {
            return Ok(None);
        };
        let sectors_per_block = self.geometry.sectors_per_block();
        if !forced && self.planes[plane].blocks[victim as usize].valid_sectors >= sectors_per_block {
            return Ok(None);
        }
        self.in_gc = true;
        let result = self.relocate_block(plane, victim);
        self.in_gc = false;
        let (reads, programs) = result?;

        let ps = &mut self.planes[plane];
        debug_assert_eq!(ps.blocks[victim as usize].valid_sectors, 0);
        ps.blocks[victim as usize].state = BlockState::Free;
        ps.free.push_back(victim);
        self.stats.gc_runs += 1;

        let erase = FlashTransaction::new(
            TxnKind::Erase,
            self.loc(plane, victim, 0, 0),
            SectorMask::default(),
            TxnCause::Gc,
        );
        let stages = [reads, programs, vec![erase]]
            .into_iter()
            .filter(|s| !s.is_empty())
            .collect();
        Ok(Some(TxnChain { stages }))
    }

    fn relocate_block(
        &mut self,
        plane: usize,
        victim: u32,
    ) -> Result<(Vec<FlashTransaction>, Vec<FlashTransaction>), FtlError> {
        let spp = self.spp();
        let full = SectorMask::full(spp);
        let mut reads = Vec::new();
        let mut programs = Vec::new();
        for page in 0..self.geometry.pages_per_block {
            let page_loc = self.loc(plane, victim, page, 0);
            match self.config.mapping {
                MappingMode::Coarse => {
                    let phys = self.geometry.page_index(&page_loc);
                    let Some(lpn) = self.table.owner(phys) else {
                        continue;
                    };
                    reads.push(FlashTransaction::new(TxnKind::Read, page_loc, full, TxnCause::Gc));
                    let (block, new_page) = self.take_page(plane)?;
                    let new_loc = self.loc(plane, block, new_page, 0);
                    if let Some(content) = self.content.as_mut() {
                        let from = phys * u64::from(spp);
                        let to = self.geometry.sector_index(&new_loc);
                        for s in 0..u64::from(spp) {
                            content[(to + s) as usize] = content[(from + s) as usize];
                        }
                    }
                    self.table.remap(lpn, self.geometry.page_index(&new_loc));
                    self.invalidate_physical(phys);
                    self.validate_physical(plane, block);
                    self.stats.invalidated_sectors -= u64::from(spp);
                    self.stats.gc_relocated_sectors += u64::from(spp);
                    programs.push(FlashTransaction::new(TxnKind::Program, new_loc, full, TxnCause::Gc));
                }
                MappingMode::Fine => {
                    let base = self.geometry.sector_index(&page_loc);
                    let live: Vec<(u32, u64)> = (0..spp)
                        .filter_map(|s| self.table.owner(base + u64::from(s)).map(|u| (s, u)))
                        .collect();
                    if live.is_empty() {
                        continue;
                    }
                    let mut mask = SectorMask::default();
                    for &(s, _) in &live {
                        mask.insert(s);
                    }
                    reads.push(FlashTransaction::new(TxnKind::Read, page_loc, mask, TxnCause::Gc));
                    for (s, unit) in live {
                        let from = base + u64::from(s);
                        let tag = self.content.as_ref().map_or(NO_DATA, |c| c[from as usize]);
                        self.table.unmap(unit);
                        self.invalidate_physical(from);
                        self.stats.invalidated_sectors -= 1;
                        self.stats.gc_relocated_sectors += 1;
                        if let Some(txn) = self.append_sector(plane, unit, None, tag, false)? {
                            programs.push(txn);
                        }
                    }
                }
            }
        }
        if self.planes[plane].open.is_some() {
            programs.push(self.close_open(plane));
        }
        Ok((reads, programs))
    }

    /// Checks mapping consistency and per-block valid counts against the
    /// reverse map. Intended for tests.
    pub fn check_integrity(&self) -> bool {
        if !self.table.is_consistent() {
            return false;
        }
        let spu = u64::from(self.granularity.sectors_per_unit(&self.geometry));
        let units_per_block = u64::from(self.geometry.sectors_per_block()) / spu;
        for (p, ps) in self.planes.iter().enumerate() {
            for (b, info) in ps.blocks.iter().enumerate() {
                let first = (p as u64 * u64::from(self.geometry.blocks_per_plane) + b as u64)
                    * units_per_block;
                let valid = (first..first + units_per_block)
                    .filter(|&u| self.table.is_valid(u))
                    .count() as u64
                    * spu;
                if valid != u64::from(info.valid_sectors) {
                    return false;
                }
                if info.state == BlockState::Free && valid != 0 {
                    return false;
                }
            }
        }
        true
    }
}
