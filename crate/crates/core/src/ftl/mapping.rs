//! Logical-to-physical translation state.

use std::fmt;
use std::str::FromStr;

use crate::flash::FlashGeometry;

/// Accounting size of one mapping entry.
pub const ENTRY_BYTES: u64 = 4;

const UNMAPPED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MappingMode {
    /// One entry per flash page.
    Coarse,
    /// One entry per sector.
    Fine,
}

impl MappingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MappingMode::Coarse => "coarse",
            MappingMode::Fine => "fine",
        }
    }
}

impl fmt::Display for MappingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MappingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "coarse" => Ok(MappingMode::Coarse),
            "fine" => Ok(MappingMode::Fine),
            other => Err(format!("unknown mapping `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappingGranularity {
    pub mode: MappingMode,
    pub unit_bytes: u32,
}

impl MappingGranularity {
    pub fn new(mode: MappingMode, geometry: &FlashGeometry) -> Self {
        let unit_bytes = match mode {
            MappingMode::Coarse => geometry.page_bytes,
            MappingMode::Fine => geometry.sector_bytes,
        };
        MappingGranularity { mode, unit_bytes }
    }

    pub fn units_per_page(&self, geometry: &FlashGeometry) -> u32 {
        geometry.page_bytes / self.unit_bytes
    }

    pub fn sectors_per_unit(&self, geometry: &FlashGeometry) -> u32 {
        self.unit_bytes / geometry.sector_bytes
    }
}

/// Mapping-table size needed to cover `capacity_bytes` at `granularity`.
pub fn table_footprint_bytes(granularity: &MappingGranularity, capacity_bytes: u64) -> u64 {
    (capacity_bytes / u64::from(granularity.unit_bytes)) * ENTRY_BYTES
}

/// Forward (logical unit to physical unit) and reverse maps. A physical
/// unit is a page under coarse mapping and a sector under fine mapping; a
/// physical unit is valid exactly when the reverse map names an owner.
#[derive(Debug, Clone)]
pub struct MappingTable {
    granularity: MappingGranularity,
    forward: Vec<u32>,
    reverse: Vec<u32>,
    mapped: u64,
}

impl MappingTable {
    pub fn new(granularity: MappingGranularity, logical_units: u64, physical_units: u64) -> Self {
        MappingTable {
            granularity,
            forward: vec![UNMAPPED; logical_units as usize],
            reverse: vec![UNMAPPED; physical_units as usize],
            mapped: 0,
        }
    }

    pub fn granularity(&self) -> MappingGranularity {
        self.granularity
    }

    pub fn logical_units(&self) -> u64 {
        self.forward.len() as u64
    }

    pub fn mapped_units(&self) -> u64 {
        self.mapped
    }

    pub fn lookup(&self, unit: u64) -> Option<u64> {
        match self.forward[unit as usize] {
            UNMAPPED => None,
            p => Some(u64::from(p)),
        }
    }

    pub fn owner(&self, physical: u64) -> Option<u64> {
        match self.reverse[physical as usize] {
            UNMAPPED => None,
            l => Some(u64::from(l)),
        }
    }

    pub fn is_valid(&self, physical: u64) -> bool {
        self.reverse[physical as usize] != UNMAPPED
    }

    /// Points `unit` at `physical`, returning the superseded physical unit.
    pub fn remap(&mut self, unit: u64, physical: u64) -> Option<u64> {
        debug_assert!(!self.is_valid(physical), "physical unit already owned");
        let old = self.unmap(unit);
        self.forward[unit as usize] = physical as u32;
        self.reverse[physical as usize] = unit as u32;
        self.mapped += 1;
        old
    }

    pub fn unmap(&mut self, unit: u64) -> Option<u64> {
        let old = self.lookup(unit)?;
        self.forward[unit as usize] = UNMAPPED;
        self.reverse[old as usize] = UNMAPPED;
        self.mapped -= 1;
        Some(old)
    }

    /// Entry count times entry size.
    pub fn footprint_bytes(&self) -> u64 {
        self.logical_units() * ENTRY_BYTES
    }

    /// Checks that forward and reverse maps agree.
    pub fn is_consistent(&self) -> bool {
        let mut count = 0;
        for (unit, &p) in self.forward.iter().enumerate() {
            if p != UNMAPPED {
                count += 1;
                if self.reverse[p as usize] as usize != unit {
                    return false;
                }
            }
        }
        let owners = self.reverse.iter().filter(|&&l| l != UNMAPPED).count() as u64;
        count == self.mapped && owners == self.mapped
    }
}
