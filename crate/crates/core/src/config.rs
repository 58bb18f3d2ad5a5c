//! Run configuration as a flat `key = value` file. `#` starts a comment.
//!
//! ```text
//! channels = 8
//! mapping = fine     # coarse | fine
//! bus_bytes_per_ns = 0.4
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::flash::{format_rate, parse_rate, FlashGeometry, FlashTiming};
use crate::ftl::{AllocationMode, AllocationPolicy, FtlConfig, GcConfig, MappingMode, Scheme};
use crate::gpu::{SchedPolicy, SchedulerConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("cannot read {path}: {reason}")]
    MissingFile { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub const KEYS: [&str; 24] = [
    "channels",
    "ways_per_channel",
    "dies_per_way",
    "planes_per_die",
    "blocks_per_plane",
    "pages_per_block",
    "page_bytes",
    "sector_bytes",
    "read_ns",
    "program_ns",
    "erase_ns",
    "bus_bytes_per_ns",
    "cmd_overhead_ns",
    "mapping",
    "allocation",
    "scheme",
    "gc_free_threshold",
    "queue_depth",
    "queue_count",
    "policy",
    "block_stride",
    "core_count",
    "chunk_len",
    "seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub geometry: FlashGeometry,
    pub timing: FlashTiming,
    pub mapping: MappingMode,
    pub allocation: AllocationMode,
    pub scheme: Scheme,
    pub gc_free_threshold: f64,
    pub queue_depth: u32,
    /// Submission queues; 0 gives one per workload.
    pub queue_count: u32,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            geometry: FlashGeometry::default(),
            timing: FlashTiming::default(),
            mapping: MappingMode::Fine,
            allocation: AllocationMode::Dynamic,
            scheme: Scheme::Cwdp,
            gc_free_threshold: GcConfig::default().free_block_threshold,
            queue_depth: 256,
            queue_count: 0,
            scheduler: SchedulerConfig::default(),
            seed: 0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn enumeration<T: std::str::FromStr<Err = String>>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|reason| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason,
    })
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let g = &mut self.geometry;
        let t = &mut self.timing;
        match key {
            "channels" => g.channels = num(key, value)?,
            "ways_per_channel" => g.ways_per_channel = num(key, value)?,
            "dies_per_way" => g.dies_per_way = num(key, value)?,
            "planes_per_die" => g.planes_per_die = num(key, value)?,
            "blocks_per_plane" => g.blocks_per_plane = num(key, value)?,
            "pages_per_block" => g.pages_per_block = num(key, value)?,
            "page_bytes" => g.page_bytes = num(key, value)?,
            "sector_bytes" => g.sector_bytes = num(key, value)?,
            "read_ns" => t.read_ns = num(key, value)?,
            "program_ns" => t.program_ns = num(key, value)?,
            "erase_ns" => t.erase_ns = num(key, value)?,
            "bus_bytes_per_ns" => {
                t.channel_bytes_per_ns = parse_rate(value).ok_or_else(|| ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    reason: "expected a positive decimal".into(),
                })?
            }
            "cmd_overhead_ns" => t.command_overhead_ns = num(key, value)?,
            "mapping" => self.mapping = enumeration(key, value)?,
            "allocation" => self.allocation = enumeration(key, value)?,
            "scheme" => self.scheme = enumeration(key, value)?,
            "gc_free_threshold" => self.gc_free_threshold = num(key, value)?,
            "queue_depth" => self.queue_depth = num(key, value)?,
            "queue_count" => self.queue_count = num(key, value)?,
            "policy" => self.scheduler.policy = enumeration(key, value)?,
            "block_stride" => self.scheduler.block_stride = num(key, value)?,
            "core_count" => self.scheduler.core_count = num(key, value)?,
            "chunk_len" => self.scheduler.chunk_len = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::MissingFile {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let g = &self.geometry;
        let t = &self.timing;
        let s = &self.scheduler;
        Some(match key {
            "channels" => g.channels.to_string(),
            "ways_per_channel" => g.ways_per_channel.to_string(),
            "dies_per_way" => g.dies_per_way.to_string(),
            "planes_per_die" => g.planes_per_die.to_string(),
            "blocks_per_plane" => g.blocks_per_plane.to_string(),
            "pages_per_block" => g.pages_per_block.to_string(),
            "page_bytes" => g.page_bytes.to_string(),
            "sector_bytes" => g.sector_bytes.to_string(),
            "read_ns" => t.read_ns.to_string(),
            "program_ns" => t.program_ns.to_string(),
            "erase_ns" => t.erase_ns.to_string(),
            "bus_bytes_per_ns" => format_rate(&t.channel_bytes_per_ns),
            "cmd_overhead_ns" => t.command_overhead_ns.to_string(),
            "mapping" => self.mapping.to_string(),
            "allocation" => self.allocation.to_string(),
            "scheme" => self.scheme.to_string(),
            "gc_free_threshold" => self.gc_free_threshold.to_string(),
            "queue_depth" => self.queue_depth.to_string(),
            "queue_count" => self.queue_count.to_string(),
            "policy" => s.policy.to_string(),
            "block_stride" => s.block_stride.to_string(),
            "core_count" => s.core_count.to_string(),
            "chunk_len" => s.chunk_len.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Every key in canonical order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.geometry.validate().map_err(|e| invalid(&e))?;
        self.timing.validate().map_err(|e| invalid(&e))?;
        self.scheduler.validate().map_err(|e| invalid(&e))?;
        if !(self.gc_free_threshold > 0.0 && self.gc_free_threshold < 1.0) {
            return Err(ConfigError::BadValue {
                key: "gc_free_threshold".into(),
                value: self.gc_free_threshold.to_string(),
                reason: "must be in (0, 1)".into(),
            });
        }
        if self.queue_depth == 0 {
            return Err(ConfigError::BadValue {
                key: "queue_depth".into(),
                value: "0".into(),
                reason: "must be >= 1".into(),
            });
        }
        Ok(())
    }

    pub fn ftl_config(&self) -> FtlConfig {
        FtlConfig {
            mapping: self.mapping,
            allocation: AllocationPolicy {
                mode: self.allocation,
                scheme: self.scheme,
            },
            gc: GcConfig {
                free_block_threshold: self.gc_free_threshold,
                enabled: true,
            },
            track_content: false,
        }
    }

    pub fn policy(&self) -> SchedPolicy {
        self.scheduler.policy
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_named() {
        assert_eq!(
            RunConfig::parse("chanels = 4"),
            Err(ConfigError::UnknownKey { key: "chanels".into() })
        );
    }

    #[test]
    fn comments_and_values() {
        let cfg = RunConfig::parse("# preset\nchannels = 2 # two\n\nmapping=coarse\nbus_bytes_per_ns = 1.25\npolicy = large_chunk\n").unwrap();
        assert_eq!(cfg.geometry.channels, 2);
        assert_eq!(cfg.mapping, MappingMode::Coarse);
        assert_eq!(format_rate(&cfg.timing.channel_bytes_per_ns), "1.25");
        assert_eq!(cfg.scheduler.policy, SchedPolicy::LargeChunk);
    }

    #[test]
    fn bad_enum_and_syntax() {
        assert!(matches!(RunConfig::parse("scheme = xyz"), Err(ConfigError::BadValue { key, .. }) if key == "scheme"));
        assert_eq!(RunConfig::parse("channels"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(RunConfig::parse("channels = 0"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            RunConfig::load(Path::new("/nonexistent/x.cfg")),
            Err(ConfigError::MissingFile { .. })
        ));
    }

    #[test]
    fn every_key_settable() {
        let cfg = RunConfig::default();
        for key in KEYS {
            let mut c = cfg.clone();
            c.set(key, &cfg.get(key).unwrap()).unwrap();
            assert_eq!(c, cfg, "{key}");
        }
    }
}
