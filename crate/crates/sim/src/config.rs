//! JSON run configuration: topology, collector memory map and workload.

use std::path::Path;

use dta_core::counters::MergeOp;
use dta_core::wire::MAX_PAYLOAD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub seed: u64,
    /// Hard stop for the event loop.
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    pub topology: Topology,
    pub workload: Workload,
}

fn default_max_steps() -> u64 {
    1_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default = "one")]
    pub reporters: u32,
    #[serde(default)]
    pub loss: LinkLoss,
    #[serde(default)]
    pub fault_injection: FaultInjection,
    #[serde(default)]
    pub translator: TranslatorConfig,
    pub memory: MemoryMap,
}

fn one() -> u32 {
    1
}

/// Independent per-packet drop probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkLoss {
    /// Reporter to translator.
    #[serde(default)]
    pub uplink: f64,
    /// Translator to reporter (control packets).
    #[serde(default)]
    pub downlink: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultInjection {
    /// Drop probability for verbs on the translator to collector link.
    #[serde(default)]
    pub collector_link_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslatorConfig {
    /// Verbs per step; unmetered when absent.
    #[serde(default)]
    pub meter_rate: Option<f64>,
    #[serde(default)]
    pub meter_burst: Option<f64>,
    #[serde(default = "default_holdoff")]
    pub nack_holdoff: u64,
    #[serde(default = "default_backlog")]
    pub backlog_capacity: usize,
}

fn default_holdoff() -> u64 {
    4
}

fn default_backlog() -> usize {
    dta_core::flowctl::DEFAULT_BACKLOG
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig {
            meter_rate: None,
            meter_burst: None,
            nack_holdoff: default_holdoff(),
            backlog_capacity: default_backlog(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryMap {
    #[serde(default)]
    pub keywrite: Option<KwMemory>,
    #[serde(default)]
    pub postcarding: Option<PcMemory>,
    #[serde(default)]
    pub append: Option<AppendMemory>,
    #[serde(default)]
    pub key_increment: Option<KiMemory>,
    #[serde(default)]
    pub sketch_merge: Option<SmMemory>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KwMemory {
    pub slots: u64,
    #[serde(default = "default_bits")]
    pub checksum_bits: u32,
    #[serde(default = "default_value_len")]
    pub value_len: usize,
}

fn default_bits() -> u32 {
    32
}

fn default_value_len() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcMemory {
    pub chunks: u64,
    #[serde(default = "default_hops")]
    pub hops: u32,
    #[serde(default = "default_bits")]
    pub cell_bits: u32,
    #[serde(default = "default_value_bits")]
    pub value_bits: u32,
    #[serde(default = "default_cache_slots")]
    pub cache_slots: usize,
}

fn default_hops() -> u32 {
    5
}

fn default_value_bits() -> u32 {
    18
}

fn default_cache_slots() -> usize {
    dta_core::postcarding::DEFAULT_CACHE_SLOTS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppendMemory {
    #[serde(default = "one")]
    pub lists: u32,
    /// Entries per list.
    pub capacity: u64,
    #[serde(default = "default_entry_len")]
    pub entry_len: usize,
    #[serde(default = "one")]
    pub batch_size: u32,
}

fn default_entry_len() -> usize {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KiMemory {
    pub slots: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SketchOp {
    #[default]
    Sum,
    Max,
}

impl From<SketchOp> for MergeOp {
    fn from(op: SketchOp) -> Self {
        match op {
            SketchOp::Sum => MergeOp::Sum,
            SketchOp::Max => MergeOp::Max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmMemory {
    pub rows: u32,
    pub cols: u32,
    #[serde(default)]
    pub op: SketchOp,
    #[serde(default = "one")]
    pub batch_columns: u32,
}

fn default_redundancy() -> u32 {
    2
}

fn all_essential() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Workload {
    KwFlows {
        /// Total reports across all reporters.
        reports: u64,
        /// Distinct keys; every report uses a fresh key when absent.
        #[serde(default)]
        keys: Option<u64>,
        #[serde(default = "default_redundancy")]
        redundancy: u32,
        #[serde(default = "all_essential")]
        essential: f64,
        #[serde(default = "one")]
        per_step: u32,
    },
    Postcards {
        flows: u64,
        /// Flows whose postcards are interleaved at any time.
        #[serde(default = "one_u64")]
        concurrent_flows: u64,
        #[serde(default = "default_redundancy")]
        redundancy: u32,
        /// Announce the path length in every postcard.
        #[serde(default)]
        announce_path_len: bool,
        #[serde(default = "all_essential")]
        essential: f64,
        #[serde(default = "one")]
        per_step: u32,
    },
    AppendEvents {
        reports: u64,
        #[serde(default = "all_essential")]
        essential: f64,
        #[serde(default = "one")]
        per_step: u32,
    },
    KiCounters {
        reports: u64,
        keys: u64,
        #[serde(default = "default_max_delta")]
        max_delta: u64,
        #[serde(default = "default_redundancy")]
        redundancy: u32,
        #[serde(default = "all_essential")]
        essential: f64,
        #[serde(default = "one")]
        per_step: u32,
    },
    SketchColumns {
        #[serde(default = "one")]
        per_step: u32,
    },
}

fn one_u64() -> u64 {
    1
}

fn default_max_delta() -> u64 {
    100
}

impl Workload {
    pub fn name(&self) -> &'static str {
        match self {
            Workload::KwFlows { .. } => "KwFlows",
            Workload::Postcards { .. } => "Postcards",
            Workload::AppendEvents { .. } => "AppendEvents",
            Workload::KiCounters { .. } => "KiCounters",
            Workload::SketchColumns { .. } => "SketchColumns",
        }
    }

    pub fn per_step(&self) -> u32 {
        match *self {
            Workload::KwFlows { per_step, .. }
            | Workload::Postcards { per_step, .. }
            | Workload::AppendEvents { per_step, .. }
            | Workload::KiCounters { per_step, .. }
            | Workload::SketchColumns { per_step } => per_step,
        }
    }

    pub fn essential_fraction(&self) -> f64 {
        match *self {
            Workload::KwFlows { essential, .. }
            | Workload::Postcards { essential, .. }
            | Workload::AppendEvents { essential, .. }
            | Workload::KiCounters { essential, .. } => essential,
            Workload::SketchColumns { .. } => 1.0,
        }
    }
}

fn probability(path: &str, p: f64) -> Result<(), ConfigError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(path, format!("{p} is not a probability")));
    }
    Ok(())
}

fn positive(path: &str, v: u64) -> Result<(), ConfigError> {
    if v == 0 {
        return Err(invalid(path, "must be positive"));
    }
    Ok(())
}

fn redundancy(path: &str, n: u32) -> Result<(), ConfigError> {
    if !(1..=255).contains(&n) {
        return Err(invalid(path, format!("redundancy {n} outside 1..=255")));
    }
    Ok(())
}

fn require<'a, T>(section: &'a Option<T>, path: &str, kind: &str) -> Result<&'a T, ConfigError> {
    section
        .as_ref()
        .ok_or_else(|| invalid(path, format!("required by workload {kind}")))
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: SimConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.topology;
        positive("topology.reporters", u64::from(t.reporters))?;
        probability("topology.loss.uplink", t.loss.uplink)?;
        probability("topology.loss.downlink", t.loss.downlink)?;
        probability("topology.fault_injection.collector_link_loss", t.fault_injection.collector_link_loss)?;
        if t.loss.downlink >= 1.0 && t.loss.uplink > 0.0 {
            return Err(invalid("topology.loss.downlink", "a dead control channel cannot recover uplink loss"));
        }
        if let Some(r) = t.translator.meter_rate {
            if r.is_nan() || r <= 0.0 {
                return Err(invalid("topology.translator.meter_rate", "must be positive"));
            }
        }
        if let Some(b) = t.translator.meter_burst {
            if b.is_nan() || b <= 0.0 {
                return Err(invalid("topology.translator.meter_burst", "must be positive"));
            }
        }
        positive("topology.translator.backlog_capacity", t.translator.backlog_capacity as u64)?;
        let m = &t.memory;
        if let Some(kw) = &m.keywrite {
            positive("topology.memory.keywrite.slots", kw.slots)?;
            if !(1..=64).contains(&kw.checksum_bits) {
                return Err(invalid("topology.memory.keywrite.checksum_bits", "must be in 1..=64"));
            }
            if kw.value_len == 0 || kw.value_len + 8 > MAX_PAYLOAD {
                return Err(invalid("topology.memory.keywrite.value_len", "does not fit one report"));
            }
        }
        if let Some(pc) = &m.postcarding {
            positive("topology.memory.postcarding.chunks", pc.chunks)?;
            if !(1..=64).contains(&pc.hops) {
                return Err(invalid("topology.memory.postcarding.hops", "must be in 1..=64"));
            }
            if !(1..=32).contains(&pc.cell_bits) {
                return Err(invalid("topology.memory.postcarding.cell_bits", "must be in 1..=32"));
            }
            if pc.value_bits >= pc.cell_bits {
                return Err(invalid("topology.memory.postcarding.value_bits", "must be below cell_bits"));
            }
            positive("topology.memory.postcarding.cache_slots", pc.cache_slots as u64)?;
        }
        if let Some(a) = &m.append {
            positive("topology.memory.append.lists", u64::from(a.lists))?;
            positive("topology.memory.append.batch_size", u64::from(a.batch_size))?;
            if a.capacity == 0 || a.capacity % u64::from(a.batch_size) != 0 {
                return Err(invalid(
                    "topology.memory.append.capacity",
                    "must be a positive multiple of batch_size",
                ));
            }
            if !(8..=MAX_PAYLOAD).contains(&a.entry_len) {
                return Err(invalid("topology.memory.append.entry_len", "must be in 8..=1400"));
            }
        }
        if let Some(ki) = &m.key_increment {
            positive("topology.memory.key_increment.slots", ki.slots)?;
        }
        if let Some(sm) = &m.sketch_merge {
            if !(1..=175).contains(&sm.rows) {
                return Err(invalid("topology.memory.sketch_merge.rows", "must be in 1..=175"));
            }
            if !(1..=65536).contains(&sm.cols) {
                return Err(invalid("topology.memory.sketch_merge.cols", "must be in 1..=65536"));
            }
            positive("topology.memory.sketch_merge.batch_columns", u64::from(sm.batch_columns))?;
        }
        let w = &self.workload;
        positive("workload.per_step", u64::from(w.per_step()))?;
        probability("workload.essential", w.essential_fraction())?;
        let kind = w.name();
        match *w {
            Workload::KwFlows { keys, redundancy: n, .. } => {
                require(&m.keywrite, "topology.memory.keywrite", kind)?;
                if keys == Some(0) {
                    return Err(invalid("workload.keys", "must be positive"));
                }
                redundancy("workload.redundancy", n)?;
            }
            Workload::Postcards {
                concurrent_flows,
                redundancy: n,
                ..
            } => {
                require(&m.postcarding, "topology.memory.postcarding", kind)?;
                positive("workload.concurrent_flows", concurrent_flows)?;
                redundancy("workload.redundancy", n)?;
            }
            Workload::AppendEvents { .. } => {
                require(&m.append, "topology.memory.append", kind)?;
            }
            Workload::KiCounters {
                keys,
                max_delta,
                redundancy: n,
                ..
            } => {
                require(&m.key_increment, "topology.memory.key_increment", kind)?;
                positive("workload.keys", keys)?;
                positive("workload.max_delta", max_delta)?;
                redundancy("workload.redundancy", n)?;
            }
            Workload::SketchColumns { .. } => {
                require(&m.sketch_merge, "topology.memory.sketch_merge", kind)?;
            }
        }
        Ok(())
    }
}

/// Base address of every configured primitive in collector memory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RegionLayout {
    pub keywrite: Option<u64>,
    pub postcarding: Option<u64>,
    pub append: Option<u64>,
    pub key_increment: Option<u64>,
    pub sketch_merge: Option<u64>,
    pub total: u64,
}

fn align(x: u64) -> u64 {
    x.div_ceil(64) * 64
}

impl RegionLayout {
    /// Packs the configured primitives back to back on 64-octet boundaries.
    pub fn plan(m: &MemoryMap) -> Self {
        let mut layout = RegionLayout::default();
        let mut next = 0u64;
        let mut place = |size: u64| {
            let base = next;
            next = align(base + size);
            Some(base)
        };
        if let Some(kw) = &m.keywrite {
            layout.keywrite = place(kw.slots * (u64::from(kw.checksum_bits.div_ceil(8)) + kw.value_len as u64));
        }
        if let Some(pc) = &m.postcarding {
            let stride = (pc.hops as usize * pc.cell_bits.div_ceil(8) as usize).next_power_of_two() as u64;
            layout.postcarding = place(pc.chunks * stride);
        }
        if let Some(a) = &m.append {
            layout.append = place(u64::from(a.lists) * a.capacity * a.entry_len as u64);
        }
        if let Some(ki) = &m.key_increment {
            layout.key_increment = place(ki.slots * 8);
        }
        if let Some(sm) = &m.sketch_merge {
            layout.sketch_merge = place(u64::from(sm.rows) * u64::from(sm.cols) * 8);
        }
        layout.total = next;
        layout
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "seed": 3,
        "topology": {"memory": {"keywrite": {"slots": 1024}}},
        "workload": {"kind": "KwFlows", "reports": 100}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = SimConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.topology.reporters, 1);
        assert_eq!(cfg.topology.translator.backlog_capacity, 256);
        assert_eq!(cfg.topology.memory.keywrite.unwrap().checksum_bits, 32);
        let again = SimConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.digest(), cfg.digest());
    }

    #[test]
    fn errors_carry_field_paths() {
        let bad = MINIMAL.replace("\"slots\": 1024", "\"slots\": \"many\"");
        let err = SimConfig::from_json(&bad).unwrap_err().to_string();
        assert!(err.starts_with("topology.memory.keywrite.slots"), "{err}");
        let unknown = MINIMAL.replace("\"seed\": 3", "\"sead\": 3");
        assert!(SimConfig::from_json(&unknown).unwrap_err().to_string().contains("sead"));
        let missing = MINIMAL.replace("\"keywrite\": {\"slots\": 1024}", "\"key_increment\": {\"slots\": 8}");
        let err = SimConfig::from_json(&missing).unwrap_err().to_string();
        assert!(err.starts_with("topology.memory.keywrite"), "{err}");
        let lossy = MINIMAL.replace("\"memory\"", "\"loss\": {\"uplink\": 1.5}, \"memory\"");
        let err = SimConfig::from_json(&lossy).unwrap_err().to_string();
        assert!(err.starts_with("topology.loss.uplink"), "{err}");
    }

    #[test]
    fn layout_does_not_overlap() {
        let m = MemoryMap {
            keywrite: Some(KwMemory {
                slots: 10,
                checksum_bits: 32,
                value_len: 4,
            }),
            append: Some(AppendMemory {
                lists: 2,
                capacity: 4,
                entry_len: 8,
                batch_size: 1,
            }),
            ..MemoryMap::default()
        };
        let l = RegionLayout::plan(&m);
        assert_eq!(l.keywrite, Some(0));
        assert_eq!(l.append, Some(128));
        assert_eq!(l.total, 192);
    }
}
