//! Emulated one-sided-write telemetry collection.
//!
//! Reporters send typed reports ([`wire`]), a translator turns them into
//! memory verbs against a collector region ([`memstore`]) using one of the
//! collection primitives ([`keywrite`], [`postcarding`], [`append`],
//! [`counters`]), and [`flowctl`] keeps essential reports flowing under loss.
//! [`analysis`] evaluates the closed-form success and error bounds.

pub mod analysis;
pub mod append;
pub mod counters;
pub mod flowctl;
pub mod hashing;
pub mod keywrite;
pub mod memstore;
pub mod postcarding;
pub mod tally;
pub mod wire;

pub use analysis::Probability;
pub use hashing::{CellValue, ChecksumBits, HashFamily, ValueUniverse};
pub use memstore::{Collector, MemoryRegion, Verb};
pub use tally::{Outcome, OutcomeTally};

pub type KwModelF64 = analysis::KwModel<f64>;
pub type KwModelF32 = analysis::KwModel<f32>;
pub type PcModelF64 = analysis::PcModel<f64>;
pub type PcModelF32 = analysis::PcModel<f32>;
