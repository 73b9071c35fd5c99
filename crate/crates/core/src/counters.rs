//! Key-Increment and Sketch-Merge.
//!
//! Key-Increment keeps `N` 64-bit counters per key and adds to all of them
//! with Fetch-and-Add; queries take the minimum, like a Count-Min sketch.
//! Sketch-Merge folds per-reporter sketch columns, received strictly in order,
//! into one network-wide sketch at the translator and writes completed
//! columns out in batches.
//!
//! Merged sketch layout is column-major: column `c` occupies
//! `base + c·d·8 .. base + (c+1)·d·8`, row values little-endian, so a batch of
//! consecutive columns is one contiguous range.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::hashing::HashFamily;
use crate::keywrite::DEFAULT_MAX_REDUNDANCY;
use crate::memstore::{MemoryRegion, Verb, VerbError};

pub const COUNTER_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CounterError {
    #[error("redundancy {n} outside 1..={max}")]
    BadRedundancy { n: u32, max: u32 },
    #[error("store needs at least one counter")]
    EmptyStore,
    #[error("sketch needs at least one row and column")]
    EmptySketch,
    #[error("unknown reporter {0}")]
    UnknownReporter(u32),
    #[error("column {col} outside 0..{cols}")]
    ColumnOutOfRange { col: u32, cols: u32 },
    #[error("column must have {expected} rows, got {got}")]
    BadColumnLength { expected: usize, got: usize },
    #[error(transparent)]
    Verb(#[from] VerbError),
}

#[derive(Debug, Clone)]
pub struct KiStore {
    base: u64,
    buflen: u64,
    hashes: HashFamily,
    max_redundancy: u32,
}

impl KiStore {
    pub fn new(base: u64, buflen: u64, hashes: HashFamily) -> Result<Self, CounterError> {
        if buflen == 0 {
            return Err(CounterError::EmptyStore);
        }
        Ok(KiStore {
            base,
            buflen,
            hashes,
            max_redundancy: DEFAULT_MAX_REDUNDANCY,
        })
    }

    pub fn with_max_redundancy(mut self, max: u32) -> Self {
        self.max_redundancy = max.max(1);
        self
    }

    pub fn buflen(&self) -> u64 {
        self.buflen
    }

    pub fn footprint(&self) -> u64 {
        self.buflen * COUNTER_LEN as u64
    }

    fn check_redundancy(&self, n: u32) -> Result<(), CounterError> {
        if n == 0 || n > self.max_redundancy {
            return Err(CounterError::BadRedundancy {
                n,
                max: self.max_redundancy,
            });
        }
        Ok(())
    }

    pub fn counter_addr(&self, copy: u32, key: &[u8]) -> u64 {
        self.base + self.hashes.slot_hash(copy, key, self.buflen) * COUNTER_LEN as u64
    }

    /// One Fetch-and-Add per redundancy copy; nothing for a zero delta.
    pub fn ki_increment(&self, key: &[u8], delta: u64, n: u32) -> Result<Vec<Verb>, CounterError> {
        self.check_redundancy(n)?;
        if delta == 0 {
            return Ok(Vec::new());
        }
        Ok((0..n)
            .map(|copy| Verb::FetchAdd {
                addr: self.counter_addr(copy, key),
                addend: delta,
            })
            .collect())
    }

    pub fn ki_query(&self, region: &MemoryRegion, key: &[u8], n: u32) -> Result<u64, CounterError> {
        self.check_redundancy(n)?;
        let mut min = u64::MAX;
        for copy in 0..n {
            min = min.min(region.read_u64(self.counter_addr(copy, key))?);
        }
        Ok(min)
    }

    /// Zeroes every counter, starting a new epoch.
    pub fn epoch_reset(&self) -> Vec<Verb> {
        vec![Verb::Write {
            addr: self.base,
            payload: vec![0; self.footprint() as usize],
        }]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MergeOp {
    /// Counter-wise wrapping sum (Count-Min, Count sketches).
    #[default]
    Sum,
    /// Register-wise maximum (HyperLogLog).
    Max,
}

impl MergeOp {
    pub fn apply(self, acc: u64, x: u64) -> u64 {
        match self {
            MergeOp::Sum => acc.wrapping_add(x),
            MergeOp::Max => acc.max(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MergeOp::Sum => "sum",
            MergeOp::Max => "max",
        }
    }
}

impl std::str::FromStr for MergeOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(MergeOp::Sum),
            "max" => Ok(MergeOp::Max),
            other => Err(format!("unknown merge op {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SketchSpec {
    /// Rows, `d`.
    pub rows: u32,
    /// Columns, `w`.
    pub cols: u32,
    pub op: MergeOp,
}

impl SketchSpec {
    pub fn column_len(&self) -> usize {
        self.rows as usize * COUNTER_LEN
    }

    pub fn footprint(&self) -> u64 {
        u64::from(self.cols) * self.column_len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmVerdict {
    /// Column merged; `completed` once every reporter contributed to it.
    Merged { completed: bool },
    /// Out-of-order column; the reporter must resend from `expected`.
    Nack { expected: u32 },
    /// Column already merged from this reporter.
    Duplicate,
}

/// In-order column bookkeeping for a fixed reporter set.
#[derive(Debug, Clone)]
pub struct ColumnTracker {
    next_expected: BTreeMap<u32, u32>,
    merged_count: Vec<u32>,
}

impl ColumnTracker {
    fn new(reporters: &[u32], cols: u32) -> Self {
        ColumnTracker {
            next_expected: reporters.iter().map(|&r| (r, 0)).collect(),
            merged_count: vec![0; cols as usize],
        }
    }

    pub fn expected(&self, reporter: u32) -> Option<u32> {
        self.next_expected.get(&reporter).copied()
    }

    pub fn merged_count(&self, col: u32) -> u32 {
        self.merged_count[col as usize]
    }

    pub fn is_complete(&self, col: u32) -> bool {
        self.merged_count[col as usize] as usize == self.next_expected.len()
    }
}

#[derive(Debug, Clone)]
pub struct SketchMerger {
    spec: SketchSpec,
    base: u64,
    tracker: ColumnTracker,
    /// Column-major merged counters.
    sketch: Vec<u64>,
    next_flush: u32,
}

impl SketchMerger {
    pub fn new(spec: SketchSpec, base: u64, reporters: &[u32]) -> Result<Self, CounterError> {
        if spec.rows == 0 || spec.cols == 0 {
            return Err(CounterError::EmptySketch);
        }
        Ok(SketchMerger {
            spec,
            base,
            tracker: ColumnTracker::new(reporters, spec.cols),
            sketch: vec![0; spec.rows as usize * spec.cols as usize],
            next_flush: 0,
        })
    }

    pub fn spec(&self) -> &SketchSpec {
        &self.spec
    }

    pub fn tracker(&self) -> &ColumnTracker {
        &self.tracker
    }

    pub fn value(&self, row: u32, col: u32) -> u64 {
        self.sketch[col as usize * self.spec.rows as usize + row as usize]
    }

    pub fn column(&self, col: u32) -> &[u64] {
        let d = self.spec.rows as usize;
        &self.sketch[col as usize * d..(col as usize + 1) * d]
    }

    /// Columns already written to collector memory.
    pub fn flushed_columns(&self) -> u32 {
        self.next_flush
    }

    pub fn sm_ingest_column(&mut self, reporter: u32, col: u32, values: &[u64]) -> Result<SmVerdict, CounterError> {
        let expected = self
            .tracker
            .expected(reporter)
            .ok_or(CounterError::UnknownReporter(reporter))?;
        if col >= self.spec.cols {
            return Err(CounterError::ColumnOutOfRange {
                col,
                cols: self.spec.cols,
            });
        }
        if values.len() != self.spec.rows as usize {
            return Err(CounterError::BadColumnLength {
                expected: self.spec.rows as usize,
                got: values.len(),
            });
        }
        if col < expected {
            return Ok(SmVerdict::Duplicate);
        }
        if col > expected {
            return Ok(SmVerdict::Nack { expected });
        }
        let d = self.spec.rows as usize;
        let op = self.spec.op;
        for (acc, &x) in self.sketch[col as usize * d..(col as usize + 1) * d].iter_mut().zip(values) {
            *acc = op.apply(*acc, x);
        }
        self.tracker.next_expected.insert(reporter, col + 1);
        self.tracker.merged_count[col as usize] += 1;
        Ok(SmVerdict::Merged {
            completed: self.tracker.is_complete(col),
        })
    }

    /// Writes out completed columns in batches of `w_batch`; the final batch
    /// may be shorter when the column count is not a multiple.
    pub fn sm_flush_completed(&mut self, w_batch: u32) -> Vec<Verb> {
        let w_batch = w_batch.max(1);
        let mut verbs = Vec::new();
        loop {
            let end = (self.next_flush + w_batch).min(self.spec.cols);
            if end == self.next_flush || !(self.next_flush..end).all(|c| self.tracker.is_complete(c)) {
                break;
            }
            let d = self.spec.rows as usize;
            let payload = self.sketch[self.next_flush as usize * d..end as usize * d]
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            verbs.push(Verb::Write {
                addr: self.base + u64::from(self.next_flush) * self.spec.column_len() as u64,
                payload,
            });
            self.next_flush = end;
        }
        verbs
    }
}

/// Reads a merged sketch back from collector memory as `[row][col]`.
pub fn read_sketch(region: &MemoryRegion, base: u64, spec: &SketchSpec) -> Result<Vec<Vec<u64>>, CounterError> {
    let mut out = vec![vec![0u64; spec.cols as usize]; spec.rows as usize];
    for c in 0..spec.cols {
        for r in 0..spec.rows {
            let addr = base + u64::from(c) * spec.column_len() as u64 + u64::from(r) * COUNTER_LEN as u64;
            out[r as usize][c as usize] = region.read_u64(addr)?;
        }
    }
    Ok(out)
}
