//! Emulated collector memory and the RDMA verb subset used by the translator.
//!
//! A [`MemoryRegion`] is a flat, zero-initialised byte array standing in for
//! memory registered with the collector's NIC. It is only ever mutated through
//! [`apply_verb`], which enforces queue-pair sequencing the way a reliable
//! connection does: a packet sequence number (PSN) that does not match the
//! expected one moves the [`QueuePair`] into [`QpState::Desynced`] and every
//! later verb is refused until [`reset_qp`] re-establishes the connection.
//!
//! Multi-octet values stored in the region are little-endian.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use thiserror::Error;

/// PSNs are 24 bits wide and wrap.
pub const PSN_BITS: u32 = 24;
const PSN_MASK: u32 = (1 << PSN_BITS) - 1;

/// A 24-bit wrapping packet sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Psn(u32);

impl Psn {
    pub const fn new(value: u32) -> Self {
        Psn(value & PSN_MASK)
    }

    pub const fn value(self) -> u32 {
        self.0
    }

    #[must_use]
    pub const fn next(self) -> Self {
        Psn((self.0 + 1) & PSN_MASK)
    }
}

impl From<u32> for Psn {
    fn from(value: u32) -> Self {
        Psn::new(value)
    }
}

/// One-sided memory operation issued by the translator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verb {
    Write { addr: u64, payload: Vec<u8> },
    FetchAdd { addr: u64, addend: u64 },
    Read { addr: u64, len: usize },
}

impl Verb {
    pub fn addr(&self) -> u64 {
        match self {
            Verb::Write { addr, .. } | Verb::FetchAdd { addr, .. } | Verb::Read { addr, .. } => {
                *addr
            }
        }
    }

    /// Octets touched by the verb.
    pub fn span(&self) -> usize {
        match self {
            Verb::Write { payload, .. } => payload.len(),
            Verb::FetchAdd { .. } => 8,
            Verb::Read { len, .. } => *len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerbResult {
    WriteAck,
    /// Value held at the address before the addition.
    FetchAddOld(u64),
    ReadData(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerbError {
    #[error("verb at {addr:#x}+{len} escapes region of {size} octets")]
    OutOfBounds { addr: u64, len: usize, size: usize },
    #[error("queue pair desynchronised (expected psn {expected}, got {got})")]
    Desynced { expected: u32, got: u32 },
    #[error("write verb carries no payload")]
    EmptyWrite,
    #[error("fetch-and-add address {0:#x} is not 8-octet aligned")]
    Misaligned(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpState {
    Open,
    Desynced,
}

/// Receive side of the collector's single reliable connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueuePair {
    expected_psn: Psn,
    state: QpState,
}

impl Default for QueuePair {
    fn default() -> Self {
        Self::new(Psn::new(0))
    }
}

impl QueuePair {
    pub fn new(expected_psn: Psn) -> Self {
        QueuePair {
            expected_psn,
            state: QpState::Open,
        }
    }

    pub fn expected_psn(&self) -> Psn {
        self.expected_psn
    }

    pub fn state(&self) -> QpState {
        self.state
    }

    pub fn is_open(&self) -> bool {
        self.state == QpState::Open
    }
}

/// Re-establishes the connection: the pair is open again and expects `new_psn`.
pub fn reset_qp(qp: &mut QueuePair, new_psn: Psn) {
    qp.state = QpState::Open;
    qp.expected_psn = new_psn;
}

/// Byte-addressable emulated collector memory.
#[derive(Clone, PartialEq, Eq)]
pub struct MemoryRegion {
    bytes: Vec<u8>,
}

impl std::fmt::Debug for MemoryRegion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryRegion")
            .field("size", &self.bytes.len())
            .finish()
    }
}

impl MemoryRegion {
    pub fn new(size: usize) -> Self {
        MemoryRegion {
            bytes: vec![0; size],
        }
    }

    /// Rebuilds a region from a raw dump, e.g. one written by [`MemoryRegion::write_dump`].
    pub fn from_dump(bytes: Vec<u8>) -> Self {
        MemoryRegion { bytes }
    }

    pub fn size(&self) -> usize {
        self.bytes.len()
    }

    /// Read-only snapshot of the whole region.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn range(&self, addr: u64, len: usize) -> Result<std::ops::Range<usize>, VerbError> {
        let oob = VerbError::OutOfBounds {
            addr,
            len,
            size: self.bytes.len(),
        };
        let start = usize::try_from(addr).map_err(|_| oob.clone())?;
        let end = start.checked_add(len).ok_or_else(|| oob.clone())?;
        if end > self.bytes.len() {
            return Err(oob);
        }
        Ok(start..end)
    }

    /// Collector-local read; does not go through a queue pair.
    pub fn read(&self, addr: u64, len: usize) -> Result<&[u8], VerbError> {
        let range = self.range(addr, len)?;
        Ok(&self.bytes[range])
    }

    pub fn read_u64(&self, addr: u64) -> Result<u64, VerbError> {
        let raw = self.read(addr, 8)?;
        Ok(u64::from_le_bytes(raw.try_into().expect("8 octets")))
    }

    fn validate(&self, verb: &Verb) -> Result<(), VerbError> {
        match verb {
            Verb::Write { payload, .. } if payload.is_empty() => return Err(VerbError::EmptyWrite),
            Verb::FetchAdd { addr, .. } if addr % 8 != 0 => return Err(VerbError::Misaligned(*addr)),
            _ => {}
        }
        self.range(verb.addr(), verb.span()).map(|_| ())
    }

    fn execute(&mut self, verb: &Verb) -> VerbResult {
        match verb {
            Verb::Write { addr, payload } => {
                let start = *addr as usize;
                self.bytes[start..start + payload.len()].copy_from_slice(payload);
                VerbResult::WriteAck
            }
            Verb::FetchAdd { addr, addend } => {
                let start = *addr as usize;
                let cell = &mut self.bytes[start..start + 8];
                let old = u64::from_le_bytes((&*cell).try_into().expect("8 octets"));
                cell.copy_from_slice(&old.wrapping_add(*addend).to_le_bytes());
                VerbResult::FetchAddOld(old)
            }
            Verb::Read { addr, len } => {
                let start = *addr as usize;
                VerbResult::ReadData(self.bytes[start..start + len].to_vec())
            }
        }
    }

    pub fn write_dump(&self, path: impl AsRef<Path>) -> io::Result<()> {
        std::fs::write(path, &self.bytes)
    }

    pub fn read_dump(path: impl AsRef<Path>) -> io::Result<Self> {
        Ok(Self::from_dump(std::fs::read(path)?))
    }

    pub fn hexdump(&self) -> String {
        hexdump(&self.bytes)
    }
}

/// Applies one verb received with sequence number `psn`.
///
/// Malformed verbs (out of bounds, misaligned, empty) are refused without
/// consuming a PSN. A PSN mismatch desynchronises the pair.
pub fn apply_verb(
    region: &mut MemoryRegion,
    qp: &mut QueuePair,
    psn: Psn,
    verb: &Verb,
) -> Result<VerbResult, VerbError> {
    if qp.state == QpState::Desynced || psn != qp.expected_psn {
        qp.state = QpState::Desynced;
        return Err(VerbError::Desynced {
            expected: qp.expected_psn.value(),
            got: psn.value(),
        });
    }
    region.validate(verb)?;
    let result = region.execute(verb);
    qp.expected_psn = qp.expected_psn.next();
    Ok(result)
}

/// Translator-side PSN generator for the single collector connection.
#[derive(Debug, Clone, Default)]
pub struct PsnCounter {
    next: Psn,
}

impl PsnCounter {
    pub fn new(start: Psn) -> Self {
        PsnCounter { next: start }
    }

    pub fn peek(&self) -> Psn {
        self.next
    }

    pub fn stamp(&mut self) -> Psn {
        let psn = self.next;
        self.next = self.next.next();
        psn
    }
}

/// Collector memory plus its queue pair, fed by a sequential PSN counter.
///
/// Models the loss-free translator-to-collector hop: every submitted verb is
/// stamped with the next PSN, so the pair never desynchronises on its own.
#[derive(Debug, Clone)]
pub struct Collector {
    pub region: MemoryRegion,
    pub qp: QueuePair,
    psn: PsnCounter,
}

impl Collector {
    pub fn new(size: usize) -> Self {
        Collector {
            region: MemoryRegion::new(size),
            qp: QueuePair::default(),
            psn: PsnCounter::default(),
        }
    }

    pub fn submit(&mut self, verb: &Verb) -> Result<VerbResult, VerbError> {
        let psn = self.psn.peek();
        let res = apply_verb(&mut self.region, &mut self.qp, psn, verb);
        if !matches!(res, Err(VerbError::OutOfBounds { .. } | VerbError::EmptyWrite | VerbError::Misaligned(_))) {
            self.psn.stamp();
        }
        res
    }

    pub fn submit_all<'a>(&mut self, verbs: impl IntoIterator<Item = &'a Verb>) -> Result<(), VerbError> {
        for verb in verbs {
            self.submit(verb)?;
        }
        Ok(())
    }
}

/// `hexdump -C` style rendering: offset, sixteen octets, printable ASCII.
pub fn hexdump(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 4 + 16);
    for (row, chunk) in bytes.chunks(16).enumerate() {
        let _ = write!(out, "{:08x} ", row * 16);
        for i in 0..16 {
            if i == 8 {
                out.push(' ');
            }
            match chunk.get(i) {
                Some(b) => {
                    let _ = write!(out, " {b:02x}");
                }
                None => out.push_str("   "),
            }
        }
        out.push_str("  |");
        out.extend(chunk.iter().map(|&b| {
            if b.is_ascii_graphic() || b == b' ' {
                b as char
            } else {
                '.'
            }
        }));
        out.push_str("|\n");
    }
    let _ = writeln!(out, "{:08x}", bytes.len());
    out
}

/// Offsets where two dumps differ; a length mismatch reports the tail start.
pub fn diff_offsets(a: &[u8], b: &[u8], limit: usize) -> Vec<usize> {
    let mut out: Vec<usize> = a
        .iter()
        .zip(b)
        .enumerate()
        .filter(|(_, (x, y))| x != y)
        .map(|(i, _)| i)
        .take(limit)
        .collect();
    if a.len() != b.len() && out.len() < limit {
        out.push(a.len().min(b.len()));
    }
    out
}
