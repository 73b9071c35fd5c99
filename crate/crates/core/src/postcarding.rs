//! Postcarding: per-flow aggregation of per-hop postcards into one chunk.
//!
//! A chunk holds `B` cells of `ceil(b/8)` octets, padded with zeros to a
//! power-of-two stride. Cell `i` of flow `x` stores
//! `hop_checksum(x, i) XOR g(v)`, where `g` is the value encoder. A chunk is
//! valid for `x` when its first `ℓ ≥ 1` cells decode to values and the rest to
//! blank.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::hashing::{CellValue, ChecksumBits, HashError, HashFamily, HashFn, ValueCodec, ValueUniverse};
use crate::keywrite::DEFAULT_MAX_REDUNDANCY;
use crate::memstore::{Collector, MemoryRegion, Verb, VerbError};
use crate::tally::{Outcome, OutcomeTally};

/// Cache slots of the reference translator.
pub const DEFAULT_CACHE_SLOTS: usize = 32768;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PcError {
    #[error("hop {hop} outside 0..{hops}")]
    HopOutOfRange { hop: u32, hops: u32 },
    #[error("value {0} outside the value universe")]
    ValueOutsideUniverse(u64),
    #[error("redundancy {n} outside 1..={max}")]
    BadRedundancy { n: u32, max: u32 },
    #[error("chunk must have {expected} cells, got {got}")]
    BadChunk { expected: usize, got: usize },
    #[error("store needs at least one chunk, one hop and one cache slot")]
    EmptyStore,
    #[error("hop count {0} exceeds 64")]
    TooManyHops(u32),
    #[error("store needs {needed} octets past its base, region has {size}")]
    RegionTooSmall { needed: u64, size: usize },
    #[error(transparent)]
    Hash(#[from] HashError),
    #[error(transparent)]
    Verb(#[from] VerbError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcLayout {
    pub base: u64,
    /// Number of chunks, `C`.
    pub chunks: u64,
    /// Hops per chunk, `B`.
    pub hops: u32,
    pub cell_bits: ChecksumBits,
}

impl PcLayout {
    pub fn cell_len(&self) -> usize {
        self.cell_bits.octets()
    }

    /// Octets carrying cells in one chunk.
    pub fn chunk_len(&self) -> usize {
        self.hops as usize * self.cell_len()
    }

    /// Distance between consecutive chunks.
    pub fn stride(&self) -> usize {
        self.chunk_len().next_power_of_two()
    }

    pub fn footprint(&self) -> u64 {
        self.chunks * self.stride() as u64
    }

    pub fn check_region(&self, size: usize) -> Result<(), PcError> {
        let needed = self.base + self.footprint();
        if needed > size as u64 {
            return Err(PcError::RegionTooSmall { needed, size });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitReason {
    /// All expected hops arrived.
    Complete,
    /// Another flow claimed the cache slot.
    Evicted,
    /// Drained by an explicit flush.
    Flushed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmittedChunk {
    pub flow: u64,
    /// Exactly `B` cells; hops that never arrived are blank.
    pub cells: Vec<CellValue>,
    pub reason: EmitReason,
}

impl EmittedChunk {
    /// A complete path of values.
    pub fn from_path(flow: u64, path: &[u64], hops: u32) -> Self {
        let mut cells = vec![CellValue::Blank; hops as usize];
        for (cell, &v) in cells.iter_mut().zip(path) {
            *cell = CellValue::Value(v);
        }
        EmittedChunk {
            flow,
            cells,
            reason: EmitReason::Complete,
        }
    }
}

#[derive(Debug, Clone)]
struct CacheEntry {
    flow: u64,
    filled: u64,
    cells: Vec<CellValue>,
    path_len: Option<u32>,
}

impl CacheEntry {
    fn into_chunk(self, reason: EmitReason) -> EmittedChunk {
        EmittedChunk {
            flow: self.flow,
            cells: self.cells,
            reason,
        }
    }
}

/// Translator-side aggregation cache, one flow per slot.
#[derive(Debug, Clone)]
pub struct PostcardCache {
    slots: Vec<Option<CacheEntry>>,
    hops: u32,
    universe: ValueUniverse,
    hashes: HashFamily,
}

impl PostcardCache {
    pub fn new(slots: usize, hops: u32, universe: ValueUniverse, hashes: HashFamily) -> Result<Self, PcError> {
        if slots == 0 || hops == 0 {
            return Err(PcError::EmptyStore);
        }
        if hops > 64 {
            return Err(PcError::TooManyHops(hops));
        }
        Ok(PostcardCache {
            slots: vec![None; slots],
            hops,
            universe,
            hashes,
        })
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn occupied(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn slot_of(&self, flow: u64) -> usize {
        (self.hashes.hash(HashFn::CacheIndex, 0, &flow.to_le_bytes()) % self.slots.len() as u64) as usize
    }

    /// Records one postcard. Returns the chunks this postcard caused to be
    /// emitted: an evicted incumbent first, then the flow's own chunk when it
    /// completes.
    pub fn pc_ingest(
        &mut self,
        flow: u64,
        hop: u32,
        value: u64,
        path_len: Option<u32>,
    ) -> Result<Vec<EmittedChunk>, PcError> {
        if hop >= self.hops {
            return Err(PcError::HopOutOfRange { hop, hops: self.hops });
        }
        if !self.universe.contains(value) {
            return Err(PcError::ValueOutsideUniverse(value));
        }
        let hops = self.hops;
        let idx = self.slot_of(flow);
        let slot = &mut self.slots[idx];
        let mut out = Vec::new();
        if slot.as_ref().is_some_and(|e| e.flow != flow) {
            out.push(slot.take().unwrap().into_chunk(EmitReason::Evicted));
        }
        let entry = slot.get_or_insert_with(|| CacheEntry {
            flow,
            filled: 0,
            cells: vec![CellValue::Blank; hops as usize],
            path_len: None,
        });
        entry.cells[hop as usize] = CellValue::Value(value);
        entry.filled |= 1 << hop;
        if let Some(l) = path_len {
            entry.path_len = Some(l.clamp(1, hops));
        }
        let target = entry.path_len.unwrap_or(hops);
        if entry.filled.count_ones() >= target {
            out.push(slot.take().unwrap().into_chunk(EmitReason::Complete));
        }
        Ok(out)
    }

    /// Emits every pending partial chunk in slot order.
    pub fn flush_all(&mut self) -> Vec<EmittedChunk> {
        self.slots
            .iter_mut()
            .filter_map(|s| s.take().map(|e| e.into_chunk(EmitReason::Flushed)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PcOutcome {
    Path(Vec<u64>),
    Empty,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcQueryResult {
    pub outcome: PcOutcome,
    /// Number of the `N` chunks that passed the validity rule.
    pub valid_chunks: u32,
}

impl PcQueryResult {
    pub fn classify(&self, truth: &[u64]) -> Outcome {
        match &self.outcome {
            PcOutcome::Path(p) if p == truth => Outcome::Success,
            PcOutcome::Path(_) => Outcome::Wrong,
            PcOutcome::Empty => Outcome::Empty,
            PcOutcome::Ambiguous => Outcome::Ambiguous,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PostcardStore {
    layout: PcLayout,
    hashes: HashFamily,
    codec: ValueCodec,
    max_redundancy: u32,
}

impl PostcardStore {
    pub fn new(layout: PcLayout, hashes: HashFamily, universe: ValueUniverse) -> Result<Self, PcError> {
        if layout.chunks == 0 || layout.hops == 0 {
            return Err(PcError::EmptyStore);
        }
        let codec = ValueCodec::new(&hashes, layout.cell_bits, universe)?;
        Ok(PostcardStore {
            layout,
            hashes,
            codec,
            max_redundancy: DEFAULT_MAX_REDUNDANCY,
        })
    }

    pub fn with_max_redundancy(mut self, max: u32) -> Self {
        self.max_redundancy = max.max(1);
        self
    }

    pub fn layout(&self) -> &PcLayout {
        &self.layout
    }

    pub fn codec(&self) -> &ValueCodec {
        &self.codec
    }

    fn check_redundancy(&self, n: u32) -> Result<(), PcError> {
        if n == 0 || n > self.max_redundancy {
            return Err(PcError::BadRedundancy {
                n,
                max: self.max_redundancy,
            });
        }
        Ok(())
    }

    pub fn chunk_index(&self, copy: u32, flow: u64) -> u64 {
        self.hashes.chunk_hash(copy, flow, self.layout.chunks)
    }

    pub fn chunk_addr(&self, chunk: u64) -> u64 {
        self.layout.base + chunk * self.layout.stride() as u64
    }

    pub fn cell_code(&self, flow: u64, hop: u32, value: CellValue) -> Result<u64, PcError> {
        let g = self.codec.encode(value).map_err(|e| match e {
            HashError::ValueOutsideUniverse(v) => PcError::ValueOutsideUniverse(v),
            other => PcError::Hash(other),
        })?;
        Ok(self.hashes.hop_checksum(flow, hop, self.layout.cell_bits) ^ g)
    }

    /// Chunk image including zero padding up to the stride.
    pub fn encode_chunk(&self, flow: u64, cells: &[CellValue]) -> Result<Vec<u8>, PcError> {
        if cells.len() != self.layout.hops as usize {
            return Err(PcError::BadChunk {
                expected: self.layout.hops as usize,
                got: cells.len(),
            });
        }
        let cell_len = self.layout.cell_len();
        let mut out = vec![0u8; self.layout.stride()];
        for (i, &cell) in cells.iter().enumerate() {
            let code = self.cell_code(flow, i as u32, cell)?;
            out[i * cell_len..(i + 1) * cell_len].copy_from_slice(&code.to_le_bytes()[..cell_len]);
        }
        Ok(out)
    }

    /// One contiguous write per redundancy copy.
    pub fn pc_write(&self, chunk: &EmittedChunk, n: u32) -> Result<Vec<Verb>, PcError> {
        self.check_redundancy(n)?;
        let payload = self.encode_chunk(chunk.flow, &chunk.cells)?;
        Ok((0..n)
            .map(|copy| Verb::Write {
                addr: self.chunk_addr(self.chunk_index(copy, chunk.flow)),
                payload: payload.clone(),
            })
            .collect())
    }

    /// Decodes chunk `chunk` on behalf of `flow`; `None` if it fails the
    /// validity rule.
    pub fn decode_chunk(&self, region: &MemoryRegion, flow: u64, chunk: u64) -> Result<Option<Vec<u64>>, PcError> {
        let cell_len = self.layout.cell_len();
        let raw = region.read(self.chunk_addr(chunk), self.layout.chunk_len())?;
        let mut path = Vec::with_capacity(self.layout.hops as usize);
        let mut blank_seen = false;
        for (i, cell) in raw.chunks_exact(cell_len).enumerate() {
            let mut buf = [0u8; 8];
            buf[..cell_len].copy_from_slice(cell);
            let code = u64::from_le_bytes(buf) ^ self.hashes.hop_checksum(flow, i as u32, self.layout.cell_bits);
            match self.codec.decode(code) {
                Some(CellValue::Value(v)) if !blank_seen => path.push(v),
                Some(CellValue::Blank) => blank_seen = true,
                _ => return Ok(None),
            }
        }
        Ok((!path.is_empty()).then_some(path))
    }

    pub fn pc_query(&self, region: &MemoryRegion, flow: u64, n: u32) -> Result<PcQueryResult, PcError> {
        self.check_redundancy(n)?;
        let mut found: Option<Vec<u64>> = None;
        let mut valid = 0;
        let mut disagree = false;
        for copy in 0..n {
            let Some(path) = self.decode_chunk(region, flow, self.chunk_index(copy, flow))? else {
                continue;
            };
            valid += 1;
            match &found {
                Some(p) if *p != path => disagree = true,
                Some(_) => {}
                None => found = Some(path),
            }
        }
        let outcome = match found {
            _ if disagree => PcOutcome::Ambiguous,
            Some(p) => PcOutcome::Path(p),
            None => PcOutcome::Empty,
        };
        Ok(PcQueryResult {
            outcome,
            valid_chunks: valid,
        })
    }
}

/// Parameters of a Postcarding Monte-Carlo experiment. Every flow carries a
/// full path of `hops` uniformly drawn values.
#[derive(Debug, Clone, Copy)]
pub struct PcTrialParams {
    pub chunks: u64,
    pub hops: u32,
    pub cell_bits: ChecksumBits,
    pub universe: ValueUniverse,
    pub n_redundancy: u32,
    pub seed: u64,
}

/// Streams flows through a fresh store and queries each flow after exactly
/// `load_flows` later flows were written (load `load_flows / chunks`).
pub fn pc_load_trial(params: &PcTrialParams, load_flows: u64, queries: u64) -> Result<OutcomeTally, PcError> {
    let layout = PcLayout {
        base: 0,
        chunks: params.chunks,
        hops: params.hops,
        cell_bits: params.cell_bits,
    };
    let hashes = HashFamily::new(params.seed).derive(0x9C00 + load_flows);
    let store = PostcardStore::new(layout, hashes, params.universe)?
        .with_max_redundancy(params.n_redundancy.max(DEFAULT_MAX_REDUNDANCY));
    let mut collector = Collector::new(layout.footprint() as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ load_flows.rotate_left(29));
    let salt = rng.random::<u64>();
    let window = load_flows as usize + 1;
    let mut paths: Vec<Vec<u64>> = vec![Vec::new(); window];
    let mut tally = OutcomeTally::default();
    let flow_id = |t: u64| t ^ salt;
    for t in 0..load_flows + queries {
        let path: Vec<u64> = (0..params.hops)
            .map(|_| rng.random_range(0..params.universe.size()))
            .collect();
        let chunk = EmittedChunk::from_path(flow_id(t), &path, params.hops);
        collector.submit_all(&store.pc_write(&chunk, params.n_redundancy)?)?;
        paths[(t % window as u64) as usize] = path;
        if t >= load_flows {
            let target = t - load_flows;
            let res = store.pc_query(&collector.region, flow_id(target), params.n_redundancy)?;
            tally.record(res.classify(&paths[(target % window as u64) as usize]));
        }
    }
    Ok(tally)
}
