//! Append: ring-buffer lists in collector memory, filled in batches.
//!
//! The translator stages `batch_size - 1` entries per list and ships them
//! together with the next one in a single write at the list head. Partial
//! batches only leave the translator through [`AppendTranslator::flush`].

use std::collections::BTreeMap;

use thiserror::Error;

use crate::memstore::{MemoryRegion, Verb, VerbError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AppendError {
    #[error("list {list} takes {expected}-octet entries, got {got}")]
    BadEntryLength { list: u32, expected: usize, got: usize },
    #[error("unknown list {0}")]
    UnknownList(u32),
    #[error("list {0} already exists")]
    DuplicateList(u32),
    #[error("capacity {capacity} is not a positive multiple of batch size {batch}")]
    BadCapacity { capacity: u64, batch: u32 },
    #[error("batch size and entry length must be positive")]
    EmptyBatch,
    #[error(transparent)]
    Verb(#[from] VerbError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AppendListSpec {
    pub id: u32,
    pub base: u64,
    /// Entries, a multiple of the batch size.
    pub capacity: u64,
    pub entry_len: usize,
}

impl AppendListSpec {
    pub fn footprint(&self) -> u64 {
        self.capacity * self.entry_len as u64
    }
}

/// Writer-side view of one list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppendList {
    pub spec: AppendListSpec,
    head: u64,
    flushed_total: u64,
}

impl AppendList {
    /// Entry offset of the next write.
    pub fn head(&self) -> u64 {
        self.head
    }

    /// Entries written to collector memory so far.
    pub fn flushed_total(&self) -> u64 {
        self.flushed_total
    }

    fn entry_addr(&self, offset: u64) -> u64 {
        self.spec.base + offset * self.spec.entry_len as u64
    }

    /// Write verbs for `payload` at the head, split where the ring wraps.
    fn emit(&mut self, payload: Vec<u8>) -> Vec<Verb> {
        let entries = (payload.len() / self.spec.entry_len) as u64;
        let room = self.spec.capacity - self.head;
        let verbs = if entries <= room {
            vec![Verb::Write {
                addr: self.entry_addr(self.head),
                payload,
            }]
        } else {
            let cut = room as usize * self.spec.entry_len;
            vec![
                Verb::Write {
                    addr: self.entry_addr(self.head),
                    payload: payload[..cut].to_vec(),
                },
                Verb::Write {
                    addr: self.entry_addr(0),
                    payload: payload[cut..].to_vec(),
                },
            ]
        };
        self.head = (self.head + entries) % self.spec.capacity;
        self.flushed_total += entries;
        verbs
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchBuffer {
    staged: Vec<u8>,
    fill: u32,
}

impl BatchBuffer {
    pub fn fill(&self) -> u32 {
        self.fill
    }
}

#[derive(Debug, Clone)]
pub struct AppendTranslator {
    batch_size: u32,
    lists: BTreeMap<u32, (AppendList, BatchBuffer)>,
}

impl AppendTranslator {
    pub fn new(batch_size: u32) -> Result<Self, AppendError> {
        if batch_size == 0 {
            return Err(AppendError::EmptyBatch);
        }
        Ok(AppendTranslator {
            batch_size,
            lists: BTreeMap::new(),
        })
    }

    pub fn batch_size(&self) -> u32 {
        self.batch_size
    }

    pub fn add_list(&mut self, spec: AppendListSpec) -> Result<(), AppendError> {
        if spec.entry_len == 0 {
            return Err(AppendError::EmptyBatch);
        }
        if spec.capacity == 0 || spec.capacity % u64::from(self.batch_size) != 0 {
            return Err(AppendError::BadCapacity {
                capacity: spec.capacity,
                batch: self.batch_size,
            });
        }
        if self.lists.contains_key(&spec.id) {
            return Err(AppendError::DuplicateList(spec.id));
        }
        let list = AppendList {
            spec,
            head: 0,
            flushed_total: 0,
        };
        self.lists.insert(spec.id, (list, BatchBuffer::default()));
        Ok(())
    }

    pub fn list(&self, id: u32) -> Option<&AppendList> {
        self.lists.get(&id).map(|(l, _)| l)
    }

    pub fn staged(&self, id: u32) -> Option<u32> {
        self.lists.get(&id).map(|(_, b)| b.fill)
    }

    pub fn lists(&self) -> impl Iterator<Item = &AppendList> {
        self.lists.values().map(|(l, _)| l)
    }

    /// Stages one entry; every `batch_size`-th entry ships the whole batch.
    pub fn append_ingest(&mut self, list_id: u32, entry: &[u8]) -> Result<Vec<Verb>, AppendError> {
        let batch_size = self.batch_size;
        let (list, batch) = self.lists.get_mut(&list_id).ok_or(AppendError::UnknownList(list_id))?;
        if entry.len() != list.spec.entry_len {
            return Err(AppendError::BadEntryLength {
                list: list_id,
                expected: list.spec.entry_len,
                got: entry.len(),
            });
        }
        if batch.fill + 1 < batch_size {
            batch.staged.extend_from_slice(entry);
            batch.fill += 1;
            return Ok(Vec::new());
        }
        let mut payload = std::mem::take(&mut batch.staged);
        payload.extend_from_slice(entry);
        batch.fill = 0;
        Ok(list.emit(payload))
    }

    /// Ships whatever is staged for `list_id`.
    pub fn flush(&mut self, list_id: u32) -> Result<Vec<Verb>, AppendError> {
        let (list, batch) = self.lists.get_mut(&list_id).ok_or(AppendError::UnknownList(list_id))?;
        if batch.fill == 0 {
            return Ok(Vec::new());
        }
        batch.fill = 0;
        Ok(list.emit(std::mem::take(&mut batch.staged)))
    }

    pub fn flush_all(&mut self) -> Vec<Verb> {
        let ids: Vec<u32> = self.lists.keys().copied().collect();
        ids.into_iter().flat_map(|id| self.flush(id).expect("known list")).collect()
    }
}

/// Reader position in a list, counted in entries since creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PollCursor {
    pub list_id: u32,
    pub read_total: u64,
}

impl PollCursor {
    pub fn new(list_id: u32) -> Self {
        PollCursor { list_id, read_total: 0 }
    }

    /// Entry offset of the next unread entry.
    pub fn tail(&self, capacity: u64) -> u64 {
        self.read_total % capacity
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PollBatch {
    pub entries: Vec<Vec<u8>>,
    /// Entries overwritten by the writer before they could be read.
    pub skipped: u64,
}

/// Reads up to `max` flushed entries in insertion order. A reader lapped by
/// the writer jumps to the oldest surviving entry.
pub fn append_poll(
    region: &MemoryRegion,
    list: &AppendList,
    cursor: &mut PollCursor,
    max: usize,
) -> Result<PollBatch, AppendError> {
    if cursor.list_id != list.spec.id {
        return Err(AppendError::UnknownList(cursor.list_id));
    }
    let capacity = list.spec.capacity;
    let mut out = PollBatch::default();
    let oldest = list.flushed_total.saturating_sub(capacity);
    if cursor.read_total < oldest {
        out.skipped = oldest - cursor.read_total;
        cursor.read_total = oldest;
    }
    let available = (list.flushed_total - cursor.read_total).min(max as u64);
    for _ in 0..available {
        let addr = list.entry_addr(cursor.tail(capacity));
        out.entries.push(region.read(addr, list.spec.entry_len)?.to_vec());
        cursor.read_total += 1;
    }
    Ok(out)
}
