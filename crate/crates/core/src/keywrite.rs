//! Key-Write: a probabilistic key-value store built from one-sided writes.
//!
//! The translator expands a report into `N` writes of `checksum ‖ value`, one
//! per redundancy copy, at slots chosen by the shared hash family. Queriers
//! recompute the same slots, keep the entries whose checksum matches and vote.
//!
//! Slot layout (little-endian): the `b`-bit key checksum fills the leading
//! `ceil(b/8)` octets, followed by `value_len` value octets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::hashing::{ChecksumBits, HashFamily};
use crate::memstore::{Collector, MemoryRegion, Verb, VerbError};
use crate::tally::{Outcome, OutcomeTally};

/// Redundancy assumed by queriers that do not know the write-time level.
pub const DEFAULT_MAX_REDUNDANCY: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KwError {
    #[error("value must be {expected} octets, got {got}")]
    BadValueLength { expected: usize, got: usize },
    #[error("redundancy {n} outside 1..={max}")]
    BadRedundancy { n: u32, max: u32 },
    #[error("store needs at least one slot and a non-empty value")]
    EmptyStore,
    #[error("store needs {needed} octets past its base, region has {size}")]
    RegionTooSmall { needed: u64, size: usize },
    #[error("ages must be below the number of written keys ({n_keys})")]
    AgeTooLarge { n_keys: u64 },
    #[error(transparent)]
    Verb(#[from] VerbError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KwLayout {
    pub base: u64,
    /// Number of slots, `M`.
    pub buflen: u64,
    pub checksum_bits: ChecksumBits,
    pub value_len: usize,
}

impl KwLayout {
    pub fn checksum_len(&self) -> usize {
        self.checksum_bits.octets()
    }

    pub fn slot_len(&self) -> usize {
        self.checksum_len() + self.value_len
    }

    /// Octets occupied by the whole table.
    pub fn footprint(&self) -> u64 {
        self.buflen * self.slot_len() as u64
    }

    pub fn check_region(&self, size: usize) -> Result<(), KwError> {
        let needed = self.base + self.footprint();
        if needed > size as u64 {
            return Err(KwError::RegionTooSmall { needed, size });
        }
        Ok(())
    }
}

/// Vote rule applied to the checksum-matching candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueryPolicy {
    /// Strict plurality among matching values.
    #[default]
    Plurality,
    /// Output only if exactly one distinct value matches.
    SingleValue,
}

impl QueryPolicy {
    pub fn name(self) -> &'static str {
        match self {
            QueryPolicy::Plurality => "plurality",
            QueryPolicy::SingleValue => "single-value",
        }
    }
}

impl std::str::FromStr for QueryPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plurality" => Ok(QueryPolicy::Plurality),
            "single-value" | "single" => Ok(QueryPolicy::SingleValue),
            other => Err(format!("unknown query policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KwSlot {
    pub csum: u64,
    pub value: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KwOutcome {
    Value(Vec<u8>),
    Empty,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KwQueryResult {
    pub outcome: KwOutcome,
    /// Matching values with their multiplicity, in slot order of first sight.
    pub candidates: Vec<(Vec<u8>, u32)>,
}

impl KwQueryResult {
    pub fn classify(&self, truth: &[u8]) -> Outcome {
        match &self.outcome {
            KwOutcome::Value(v) if v == truth => Outcome::Success,
            KwOutcome::Value(_) => Outcome::Wrong,
            KwOutcome::Empty => Outcome::Empty,
            KwOutcome::Ambiguous => Outcome::Ambiguous,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KwStore {
    layout: KwLayout,
    hashes: HashFamily,
    max_redundancy: u32,
}

impl KwStore {
    pub fn new(layout: KwLayout, hashes: HashFamily) -> Result<Self, KwError> {
        if layout.buflen == 0 || layout.value_len == 0 {
            return Err(KwError::EmptyStore);
        }
        Ok(KwStore {
            layout,
            hashes,
            max_redundancy: DEFAULT_MAX_REDUNDANCY,
        })
    }

    pub fn with_max_redundancy(mut self, max: u32) -> Self {
        self.max_redundancy = max.max(1);
        self
    }

    pub fn layout(&self) -> &KwLayout {
        &self.layout
    }

    pub fn max_redundancy(&self) -> u32 {
        self.max_redundancy
    }

    fn check_redundancy(&self, n: u32) -> Result<(), KwError> {
        if n == 0 || n > self.max_redundancy {
            return Err(KwError::BadRedundancy {
                n,
                max: self.max_redundancy,
            });
        }
        Ok(())
    }

    pub fn slot_index(&self, copy: u32, key: &[u8]) -> u64 {
        self.hashes.slot_hash(copy, key, self.layout.buflen)
    }

    pub fn slot_addr(&self, slot: u64) -> u64 {
        self.layout.base + slot * self.layout.slot_len() as u64
    }

    pub fn checksum(&self, key: &[u8]) -> u64 {
        self.hashes.key_checksum(key, self.layout.checksum_bits)
    }

    fn encode_slot(&self, key: &[u8], data: &[u8]) -> Vec<u8> {
        let csum_len = self.layout.checksum_len();
        let mut payload = Vec::with_capacity(self.layout.slot_len());
        payload.extend_from_slice(&self.checksum(key).to_le_bytes()[..csum_len]);
        payload.extend_from_slice(data);
        payload
    }

    /// Translates one report into `n` slot writes.
    pub fn kw_write(&self, key: &[u8], data: &[u8], n: u32) -> Result<Vec<Verb>, KwError> {
        if data.len() != self.layout.value_len {
            return Err(KwError::BadValueLength {
                expected: self.layout.value_len,
                got: data.len(),
            });
        }
        self.check_redundancy(n)?;
        let payload = self.encode_slot(key, data);
        Ok((0..n)
            .map(|copy| Verb::Write {
                addr: self.slot_addr(self.slot_index(copy, key)),
                payload: payload.clone(),
            })
            .collect())
    }

    pub fn read_slot(&self, region: &MemoryRegion, slot: u64) -> Result<KwSlot, VerbError> {
        let raw = region.read(self.slot_addr(slot), self.layout.slot_len())?;
        let (csum_raw, value) = raw.split_at(self.layout.checksum_len());
        let mut csum = [0u8; 8];
        csum[..csum_raw.len()].copy_from_slice(csum_raw);
        Ok(KwSlot {
            csum: u64::from_le_bytes(csum) & self.layout.checksum_bits.mask(),
            value: value.to_vec(),
        })
    }

    /// Reads the `n` candidate slots of `key` and votes among checksum matches.
    ///
    /// Slots beyond the write-time redundancy behave like overwritten entries.
    pub fn kw_query(
        &self,
        region: &MemoryRegion,
        key: &[u8],
        n: u32,
        threshold: u32,
        policy: QueryPolicy,
    ) -> Result<KwQueryResult, KwError> {
        self.check_redundancy(n)?;
        let csum = self.checksum(key);
        let mut candidates: Vec<(Vec<u8>, u32)> = Vec::with_capacity(n as usize);
        for copy in 0..n {
            let slot = self.read_slot(region, self.slot_index(copy, key))?;
            if slot.csum != csum {
                continue;
            }
            match candidates.iter_mut().find(|(v, _)| *v == slot.value) {
                Some((_, count)) => *count += 1,
                None => candidates.push((slot.value, 1)),
            }
        }
        let outcome = decide(&candidates, threshold.max(1), policy);
        Ok(KwQueryResult {
            outcome,
            candidates,
        })
    }
}

fn decide(candidates: &[(Vec<u8>, u32)], threshold: u32, policy: QueryPolicy) -> KwOutcome {
    let Some(top) = candidates.iter().map(|(_, c)| *c).max() else {
        return KwOutcome::Empty;
    };
    if policy == QueryPolicy::SingleValue && candidates.len() > 1 {
        return KwOutcome::Ambiguous;
    }
    let mut leaders = candidates.iter().filter(|(_, c)| *c == top);
    let winner = leaders.next().expect("max exists");
    if leaders.next().is_some() || top < threshold {
        return KwOutcome::Ambiguous;
    }
    KwOutcome::Value(winner.0.clone())
}

/// Parameters of a Key-Write Monte-Carlo experiment.
#[derive(Debug, Clone, Copy)]
pub struct KwTrialParams {
    pub buflen: u64,
    pub n_redundancy: u32,
    pub checksum_bits: ChecksumBits,
    pub value_len: usize,
    pub threshold: u32,
    pub policy: QueryPolicy,
    pub seed: u64,
}

impl KwTrialParams {
    fn build(&self, salt: u64) -> Result<(KwStore, Collector, ChaCha8Rng), KwError> {
        let layout = KwLayout {
            base: 0,
            buflen: self.buflen,
            checksum_bits: self.checksum_bits,
            value_len: self.value_len,
        };
        let hashes = HashFamily::new(self.seed).derive(salt);
        let store = KwStore::new(layout, hashes)?.with_max_redundancy(self.n_redundancy.max(DEFAULT_MAX_REDUNDANCY));
        let collector = Collector::new(layout.footprint() as usize);
        let rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt.rotate_left(17));
        Ok((store, collector, rng))
    }
}

fn trial_key(salt: u64, index: u64) -> [u8; 8] {
    (index ^ salt.wrapping_mul(0x2545_f491_4f6c_dd1d)).to_le_bytes()
}

/// Streams distinct keys through a fresh store and queries each key after
/// exactly `load_keys` later insertions (load factor `load_keys / buflen`).
pub fn kw_load_trial(params: &KwTrialParams, load_keys: u64, queries: u64) -> Result<OutcomeTally, KwError> {
    let (store, mut collector, mut rng) = params.build(load_keys)?;
    let window = load_keys as usize + 1;
    let mut values: Vec<Vec<u8>> = vec![Vec::new(); window];
    let mut tally = OutcomeTally::default();
    let salt = rng.random::<u64>();
    for t in 0..load_keys + queries {
        let mut value = vec![0u8; params.value_len];
        rng.fill(value.as_mut_slice());
        let key = trial_key(salt, t);
        collector.submit_all(&store.kw_write(&key, &value, params.n_redundancy)?)?;
        values[(t % window as u64) as usize] = value;
        if t >= load_keys {
            let target = t - load_keys;
            let res = store.kw_query(
                &collector.region,
                &trial_key(salt, target),
                params.n_redundancy,
                params.threshold,
                params.policy,
            )?;
            tally.record(res.classify(&values[(target % window as u64) as usize]));
        }
    }
    Ok(tally)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgeRow {
    pub age: u64,
    pub tally: OutcomeTally,
}

/// Query success as a function of age: per run, `n_keys` distinct keys are
/// written into a fresh store, then the key written `age` insertions before
/// the last one is queried for every requested age.
pub fn kw_age_sweep(params: &KwTrialParams, n_keys: u64, ages: &[u64], runs: u32) -> Result<Vec<AgeRow>, KwError> {
    if ages.iter().any(|&a| a >= n_keys) {
        return Err(KwError::AgeTooLarge { n_keys });
    }
    let mut rows: Vec<AgeRow> = ages
        .iter()
        .map(|&age| AgeRow {
            age,
            tally: OutcomeTally::default(),
        })
        .collect();
    for run in 0..runs {
        let (store, mut collector, mut rng) = params.build(0xA6E_0000 + u64::from(run))?;
        let salt = rng.random::<u64>();
        let mut values = Vec::with_capacity(n_keys as usize);
        for t in 0..n_keys {
            let mut value = vec![0u8; params.value_len];
            rng.fill(value.as_mut_slice());
            collector.submit_all(&store.kw_write(&trial_key(salt, t), &value, params.n_redundancy)?)?;
            values.push(value);
        }
        for row in rows.iter_mut() {
            let index = n_keys - 1 - row.age;
            let res = store.kw_query(
                &collector.region,
                &trial_key(salt, index),
                params.n_redundancy,
                params.threshold,
                params.policy,
            )?;
            row.tally.record(res.classify(&values[index as usize]));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memstore::Collector;

    fn store(buflen: u64, b: u32, value_len: usize) -> KwStore {
        KwStore::new(
            KwLayout {
                base: 0,
                buflen,
                checksum_bits: ChecksumBits::new(b).unwrap(),
                value_len,
            },
            HashFamily::new(1234),
        )
        .unwrap()
    }

    fn collector_for(s: &KwStore) -> Collector {
        Collector::new(s.layout().footprint() as usize)
    }

    #[test]
    fn single_slot_collapse() {
        let s = store(1, 32, 4);
        let verbs = s.kw_write(b"key", &[1, 2, 3, 4], 2).unwrap();
        assert_eq!(verbs.len(), 2);
        assert!(verbs.iter().all(|v| v.addr() == 0));
        let mut c = collector_for(&s);
        c.submit_all(&verbs).unwrap();
        let mut expect = s.checksum(b"key").to_le_bytes()[..4].to_vec();
        expect.extend_from_slice(&[1, 2, 3, 4]);
        assert_eq!(c.region.as_bytes(), expect.as_slice());
    }

    #[test]
    fn redundant_copies_identical() {
        let s = store(1 << 12, 32, 4);
        // Find a key whose two copies land on distinct slots.
        let key = (0u32..)
            .map(|k| k.to_le_bytes())
            .find(|k| s.slot_index(0, k) != s.slot_index(1, k))
            .unwrap();
        let mut c = collector_for(&s);
        c.submit_all(&s.kw_write(&key, &[9, 8, 7, 6], 2).unwrap()).unwrap();
        let a = s.read_slot(&c.region, s.slot_index(0, &key)).unwrap();
        let b = s.read_slot(&c.region, s.slot_index(1, &key)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.csum, s.checksum(&key));
    }

    #[test]
    fn replay_oracle_matches_region() {
        // Brute force: recompute every slot from the write log, last write wins.
        let s = store(4, 32, 4);
        let mut c = collector_for(&s);
        let log: Vec<([u8; 2], [u8; 4])> = vec![(*b"k1", [1; 4]), (*b"k2", [2; 4]), (*b"k3", [3; 4])];
        for (k, v) in &log {
            c.submit_all(&s.kw_write(k, v, 1).unwrap()).unwrap();
        }
        let mut oracle = vec![0u8; 4 * 8];
        let hashes = HashFamily::new(1234);
        let bits = ChecksumBits::new(32).unwrap();
        for (k, v) in &log {
            let slot = (hashes.slot_hash(0, k, 4) * 8) as usize;
            oracle[slot..slot + 4].copy_from_slice(&(hashes.key_checksum(k, bits) as u32).to_le_bytes());
            oracle[slot + 4..slot + 8].copy_from_slice(v);
        }
        assert_eq!(c.region.as_bytes(), oracle.as_slice());
    }

    #[test]
    fn query_after_write() {
        let s = store(1 << 10, 32, 4);
        let mut c = collector_for(&s);
        c.submit_all(&s.kw_write(b"flow", &[5, 5, 5, 5], 2).unwrap()).unwrap();
        let res = s.kw_query(&c.region, b"flow", 2, 1, QueryPolicy::Plurality).unwrap();
        assert_eq!(res.outcome, KwOutcome::Value(vec![5; 4]));
        // Assuming the maximum redundancy at query time still works.
        let res = s.kw_query(&c.region, b"flow", 4, 1, QueryPolicy::Plurality).unwrap();
        assert_eq!(res.outcome, KwOutcome::Value(vec![5; 4]));
        let res = s.kw_query(&c.region, b"other", 2, 1, QueryPolicy::Plurality).unwrap();
        assert_eq!(res.outcome, KwOutcome::Empty);
    }

    #[test]
    fn survives_single_overwrite() {
        let s = store(1 << 10, 32, 4);
        let key = b"victim";
        let slot1 = s.slot_index(1, key);
        assert_ne!(slot1, s.slot_index(0, key));
        // A key that overwrites copy 1 of the victim.
        let intruder = (0u32..)
            .map(|k| k.to_le_bytes())
            .find(|k| s.slot_index(0, k) == slot1)
            .unwrap();
        let mut c = collector_for(&s);
        c.submit_all(&s.kw_write(key, &[1; 4], 2).unwrap()).unwrap();
        c.submit_all(&s.kw_write(&intruder, &[2; 4], 1).unwrap()).unwrap();
        let res = s.kw_query(&c.region, key, 2, 1, QueryPolicy::Plurality).unwrap();
        assert_eq!(res.outcome, KwOutcome::Value(vec![1; 4]));
        assert_eq!(res.candidates.len(), 1);
    }

    #[test]
    fn vote_rules() {
        let a = (vec![1u8], 2u32);
        let b = (vec![2u8], 1u32);
        let c = (vec![3u8], 2u32);
        assert_eq!(decide(&[], 1, QueryPolicy::Plurality), KwOutcome::Empty);
        assert_eq!(decide(&[a.clone(), b.clone()], 1, QueryPolicy::Plurality), KwOutcome::Value(vec![1]));
        assert_eq!(decide(&[a.clone(), b.clone()], 1, QueryPolicy::SingleValue), KwOutcome::Ambiguous);
        assert_eq!(decide(&[a.clone(), c], 1, QueryPolicy::Plurality), KwOutcome::Ambiguous);
        assert_eq!(decide(std::slice::from_ref(&b), 2, QueryPolicy::Plurality), KwOutcome::Ambiguous);
        assert_eq!(decide(&[a], 2, QueryPolicy::SingleValue), KwOutcome::Value(vec![1]));
    }

    #[test]
    fn write_errors() {
        let s = store(16, 32, 4);
        assert_eq!(
            s.kw_write(b"k", &[1, 2, 3], 1),
            Err(KwError::BadValueLength { expected: 4, got: 3 })
        );
        assert_eq!(s.kw_write(b"k", &[0; 4], 0), Err(KwError::BadRedundancy { n: 0, max: 4 }));
        assert_eq!(s.kw_write(b"k", &[0; 4], 5), Err(KwError::BadRedundancy { n: 5, max: 4 }));
        assert!(s.layout().check_region(16 * 8).is_ok());
        assert!(s.layout().check_region(16 * 8 - 1).is_err());
        assert_eq!(store(16, 12, 3).layout().slot_len(), 5);
    }

    #[test]
    fn identical_logs_give_identical_regions() {
        let s = store(64, 16, 2);
        let run = || {
            let mut c = collector_for(&s);
            for k in 0u16..200 {
                c.submit_all(&s.kw_write(&k.to_le_bytes(), &k.to_be_bytes(), 2).unwrap()).unwrap();
            }
            c.region
        };
        assert_eq!(run().as_bytes(), run().as_bytes());
    }

    fn params(n: u32) -> KwTrialParams {
        KwTrialParams {
            buflen: 1 << 14,
            n_redundancy: n,
            checksum_bits: ChecksumBits::new(32).unwrap(),
            value_len: 4,
            threshold: 1,
            policy: QueryPolicy::Plurality,
            seed: 77,
        }
    }

    #[test]
    fn age_zero_always_succeeds() {
        let ages = [0, 2_000, 8_000, 16_000];
        let rows = kw_age_sweep(&params(2), 16_001, &ages, 3).unwrap();
        assert_eq!(rows[0].tally.success, rows[0].tally.trials);
        let single = kw_age_sweep(&params(2), 20_000, &[0, 19_999], 1).unwrap();
        assert_eq!(single[0].tally.success, 1);
        assert!(kw_age_sweep(&params(2), 10, &[10], 1).is_err());
    }

    #[test]
    fn redundancy_helps_at_low_load() {
        let load = (0.1 * (1u64 << 14) as f64) as u64;
        let one = kw_load_trial(&params(1), load, 20_000).unwrap();
        let two = kw_load_trial(&params(2), load, 20_000).unwrap();
        assert!(two.success_rate::<f64>() >= one.success_rate::<f64>());
        assert_eq!(two.wrong, 0);
    }
}
