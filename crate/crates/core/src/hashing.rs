//! Seeded hash family shared by reporters, translators and queriers.
//!
//! Every function is derived from one 64-bit hash (XXH3) with a structured
//! seed: the family's base seed, a function id ([`HashFn`]) and an index such
//! as the redundancy copy or hop number. Anyone holding the same base seed
//! computes the same slot, checksum and chunk indices without coordination.

use std::collections::HashMap;

use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64_with_seed;

/// Recorded in experiment outputs so results can be reproduced.
pub const HASH_ALGORITHM: &str = "xxh3-64+splitmix-seeds";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HashError {
    #[error("checksum width must be in 1..=64 bits, got {0}")]
    BadWidth(u32),
    #[error("value {0} lies outside the declared universe")]
    ValueOutsideUniverse(u64),
    #[error("universe of {size} values plus blank does not fit in {bits} bits")]
    UniverseTooLarge { size: u64, bits: u32 },
    #[error("value universe must be non-empty")]
    EmptyUniverse,
}

/// Role of a derived hash function within a primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum HashFn {
    Slot = 1,
    Checksum = 2,
    Chunk = 3,
    HopChecksum = 4,
    ValueEncoding = 5,
    CacheIndex = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Width `b` of a checksum or encoded cell, in bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChecksumBits(u32);

impl ChecksumBits {
    pub fn new(bits: u32) -> Result<Self, HashError> {
        if (1..=64).contains(&bits) {
            Ok(ChecksumBits(bits))
        } else {
            Err(HashError::BadWidth(bits))
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn mask(self) -> u64 {
        if self.0 == 64 {
            u64::MAX
        } else {
            (1u64 << self.0) - 1
        }
    }

    /// Octets needed to store one value of this width.
    pub fn octets(self) -> usize {
        self.0.div_ceil(8) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HashFamily {
    seed_base: u64,
}

impl HashFamily {
    pub const fn new(seed_base: u64) -> Self {
        HashFamily { seed_base }
    }

    pub fn seed_base(&self) -> u64 {
        self.seed_base
    }

    pub fn description(&self) -> &'static str {
        HASH_ALGORITHM
    }

    /// Independent sub-family, e.g. one per primitive.
    pub fn derive(&self, tag: u64) -> HashFamily {
        HashFamily::new(splitmix64(self.seed_base ^ splitmix64(tag.wrapping_add(0x5eed))))
    }

    fn seed(&self, func: HashFn, index: u32) -> u64 {
        splitmix64(splitmix64(self.seed_base ^ ((func as u64) << 56)) ^ u64::from(index))
    }

    pub fn hash(&self, func: HashFn, index: u32, key: &[u8]) -> u64 {
        xxh3_64_with_seed(key, self.seed(func, index))
    }

    /// Slot of redundancy copy `n` of `key` in a table of `buflen` slots.
    pub fn slot_hash(&self, n: u32, key: &[u8], buflen: u64) -> u64 {
        assert!(buflen >= 1, "buflen must be positive");
        self.hash(HashFn::Slot, n, key) % buflen
    }

    /// `bits`-wide key checksum; the upper `64 - bits` bits are zero.
    pub fn key_checksum(&self, key: &[u8], bits: ChecksumBits) -> u64 {
        self.hash(HashFn::Checksum, 0, key) & bits.mask()
    }

    /// Chunk index of redundancy copy `j` for a postcard flow.
    pub fn chunk_hash(&self, j: u32, flow: u64, chunks: u64) -> u64 {
        assert!(chunks >= 1, "chunk count must be positive");
        self.hash(HashFn::Chunk, j, &flow.to_le_bytes()) % chunks
    }

    /// Per-hop checksum of a flow, independent across hops.
    pub fn hop_checksum(&self, flow: u64, hop: u32, bits: ChecksumBits) -> u64 {
        self.hash(HashFn::HopChecksum, hop, &flow.to_le_bytes()) & bits.mask()
    }
}

/// Values `0..size` that postcards may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueUniverse {
    size: u64,
}

impl ValueUniverse {
    pub fn new(size: u64) -> Result<Self, HashError> {
        if size == 0 {
            return Err(HashError::EmptyUniverse);
        }
        Ok(ValueUniverse { size })
    }

    pub fn from_bits(bits: u32) -> Result<Self, HashError> {
        if bits >= 64 {
            return Err(HashError::BadWidth(bits));
        }
        Self::new(1u64 << bits)
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn contains(&self, value: u64) -> bool {
        value < self.size
    }
}

/// Content of one postcard cell before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellValue {
    Value(u64),
    Blank,
}

/// The value encoder `g`: maps `V ∪ {blank}` into `b`-bit strings.
///
/// Implemented as a keyed permutation of the `b`-bit space applied to the
/// value's index (blank takes index `|V|`), so the encoding is injective and
/// decodes in constant time. Blank never maps to a fixed pattern such as zero.
#[derive(Debug, Clone)]
pub struct ValueCodec {
    bits: ChecksumBits,
    universe: ValueUniverse,
    round_keys: [u64; 3],
}

const PERM_MUL: u64 = 0x9e37_79b9_7f4a_7c15;

fn mul_inverse(odd: u64) -> u64 {
    let mut inv = odd;
    for _ in 0..6 {
        inv = inv.wrapping_mul(2u64.wrapping_sub(odd.wrapping_mul(inv)));
    }
    inv
}

impl ValueCodec {
    pub fn new(family: &HashFamily, bits: ChecksumBits, universe: ValueUniverse) -> Result<Self, HashError> {
        if bits.get() < 64 && universe.size() > bits.mask() {
            return Err(HashError::UniverseTooLarge {
                size: universe.size(),
                bits: bits.get(),
            });
        }
        let round_keys = [0u32, 1, 2].map(|r| family.hash(HashFn::ValueEncoding, r, b"g"));
        Ok(ValueCodec {
            bits,
            universe,
            round_keys,
        })
    }

    pub fn bits(&self) -> ChecksumBits {
        self.bits
    }

    pub fn universe(&self) -> ValueUniverse {
        self.universe
    }

    fn shift(&self) -> u32 {
        self.bits.get().div_ceil(2)
    }

    fn permute(&self, mut x: u64) -> u64 {
        let mask = self.bits.mask();
        let s = self.shift();
        for k in self.round_keys {
            x = x.wrapping_add(k) & mask;
            x = x.wrapping_mul(PERM_MUL) & mask;
            x ^= x >> s;
        }
        x
    }

    fn unpermute(&self, mut x: u64) -> u64 {
        let mask = self.bits.mask();
        let s = self.shift();
        let inv = mul_inverse(PERM_MUL);
        for k in self.round_keys.iter().rev() {
            // x ^ (x >> s) is an involution when 2s >= b.
            x ^= x >> s;
            x = x.wrapping_mul(inv) & mask;
            x = x.wrapping_sub(*k) & mask;
        }
        x
    }

    pub fn encode(&self, value: CellValue) -> Result<u64, HashError> {
        let index = match value {
            CellValue::Value(v) if self.universe.contains(v) => v,
            CellValue::Value(v) => return Err(HashError::ValueOutsideUniverse(v)),
            CellValue::Blank => self.universe.size(),
        };
        Ok(self.permute(index))
    }

    /// Inverse of [`ValueCodec::encode`]; `None` for codes outside `g(V ∪ {blank})`.
    pub fn decode(&self, code: u64) -> Option<CellValue> {
        if code & !self.bits.mask() != 0 {
            return None;
        }
        let index = self.unpermute(code);
        match index.cmp(&self.universe.size()) {
            std::cmp::Ordering::Less => Some(CellValue::Value(index)),
            std::cmp::Ordering::Equal => Some(CellValue::Blank),
            std::cmp::Ordering::Greater => None,
        }
    }

    /// Pre-populated table of every `(g(v), v)` pair, blank included.
    pub fn lookup_table(&self) -> HashMap<u64, CellValue> {
        let size = self.universe.size();
        let mut table = HashMap::with_capacity(size as usize + 1);
        for v in 0..size {
            table.insert(self.permute(v), CellValue::Value(v));
        }
        table.insert(self.permute(size), CellValue::Blank);
        table
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bits(b: u32) -> ChecksumBits {
        ChecksumBits::new(b).unwrap()
    }

    #[test]
    fn slot_hash_modulo_one() {
        let h = HashFamily::new(7);
        for k in 0u32..100 {
            assert_eq!(h.slot_hash(k % 4, &k.to_le_bytes(), 1), 0);
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = HashFamily::new(42);
        let b = HashFamily::new(42);
        let c = HashFamily::new(43);
        let key = b"flow-5-tuple";
        assert_eq!(a.slot_hash(1, key, 1000), b.slot_hash(1, key, 1000));
        assert_eq!(a.key_checksum(key, bits(32)), b.key_checksum(key, bits(32)));
        assert_ne!(a.hash(HashFn::Slot, 0, key), c.hash(HashFn::Slot, 0, key));
        assert_ne!(a.hash(HashFn::Slot, 0, key), a.hash(HashFn::Slot, 1, key));
        assert_ne!(a.derive(1), a.derive(2));
    }

    #[test]
    fn pinned_checksum_value() {
        // Stable across processes and builds: pinned once, never recomputed.
        let h = HashFamily::new(0xD7A);
        assert_eq!(h.key_checksum(b"dta", bits(32)), PINNED_CSUM);
    }
    const PINNED_CSUM: u64 = 98_894_249;

    #[test]
    fn checksum_width_mask() {
        let h = HashFamily::new(1);
        for k in 0u32..1000 {
            assert!(h.key_checksum(&k.to_le_bytes(), bits(1)) <= 1);
            assert!(h.key_checksum(&k.to_le_bytes(), bits(13)) < (1 << 13));
        }
        assert!(ChecksumBits::new(0).is_err());
        assert!(ChecksumBits::new(65).is_err());
        assert_eq!(bits(32).octets(), 4);
        assert_eq!(bits(33).octets(), 5);
        assert_eq!(bits(64).mask(), u64::MAX);
    }

    #[test]
    fn slot_hash_chi_square_uniform() {
        // 10^5 random keys over 256 buckets; every bucket within 5 sigma and
        // the chi-square statistic within 5 sigma of its mean (255).
        let h = HashFamily::new(99);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0u64; 256];
        let n = 100_000u64;
        for _ in 0..n {
            let key: u64 = rng.random();
            counts[h.slot_hash(0, &key.to_le_bytes(), 256) as usize] += 1;
        }
        let expect = n as f64 / 256.0;
        let sigma = (expect * (1.0 - 1.0 / 256.0)).sqrt();
        let mut chi2 = 0.0;
        for c in counts {
            assert!((c as f64 - expect).abs() < 5.0 * sigma, "bucket {c}");
            chi2 += (c as f64 - expect).powi(2) / expect;
        }
        let dof = 255.0f64;
        assert!((chi2 - dof).abs() < 5.0 * (2.0 * dof).sqrt(), "chi2 {chi2}");
    }

    #[test]
    fn redundancy_indices_are_independent() {
        // slot_hash(0,k) == slot_hash(1,k) with probability ~ 1/buflen.
        let h = HashFamily::new(5);
        let n = 200_000u64;
        let buflen = 64;
        let agree = (0..n)
            .filter(|k| h.slot_hash(0, &k.to_le_bytes(), buflen) == h.slot_hash(1, &k.to_le_bytes(), buflen))
            .count() as f64;
        let p = 1.0 / buflen as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((agree - n as f64 * p).abs() < 5.0 * sigma, "agree {agree}");
    }

    #[test]
    fn checksum_collision_rate_16_bits() {
        // Monte-Carlo oracle: 10^6 pairs of distinct random keys at b=16.
        let h = HashFamily::new(11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs = 1_000_000u64;
        let mut hits = 0u64;
        for _ in 0..pairs {
            let a: u64 = rng.random();
            let b: u64 = rng.random();
            if a != b && h.key_checksum(&a.to_le_bytes(), bits(16)) == h.key_checksum(&b.to_le_bytes(), bits(16)) {
                hits += 1;
            }
        }
        let p = 2f64.powi(-16);
        let mean = pairs as f64 * p;
        let sigma = (mean * (1.0 - p)).sqrt();
        assert!((hits as f64 - mean).abs() <= 3.0 * sigma, "hits {hits} mean {mean}");
    }

    #[test]
    fn codec_small_universe_table() {
        let h = HashFamily::new(3);
        let codec = ValueCodec::new(&h, bits(8), ValueUniverse::new(1).unwrap()).unwrap();
        let table = codec.lookup_table();
        assert_eq!(table.len(), 2);
        assert_eq!(table[&codec.encode(CellValue::Blank).unwrap()], CellValue::Blank);
        assert_eq!(
            codec.encode(CellValue::Value(1)),
            Err(HashError::ValueOutsideUniverse(1))
        );
    }

    #[test]
    fn codec_table_has_no_collisions() {
        // Birthday bound for a random g: |V|^2 / 2^(b+1) = 2^20/2^33 < 0.001.
        let h = HashFamily::new(4);
        let codec = ValueCodec::new(&h, bits(32), ValueUniverse::from_bits(10).unwrap()).unwrap();
        assert_eq!(codec.lookup_table().len(), (1 << 10) + 1);
    }

    #[test]
    fn codec_roundtrip_and_table_agree() {
        let h = HashFamily::new(8);
        let codec = ValueCodec::new(&h, bits(20), ValueUniverse::from_bits(12).unwrap()).unwrap();
        let table = codec.lookup_table();
        assert_eq!(table.len(), (1 << 12) + 1);
        for v in 0..(1u64 << 12) {
            let code = codec.encode(CellValue::Value(v)).unwrap();
            assert_eq!(codec.decode(code), Some(CellValue::Value(v)));
            assert_eq!(table.get(&code), Some(&CellValue::Value(v)));
        }
        let blank = codec.encode(CellValue::Blank).unwrap();
        assert_ne!(blank, 0);
        assert_eq!(codec.decode(blank), Some(CellValue::Blank));
        // Every code not in the table decodes to nothing.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let code = rng.random::<u64>() & bits(20).mask();
            assert_eq!(codec.decode(code), table.get(&code).copied());
        }
        assert_eq!(codec.decode(1 << 20), None);
    }

    #[test]
    fn codec_rejects_oversized_universe() {
        let h = HashFamily::new(8);
        assert!(ValueCodec::new(&h, bits(4), ValueUniverse::new(16).unwrap()).is_err());
        assert!(ValueCodec::new(&h, bits(4), ValueUniverse::new(15).unwrap()).is_ok());
        assert!(ValueCodec::new(&h, bits(64), ValueUniverse::new(u64::MAX).unwrap()).is_ok());
    }

    proptest! {
        #[test]
        fn codec_permutation_is_invertible(b in 1u32..=64, x in any::<u64>(), seed in any::<u64>()) {
            let codec = ValueCodec::new(&HashFamily::new(seed), bits(b), ValueUniverse::new(1).unwrap()).unwrap();
            let x = x & bits(b).mask();
            let y = codec.permute(x);
            prop_assert!(y <= bits(b).mask());
            prop_assert_eq!(codec.unpermute(y), x);
        }

        #[test]
        fn slot_hash_in_range(n in 0u32..8, key in proptest::collection::vec(any::<u8>(), 0..32), buflen in 1u64..1_000_000) {
            let h = HashFamily::new(17);
            let s = h.slot_hash(n, &key, buflen);
            prop_assert!(s < buflen);
            let cloned = key.clone();
            prop_assert_eq!(s, h.slot_hash(n, &cloned, buflen));
        }
    }
}
