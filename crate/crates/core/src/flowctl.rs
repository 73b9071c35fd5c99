//! Loss detection, NACK-driven retransmission and rate metering.
//!
//! Reporters number their essential reports and keep a bounded backlog of
//! them. The translator tracks the last accepted number per reporter, asks for
//! a go-back-N resend when it sees a gap, and meters the verbs it generates
//! with a token bucket. When the meter runs dry essential reports are parked
//! in a deferred queue and the rest are dropped.

use std::collections::{BTreeMap, VecDeque};

use crate::wire::{self, ControlPacket, DtaHeader, DtaPacket, Report, WireError, FLAG_ESSENTIAL, FLAG_RESYNC};

/// Backlog depth of the reference reporter.
pub const DEFAULT_BACKLOG: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AimdConfig {
    pub initial: f64,
    pub min: f64,
    pub max: f64,
    /// Added per step without congestion.
    pub increase: f64,
    /// Multiplied on each congestion signal.
    pub decrease: f64,
}

impl Default for AimdConfig {
    fn default() -> Self {
        AimdConfig {
            initial: 1.0,
            min: 0.01,
            max: 1.0,
            increase: 0.05,
            decrease: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NackReply {
    /// Encoded packets to resend, oldest first.
    pub retransmit: Vec<Vec<u8>>,
    /// Requested reports no longer in the backlog, counted once each.
    pub unrecoverable: u64,
}

#[derive(Debug, Clone)]
pub struct ReporterState {
    reporter_id: u32,
    essential_seq: u32,
    backlog: VecDeque<DtaPacket>,
    capacity: usize,
    evicted: u64,
    unrecoverable: u64,
    lost_upto: u32,
    aimd: AimdConfig,
    rate: f64,
}

impl ReporterState {
    pub fn new(reporter_id: u32, capacity: usize) -> Self {
        Self::with_aimd(reporter_id, capacity, AimdConfig::default())
    }

    pub fn with_aimd(reporter_id: u32, capacity: usize, aimd: AimdConfig) -> Self {
        ReporterState {
            reporter_id,
            essential_seq: 0,
            backlog: VecDeque::new(),
            capacity: capacity.max(1),
            evicted: 0,
            unrecoverable: 0,
            lost_upto: 0,
            aimd,
            rate: aimd.initial,
        }
    }

    pub fn reporter_id(&self) -> u32 {
        self.reporter_id
    }

    pub fn essential_seq(&self) -> u32 {
        self.essential_seq
    }

    pub fn backlog_len(&self) -> usize {
        self.backlog.len()
    }

    /// Essential reports pushed out of the backlog before being known delivered.
    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    pub fn unrecoverable(&self) -> u64 {
        self.unrecoverable
    }

    /// Fraction of the maximum essential rate currently offered.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Stamps and encodes one report; essential ones are retained.
    pub fn reporter_send(&mut self, flags: u8, report: Report) -> Result<Vec<u8>, WireError> {
        let essential = flags & FLAG_ESSENTIAL != 0;
        let seq = if essential {
            self.essential_seq.wrapping_add(1)
        } else {
            self.essential_seq
        };
        let packet = DtaPacket::new(
            DtaHeader {
                flags: flags & !FLAG_RESYNC,
                reporter_id: self.reporter_id,
                essential_seq: seq,
            },
            report,
        );
        let bytes = wire::encode(&packet)?;
        if essential {
            self.essential_seq = seq;
            if self.backlog.len() == self.capacity {
                self.backlog.pop_front();
                self.evicted += 1;
            }
            self.backlog.push_back(packet);
        }
        Ok(bytes)
    }

    /// Go-back-N: resends every retained report from `expected` onwards.
    /// Earlier entries are implicitly acknowledged and released. If the
    /// requested report was already evicted, the first resent packet carries
    /// the resync flag so the translator can skip the hole.
    pub fn reporter_handle_nack(&mut self, expected: u32) -> NackReply {
        while self.backlog.front().is_some_and(|p| p.header.essential_seq < expected) {
            self.backlog.pop_front();
        }
        let mut reply = NackReply::default();
        if expected > self.essential_seq {
            return reply;
        }
        let first = self.backlog.front().map_or(self.essential_seq + 1, |p| p.header.essential_seq);
        if first > expected {
            let from = expected.max(self.lost_upto + 1);
            if first > from {
                reply.unrecoverable = u64::from(first - from);
                self.unrecoverable += reply.unrecoverable;
                self.lost_upto = first - 1;
            }
        }
        for (i, p) in self.backlog.iter().enumerate() {
            let mut p = p.clone();
            if i == 0 && first > expected {
                p.header.flags |= FLAG_RESYNC;
            }
            reply.retransmit.push(wire::encode(&p).expect("encoded once already"));
        }
        reply
    }

    pub fn handle_congestion(&mut self) {
        self.rate = (self.rate * self.aimd.decrease).max(self.aimd.min);
    }

    /// Additive recovery, once per step.
    pub fn tick(&mut self) {
        self.rate = (self.rate + self.aimd.increase).min(self.aimd.max);
    }
}

/// Token bucket over generated verbs, refilled once per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    tokens: f64,
    last_step: u64,
}

impl TokenBucket {
    pub fn new(rate: f64, burst: f64) -> Self {
        let burst = burst.max(0.0);
        TokenBucket {
            rate: rate.max(0.0),
            burst,
            tokens: burst,
            last_step: 0,
        }
    }

    pub fn tokens(&self) -> f64 {
        self.tokens
    }

    pub fn advance_to(&mut self, step: u64) {
        if step > self.last_step {
            self.tokens = (self.tokens + self.rate * (step - self.last_step) as f64).min(self.burst);
            self.last_step = step;
        }
    }

    pub fn try_take(&mut self, cost: f64) -> bool {
        if self.tokens + 1e-9 >= cost {
            self.tokens = (self.tokens - cost).max(0.0);
            true
        } else {
            false
        }
    }
}

/// Verbs the translator will emit per report, amortised for batching primitives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerbCostModel {
    pub append_batch: u32,
    pub sketch_batch: u32,
    pub postcard_redundancy: u32,
    pub postcard_hops: u32,
}

impl Default for VerbCostModel {
    fn default() -> Self {
        VerbCostModel {
            append_batch: 1,
            sketch_batch: 1,
            postcard_redundancy: 1,
            postcard_hops: 1,
        }
    }
}

impl VerbCostModel {
    pub fn cost(&self, report: &Report) -> f64 {
        match report {
            Report::KeyWrite { redundancy, .. } => f64::from(*redundancy),
            Report::KeyIncrement { redundancy, delta, .. } if *delta > 0 => f64::from(*redundancy),
            Report::KeyIncrement { .. } => 0.0,
            Report::Append { .. } => 1.0 / f64::from(self.append_batch.max(1)),
            Report::SketchMerge { .. } => 1.0 / f64::from(self.sketch_batch.max(1)),
            Report::Postcarding { .. } => {
                f64::from(self.postcard_redundancy) / f64::from(self.postcard_hops.max(1))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Process,
    /// Gap detected; the report is not processed.
    Nack(u32),
    DropDuplicate,
    DropLowPriority,
    /// Parked in the deferred queue.
    Divert,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TranslatorStats {
    pub processed: u64,
    pub nacked: u64,
    pub nacks_sent: u64,
    pub duplicates: u64,
    pub diverted: u64,
    pub dropped_low_priority: u64,
    pub resyncs: u64,
    pub skipped_by_resync: u64,
    pub congestion_signals: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct PeerState {
    /// Highest essential number accepted, processed or deferred.
    accepted: u32,
    last_nack: Option<(u32, u64)>,
    last_congestion: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TranslatorFlowState {
    peers: BTreeMap<u32, PeerState>,
    meter: TokenBucket,
    costs: VerbCostModel,
    nack_holdoff: u64,
    deferred: VecDeque<DtaPacket>,
    outbox: Vec<ControlPacket>,
    step: u64,
    stats: TranslatorStats,
}

impl TranslatorFlowState {
    pub fn new(meter: TokenBucket, costs: VerbCostModel, nack_holdoff: u64) -> Self {
        TranslatorFlowState {
            peers: BTreeMap::new(),
            meter,
            costs,
            nack_holdoff,
            deferred: VecDeque::new(),
            outbox: Vec::new(),
            step: 0,
            stats: TranslatorStats::default(),
        }
    }

    /// A translator that never meters.
    pub fn unmetered() -> Self {
        Self::new(TokenBucket::new(f64::INFINITY, f64::INFINITY), VerbCostModel::default(), 1)
    }

    pub fn stats(&self) -> &TranslatorStats {
        &self.stats
    }

    pub fn tokens(&self) -> f64 {
        self.meter.tokens()
    }

    pub fn deferred_len(&self) -> usize {
        self.deferred.len()
    }

    pub fn last_accepted(&self, reporter: u32) -> u32 {
        self.peers.get(&reporter).map_or(0, |p| p.accepted)
    }

    /// Control packets produced since the last call.
    pub fn take_outbox(&mut self) -> Vec<ControlPacket> {
        std::mem::take(&mut self.outbox)
    }

    fn nack(&mut self, reporter: u32, expected: u32) {
        let step = self.step;
        let peer = self.peers.entry(reporter).or_default();
        let fresh = match peer.last_nack {
            Some((e, at)) => e != expected || step >= at + self.nack_holdoff,
            None => true,
        };
        if fresh {
            peer.last_nack = Some((expected, step));
            self.outbox.push(ControlPacket::Nack {
                reporter_id: reporter,
                expected_seq: expected,
            });
            self.stats.nacks_sent += 1;
        }
    }

    fn congest(&mut self, reporter: u32) {
        let step = self.step;
        let peer = self.peers.entry(reporter).or_default();
        if peer.last_congestion != Some(step) {
            peer.last_congestion = Some(step);
            self.outbox.push(ControlPacket::Congestion { reporter_id: reporter });
            self.stats.congestion_signals += 1;
        }
    }

    /// Moves the translator clock forward, refilling the meter.
    pub fn advance_to(&mut self, now: u64) {
        self.step = self.step.max(now);
        self.meter.advance_to(self.step);
    }

    pub fn translator_receive(&mut self, packet: &DtaPacket, now: u64) -> Verdict {
        self.advance_to(now);
        let h = packet.header;
        let accepted = self.last_accepted(h.reporter_id);
        if !h.is_essential() {
            // A count ahead of everything accepted reveals a lost essential report.
            if h.essential_seq > accepted {
                self.nack(h.reporter_id, accepted + 1);
            }
            if self.meter.try_take(self.costs.cost(&packet.report)) {
                self.stats.processed += 1;
                return Verdict::Process;
            }
            self.congest(h.reporter_id);
            self.stats.dropped_low_priority += 1;
            return Verdict::DropLowPriority;
        }
        if h.essential_seq <= accepted {
            self.stats.duplicates += 1;
            return Verdict::DropDuplicate;
        }
        if h.essential_seq != accepted + 1 {
            if h.flags & FLAG_RESYNC != 0 {
                self.stats.resyncs += 1;
                self.stats.skipped_by_resync += u64::from(h.essential_seq - accepted - 1);
            } else {
                self.stats.nacked += 1;
                self.nack(h.reporter_id, accepted + 1);
                return Verdict::Nack(accepted + 1);
            }
        }
        self.peers.entry(h.reporter_id).or_default().accepted = h.essential_seq;
        if self.meter.try_take(self.costs.cost(&packet.report)) {
            self.stats.processed += 1;
            Verdict::Process
        } else {
            self.congest(h.reporter_id);
            self.stats.diverted += 1;
            self.deferred.push_back(packet.clone());
            Verdict::Divert
        }
    }

    /// A reporter's announced essential count; asks for anything missing.
    pub fn handle_announce(&mut self, reporter: u32, essential_seq: u32, now: u64) {
        self.step = self.step.max(now);
        let accepted = self.last_accepted(reporter);
        if essential_seq > accepted {
            self.nack(reporter, accepted + 1);
        }
    }

    /// Re-injects deferred reports while leftover tokens cover them.
    pub fn drain_deferred(&mut self) -> Vec<DtaPacket> {
        let mut out = Vec::new();
        while let Some(p) = self.deferred.front() {
            if !self.meter.try_take(self.costs.cost(&p.report)) {
                break;
            }
            out.push(self.deferred.pop_front().unwrap());
            self.stats.processed += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::decode;

    fn kw(n: u8) -> Report {
        Report::KeyWrite {
            redundancy: n,
            key: vec![1],
            data: vec![2],
        }
    }

    #[test]
    fn essential_sends_are_numbered() {
        let mut r = ReporterState::new(1, 8);
        for want in 1..=3 {
            let p = decode(&r.reporter_send(FLAG_ESSENTIAL, kw(1)).unwrap()).unwrap();
            assert_eq!(p.header.essential_seq, want);
        }
        let p = decode(&r.reporter_send(0, kw(1)).unwrap()).unwrap();
        assert_eq!(p.header.essential_seq, 3);
        assert_eq!(r.backlog_len(), 3);
    }

    #[test]
    fn backlog_evicts_oldest() {
        let mut r = ReporterState::new(1, DEFAULT_BACKLOG);
        for _ in 0..DEFAULT_BACKLOG + 4 {
            r.reporter_send(FLAG_ESSENTIAL, kw(1)).unwrap();
        }
        assert_eq!(r.backlog_len(), DEFAULT_BACKLOG);
        assert_eq!(r.evicted(), 4);
    }

    #[test]
    fn nack_resends_suffix() {
        let mut r = ReporterState::new(1, 8);
        for _ in 0..3 {
            r.reporter_send(FLAG_ESSENTIAL, kw(1)).unwrap();
        }
        let reply = r.reporter_handle_nack(2);
        let seqs: Vec<u32> = reply
            .retransmit
            .iter()
            .map(|b| decode(b).unwrap().header.essential_seq)
            .collect();
        assert_eq!(seqs, vec![2, 3]);
        assert_eq!(reply.unrecoverable, 0);
    }

    #[test]
    fn nack_for_evicted_report_is_unrecoverable() {
        let mut r = ReporterState::new(1, 2);
        for _ in 0..4 {
            r.reporter_send(FLAG_ESSENTIAL, kw(1)).unwrap();
        }
        let reply = r.reporter_handle_nack(2);
        assert_eq!(reply.unrecoverable, 1);
        let first = decode(&reply.retransmit[0]).unwrap();
        assert_eq!(first.header.essential_seq, 3);
        assert_ne!(first.header.flags & FLAG_RESYNC, 0);
        assert_eq!(r.reporter_handle_nack(2).unrecoverable, 0);
        assert_eq!(r.unrecoverable(), 1);
    }

    fn essential(seq: u32) -> DtaPacket {
        DtaPacket::new(
            DtaHeader {
                flags: FLAG_ESSENTIAL,
                reporter_id: 9,
                essential_seq: seq,
            },
            kw(2),
        )
    }

    #[test]
    fn in_order_processes_gap_nacks() {
        let mut t = TranslatorFlowState::unmetered();
        assert_eq!(t.translator_receive(&essential(1), 0), Verdict::Process);
        assert_eq!(t.translator_receive(&essential(3), 0), Verdict::Nack(2));
        assert_eq!(t.translator_receive(&essential(2), 0), Verdict::Process);
        assert_eq!(t.translator_receive(&essential(2), 0), Verdict::DropDuplicate);
        assert_eq!(t.translator_receive(&essential(3), 0), Verdict::Process);
        assert_eq!(
            t.take_outbox(),
            vec![ControlPacket::Nack {
                reporter_id: 9,
                expected_seq: 2
            }]
        );
    }

    #[test]
    fn non_essential_never_nacks_on_its_own_loss() {
        let mut t = TranslatorFlowState::unmetered();
        let mut p = essential(0);
        p.header.flags = 0;
        for _ in 0..3 {
            assert_eq!(t.translator_receive(&p, 0), Verdict::Process);
        }
        assert!(t.take_outbox().is_empty());
    }

    #[test]
    fn meter_splits_offered_load() {
        let mut t = TranslatorFlowState::new(TokenBucket::new(10.0, 10.0), VerbCostModel::default(), 4);
        let mut seq = 0;
        for step in 0..3 {
            let mut processed = 0;
            let mut diverted = 0;
            for _ in 0..25 {
                seq += 1;
                match t.translator_receive(&essential(seq), step) {
                    Verdict::Process => processed += 1,
                    Verdict::Divert => diverted += 1,
                    v => panic!("{v:?}"),
                }
            }
            assert!(t.drain_deferred().is_empty());
            assert_eq!((processed, diverted), (5, 20));
        }
        t.translator_receive(&essential(1), 3);
        assert_eq!(t.drain_deferred().len(), 5);
    }

    #[test]
    fn announce_exposes_tail_loss() {
        let mut t = TranslatorFlowState::unmetered();
        t.translator_receive(&essential(1), 0);
        t.handle_announce(9, 1, 1);
        assert!(t.take_outbox().is_empty());
        t.handle_announce(9, 2, 1);
        assert_eq!(
            t.take_outbox(),
            vec![ControlPacket::Nack {
                reporter_id: 9,
                expected_seq: 2
            }]
        );
    }

    #[test]
    fn aimd_rate() {
        let mut r = ReporterState::new(1, 4);
        r.handle_congestion();
        r.handle_congestion();
        assert!((r.rate() - 0.25).abs() < 1e-12);
        r.tick();
        assert!((r.rate() - 0.30).abs() < 1e-12);
    }
}
