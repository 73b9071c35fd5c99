//! The step-driven event loop: reporters, lossy links, translator, collector.
//!
//! Each step every reporter first resends whatever NACKs asked for, then
//! emits new reports as its rate allows. The translator handles arrivals in
//! reporter order, drains its deferred queue with leftover meter tokens, and
//! answers with control packets that reach reporters at the end of the step.
//! Once a reporter has nothing new to send it announces its essential count
//! every step so that lost tail reports are still NACKed.

use std::collections::{BTreeMap, HashMap, VecDeque};

use dta_core::append::{append_poll, AppendListSpec, AppendTranslator, PollCursor};
use dta_core::counters::{read_sketch, KiStore, SketchMerger, SketchSpec, SmVerdict};
use dta_core::flowctl::{AimdConfig, ReporterState, TokenBucket, TranslatorFlowState, Verdict, VerbCostModel};
use dta_core::hashing::{ChecksumBits, HashFamily, ValueUniverse};
use dta_core::keywrite::{KwLayout, KwStore, QueryPolicy};
use dta_core::memstore::{apply_verb, MemoryRegion, Psn, PsnCounter, QpState, QueuePair, Verb, VerbError};
use dta_core::postcarding::{PcLayout, PostcardCache, PostcardStore};
use dta_core::tally::OutcomeTally;
use dta_core::wire::{self, ControlPacket, DtaPacket, Report};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, RegionLayout, SimConfig, Workload};
use crate::workload::{generate, sketch_report, Generated, PendingReport};

const LINK_STREAM: u64 = 0x4c49_4e4b;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct QueryStats {
    pub queries: u64,
    pub success: u64,
    pub empty: u64,
    pub ambiguous: u64,
    pub wrong: u64,
}

impl From<OutcomeTally> for QueryStats {
    fn from(t: OutcomeTally) -> Self {
        QueryStats {
            queries: t.trials,
            success: t.success,
            empty: t.empty,
            ambiguous: t.ambiguous,
            wrong: t.wrong,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub workload: String,
    pub steps: u64,
    pub completed: bool,
    pub reports_generated: u64,
    pub essential_generated: u64,
    pub essential_applied: u64,
    pub essential_unrecoverable: u64,
    pub essential_in_flight: u64,
    pub essential_applied_twice: u64,
    pub nonessential_generated: u64,
    pub nonessential_applied: u64,
    pub nonessential_lost: u64,
    pub nonessential_dropped: u64,
    pub packets_lost_uplink: u64,
    pub retransmissions: u64,
    pub nacks_sent: u64,
    pub duplicates_suppressed: u64,
    pub diverted: u64,
    pub congestion_signals: u64,
    pub column_nacks: u64,
    pub rejected_reports: u64,
    pub backlog_evictions: u64,
    pub verbs_emitted: u64,
    pub verbs_dropped: u64,
    pub verbs_refused: u64,
    pub qp_desynced: bool,
    pub queries: Option<QueryStats>,
    /// Append: every applied essential entry sits in memory exactly once.
    pub append_exactly_once: Option<bool>,
    pub ki_underestimates: Option<u64>,
    pub sketch_matches_oracle: Option<bool>,
    pub memory_sha256: String,
}

impl RunReport {
    /// Every generated report ends in exactly one terminal state.
    pub fn is_conserved(&self) -> bool {
        self.essential_generated == self.essential_applied + self.essential_unrecoverable + self.essential_in_flight
            && self.nonessential_generated
                == self.nonessential_applied + self.nonessential_lost + self.nonessential_dropped
            && self.reports_generated == self.essential_generated + self.nonessential_generated
    }

    /// Essential reports applied exactly once, none outstanding.
    pub fn exactly_once(&self) -> bool {
        self.completed
            && self.essential_applied_twice == 0
            && self.essential_in_flight == 0
            && self.essential_applied + self.essential_unrecoverable == self.essential_generated
    }
}

struct Translator {
    hashes: HashFamily,
    kw: Option<KwStore>,
    pc: Option<(PostcardStore, PostcardCache, u32)>,
    append: Option<AppendTranslator>,
    ki: Option<KiStore>,
    sm: Option<(SketchMerger, u32)>,
}

impl Translator {
    fn new(cfg: &SimConfig, layout: &RegionLayout) -> Self {
        let hashes = HashFamily::new(cfg.seed);
        let m = &cfg.topology.memory;
        let kw = m.keywrite.map(|kw| {
            KwStore::new(
                KwLayout {
                    base: layout.keywrite.unwrap(),
                    buflen: kw.slots,
                    checksum_bits: ChecksumBits::new(kw.checksum_bits).unwrap(),
                    value_len: kw.value_len,
                },
                hashes.derive(1),
            )
            .unwrap()
            .with_max_redundancy(255)
        });
        let pc_redundancy = match cfg.workload {
            Workload::Postcards { redundancy, .. } => redundancy,
            _ => 1,
        };
        let pc = m.postcarding.map(|pc| {
            let universe = ValueUniverse::from_bits(pc.value_bits).unwrap();
            let store = PostcardStore::new(
                PcLayout {
                    base: layout.postcarding.unwrap(),
                    chunks: pc.chunks,
                    hops: pc.hops,
                    cell_bits: ChecksumBits::new(pc.cell_bits).unwrap(),
                },
                hashes.derive(2),
                universe,
            )
            .unwrap()
            .with_max_redundancy(255);
            let cache = PostcardCache::new(pc.cache_slots, pc.hops, universe, hashes.derive(3)).unwrap();
            (store, cache, pc_redundancy)
        });
        let append = m.append.map(|a| {
            let mut t = AppendTranslator::new(a.batch_size).unwrap();
            let list_len = a.capacity * a.entry_len as u64;
            for id in 0..a.lists {
                t.add_list(AppendListSpec {
                    id,
                    base: layout.append.unwrap() + u64::from(id) * list_len,
                    capacity: a.capacity,
                    entry_len: a.entry_len,
                })
                .unwrap();
            }
            t
        });
        let ki = m
            .key_increment
            .map(|ki| KiStore::new(layout.key_increment.unwrap(), ki.slots, hashes.derive(4)).unwrap().with_max_redundancy(255));
        let reporters: Vec<u32> = (0..cfg.topology.reporters).collect();
        let sm = m.sketch_merge.map(|sm| {
            let spec = SketchSpec {
                rows: sm.rows,
                cols: sm.cols,
                op: sm.op.into(),
            };
            (
                SketchMerger::new(spec, layout.sketch_merge.unwrap(), &reporters).unwrap(),
                sm.batch_columns,
            )
        });
        Translator {
            hashes,
            kw,
            pc,
            append,
            ki,
            sm,
        }
    }

    fn costs(&self, cfg: &SimConfig) -> VerbCostModel {
        let m = &cfg.topology.memory;
        VerbCostModel {
            append_batch: m.append.map_or(1, |a| a.batch_size),
            sketch_batch: m.sketch_merge.map_or(1, |s| s.batch_columns),
            postcard_redundancy: self.pc.as_ref().map_or(1, |p| p.2),
            postcard_hops: m.postcarding.map_or(1, |p| p.hops),
        }
    }

    /// Verbs for one report, or `None` when the primitive rejects it.
    fn translate(&mut self, reporter: u32, report: &Report, control: &mut Vec<ControlPacket>) -> Option<Vec<Verb>> {
        match report {
            Report::KeyWrite { redundancy, key, data } => {
                self.kw.as_ref()?.kw_write(key, data, u32::from(*redundancy)).ok()
            }
            Report::Append { list_id, data } => self.append.as_mut()?.append_ingest(*list_id, data).ok(),
            Report::KeyIncrement { redundancy, key, delta } => {
                self.ki.as_ref()?.ki_increment(key, *delta, u32::from(*redundancy)).ok()
            }
            Report::SketchMerge { col_index, values } => {
                let (merger, batch) = self.sm.as_mut()?;
                match merger.sm_ingest_column(reporter, u32::from(*col_index), values).ok()? {
                    SmVerdict::Nack { expected } => control.push(ControlPacket::ColumnNack {
                        reporter_id: reporter,
                        expected_col: expected,
                    }),
                    SmVerdict::Merged { .. } | SmVerdict::Duplicate => {}
                }
                Some(merger.sm_flush_completed(*batch))
            }
            Report::Postcarding {
                flow_id,
                hop,
                path_len,
                value,
            } => {
                let (store, cache, n) = self.pc.as_mut()?;
                let path_len = (*path_len > 0).then_some(u32::from(*path_len));
                let chunks = cache
                    .pc_ingest(*flow_id, u32::from(*hop), u64::from(*value), path_len)
                    .ok()?;
                let mut verbs = Vec::new();
                for c in &chunks {
                    verbs.extend(store.pc_write(c, *n).ok()?);
                }
                Some(verbs)
            }
        }
    }

    /// Ships everything still held in translator-side buffers.
    fn flush(&mut self) -> Vec<Verb> {
        let mut verbs = Vec::new();
        if let Some(a) = self.append.as_mut() {
            verbs.extend(a.flush_all());
        }
        if let Some((store, cache, n)) = self.pc.as_mut() {
            for c in cache.flush_all() {
                verbs.extend(store.pc_write(&c, *n).expect("cached chunk is well formed"));
            }
        }
        verbs
    }
}

/// Translator-to-collector hop with optional fault injection.
struct CollectorLink {
    region: MemoryRegion,
    qp: QueuePair,
    psn: PsnCounter,
    loss: f64,
    emitted: u64,
    dropped: u64,
    refused: u64,
}

impl CollectorLink {
    fn send(&mut self, verbs: &[Verb], rng: &mut ChaCha8Rng) {
        for verb in verbs {
            self.emitted += 1;
            let psn = self.psn.stamp();
            if self.loss > 0.0 && rng.random_bool(self.loss) {
                self.dropped += 1;
                continue;
            }
            match apply_verb(&mut self.region, &mut self.qp, psn, verb) {
                Ok(_) => {}
                Err(VerbError::Desynced { .. }) => self.refused += 1,
                Err(e) => panic!("translator produced an invalid verb: {e}"),
            }
        }
    }
}

struct ReporterDriver {
    state: ReporterState,
    queue: VecDeque<PendingReport>,
    resend: VecDeque<Vec<u8>>,
    credit: f64,
    /// Highest sketch column sent, for column NACK rewinds.
    next_column: u32,
}

/// Runs one configuration to completion (or `max_steps`) and returns the
/// report together with the final collector memory.
pub fn run(cfg: &SimConfig) -> Result<(RunReport, MemoryRegion), ConfigError> {
    cfg.validate()?;
    let layout = RegionLayout::plan(&cfg.topology.memory);
    let generated = generate(cfg);
    let Generated {
        queues,
        paths,
        sketches,
    } = generated;
    let mut rep = RunReport {
        seed: cfg.seed,
        workload: cfg.workload.name().to_string(),
        ..RunReport::default()
    };
    for q in &queues {
        for p in q {
            rep.reports_generated += 1;
            if p.flags & wire::FLAG_ESSENTIAL != 0 {
                rep.essential_generated += 1;
            } else {
                rep.nonessential_generated += 1;
            }
        }
    }
    let tcfg = &cfg.topology.translator;
    let mut translator = Translator::new(cfg, &layout);
    let meter = match tcfg.meter_rate {
        Some(rate) => TokenBucket::new(rate, tcfg.meter_burst.unwrap_or(rate)),
        None => TokenBucket::new(f64::INFINITY, f64::INFINITY),
    };
    let mut flow = TranslatorFlowState::new(meter, translator.costs(cfg), tcfg.nack_holdoff);
    let mut reporters: Vec<ReporterDriver> = queues
        .into_iter()
        .enumerate()
        .map(|(r, queue)| ReporterDriver {
            state: ReporterState::with_aimd(r as u32, tcfg.backlog_capacity, AimdConfig::default()),
            queue,
            resend: VecDeque::new(),
            credit: 0.0,
            next_column: 0,
        })
        .collect();
    let mut link = CollectorLink {
        region: MemoryRegion::new(layout.total as usize),
        qp: QueuePair::new(Psn::new(0)),
        psn: PsnCounter::new(Psn::new(0)),
        loss: cfg.topology.fault_injection.collector_link_loss,
        emitted: 0,
        dropped: 0,
        refused: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ LINK_STREAM);
    let (uplink, downlink) = (cfg.topology.loss.uplink, cfg.topology.loss.downlink);
    let per_step = f64::from(cfg.workload.per_step());
    let mut applied: HashMap<(u32, u32), u32> = HashMap::new();
    let mut kw_truth: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
    let mut ki_truth: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    let mut append_applied: Vec<Vec<u8>> = Vec::new();

    let mut apply = |packet: &DtaPacket,
                     translator: &mut Translator,
                     link: &mut CollectorLink,
                     rng: &mut ChaCha8Rng,
                     control: &mut Vec<ControlPacket>,
                     rep: &mut RunReport| {
        let h = packet.header;
        let Some(verbs) = translator.translate(h.reporter_id, &packet.report, control) else {
            rep.rejected_reports += 1;
            return;
        };
        link.send(&verbs, rng);
        if h.is_essential() {
            let count = applied.entry((h.reporter_id, h.essential_seq)).or_default();
            *count += 1;
            if *count > 1 {
                rep.essential_applied_twice += 1;
            }
        } else {
            rep.nonessential_applied += 1;
        }
        match &packet.report {
            Report::KeyWrite { key, data, .. } => {
                kw_truth.insert(key.clone(), data.clone());
            }
            Report::KeyIncrement { key, delta, .. } => *ki_truth.entry(key.clone()).or_default() += delta,
            Report::Append { data, .. } if h.is_essential() => append_applied.push(data.clone()),
            _ => {}
        }
    };

    let mut step = 0u64;
    let mut control = Vec::new();
    loop {
        flow.advance_to(step);
        let mut inbox: Vec<Vec<u8>> = Vec::new();
        let mut announces: Vec<(u32, u32)> = Vec::new();
        for d in reporters.iter_mut() {
            let mut out: Vec<(Vec<u8>, bool)> = d.resend.drain(..).map(|b| (b, true)).collect();
            d.credit = (d.credit + per_step * d.state.rate()).min(per_step.max(1.0));
            while d.credit >= 1.0 {
                let Some(p) = d.queue.pop_front() else { break };
                d.credit -= 1.0;
                if let Report::SketchMerge { col_index, .. } = p.report {
                    d.next_column = d.next_column.max(u32::from(col_index) + 1);
                }
                let bytes = d.state.reporter_send(p.flags, p.report).expect("generated reports encode");
                out.push((bytes, p.flags & wire::FLAG_ESSENTIAL != 0));
            }
            for (bytes, essential) in out {
                if uplink > 0.0 && rng.random_bool(uplink) {
                    rep.packets_lost_uplink += 1;
                    if !essential {
                        rep.nonessential_lost += 1;
                    }
                    continue;
                }
                inbox.push(bytes);
            }
            if d.queue.is_empty() && d.resend.is_empty() && !(uplink > 0.0 && rng.random_bool(uplink)) {
                announces.push((d.state.reporter_id(), d.state.essential_seq()));
            }
        }
        for bytes in &inbox {
            let packet = wire::decode(bytes).expect("reporters emit valid packets");
            if flow.translator_receive(&packet, step) == Verdict::Process {
                apply(&packet, &mut translator, &mut link, &mut rng, &mut control, &mut rep);
            }
        }
        for (r, seq) in announces {
            flow.handle_announce(r, seq, step);
        }
        for packet in flow.drain_deferred() {
            apply(&packet, &mut translator, &mut link, &mut rng, &mut control, &mut rep);
        }
        control.extend(flow.take_outbox());
        for c in control.drain(..) {
            if downlink > 0.0 && rng.random_bool(downlink) {
                continue;
            }
            let c = wire::decode_control(&wire::encode_control(&c)).expect("control round trip");
            let d = &mut reporters[c.reporter_id() as usize];
            match c {
                ControlPacket::Nack { expected_seq, .. } => {
                    let reply = d.state.reporter_handle_nack(expected_seq);
                    rep.retransmissions += reply.retransmit.len() as u64;
                    d.resend.extend(reply.retransmit);
                }
                ControlPacket::Congestion { .. } => d.state.handle_congestion(),
                ControlPacket::ColumnNack { expected_col, .. } => {
                    rep.column_nacks += 1;
                    let sketch = &sketches[c.reporter_id() as usize];
                    // Rewind: queue the missing columns ahead of unsent ones.
                    let from = expected_col;
                    let to = d.next_column.min(sketch.len() as u32);
                    for col in (from..to).rev() {
                        d.queue.push_front(sketch_report(col, &sketch[col as usize]));
                    }
                    d.next_column = from;
                }
                ControlPacket::CountAnnounce { .. } => {}
            }
        }
        for d in reporters.iter_mut() {
            d.state.tick();
        }
        step += 1;
        let quiet = reporters.iter().all(|d| {
            d.queue.is_empty() && d.resend.is_empty() && flow.last_accepted(d.state.reporter_id()) == d.state.essential_seq()
        }) && flow.deferred_len() == 0;
        let sketch_done = translator
            .sm
            .as_ref()
            .map_or(true, |(m, _)| m.flushed_columns() == m.spec().cols);
        if quiet && sketch_done {
            rep.completed = true;
            break;
        }
        if step >= cfg.max_steps {
            break;
        }
    }
    let tail = translator.flush();
    link.send(&tail, &mut rng);

    rep.steps = step;
    let stats = *flow.stats();
    rep.nacks_sent = stats.nacks_sent;
    rep.duplicates_suppressed = stats.duplicates;
    rep.diverted = stats.diverted;
    rep.congestion_signals = stats.congestion_signals;
    rep.nonessential_dropped = stats.dropped_low_priority;
    rep.essential_applied = applied.len() as u64;
    rep.essential_unrecoverable = reporters.iter().map(|d| d.state.unrecoverable()).sum();
    rep.backlog_evictions = reporters.iter().map(|d| d.state.evicted()).sum();
    rep.essential_in_flight = reporters
        .iter()
        .map(|d| u64::from(d.state.essential_seq() - flow.last_accepted(d.state.reporter_id())))
        .sum::<u64>()
        + flow.deferred_len() as u64
        + reporters
            .iter()
            .flat_map(|d| d.queue.iter())
            .filter(|p| p.flags & wire::FLAG_ESSENTIAL != 0)
            .count() as u64;
    rep.verbs_emitted = link.emitted;
    rep.verbs_dropped = link.dropped;
    rep.verbs_refused = link.refused;
    rep.qp_desynced = link.qp.state() == QpState::Desynced;

    let region = link.region;
    match cfg.workload {
        Workload::KwFlows { redundancy, .. } => {
            let store = translator.kw.as_ref().unwrap();
            let mut tally = OutcomeTally::default();
            for (key, value) in &kw_truth {
                let res = store
                    .kw_query(&region, key, redundancy, 1, QueryPolicy::Plurality)
                    .expect("valid query");
                tally.record(res.classify(value));
            }
            rep.queries = Some(tally.into());
        }
        Workload::Postcards { redundancy, .. } => {
            let (store, _, _) = translator.pc.as_ref().unwrap();
            let mut tally = OutcomeTally::default();
            for (flow_id, path) in paths.iter().enumerate() {
                let res = store.pc_query(&region, flow_id as u64, redundancy).expect("valid query");
                tally.record(res.classify(path));
            }
            rep.queries = Some(tally.into());
        }
        Workload::AppendEvents { .. } => {
            let a = translator.append.as_ref().unwrap();
            let mut seen: HashMap<Vec<u8>, u32> = HashMap::new();
            let mut lapped = false;
            for list in a.lists() {
                let mut cursor = PollCursor::new(list.spec.id);
                let batch = append_poll(&region, list, &mut cursor, usize::MAX).expect("list in region");
                lapped |= batch.skipped > 0;
                for e in batch.entries {
                    *seen.entry(e).or_default() += 1;
                }
            }
            rep.append_exactly_once =
                Some(!lapped && append_applied.iter().all(|e| seen.get(e) == Some(&1)));
        }
        Workload::KiCounters { redundancy, .. } => {
            let store = translator.ki.as_ref().unwrap();
            let under = ki_truth
                .iter()
                .filter(|(k, &v)| store.ki_query(&region, k, redundancy).expect("valid query") < v)
                .count();
            rep.ki_underestimates = Some(under as u64);
        }
        Workload::SketchColumns { .. } => {
            let (merger, _) = translator.sm.as_ref().unwrap();
            let spec = *merger.spec();
            let mut oracle = vec![vec![0u64; spec.cols as usize]; spec.rows as usize];
            for sketch in &sketches {
                for (c, column) in sketch.iter().enumerate() {
                    for (r, &v) in column.iter().enumerate() {
                        oracle[r][c] = spec.op.apply(oracle[r][c], v);
                    }
                }
            }
            let got = read_sketch(&region, layout.sketch_merge.unwrap(), &spec).expect("sketch in region");
            rep.sketch_matches_oracle = Some(got == oracle);
        }
    }
    let _ = translator.hashes;
    rep.memory_sha256 = hex::encode(Sha256::digest(region.as_bytes()));
    Ok((rep, region))
}
