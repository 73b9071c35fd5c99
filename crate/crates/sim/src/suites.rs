//! Named parameter sweeps. Each suite turns a grid of parameter values into
//! one table row per grid point.

use std::collections::{BTreeMap, VecDeque};

use dta_core::analysis::{
    kw_no_output_bound, kw_per_hop_wrong_bound, kw_wrong_output_bound, pc_fail_bound, pc_wrong_bound, KwModel,
    ModelError, PcModel,
};
use dta_core::append::{append_poll, AppendError, AppendListSpec, AppendTranslator, PollCursor};
use dta_core::counters::{CounterError, KiStore};
use dta_core::hashing::{ChecksumBits, HashError, HashFamily, ValueUniverse, HASH_ALGORITHM};
use dta_core::keywrite::{kw_age_sweep, kw_load_trial, KwError, KwTrialParams, QueryPolicy};
use dta_core::memstore::Collector;
use dta_core::postcarding::{pc_load_trial, EmitReason, PcError, PcTrialParams, PostcardCache};
use dta_core::tally::OutcomeTally;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, SimConfig};
use crate::engine::run;
use crate::table::{fmt_f64, Table};

pub const SUITES: &[&str] = &[
    "kw-redundancy",
    "kw-longevity",
    "postcarding-cache",
    "postcarding-accuracy",
    "append-bench",
    "ki-accuracy",
    "flowctl-loss",
    "sketch-merge",
    "bounds",
];

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("unknown suite `{0}` (known: {known})", known = SUITES.join(", "))]
    UnknownSuite(String),
    #[error("suite `{suite}` has no parameter `{key}` (known: {known})")]
    UnknownParameter { suite: String, key: String, known: String },
    #[error("parameter `{key}`: cannot use `{value}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("override `{0}` is not of the form key=v1,v2,...")]
    BadOverride(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Hash(#[from] HashError),
    #[error(transparent)]
    KeyWrite(#[from] KwError),
    #[error(transparent)]
    Postcarding(#[from] PcError),
    #[error(transparent)]
    Append(#[from] AppendError),
    #[error(transparent)]
    Counter(#[from] CounterError),
}

/// Parameter overrides: each key maps to the list of values to sweep.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Grid(pub BTreeMap<String, Vec<String>>);

impl Grid {
    /// Parses `key=v1,v2` (repeat a key to replace its earlier values).
    pub fn parse_override(&mut self, text: &str) -> Result<(), SuiteError> {
        let (k, v) = text.split_once('=').ok_or_else(|| SuiteError::BadOverride(text.into()))?;
        let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).collect();
        if k.trim().is_empty() || values.iter().any(String::is_empty) {
            return Err(SuiteError::BadOverride(text.into()));
        }
        self.0.insert(k.trim().to_string(), values);
        Ok(())
    }

    pub fn from_overrides<S: AsRef<str>>(items: &[S]) -> Result<Self, SuiteError> {
        let mut g = Grid::default();
        for s in items {
            g.parse_override(s.as_ref())?;
        }
        Ok(g)
    }

    pub fn set(mut self, key: &str, values: &[&str]) -> Self {
        self.0.insert(key.into(), values.iter().map(|s| s.to_string()).collect());
        self
    }
}

/// Resolved parameters of one suite invocation.
struct Params<'a> {
    grid: &'a Grid,
    resolved: BTreeMap<&'static str, Vec<String>>,
}

impl<'a> Params<'a> {
    fn new(suite: &str, grid: &'a Grid, known: &[&'static str]) -> Result<Self, SuiteError> {
        if let Some(key) = grid.0.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(SuiteError::UnknownParameter {
                suite: suite.into(),
                key: key.clone(),
                known: known.join(", "),
            });
        }
        Ok(Params {
            grid,
            resolved: BTreeMap::new(),
        })
    }

    fn list<T: std::str::FromStr>(&mut self, key: &'static str, default: &[&str]) -> Result<Vec<T>, SuiteError>
    where
        T::Err: std::fmt::Display,
    {
        let raw: Vec<String> = match self.grid.0.get(key) {
            Some(v) => v.clone(),
            None => default.iter().map(|s| s.to_string()).collect(),
        };
        let parsed = raw
            .iter()
            .map(|v| {
                v.parse::<T>().map_err(|e| SuiteError::BadValue {
                    key: key.into(),
                    value: v.clone(),
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<T>, _>>()?;
        self.resolved.insert(key, raw);
        Ok(parsed)
    }

    fn one<T: std::str::FromStr>(&mut self, key: &'static str, default: &str) -> Result<T, SuiteError>
    where
        T::Err: std::fmt::Display,
    {
        let mut v = self.list::<T>(key, &[default])?;
        if v.len() != 1 {
            return Err(SuiteError::BadValue {
                key: key.into(),
                value: self.resolved[key].join(","),
                reason: "takes a single value".into(),
            });
        }
        Ok(v.remove(0))
    }

    fn digest(&self) -> String {
        let canon: Vec<String> = self.resolved.iter().map(|(k, v)| format!("{k}={}", v.join(","))).collect();
        hex::encode(Sha256::digest(canon.join(";").as_bytes()))
    }
}

fn bad(key: &str, value: impl ToString, reason: &str) -> SuiteError {
    SuiteError::BadValue {
        key: key.into(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn bits(key: &str, b: u32) -> Result<ChecksumBits, SuiteError> {
    ChecksumBits::new(b).map_err(|e| bad(key, b, &e.to_string()))
}

fn rates(t: &OutcomeTally) -> [String; 5] {
    [
        fmt_f64(t.success_rate()),
        fmt_f64(t.empty_rate()),
        fmt_f64(t.wrong_rate()),
        fmt_f64(t.ambiguous_rate()),
        t.trials.to_string(),
    ]
}

/// Runs a named suite. `seed` drives every random choice in it.
pub fn run_suite(name: &str, grid: &Grid, seed: u64) -> Result<Table, SuiteError> {
    let (table, digest) = match name {
        "kw-redundancy" => kw_redundancy(grid, seed)?,
        "kw-longevity" => kw_longevity(grid, seed)?,
        "postcarding-cache" => postcarding_cache(grid, seed)?,
        "postcarding-accuracy" => postcarding_accuracy(grid, seed)?,
        "append-bench" => append_bench(grid, seed)?,
        "ki-accuracy" => ki_accuracy(grid, seed)?,
        "flowctl-loss" => flowctl_loss(grid, seed)?,
        "sketch-merge" => sketch_merge(grid, seed)?,
        "bounds" => bounds(grid)?,
        other => return Err(SuiteError::UnknownSuite(other.into())),
    };
    Ok(Table {
        meta: vec![
            ("suite".into(), name.into()),
            ("hash".into(), HASH_ALGORITHM.into()),
            ("seed".into(), seed.to_string()),
            ("config_sha256".into(), digest),
        ],
        ..table
    })
}

fn kw_redundancy(grid: &Grid, seed: u64) -> Result<(Table, String), SuiteError> {
    let mut p = Params::new(
        "kw-redundancy",
        grid,
        &["alpha", "N", "b", "M", "queries", "value_len", "policy"],
    )?;
    let alphas: Vec<f64> = p.list("alpha", &["0.1", "0.4", "0.75", "1", "1.5", "2", "3"])?;
    let ns: Vec<u32> = p.list("N", &["1", "2", "3", "4"])?;
    let bs: Vec<u32> = p.list("b", &["32"])?;
    let m: u64 = p.one("M", "65536")?;
    let queries: u64 = p.one("queries", "20000")?;
    let value_len: usize = p.one("value_len", "4")?;
    let policy: QueryPolicy = p.one("policy", "plurality")?;
    let mut t = Table::new([
        "load_factor",
        "N",
        "b",
        "policy",
        "success_rate",
        "empty_rate",
        "wrong_rate",
        "ambiguous_rate",
        "trials",
        "bound_no_output",
        "bound_wrong_output",
    ]);
    for &alpha in &alphas {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(bad("alpha", alpha, "must be a non-negative load factor"));
        }
        for &b in &bs {
            for &n in &ns {
                let params = KwTrialParams {
                    buflen: m,
                    n_redundancy: n,
                    checksum_bits: bits("b", b)?,
                    value_len,
                    threshold: 1,
                    policy,
                    seed,
                };
                let tally = kw_load_trial(&params, (alpha * m as f64).round() as u64, queries)?;
                let model = KwModel::<f64>::new(n, b, alpha)?;
                let [s, e, w, a, trials] = rates(&tally);
                t.push(vec![
                    fmt_f64(alpha),
                    n.to_string(),
                    b.to_string(),
                    policy.name().into(),
                    s,
                    e,
                    w,
                    a,
                    trials,
                    fmt_f64(kw_no_output_bound(&model).total()),
                    fmt_f64(kw_wrong_output_bound(&model).bound),
                ]);
            }
        }
    }
    Ok((t, p.digest()))
}

fn kw_longevity(grid: &Grid, seed: u64) -> Result<(Table, String), SuiteError> {
    let mut p = Params::new(
        "kw-longevity",
        grid,
        &["M", "keys", "N", "b", "value_len", "runs", "bins", "policy"],
    )?;
    let m: u64 = p.one("M", "1048576")?;
    let keys: u64 = p.one("keys", "78125")?;
    let n: u32 = p.one("N", "2")?;
    let b: u32 = p.one("b", "32")?;
    let value_len: usize = p.one("value_len", "20")?;
    let runs: u32 = p.one("runs", "4")?;
    let bins: u64 = p.one("bins", "10")?;
    let policy: QueryPolicy = p.one("policy", "plurality")?;
    if bins == 0 || bins > keys + 1 {
        return Err(bad("bins", bins, "must be in 1..=keys+1"));
    }
    let params = KwTrialParams {
        buflen: m,
        n_redundancy: n,
        checksum_bits: bits("b", b)?,
        value_len,
        threshold: 1,
        policy,
        seed,
    };
    // Every age 0..=keys is queried once per run; rows pool consecutive ages.
    let ages: Vec<u64> = (0..=keys).collect();
    let rows = kw_age_sweep(&params, keys + 1, &ages, runs)?;
    let mut t = Table::new([
        "age",
        "N",
        "b",
        "policy",
        "success_rate",
        "empty_rate",
        "wrong_rate",
        "ambiguous_rate",
        "trials",
        "cumulative_success_rate",
        "bound_no_output",
    ]);
    let per_bin = (keys + 1).div_ceil(bins) as usize;
    let mut cumulative = OutcomeTally::default();
    for chunk in rows.chunks(per_bin) {
        let mut tally = OutcomeTally::default();
        for r in chunk {
            tally.merge(&r.tally);
        }
        cumulative.merge(&tally);
        let age = chunk.last().expect("non-empty chunk").age;
        let model = KwModel::<f64>::new(n, b, age as f64 / m as f64)?;
        let [s, e, w, a, trials] = rates(&tally);
        t.push(vec![
            age.to_string(),
            n.to_string(),
            b.to_string(),
            policy.name().into(),
            s,
            e,
            w,
            a,
            trials,
            fmt_f64(cumulative.success_rate()),
            fmt_f64(kw_no_output_bound(&model).total()),
        ]);
    }
    Ok((t, p.digest()))
}

fn postcarding_cache(grid: &Grid, seed: u64) -> Result<(Table, String), SuiteError> {
    let mut p = Params::new("postcarding-cache", grid, &["cache_slots", "flow_ratio", "hops", "V_bits"])?;
    let slots: Vec<usize> = p.list("cache_slots", &["1024"])?;
    let ratios: Vec<f64> = p.list("flow_ratio", &["0.25", "0.5", "1", "2", "4"])?;
    let hops: u32 = p.one("hops", "5")?;
    let v_bits: u32 = p.one("V_bits", "18")?;
    let universe = ValueUniverse::from_bits(v_bits).map_err(|e| bad("V_bits", v_bits, &e.to_string()))?;
    let mut t = Table::new(["cache_slots", "concurrent_flows", "complete_emission_rate", "early_emission_rate"]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &s in &slots {
        for &r in &ratios {
            if !(r.is_finite() && r > 0.0) {
                return Err(bad("flow_ratio", r, "must be positive"));
            }
            let flows = ((s as f64 * r).round() as u64).max(1);
            let mut cache = PostcardCache::new(s, hops, universe, HashFamily::new(seed))?;
            let (mut complete, mut early) = (0u64, 0u64);
            let mut count = |out: Vec<dta_core::postcarding::EmittedChunk>| {
                for c in out {
                    match c.reason {
                        EmitReason::Complete => complete += 1,
                        EmitReason::Evicted | EmitReason::Flushed => early += 1,
                    }
                }
            };
            // All flows are live at once: hop h of every flow precedes hop h+1.
            for hop in 0..hops {
                for f in 0..flows {
                    let v = rng.random_range(0..universe.size());
                    count(cache.pc_ingest(f, hop, v, Some(hops))?);
                }
            }
            count(cache.flush_all());
            let total = (complete + early) as f64;
            t.push(vec![
                s.to_string(),
                flows.to_string(),
                fmt_f64(complete as f64 / total),
                fmt_f64(early as f64 / total),
            ]);
        }
    }
    Ok((t, p.digest()))
}

fn postcarding_accuracy(grid: &Grid, seed: u64) -> Result<(Table, String), SuiteError> {
    let mut p = Params::new(
        "postcarding-accuracy",
        grid,
        &["alpha", "N", "b", "B", "V_bits", "chunks", "queries"],
    )?;
    let alphas: Vec<f64> = p.list("alpha", &["0.1", "0.5", "1"])?;
    let ns: Vec<u32> = p.list("N", &["1", "2"])?;
    let bs: Vec<u32> = p.list("b", &["32"])?;
    let hops: u32 = p.one("B", "5")?;
    let v_bits: u32 = p.one("V_bits", "18")?;
    let chunks: u64 = p.one("chunks", "16384")?;
    let queries: u64 = p.one("queries", "20000")?;
    let universe = ValueUniverse::from_bits(v_bits).map_err(|e| bad("V_bits", v_bits, &e.to_string()))?;
    let mut t = Table::new([
        "alpha",
        "N",
        "b",
        "B",
        "V_bits",
        "fail_rate",
        "wrong_rate",
        "bound_fail",
        "bound_wrong",
    ]);
    for &alpha in &alphas {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(bad("alpha", alpha, "must be a non-negative load factor"));
        }
        for &b in &bs {
            for &n in &ns {
                let params = PcTrialParams {
                    chunks,
                    hops,
                    cell_bits: bits("b", b)?,
                    universe,
                    n_redundancy: n,
                    seed,
                };
                let tally = pc_load_trial(&params, (alpha * chunks as f64).round() as u64, queries)?;
                let model = PcModel::<f64>::new(n, b, alpha, hops, f64::from(v_bits))?;
                t.push(vec![
                    fmt_f64(alpha),
                    n.to_string(),
                    b.to_string(),
                    hops.to_string(),
                    v_bits.to_string(),
                    fmt_f64(tally.no_output_rate()),
                    fmt_f64(tally.wrong_rate()),
                    fmt_f64(pc_fail_bound(&model).total()),
                    fmt_f64(pc_wrong_bound(&model)),
                ]);
            }
        }
    }
    Ok((t, p.digest()))
}

/// Ingests `entries` into `lists` lists through a translator with the given
/// batch size; returns the flushed memory, the translator and the verb count.
fn append_run(
    batch: u32,
    lists: u32,
    capacity: u64,
    entry_len: usize,
    entries: &[(u32, Vec<u8>)],
) -> Result<(Vec<u8>, AppendTranslator, Collector, u64), SuiteError> {
    let mut tr = AppendTranslator::new(batch)?;
    let list_len = capacity * entry_len as u64;
    for id in 0..lists {
        tr.add_list(AppendListSpec {
            id,
            base: u64::from(id) * list_len,
            capacity,
            entry_len,
        })?;
    }
    let mut col = Collector::new((u64::from(lists) * list_len) as usize);
    let mut verbs = 0u64;
    for (list, e) in entries {
        let v = tr.append_ingest(*list, e)?;
        verbs += v.len() as u64;
        col.submit_all(&v).expect("append verbs stay inside the region");
    }
    let v = tr.flush_all();
    verbs += v.len() as u64;
    col.submit_all(&v).expect("append verbs stay inside the region");
    Ok((col.region.as_bytes().to_vec(), tr, col, verbs))
}

fn append_bench(grid: &Grid, seed: u64) -> Result<(Table, String), SuiteError> {
    let mut p = Params::new(
        "append-bench",
        grid,
        &["batch_size", "entry_len", "lists", "entries", "capacity"],
    )?;
    let batches: Vec<u32> = p.list("batch_size", &["1", "2", "4", "16"])?;
    let lens: Vec<usize> = p.list("entry_len", &["4", "8", "13", "18"])?;
    let lists: Vec<u32> = p.list("lists", &["1", "8"])?;
    let n_entries: u64 = p.one("entries", "10000")?;
    let capacity: u64 = p.one("capacity", "4096")?;
    let mut t = Table::new([
        "batch_size",
        "entry_len",
        "lists",
        "entries_ingested",
        "verbs_emitted",
        "verify_ok",
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &l in &lists {
        if l == 0 {
            return Err(bad("lists", l, "must be positive"));
        }
        for &len in &lens {
            let entries: Vec<(u32, Vec<u8>)> = (0..n_entries)
                .map(|_| (rng.random_range(0..l), (0..len).map(|_| rng.random()).collect()))
                .collect();
            let (oracle, ..) = append_run(1, l, capacity, len, &entries)?;
            for &batch in &batches {
                let (mem, tr, col, verbs) = append_run(batch, l, capacity, len, &entries)?;
                let mut ok = mem == oracle;
                for list in tr.lists() {
                    let mut reference: VecDeque<&Vec<u8>> =
                        entries.iter().filter(|(id, _)| *id == list.spec.id).map(|(_, e)| e).collect();
                    while reference.len() as u64 > capacity {
                        reference.pop_front();
                    }
                    let mut cursor = PollCursor::new(list.spec.id);
                    let got = append_poll(&col.region, list, &mut cursor, usize::MAX)?;
                    ok &= got.entries.iter().eq(reference.iter().copied());
                }
                t.push(vec![
                    batch.to_string(),
                    len.to_string(),
                    l.to_string(),
                    n_entries.to_string(),
                    verbs.to_string(),
                    ok.to_string(),
                ]);
            }
        }
    }
    Ok((t, p.digest()))
}

fn ki_accuracy(grid: &Grid, seed: u64) -> Result<(Table, String), SuiteError> {
    let mut p = Params::new("ki-accuracy", grid, &["buflen", "N", "stream_len", "keys"])?;
    let buflens: Vec<u64> = p.list("buflen", &["1024", "4096", "16384"])?;
    let ns: Vec<u32> = p.list("N", &["1", "2", "4"])?;
    let stream_len: u64 = p.one("stream_len", "100000")?;
    let keys: u64 = p.one("keys", "2000")?;
    if keys == 0 {
        return Err(bad("keys", keys, "must be positive"));
    }
    let mut t = Table::new([
        "buflen",
        "N",
        "stream_len",
        "mean_overestimate",
        "violation_count",
        "tail_fraction",
        "tail_bound",
    ]);
    for &buflen in &buflens {
        for &n in &ns {
            let store = KiStore::new(0, buflen, HashFamily::new(seed))?.with_max_redundancy(n.max(1));
            let mut col = Collector::new(store.footprint() as usize);
            let mut truth = vec![0u64; keys as usize];
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ buflen ^ u64::from(n) << 32);
            for _ in 0..stream_len {
                let k = rng.random_range(0..keys);
                truth[k as usize] += 1;
                col.submit_all(&store.ki_increment(&k.to_le_bytes(), 1, n)?)
                    .expect("counter verbs stay inside the region");
            }
            // Count-Min with N hashes into one shared array: each counter
            // carries N*S/buflen on average, so Markov plus independence
            // bounds the e-fold excess by e^-N.
            let threshold = std::f64::consts::E * f64::from(n) * stream_len as f64 / buflen as f64;
            let (mut over, mut violations, mut tail) = (0u64, 0u64, 0u64);
            for (k, &c) in truth.iter().enumerate() {
                let est = store.ki_query(&col.region, &(k as u64).to_le_bytes(), n)?;
                if est < c {
                    violations += 1;
                } else {
                    over += est - c;
                    if (est - c) as f64 > threshold {
                        tail += 1;
                    }
                }
            }
            t.push(vec![
                buflen.to_string(),
                n.to_string(),
                stream_len.to_string(),
                fmt_f64(over as f64 / keys as f64),
                violations.to_string(),
                fmt_f64(tail as f64 / keys as f64),
                fmt_f64((-f64::from(n)).exp()),
            ]);
        }
    }
    Ok((t, p.digest()))
}

fn flowctl_config(seed: u64, loss: f64, fault: f64, reports: u64, reporters: u32, essential: f64) -> String {
    format!(
        r#"{{
        "seed": {seed},
        "topology": {{
            "reporters": {reporters},
            "loss": {{"uplink": {loss}, "downlink": {loss}}},
            "fault_injection": {{"collector_link_loss": {fault}}},
            "translator": {{"backlog_capacity": 4096}},
            "memory": {{"append": {{"lists": {reporters}, "capacity": {capacity}, "batch_size": 4}}}}
        }},
        "workload": {{"kind": "AppendEvents", "reports": {reports}, "essential": {essential}, "per_step": 4}}
    }}"#,
        capacity = reports.div_ceil(u64::from(reporters)).next_multiple_of(4).max(4) * 2,
    )
}

fn flowctl_loss(grid: &Grid, seed: u64) -> Result<(Table, String), SuiteError> {
    let mut p = Params::new(
        "flowctl-loss",
        grid,
        &["loss_rate", "reports", "reporters", "essential", "fault"],
    )?;
    let losses: Vec<f64> = p.list("loss_rate", &["0", "0.001", "0.01", "0.05"])?;
    let reports: u64 = p.one("reports", "10000")?;
    let reporters: u32 = p.one("reporters", "4")?;
    let essential: f64 = p.one("essential", "1")?;
    let faults: Vec<f64> = p.list("fault", &["0"])?;
    let mut t = Table::new([
        "loss_rate",
        "fault_rate",
        "reports",
        "retransmissions",
        "unrecoverable",
        "duplicates_suppressed",
        "nonessential_lost",
        "nacks_sent",
        "qp_desynced",
        "exactly_once_ok",
    ]);
    for &fault in &faults {
        for &loss in &losses {
            let cfg = SimConfig::from_json(&flowctl_config(seed, loss, fault, reports, reporters, essential))?;
            let (rep, _) = run(&cfg)?;
            let ok = rep.exactly_once() && rep.append_exactly_once == Some(true) && rep.is_conserved();
            t.push(vec![
                fmt_f64(loss),
                fmt_f64(fault),
                reports.to_string(),
                rep.retransmissions.to_string(),
                rep.essential_unrecoverable.to_string(),
                rep.duplicates_suppressed.to_string(),
                rep.nonessential_lost.to_string(),
                rep.nacks_sent.to_string(),
                rep.qp_desynced.to_string(),
                ok.to_string(),
            ]);
        }
    }
    Ok((t, p.digest()))
}

fn sketch_merge(grid: &Grid, seed: u64) -> Result<(Table, String), SuiteError> {
    let mut p = Params::new(
        "sketch-merge",
        grid,
        &["loss_rate", "op", "rows", "cols", "reporters", "batch_columns"],
    )?;
    let losses: Vec<f64> = p.list("loss_rate", &["0", "0.01", "0.05"])?;
    let ops: Vec<String> = p.list("op", &["sum", "max"])?;
    let rows: u32 = p.one("rows", "4")?;
    let cols: u32 = p.one("cols", "1024")?;
    let reporters: u32 = p.one("reporters", "4")?;
    let batch: u32 = p.one("batch_columns", "8")?;
    let mut t = Table::new([
        "loss_rate",
        "op",
        "rows",
        "cols",
        "reporters",
        "column_nacks",
        "retransmissions",
        "matches_oracle",
    ]);
    for op in &ops {
        for &loss in &losses {
            let json = format!(
                r#"{{
                "seed": {seed},
                "topology": {{"reporters": {reporters}, "loss": {{"uplink": {loss}, "downlink": {loss}}},
                    "memory": {{"sketch_merge": {{"rows": {rows}, "cols": {cols}, "op": "{op}", "batch_columns": {batch}}}}}}},
                "workload": {{"kind": "SketchColumns", "per_step": 2}}
            }}"#
            );
            let (rep, _) = run(&SimConfig::from_json(&json)?)?;
            t.push(vec![
                fmt_f64(loss),
                op.clone(),
                rows.to_string(),
                cols.to_string(),
                reporters.to_string(),
                rep.column_nacks.to_string(),
                rep.retransmissions.to_string(),
                (rep.completed && rep.sketch_matches_oracle == Some(true)).to_string(),
            ]);
        }
    }
    Ok((t, p.digest()))
}

pub const BOUNDS_COLUMNS: [&str; 10] = [
    "model",
    "N",
    "b",
    "alpha",
    "B",
    "V_bits",
    "no_output",
    "no_output_lo",
    "no_output_hi",
    "wrong_output",
];

/// Closed-form rows for one parameter point: Key-Write, Postcarding and
/// Key-Write storing one entry per hop.
pub fn bounds_rows(n: u32, b: u32, alpha: f64, hops: u32, v_bits: f64) -> Result<Vec<Vec<String>>, ModelError> {
    let kw = KwModel::<f64>::new(n, b, alpha)?;
    let no = kw_no_output_bound(&kw);
    let (lo, hi) = no.bracket();
    let pc = PcModel::<f64>::new(n, b, alpha, hops, v_bits)?;
    let fail = pc_fail_bound(&pc).total();
    let common = |model: &str| vec![model.to_string(), n.to_string(), b.to_string(), fmt_f64(alpha)];
    let mut rows = Vec::new();
    let mut r = common("keywrite");
    r.extend([
        String::new(),
        String::new(),
        fmt_f64(no.total()),
        fmt_f64(lo),
        fmt_f64(hi),
        fmt_f64(kw_wrong_output_bound(&kw).bound),
    ]);
    rows.push(r);
    let mut r = common("postcarding");
    r.extend([
        hops.to_string(),
        fmt_f64(v_bits),
        fmt_f64(fail),
        fmt_f64(fail),
        fmt_f64(fail),
        fmt_f64(pc_wrong_bound(&pc)),
    ]);
    rows.push(r);
    let mut r = common("keywrite-per-hop");
    r.extend([
        hops.to_string(),
        fmt_f64(v_bits),
        String::new(),
        String::new(),
        String::new(),
        fmt_f64(kw_per_hop_wrong_bound(&pc)),
    ]);
    rows.push(r);
    Ok(rows)
}

fn bounds(grid: &Grid) -> Result<(Table, String), SuiteError> {
    let mut p = Params::new("bounds", grid, &["N", "b", "alpha", "B", "V_bits"])?;
    let ns: Vec<u32> = p.list("N", &["1", "2", "4"])?;
    let bs: Vec<u32> = p.list("b", &["32"])?;
    let alphas: Vec<f64> = p.list("alpha", &["0.1"])?;
    let hops: Vec<u32> = p.list("B", &["5"])?;
    let v_bits: Vec<f64> = p.list("V_bits", &["18"])?;
    let mut t = Table::new(BOUNDS_COLUMNS);
    for &alpha in &alphas {
        for &b in &bs {
            for &n in &ns {
                for &h in &hops {
                    for &v in &v_bits {
                        for row in bounds_rows(n, b, alpha, h, v)? {
                            t.push(row);
                        }
                    }
                }
            }
        }
    }
    Ok((t, p.digest()))
}
