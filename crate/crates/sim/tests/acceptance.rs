//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use dta_core::analysis::{
    kw_no_output_bound, kw_per_hop_wrong_bound, kw_wrong_output_bound, pc_fail_bound, pc_wrong_bound, KwModel, PcModel,
};
use dta_core::append::{append_poll, AppendListSpec, AppendTranslator, PollCursor};
use dta_core::counters::{read_sketch, KiStore, MergeOp, SketchMerger, SketchSpec, SmVerdict};
use dta_core::hashing::{ChecksumBits, HashFamily};
use dta_core::keywrite::{kw_load_trial, KwTrialParams, QueryPolicy};
use dta_core::memstore::Collector;
use dta_core::tally::binomial_sigma;
use dta_core::wire::{
    decode, decode_control, encode, encode_control, ControlPacket, DtaHeader, DtaPacket, Envelope, Report, DTA_PORT,
    MAX_PAYLOAD,
};
use dta_sim::{run_suite, Grid, Table};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Leading `digits` significant figures of `x` as an integer.
fn sig(x: f64, digits: i32, ceil: bool) -> i64 {
    let exp = x.abs().log10().floor() as i32 + 1 - digits;
    let m = x / 10f64.powi(exp);
    // Guard against 9.99999 style representation error before ceiling.
    (if ceil { (m - 1e-9).ceil() } else { m.round() }) as i64
}

/// `printed` is a reference figure for `x` given to `digits` significant
/// figures. Figures stated as upper bounds may have been rounded up.
fn matches_quoted(x: f64, printed: f64, digits: i32, is_bound: bool) -> bool {
    let want = sig(printed, digits, false);
    let same_decade = (x.log10().floor() - printed.log10().floor()).abs() < 0.5;
    same_decade && (sig(x, digits, false) == want || (is_bound && sig(x, digits, true) == want))
}

fn bound_reproduction() -> Check {
    let start = Instant::now();
    let mut detail = Vec::new();
    for (n, printed, is_bound) in [(1, 0.095, false), (2, 0.033, true), (4, 0.012, false)] {
        let m = KwModel::<f64>::new(n, 32, 0.1).unwrap();
        let v = kw_no_output_bound(&m).total();
        ensure(matches_quoted(v, printed, 2, is_bound), format!("no_output N={n}: {v} vs {printed}"))?;
        detail.push(format!("N={n} no_output={v:.4}"));
    }
    let m = KwModel::<f64>::new(2, 32, 0.1).unwrap();
    let w = kw_wrong_output_bound(&m).bound;
    ensure(matches_quoted(w, 1.6e-11, 2, true), format!("wrong_output {w:e} vs 1.6e-11"))?;
    detail.push(format!("wrong={w:.3e}"));
    let pc = PcModel::<f64>::new(2, 32, 0.1, 5, 18.0).unwrap();
    let fail = pc_fail_bound(&pc).total();
    let wrong = pc_wrong_bound(&pc);
    let per_hop = kw_per_hop_wrong_bound(&pc);
    ensure(fail <= 0.033, format!("pc_fail {fail}"))?;
    ensure(wrong < 1e-22, format!("pc_wrong {wrong:e}"))?;
    ensure(matches_quoted(per_hop, 8e-11, 1, false), format!("per-hop {per_hop:e} vs 8e-11"))?;
    detail.push(format!("pc_fail={fail:.4} pc_wrong={wrong:.2e} kw_per_hop={per_hop:.2e}"));
    let elapsed = start.elapsed();
    ensure(elapsed.as_secs_f64() < 1.0, format!("took {elapsed:?}"))?;
    Ok(format!("{} in {elapsed:?}", detail.join(", ")))
}

fn monte_carlo_vs_theory() -> Check {
    let start = Instant::now();
    let (m, queries) = (1u64 << 16, 100_000u64);
    let mut worst = 0.0f64;
    let mut points = 0;
    for &b in &[16u32, 32] {
        for &n in &[1u32, 2, 4] {
            for &alpha in &[0.05, 0.1, 0.5, 1.0] {
                let params = KwTrialParams {
                    buflen: m,
                    n_redundancy: n,
                    checksum_bits: ChecksumBits::new(b).unwrap(),
                    value_len: 4,
                    threshold: 1,
                    policy: QueryPolicy::SingleValue,
                    seed: 0xACC ^ u64::from(b) << 8 ^ u64::from(n),
                };
                let t = kw_load_trial(&params, (alpha * m as f64).round() as u64, queries).unwrap();
                let model = KwModel::<f64>::new(n, b, alpha).unwrap();
                let (lo, hi) = kw_no_output_bound(&model).bracket();
                let wb = kw_wrong_output_bound(&model);
                let (wlo, whi) = (wb.lower.min(wb.bound), wb.upper.max(wb.bound));
                let checks = [
                    ("no_output", t.no_output_rate::<f64>(), lo, hi),
                    ("wrong", t.wrong_rate::<f64>(), wlo, whi),
                ];
                for (what, p, lo, hi) in checks {
                    let sigma = binomial_sigma(hi.max(p), t.trials).max(1.0 / t.trials as f64);
                    let z = if p < lo {
                        (lo - p) / sigma
                    } else if p > hi {
                        (p - hi) / sigma
                    } else {
                        0.0
                    };
                    worst = worst.max(z);
                    ensure(
                        z <= 3.0,
                        format!("{what} b={b} N={n} alpha={alpha}: {p} outside [{lo}, {hi}] by {z:.2} sigma"),
                    )?;
                }
                points += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed.as_secs() < 120, format!("took {elapsed:?}"))?;
    Ok(format!("{points} points, worst excursion {worst:.2} sigma, {elapsed:?}"))
}

fn longevity() -> Check {
    let t = run_suite("kw-longevity", &Grid::default(), 7).map_err(|e| e.to_string())?;
    let success = t.numbers("success_rate").unwrap();
    let cumulative = t.numbers("cumulative_success_rate").unwrap();
    let trials = t.numbers("trials").unwrap();
    let last = *cumulative.last().unwrap();
    ensure((last - 0.993).abs() <= 0.01, format!("success over ages 0..K = {last}"))?;
    for (i, w) in success.windows(2).enumerate() {
        let sigma = binomial_sigma(w[0].min(w[1]), trials[i] as u64) * 2f64.sqrt();
        ensure(
            w[1] <= w[0] + 3.0 * sigma,
            format!("success rises between bins {i} and {}: {} -> {}", i + 1, w[0], w[1]),
        )?;
    }
    Ok(format!(
        "success over ages 0..K {:.4}, at age K {:.4}, {} bins non-increasing within 3 sigma",
        last,
        success.last().unwrap(),
        success.len()
    ))
}

fn optimal_n(t: &Table) -> Vec<(f64, u32)> {
    let alphas = t.numbers("load_factor").unwrap();
    let ns = t.numbers("N").unwrap();
    let s = t.numbers("success_rate").unwrap();
    let mut best: Vec<(f64, u32, f64)> = Vec::new();
    for i in 0..alphas.len() {
        match best.iter_mut().find(|b| b.0 == alphas[i]) {
            Some(b) if s[i] > b.2 => {
                b.1 = ns[i] as u32;
                b.2 = s[i];
            }
            Some(_) => {}
            None => best.push((alphas[i], ns[i] as u32, s[i])),
        }
    }
    best.into_iter().map(|(a, n, _)| (a, n)).collect()
}

fn crossover() -> Check {
    let t = run_suite("kw-redundancy", &Grid::default(), 3).map_err(|e| e.to_string())?;
    let best = optimal_n(&t);
    let text: Vec<String> = best.iter().map(|(a, n)| format!("{a}:{n}")).collect();
    ensure(best.first().unwrap().1 >= 2, format!("optimal N at lowest load: {text:?}"))?;
    ensure(best.last().unwrap().1 == 1, format!("optimal N at highest load: {text:?}"))?;
    ensure(best.windows(2).all(|w| w[1].1 <= w[0].1), format!("optimal N not decreasing: {text:?}"))?;
    Ok(format!("alpha:optimal_N {}", text.join(" ")))
}

fn append_case(batch: u32, capacity: u64, entry_len: usize, entries: &[Vec<u8>]) -> (Vec<u8>, Vec<Vec<u8>>) {
    let mut t = AppendTranslator::new(batch).unwrap();
    t.add_list(AppendListSpec {
        id: 0,
        base: 0,
        capacity,
        entry_len,
    })
    .unwrap();
    let mut col = Collector::new(capacity as usize * entry_len);
    for e in entries {
        col.submit_all(&t.append_ingest(0, e).unwrap()).unwrap();
    }
    col.submit_all(&t.flush_all()).unwrap();
    let mut cursor = PollCursor::new(0);
    let polled = append_poll(&col.region, t.list(0).unwrap(), &mut cursor, usize::MAX).unwrap();
    (col.region.as_bytes().to_vec(), polled.entries)
}

fn batching_transparency() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBA7C);
    for case in 0..200 {
        let batch = [1u32, 2, 4, 16][rng.random_range(0..4)];
        let entry_len = [4usize, 8, 13, 18][rng.random_range(0..4)];
        let capacity = 16 * rng.random_range(1..8u64);
        let n = rng.random_range(0..600usize);
        let entries: Vec<Vec<u8>> = (0..n).map(|_| (0..entry_len).map(|_| rng.random()).collect()).collect();
        let (mem, polled) = append_case(batch, capacity, entry_len, &entries);
        let (oracle, _) = append_case(1, capacity, entry_len, &entries);
        ensure(mem == oracle, format!("case {case}: memory differs (batch {batch}, entry {entry_len})"))?;
        let reference: Vec<Vec<u8>> = entries[n.saturating_sub(capacity as usize)..].to_vec();
        ensure(polled == reference, format!("case {case}: poll differs from reference queue"))?;
    }
    Ok("200 cases byte-identical to batch_size=1; FIFO poll equals reference queue".into())
}

fn count_min() -> Check {
    let (buflen, n, ops, keys) = (1u64 << 14, 2u32, 1_000_000u64, 50_000u64);
    let store = KiStore::new(0, buflen, HashFamily::new(0xC0)).unwrap();
    let mut col = Collector::new(store.footprint() as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0);
    let mut exact: HashMap<u64, u64> = HashMap::new();
    for _ in 0..ops {
        // Skewed keys: squaring a uniform draw favours small ids.
        let u: f64 = rng.random();
        let key = (u * u * keys as f64) as u64;
        let delta = rng.random_range(1..=100u64);
        *exact.entry(key).or_default() += delta;
        col.submit_all(&store.ki_increment(&key.to_le_bytes(), delta, n).unwrap()).unwrap();
    }
    let total: u64 = exact.values().sum();
    let mean_load = f64::from(n) * total as f64 / buflen as f64;
    let threshold = std::f64::consts::E * mean_load;
    let (mut under, mut tail, mut over_sum) = (0u64, 0u64, 0f64);
    for (&key, &truth) in &exact {
        let est = store.ki_query(&col.region, &key.to_le_bytes(), n).unwrap();
        if est < truth {
            under += 1;
            continue;
        }
        over_sum += (est - truth) as f64;
        if (est - truth) as f64 > threshold {
            tail += 1;
        }
    }
    let k = exact.len() as f64;
    let frac = tail as f64 / k;
    let mean_over = over_sum / k;
    ensure(under == 0, format!("{under} underestimates"))?;
    let bound = (-f64::from(n)).exp();
    ensure(
        frac <= bound + 3.0 * binomial_sigma(bound, exact.len() as u64),
        format!("tail fraction {frac} above e^-N"),
    )?;
    ensure(mean_over <= mean_load, format!("mean overestimate {mean_over} above N*S/buflen {mean_load}"))?;
    Ok(format!(
        "{ops} ops, {} keys, 0 underestimates, tail {frac:.4} <= {bound:.4}, mean over {mean_over:.1} <= {mean_load:.1}",
        exact.len()
    ))
}

/// Random interleaving across reporters with injected skips: a reporter
/// occasionally jumps ahead, is Nacked, and rewinds to the expected column.
fn merge_interleaved(rng: &mut ChaCha8Rng, sketches: &[Vec<Vec<u64>>], spec: SketchSpec) -> (Vec<Vec<u64>>, u64) {
    let reporters: Vec<u32> = (0..sketches.len() as u32).collect();
    let mut merger = SketchMerger::new(spec, 0, &reporters).unwrap();
    let mut col = Collector::new(spec.footprint() as usize);
    let mut next = vec![0u32; sketches.len()];
    let mut nacks = 0;
    loop {
        let pending: Vec<usize> = (0..sketches.len())
            .filter(|&r| merger.tracker().expected(r as u32) != Some(spec.cols))
            .collect();
        let Some(&r) = pending.choose(rng) else { break };
        let mut c = next[r];
        if c + 2 < spec.cols && rng.random_bool(0.05) {
            c += rng.random_range(1..3);
        }
        match merger.sm_ingest_column(r as u32, c, &sketches[r][c as usize]).unwrap() {
            SmVerdict::Nack { expected } => {
                nacks += 1;
                next[r] = expected;
            }
            _ => next[r] = c + 1,
        }
        col.submit_all(&merger.sm_flush_completed(4)).unwrap();
    }
    (read_sketch(&col.region, 0, &spec).unwrap(), nacks)
}

fn sketch_merge() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5E);
    let mut total_nacks = 0;
    for op in [MergeOp::Sum, MergeOp::Max] {
        for trial in 0..20 {
            let (reporters, rows, cols) = (rng.random_range(1..6usize), rng.random_range(1..8u32), 64u32);
            let spec = SketchSpec { rows, cols, op };
            let sketches: Vec<Vec<Vec<u64>>> = (0..reporters)
                .map(|_| (0..cols).map(|_| (0..rows).map(|_| rng.random()).collect()).collect())
                .collect();
            let mut oracle = vec![vec![0u64; cols as usize]; rows as usize];
            for s in &sketches {
                for (c, column) in s.iter().enumerate() {
                    for (r, &v) in column.iter().enumerate() {
                        oracle[r][c] = op.apply(oracle[r][c], v);
                    }
                }
            }
            let (got, nacks) = merge_interleaved(&mut rng, &sketches, spec);
            total_nacks += nacks;
            ensure(got == oracle, format!("{} trial {trial}: merged sketch differs", op.name()))?;
        }
    }
    ensure(total_nacks > 0, "no out-of-order column was injected")?;
    let t = run_suite("sketch-merge", &Grid::default(), 5).map_err(|e| e.to_string())?;
    let i = t.column("matches_oracle").unwrap();
    ensure(t.rows.iter().all(|r| r[i] == "true"), "end-to-end run under loss differs from oracle")?;
    Ok(format!(
        "40 interleavings exact ({total_nacks} Nacks recovered); {} lossy end-to-end runs exact",
        t.rows.len()
    ))
}

fn flow_control() -> Check {
    let grid = Grid::default().set("loss_rate", &["0.001", "0.01", "0.05"]);
    let t = run_suite("flowctl-loss", &grid, 11).map_err(|e| e.to_string())?;
    let col = |n: &str| t.column(n).unwrap();
    for r in &t.rows {
        ensure(r[col("exactly_once_ok")] == "true", format!("loss {}: not exactly once", r[col("loss_rate")]))?;
        ensure(r[col("qp_desynced")] == "false", format!("loss {}: QP desynced", r[col("loss_rate")]))?;
    }
    let retx: Vec<String> = t.rows.iter().map(|r| r[col("retransmissions")].clone()).collect();
    let grid = Grid::default().set("loss_rate", &["0.05"]).set("essential", &["0"]);
    let ne = run_suite("flowctl-loss", &grid, 11).map_err(|e| e.to_string())?;
    let row = &ne.rows[0];
    let lost = &row[ne.column("nonessential_lost").unwrap()];
    ensure(lost != "0", "no non-essential packet was lost")?;
    ensure(row[ne.column("nacks_sent").unwrap()] == "0", "non-essential loss triggered NACKs")?;
    let grid = Grid::default().set("loss_rate", &["0"]).set("fault", &["0", "0.01"]);
    let f = run_suite("flowctl-loss", &grid, 11).map_err(|e| e.to_string())?;
    let q = f.column("qp_desynced").unwrap();
    ensure(f.rows[0][q] == "false", "QP desynced without fault injection")?;
    ensure(f.rows[1][q] == "true", "fault injection did not desync the QP")?;
    Ok(format!(
        "exactly once at 0.1%/1%/5% loss (retransmissions {}); {lost} non-essential losses, 0 NACKs; desync only under fault",
        retx.join("/")
    ))
}

fn fixture(name: &str) -> Vec<u8> {
    let path = format!("{}/../core/tests/fixtures/{name}.hex", env!("CARGO_MANIFEST_DIR"));
    hex::decode(std::fs::read_to_string(path).unwrap().trim()).unwrap()
}

fn packet(flags: u8, reporter_id: u32, essential_seq: u32, report: Report) -> DtaPacket {
    DtaPacket {
        envelope: Envelope {
            src_port: DTA_PORT,
            dst_port: DTA_PORT,
            checksum: 0xbeef,
        },
        header: DtaHeader {
            flags,
            reporter_id,
            essential_seq,
        },
        report,
    }
}

fn random_report(rng: &mut ChaCha8Rng) -> Report {
    let bytes = |rng: &mut ChaCha8Rng, max: usize| -> Vec<u8> {
        let n = rng.random_range(0..=max);
        (0..n).map(|_| rng.random()).collect()
    };
    match rng.random_range(0..5) {
        0 => Report::KeyWrite {
            redundancy: rng.random(),
            key: bytes(rng, 255),
            data: bytes(rng, 600),
        },
        1 => Report::Append {
            list_id: rng.random(),
            data: bytes(rng, MAX_PAYLOAD),
        },
        2 => Report::KeyIncrement {
            redundancy: rng.random(),
            key: bytes(rng, 255),
            delta: rng.random(),
        },
        3 => Report::SketchMerge {
            col_index: rng.random(),
            values: (0..rng.random_range(0..=175)).map(|_| rng.random()).collect(),
        },
        _ => Report::Postcarding {
            flow_id: rng.random(),
            hop: rng.random(),
            path_len: rng.random(),
            value: rng.random(),
        },
    }
}

fn wire_codec() -> Check {
    let golden = [
        (
            "keywrite",
            packet(
                1,
                7,
                3,
                Report::KeyWrite {
                    redundancy: 2,
                    key: vec![0xde, 0xad, 0xbe, 0xef],
                    data: vec![1, 2, 3, 4],
                },
            ),
        ),
        (
            "append",
            packet(
                0,
                0x0102_0304,
                0,
                Report::Append {
                    list_id: 255,
                    data: (0..8).collect(),
                },
            ),
        ),
        (
            "keyincrement",
            packet(
                3,
                42,
                17,
                Report::KeyIncrement {
                    redundancy: 3,
                    key: vec![0xaa, 0xbb],
                    delta: 0x0102_0304_0506_0708,
                },
            ),
        ),
        (
            "sketchmerge",
            packet(
                1,
                9,
                1,
                Report::SketchMerge {
                    col_index: 513,
                    values: vec![1, u64::MAX, 0x8000],
                },
            ),
        ),
        (
            "postcarding",
            packet(
                0,
                65535,
                0,
                Report::Postcarding {
                    flow_id: 0x1122_3344_5566_7788,
                    hop: 4,
                    path_len: 5,
                    value: 0x3ffff,
                },
            ),
        ),
    ];
    for (name, p) in &golden {
        let want = fixture(name);
        ensure(encode(p).unwrap() == want, format!("{name}: encoding differs from golden vector"))?;
        ensure(decode(&want).as_ref() == Ok(p), format!("{name}: golden vector decodes differently"))?;
    }
    let nack = ControlPacket::Nack {
        reporter_id: 7,
        expected_seq: 99,
    };
    ensure(encode_control(&nack) == fixture("nack"), "nack golden vector")?;
    ensure(
        encode_control(&ControlPacket::Congestion { reporter_id: 3 }) == fixture("congestion"),
        "congestion golden vector",
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x31AE);
    let mut corpus = Vec::new();
    for i in 0..10_000 {
        let p = DtaPacket {
            envelope: Envelope {
                src_port: rng.random(),
                dst_port: rng.random(),
                checksum: rng.random(),
            },
            header: DtaHeader {
                flags: rng.random(),
                reporter_id: rng.random(),
                essential_seq: rng.random(),
            },
            report: random_report(&mut rng),
        };
        let bytes = encode(&p).map_err(|e| format!("case {i}: {e}"))?;
        ensure(decode(&bytes).as_ref() == Ok(&p), format!("round trip case {i}"))?;
        corpus.push(bytes);
    }
    let mut accepted = 0;
    for (i, original) in corpus.iter().enumerate() {
        let mut bytes = original.clone();
        match rng.random_range(0..3) {
            0 => {
                let at = rng.random_range(0..bytes.len());
                bytes[at] = rng.random();
            }
            1 => bytes.truncate(rng.random_range(0..bytes.len())),
            _ => bytes = (0..rng.random_range(0..64)).map(|_| rng.random()).collect(),
        }
        let outcome = catch_unwind(|| (decode(&bytes).is_ok(), decode_control(&bytes).is_ok()));
        let (ok, _) = outcome.map_err(|_| format!("decoder panicked on malformed case {i}"))?;
        accepted += usize::from(ok);
    }
    Ok(format!(
        "5 golden + 2 control vectors exact; 10000 round trips; 10000 malformed inputs, no panic ({accepted} still well formed)"
    ))
}

fn main() -> ExitCode {
    // Quiet the default hook; failures are reported on the criterion line.
    std::panic::set_hook(Box::new(|_| {}));
    let criteria: [Criterion; 9] = [
        ("bound reproduction", bound_reproduction),
        ("monte carlo vs theory", monte_carlo_vs_theory),
        ("longevity curve", longevity),
        ("redundancy crossover", crossover),
        ("batching transparency", batching_transparency),
        ("count-min soundness", count_min),
        ("sketch-merge oracle", sketch_merge),
        ("flow control exactly once", flow_control),
        ("wire codec", wire_codec),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("[PASS] {name}: {detail} ({secs:.1}s)"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name}: {why} ({secs:.1}s)");
            }
        }
    }
    println!("{} passed, {failed} failed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
