//! Report generators. Everything is drawn up front from the run seed, so a
//! workload is a pure function of the configuration.

use std::collections::VecDeque;

use dta_core::wire::{Report, FLAG_ESSENTIAL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{SimConfig, Workload};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingReport {
    pub flags: u8,
    pub report: Report,
}

/// Per-reporter report queues plus whatever the oracles need afterwards.
#[derive(Debug, Clone, Default)]
pub struct Generated {
    pub queues: Vec<VecDeque<PendingReport>>,
    /// Full path of every postcard flow, indexed by flow id.
    pub paths: Vec<Vec<u64>>,
    /// `[reporter][col][row]` sketches for the SketchColumns workload.
    pub sketches: Vec<Vec<Vec<u64>>>,
}

impl Generated {
    pub fn total(&self) -> u64 {
        self.queues.iter().map(|q| q.len() as u64).sum()
    }
}

const WORKLOAD_STREAM: u64 = 0x5745_4c4c;

fn flags(rng: &mut ChaCha8Rng, essential: f64) -> u8 {
    if rng.random_bool(essential) {
        FLAG_ESSENTIAL
    } else {
        0
    }
}

/// Eight-octet entry id, zero padded to `len`.
pub fn append_entry(reporter: u32, index: u32, len: usize) -> Vec<u8> {
    let mut e = vec![0u8; len];
    e[..4].copy_from_slice(&reporter.to_le_bytes());
    e[4..8].copy_from_slice(&index.to_le_bytes());
    e
}

pub fn generate(cfg: &SimConfig) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ WORKLOAD_STREAM);
    let reporters = cfg.topology.reporters as usize;
    let mem = &cfg.topology.memory;
    let mut g = Generated {
        queues: vec![VecDeque::new(); reporters],
        ..Generated::default()
    };
    match cfg.workload {
        Workload::KwFlows {
            reports,
            keys,
            redundancy,
            essential,
            ..
        } => {
            let value_len = mem.keywrite.expect("validated").value_len;
            for i in 0..reports {
                let key = keys.map_or(i, |k| rng.random_range(0..k));
                let mut data = vec![0u8; value_len];
                rng.fill(data.as_mut_slice());
                let f = flags(&mut rng, essential);
                g.queues[(i % reporters as u64) as usize].push_back(PendingReport {
                    flags: f,
                    report: Report::KeyWrite {
                        redundancy: redundancy as u8,
                        key: key.to_le_bytes().to_vec(),
                        data,
                    },
                });
            }
        }
        Workload::Postcards {
            flows,
            concurrent_flows,
            announce_path_len,
            essential,
            ..
        } => {
            let pc = mem.postcarding.expect("validated");
            let universe = 1u64 << pc.value_bits;
            g.paths = (0..flows)
                .map(|_| (0..pc.hops).map(|_| rng.random_range(0..universe)).collect())
                .collect();
            let path_len = if announce_path_len { pc.hops as u8 } else { 0 };
            let mut start = 0;
            while start < flows {
                let end = (start + concurrent_flows).min(flows);
                for hop in 0..pc.hops {
                    for flow in start..end {
                        let f = flags(&mut rng, essential);
                        g.queues[hop as usize % reporters].push_back(PendingReport {
                            flags: f,
                            report: Report::Postcarding {
                                flow_id: flow,
                                hop: hop as u8,
                                path_len,
                                value: g.paths[flow as usize][hop as usize] as u32,
                            },
                        });
                    }
                }
                start = end;
            }
        }
        Workload::AppendEvents { reports, essential, .. } => {
            let a = mem.append.expect("validated");
            for i in 0..reports {
                let r = (i % reporters as u64) as u32;
                let index = (i / reporters as u64) as u32;
                let f = flags(&mut rng, essential);
                g.queues[r as usize].push_back(PendingReport {
                    flags: f,
                    report: Report::Append {
                        list_id: (i % u64::from(a.lists)) as u32,
                        data: append_entry(r, index, a.entry_len),
                    },
                });
            }
        }
        Workload::KiCounters {
            reports,
            keys,
            max_delta,
            redundancy,
            essential,
            ..
        } => {
            for i in 0..reports {
                let key: u64 = rng.random_range(0..keys);
                let delta = rng.random_range(1..=max_delta);
                let f = flags(&mut rng, essential);
                g.queues[(i % reporters as u64) as usize].push_back(PendingReport {
                    flags: f,
                    report: Report::KeyIncrement {
                        redundancy: redundancy as u8,
                        key: key.to_le_bytes().to_vec(),
                        delta,
                    },
                });
            }
        }
        Workload::SketchColumns { .. } => {
            let sm = mem.sketch_merge.expect("validated");
            g.sketches = (0..reporters)
                .map(|_| {
                    (0..sm.cols)
                        .map(|_| (0..sm.rows).map(|_| rng.random_range(0..1u64 << 32)).collect())
                        .collect()
                })
                .collect();
            for (r, sketch) in g.sketches.iter().enumerate() {
                for (c, column) in sketch.iter().enumerate() {
                    g.queues[r].push_back(sketch_report(c as u32, column));
                }
            }
        }
    }
    g
}

pub fn sketch_report(col: u32, column: &[u64]) -> PendingReport {
    PendingReport {
        flags: FLAG_ESSENTIAL,
        report: Report::SketchMerge {
            col_index: col as u16,
            values: column.to_vec(),
        },
    }
}
