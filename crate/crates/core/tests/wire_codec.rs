use dta_core::wire::{
    decode, decode_control, encode, encode_control, ControlPacket, DtaHeader, DtaPacket, Envelope, Report, WireError,
    DTA_PORT, MAX_PAYLOAD,
};
use proptest::prelude::*;

fn fixture(name: &str) -> Vec<u8> {
    let path = format!("{}/tests/fixtures/{name}.hex", env!("CARGO_MANIFEST_DIR"));
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

fn golden() -> Vec<(&'static str, DtaPacket)> {
    vec![
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
    ]
}

#[test]
fn golden_vectors_are_bit_exact() {
    for (name, p) in golden() {
        let want = fixture(name);
        assert_eq!(encode(&p).unwrap(), want, "{name}");
        assert_eq!(decode(&want).unwrap(), p, "{name}");
    }
}

#[test]
fn golden_control_vectors() {
    let nack = ControlPacket::Nack {
        reporter_id: 7,
        expected_seq: 99,
    };
    let congestion = ControlPacket::Congestion { reporter_id: 3 };
    assert_eq!(encode_control(&nack), fixture("nack"));
    assert_eq!(encode_control(&congestion), fixture("congestion"));
    assert_eq!(decode_control(&fixture("nack")), Ok(nack));
}

#[test]
fn every_truncation_is_reported() {
    for (name, p) in golden() {
        let bytes = encode(&p).unwrap();
        for cut in 0..bytes.len() {
            match decode(&bytes[..cut]) {
                Err(WireError::TruncatedPacket { .. }) => {}
                other => panic!("{name} cut at {cut}: {other:?}"),
            }
        }
    }
}

fn arb_report() -> impl Strategy<Value = Report> {
    prop_oneof![
        (any::<u8>(), prop::collection::vec(any::<u8>(), 0..=255), prop::collection::vec(any::<u8>(), 0..600))
            .prop_map(|(redundancy, key, data)| Report::KeyWrite { redundancy, key, data }),
        (any::<u32>(), prop::collection::vec(any::<u8>(), 0..=MAX_PAYLOAD))
            .prop_map(|(list_id, data)| Report::Append { list_id, data }),
        (any::<u8>(), prop::collection::vec(any::<u8>(), 0..=255), any::<u64>())
            .prop_map(|(redundancy, key, delta)| Report::KeyIncrement { redundancy, key, delta }),
        (any::<u16>(), prop::collection::vec(any::<u64>(), 0..=175))
            .prop_map(|(col_index, values)| Report::SketchMerge { col_index, values }),
        (any::<u64>(), any::<u8>(), any::<u8>(), any::<u32>()).prop_map(|(flow_id, hop, path_len, value)| {
            Report::Postcarding {
                flow_id,
                hop,
                path_len,
                value,
            }
        }),
    ]
}

fn arb_packet() -> impl Strategy<Value = DtaPacket> {
    (any::<[u16; 3]>(), any::<u8>(), any::<u32>(), any::<u32>(), arb_report()).prop_map(
        |([src_port, dst_port, checksum], flags, reporter_id, essential_seq, report)| DtaPacket {
            envelope: Envelope {
                src_port,
                dst_port,
                checksum,
            },
            header: DtaHeader {
                flags,
                reporter_id,
                essential_seq,
            },
            report,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn round_trip(p in arb_packet()) {
        let bytes = encode(&p).unwrap();
        prop_assert_eq!(decode(&bytes).unwrap(), p);
    }

    #[test]
    fn random_octets_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..96)) {
        if let Ok(p) = decode(&bytes) {
            prop_assert_eq!(encode(&p).unwrap(), bytes.clone());
        }
        let _ = decode_control(&bytes);
    }

    #[test]
    fn mutated_packets_never_panic(p in arb_packet(), at in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let mut bytes = encode(&p).unwrap();
        let i = at.index(bytes.len());
        bytes[i] = byte;
        if let Ok(q) = decode(&bytes) {
            prop_assert_eq!(encode(&q).unwrap(), bytes);
        }
    }
}
