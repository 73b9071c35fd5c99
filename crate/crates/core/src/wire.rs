//! DTA report wire format. All multi-octet fields are big-endian.
//!
//! ```text
//! envelope  (8)  src_port u16 | dst_port u16 | length u16 | checksum u16
//! header   (10)  version:4 primitive:4 | flags u8 | reporter_id u32 | essential_seq u32
//! subheader      per primitive
//!   KeyWrite      redundancy u8 | key_len u8              payload: key, data
//!   Append        list_id u32                             payload: data
//!   KeyIncrement  redundancy u8 | key_len u8 | delta u64  payload: key
//!   SketchMerge   col_index u16 | rows u8                 payload: rows × u64
//!   Postcarding   flow_id u64 | hop u8 | path_len u8      payload: value u32
//! ```
//!
//! `length` counts the whole packet, envelope included. The checksum is
//! carried opaquely. Control packets (NACKs and congestion signals) share the
//! envelope and use primitive codes from 8 upwards with a fixed 8-octet body.

use thiserror::Error;

pub const VERSION: u8 = 1;
pub const DTA_PORT: u16 = 40040;
pub const ENVELOPE_LEN: usize = 8;
pub const HEADER_LEN: usize = 10;
pub const MAX_PAYLOAD: usize = 1400;

pub const FLAG_ESSENTIAL: u8 = 0x01;
pub const FLAG_IMMEDIATE: u8 = 0x02;
/// Set on retransmissions that restart a go-back-N window.
pub const FLAG_RESYNC: u8 = 0x04;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("packet truncated in {field}")]
    TruncatedPacket { field: &'static str },
    #[error("unknown primitive {0}")]
    UnknownPrimitive(u8),
    #[error("length mismatch in {field}")]
    LengthMismatch { field: &'static str },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("payload of {0} octets exceeds {MAX_PAYLOAD}")]
    PayloadTooLarge(usize),
    #[error("{field} does not fit its wire field")]
    FieldOverflow { field: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Primitive {
    KeyWrite = 1,
    Append = 2,
    KeyIncrement = 3,
    SketchMerge = 4,
    Postcarding = 5,
}

impl Primitive {
    pub fn from_code(code: u8) -> Result<Self, WireError> {
        Ok(match code {
            1 => Primitive::KeyWrite,
            2 => Primitive::Append,
            3 => Primitive::KeyIncrement,
            4 => Primitive::SketchMerge,
            5 => Primitive::Postcarding,
            other => return Err(WireError::UnknownPrimitive(other)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Envelope {
    pub src_port: u16,
    pub dst_port: u16,
    pub checksum: u16,
}

impl Default for Envelope {
    fn default() -> Self {
        Envelope {
            src_port: DTA_PORT,
            dst_port: DTA_PORT,
            checksum: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DtaHeader {
    pub flags: u8,
    pub reporter_id: u32,
    pub essential_seq: u32,
}

impl DtaHeader {
    pub fn is_essential(&self) -> bool {
        self.flags & FLAG_ESSENTIAL != 0
    }

    pub fn is_immediate(&self) -> bool {
        self.flags & FLAG_IMMEDIATE != 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Report {
    KeyWrite { redundancy: u8, key: Vec<u8>, data: Vec<u8> },
    Append { list_id: u32, data: Vec<u8> },
    KeyIncrement { redundancy: u8, key: Vec<u8>, delta: u64 },
    SketchMerge { col_index: u16, values: Vec<u64> },
    Postcarding { flow_id: u64, hop: u8, path_len: u8, value: u32 },
}

impl Report {
    pub fn primitive(&self) -> Primitive {
        match self {
            Report::KeyWrite { .. } => Primitive::KeyWrite,
            Report::Append { .. } => Primitive::Append,
            Report::KeyIncrement { .. } => Primitive::KeyIncrement,
            Report::SketchMerge { .. } => Primitive::SketchMerge,
            Report::Postcarding { .. } => Primitive::Postcarding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DtaPacket {
    pub envelope: Envelope,
    pub header: DtaHeader,
    pub report: Report,
}

impl DtaPacket {
    pub fn new(header: DtaHeader, report: Report) -> Self {
        DtaPacket {
            envelope: Envelope::default(),
            header,
            report,
        }
    }
}

fn put_envelope(out: &mut Vec<u8>, env: &Envelope) {
    out.extend_from_slice(&env.src_port.to_be_bytes());
    out.extend_from_slice(&env.dst_port.to_be_bytes());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&env.checksum.to_be_bytes());
}

fn finish_length(out: &mut [u8]) -> Result<(), WireError> {
    let len = u16::try_from(out.len()).map_err(|_| WireError::FieldOverflow { field: "length" })?;
    out[4..6].copy_from_slice(&len.to_be_bytes());
    Ok(())
}

fn len_u8(len: usize, field: &'static str) -> Result<u8, WireError> {
    u8::try_from(len).map_err(|_| WireError::FieldOverflow { field })
}

pub fn encode(packet: &DtaPacket) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(64);
    put_envelope(&mut out, &packet.envelope);
    let h = &packet.header;
    out.push(VERSION << 4 | packet.report.primitive() as u8);
    out.push(h.flags);
    out.extend_from_slice(&h.reporter_id.to_be_bytes());
    out.extend_from_slice(&h.essential_seq.to_be_bytes());
    let payload_start = match &packet.report {
        Report::KeyWrite { redundancy, key, data } => {
            out.push(*redundancy);
            out.push(len_u8(key.len(), "key_len")?);
            let start = out.len();
            out.extend_from_slice(key);
            out.extend_from_slice(data);
            start
        }
        Report::Append { list_id, data } => {
            out.extend_from_slice(&list_id.to_be_bytes());
            let start = out.len();
            out.extend_from_slice(data);
            start
        }
        Report::KeyIncrement { redundancy, key, delta } => {
            out.push(*redundancy);
            out.push(len_u8(key.len(), "key_len")?);
            out.extend_from_slice(&delta.to_be_bytes());
            let start = out.len();
            out.extend_from_slice(key);
            start
        }
        Report::SketchMerge { col_index, values } => {
            out.extend_from_slice(&col_index.to_be_bytes());
            out.push(len_u8(values.len(), "rows")?);
            let start = out.len();
            for v in values {
                out.extend_from_slice(&v.to_be_bytes());
            }
            start
        }
        Report::Postcarding {
            flow_id,
            hop,
            path_len,
            value,
        } => {
            out.extend_from_slice(&flow_id.to_be_bytes());
            out.push(*hop);
            out.push(*path_len);
            let start = out.len();
            out.extend_from_slice(&value.to_be_bytes());
            start
        }
    };
    let payload = out.len() - payload_start;
    if payload > MAX_PAYLOAD {
        return Err(WireError::PayloadTooLarge(payload));
    }
    finish_length(&mut out)?;
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::TruncatedPacket { field });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, WireError> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses the envelope and returns it with a reader bounded by its length.
fn open(buf: &[u8]) -> Result<(Envelope, Reader<'_>), WireError> {
    let mut r = Reader { buf, pos: 0 };
    let src_port = r.u16("envelope.src_port")?;
    let dst_port = r.u16("envelope.dst_port")?;
    let length = r.u16("envelope.length")? as usize;
    let checksum = r.u16("envelope.checksum")?;
    if length < ENVELOPE_LEN {
        return Err(WireError::LengthMismatch { field: "envelope.length" });
    }
    if length < buf.len() {
        return Err(WireError::LengthMismatch { field: "envelope.length" });
    }
    // A declared length beyond the buffer surfaces as truncation of whichever
    // field runs out first.
    let env = Envelope {
        src_port,
        dst_port,
        checksum,
    };
    Ok((env, r))
}

fn declared_len(buf: &[u8]) -> usize {
    u16::from_be_bytes([buf[4], buf[5]]) as usize
}

pub fn decode(buf: &[u8]) -> Result<DtaPacket, WireError> {
    let (envelope, mut r) = open(buf)?;
    let vp = r.u8("header.version")?;
    if vp >> 4 != VERSION {
        return Err(WireError::UnsupportedVersion(vp >> 4));
    }
    let primitive = Primitive::from_code(vp & 0x0f)?;
    let header = DtaHeader {
        flags: r.u8("header.flags")?,
        reporter_id: r.u32("header.reporter_id")?,
        essential_seq: r.u32("header.essential_seq")?,
    };
    let truncated_payload = declared_len(buf) > buf.len();
    let report = match primitive {
        Primitive::KeyWrite => {
            let redundancy = r.u8("keywrite.redundancy")?;
            let key_len = r.u8("keywrite.key_len")? as usize;
            let key = r.take(key_len, "keywrite.key")?.to_vec();
            if truncated_payload {
                return Err(WireError::TruncatedPacket { field: "keywrite.data" });
            }
            Report::KeyWrite {
                redundancy,
                key,
                data: r.rest().to_vec(),
            }
        }
        Primitive::Append => {
            let list_id = r.u32("append.list_id")?;
            if truncated_payload {
                return Err(WireError::TruncatedPacket { field: "append.data" });
            }
            Report::Append {
                list_id,
                data: r.rest().to_vec(),
            }
        }
        Primitive::KeyIncrement => {
            let redundancy = r.u8("keyincrement.redundancy")?;
            let key_len = r.u8("keyincrement.key_len")? as usize;
            let delta = r.u64("keyincrement.delta")?;
            let key = r.take(key_len, "keyincrement.key")?.to_vec();
            Report::KeyIncrement { redundancy, key, delta }
        }
        Primitive::SketchMerge => {
            let col_index = r.u16("sketchmerge.col_index")?;
            let rows = r.u8("sketchmerge.rows")?;
            let values = (0..rows)
                .map(|_| r.u64("sketchmerge.values"))
                .collect::<Result<Vec<_>, _>>()?;
            Report::SketchMerge { col_index, values }
        }
        Primitive::Postcarding => Report::Postcarding {
            flow_id: r.u64("postcarding.flow_id")?,
            hop: r.u8("postcarding.hop")?,
            path_len: r.u8("postcarding.path_len")?,
            value: r.u32("postcarding.value")?,
        },
    };
    if r.remaining() > 0 {
        return Err(WireError::LengthMismatch { field: "payload" });
    }
    if truncated_payload {
        return Err(WireError::TruncatedPacket { field: "payload" });
    }
    let payload = buf.len() - payload_offset(&report);
    if payload > MAX_PAYLOAD {
        return Err(WireError::PayloadTooLarge(payload));
    }
    Ok(DtaPacket {
        envelope,
        header,
        report,
    })
}

fn payload_offset(report: &Report) -> usize {
    ENVELOPE_LEN
        + HEADER_LEN
        + match report {
            Report::KeyWrite { .. } => 2,
            Report::Append { .. } => 4,
            Report::KeyIncrement { .. } => 10,
            Report::SketchMerge { .. } => 3,
            Report::Postcarding { .. } => 10,
        }
}

/// Translator-to-reporter signalling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlPacket {
    /// Resend essential reports starting at `expected_seq`.
    Nack { reporter_id: u32, expected_seq: u32 },
    /// Reduce the offered report rate.
    Congestion { reporter_id: u32 },
    /// Resend sketch columns starting at `expected_col`.
    ColumnNack { reporter_id: u32, expected_col: u32 },
    /// Reporter-to-translator: current essential count, so a lost tail
    /// report is noticed without waiting for more traffic.
    CountAnnounce { reporter_id: u32, essential_seq: u32 },
}

const CTRL_NACK: u8 = 8;
const CTRL_CONGESTION: u8 = 9;
const CTRL_COLUMN_NACK: u8 = 10;
const CTRL_COUNT_ANNOUNCE: u8 = 11;
pub const CONTROL_LEN: usize = ENVELOPE_LEN + 1 + 4 + 4;

impl ControlPacket {
    pub fn reporter_id(&self) -> u32 {
        match *self {
            ControlPacket::Nack { reporter_id, .. }
            | ControlPacket::Congestion { reporter_id }
            | ControlPacket::ColumnNack { reporter_id, .. }
            | ControlPacket::CountAnnounce { reporter_id, .. } => reporter_id,
        }
    }
}

pub fn encode_control(packet: &ControlPacket) -> Vec<u8> {
    let mut out = Vec::with_capacity(CONTROL_LEN);
    put_envelope(&mut out, &Envelope::default());
    let (code, arg) = match *packet {
        ControlPacket::Nack { expected_seq, .. } => (CTRL_NACK, expected_seq),
        ControlPacket::Congestion { .. } => (CTRL_CONGESTION, 0),
        ControlPacket::ColumnNack { expected_col, .. } => (CTRL_COLUMN_NACK, expected_col),
        ControlPacket::CountAnnounce { essential_seq, .. } => (CTRL_COUNT_ANNOUNCE, essential_seq),
    };
    out.push(VERSION << 4 | code);
    out.extend_from_slice(&packet.reporter_id().to_be_bytes());
    out.extend_from_slice(&arg.to_be_bytes());
    finish_length(&mut out).expect("fixed size");
    out
}

pub fn decode_control(buf: &[u8]) -> Result<ControlPacket, WireError> {
    let (_, mut r) = open(buf)?;
    let vp = r.u8("control.type")?;
    if vp >> 4 != VERSION {
        return Err(WireError::UnsupportedVersion(vp >> 4));
    }
    let reporter_id = r.u32("control.reporter_id")?;
    let arg = r.u32("control.argument")?;
    if r.remaining() > 0 || declared_len(buf) != buf.len() {
        return Err(WireError::LengthMismatch { field: "envelope.length" });
    }
    match vp & 0x0f {
        CTRL_NACK => Ok(ControlPacket::Nack {
            reporter_id,
            expected_seq: arg,
        }),
        CTRL_CONGESTION if arg == 0 => Ok(ControlPacket::Congestion { reporter_id }),
        CTRL_CONGESTION => Err(WireError::LengthMismatch { field: "control.argument" }),
        CTRL_COLUMN_NACK => Ok(ControlPacket::ColumnNack {
            reporter_id,
            expected_col: arg,
        }),
        CTRL_COUNT_ANNOUNCE => Ok(ControlPacket::CountAnnounce {
            reporter_id,
            essential_seq: arg,
        }),
        other => Err(WireError::UnknownPrimitive(other)),
    }
}
