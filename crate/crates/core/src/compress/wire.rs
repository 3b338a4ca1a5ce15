//! Wire format for compressed embeddings.
//!
//! Little-endian header (27 bytes):
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 2    | magic `"CV"`                       |
//! | 2      | 1    | version (1)                        |
//! | 3      | 1    | codec id (0 none, 1 scalar, 2 lattice2d, 3 topk) |
//! | 4      | 4    | round                              |
//! | 8      | 2    | party                              |
//! | 10     | 4    | batch size `B`                     |
//! | 14     | 4    | embedding width `P_m`              |
//! | 18     | 1    | bits per component `b`             |
//! | 19     | 8    | dither stream key                  |
//!
//! The payload follows, bit-packed least-significant bit first and padded
//! with zero bits to a byte boundary:
//!
//! * none: one IEEE-754 binary64 per component, row-major
//! * scalar: one `b`-bit level index per component, row-major
//! * lattice2d: one `2b`-bit codeword index per pair, column by column
//! * topk: per column, `k` row indices of `ceil(log2 P_m)` bits followed by
//!   `k` binary32 values

use alloc::vec::Vec;

use super::{index_bits, payload_bits, reconstruct, CompressedEmbedding, CompressorKind, CompressorSpec, DitherKey, Payload};
use crate::linalg::Matrix;
use crate::{Error, Result};

pub const HEADER_LEN: usize = 27;
const MAGIC: [u8; 2] = *b"CV";
const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WireHeader {
    pub codec: CompressorKind,
    pub round: u32,
    pub party: u16,
    pub batch: u32,
    pub width: u32,
    pub bits: u8,
    pub dither_key: u64,
}

impl WireHeader {
    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.codec.wire_id());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.party.to_le_bytes());
        out.extend_from_slice(&self.batch.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.push(self.bits);
        out.extend_from_slice(&self.dither_key.to_le_bytes());
    }
}

/// What the receiver already knows about an incoming message. Every header
/// field is checked against it.
#[derive(Clone, Copy, Debug)]
pub struct WireExpectation<'a> {
    pub spec: &'a CompressorSpec,
    pub key: DitherKey,
    pub batch: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub header: WireHeader,
    pub reconstructed: Matrix,
    pub payload_bits: u64,
}

struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    fn new(bytes: Vec<u8>) -> Self {
        BitWriter { bytes, acc: 0, filled: 0 }
    }

    fn push(&mut self, value: u64, bits: u32) {
        let mut value = value;
        let mut bits = bits;
        while bits > 0 {
            let take = bits.min(64 - self.filled).min(32);
            let mask = if take == 64 { u64::MAX } else { (1u64 << take) - 1 };
            self.acc |= (value & mask) << self.filled;
            self.filled += take;
            value = if take == 64 { 0 } else { value >> take };
            bits -= take;
            while self.filled >= 8 {
                self.bytes.push(self.acc as u8);
                self.acc >>= 8;
                self.filled -= 8;
            }
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.bytes.push(self.acc as u8);
        }
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    base: usize,
    pos: usize,
    bit: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8], base: usize) -> Self {
        BitReader { bytes, base, pos: 0, bit: 0 }
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn read(&mut self, bits: u32) -> Result<u64> {
        let mut out = 0u64;
        let mut got = 0;
        while got < bits {
            let byte = *self.bytes.get(self.pos).ok_or(Error::Wire {
                offset: self.base + self.pos,
                reason: "truncated payload",
            })?;
            let take = (8 - self.bit).min(bits - got);
            let chunk = ((byte >> self.bit) as u64) & ((1u64 << take) - 1);
            out |= chunk << got;
            got += take;
            self.bit += take;
            if self.bit == 8 {
                self.bit = 0;
                self.pos += 1;
            }
        }
        Ok(out)
    }
}

fn encode_parts(header: &WireHeader, payload: &Payload, k: usize) -> Vec<u8> {
    let mut head = Vec::new();
    header.write(&mut head);
    let mut w = BitWriter::new(head);
    match payload {
        Payload::Raw(values) => values.iter().for_each(|v| w.push(v.to_bits(), 64)),
        Payload::Levels(levels) => levels.iter().for_each(|&l| w.push(l as u64, header.bits as u32)),
        Payload::Codewords(words) => words.iter().for_each(|&c| w.push(c as u64, 2 * header.bits as u32)),
        Payload::Sparse { indices, values } => {
            let ib = index_bits(header.width as usize);
            for c in 0..header.batch as usize {
                for &i in &indices[c * k..(c + 1) * k] {
                    w.push(i as u64, ib);
                }
                for &v in &values[c * k..(c + 1) * k] {
                    w.push(v.to_bits() as u64, 32);
                }
            }
        }
    }
    w.finish()
}

pub fn encode_wire(msg: &CompressedEmbedding) -> Vec<u8> {
    let k = match &msg.payload {
        Payload::Sparse { indices, .. } if msg.header.batch > 0 => indices.len() / msg.header.batch as usize,
        _ => 0,
    };
    encode_parts(&msg.header, &msg.payload, k)
}

/// Uncompressed message (codec id 0), used for server parameters and for
/// gradients sent back to parties.
pub fn encode_raw(values: &Matrix, key: DitherKey) -> Vec<u8> {
    let header = WireHeader {
        codec: CompressorKind::None,
        round: key.round,
        party: key.party,
        batch: values.cols() as u32,
        width: values.rows() as u32,
        bits: super::IDENTITY_BITS,
        dither_key: key.stream_key(),
    };
    encode_parts(&header, &Payload::Raw(values.data().to_vec()), 0)
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn mismatch(offset: usize, reason: &'static str) -> Error {
    Error::Wire { offset, reason }
}

/// Parses and checks a message, then rebuilds the matrix it carries.
pub fn decode_wire(bytes: &[u8], expect: &WireExpectation<'_>) -> Result<Decoded> {
    expect.spec.validate()?;
    if bytes.len() < HEADER_LEN {
        return Err(mismatch(bytes.len(), "truncated header"));
    }
    if bytes[0] != MAGIC[0] {
        return Err(mismatch(0, "bad magic"));
    }
    if bytes[1] != MAGIC[1] {
        return Err(mismatch(1, "bad magic"));
    }
    if bytes[2] != VERSION {
        return Err(mismatch(2, "unsupported version"));
    }
    let codec = CompressorKind::from_wire_id(bytes[3]).ok_or(mismatch(3, "unknown codec id"))?;
    let kind = expect.spec.effective_kind();
    if codec != kind {
        return Err(mismatch(3, "codec differs from the agreed codec"));
    }
    let header = WireHeader {
        codec,
        round: read_u32(bytes, 4),
        party: u16::from_le_bytes([bytes[8], bytes[9]]),
        batch: read_u32(bytes, 10),
        width: read_u32(bytes, 14),
        bits: bytes[18],
        dither_key: u64::from_le_bytes(bytes[19..27].try_into().expect("8 bytes")),
    };
    if header.round != expect.key.round {
        return Err(mismatch(4, "unexpected round"));
    }
    if header.party != expect.key.party {
        return Err(mismatch(8, "unexpected party"));
    }
    if header.batch as usize != expect.batch {
        return Err(mismatch(10, "unexpected batch size"));
    }
    if header.width as usize != expect.width {
        return Err(mismatch(14, "unexpected embedding width"));
    }
    if header.bits != expect.spec.wire_bits() {
        return Err(mismatch(18, "unexpected bits per component"));
    }
    if header.dither_key != expect.key.stream_key() {
        return Err(mismatch(19, "unexpected dither key"));
    }

    let (batch, width) = (expect.batch, expect.width);
    let k = if kind == CompressorKind::TopK { expect.spec.topk_k(width)? } else { 0 };
    let (bits, _) = payload_bits(kind, header.bits, batch, width, k);
    let body_len = bits.div_ceil(8) as usize;
    let expected_len = HEADER_LEN + body_len;
    if bytes.len() < expected_len {
        return Err(mismatch(bytes.len(), "truncated payload"));
    }
    if bytes.len() > expected_len {
        return Err(mismatch(expected_len, "trailing bytes after payload"));
    }

    let mut r = BitReader::new(&bytes[HEADER_LEN..], HEADER_LEN);
    let payload = match kind {
        CompressorKind::None => {
            let mut values = Vec::with_capacity(batch * width);
            for _ in 0..batch * width {
                let at = r.offset();
                let v = f64::from_bits(r.read(64)?);
                if !v.is_finite() {
                    return Err(mismatch(at, "non-finite value"));
                }
                values.push(v);
            }
            Payload::Raw(values)
        }
        CompressorKind::Scalar => Payload::Levels(
            (0..batch * width)
                .map(|_| r.read(header.bits as u32).map(|v| v as u32))
                .collect::<Result<_>>()?,
        ),
        CompressorKind::Lattice2d => Payload::Codewords(
            (0..batch * width.div_ceil(2))
                .map(|_| r.read(2 * header.bits as u32).map(|v| v as u32))
                .collect::<Result<_>>()?,
        ),
        CompressorKind::TopK => {
            let ib = index_bits(width);
            let mut indices = Vec::with_capacity(batch * k);
            let mut values = Vec::with_capacity(batch * k);
            for _ in 0..batch {
                let mut prev: Option<u32> = None;
                for _ in 0..k {
                    let at = r.offset();
                    let i = r.read(ib)? as u32;
                    if i as usize >= width || prev.is_some_and(|p| p >= i) {
                        return Err(mismatch(at, "bad top-k index"));
                    }
                    prev = Some(i);
                    indices.push(i);
                }
                for _ in 0..k {
                    let at = r.offset();
                    let v = f32::from_bits(r.read(32)? as u32);
                    if !v.is_finite() {
                        return Err(mismatch(at, "non-finite value"));
                    }
                    values.push(v);
                }
            }
            Payload::Sparse { indices, values }
        }
    };
    let reconstructed = reconstruct(&payload, expect.spec, &header)?;
    Ok(Decoded {
        header,
        reconstructed,
        payload_bits: bits,
    })
}
