//! Embedding codecs: dithered uniform scalar quantization, a 2-D hexagonal
//! lattice quantizer, and per-sample top-k sparsification.
//!
//! Each codec is split into an encoder that produces a [`Payload`] and a
//! reconstruction step that turns a payload back into a matrix. The
//! compressor and the wire decoder share the reconstruction step, so the
//! matrix a receiver decodes is bit-identical to the one the sender reports.

mod bounds;
mod lattice;
mod scalar;
mod topk;
mod wire;

use alloc::vec::Vec;

use crate::linalg::Matrix;
use crate::rng;
use crate::{Error, Result};

pub use bounds::{
    lattice_cell_volume, lattice_error_bound, required_k, required_q, required_v,
    scalar_error_bound, table1_bound, topk_error_bound,
};
pub use lattice::{codeword as lattice_codeword, nearest_codeword as lattice_nearest_codeword};
pub use wire::{decode_wire, encode_raw, encode_wire, Decoded, WireExpectation, WireHeader, HEADER_LEN};

/// Bits per component that mean "send raw values".
pub const IDENTITY_BITS: u8 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CompressorKind {
    None,
    Scalar,
    Lattice2d,
    TopK,
}

impl CompressorKind {
    pub fn wire_id(self) -> u8 {
        match self {
            CompressorKind::None => 0,
            CompressorKind::Scalar => 1,
            CompressorKind::Lattice2d => 2,
            CompressorKind::TopK => 3,
        }
    }

    pub fn from_wire_id(id: u8) -> Option<Self> {
        Some(match id {
            0 => CompressorKind::None,
            1 => CompressorKind::Scalar,
            2 => CompressorKind::Lattice2d,
            3 => CompressorKind::TopK,
            _ => return None,
        })
    }
}

/// How top-k picks the entries it keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SelectionMode {
    /// Largest `|value|`.
    Magnitude,
    /// Largest `|dF/dh|` from the previous iteration; falls back to magnitude
    /// when no gradient is available yet.
    StaleGradient,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressorSpec {
    pub kind: CompressorKind,
    /// Bits per component. 32 means the identity codec, whatever `kind` says.
    pub bits: u8,
    pub value_min: f64,
    pub value_max: f64,
    pub selection: SelectionMode,
    pub dither: bool,
    /// Explicit top-k `k`; otherwise `round(P_m * bits / 32)`.
    pub topk_k: Option<usize>,
}

impl CompressorSpec {
    fn with(kind: CompressorKind, bits: u8) -> Self {
        CompressorSpec {
            kind,
            bits,
            value_min: -1.0,
            value_max: 1.0,
            selection: SelectionMode::Magnitude,
            dither: true,
            topk_k: None,
        }
    }

    pub fn none() -> Self {
        Self::with(CompressorKind::None, IDENTITY_BITS)
    }

    pub fn scalar(bits: u8) -> Self {
        Self::with(CompressorKind::Scalar, bits)
    }

    pub fn lattice2d(bits: u8) -> Self {
        Self::with(CompressorKind::Lattice2d, bits)
    }

    pub fn topk(bits: u8) -> Self {
        Self::with(CompressorKind::TopK, bits)
    }

    pub fn with_range(mut self, min: f64, max: f64) -> Self {
        self.value_min = min;
        self.value_max = max;
        self
    }

    pub fn with_dither(mut self, dither: bool) -> Self {
        self.dither = dither;
        self
    }

    pub fn with_selection(mut self, selection: SelectionMode) -> Self {
        self.selection = selection;
        self
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.topk_k = Some(k);
        self
    }

    /// The codec actually applied: anything at 32 bits is the identity.
    pub fn effective_kind(&self) -> CompressorKind {
        if self.bits >= IDENTITY_BITS {
            CompressorKind::None
        } else {
            self.kind
        }
    }

    /// Bits the header carries; the identity codec is always reported as 32.
    pub fn wire_bits(&self) -> u8 {
        if self.effective_kind() == CompressorKind::None {
            IDENTITY_BITS
        } else {
            self.bits
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > IDENTITY_BITS {
            return Err(Error::invalid(alloc::format!(
                "bits per component must be in 1..=32, got {}",
                self.bits
            )));
        }
        if !(self.value_min.is_finite() && self.value_max.is_finite() && self.value_min < self.value_max) {
            return Err(Error::invalid("codec range needs finite value_min < value_max"));
        }
        if self.effective_kind() == CompressorKind::Lattice2d && self.bits > 15 {
            return Err(Error::invalid("lattice codewords are limited to 30 bits"));
        }
        Ok(())
    }

    /// Number of entries top-k keeps per column of width `width`.
    pub fn topk_k(&self, width: usize) -> Result<usize> {
        let k = match self.topk_k {
            Some(k) => k,
            None => ((width * self.bits as usize + 16) / 32).max(1),
        };
        if k == 0 || k > width {
            return Err(Error::invalid(alloc::format!(
                "top-k needs 1 <= k <= {width}, got {k}"
            )));
        }
        Ok(k)
    }
}

/// Identifies a dither stream. Sender and receiver derive the same stream
/// from the shared seed, the round and the party, so the dither itself is
/// never transmitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DitherKey {
    pub seed: u64,
    pub round: u32,
    pub party: u16,
}

impl DitherKey {
    pub fn new(seed: u64, round: u32, party: u16) -> Self {
        DitherKey { seed, round, party }
    }

    /// The 64-bit stream key carried in the wire header.
    pub fn stream_key(&self) -> u64 {
        rng::derive_seed(self.seed, &[rng::tag::DITHER, self.round as u64, self.party as u64])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Raw(Vec<f64>),
    Levels(Vec<u32>),
    Codewords(Vec<u32>),
    Sparse { indices: Vec<u32>, values: Vec<f32> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedEmbedding {
    pub reconstructed: Matrix,
    /// Exact size of the bit-packed payload (values and indices), header
    /// excluded.
    pub payload_bits: u64,
    /// Size under the convention of counting only transmitted values, with
    /// uncompressed components at 32 bits.
    pub paper_bits: u64,
    /// `||reconstructed - original||_F^2`
    pub error_sq_fro: f64,
    pub header: WireHeader,
    pub payload: Payload,
}

impl CompressedEmbedding {
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload_bits.div_ceil(8) as usize
    }
}

pub(crate) fn index_bits(width: usize) -> u32 {
    if width <= 1 {
        0
    } else {
        usize::BITS - (width - 1).leading_zeros()
    }
}

pub(crate) fn payload_bits(kind: CompressorKind, bits: u8, batch: usize, width: usize, k: usize) -> (u64, u64) {
    let (b, p) = (batch as u64, width as u64);
    match kind {
        CompressorKind::None => (64 * b * p, 32 * b * p),
        CompressorKind::Scalar => (b * p * bits as u64, b * p * bits as u64),
        CompressorKind::Lattice2d => {
            let n = b * p.div_ceil(2) * 2 * bits as u64;
            (n, n)
        }
        CompressorKind::TopK => (
            b * k as u64 * (32 + index_bits(width) as u64),
            b * k as u64 * 32,
        ),
    }
}

/// Rebuilds the matrix a payload stands for. Shared by the compressor and the
/// wire decoder.
pub(crate) fn reconstruct(
    payload: &Payload,
    spec: &CompressorSpec,
    header: &WireHeader,
) -> Result<Matrix> {
    let (rows, cols) = (header.width as usize, header.batch as usize);
    match payload {
        Payload::Raw(values) => Matrix::from_vec(rows, cols, values.clone()),
        Payload::Levels(levels) => Ok(scalar::reconstruct(levels, rows, cols, spec, header.dither_key)),
        Payload::Codewords(words) => Ok(lattice::reconstruct(words, rows, cols, spec, header.dither_key)),
        Payload::Sparse { indices, values } => topk::reconstruct(indices, values, rows, cols),
    }
}

/// Compresses an embedding batch (`P_m x B`) with the given codec.
///
/// `stale_grad` is the selection score matrix for top-k in stale-gradient
/// mode; it is ignored by every other codec.
pub fn compress(
    h: &Matrix,
    spec: &CompressorSpec,
    key: DitherKey,
    stale_grad: Option<&Matrix>,
) -> Result<CompressedEmbedding> {
    spec.validate()?;
    if let Some(index) = h.first_non_finite() {
        return Err(Error::NonFinite {
            what: "embedding",
            index,
        });
    }
    let kind = spec.effective_kind();
    let (width, batch) = h.shape();
    let header = WireHeader {
        codec: kind,
        round: key.round,
        party: key.party,
        batch: batch as u32,
        width: width as u32,
        bits: spec.wire_bits(),
        dither_key: key.stream_key(),
    };
    let mut k = 0;
    let payload = match kind {
        CompressorKind::None => Payload::Raw(h.data().to_vec()),
        CompressorKind::Scalar => Payload::Levels(scalar::encode(h, spec, header.dither_key)?),
        CompressorKind::Lattice2d => Payload::Codewords(lattice::encode(h, spec, header.dither_key)?),
        CompressorKind::TopK => {
            k = spec.topk_k(width)?;
            let (indices, values) = topk::encode(h, k, spec.selection, stale_grad)?;
            Payload::Sparse { indices, values }
        }
    };
    let reconstructed = reconstruct(&payload, spec, &header)?;
    let error_sq_fro = reconstructed.sub(h)?.fro_norm_sq();
    let (payload_bits, paper_bits) = payload_bits(kind, spec.bits, batch, width, k);
    Ok(CompressedEmbedding {
        reconstructed,
        payload_bits,
        paper_bits,
        error_sq_fro,
        header,
        payload,
    })
}

pub fn compress_scalar(h: &Matrix, spec: &CompressorSpec, key: DitherKey) -> Result<CompressedEmbedding> {
    expect_kind(spec, CompressorKind::Scalar)?;
    compress(h, spec, key, None)
}

pub fn compress_lattice2d(h: &Matrix, spec: &CompressorSpec, key: DitherKey) -> Result<CompressedEmbedding> {
    expect_kind(spec, CompressorKind::Lattice2d)?;
    compress(h, spec, key, None)
}

pub fn compress_topk(
    h: &Matrix,
    spec: &CompressorSpec,
    key: DitherKey,
    stale_grad: Option<&Matrix>,
) -> Result<CompressedEmbedding> {
    expect_kind(spec, CompressorKind::TopK)?;
    compress(h, spec, key, stale_grad)
}

fn expect_kind(spec: &CompressorSpec, kind: CompressorKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::invalid(alloc::format!(
            "codec spec is {:?}, expected {kind:?}",
            spec.kind
        )));
    }
    Ok(())
}

/// Range check shared by the quantizers: values may exceed the configured
/// range by at most `1e-12` and are clamped into it.
pub(crate) fn clamp_in_range(v: f64, index: usize, spec: &CompressorSpec) -> Result<f64> {
    const SLACK: f64 = 1e-12;
    if v < spec.value_min - SLACK || v > spec.value_max + SLACK {
        return Err(Error::OutOfRange {
            value: v,
            index,
            min: spec.value_min,
            max: spec.value_max,
        });
    }
    Ok(v.clamp(spec.value_min, spec.value_max))
}
