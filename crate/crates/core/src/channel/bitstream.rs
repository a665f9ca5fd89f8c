//! Packed binary form of a hybrid symbol stream.
//!
//! Header (16 bytes, little-endian): magic `AMVQ`, version `u8`, `M: u32`,
//! `L: u16`, `K: u32`, raw precision in bits `u8`. The body follows, packed
//! MSB-first: per position a flag bit (0 index, 1 raw), then either
//! `ceil(log2 K)` index bits or `L` floats of the raw precision, each written
//! as its IEEE bit pattern, most significant bit first. The body is padded
//! with zero bits to a byte boundary.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::amvq::{HybridSymbolStream, Symbol};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"AMVQ";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 16;
pub const HEADER_BITS: usize = HEADER_BYTES * 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum RawPrecision {
    #[default]
    Half,
    Single,
}

impl RawPrecision {
    pub fn bits(self) -> usize {
        match self {
            RawPrecision::Half => 16,
            RawPrecision::Single => 32,
        }
    }

    /// Rounds a value to what survives serialization.
    pub fn round<S: Scalar>(self, v: S) -> S {
        match self {
            RawPrecision::Half => S::lit(f16::from_f64(v.as_f64()).to_f64()),
            RawPrecision::Single => S::lit(v.as_f64() as f32 as f64),
        }
    }
}

impl TryFrom<u8> for RawPrecision {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            16 => Ok(RawPrecision::Half),
            32 => Ok(RawPrecision::Single),
            other => Err(Error::Format(format!("unsupported raw precision {other}"))),
        }
    }
}

impl From<RawPrecision> for u8 {
    fn from(p: RawPrecision) -> u8 {
        p.bits() as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub positions: u32,
    pub dim: u16,
    pub codebook_size: u32,
    pub raw_precision: RawPrecision,
}

impl Header {
    pub fn index_bits(&self) -> usize {
        index_bits(self.codebook_size as usize)
    }

    pub fn raw_bits(&self) -> usize {
        self.dim as usize * self.raw_precision.bits()
    }

    pub fn to_bytes(&self) -> [u8; HEADER_BYTES] {
        let mut b = [0u8; HEADER_BYTES];
        b[..4].copy_from_slice(&MAGIC);
        b[4] = VERSION;
        b[5..9].copy_from_slice(&self.positions.to_le_bytes());
        b[9..11].copy_from_slice(&self.dim.to_le_bytes());
        b[11..15].copy_from_slice(&self.codebook_size.to_le_bytes());
        b[15] = self.raw_precision.into();
        b
    }

    pub fn parse(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_BYTES {
            return Err(Error::Format(format!("bitstream of {} bytes is shorter than its header", b.len())));
        }
        if b[..4] != MAGIC {
            return Err(Error::Format("bad bitstream magic".into()));
        }
        if b[4] != VERSION {
            return Err(Error::Format(format!("unsupported bitstream version {}", b[4])));
        }
        let h = Header {
            positions: u32::from_le_bytes(b[5..9].try_into().expect("4 bytes")),
            dim: u16::from_le_bytes(b[9..11].try_into().expect("2 bytes")),
            codebook_size: u32::from_le_bytes(b[11..15].try_into().expect("4 bytes")),
            raw_precision: RawPrecision::try_from(b[15])?,
        };
        if h.positions == 0 || h.dim == 0 || h.codebook_size < 2 {
            return Err(Error::Format(format!("degenerate header {h:?}")));
        }
        Ok(h)
    }
}

/// `ceil(log2 K)`.
pub fn index_bits(k: usize) -> usize {
    if k <= 1 {
        0
    } else {
        (usize::BITS - (k - 1).leading_zeros()) as usize
    }
}

/// Header fields for a stream, checking they fit the format.
pub fn header_for<S>(stream: &HybridSymbolStream<S>, precision: RawPrecision) -> Result<Header> {
    let positions = u32::try_from(stream.symbols.len())
        .map_err(|_| Error::Unsupported(format!("{} positions exceed the u32 header field", stream.symbols.len())))?;
    let dim = u16::try_from(stream.dim)
        .map_err(|_| Error::Unsupported(format!("dimension {} exceeds the u16 header field", stream.dim)))?;
    let codebook_size = u32::try_from(stream.codebook_size)
        .map_err(|_| Error::Unsupported(format!("codebook size {} exceeds 2^32", stream.codebook_size)))?;
    Ok(Header { positions, dim, codebook_size, raw_precision: precision })
}

/// Body length in bits, from the tags alone.
pub fn body_bits<S>(stream: &HybridSymbolStream<S>, header: &Header) -> usize {
    stream
        .symbols
        .iter()
        .map(|s| 1 + if s.is_index() { header.index_bits() } else { header.raw_bits() })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    /// Body bits packed MSB-first, zero-padded to a whole byte.
    pub body: Vec<u8>,
    pub body_bits: usize,
}

impl Bitstream {
    pub fn total_bits(&self) -> usize {
        HEADER_BITS + self.body_bits
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.to_bytes().to_vec();
        out.extend_from_slice(&self.body);
        out
    }

    /// Strict parse of a complete file image.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = Header::parse(bytes)?;
        let body = bytes[HEADER_BYTES..].to_vec();
        let mut r = BitReader::new(&body, body.len() * 8);
        let mut body_bits = 0;
        for m in 0..header.positions {
            let need = 1 + if r.bit()? { header.raw_bits() } else { header.index_bits() };
            r.skip(need - 1).map_err(|_| Error::Format(format!("body truncated at position {m}")))?;
            body_bits += need;
        }
        if body.len() != body_bits.div_ceil(8) {
            return Err(Error::Format(format!("{} body bytes for {body_bits} bits", body.len())));
        }
        if r.remaining_bits_nonzero() {
            return Err(Error::Format("non-zero padding bits".into()));
        }
        Ok(Bitstream { header, body, body_bits })
    }

    /// Unpacked body bits, one `bool` per bit.
    pub fn body_bit_vec(&self) -> Vec<bool> {
        (0..self.body_bits).map(|i| self.body[i / 8] >> (7 - i % 8) & 1 == 1).collect()
    }

    /// Repacks a bit vector under an existing header.
    pub fn from_body_bits(header: Header, bits: &[bool]) -> Self {
        let mut w = BitWriter::default();
        for &b in bits {
            w.push(b);
        }
        let (body, body_bits) = w.finish();
        Bitstream { header, body, body_bits }
    }
}

/// Bits per pixel of the full transmission, header included.
pub fn bits_per_pixel(bitstream: &Bitstream, image_height: usize, image_width: usize) -> Result<f64> {
    if image_height == 0 || image_width == 0 {
        return Err(Error::Invalid("image dimensions must be positive".into()));
    }
    Ok(bitstream.total_bits() as f64 / (image_height * image_width) as f64)
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    len: usize,
}

impl BitWriter {
    fn push(&mut self, bit: bool) {
        if self.len.is_multiple_of(8) {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().expect("byte pushed above") |= 0x80 >> (self.len % 8);
        }
        self.len += 1;
    }

    fn push_bits(&mut self, value: u64, n: usize) {
        for i in (0..n).rev() {
            self.push(value >> i & 1 == 1);
        }
    }

    fn finish(self) -> (Vec<u8>, usize) {
        (self.bytes, self.len)
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    len: usize,
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8], len: usize) -> Self {
        BitReader { bytes, len, pos: 0 }
    }

    fn bit(&mut self) -> Result<bool> {
        if self.pos >= self.len {
            return Err(Error::Format("bitstream body truncated".into()));
        }
        let b = self.bytes[self.pos / 8] >> (7 - self.pos % 8) & 1 == 1;
        self.pos += 1;
        Ok(b)
    }

    /// Reads past the end as zeros.
    fn bit_or_zero(&mut self) -> bool {
        self.bit().unwrap_or_else(|_| {
            self.pos += 1;
            false
        })
    }

    fn bits(&mut self, n: usize) -> Result<u64> {
        (0..n).try_fold(0u64, |acc, _| Ok(acc << 1 | self.bit()? as u64))
    }

    fn bits_or_zero(&mut self, n: usize) -> u64 {
        (0..n).fold(0u64, |acc, _| acc << 1 | self.bit_or_zero() as u64)
    }

    fn skip(&mut self, n: usize) -> Result<()> {
        if self.pos + n > self.len {
            return Err(Error::Format("bitstream body truncated".into()));
        }
        self.pos += n;
        Ok(())
    }

    fn remaining_bits_nonzero(&self) -> bool {
        (self.pos..self.len).any(|i| self.bytes[i / 8] >> (7 - i % 8) & 1 == 1)
    }
}

fn raw_pattern(v: f64, precision: RawPrecision) -> Result<u64> {
    let bits = match precision {
        RawPrecision::Half => {
            let h = f16::from_f64(v);
            if !h.is_finite() {
                return Err(Error::Unsupported(format!("raw value {v} overflows half precision")));
            }
            h.to_bits() as u64
        }
        RawPrecision::Single => {
            let s = v as f32;
            if !s.is_finite() {
                return Err(Error::Unsupported(format!("raw value {v} overflows single precision")));
            }
            s.to_bits() as u64
        }
    };
    Ok(bits)
}

fn raw_value(pattern: u64, precision: RawPrecision) -> f64 {
    match precision {
        RawPrecision::Half => f16::from_bits(pattern as u16).to_f64(),
        RawPrecision::Single => f32::from_bits(pattern as u32) as f64,
    }
}

pub fn serialize<S: Scalar>(stream: &HybridSymbolStream<S>, precision: RawPrecision) -> Result<Bitstream> {
    stream.validate()?;
    let header = header_for(stream, precision)?;
    let (ib, pb) = (header.index_bits(), precision.bits());
    let mut w = BitWriter::default();
    for s in &stream.symbols {
        match s {
            Symbol::Index(k) => {
                w.push(false);
                w.push_bits(*k as u64, ib);
            }
            Symbol::Raw(v) => {
                w.push(true);
                for x in v {
                    w.push_bits(raw_pattern(x.as_f64(), precision)?, pb);
                }
            }
        }
    }
    let (body, body_bits) = w.finish();
    debug_assert_eq!(body_bits, self::body_bits(stream, &header));
    Ok(Bitstream { header, body, body_bits })
}

/// Strict inverse of [`serialize`].
pub fn deserialize<S: Scalar>(bitstream: &Bitstream) -> Result<HybridSymbolStream<S>> {
    let h = bitstream.header;
    let mut r = BitReader::new(&bitstream.body, bitstream.body_bits);
    let mut symbols = Vec::with_capacity(h.positions as usize);
    for _ in 0..h.positions {
        if r.bit()? {
            let v = (0..h.dim)
                .map(|_| Ok(S::lit(raw_value(r.bits(h.raw_precision.bits())?, h.raw_precision))))
                .collect::<Result<Vec<S>>>()?;
            symbols.push(Symbol::Raw(v));
        } else {
            symbols.push(Symbol::Index(r.bits(h.index_bits())? as u32));
        }
    }
    if r.pos != bitstream.body_bits {
        return Err(Error::Format(format!("{} trailing body bits", bitstream.body_bits - r.pos)));
    }
    HybridSymbolStream::new(h.dim as usize, h.codebook_size as usize, symbols)
}

/// Best-effort parse of a body that may contain bit errors. Indices past `K`
/// wrap modulo `K`, non-finite raw values become zero and a body that runs
/// short is read as zeros.
pub fn deserialize_tolerant<S: Scalar>(header: &Header, bits: &[bool]) -> HybridSymbolStream<S> {
    let packed = Bitstream::from_body_bits(*header, bits);
    let mut r = BitReader::new(&packed.body, packed.body_bits);
    let k = header.codebook_size as u64;
    let symbols = (0..header.positions)
        .map(|_| {
            if r.bit_or_zero() {
                Symbol::Raw(
                    (0..header.dim)
                        .map(|_| {
                            let v = raw_value(r.bits_or_zero(header.raw_precision.bits()), header.raw_precision);
                            S::lit(if v.is_finite() { v } else { 0.0 })
                        })
                        .collect(),
                )
            } else {
                Symbol::Index((r.bits_or_zero(header.index_bits()) % k) as u32)
            }
        })
        .collect();
    HybridSymbolStream { dim: header.dim as usize, codebook_size: header.codebook_size as usize, symbols }
}

/// The stream as the receiver will see it after serialization rounding.
pub fn round_trip_values<S: Scalar>(stream: &HybridSymbolStream<S>, precision: RawPrecision) -> HybridSymbolStream<S> {
    let symbols = stream
        .symbols
        .iter()
        .map(|s| match s {
            Symbol::Raw(v) => Symbol::Raw(v.iter().map(|&x| precision.round(x)).collect()),
            Symbol::Index(k) => Symbol::Index(*k),
        })
        .collect();
    HybridSymbolStream { dim: stream.dim, codebook_size: stream.codebook_size, symbols }
}
