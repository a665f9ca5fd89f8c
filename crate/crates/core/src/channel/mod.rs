//! Serialization of hybrid streams and their transmission over a simulated
//! digital link.

pub mod bitstream;
pub mod link;

pub use bitstream::{
    bits_per_pixel, deserialize, deserialize_tolerant, serialize, Bitstream, Header, RawPrecision, HEADER_BITS,
};
pub use link::{
    apply_channel, equalize_demodulate, modulate, transmit_bits, ChannelConfig, ChannelKind, Coder, Modulation,
};

use crate::amvq::HybridSymbolStream;
use crate::error::Result;
use crate::scalar::Scalar;

/// What the receiver recovers from one transmission.
#[derive(Clone, Debug)]
pub struct Transmission<S> {
    pub sent: Bitstream,
    pub received: HybridSymbolStream<S>,
    pub bit_errors: usize,
}

/// Serializes the stream and sends its body over the channel. The header is
/// treated as reliable side information.
pub fn transmit<S: Scalar>(
    stream: &HybridSymbolStream<S>,
    precision: RawPrecision,
    cfg: &ChannelConfig,
) -> Result<Transmission<S>> {
    let sent = serialize(stream, precision)?;
    let bits = sent.body_bit_vec();
    let out = transmit_bits(&bits, cfg)?;
    let bit_errors = bits.iter().zip(&out).filter(|(a, b)| a != b).count();
    let received = if bit_errors == 0 { deserialize(&sent)? } else { deserialize_tolerant(&sent.header, &out) };
    Ok(Transmission { sent, received, bit_errors })
}
