//! Binary tensor container.
//!
//! Layout: magic `AMVQTNSR`, version `u16`, rank `u8`, `rank` dims as `u32`,
//! then the payload as `f32`; all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

pub const MAGIC: &[u8; 8] = b"AMVQTNSR";
pub const VERSION: u16 = 1;

pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    w.write_all(&encode(t)?)?;
    Ok(())
}

/// Serialized size in bytes of a tensor of this shape.
pub fn encoded_len(shape: &[usize]) -> usize {
    MAGIC.len() + 2 + 1 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

pub fn encode<S: Scalar>(t: &Tensor<S>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Unsupported(format!("rank {}", t.rank())))?;
    let mut out = Vec::with_capacity(encoded_len(t.shape()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Unsupported(format!("dimension {d}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn read_tensor<S: Scalar, R: Read>(r: &mut R) -> Result<Tensor<S>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    let version = u16::from_le_bytes(buf2);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported tensor container version {version}")));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    let mut buf4 = [0u8; 4];
    for _ in 0..rank[0] {
        r.read_exact(&mut buf4)?;
        shape.push(u32::from_le_bytes(buf4) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

pub fn save<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    std::fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[..8], b"AMVQTNSR");
        assert_eq!(&bytes[8..11], &[1, 0, 2]);
        assert_eq!(&bytes[11..19], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[19..23], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), encoded_len(&[2, 1]));
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut bytes = encode(&Tensor::<f32>::scalar(1.0)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(read_tensor::<f32, _>(&mut bytes.as_slice()), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn f32_round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let t = Tensor::<f32>::from_fn(&shape, |i| ((i as u32 ^ seed) as f32).sin() * 3.0);
            let back: Tensor<f32> = read_tensor(&mut encode(&t).unwrap().as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
