//! The GZT1 tensor container.
//!
//! Layout of one record:
//!
//! ```text
//! "GZT1"                 4 bytes magic
//! rank                   1 byte
//! extents                rank x u64, little-endian
//! payload                prod(extents) x f64, little-endian, row-major
//! ```
//!
//! Records may be concatenated; [`decode_all`] reads such a stream.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GZT1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 8 * t.rank() + 8 * t.numel());
    encode_into(t, &mut out);
    out
}

pub fn encode_into(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("truncated GZT1 record while reading {what}")))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

/// Decodes one record from the start of `bytes`, returning the tensor and
/// the number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4, "magic")? != MAGIC {
        return Err(Error::Format("bad GZT1 magic".into()));
    }
    let rank = take(bytes, &mut pos, 1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut count: u64 = 1;
    for _ in 0..rank {
        let raw = take(bytes, &mut pos, 8, "extent")?;
        let d = u64::from_le_bytes(raw.try_into().expect("8 bytes"));
        if d == 0 {
            return Err(Error::Format("zero extent in GZT1 shape".into()));
        }
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::Format("GZT1 extents overflow".into()))?;
        shape.push(usize::try_from(d).map_err(|_| Error::Format("extent exceeds address space".into()))?);
    }
    let payload_len = count
        .checked_mul(8)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::Format("GZT1 payload too large".into()))?;
    let payload = take(bytes, &mut pos, payload_len, "payload")?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((Tensor::new(shape, data)?, pos))
}

/// Decodes a buffer holding exactly one record.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after GZT1 record",
            bytes.len() - used
        )));
    }
    Ok(t)
}

/// Decodes a concatenation of records.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (t, used) = decode_prefix(&bytes[pos..])?;
        out.push(t);
        pos += used;
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"GZT1");
        assert_eq!(b[4], 2);
        assert_eq!(&b[5..13], &1u64.to_le_bytes());
        assert_eq!(&b[13..21], &2u64.to_le_bytes());
        assert_eq!(&b[21..29], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 5 + 16 + 16);
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode(b"GZT").is_err());
        assert!(decode(b"XXXX\x00").is_err());
        let mut b = encode(&Tensor::scalar(1.0));
        b.push(0);
        assert!(decode(&b).is_err());
        // Huge extents must fail without allocating.
        let mut h = b"GZT1\x02".to_vec();
        h.extend_from_slice(&u64::MAX.to_le_bytes());
        h.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode(&h).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert!(back.bitwise_eq(&t));
            let mut two = encode(&t);
            encode_into(&t, &mut two);
            prop_assert_eq!(decode_all(&two).unwrap().len(), 2);
        }
    }
}
