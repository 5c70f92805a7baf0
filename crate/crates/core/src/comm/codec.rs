//! Typed payload helpers.
//!
//! Message payloads are opaque byte sequences; these helpers encode and
//! decode the scalar and index arrays the toolkit actually ships around,
//! always little-endian.

use crate::error::{Error, Result};

pub fn encode_f64s(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Codec(format!("f64 payload length {} not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn encode_i64s(values: &[i64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_i64s(bytes: &[u8]) -> Result<Vec<i64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Codec(format!("i64 payload length {} not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn encode_usizes(values: &[usize]) -> Vec<u8> {
    encode_i64s(&values.iter().map(|&v| v as i64).collect::<Vec<_>>())
}

pub fn decode_usizes(bytes: &[u8]) -> Result<Vec<usize>> {
    decode_i64s(bytes)?
        .into_iter()
        .map(|v| {
            usize::try_from(v).map_err(|_| Error::Codec(format!("negative index {v} in usize payload")))
        })
        .collect()
}

/// Concatenates length-prefixed byte sections.
pub fn encode_sections(sections: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(sections.len() as u64).to_le_bytes());
    for s in sections {
        out.extend_from_slice(&(s.len() as u64).to_le_bytes());
        out.extend_from_slice(s);
    }
    out
}

pub fn decode_sections(bytes: &[u8]) -> Result<Vec<Vec<u8>>> {
    let take8 = |at: usize| -> Result<u64> {
        bytes
            .get(at..at + 8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .ok_or_else(|| Error::Codec("truncated section header".into()))
    };
    let n = take8(0)? as usize;
    let mut out = Vec::with_capacity(n);
    let mut at = 8;
    for _ in 0..n {
        let len = take8(at)? as usize;
        at += 8;
        let body = bytes
            .get(at..at + len)
            .ok_or_else(|| Error::Codec("truncated section body".into()))?;
        out.push(body.to_vec());
        at += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_roundtrip(values in proptest::collection::vec(any::<f64>(), 0..64)) {
            let back = decode_f64s(&encode_f64s(&values)).unwrap();
            prop_assert_eq!(values.len(), back.len());
            for (a, b) in values.iter().zip(&back) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn i64_roundtrip(values in proptest::collection::vec(any::<i64>(), 0..64)) {
            prop_assert_eq!(decode_i64s(&encode_i64s(&values)).unwrap(), values);
        }

        #[test]
        fn sections_roundtrip(sections in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..32), 0..8)) {
            prop_assert_eq!(decode_sections(&encode_sections(&sections)).unwrap(), sections);
        }
    }

    #[test]
    fn decode_rejects_ragged_lengths() {
        assert!(decode_f64s(&[0u8; 7]).is_err());
        assert!(decode_usizes(&encode_i64s(&[-1])).is_err());
    }
}
