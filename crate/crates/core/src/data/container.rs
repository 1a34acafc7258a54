//! `.athd` tensor container.
//!
//! Layout, all little-endian:
//!
//! | offset      | size    | field                    |
//! |-------------|---------|--------------------------|
//! | 0           | 4       | magic `ATHD`             |
//! | 4           | 2       | version (u16, = 1)       |
//! | 6           | 1       | rank (u8)                |
//! | 7           | 4·rank  | dims (u32 each)          |
//! | 7 + 4·rank  | 8·numel | payload, f64, row-major  |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ATHD";
pub const VERSION: u16 = 1;

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Rank {
        shape: t.shape().to_vec(),
    })?;
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Rank {
            shape: t.shape().to_vec(),
        })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], offset: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes.get(offset..offset + n).ok_or_else(|| Error::Format {
        offset,
        reason: format!("truncated {what}: need {n} bytes, {} available", bytes.len().saturating_sub(offset)),
    })
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let magic = take(bytes, 0, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {magic:02x?}"),
        });
    }
    let version = u16::from_le_bytes(take(bytes, 4, 2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let rank = take(bytes, 6, 1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut pos = 7;
    for _ in 0..rank {
        let d = u32::from_le_bytes(take(bytes, pos, 4, "dimension")?.try_into().unwrap());
        shape.push(d as usize);
        pos += 4;
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(8).map(|_| n))
        .ok_or_else(|| Error::Format {
            offset: 7,
            reason: format!("shape {shape:?} overflows"),
        })?;
    let payload = take(bytes, pos, numel * 8, "payload")?;
    if bytes.len() != pos + numel * 8 {
        return Err(Error::Format {
            offset: pos + numel * 8,
            reason: format!("{} trailing bytes", bytes.len() - pos - numel * 8),
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_reference_bytes() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let want: Vec<u8> = [
            "41 54 48 44",             // ATHD
            "01 00",                   // version 1
            "02",                      // rank 2
            "01 00 00 00 02 00 00 00", // dims 1, 2
            "00 00 00 00 00 00 f0 3f", // 1.0
            "00 00 00 00 00 00 04 c0", // -2.5
        ]
        .join(" ")
        .split(' ')
        .map(|b| u8::from_str_radix(b, 16).unwrap())
        .collect();
        assert_eq!(encode(&t).unwrap(), want);
        assert_eq!(decode(&want).unwrap(), t);
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(f64::MIN_POSITIVE);
        assert_eq!(decode(&encode(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn errors_carry_offsets() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&t).unwrap();
        let off = |r: Result<Tensor>| match r {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(off(decode(&bytes[..bytes.len() - 1])), 11);
        assert_eq!(off(decode(&bytes[..9])), 7);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(off(decode(&bad)), 0);
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(off(decode(&bad)), 4);
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(off(decode(&long)), bytes.len());
    }
}
