//! `LSF1` tensor files: magic `LSF1`, u32 LE header length, JSON header
//! `{"dtype":"f32","shape":[...]}`, then row-major f32 LE payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"LSF1";

#[derive(Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
}

/// Serializes `shape` + `values` to LSF1 bytes.
pub fn encode(shape: &[usize], values: &[f32]) -> Vec<u8> {
    let dims = shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
    let header = format!("{{\"dtype\":\"f32\",\"shape\":[{dims}]}}");
    let mut out = Vec::with_capacity(8 + header.len() + values.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses LSF1 bytes into (shape, values). `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bad = |reason: &str| Error::format(origin, reason);
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing LSF1 magic"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body_start = 8 + header_len;
    if bytes.len() < body_start {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[8..body_start])
        .map_err(|e| bad(&format!("bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(bad(&format!("unsupported dtype {}", header.dtype)));
    }
    let count: usize = header.shape.iter().product();
    let payload = &bytes[body_start..];
    if payload.len() != count * 4 {
        return Err(bad(&format!(
            "payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            count * 4
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header.shape, values))
}

pub fn write(path: &Path, shape: &[usize], values: &[f32]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode(shape, values))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}

pub fn write_tensor<T: Real>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    let values: Vec<f32> = tensor.data().iter().map(|v| v.f64() as f32).collect();
    write(path, tensor.shape(), &values)
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let (shape, values) = read(path)?;
    Tensor::from_vec(&shape, values.into_iter().map(|v| T::of(v as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let bytes = encode(&[1, 2], &[1.0, -2.5]);
        let header = br#"{"dtype":"f32","shape":[1,2]}"#;
        assert_eq!(&bytes[..4], b"LSF1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize, header.len());
        assert_eq!(&bytes[8..8 + header.len()], header);
        assert_eq!(&bytes[8 + header.len()..8 + header.len() + 4], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[bytes.len() - 4..], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn rejects_corrupt_input() {
        let p = Path::new("x.lsf");
        assert!(decode(b"LSF0\0\0\0\0", p).is_err());
        let mut bytes = encode(&[3], &[1.0, 2.0, 3.0]);
        bytes.pop();
        assert!(decode(&bytes, p).is_err());
        let f64_header = br#"{"dtype":"f64","shape":[0]}"#;
        let mut bytes = b"LSF1".to_vec();
        bytes.extend_from_slice(&(f64_header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(f64_header);
        assert!(decode(&bytes, p).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(shape in proptest::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let values: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let (s, v) = decode(&encode(&shape, &values), Path::new("mem")).unwrap();
            prop_assert_eq!(s, shape);
            prop_assert_eq!(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), values.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
}
