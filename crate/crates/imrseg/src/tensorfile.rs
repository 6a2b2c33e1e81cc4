//! The IMRSEG-TENSOR on-disk format.
//!
//! A tensor file is one ASCII header line
//!
//! ```text
//! IMRSEG-TENSOR v1 <d0> <d1> ... <dn>\n
//! ```
//!
//! followed by the row-major (C order) payload as little-endian IEEE-754
//! float32. The same container holds precomputed features, exported soft
//! masks and checkpoint parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &str = "IMRSEG-TENSOR v1";

/// Write a tensor. Values are narrowed to f32 on the way out.
pub fn write_tensor(path: &Path, tensor: &ArrayD<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
    writeln!(w, "{MAGIC} {}", dims.join(" ")).map_err(|e| Error::io(path, e))?;
    // standard layout is guaranteed for owned arrays built in this crate,
    // but fall back to an iteration copy if a view ever sneaks in
    let mut buf = Vec::with_capacity(tensor.len() * 4);
    for &v in tensor.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a tensor written by [`write_tensor`], widening back to f64.
pub fn read_tensor(path: &Path) -> Result<ArrayD<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut header = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte).map_err(|e| Error::io(path, e))?;
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
        if header.len() > 4096 {
            return Err(Error::data(path, "header line exceeds 4096 bytes"));
        }
    }
    let header = String::from_utf8(header).map_err(|_| Error::data(path, "non-UTF8 header"))?;
    let rest = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::data(path, format!("bad magic, expected {MAGIC:?}")))?;
    let dims: Vec<usize> = rest
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| Error::data(path, format!("bad dim {t:?}"))))
        .collect::<Result<_>>()?;
    let len: usize = dims.iter().product();

    let mut payload = vec![0u8; len * 4];
    r.read_exact(&mut payload).map_err(|e| Error::io(path, e))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::data(path, "trailing bytes after payload"));
    }

    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), values)
        .map_err(|_| Error::data(path, "dims do not match payload length"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn round_trip_preserves_shape_and_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tensor");
        let t = Array::from_shape_fn(IxDyn(&[3, 4, 2]), |ix| {
            (ix[0] as f64) * 1.5 - (ix[1] as f64) * 0.25 + (ix[2] as f64)
        });
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.iter().zip(back.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn bad_magic_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tensor");
        std::fs::write(&path, b"NOT-A-TENSOR 1 2\n\0\0\0\0").unwrap();
        let err = read_tensor(&path).unwrap_err();
        assert!(matches!(err, Error::DataFormat { .. }), "{err}");
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.tensor");
        std::fs::write(&path, format!("{MAGIC} 2 2\n\0\0\0\0")).unwrap();
        assert!(read_tensor(&path).is_err());
    }
}
