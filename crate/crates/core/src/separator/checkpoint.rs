//! Tensor container: one magic line, a JSON index, then raw little-endian
//! payloads at the offsets the index records.
//!
//! ```text
//! SPGMCKPT <format_version> <index_bytes>\n
//! {"format_version":1,"header":{...},"tensors":[{"name":..,"shape":..,"dtype":"f32","offset":0}, ..]}
//! <payload>
//! ```
//! Offsets are relative to the start of the payload.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "SPGMCKPT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    format_version: u32,
    header: serde_json::Value,
    tensors: Vec<Entry>,
}

pub fn write_container(path: &Path, header: &serde_json::Value, tensors: &[(&str, &Tensor)], dtype: Dtype) -> Result<()> {
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype,
                offset,
            };
            offset += (t.numel() * dtype.width()) as u64;
            e
        })
        .collect();
    let index = serde_json::to_vec(&Index {
        format_version: FORMAT_VERSION,
        header: header.clone(),
        tensors: entries,
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC} {FORMAT_VERSION} {}", index.len())?;
    w.write_all(&index)?;
    for (_, t) in tensors {
        for &v in t.data() {
            match dtype {
                Dtype::F32 => w.write_all(&(v as f32).to_le_bytes())?,
                Dtype::F64 => w.write_all(&v.to_le_bytes())?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a container back as its header and `(name, tensor)` pairs in
/// file order. 32-bit payloads widen exactly to 64-bit.
pub fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let bad = |msg: String| Error::format(path, msg);
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let mut fields = line.trim_end().split(' ');
    if fields.next() != Some(MAGIC) {
        return Err(bad("not a checkpoint container (bad magic)".into()));
    }
    let version: u32 = fields
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing format version".into()))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let index_len: usize = fields
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing index length".into()))?;
    let mut index = vec![0u8; index_len];
    r.read_exact(&mut index).map_err(|e| bad(format!("truncated index: {e}")))?;
    let index: Index = serde_json::from_slice(&index).map_err(|e| bad(format!("malformed index: {e}")))?;
    if index.format_version != version {
        return Err(bad("index and magic line disagree on format version".into()));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut out = Vec::with_capacity(index.tensors.len());
    for e in index.tensors {
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * e.dtype.width();
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| bad(format!("tensor `{}` runs past the end of the payload", e.name)))?;
        let data: Vec<f64> = match e.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("tensor `{}` holds non-finite values", e.name)));
        }
        let t = Tensor::from_vec(&e.shape, data).map_err(|err| bad(format!("tensor `{}`: {err}", e.name)))?;
        out.push((e.name, t));
    }
    Ok((index.header, out))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn round_trip_both_widths() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::randn(&[3, 4], &mut rng);
        let b = Tensor::randn(&[5], &mut rng);
        let header = serde_json::json!({"note": "x"});
        for dtype in [Dtype::F32, Dtype::F64] {
            let path = dir.path().join(format!("{dtype:?}.ckpt"));
            write_container(&path, &header, &[("a", &a), ("b.c", &b)], dtype).unwrap();
            let (h, tensors) = read_container(&path).unwrap();
            assert_eq!(h, header);
            assert_eq!(tensors[0].0, "a");
            assert_eq!(tensors[1].0, "b.c");
            let expect = |t: &Tensor| if dtype == Dtype::F32 { t.round_f32() } else { t.clone() };
            assert_eq!(tensors[0].1, expect(&a));
            assert_eq!(tensors[1].1, expect(&b));
        }
    }

    #[test]
    fn index_is_plain_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        write_container(&path, &serde_json::json!({}), &[("w", &Tensor::ones(&[2, 2]))], Dtype::F32).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("SPGMCKPT 1 "));
        assert!(text.contains(r#""name":"w","shape":[2,2],"dtype":"f32","offset":0"#));
        assert!(text.contains(r#""format_version":1"#));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"NOPE 1 2\n{}").unwrap();
        assert!(matches!(read_container(&path), Err(Error::Format { .. })));

        write_container(&path, &serde_json::json!({}), &[("w", &Tensor::ones(&[8]))], Dtype::F32).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_container(&path), Err(Error::Format { .. })));
    }
}
