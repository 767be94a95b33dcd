//! Binary activation shards.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ACTS" | u32 version | u32 len + UTF-8 model_id | u32 layer_index | u32 d_model
//! | u64 n_tokens | u8 dtype_code (0 = f32) | n_tokens*d_model f32 row-major
//! | u64 meta_len | meta_len bytes of UTF-8 JSON (empty when no metadata)
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"ACTS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u32,
    pub model_id: String,
    pub layer_index: u32,
    pub d_model: u32,
    pub n_tokens: u64,
    pub dtype: DType,
}

impl ShardHeader {
    pub fn new(model_id: impl Into<String>, layer_index: u32, d_model: usize, n_tokens: usize) -> Self {
        Self {
            version: FORMAT_VERSION,
            model_id: model_id.into(),
            layer_index,
            d_model: d_model as u32,
            n_tokens: n_tokens as u64,
            dtype: DType::F32,
        }
    }
}

/// Per-token provenance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenMeta {
    pub sample_id: String,
    pub position: i64,
    pub is_final_token: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationShard {
    pub header: ShardHeader,
    pub data: Matrix<f32>,
    pub token_meta: Option<Vec<TokenMeta>>,
}

impl ActivationShard {
    pub fn new(header: ShardHeader, data: Matrix<f32>, token_meta: Option<Vec<TokenMeta>>) -> Result<Self> {
        validate(&header, &data, token_meta.as_deref())?;
        Ok(Self {
            header,
            data,
            token_meta,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.data.rows()
    }

    pub fn d_model(&self) -> usize {
        self.data.cols()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        write_shard(path, &self.header, &self.data, self.token_meta.as_deref())
    }
}

fn validate(header: &ShardHeader, data: &Matrix<f32>, meta: Option<&[TokenMeta]>) -> Result<()> {
    if header.n_tokens == 0 || header.d_model == 0 {
        return Err(Error::InvalidShape("shards need n_tokens >= 1 and d_model >= 1".into()));
    }
    if data.rows() as u64 != header.n_tokens || data.cols() != header.d_model as usize {
        return Err(Error::InvalidShape(format!(
            "header declares {}x{}, data is {}x{}",
            header.n_tokens,
            header.d_model,
            data.rows(),
            data.cols()
        )));
    }
    if let Some(meta) = meta {
        if meta.len() != data.rows() {
            return Err(Error::InvalidShape(format!(
                "{} metadata records for {} tokens",
                meta.len(),
                data.rows()
            )));
        }
    }
    Ok(())
}

/// Writes a shard to `path` and returns the path.
pub fn write_shard(
    path: impl AsRef<Path>,
    header: &ShardHeader,
    data: &Matrix<f32>,
    meta: Option<&[TokenMeta]>,
) -> Result<PathBuf> {
    let path = path.as_ref();
    validate(header, data, meta)?;
    let bytes = encode(header, data, meta)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn encode(header: &ShardHeader, data: &Matrix<f32>, meta: Option<&[TokenMeta]>) -> Result<Vec<u8>> {
    let meta_bytes = match meta {
        Some(m) => serde_json::to_vec(m)?,
        None => Vec::new(),
    };
    let id = header.model_id.as_bytes();
    let mut out = Vec::with_capacity(37 + id.len() + data.as_slice().len() * 4 + meta_bytes.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&header.version.to_le_bytes());
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&header.layer_index.to_le_bytes());
    out.extend_from_slice(&header.d_model.to_le_bytes());
    out.extend_from_slice(&header.n_tokens.to_le_bytes());
    out.push(header.dtype as u8);
    for x in data.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.path, format!("truncated {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Reads and validates a shard.
pub fn read_shard(path: impl AsRef<Path>) -> Result<ActivationShard> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf, path)
}

fn decode(buf: &[u8], path: &Path) -> Result<ActivationShard> {
    let mut c = Cursor { buf, pos: 0, path };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let id_len = c.u32("model_id length")? as usize;
    let model_id = std::str::from_utf8(c.take(id_len, "model_id")?)
        .map_err(|_| Error::format(path, "model_id is not UTF-8"))?
        .to_owned();
    let layer_index = c.u32("layer_index")?;
    let d_model = c.u32("d_model")?;
    let n_tokens = c.u64("n_tokens")?;
    let dtype_code = c.take(1, "dtype")?[0];
    let dtype =
        DType::from_code(dtype_code).ok_or_else(|| Error::format(path, format!("unknown dtype code {dtype_code}")))?;
    if n_tokens == 0 || d_model == 0 {
        return Err(Error::format(path, "empty shard"));
    }
    let count = (n_tokens as usize)
        .checked_mul(d_model as usize)
        .ok_or_else(|| Error::format(path, "shape overflow"))?;
    let payload = c.take(
        count
            .checked_mul(4)
            .ok_or_else(|| Error::format(path, "shape overflow"))?,
        "payload",
    )?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let meta_len = c.u64("metadata length")? as usize;
    let meta_bytes = c.take(meta_len, "metadata")?;
    if c.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after metadata"));
    }
    let token_meta = if meta_len == 0 {
        None
    } else {
        let m: Vec<TokenMeta> =
            serde_json::from_slice(meta_bytes).map_err(|e| Error::format(path, format!("metadata: {e}")))?;
        Some(m)
    };
    let header = ShardHeader {
        version,
        model_id,
        layer_index,
        d_model,
        n_tokens,
        dtype,
    };
    let data = Matrix::from_vec(n_tokens as usize, d_model as usize, values)?;
    ActivationShard::new(header, data, token_meta).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta(n: usize) -> Vec<TokenMeta> {
        (0..n)
            .map(|i| TokenMeta {
                sample_id: format!("s{}", i / 2),
                position: (i % 2) as i64,
                is_final_token: i % 2 == 1,
            })
            .collect()
    }

    #[test]
    fn single_zero_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.acts");
        let h = ShardHeader::new("base", 0, 1, 1);
        write_shard(&p, &h, &Matrix::zeros(1, 1), None).unwrap();
        let len = std::fs::metadata(&p).unwrap().len() as usize;
        // magic, version, id length, layer, d_model, n_tokens, dtype; payload; meta length
        assert_eq!(len, (4 + 4 + 4 + 4 + 4 + 8 + 1) + "base".len() + 4 + 8);
        let s = read_shard(&p).unwrap();
        assert_eq!(s.header, h);
        assert_eq!(s.data.as_slice(), &[0.0]);
        assert!(s.token_meta.is_none());
    }

    #[test]
    fn bytes_are_stable_across_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.acts");
        let q = dir.path().join("b.acts");
        let data = Matrix::from_vec(3, 2, vec![1.5, -0.0, f32::MIN_POSITIVE, 7.25, -3.0, 1e30]).unwrap();
        let h = ShardHeader::new("tuned", 12, 2, 3);
        write_shard(&p, &h, &data, Some(&meta(3))).unwrap();
        let s = read_shard(&p).unwrap();
        s.write(&q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        assert_eq!(s.token_meta.unwrap(), meta(3));
    }

    #[test]
    fn header_row_mismatch_is_invalid_shape() {
        let h = ShardHeader::new("m", 0, 2, 2);
        let err = write_shard("/nonexistent/x", &h, &Matrix::zeros(3, 2), None).unwrap_err();
        assert!(matches!(err, Error::InvalidShape(_)));
        let err = ActivationShard::new(ShardHeader::new("m", 0, 2, 3), Matrix::zeros(3, 2), Some(meta(2))).unwrap_err();
        assert!(matches!(err, Error::InvalidShape(_)));
    }

    #[test]
    fn unwritable_destination_is_io_error() {
        let h = ShardHeader::new("m", 0, 1, 1);
        let err = write_shard("/nonexistent-dir/x.acts", &h, &Matrix::zeros(1, 1), None).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.acts");
        write_shard(&p, &ShardHeader::new("m", 0, 2, 1), &Matrix::zeros(1, 2), None).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_shard(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn truncation_by_one_byte_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        for with_meta in [false, true] {
            let p = dir.path().join("t.acts");
            let m = meta(3);
            write_shard(
                &p,
                &ShardHeader::new("m", 0, 2, 3),
                &Matrix::from_vec(3, 2, vec![1.0; 6]).unwrap(),
                with_meta.then_some(&m[..]),
            )
            .unwrap();
            let bytes = std::fs::read(&p).unwrap();
            std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
            assert!(matches!(read_shard(&p), Err(Error::Format { .. })));
        }
    }

    #[test]
    fn short_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.acts");
        let h = ShardHeader::new("m", 0, 4, 2);
        let bytes = encode(&h, &Matrix::zeros(2, 4), None).unwrap();
        // Drop the last payload float and the meta length.
        let cut = bytes.len() - 8 - 4;
        std::fs::write(&p, &bytes[..cut]).unwrap();
        assert!(matches!(read_shard(&p), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(rows in 1usize..6, cols in 1usize..6,
                                   bits in proptest::collection::vec(any::<u32>(), 36),
                                   with_meta: bool) {
            let data: Vec<f32> = bits.iter().take(rows * cols).map(|&b| f32::from_bits(b)).collect();
            let data = Matrix::from_vec(rows, cols, data).unwrap();
            let h = ShardHeader::new("model/é", 3, cols, rows);
            let m = meta(rows);
            let bytes = encode(&h, &data, with_meta.then_some(&m[..])).unwrap();
            let s = decode(&bytes, Path::new("mem")).unwrap();
            let back: Vec<u32> = s.data.as_slice().iter().map(|x| x.to_bits()).collect();
            let orig: Vec<u32> = data.as_slice().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(back, orig);
            prop_assert_eq!(&s.header, &h);
            prop_assert_eq!(encode(&s.header, &s.data, s.token_meta.as_deref()).unwrap(), bytes);
        }
    }
}
