//! File formats: LIPT tensors, 16-bit PGM renderings, and key=value text files.
//!
//! LIPT layout: magic `LIPT`, u32 version = 1, u8 dtype (0 = little-endian f32),
//! u8 ndim, ndim x u32 dims, then the row-major payload. Compute stays in f64;
//! files store f32.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LIPT_MAGIC: &[u8; 4] = b"LIPT";
pub const LIPT_VERSION: u32 = 1;

/// Sequential little-endian reader over a byte buffer with path-tagged
/// corruption errors.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], origin: &'a Path) -> Self {
        ByteReader { buf, pos: 0, origin }
    }

    pub fn corrupt(&self, detail: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.origin.to_path_buf(),
            detail: detail.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt("truncated"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn remaining(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}

/// Encode a tensor into the LIPT byte layout (f32 storage).
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + 4 * t.dims().len() + 4 * t.len());
    out.extend_from_slice(LIPT_MAGIC);
    out.extend_from_slice(&LIPT_VERSION.to_le_bytes());
    out.push(0u8); // dtype: f32 LE
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decode a LIPT byte buffer. `origin` is used for error reporting only.
pub fn decode_tensor(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes, origin);
    let t = decode_tensor_from(&mut r)?;
    if !r.is_empty() {
        return Err(r.corrupt("trailing bytes"));
    }
    Ok(t)
}

/// Decode one LIPT blob from the reader's current position (the blob is
/// self-delimiting, so containers can embed tensors back to back).
pub fn decode_tensor_from(r: &mut ByteReader) -> Result<Tensor> {
    if r.take(4)? != LIPT_MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != LIPT_VERSION {
        return Err(r.corrupt(format!("unsupported version {version}")));
    }
    let dtype = r.u8()?;
    if dtype != 0 {
        return Err(r.corrupt(format!("unsupported dtype {dtype}")));
    }
    let ndim = r.u8()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32()? as usize);
    }
    let n: usize = dims.iter().product();
    let payload = r.take(4 * n)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(dims, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Write a 2D tensor as a 16-bit binary PGM (`P5`, maxval 65535, big-endian
/// samples per the PGM spec). Values are clamped to [0,1] then scaled.
pub fn write_pgm16(path: &Path, image: &Tensor) -> Result<()> {
    let dims = image.dims();
    if dims.len() != 2 {
        return Err(Error::shape(
            "write_pgm16",
            format!("expected 2D image, got {dims:?}"),
        ));
    }
    let (h, w) = (dims[0], dims[1]);
    let mut bytes = Vec::with_capacity(32 + 2 * h * w);
    bytes.extend_from_slice(format!("P5\n{w} {h}\n65535\n").as_bytes());
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parse `key=value` lines; `#` starts a comment, blank lines are skipped.
/// Later duplicates override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Argument(format!(
                "line {}: expected key=value, got {line:?}",
                lineno + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text)
}

pub fn write_kv_file(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (k, v) in pairs {
        writeln!(f, "{k}={v}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Typed lookup helpers over a parsed key=value map.
pub struct KvMap<'a>(pub &'a BTreeMap<String, String>);

impl KvMap<'_> {
    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.0.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Argument(format!("{key}: not a number: {s:?}"))),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.0.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Argument(format!("{key}: not an integer: {s:?}"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.0.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Argument(format!("{key}: not an integer: {s:?}"))),
        }
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.0
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    pub fn get_usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.0.get(key) {
            None => Ok(default.to_vec()),
            Some(s) => s
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Argument(format!("{key}: bad list entry {p:?}")))
                })
                .collect(),
        }
    }
}

/// Read a whole file to bytes with path-tagged errors.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn tensor_roundtrip_is_f32_exact() {
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.1, 2.0f64.sqrt(), 0.0]).unwrap();
        let bytes = encode_tensor(&t);
        let back = decode_tensor(&bytes, &PathBuf::from("mem")).unwrap();
        assert_eq!(back.dims(), t.dims());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*b, (*a as f32) as f64);
        }
    }

    #[test]
    fn truncated_tensor_is_corrupt() {
        let t = Tensor::zeros(&[4, 4]);
        let mut bytes = encode_tensor(&t);
        bytes.truncate(bytes.len() - 3);
        let err = decode_tensor(&bytes, &PathBuf::from("mem")).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }));
    }

    #[test]
    fn kv_parse_and_lookup() {
        let map = parse_kv("a=1\n# comment\n\nviews = 60,90\nname=desk\n").unwrap();
        let kv = KvMap(&map);
        assert_eq!(kv.get_usize("a", 0).unwrap(), 1);
        assert_eq!(kv.get_usize_list("views", &[]).unwrap(), vec![60, 90]);
        assert_eq!(kv.get_str("name", ""), "desk");
        assert_eq!(kv.get_f64("missing", 2.5).unwrap(), 2.5);
        assert!(parse_kv("bogus line").is_err());
    }

    #[test]
    fn pgm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = Tensor::new(vec![2, 2], vec![0.0, 0.5, 1.0, 2.0]).unwrap();
        write_pgm16(&path, &img).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n65535\n"));
        assert_eq!(bytes.len(), b"P5\n2 2\n65535\n".len() + 8);
        // 1.0 and the clamped 2.0 both map to 65535 big-endian.
        assert_eq!(&bytes[bytes.len() - 4..], &[0xff, 0xff, 0xff, 0xff]);
    }
}
