//! File formats.
//!
//! HSIC cube (all integers little-endian u32, payload little-endian f32):
//!
//! ```text
//! "HSIC" | version = 1 | H | W | C | C planes of H x W, row-major
//! ```
//!
//! DPRM parameter container:
//!
//! ```text
//! "DPRM" | version = 1 | count
//! per entry: name_len | name (UTF-8) | rank | extents... | f32 payload
//! ```
//!
//! Entries are written in name order. In memory everything is `f64`; values
//! are rounded to `f32` on write, so a read-write cycle of a file is
//! byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::tensor::{ParamStore, Tensor};
use crate::{Error, Result};

pub const HSIC_MAGIC: &[u8; 4] = b"HSIC";
pub const DPRM_MAGIC: &[u8; 4] = b"DPRM";
pub const FORMAT_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32(out: &mut Vec<u8>, v: f64) -> Result<()> {
    let f = v as f32;
    if !f.is_finite() {
        return Err(Error::Format(format!("{v} is not representable as a finite f32")));
    }
    out.extend_from_slice(&f.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Format(format!("{what} too large")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32("version")?;
        if version as u32 != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// Serialises an `[H, W, C]` or `[H, W]` tensor.
pub fn encode_hsic(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = match *t.shape() {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return Err(Error::shape(format!("HSIC holds [H, W, C] tensors, got {:?}", t.shape()))),
    };
    let mut out = Vec::with_capacity(20 + 4 * t.len());
    out.extend_from_slice(HSIC_MAGIC);
    for v in [FORMAT_VERSION as usize, h, w, c] {
        put_u32(&mut out, v)?;
    }
    let d = t.data();
    for n in 0..c {
        for px in 0..h * w {
            put_f32(&mut out, d[px * c + n])?;
        }
    }
    Ok(out)
}

/// Parses an HSIC buffer into an `[H, W, C]` tensor.
pub fn decode_hsic(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(HSIC_MAGIC)?;
    let (h, w, c) = (r.u32("height")?, r.u32("width")?, r.u32("channels")?);
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Format("HSIC extents overflow".into()))?;
    let planes = r.f32s(n, "payload")?;
    r.finish()?;
    let mut t = Tensor::zeros(&[h, w, c]);
    let d = t.data_mut();
    for ch in 0..c {
        for px in 0..h * w {
            d[px * c + ch] = planes[ch * h * w + px];
        }
    }
    Ok(t)
}

pub fn write_hsic(t: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &encode_hsic(t)?)
}

pub fn read_hsic(path: &Path) -> Result<Tensor> {
    decode_hsic(&fs::read(path)?)
}

pub fn encode_params(p: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DPRM_MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize)?;
    put_u32(&mut out, p.len())?;
    for (name, t) in p.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &e in t.shape() {
            put_u32(&mut out, e)?;
        }
        for &v in t.data() {
            put_f32(&mut out, v)?;
        }
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(DPRM_MAGIC)?;
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        if store.contains(&name) {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("extent")).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("extents of `{name}` overflow")))?;
        let data = r.f32s(n, "parameter payload")?;
        store.insert(name, Tensor::new(shape, data)?);
    }
    r.finish()?;
    Ok(store)
}

pub fn write_params(p: &ParamStore, path: &Path) -> Result<()> {
    write_atomic(path, &encode_params(p)?)
}

pub fn read_params(path: &Path) -> Result<ParamStore> {
    decode_params(&fs::read(path)?)
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// a repeated key overrides the earlier one.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Format(format!("config line {}: empty key", i + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_config(&fs::read_to_string(path)?)
}

/// One CSV line per row with a header.
pub fn csv<R: AsRef<[String]>>(header: &[&str], rows: &[R]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.as_ref().join(","));
        out.push('\n');
    }
    out
}
