//! Tensor weights file: the bit-exact, language-neutral container used to
//! share frozen backbones between runs.
//!
//! Layout (all little-endian):
//!   magic "SHRL" | version u16 | entry count u32
//!   per entry: name length u16 | UTF-8 name | rank u8
//!              extents u32 x rank | payload f32 x numel (row-major)
//!
//! Training math runs in f64; payloads are converted to f32 on save and
//! widened back on load.

use std::io::{Read, Write};
use std::path::Path;

use crate::autograph::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SHRL";
pub const VERSION: u16 = 1;

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Weights("too many entries".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        let len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::Weights(format!("name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let rank = u8::try_from(tensor.shape().len())
            .map_err(|_| Error::Weights("rank exceeds u8".into()))?;
        buf.push(rank);
        for &e in tensor.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Weights("extent exceeds u32".into()))?;
            buf.extend_from_slice(&e.to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse(&bytes)
}

pub fn parse(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Weights(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Weights(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Weights("entry name is not UTF-8".into()))?;
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let v = f32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
            data.push(f64::from(v));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Weights(format!(
            "{} trailing bytes after last entry",
            bytes.len() - cur.pos
        )));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Weights(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_stable() {
        let dir = std::env::temp_dir().join(format!("sherl-wtest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.shrl");
        let p2 = dir.join("b.shrl");
        let entries = vec![
            (
                "layer.0.w".to_string(),
                Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, 3.5, 1e-3, -7.0]).unwrap(),
            ),
            ("alpha".to_string(), Tensor::scalar(0.0)),
        ];
        save(&p1, &entries).unwrap();
        let loaded = load(&p1).unwrap();
        save(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded[0].0, "layer.0.w");
        assert_eq!(loaded[0].1.shape(), &[2, 3]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(parse(b"NOPE").is_err());
        let mut good = Vec::new();
        good.extend_from_slice(MAGIC);
        good.extend_from_slice(&VERSION.to_le_bytes());
        good.extend_from_slice(&1u32.to_le_bytes());
        assert!(parse(&good).is_err()); // promised one entry, delivered none
    }
}
