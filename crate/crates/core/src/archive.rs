//! Single-file container for named real-valued arrays plus a text header.
//!
//! Layout (little endian):
//!
//! ```text
//! magic      8 bytes  "CSPARCH\0"
//! version    u32
//! kind       u32 length + UTF-8
//! header     u32 length + UTF-8 (canonical TOML)
//! count      u32
//! arrays     count x { name: u32 length + UTF-8, ndim: u32, dims: ndim x u64, data: prod(dims) x f64 }
//! checksum   32 bytes SHA-256 over everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CSPARCH\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub header: String,
    pub arrays: Vec<NamedArray>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, header: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            header: header.into(),
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "array {name}: dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        self.arrays.push(NamedArray { name, dims, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_with_version(FORMAT_VERSION)
    }

    pub(crate) fn to_bytes_with_version(&self, version: u32) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&version.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.header);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_str(&mut out, &a.name);
            out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
            for &d in &a.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &a.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + 4 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing archive magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 12 + 32 {
            return Err(corrupt("truncated archive"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let kind = r.string().ok_or_else(|| corrupt("bad kind field"))?;
        let header = r.string().ok_or_else(|| corrupt("bad header field"))?;
        let count = r.u32().ok_or_else(|| corrupt("bad array count"))?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.string().ok_or_else(|| corrupt("bad array name"))?;
            let ndim = r.u32().ok_or_else(|| corrupt("bad array rank"))?;
            let dims = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| corrupt("bad array dims"))?;
            let n: usize = dims.iter().product();
            let data = (0..n)
                .map(|_| r.f64())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| corrupt("array data truncated"))?;
            arrays.push(NamedArray { name, dims, data });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after arrays"));
        }
        Ok(Self { kind, header, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("expected a {kind} archive, found {}", self.kind),
            });
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Archive {
        let mut a = Archive::new("test", "x = 1\n");
        a.push("w", vec![2, 2], vec![1.0, -2.0, 3.5, f64::MIN_POSITIVE]).unwrap();
        a.push("b", vec![0], vec![]).unwrap();
        a
    }

    #[test]
    fn truncated_is_corrupt() {
        let bytes = sample().to_bytes();
        let p = Path::new("mem");
        for cut in [bytes.len() - 1, bytes.len() / 2, 13] {
            match Archive::from_bytes(&bytes[..cut], p) {
                Err(Error::Corrupt { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_names_both() {
        let bytes = sample().to_bytes_with_version(FORMAT_VERSION + 1);
        let err = Archive::from_bytes(&bytes, Path::new("mem")).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Version { found: 2, expected: 1 }));
        assert!(msg.contains('2') && msg.contains('1'));
    }

    #[test]
    fn shape_checked_on_push() {
        let mut a = Archive::new("t", "");
        assert!(a.push("x", vec![3], vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(header in ".{0,40}", values in proptest::collection::vec(-1e9f64..1e9, 0..50)) {
            let mut a = Archive::new("kind", header);
            a.push("v", vec![values.len()], values).unwrap();
            let back = Archive::from_bytes(&a.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, a);
        }
    }
}
