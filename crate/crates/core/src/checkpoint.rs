//! Binary checkpoint container.
//!
//! Layout: 4-byte magic "CKB1"; u32 little-endian entry count; per entry a
//! u16 name length, the UTF-8 name, a u8 rank, rank u32 dims, then the f32
//! little-endian row-major payload; finally a u64 FNV-1a checksum of all
//! preceding bytes. Round-trips are bit-exact.

use std::path::Path;

use crate::error::{CkbError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CKB1";

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Serialize named tensors. Names must be unique; entry order is preserved.
pub fn encode_checkpoint(entries: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    for (i, (name, _)) in entries.iter().enumerate() {
        if entries[..i].iter().any(|(n, _)| n == name) {
            return Err(CkbError::Input(format!("duplicate checkpoint name '{name}'")));
        }
        if name.len() > u16::MAX as usize {
            return Err(CkbError::Input(format!("checkpoint name too long: '{name}'")));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    Ok(buf)
}

pub fn save_checkpoint(entries: &[(String, &Tensor)], path: &Path) -> Result<()> {
    let buf = encode_checkpoint(entries)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CkbError::Io(format!("{}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, buf).map_err(|e| CkbError::Io(format!("{}: {e}", path.display())))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CkbError::CorruptFile {
                path: self.path.to_string(),
                detail: "truncated".into(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode_checkpoint(buf: &[u8], path: &str) -> Result<Vec<(String, Tensor)>> {
    if buf.len() < MAGIC.len() + 4 + 8 {
        return Err(CkbError::CorruptFile {
            path: path.to_string(),
            detail: "shorter than header plus checksum".into(),
        });
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(CkbError::CorruptFile {
            path: path.to_string(),
            detail: format!("checksum mismatch: stored {stored:#x}, computed {actual:#x}"),
        });
    }
    let mut r = Reader {
        buf: body,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(CkbError::CorruptFile {
            path: path.to_string(),
            detail: "bad magic".into(),
        });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| {
            CkbError::CorruptFile {
                path: path.to_string(),
                detail: "non-UTF-8 entry name".into(),
            }
        })?;
        let rank = r.u8()? as usize;
        if rank == 0 || rank > crate::tensor::MAX_RANK {
            return Err(CkbError::CorruptFile {
                path: path.to_string(),
                detail: format!("entry '{name}' has rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if entries.iter().any(|(existing, _)| *existing == name) {
            return Err(CkbError::CorruptFile {
                path: path.to_string(),
                detail: format!("duplicate entry '{name}'"),
            });
        }
        let tensor = Tensor::from_vec(shape, data).map_err(|e| CkbError::CorruptFile {
            path: path.to_string(),
            detail: e.to_string(),
        })?;
        entries.push((name, tensor));
    }
    if r.pos != body.len() {
        return Err(CkbError::CorruptFile {
            path: path.to_string(),
            detail: format!("{} trailing bytes", body.len() - r.pos),
        });
    }
    Ok(entries)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = std::fs::read(path).map_err(|e| CkbError::Io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&buf, &path.display().to_string())
}

/// Find one named tensor in a loaded checkpoint.
pub fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| CkbError::Input(format!("checkpoint entry '{name}' missing")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = SeededRng::new(3);
        let a = Tensor::from_vec(vec![2, 3], rng.uniform_vec(6, 2.0)).unwrap();
        let b = Tensor::from_vec(vec![4], rng.uniform_vec(4, 2.0)).unwrap();
        let entries = vec![("model/a".to_string(), &a), ("model/b".to_string(), &b)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&entries, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "model/a");
        assert_eq!(loaded[0].1.shape(), a.shape());
        assert_eq!(loaded[0].1.data(), a.data());
        assert_eq!(loaded[1].1.data(), b.data());
    }

    #[test]
    fn truncation_is_detected() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let buf = encode_checkpoint(&[("t".to_string(), &t)]).unwrap();
        for cut in [buf.len() - 1, buf.len() - 9, 10, 3] {
            let res = decode_checkpoint(&buf[..cut], "trunc");
            assert!(
                matches!(res, Err(CkbError::CorruptFile { .. })),
                "cut at {cut} not detected"
            );
        }
    }

    #[test]
    fn corruption_is_detected() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut buf = encode_checkpoint(&[("t".to_string(), &t)]).unwrap();
        let mid = buf.len() / 2;
        buf[mid] ^= 0xff;
        assert!(matches!(
            decode_checkpoint(&buf, "corrupt"),
            Err(CkbError::CorruptFile { .. })
        ));
    }

    #[test]
    fn empty_set_is_valid() {
        let buf = encode_checkpoint(&[]).unwrap();
        let loaded = decode_checkpoint(&buf, "empty").unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn duplicate_names_rejected_on_save() {
        let t = Tensor::vector(vec![1.0]);
        let entries = vec![("x".to_string(), &t), ("x".to_string(), &t)];
        assert!(encode_checkpoint(&entries).is_err());
    }
}
