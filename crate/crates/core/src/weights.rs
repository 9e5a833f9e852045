//! PCW1 weight files.
//!
//! Layout (all integers `u32` little-endian): magic `PCW1`, tensor count,
//! then per tensor its name length, UTF-8 name, rank, dims, and the raw
//! little-endian `f32` data.

use std::path::Path;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PCW1";

#[derive(Debug, thiserror::Error)]
pub enum WeightsError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a PCW1 file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("tensor name at byte {offset} is not UTF-8")]
    BadName { offset: usize },
    #[error("{extra} trailing bytes after the last tensor")]
    Trailing { extra: usize },
    #[error("tensor {name:?}: {detail}")]
    Mismatch { name: String, detail: String },
}

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(&mut out, tensors.len());
    for (name, t) in tensors {
        put(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put(&mut out, t.rank());
        for &d in t.shape() {
            put(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(WeightsError::Truncated { offset: self.pos, needed: n - (self.bytes.len() - self.pos) });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, WeightsError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors, WeightsError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(WeightsError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        let offset = r.pos;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| WeightsError::BadName { offset })?.to_owned();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| WeightsError::Mismatch { name: name.clone(), detail: "shape overflows".into() })?;
        let raw = r.take(numel.saturating_mul(4))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data).expect("numel matches shape");
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::Trailing { extra: bytes.len() - r.pos });
    }
    Ok(out)
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<(), WeightsError> {
    crate::io::write_atomic(path, &encode(tensors))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NamedTensors, WeightsError> {
    decode(&std::fs::read(path)?)
}

/// Copies `entries` into `targets` by name, checking that the name sets and
/// shapes agree exactly. Gradient flags on the targets are preserved.
pub fn assign(targets: Vec<(String, &mut Tensor<f32>)>, entries: NamedTensors) -> Result<(), WeightsError> {
    if targets.len() != entries.len() {
        return Err(WeightsError::Mismatch {
            name: String::new(),
            detail: format!("file holds {} tensors, model has {}", entries.len(), targets.len()),
        });
    }
    let mut by_name: std::collections::HashMap<String, Tensor<f32>> = entries.into_iter().collect();
    for (name, target) in targets {
        let src = by_name
            .remove(&name)
            .ok_or_else(|| WeightsError::Mismatch { name: name.clone(), detail: "missing from file".into() })?;
        if src.shape() != target.shape() {
            return Err(WeightsError::Mismatch {
                name,
                detail: format!("shape {:?} in file, {:?} in model", src.shape(), target.shape()),
            });
        }
        target.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedTensors {
        vec![
            ("a.weight".into(), Tensor::new([2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-8, f32::MAX, -2.25]).unwrap()),
            ("b".into(), Tensor::scalar(7.0)),
            ("ünï".into(), Tensor::zeros([0])),
        ]
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = sample();
        let bytes = encode(s.iter().map(|(n, t)| (n.as_str(), t)));
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), s.len());
        for ((n1, t1), (n2, t2)) in s.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
        assert_eq!(encode(back.iter().map(|(n, t)| (n.as_str(), t))), bytes);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new([1], vec![1.0f32]).unwrap();
        let bytes = encode([("w", &t)]);
        let expect: Vec<u8> = [&b"PCW1"[..], &1u32.to_le_bytes(), &1u32.to_le_bytes(), b"w", &1u32.to_le_bytes(), &1u32.to_le_bytes(), &1.0f32.to_le_bytes()].concat();
        assert_eq!(bytes, expect);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let s = sample();
        let bytes = encode(s.iter().map(|(n, t)| (n.as_str(), t)));
        assert!(matches!(decode(b"PCW2\0\0\0\0"), Err(WeightsError::BadMagic(_))));
        match decode(&bytes[..bytes.len() - 3]) {
            Err(WeightsError::Truncated { offset, .. }) => assert!(offset > 8),
            other => panic!("{other:?}"),
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(WeightsError::Trailing { extra: 1 })));
    }

    #[test]
    fn assign_checks_names_and_shapes() {
        let mut a = Tensor::<f32>::zeros([2, 3]);
        let mut b = Tensor::<f32>::zeros([]);
        let mut c = Tensor::<f32>::zeros([0]);
        assign(vec![("a.weight".into(), &mut a), ("b".into(), &mut b), ("ünï".into(), &mut c)], sample()).unwrap();
        assert_eq!(b.data(), &[7.0]);
        let mut wrong = Tensor::<f32>::zeros([3, 2]);
        let mut b2 = Tensor::<f32>::zeros([]);
        let mut c2 = Tensor::<f32>::zeros([0]);
        let err = assign(vec![("a.weight".into(), &mut wrong), ("b".into(), &mut b2), ("ünï".into(), &mut c2)], sample());
        assert!(matches!(err, Err(WeightsError::Mismatch { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pcw");
        let s = sample();
        save(&path, s.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        assert_eq!(load(&path).unwrap().len(), 3);
    }
}
