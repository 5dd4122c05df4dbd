//! `NRML1` checkpoint files.
//!
//! Layout: the five magic bytes, then one record per tensor until end of
//! file. A record is `name_len: u32`, the UTF-8 name, `rank: u32`, `rank`
//! dimensions as `u64`, then the values as `f64`; all little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"NRML1";

/// Serializes `params` in entry order.
pub fn encode(params: &ParamTree) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for e in params.entries() {
        let name = e.path();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated { record: self.record })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses every record of a checkpoint image.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
        record: 0,
    };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| CheckpointError::BadName)?.to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| CheckpointError::Truncated { record: r.record })?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or(CheckpointError::Truncated { record: r.record })?;
        let raw = r.take(numel)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(shape, data).expect("numel matches shape")));
        r.record += 1;
    }
    Ok(out)
}

/// Fills a copy of `template` from stored records, requiring an exact match
/// of names and shapes.
pub fn restore(records: Vec<(String, Tensor)>, template: &ParamTree) -> Result<ParamTree, CheckpointError> {
    let mut out = template.clone();
    let mut seen = vec![false; template.len()];
    for (name, tensor) in records {
        let pos = template.entries().iter().position(|e| e.path() == name);
        let Some(i) = pos else {
            return Err(CheckpointError::Unexpected(name));
        };
        let expected = template.entries()[i].tensor.shape();
        if tensor.shape() != expected {
            return Err(CheckpointError::ShapeMismatch {
                name,
                stored: tensor.shape().to_vec(),
                expected: expected.to_vec(),
            });
        }
        out.entries_mut()[i].tensor = tensor;
        seen[i] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(CheckpointError::Missing(template.entries()[i].path()));
    }
    Ok(out)
}

/// Writes `params` to `path` via a temporary file, so a crash never leaves
/// a half-written checkpoint under the final name.
pub fn save_checkpoint(path: &Path, params: &ParamTree) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(params))?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|kind| Error::Checkpoint {
        path: path.to_path_buf(),
        kind,
    })
}

/// Loads `path` into the layout of `template`.
pub fn load_checkpoint(path: &Path, template: &ParamTree) -> Result<ParamTree> {
    restore(read_checkpoint(path)?, template).map_err(|kind| Error::Checkpoint {
        path: path.to_path_buf(),
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn tree() -> ParamTree {
        let mut t = ParamTree::new();
        t.insert(0, ParamKind::ConvWeight, Tensor::from_fn([2, 1, 1, 1], |i| i as f64 - 0.1))
            .unwrap();
        t.insert(0, ParamKind::ConvBias, Tensor::new([2], vec![f64::MIN_POSITIVE, -0.0]).unwrap())
            .unwrap();
        t
    }

    #[test]
    fn layout_is_little_endian_records() {
        let bytes = encode(&tree());
        assert_eq!(&bytes[..5], b"NRML1");
        assert_eq!(&bytes[5..9], &13u32.to_le_bytes());
        assert_eq!(&bytes[9..22], b"0/conv_weight");
        assert_eq!(&bytes[22..26], &4u32.to_le_bytes());
        assert_eq!(&bytes[26..34], &2u64.to_le_bytes());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = tree();
        let back = restore(decode(&encode(&t)).unwrap(), &t).unwrap();
        for (a, b) in t.entries().iter().zip(back.entries()) {
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = encode(&tree());
        let boundary = 5 + 4 + 13 + 4 + 4 * 8 + 2 * 8;
        assert_eq!(decode(&bytes[..5]), Ok(Vec::new()));
        assert_eq!(decode(&bytes[..boundary]).unwrap().len(), 1);
        for cut in (6..bytes.len()).filter(|&c| c != boundary) {
            assert!(matches!(decode(&bytes[..cut]), Err(CheckpointError::Truncated { .. })), "cut {cut}");
        }
        assert_eq!(decode(b"NRML2"), Err(CheckpointError::BadMagic));
        assert_eq!(decode(b"NR"), Err(CheckpointError::BadMagic));
    }

    #[test]
    fn layout_mismatches_are_structured() {
        let t = tree();
        let mut other = ParamTree::new();
        other.insert(0, ParamKind::ConvWeight, Tensor::zeros([3, 1, 1, 1])).unwrap();
        other.insert(0, ParamKind::ConvBias, Tensor::zeros([2])).unwrap();
        let recs = decode(&encode(&t)).unwrap();
        assert!(matches!(restore(recs.clone(), &other), Err(CheckpointError::ShapeMismatch { .. })));
        let mut bigger = t.clone();
        bigger.insert(1, ParamKind::FcBias, Tensor::zeros([1])).unwrap();
        assert_eq!(restore(recs.clone(), &bigger), Err(CheckpointError::Missing("1/fc_bias".into())));
        let mut smaller = ParamTree::new();
        smaller.insert(0, ParamKind::ConvBias, Tensor::zeros([2])).unwrap();
        assert!(matches!(restore(recs, &smaller), Err(CheckpointError::Unexpected(_))));
    }
}
