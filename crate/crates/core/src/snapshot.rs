//! Versioned binary serialization of parameter snapshots.
//!
//! Layout (all integers little-endian):
//!   magic "STSNAP01"
//!   u32 entry count
//!   per entry: u16 name length, name bytes (utf-8), u8 group tag
//!              (0 = style_encoder, 1 = other), u32 rank, u32 per dim,
//!              f64 bit patterns for every value.
//!
//! Values round-trip bitwise, so a written file is a faithful replica of the
//! in-memory store.

use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, Snapshot, SnapshotEntry};
use std::path::Path;

const MAGIC: &[u8; 8] = b"STSNAP01";

pub fn snapshot_to_bytes(snap: &Snapshot) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(snap.entries.len() as u32).to_le_bytes());
    for e in &snap.entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(match e.group {
            ParamGroup::StyleEncoder => 0,
            ParamGroup::Other => 1,
        });
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &e.values {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

pub fn snapshot_from_bytes(bytes: &[u8]) -> Result<Snapshot> {
    fn err(detail: impl Into<String>) -> Error {
        Error::Parse {
            what: "snapshot",
            detail: detail.into(),
        }
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(err(format!("truncated at byte {}", *pos)));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 8)? != MAGIC {
        return Err(err("bad magic (not a snapshot file)"));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| err(format!("bad name: {e}")))?;
        let group = match take(&mut pos, 1)?[0] {
            0 => ParamGroup::StyleEncoder,
            1 => ParamGroup::Other,
            g => return Err(err(format!("unknown group tag {g}"))),
        };
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if rank > 8 {
            return Err(err(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(f64::from_bits(u64::from_le_bytes(
                take(&mut pos, 8)?.try_into().unwrap(),
            )));
        }
        entries.push(SnapshotEntry {
            name,
            group,
            shape,
            values,
        });
    }
    if pos != bytes.len() {
        return Err(err(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(Snapshot { entries })
}

pub fn write_snapshot(snap: &Snapshot, path: &Path) -> Result<()> {
    std::fs::write(path, snapshot_to_bytes(snap))?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    snapshot_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{ParamStore, Tensor};

    fn demo_snapshot() -> Snapshot {
        let mut rng = Rng::new(77);
        let mut store = ParamStore::new();
        store
            .register(
                "st.enc.attn.wq0",
                Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng),
                ParamGroup::StyleEncoder,
            )
            .unwrap();
        store
            .register(
                "decoder.out.w",
                Tensor::uniform(&[3, 4, 3, 3], -1.0, 1.0, &mut rng),
                ParamGroup::Other,
            )
            .unwrap();
        store.snapshot()
    }

    #[test]
    fn bytes_roundtrip_bitwise() {
        let snap = demo_snapshot();
        let bytes = snapshot_to_bytes(&snap);
        let back = snapshot_from_bytes(&bytes).unwrap();
        assert_eq!(snap.entries.len(), back.entries.len());
        for (a, b) in snap.entries.iter().zip(&back.entries) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.group, b.group);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let snap = demo_snapshot();
        let bytes = snapshot_to_bytes(&snap);
        assert!(snapshot_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(snapshot_from_bytes(&bad_magic).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(snapshot_from_bytes(&trailing).is_err());
    }
}
