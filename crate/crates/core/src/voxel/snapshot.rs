//! `SVOL` snapshot: magic, u32 version, u32 level, f32 voxel_size,
//! u32[3] dims, u32 channels, u64 count, then `count` records of
//! (i32[3] coord, f32[channels] feature), all little-endian.
//!
//! The origin is not part of the format and reads back as zero.

use std::io::{Read, Write};
use std::sync::Arc;

use super::{ActiveSet, Grid, SparseVolume, VoxelCoord};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SVOL";
const VERSION: u32 = 1;

pub fn write_snapshot<W: Write>(mut w: W, vol: &SparseVolume) -> Result<()> {
    let g = vol.grid();
    let mut buf = Vec::with_capacity(40 + vol.len() * (12 + 4 * vol.channels()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(g.level as u32).to_le_bytes());
    buf.extend_from_slice(&(g.voxel_size as f32).to_le_bytes());
    for d in g.dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.extend_from_slice(&(vol.channels() as u32).to_le_bytes());
    buf.extend_from_slice(&(vol.len() as u64).to_le_bytes());
    for (i, c) in vol.coords().iter().enumerate() {
        for v in c.to_array() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for f in vol.row(i) {
            buf.extend_from_slice(&(*f as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated SVOL snapshot: {e}")))?;
    Ok(b)
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<SparseVolume> {
    if &take::<4, _>(&mut r)? != MAGIC {
        return Err(Error::Format("bad SVOL magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported SVOL version {version}")));
    }
    let level = u32::from_le_bytes(take(&mut r)?);
    let voxel_size = f32::from_le_bytes(take(&mut r)?) as f64;
    let dims = [
        u32::from_le_bytes(take(&mut r)?),
        u32::from_le_bytes(take(&mut r)?),
        u32::from_le_bytes(take(&mut r)?),
    ];
    let channels = u32::from_le_bytes(take(&mut r)?) as usize;
    let count = u64::from_le_bytes(take(&mut r)?) as usize;
    let grid = Grid::new(level as u8, voxel_size, dims, [0.0; 3]);
    let mut coords = Vec::with_capacity(count.min(1 << 24));
    let mut features = Vec::with_capacity(count.min(1 << 24) * channels);
    for _ in 0..count {
        let c = VoxelCoord::new(
            i32::from_le_bytes(take(&mut r)?),
            i32::from_le_bytes(take(&mut r)?),
            i32::from_le_bytes(take(&mut r)?),
        );
        coords.push(c);
        for _ in 0..channels {
            features.push(f32::from_le_bytes(take(&mut r)?) as f64);
        }
    }
    let set = ActiveSet::from_coords(grid, coords.clone())?;
    if set.len() != count {
        return Err(Error::Format("duplicate coordinates in SVOL snapshot".into()));
    }
    // Records may arrive in any order; place them by coordinate.
    let mut sorted = vec![0.0; features.len()];
    for (i, c) in coords.iter().enumerate() {
        let r = set.find(*c).expect("present");
        sorted[r * channels..(r + 1) * channels].copy_from_slice(&features[i * channels..(i + 1) * channels]);
    }
    SparseVolume::new(Arc::new(set), channels, sorted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_little_endian() {
        let grid = Grid::new(2, 0.16, [3, 4, 5], [0.0; 3]);
        let v = SparseVolume::from_entries(grid, 2, vec![(VoxelCoord::new(1, 2, 3), vec![0.5, -1.0])]).unwrap();
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &v).unwrap();
        assert_eq!(&buf[0..4], b"SVOL");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(buf[32..40].try_into().unwrap()), 1);
        assert_eq!(buf.len(), 40 + 12 + 8);
    }

    proptest! {
        #[test]
        fn round_trip(entries in proptest::collection::btree_map((0i32..6, 0i32..6, 0i32..6), (-10f32..10.0, -10f32..10.0), 0..30)) {
            let grid = Grid::new(1, 0.08, [6, 6, 6], [0.0; 3]);
            let e = entries.iter().map(|(c, f)| (VoxelCoord::new(c.0, c.1, c.2), vec![f.0 as f64, f.1 as f64])).collect();
            let v = SparseVolume::from_entries(grid, 2, e).unwrap();
            let mut buf = Vec::new();
            write_snapshot(&mut buf, &v).unwrap();
            let back = read_snapshot(&buf[..]).unwrap();
            prop_assert_eq!(back.coords(), v.coords());
            prop_assert_eq!(back.features(), v.features());
            prop_assert_eq!(back.grid().dims, [6, 6, 6]);
        }
    }
}
