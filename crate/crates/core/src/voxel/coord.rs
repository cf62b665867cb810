use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};

use serde::{Deserialize, Serialize};

/// Integer voxel index. Ordering is lexicographic in `(x, y, z)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelCoord {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl VoxelCoord {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    pub fn offset(self, dx: i32, dy: i32, dz: i32) -> Self {
        Self::new(self.x + dx, self.y + dy, self.z + dz)
    }

    pub fn delta(self, o: VoxelCoord) -> [i32; 3] {
        [self.x - o.x, self.y - o.y, self.z - o.z]
    }

    /// `floor(c / 2)` per axis.
    pub fn parent(self) -> Self {
        Self::new(self.x.div_euclid(2), self.y.div_euclid(2), self.z.div_euclid(2))
    }

    /// Position inside the parent cell as a 3-bit index `x<<2 | y<<1 | z`.
    pub fn child_slot(self) -> usize {
        ((self.x.rem_euclid(2) << 2) | (self.y.rem_euclid(2) << 1) | self.z.rem_euclid(2)) as usize
    }

    pub fn chebyshev(self, o: VoxelCoord) -> i32 {
        (self.x - o.x).abs().max((self.y - o.y).abs()).max((self.z - o.z).abs())
    }

    pub fn to_array(self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[i32; 3]> for VoxelCoord {
    fn from(a: [i32; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// Deterministic hasher for [`VoxelCoord`] keys: a multiply-xorshift mix of
/// the three indices, independent of process state.
#[derive(Default, Clone, Copy)]
pub struct CoordHasher {
    state: u64,
}

impl Hasher for CoordHasher {
    fn finish(&self) -> u64 {
        let mut h = self.state;
        h ^= h >> 33;
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
        h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
        h ^ (h >> 33)
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.state = (self.state ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn write_i32(&mut self, v: i32) {
        self.state = (self.state.rotate_left(21) ^ (v as u32 as u64)).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    }
}

pub type CoordMap<V> = HashMap<VoxelCoord, V, BuildHasherDefault<CoordHasher>>;

pub fn coord_map<V>(capacity: usize) -> CoordMap<V> {
    CoordMap::with_capacity_and_hasher(capacity, Default::default())
}

/// The 27 offsets of a 3×3×3 kernel in lexicographic order.
pub fn kernel3_offsets() -> impl Iterator<Item = [i32; 3]> {
    (-1..=1).flat_map(|dx| (-1..=1).flat_map(move |dy| (-1..=1).map(move |dz| [dx, dy, dz])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::hash::BuildHasher;

    #[test]
    fn parent_floors_negative_coordinates() {
        assert_eq!(VoxelCoord::new(-1, 3, 0).parent(), VoxelCoord::new(-1, 1, 0));
        assert_eq!(VoxelCoord::new(5, 4, 7).child_slot(), 0b101);
    }

    #[test]
    fn hash_is_reproducible() {
        let b = BuildHasherDefault::<CoordHasher>::default();
        let c = VoxelCoord::new(3, -7, 11);
        assert_eq!(b.hash_one(c), b.hash_one(c));
        assert_ne!(b.hash_one(c), b.hash_one(VoxelCoord::new(11, -7, 3)));
    }

    #[test]
    fn kernel_offsets_are_ordered() {
        let v: Vec<_> = kernel3_offsets().collect();
        assert_eq!(v.len(), 27);
        assert_eq!(v[0], [-1, -1, -1]);
        assert_eq!(v[13], [0, 0, 0]);
        assert!(v.windows(2).all(|w| w[0] < w[1]));
    }
}
