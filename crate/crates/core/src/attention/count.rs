//! Attention pair counting for the sparse-versus-dense complexity ratio.

use serde::{Deserialize, Serialize};

use crate::par;
use crate::voxel::{window_start, ActiveSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCount {
    /// Sum over active voxels of their window neighbor counts.
    pub sparse: u64,
    /// `(N_X · N_Y · N_Z)²`.
    pub dense: u128,
}

impl PairCount {
    pub fn ratio(&self) -> f64 {
        if self.dense == 0 {
            0.0
        } else {
            self.sparse as f64 / self.dense as f64
        }
    }
}

/// Counts window pairs with a 3D summed-area table over the occupancy grid.
pub fn pair_count(set: &ActiveSet, n: u32) -> PairCount {
    let g = set.grid();
    let cells = g.num_cells() as u128;
    let dense = cells * cells;
    if set.is_empty() {
        return PairCount { sparse: 0, dense };
    }
    let [nx, ny, nz] = g.dims.map(|d| d as usize);
    let (sy, sz) = (ny + 1, nz + 1);
    let at = |x: usize, y: usize, z: usize| (x * sy + y) * sz + z;
    let mut sat = vec![0u32; (nx + 1) * sy * sz];
    for c in set.coords() {
        sat[at(c.x as usize + 1, c.y as usize + 1, c.z as usize + 1)] = 1;
    }
    for x in 1..=nx {
        for y in 1..=ny {
            for z in 1..=nz {
                sat[at(x, y, z)] += sat[at(x - 1, y, z)] + sat[at(x, y - 1, z)] + sat[at(x, y, z - 1)]
                    - sat[at(x - 1, y - 1, z)]
                    - sat[at(x - 1, y, z - 1)]
                    - sat[at(x, y - 1, z - 1)]
                    + sat[at(x - 1, y - 1, z - 1)];
            }
        }
    }
    let lo = window_start(n);
    let hi = lo + n as i32 - 1;
    let coords = set.coords();
    let sparse = par::sum_u64(coords.len(), |i| {
        let c = coords[i];
        // Half-open clipped box [a, b) per axis.
        let span = |v: i32, d: usize| ((v + lo).max(0) as usize, ((v + hi + 1).max(0) as usize).min(d));
        let (x0, x1) = span(c.x, nx);
        let (y0, y1) = span(c.y, ny);
        let (z0, z1) = span(c.z, nz);
        let s = sat[at(x1, y1, z1)] as i64 - sat[at(x0, y1, z1)] as i64 - sat[at(x1, y0, z1)] as i64
            - sat[at(x1, y1, z0)] as i64
            + sat[at(x0, y0, z1)] as i64
            + sat[at(x0, y1, z0)] as i64
            + sat[at(x1, y0, z0)] as i64
            - sat[at(x0, y0, z0)] as i64;
        s as u64
    });
    PairCount { sparse, dense }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_has_no_sparse_pairs() {
        let set = ActiveSet::empty(Grid::new(0, 0.04, [4; 3], [0.0; 3]));
        let p = pair_count(&set, 3);
        assert_eq!(p.sparse, 0);
        assert_eq!(p.dense, 64 * 64);
    }

    #[test]
    fn matches_neighbor_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = Grid::new(0, 0.04, [9, 7, 8], [0.0; 3]);
        let coords: Vec<_> = (0..grid.num_cells() as usize)
            .filter(|_| rng.gen_bool(0.2))
            .map(|i| grid.coord_of(i))
            .collect();
        let set = ActiveSet::from_coords(grid, coords).unwrap();
        for n in [1, 2, 3, 4, 10] {
            let expect: usize = set.coords().iter().map(|c| set.window_neighbors(*c, n).unwrap().len()).sum();
            assert_eq!(pair_count(&set, n).sparse, expect as u64);
        }
    }
}
