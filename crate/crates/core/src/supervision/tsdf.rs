use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::{Grid, VoxelCoord};

/// Dense truncated signed distance grid, values normalized to `[-1, 1]` by
/// the truncation distance `3 · voxel_size`.
///
/// `free` marks cells whose untruncated distance reaches the truncation
/// band on the positive side; those are empty space, everything else is
/// occupied for supervision purposes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsdfVolume {
    grid: Grid,
    values: Vec<f64>,
    free: Vec<bool>,
}

pub const TRUNCATION_VOXELS: f64 = 3.0;

impl TsdfVolume {
    /// Cells at exactly `+1` are flagged free.
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        let free = values.iter().map(|&v| v >= 1.0).collect();
        Self::with_free(grid, values, free)
    }

    pub fn with_free(grid: Grid, values: Vec<f64>, free: Vec<bool>) -> Result<Self> {
        let n = grid.num_cells() as usize;
        if values.len() != n || free.len() != n {
            return Err(Error::Structural(format!(
                "grid {:?} needs {n} values, got {} values and {} flags",
                grid.dims,
                values.len(),
                free.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("TSDF value {v} outside [-1, 1]")));
        }
        Ok(Self { grid, values, free })
    }

    /// Uniform `+1` free space.
    pub fn empty(grid: Grid) -> Self {
        let n = grid.num_cells() as usize;
        Self { grid, values: vec![1.0; n], free: vec![true; n] }
    }

    /// Samples a metric signed distance function at every voxel position.
    pub fn from_sdf(grid: Grid, sdf: impl Fn([f64; 3]) -> f64 + Sync) -> Self {
        let trunc = TRUNCATION_VOXELS * grid.voxel_size;
        let n = grid.num_cells() as usize;
        let d: Vec<f64> = crate::par::map_collect(n, |i| sdf(grid.position(grid.coord_of(i))));
        let values = d.iter().map(|&v| (v / trunc).clamp(-1.0, 1.0)).collect();
        let free = d.iter().map(|&v| v >= trunc).collect();
        Self { grid, values, free }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [u32; 3] {
        self.grid.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.grid.voxel_size
    }

    pub fn origin(&self) -> [f64; 3] {
        self.grid.origin
    }

    pub fn truncation(&self) -> f64 {
        TRUNCATION_VOXELS * self.grid.voxel_size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn free(&self) -> &[bool] {
        &self.free
    }

    pub fn get(&self, c: VoxelCoord) -> f64 {
        self.values[self.grid.linear(c)]
    }

    pub fn is_free(&self, c: VoxelCoord) -> bool {
        self.free[self.grid.linear(c)]
    }

    /// Same surface, inside and outside swapped.
    pub fn negated(&self) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| -v).collect(),
            free: vec![false; self.free.len()],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        let g = Grid::new(0, 0.04, [1, 1, 2], [0.0; 3]);
        assert!(TsdfVolume::new(g, vec![0.0, 1.5]).is_err());
        assert!(TsdfVolume::new(g, vec![0.0]).is_err());
    }

    #[test]
    fn sphere_zero_crossing_is_at_radius() {
        let g = Grid::new(0, 0.04, [32; 3], [-0.64; 3]);
        let t = TsdfVolume::from_sdf(g, |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.5);
        // Along +x through the center, interpolate the crossing.
        let (y, z) = (16, 16);
        let mut found = None;
        for x in 0..31 {
            let (a, b) = (t.get(VoxelCoord::new(x, y, z)), t.get(VoxelCoord::new(x + 1, y, z)));
            if a < 0.0 && b >= 0.0 {
                let s = a / (a - b);
                found = Some(g.origin[0] + (x as f64 + s) * g.voxel_size);
            }
        }
        assert!((found.unwrap() - 0.5).abs() < 1e-9);
        assert!(t.is_free(VoxelCoord::new(0, 0, 0)));
        assert!(!t.is_free(VoxelCoord::new(16, 16, 16)));
    }
}
