//! Multi-scale global context: average-pool the volume into `s³` cells for
//! each scale `s`, map every pooled vector, fuse the three codes covering a
//! voxel back to `C` channels and add them onto the voxel.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grad::{NodeId, ParamStore, Session, Tensor};
use crate::nn::{init_linear, linear, linear_eval};
use crate::voxel::{ActiveSet, SparseVolume};

pub const CONTEXT_SCALES: [u32; 3] = [1, 2, 3];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalContextParams {
    pub name: String,
    pub model_dim: usize,
}

impl GlobalContextParams {
    pub fn new(name: impl Into<String>, model_dim: usize) -> Self {
        Self { name: name.into(), model_dim }
    }

    fn scale_key(&self, s: u32) -> String {
        format!("{}.s{s}", self.name)
    }

    fn fuse_key(&self) -> String {
        format!("{}.fuse", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let c = self.model_dim;
        for s in CONTEXT_SCALES {
            init_linear(store, &self.scale_key(s), c, c, true, rng);
        }
        init_linear(store, &self.fuse_key(), 3 * c, c, true, rng);
    }
}

/// Cell of each active voxel at scale `s`: per axis `floor(coord · s / dims)`,
/// flattened x-major.
pub fn context_cells(set: &ActiveSet, s: u32) -> Vec<u32> {
    let dims = set.grid().dims;
    set.coords()
        .iter()
        .map(|c| {
            let cell = |v: i32, d: u32| (v as u64 * s as u64 / d as u64) as u32;
            (cell(c.x, dims[0]) * s + cell(c.y, dims[1])) * s + cell(c.z, dims[2])
        })
        .collect()
}

fn inverse_counts(cells: &[u32], n_cells: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_cells];
    for &c in cells {
        counts[c as usize] += 1;
    }
    counts.iter().map(|&k| if k == 0 { 0.0 } else { 1.0 / k as f64 }).collect()
}

pub fn global_context_tape(s: &mut Session, x: NodeId, set: &ActiveSet, params: &GlobalContextParams) -> NodeId {
    let mut codes = Vec::with_capacity(3);
    for scale in CONTEXT_SCALES {
        let cells: Arc<[u32]> = context_cells(set, scale).into();
        let n_cells = scale.pow(3) as usize;
        let summed = s.tape.segment_sum(x, Arc::clone(&cells), n_cells);
        let pooled = s.tape.scale_rows(summed, inverse_counts(&cells, n_cells).into());
        let mapped = linear(s, pooled, &params.scale_key(scale));
        codes.push(s.tape.gather(mapped, cells));
    }
    let cat = s.tape.concat_cols(&codes);
    let fused = linear(s, cat, &params.fuse_key());
    s.tape.add(x, fused)
}

/// Per-cell means at scale `s`, `s³ × C`; empty cells are zero.
pub fn pooled_means(vol: &SparseVolume, s: u32) -> Tensor {
    let cells = context_cells(vol.set(), s);
    let n_cells = s.pow(3) as usize;
    let inv = inverse_counts(&cells, n_cells);
    let c = vol.channels();
    let mut out = Tensor::zeros(n_cells, c);
    for (i, &cell) in cells.iter().enumerate() {
        for (o, v) in out.row_mut(cell as usize).iter_mut().zip(vol.row(i)) {
            *o += v;
        }
    }
    for (cell, w) in inv.iter().enumerate() {
        out.row_mut(cell).iter_mut().for_each(|v| *v *= w);
    }
    out
}

pub fn global_context(vol: &SparseVolume, params: &GlobalContextParams, store: &ParamStore) -> Result<SparseVolume> {
    let c = vol.channels();
    if c != params.model_dim {
        return Err(crate::Error::Structural(format!("volume has {c} channels, context expects {}", params.model_dim)));
    }
    let n = vol.len();
    let mut cat = Tensor::zeros(n, 3 * c);
    for (k, scale) in CONTEXT_SCALES.into_iter().enumerate() {
        let mapped = linear_eval(store, &pooled_means(vol, scale), &params.scale_key(scale));
        for (i, &cell) in context_cells(vol.set(), scale).iter().enumerate() {
            cat.row_mut(i)[k * c..(k + 1) * c].copy_from_slice(mapped.row(cell as usize));
        }
    }
    let mut out = vol.to_tensor();
    out.add_assign(&linear_eval(store, &cat, &params.fuse_key()));
    SparseVolume::new(Arc::clone(vol.set()), c, out.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{Precision, Tape};
    use crate::voxel::{Grid, VoxelCoord};
    use rand::{Rng, SeedableRng};

    #[test]
    fn scale_one_pools_to_the_mean() {
        let grid = Grid::new(2, 0.16, [5, 5, 5], [0.0; 3]);
        let u = vec![0.25, -2.0, 1.5];
        let entries = [[0, 0, 0], [4, 4, 4], [2, 1, 3]]
            .iter()
            .map(|c| (VoxelCoord::from(*c), u.clone()))
            .collect();
        let v = SparseVolume::from_entries(grid, 3, entries).unwrap();
        assert_eq!(pooled_means(&v, 1).data(), &u[..]);
    }

    #[test]
    fn cells_partition_dims() {
        let grid = Grid::new(2, 0.16, [5, 5, 5], [0.0; 3]);
        let set = ActiveSet::full(grid);
        for s in CONTEXT_SCALES {
            let cells = context_cells(&set, s);
            assert!(cells.iter().all(|&c| c < s.pow(3)));
            let mut hit = vec![false; s.pow(3) as usize];
            cells.iter().for_each(|&c| hit[c as usize] = true);
            assert!(hit.iter().all(|&h| h));
        }
    }

    #[test]
    fn empty_volume_stays_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GlobalContextParams::new("g", 4);
        let mut store = ParamStore::new();
        p.init(&mut store, &mut rng);
        let v = SparseVolume::zeros(Arc::new(ActiveSet::empty(Grid::new(2, 0.16, [3; 3], [0.0; 3]))), 4);
        assert!(global_context(&v, &p, &store).unwrap().is_empty());
    }

    #[test]
    fn eager_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = GlobalContextParams::new("g", 4);
        let mut store = ParamStore::new();
        p.init(&mut store, &mut rng);
        let grid = Grid::new(2, 0.16, [7, 6, 5], [0.0; 3]);
        let entries = (0..20)
            .map(|_| {
                let c = VoxelCoord::new(rng.gen_range(0..7), rng.gen_range(0..6), rng.gen_range(0..5));
                (c, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            })
            .collect();
        let v = SparseVolume::from_entries(grid, 4, entries).unwrap();
        let eager = global_context(&v, &p, &store).unwrap();
        let mut s = Session::with_tape(&store, false, Tape::with_precision(Precision::F64));
        let x = s.tape.constant(v.to_tensor());
        let y = global_context_tape(&mut s, x, v.set(), &p);
        assert!(s.tape.value(y).max_abs_diff(&eager.to_tensor()) < 1e-12);
    }
}
