//! Sparse voxel volumes.
//!
//! An [`ActiveSet`] is the sorted, hash-indexed set of active coordinates
//! on a [`Grid`]; a [`SparseVolume`] attaches one feature row per active
//! voxel. Rows are always in lexicographic coordinate order, so every
//! traversal is deterministic.
//!
//! Window convention: a window of size `n` spans `center - n/2 ..= center -
//! n/2 + n - 1` on each axis (integer division). Odd `n` is symmetric;
//! even `n` (the default 10) reaches one cell further on the negative side.

mod coord;
mod snapshot;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use coord::{coord_map, kernel3_offsets, CoordHasher, CoordMap, VoxelCoord};
pub use snapshot::{read_snapshot, write_snapshot};

use crate::error::{Error, Result};
use crate::grad::NO_ROW;
use crate::par;

/// Geometry of one resolution level. Voxel `c` sits at world position
/// `origin + c * voxel_size`; valid indices are `0..dims` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub level: u8,
    pub voxel_size: f64,
    pub dims: [u32; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(level: u8, voxel_size: f64, dims: [u32; 3], origin: [f64; 3]) -> Self {
        Self { level, voxel_size, dims, origin }
    }

    pub fn contains(&self, c: VoxelCoord) -> bool {
        c.x >= 0
            && c.y >= 0
            && c.z >= 0
            && (c.x as u32) < self.dims[0]
            && (c.y as u32) < self.dims[1]
            && (c.z as u32) < self.dims[2]
    }

    pub fn num_cells(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    /// The next coarser level: double voxel size, `ceil(dims / 2)`.
    pub fn coarser(&self) -> Grid {
        Grid {
            level: self.level + 1,
            voxel_size: self.voxel_size * 2.0,
            dims: self.dims.map(|d| d.div_ceil(2)),
            origin: self.origin,
        }
    }

    pub fn finer(&self) -> Grid {
        Grid {
            level: self.level.saturating_sub(1),
            voxel_size: self.voxel_size * 0.5,
            dims: self.dims.map(|d| d * 2),
            origin: self.origin,
        }
    }

    pub fn position(&self, c: VoxelCoord) -> [f64; 3] {
        [
            self.origin[0] + c.x as f64 * self.voxel_size,
            self.origin[1] + c.y as f64 * self.voxel_size,
            self.origin[2] + c.z as f64 * self.voxel_size,
        ]
    }

    /// Row-major linear index, x slowest.
    pub fn linear(&self, c: VoxelCoord) -> usize {
        (c.x as usize * self.dims[1] as usize + c.y as usize) * self.dims[2] as usize + c.z as usize
    }

    pub fn coord_of(&self, i: usize) -> VoxelCoord {
        let (ny, nz) = (self.dims[1] as usize, self.dims[2] as usize);
        VoxelCoord::new((i / (ny * nz)) as i32, ((i / nz) % ny) as i32, (i % nz) as i32)
    }
}

/// Start offset of a window of size `n` relative to its center.
pub fn window_start(n: u32) -> i32 {
    -((n / 2) as i32)
}

/// Sorted, hash-indexed set of active voxels on a grid.
#[derive(Clone, Debug)]
pub struct ActiveSet {
    grid: Grid,
    coords: Vec<VoxelCoord>,
    index: CoordMap<u32>,
}

/// Compressed neighbor lists: row `i`'s neighbors are
/// `rows[offsets[i]..offsets[i + 1]]`, ascending.
#[derive(Clone, Debug, Default)]
pub struct NeighborTable {
    pub offsets: Vec<usize>,
    pub rows: Vec<u32>,
}

impl NeighborTable {
    pub fn pairs(&self) -> usize {
        self.rows.len()
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.rows[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Owner row of every pair, aligned with `rows`.
    pub fn owners(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.rows.len());
        for i in 0..self.offsets.len().saturating_sub(1) {
            out.extend(std::iter::repeat_n(i as u32, self.offsets[i + 1] - self.offsets[i]));
        }
        out
    }
}

impl ActiveSet {
    /// Sorts and deduplicates `coords`; errors if any lies outside the grid.
    pub fn from_coords(grid: Grid, mut coords: Vec<VoxelCoord>) -> Result<Self> {
        if let Some(bad) = coords.iter().find(|c| !grid.contains(**c)) {
            return Err(Error::Structural(format!("coordinate {bad:?} outside dims {:?}", grid.dims)));
        }
        coords.sort_unstable();
        coords.dedup();
        Ok(Self::from_sorted_unchecked(grid, coords))
    }

    fn from_sorted_unchecked(grid: Grid, coords: Vec<VoxelCoord>) -> Self {
        let mut index = coord_map(coords.len());
        for (i, c) in coords.iter().enumerate() {
            index.insert(*c, i as u32);
        }
        Self { grid, coords, index }
    }

    /// Every cell of the grid.
    pub fn full(grid: Grid) -> Self {
        let coords = (0..grid.num_cells() as usize).map(|i| grid.coord_of(i)).collect();
        Self::from_sorted_unchecked(grid, coords)
    }

    pub fn empty(grid: Grid) -> Self {
        Self::from_sorted_unchecked(grid, Vec::new())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn find(&self, c: VoxelCoord) -> Option<usize> {
        self.index.get(&c).map(|&i| i as usize)
    }

    pub fn contains(&self, c: VoxelCoord) -> bool {
        self.index.contains_key(&c)
    }

    /// Same coordinates shifted by `delta` on a grid of the same geometry.
    pub fn translated(&self, delta: [i32; 3]) -> Result<ActiveSet> {
        let coords = self.coords.iter().map(|c| c.offset(delta[0], delta[1], delta[2])).collect();
        ActiveSet::from_coords(self.grid, coords)
    }

    fn window_rows(&self, center: VoxelCoord, n: u32) -> Vec<u32> {
        let lo = window_start(n);
        let hi = lo + n as i32 - 1;
        let cells = (n as u64).pow(3);
        if cells <= self.coords.len() as u64 {
            let mut out = Vec::new();
            for dx in lo..=hi {
                for dy in lo..=hi {
                    for dz in lo..=hi {
                        if let Some(&r) = self.index.get(&center.offset(dx, dy, dz)) {
                            out.push(r);
                        }
                    }
                }
            }
            out
        } else {
            self.coords
                .iter()
                .enumerate()
                .filter(|(_, c)| {
                    let d = c.delta(center);
                    d.iter().all(|&v| v >= lo && v <= hi)
                })
                .map(|(i, _)| i as u32)
                .collect()
        }
    }

    /// Active voxels inside the size-`n` window around an active `center`,
    /// in lexicographic order.
    pub fn window_neighbors(&self, center: VoxelCoord, n: u32) -> Result<Vec<VoxelCoord>> {
        if !self.contains(center) {
            return Err(Error::Precondition(format!("window center {center:?} is not active")));
        }
        Ok(self.window_rows(center, n).into_iter().map(|r| self.coords[r as usize]).collect())
    }

    /// Window neighbor lists of every active voxel.
    pub fn neighbor_table(&self, n: u32) -> NeighborTable {
        let lists = par::map_collect(self.coords.len(), |i| self.window_rows(self.coords[i], n));
        csr(lists)
    }

    /// Every active voxel is a neighbor of every other.
    pub fn all_pairs_table(&self) -> NeighborTable {
        let n = self.coords.len();
        let all: Vec<u32> = (0..n as u32).collect();
        NeighborTable {
            offsets: (0..=n).map(|i| i * n).collect(),
            rows: (0..n).flat_map(|_| all.iter().copied()).collect(),
        }
    }

    /// 3×3×3 morphological dilation clipped to the grid.
    pub fn dilated(&self) -> ActiveSet {
        let mut out: Vec<VoxelCoord> = Vec::with_capacity(self.coords.len() * 4);
        for c in &self.coords {
            for [dx, dy, dz] in kernel3_offsets() {
                let n = c.offset(dx, dy, dz);
                if self.grid.contains(n) {
                    out.push(n);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        ActiveSet::from_sorted_unchecked(self.grid, out)
    }

    /// For every voxel of `self`, the rows of `source` at the 27 kernel
    /// offsets (lexicographic), or [`NO_ROW`] where `source` is inactive.
    pub fn kernel_table(&self, source: &ActiveSet) -> Vec<u32> {
        let mut out = vec![NO_ROW; self.coords.len() * 27];
        par::for_each_row(&mut out, 27, |i, row| {
            let c = self.coords[i];
            for (k, [dx, dy, dz]) in kernel3_offsets().enumerate() {
                if let Some(r) = source.find(c.offset(dx, dy, dz)) {
                    row[k] = r as u32;
                }
            }
        });
        out
    }

    /// Groups voxels by `floor(c / 2)`.
    pub fn downsample_map(self: &Arc<Self>) -> SampleMap {
        let coarse_grid = self.grid.coarser();
        let mut parents: Vec<VoxelCoord> = self.coords.iter().map(|c| c.parent()).collect();
        parents.sort_unstable();
        parents.dedup();
        let coarse = Arc::new(ActiveSet::from_sorted_unchecked(coarse_grid, parents));
        let parent_of: Vec<u32> = self
            .coords
            .iter()
            .map(|c| coarse.find(c.parent()).expect("parent present") as u32)
            .collect();
        let mut lists = vec![Vec::new(); coarse.len()];
        for (i, p) in parent_of.iter().enumerate() {
            lists[*p as usize].push(i as u32);
        }
        let children = csr(lists);
        SampleMap { fine: Arc::clone(self), coarse, parent_of, children }
    }

    /// True when both sets hold the same coordinates.
    pub fn same_coords(&self, other: &ActiveSet) -> bool {
        self.coords == other.coords
    }
}

fn csr(lists: Vec<Vec<u32>>) -> NeighborTable {
    let mut offsets = Vec::with_capacity(lists.len() + 1);
    offsets.push(0);
    let total: usize = lists.iter().map(Vec::len).sum();
    let mut rows = Vec::with_capacity(total);
    for l in lists {
        rows.extend_from_slice(&l);
        offsets.push(rows.len());
    }
    NeighborTable { offsets, rows }
}

/// Fine-to-coarse grouping recorded by one downsampling step.
#[derive(Clone, Debug)]
pub struct SampleMap {
    fine: Arc<ActiveSet>,
    coarse: Arc<ActiveSet>,
    parent_of: Vec<u32>,
    children: NeighborTable,
}

impl SampleMap {
    pub fn fine(&self) -> &Arc<ActiveSet> {
        &self.fine
    }

    /// The deduplicated parent coordinates.
    pub fn coarse(&self) -> &Arc<ActiveSet> {
        &self.coarse
    }

    /// Parent row (in [`Self::coarse`]) of each fine row.
    pub fn parent_of(&self) -> &[u32] {
        &self.parent_of
    }

    /// Fine rows grouped under coarse row `p`.
    pub fn children(&self, p: usize) -> &[u32] {
        self.children.neighbors(p)
    }

    pub fn child_counts(&self) -> Vec<usize> {
        (0..self.coarse.len()).map(|p| self.children(p).len()).collect()
    }
}

/// Active voxels with one feature row each.
#[derive(Clone, Debug)]
pub struct SparseVolume {
    set: Arc<ActiveSet>,
    channels: usize,
    features: Vec<f64>,
}

impl SparseVolume {
    pub fn new(set: Arc<ActiveSet>, channels: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != set.len() * channels {
            return Err(Error::Structural(format!(
                "{} features for {} voxels × {} channels",
                features.len(),
                set.len(),
                channels
            )));
        }
        Ok(Self { set, channels, features })
    }

    pub fn zeros(set: Arc<ActiveSet>, channels: usize) -> Self {
        let n = set.len() * channels;
        Self { set, channels, features: vec![0.0; n] }
    }

    /// Builds from `(coordinate, feature)` pairs; later duplicates win.
    pub fn from_entries(grid: Grid, channels: usize, entries: Vec<(VoxelCoord, Vec<f64>)>) -> Result<Self> {
        let set = Arc::new(ActiveSet::from_coords(grid, entries.iter().map(|e| e.0).collect())?);
        let mut features = vec![0.0; set.len() * channels];
        for (c, f) in entries {
            if f.len() != channels {
                return Err(Error::Structural(format!("feature of length {} != {channels}", f.len())));
            }
            let r = set.find(c).expect("inserted");
            features[r * channels..(r + 1) * channels].copy_from_slice(&f);
        }
        Ok(Self { set, channels, features })
    }

    pub fn set(&self) -> &Arc<ActiveSet> {
        &self.set
    }

    pub fn grid(&self) -> &Grid {
        self.set.grid()
    }

    pub fn level(&self) -> u8 {
        self.set.grid().level
    }

    pub fn voxel_size(&self) -> f64 {
        self.set.grid().voxel_size
    }

    pub fn dims(&self) -> [u32; 3] {
        self.set.grid().dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        self.set.coords()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn feature(&self, c: VoxelCoord) -> Option<&[f64]> {
        self.set.find(c).map(|i| self.row(i))
    }

    pub fn to_tensor(&self) -> crate::grad::Tensor {
        crate::grad::Tensor::from_vec(self.len(), self.channels, self.features.clone())
    }

    /// Same features, coordinates shifted by `delta`.
    pub fn translated(&self, delta: [i32; 3]) -> Result<SparseVolume> {
        let set = Arc::new(self.set.translated(delta)?);
        SparseVolume::new(set, self.channels, self.features.clone())
    }
}

/// Per-voxel occupancy probabilities in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct OccupancyVolume {
    volume: SparseVolume,
}

impl OccupancyVolume {
    pub fn new(set: Arc<ActiveSet>, values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("occupancy {v} outside [0, 1]")));
        }
        Ok(Self { volume: SparseVolume::new(set, 1, values)? })
    }

    pub fn set(&self) -> &Arc<ActiveSet> {
        self.volume.set()
    }

    pub fn values(&self) -> &[f64] {
        self.volume.features()
    }

    pub fn get(&self, c: VoxelCoord) -> Option<f64> {
        self.volume.feature(c).map(|f| f[0])
    }

    pub fn level(&self) -> u8 {
        self.volume.level()
    }

    pub fn as_volume(&self) -> &SparseVolume {
        &self.volume
    }
}

/// Keeps the voxels of `vol` whose parent occupancy in the next coarser
/// level is at least `threshold`.
pub fn sparsify(vol: &SparseVolume, occ: &OccupancyVolume, threshold: f64) -> Result<SparseVolume> {
    let rows = sparsify_rows(vol.set(), occ, threshold)?;
    let coords = rows.iter().map(|&r| vol.coords()[r]).collect();
    let set = Arc::new(ActiveSet::from_sorted_unchecked(*vol.grid(), coords));
    let c = vol.channels();
    let mut features = Vec::with_capacity(rows.len() * c);
    for &r in &rows {
        features.extend_from_slice(vol.row(r));
    }
    SparseVolume::new(set, c, features)
}

/// Row indices of `set` retained by [`sparsify`].
pub fn sparsify_rows(set: &ActiveSet, occ: &OccupancyVolume, threshold: f64) -> Result<Vec<usize>> {
    if occ.level() != set.grid().level + 1 {
        return Err(Error::Structural(format!(
            "occupancy at level {} cannot sparsify level {}",
            occ.level(),
            set.grid().level
        )));
    }
    Ok(set
        .coords()
        .iter()
        .enumerate()
        .filter(|(_, c)| occ.get(c.parent()).is_some_and(|o| o >= threshold))
        .map(|(i, _)| i)
        .collect())
}

pub fn window_neighbors(vol: &SparseVolume, center: VoxelCoord, n: u32) -> Result<Vec<VoxelCoord>> {
    vol.set().window_neighbors(center, n)
}

/// Dilated active set; new voxels get zero features, existing ones keep theirs.
pub fn dilate(vol: &SparseVolume) -> SparseVolume {
    let set = Arc::new(vol.set().dilated());
    let c = vol.channels();
    let mut out = SparseVolume::zeros(Arc::clone(&set), c);
    for (i, coord) in vol.coords().iter().enumerate() {
        let r = set.find(*coord).expect("dilation is extensive");
        out.features[r * c..(r + 1) * c].copy_from_slice(vol.row(i));
    }
    out
}

/// Mean-pools children into `floor(c / 2)` parents.
pub fn downsample(vol: &SparseVolume) -> (SparseVolume, SampleMap) {
    let map = vol.set().downsample_map();
    let c = vol.channels();
    let mut features = vec![0.0; map.coarse().len() * c];
    for p in 0..map.coarse().len() {
        let kids = map.children(p);
        let dst = &mut features[p * c..(p + 1) * c];
        for &k in kids {
            for (d, s) in dst.iter_mut().zip(vol.row(k as usize)) {
                *d += s;
            }
        }
        let inv = 1.0 / kids.len() as f64;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    let out = SparseVolume::new(Arc::clone(map.coarse()), c, features).expect("shape");
    (out, map)
}

/// Restores the child set recorded in `map`; each child copies its parent's feature.
pub fn upsample(vol: &SparseVolume, map: &SampleMap) -> Result<SparseVolume> {
    let rows = upsample_rows(vol.set(), map)?;
    let c = vol.channels();
    let mut features = Vec::with_capacity(rows.len() * c);
    for r in rows {
        features.extend_from_slice(vol.row(r as usize));
    }
    SparseVolume::new(Arc::clone(map.fine()), c, features)
}

/// Row in `coarse` of each fine voxel's parent.
pub fn upsample_rows(coarse: &ActiveSet, map: &SampleMap) -> Result<Vec<u32>> {
    map.fine()
        .coords()
        .iter()
        .map(|c| {
            coarse
                .find(c.parent())
                .map(|r| r as u32)
                .ok_or_else(|| Error::Structural(format!("parent {:?} missing from volume", c.parent())))
        })
        .collect()
}
