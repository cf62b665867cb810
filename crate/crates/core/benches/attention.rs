//! Parallel against serial execution of the hot paths.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vf_core::attention::{pair_count, sparse_window_attention, AttentionBlockParams};
use vf_core::grad::ParamStore;
use vf_core::mesh::marching_cubes;
use vf_core::par;
use vf_core::supervision::TsdfVolume;
use vf_core::voxel::{ActiveSet, Grid, SparseVolume, VoxelCoord};

const MODES: [(&str, bool); 2] = [("parallel", false), ("serial", true)];

fn random_set(dims: [u32; 3], occupancy: f64, rng: &mut ChaCha8Rng) -> Arc<ActiveSet> {
    let grid = Grid::new(0, 0.04, dims, [0.0; 3]);
    let coords: Vec<VoxelCoord> =
        (0..grid.num_cells() as usize).filter(|_| rng.gen_bool(occupancy)).map(|i| grid.coord_of(i)).collect();
    Arc::new(ActiveSet::from_coords(grid, coords).unwrap())
}

fn window_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let set = random_set([32; 3], 0.1, &mut rng);
    let channels = 16;
    let block = AttentionBlockParams::new("bench", channels, 2).unwrap();
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng);
    let features = (0..set.len() * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let vol = SparseVolume::new(set, channels, features).unwrap();
    let mut group = c.benchmark_group("window_attention");
    group.sample_size(10);
    for (name, serial) in MODES {
        par::set_serial(serial);
        group.bench_function(BenchmarkId::new(name, 5), |b| {
            b.iter(|| sparse_window_attention(&vol, &block, &store, 5).unwrap())
        });
    }
    par::set_serial(false);
    group.finish();
}

fn pair_counting(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let set = random_set([100; 3], 0.1, &mut rng);
    let mut group = c.benchmark_group("pair_count");
    group.sample_size(10);
    for (name, serial) in MODES {
        par::set_serial(serial);
        group.bench_function(BenchmarkId::new(name, 10), |b| b.iter(|| pair_count(&set, 10)));
    }
    par::set_serial(false);
    group.finish();
}

fn sphere_mesh(c: &mut Criterion) {
    let grid = Grid::new(0, 0.02, [64; 3], [-0.64; 3]);
    let tsdf = TsdfVolume::from_sdf(grid, |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.5);
    let mut group = c.benchmark_group("marching_cubes");
    group.sample_size(10);
    for (name, serial) in MODES {
        par::set_serial(serial);
        group.bench_function(name, |b| b.iter(|| marching_cubes(&tsdf, 0.0)));
    }
    par::set_serial(false);
    group.finish();
}

criterion_group!(benches, window_attention, pair_counting, sphere_mesh);
criterion_main!(benches);
