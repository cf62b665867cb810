//! Commands behind the `vf` binary: scene generation, training,
//! reconstruction, self-verification and the attention benchmark.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vf_core::attention::{pair_count, sparse_window_attention, AttentionBlockParams};
use vf_core::grad::{Adam, ParamStore, Precision};
use vf_core::mesh::{marching_cubes, write_ply};
use vf_core::pipeline::{Model, PipelineConfig, Targets};
use vf_core::scene::{SceneSpec, SyntheticScene};
use vf_core::supervision::{mesh_metrics, MetricsReport};
use vf_core::verify::{self, Check};
use vf_core::voxel::{ActiveSet, Grid, SparseVolume, VoxelCoord};

/// Small configuration that overfits one synthetic scene on a CPU.
pub const TINY_CONFIG: &str = include_str!("../configs/tiny.toml");

/// Process-wide switches shared by every command.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub deterministic: bool,
    pub precision: Precision,
}

impl RunOptions {
    pub fn apply(&self) {
        vf_core::par::init_from_env();
        vf_core::par::set_serial(self.deterministic);
        vf_core::grad::set_precision(self.precision);
    }
}

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => PipelineConfig::from_toml(TINY_CONFIG)?,
    })
}

/// Renders the default three-primitive scene with `seed` into `out`.
pub fn cmd_gen_scene(out: &Path, seed: u64) -> Result<SyntheticScene> {
    let scene = SyntheticScene::generate(SceneSpec { seed, ..SceneSpec::default() })?;
    scene.save(out).with_context(|| format!("writing scene to {}", out.display()))?;
    Ok(scene)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    /// Mean loss of each consecutive 100-step window.
    pub window_means: Vec<f64>,
    /// Every window mean is at most the one before it.
    pub monotone: bool,
    pub seconds: f64,
    pub checkpoint: PathBuf,
}

/// Means of consecutive `window`-sized chunks and whether they never rise.
pub fn trend(losses: &[f64], window: usize) -> (Vec<f64>, bool) {
    let means: Vec<f64> = losses.chunks(window).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let monotone = means.windows(2).all(|w| w[1] <= w[0]);
    (means, monotone)
}

/// Overfits the pipeline on one scene, logging the total loss of every step
/// to `out/loss.txt` and writing `out/checkpoint.vfck`.
pub fn cmd_train_tiny(scene_dir: &Path, config: &PipelineConfig, steps: usize, out: &Path) -> Result<TrainReport> {
    let scene = SyntheticScene::load(scene_dir).with_context(|| format!("loading scene {}", scene_dir.display()))?;
    check_scene(&scene, config)?;
    fs::create_dir_all(out)?;
    let model = Model::new(config.clone())?;
    let mut store = model.init();
    let targets = Targets::from_tsdf(scene.gt.clone());
    let mut adam = Adam::new(config.train.lr);
    let mut log = BufWriter::new(fs::File::create(out.join("loss.txt"))?);
    let mut losses = Vec::with_capacity(steps);
    let t0 = Instant::now();
    for step in 0..steps {
        let (loss, terms) = model.train_step(&mut store, &mut adam, &scene.views, &scene.spec.bounds, &targets)?;
        writeln!(log, "{step} {loss:.9}")?;
        if config.train.log_every > 0 && step % config.train.log_every == 0 {
            eprintln!(
                "step {step} loss {loss:.5} tsdf {:.5} occ {:?} {:.1}s",
                terms.tsdf,
                terms.occupancy,
                t0.elapsed().as_secs_f64()
            );
        }
        losses.push(loss);
    }
    log.flush()?;
    let checkpoint = out.join("checkpoint.vfck");
    store.save(&checkpoint)?;
    let (window_means, monotone) = trend(&losses, 100);
    let report = TrainReport { steps, losses, window_means, monotone, seconds: t0.elapsed().as_secs_f64(), checkpoint };
    fs::write(out.join("train.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn check_scene(scene: &SyntheticScene, config: &PipelineConfig) -> Result<()> {
    if scene.spec.feature_channels != config.feature_channels {
        bail!("scene has {} feature channels, config expects {}", scene.spec.feature_channels, config.feature_channels);
    }
    if (scene.spec.voxel_size - config.fine.voxel_size).abs() > 1e-12 {
        bail!("scene voxel size {} differs from the fine level {}", scene.spec.voxel_size, config.fine.voxel_size);
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconstructReport {
    pub metrics: MetricsReport,
    pub vertices: usize,
    pub triangles: usize,
    pub fine_voxels: usize,
    pub mesh: PathBuf,
}

/// Runs inference with a checkpoint, extracts the mesh and scores it
/// against the scene's ground-truth mesh. Writes `mesh.ply`,
/// `metrics.json`, `metrics.txt` and `timing.log` to `out`.
pub fn cmd_reconstruct(scene_dir: &Path, config: &PipelineConfig, checkpoint: &Path, out: &Path) -> Result<ReconstructReport> {
    let mut timing = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timing: &mut Vec<String>| {
        timing.push(format!("{name} {:.3}", clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    let scene = SyntheticScene::load(scene_dir).with_context(|| format!("loading scene {}", scene_dir.display()))?;
    check_scene(&scene, config)?;
    let model = Model::new(config.clone())?;
    let store = ParamStore::load(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    model.init().check_compatible(&store)?;
    lap("load", &mut timing);
    let rec = model.reconstruct(&store, &scene.views, &scene.spec.bounds)?;
    for occ in &rec.occupancy {
        verify::check_ranges(occ.values(), &[])?;
    }
    verify::check_ranges(&[], &rec.fine_values)?;
    lap("pipeline", &mut timing);
    let mesh = marching_cubes(&rec.tsdf, 0.0);
    lap("marching_cubes", &mut timing);
    if mesh.is_empty() {
        bail!("reconstruction has no zero crossing");
    }
    let gt = scene.gt_mesh();
    let metrics = mesh_metrics(&mesh, &gt, config.metrics.tau, config.metrics.samples, config.seed)?;
    lap("metrics", &mut timing);
    fs::create_dir_all(out)?;
    let mesh_path = out.join("mesh.ply");
    write_ply(BufWriter::new(fs::File::create(&mesh_path)?), &mesh)?;
    fs::write(out.join("metrics.json"), metrics.to_json())?;
    fs::write(out.join("metrics.txt"), metrics.to_text())?;
    fs::write(out.join("timing.log"), timing.join("\n") + "\n")?;
    Ok(ReconstructReport {
        metrics,
        vertices: mesh.vertices.len(),
        triangles: mesh.triangles.len(),
        fine_voxels: rec.fine_set.len(),
        mesh: mesh_path,
    })
}

/// Every self-check with its default case count.
pub fn cmd_verify(seed: u64) -> Result<Vec<Check>> {
    let mut checks = vec![
        verify::attention_oracle(Precision::F64, seed)?,
        verify::attention_oracle(Precision::F32, seed)?,
    ];
    checks.extend(verify::gradient_suite(seed)?);
    checks.push(verify::shape_preservation(100, seed)?);
    checks.push(verify::translation_invariance(50, seed)?);
    checks.push(verify::marching_cubes_sphere()?);
    checks.push(verify::metric_self_consistency(seed)?);
    checks.push(verify::range_invariants(seed)?);
    checks.push(verify::gates(1000, seed)?);
    Ok(checks)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub dims: [u32; 3],
    pub occupancy: f64,
    pub window: u32,
    pub trials: usize,
    /// Mean over trials.
    pub active_voxels: f64,
    pub sparse_pairs: f64,
    pub dense_pairs: f64,
    pub ratio: f64,
    /// Brute-force recount matched the summed-area count in every trial.
    pub recount_agrees: bool,
    /// Mean seconds of one window attention call; absent when not timed.
    pub attention_seconds: Option<f64>,
}

/// Brute-force count: every active voxel's window scanned cell by cell.
pub fn recount_pairs(set: &ActiveSet, n: u32) -> u64 {
    let lo = vf_core::voxel::window_start(n);
    let mut total = 0;
    for c in set.coords() {
        for dx in lo..lo + n as i32 {
            for dy in lo..lo + n as i32 {
                for dz in lo..lo + n as i32 {
                    total += set.contains(VoxelCoord::new(c.x + dx, c.y + dy, c.z + dz)) as u64;
                }
            }
        }
    }
    total
}

/// Random `dims` volumes at `occupancy`: pair counts against dense attention,
/// and optionally the wall time of one window attention call.
pub fn cmd_bench(dims: [u32; 3], occupancy: f64, window: u32, trials: usize, seed: u64, time: bool) -> Result<BenchReport> {
    if !(0.0..=1.0).contains(&occupancy) || window == 0 || trials == 0 {
        bail!("occupancy must be in [0, 1], window and trials positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid::new(0, 0.04, dims, [0.0; 3]);
    let (mut active, mut sparse, mut dense, mut seconds) = (0.0, 0.0, 0.0, 0.0);
    let mut agrees = true;
    for _ in 0..trials {
        let coords: Vec<VoxelCoord> =
            (0..grid.num_cells() as usize).filter(|_| rng.gen_bool(occupancy)).map(|i| grid.coord_of(i)).collect();
        let set = Arc::new(ActiveSet::from_coords(grid, coords)?);
        let count = pair_count(&set, window);
        agrees &= recount_pairs(&set, window) == count.sparse;
        active += set.len() as f64;
        sparse += count.sparse as f64;
        dense += count.dense as f64;
        if time {
            let c = 8;
            let block = AttentionBlockParams::new("bench", c, 2)?;
            let mut store = ParamStore::new();
            block.init(&mut store, &mut rng);
            let features = (0..set.len() * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let vol = SparseVolume::new(set, c, features)?;
            let t0 = Instant::now();
            sparse_window_attention(&vol, &block, &store, window)?;
            seconds += t0.elapsed().as_secs_f64();
        }
    }
    let k = trials as f64;
    Ok(BenchReport {
        dims,
        occupancy,
        window,
        trials,
        active_voxels: active / k,
        sparse_pairs: sparse / k,
        dense_pairs: dense / k,
        ratio: sparse / dense,
        recount_agrees: agrees,
        attention_seconds: time.then_some(seconds / k),
    })
}
