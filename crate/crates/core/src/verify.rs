//! Self-checks against independent brute-force oracles. The `verify`
//! command and the acceptance tests both run these.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_block_tape, attention_core, global_context_tape, sparse_window_attention, AttentionBlockParams,
    AttnPairs, GlobalContextParams, GLOBAL_ATTENTION_CAP,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse_tape, passes_view_gate, BackProjection, FusionPairs, WeightNetParams};
use crate::grad::{finite_diff_check, precision, set_precision, GradCheckConfig, NodeId, ParamStore, Precision, Session, Tensor};
use crate::mesh::marching_cubes;
use crate::par;
use crate::pipeline::{dilate_attention_tape, DilateAttentionParams, HeadParams, LevelParams, VolNode};
use crate::supervision::{
    depth_metrics, mesh_metrics, occupancy_loss_tape, projection_weight_loss_tape, tsdf_loss_tape, TsdfVolume,
};
use crate::voxel::{sparsify, ActiveSet, Grid, OccupancyVolume, SparseVolume, VoxelCoord};

/// Outcome of one check: `value` compared against `limit`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub limit: f64,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, value: f64, limit: f64, detail: String) -> Self {
        Self { name: name.into(), pass: value <= limit, value, limit, detail }
    }

    fn count(name: &str, failures: usize, cases: usize) -> Self {
        Self {
            name: name.into(),
            pass: failures == 0,
            value: failures as f64,
            limit: 0.0,
            detail: format!("{failures} of {cases} cases disagree"),
        }
    }

    pub fn line(&self) -> String {
        let status = if self.pass { "PASS" } else { "FAIL" };
        format!("{status} {}: {:.3e} (limit {:.3e}) {}", self.name, self.value, self.limit, self.detail)
    }
}

/// Random volume on a `dims³` grid with uniform features in `[-1, 1)`.
pub fn random_volume(dims: [u32; 3], occupancy: f64, channels: usize, rng: &mut ChaCha8Rng) -> SparseVolume {
    let grid = Grid::new(0, 0.04, dims, [0.0; 3]);
    let mut entries = Vec::new();
    for i in 0..grid.num_cells() as usize {
        if rng.gen_bool(occupancy) {
            entries.push((grid.coord_of(i), (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        }
    }
    SparseVolume::from_entries(grid, channels, entries).expect("in-grid coordinates")
}

/// Adds uniform noise to every bias and norm parameter so that zero-initialized
/// terms take part in the comparison.
pub fn perturb_offsets(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        if name.ends_with(".b") || name.ends_with(".g") {
            for v in store.get_mut(&name).expect("listed").data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
}

fn param(store: &ParamStore, key: &str) -> Result<DMatrix<f64>> {
    let t = store.get(key).ok_or_else(|| Error::Structural(format!("parameter {key} missing")))?;
    Ok(DMatrix::from_row_slice(t.rows(), t.cols(), t.data()))
}

fn affine(x: &DMatrix<f64>, store: &ParamStore, name: &str, bias: bool) -> Result<DMatrix<f64>> {
    let mut y = x * param(store, &format!("{name}.w"))?;
    if bias {
        let b = param(store, &format!("{name}.b"))?;
        for mut row in y.row_iter_mut() {
            row += &b;
        }
    }
    Ok(y)
}

fn norm_rows(x: &DMatrix<f64>, store: &ParamStore, name: &str) -> Result<DMatrix<f64>> {
    let g = param(store, &format!("{name}.g"))?;
    let b = param(store, &format!("{name}.b"))?;
    let mut y = x.clone();
    for mut row in y.row_iter_mut() {
        let mean = row.mean();
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for c in 0..row.len() {
            row[c] = (row[c] - mean) * inv * g[c] + b[c];
        }
    }
    Ok(y)
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Dense multi-head attention block over every pair of `coords`, with the
/// relative-position embedding added to keys and values.
pub fn dense_attention_oracle(
    store: &ParamStore,
    block: &AttentionBlockParams,
    coords: &[VoxelCoord],
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let name = &block.name;
    let (n, c) = (x.nrows(), x.ncols());
    let (heads, d) = (block.heads, block.head_dim());
    let h = norm_rows(x, store, &format!("{name}.ln1"))?;
    let q = affine(&h, store, &format!("{name}.q"), true)?;
    let k = affine(&h, store, &format!("{name}.k"), false)?;
    let v = affine(&h, store, &format!("{name}.v"), true)?;
    let wp = param(store, &format!("{name}.p.w"))?;
    let bp = param(store, &format!("{name}.p.b"))?;
    let mut mixed = DMatrix::zeros(n, c);
    for i in 0..n {
        let pos: Vec<DMatrix<f64>> = (0..n)
            .map(|j| {
                let r = DMatrix::from_row_slice(
                    1,
                    3,
                    &[
                        (coords[j].x - coords[i].x) as f64,
                        (coords[j].y - coords[i].y) as f64,
                        (coords[j].z - coords[i].z) as f64,
                    ],
                );
                &r * &wp + &bp
            })
            .collect();
        for hh in 0..heads {
            let cols = hh * d..(hh + 1) * d;
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|cc| q[(i, cc)] * (k[(j, cc)] + pos[j][(0, cc)])).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n {
                for cc in cols.clone() {
                    mixed[(i, cc)] += e[j] / z * (v[(j, cc)] + pos[j][(0, cc)]);
                }
            }
        }
    }
    let x1 = x + affine(&mixed, store, &format!("{name}.o"), true)?;
    let h2 = norm_rows(&x1, store, &format!("{name}.ln2"))?;
    let f = affine(&h2, store, &format!("{name}.ff1"), true)?.map(gelu_ref);
    Ok(&x1 + affine(&f, store, &format!("{name}.ff2"), true)?)
}

/// Window attention on a fully occupied 6³ volume with a window covering it,
/// against [`dense_attention_oracle`] evaluated in f64.
pub fn attention_oracle(prec: Precision, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vol = random_volume([6; 3], 1.0, 8, &mut rng);
    let block = AttentionBlockParams::new("oracle", 8, 2)?;
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng);
    perturb_offsets(&mut store, &mut rng);
    let before = precision();
    set_precision(prec);
    let got = sparse_window_attention(&vol, &block, &store, 11);
    set_precision(before);
    let got = got?;
    let x = DMatrix::from_row_slice(vol.len(), 8, vol.features());
    let want = dense_attention_oracle(&store, &block, vol.coords(), &x)?;
    let diff = got.features().iter().zip(want.transpose().iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let limit = match prec {
        Precision::F64 => 1e-10,
        Precision::F32 => 1e-5,
    };
    let name = format!("attention oracle {prec:?}").to_lowercase();
    Ok(Check::at_most(&name, diff, limit, format!("{} voxels, window 11", vol.len())))
}

/// Fixed random linear readout of a tape node, for gradient checks.
fn readout(s: &mut Session, y: NodeId, seed: u64) -> NodeId {
    let (r, c) = s.tape.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = s.tape.constant(Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    let m = s.tape.mul(y, w);
    s.tape.sum_all(m)
}

/// Finite-difference checks of every parameterized block and every loss, on
/// volumes of at most 200 active voxels.
pub fn gradient_suite(seed: u64) -> Result<Vec<Check>> {
    let cfg = GradCheckConfig { max_entries_per_tensor: 12, seed, ..GradCheckConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut record = |name: &str, store: &ParamStore, build: &dyn Fn(&mut Session) -> Result<NodeId>| -> Result<()> {
        let report = finite_diff_check(store, build, &cfg)?;
        let worst = report.tensors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
        let detail = worst.map_or(String::new(), |t| format!("worst tensor {}", t.name));
        out.push(Check::at_most(name, report.max_rel_error, cfg.tolerance, detail));
        Ok(())
    };

    let vol = random_volume([5; 3], 0.4, 4, &mut rng);
    debug_assert!(vol.len() <= 200);
    let block = AttentionBlockParams::new("b", 4, 2)?;
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng);
    perturb_offsets(&mut store, &mut rng);
    record("grad window attention", &store, &|s| {
        let x = s.tape.constant(vol.to_tensor());
        let y = attention_block_tape(s, x, &block, &AttnPairs::window(vol.set(), 3));
        Ok(readout(s, y, 1))
    })?;
    record("grad global attention", &store, &|s| {
        let x = s.tape.constant(vol.to_tensor());
        let y = attention_block_tape(s, x, &block, &AttnPairs::global(vol.set(), GLOBAL_ATTENTION_CAP)?);
        Ok(readout(s, y, 2))
    })?;

    let ctx = GlobalContextParams::new("ctx", 4);
    let mut store = ParamStore::new();
    ctx.init(&mut store, &mut rng);
    perturb_offsets(&mut store, &mut rng);
    record("grad global context", &store, &|s| {
        let x = s.tape.constant(vol.to_tensor());
        let y = global_context_tape(s, x, vol.set(), &ctx);
        Ok(readout(s, y, 3))
    })?;

    let small = random_volume([4; 3], 0.25, 4, &mut rng);
    let da = DilateAttentionParams::new("da", 4, 2);
    let mut store = ParamStore::new();
    da.init(&mut store, &mut rng);
    perturb_offsets(&mut store, &mut rng);
    record("grad dilate attention", &store, &|s| {
        let v = VolNode::input(s, &small);
        let y = dilate_attention_tape(s, &v, &da, 3);
        Ok(readout(s, y.x, 4))
    })?;

    let head = HeadParams::new("head", 4);
    let mut store = ParamStore::new();
    head.init(&mut store, &mut rng);
    record("grad occupancy head", &store, &|s| {
        let v = VolNode::input(s, &vol);
        let y = head.occupancy_tape(s, &v);
        Ok(readout(s, y, 5))
    })?;
    record("grad tsdf head", &store, &|s| {
        let v = VolNode::input(s, &vol);
        let y = head.tsdf_tape(s, &v);
        Ok(readout(s, y, 6))
    })?;

    let views: Vec<BackProjection> = (0..3)
        .map(|i| {
            let v = random_volume([4; 3], 1.0, 3, &mut rng);
            let seen = (0..v.len()).map(|_| rng.gen_bool(0.7)).collect();
            BackProjection { image_id: i, volume: v, seen }
        })
        .collect();
    // Same coordinates in every view.
    let set = Arc::clone(views[0].volume.set());
    let views: Vec<BackProjection> = views
        .into_iter()
        .map(|b| BackProjection {
            volume: SparseVolume::new(Arc::clone(&set), 3, b.volume.features().to_vec()).expect("same size"),
            ..b
        })
        .collect();
    let pairs = FusionPairs::new(&views)?;
    let net = WeightNetParams::new("wnet", 3);
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng);
    perturb_offsets(&mut store, &mut rng);
    record("grad fusion weight net", &store, &|s| {
        let f = fuse_tape(s, &pairs, &net);
        let a = readout(s, f.fused, 7);
        let b = readout(s, f.weights, 8);
        Ok(s.tape.add(a, b))
    })?;

    let n = 40;
    // Predictions stay away from zero so the sign mask is locally constant.
    let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..0.9) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let occ: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let proj: Vec<Option<f64>> = occ.iter().enumerate().map(|(i, &o)| (i % 3 != 0).then_some(o)).collect();
    let mut store = ParamStore::new();
    store.insert("x", Tensor::from_vec(n, 1, pred));
    record("grad tsdf loss", &store, &|s| {
        let x = s.p("x");
        tsdf_loss_tape(s, x, &gt)
    })?;
    record("grad occupancy loss", &store, &|s| {
        let x = s.p("x");
        let p = s.tape.sigmoid(x);
        occupancy_loss_tape(s, p, &occ)
    })?;
    record("grad projection loss", &store, &|s| {
        let x = s.p("x");
        projection_weight_loss_tape(s, x, &proj)?.ok_or_else(|| Error::InvalidInput("no projection targets".into()))
    })?;
    Ok(out)
}

/// Down flow then up flow on random volumes must reproduce the input set.
pub fn shape_preservation(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..trials {
        let dims = [0; 3].map(|_| rng.gen_range(2..=24));
        let depth = rng.gen_range(1..=3);
        let occ = rng.gen_range(0.01..0.08);
        let vol = random_volume(dims, occ, 4, &mut rng);
        let level = LevelParams {
            name: "lvl".into(),
            widths: (0..=depth).map(|k| 4 << k).collect(),
            heads: 2,
            window: 3,
            global_cap: GLOBAL_ATTENTION_CAP,
        };
        let mut store = ParamStore::new();
        level.init(&mut store, &mut rng);
        let (bottom, skips, maps) = level.down_flow(&vol, &store)?;
        let up = level.up_flow(&bottom, &skips, &maps, &store)?;
        if !up.set().same_coords(vol.set()) || up.grid() != vol.grid() {
            failures += 1;
        }
    }
    Ok(Check::count("shape preservation", failures, trials))
}

/// Window attention of a volume and of a shifted copy in a larger grid must
/// agree bit for bit in serial mode.
pub fn translation_invariance(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = AttentionBlockParams::new("t", 8, 2)?;
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng);
    perturb_offsets(&mut store, &mut rng);
    let was_serial = par::is_serial();
    par::set_serial(true);
    let mut failures = 0;
    let result = (|| -> Result<()> {
        for _ in 0..trials {
            let vol = random_volume([8; 3], 0.2, 8, &mut rng);
            let big = Grid::new(0, 0.04, [24; 3], [0.0; 3]);
            let set = Arc::new(ActiveSet::from_coords(big, vol.coords().to_vec())?);
            let vol = SparseVolume::new(set, 8, vol.features().to_vec())?;
            let shift = [0; 3].map(|_| rng.gen_range(0..=16));
            let moved = vol.translated(shift)?;
            let a = sparse_window_attention(&vol, &block, &store, 5)?;
            let b = sparse_window_attention(&moved, &block, &store, 5)?;
            if a.features() != b.features() {
                failures += 1;
            }
        }
        Ok(())
    })();
    par::set_serial(was_serial);
    result?;
    Ok(Check::count("translation invariance", failures, trials))
}

/// Marching cubes on an analytic sphere, radius 0.5 m, 32³ grid of 4 cm voxels.
pub fn marching_cubes_sphere() -> Result<Check> {
    let r = 0.5;
    let grid = Grid::new(0, 0.04, [32; 3], [-0.62; 3]);
    let tsdf = TsdfVolume::from_sdf(grid, |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r);
    let mesh = marching_cubes(&tsdf, 0.0);
    if mesh.vertices.is_empty() {
        return Err(Error::DegenerateScene { level: 0 });
    }
    let err = mesh.vertices.iter().map(|v| ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - r).abs()).sum::<f64>()
        / mesh.vertices.len() as f64;
    Ok(Check::at_most("marching cubes sphere", err, 0.02, format!("{} vertices", mesh.vertices.len())))
}

/// Metrics of a mesh against itself and of a depth map against itself.
pub fn metric_self_consistency(seed: u64) -> Result<Check> {
    let grid = Grid::new(0, 0.04, [16; 3], [-0.3; 3]);
    let tsdf = TsdfVolume::from_sdf(grid, |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.2);
    let mesh = marching_cubes(&tsdf, 0.0);
    let m = mesh_metrics(&mesh, &mesh, 0.05, 5000, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.3..5.0)).collect();
    let d = depth_metrics(&depth, &depth)?;
    let zeros = [m.acc, m.comp, m.chamfer, d.abs_rel, d.abs_diff, d.sq_rel, d.rmse];
    let ones = [m.prec, m.recall, m.fscore, d.delta1, d.delta2, d.delta3];
    let bad = zeros.iter().filter(|v| **v != Some(0.0)).count() + ones.iter().filter(|v| **v != Some(1.0)).count();
    Ok(Check::count("metric self-consistency", bad, zeros.len() + ones.len()))
}

/// Attention weights sum to one per voxel and head; occupancy and TSDF heads
/// stay inside their open ranges.
pub fn range_invariants(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vol = random_volume([10; 3], 0.2, 8, &mut rng);
    let block = AttentionBlockParams::new("inv", 8, 4)?;
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng);
    perturb_offsets(&mut store, &mut rng);
    let table = vol.set().neighbor_table(5);
    let (_, w) = attention_core(&vol, &block, &store, &table)?;
    let mut worst: f64 = 0.0;
    for i in 0..vol.len() {
        for h in 0..block.heads {
            let s: f64 = (table.offsets[i]..table.offsets[i + 1]).map(|p| w[p * block.heads + h]).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    let head = HeadParams::new("h", 8);
    head.init(&mut store, &mut rng);
    let occ = crate::pipeline::occupancy_head(&vol, &head, &store)?;
    let tsdf = crate::pipeline::tsdf_head(&vol, &head, &store)?;
    check_ranges(occ.values(), &tsdf)?;
    Ok(Check::at_most("softmax and range invariants", worst, 1e-6, format!("{} voxels", vol.len())))
}

/// Errors unless occupancies are in `(0, 1)` and TSDF values in `(-1, 1)`.
pub fn check_ranges(occupancy: &[f64], tsdf: &[f64]) -> Result<()> {
    if let Some(o) = occupancy.iter().find(|o| !(**o > 0.0 && **o < 1.0)) {
        return Err(Error::InvalidInput(format!("occupancy {o} outside (0, 1)")));
    }
    if let Some(t) = tsdf.iter().find(|t| !(**t > -1.0 && **t < 1.0)) {
        return Err(Error::InvalidInput(format!("tsdf {t} outside (-1, 1)")));
    }
    Ok(())
}

fn random_pose(rng: &mut ChaCha8Rng) -> Matrix4<f64> {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let r = Rotation3::new(axis * rng.gen_range(0.0..0.6));
    let t = Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
    let mut p = Matrix4::identity();
    p.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
    p.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    p
}

/// Sparsification at 0.5 and the 0.1 m / 15° view gates against per-element
/// brute force on `cases` random cases each.
pub fn gates(cases: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..cases {
        let dims = [0; 3].map(|_| rng.gen_range(2..=8) * 2);
        let fine = random_volume(dims, 0.3, 1, &mut rng);
        let coarse = Arc::new(ActiveSet::full(fine.grid().coarser()));
        let levels = [0.0, 0.25, 0.5 - 1e-12, 0.5, 0.5 + 1e-12, 0.75, 1.0];
        let values: Vec<f64> = (0..coarse.len()).map(|_| levels[rng.gen_range(0..levels.len())]).collect();
        let occ = OccupancyVolume::new(Arc::clone(&coarse), values.clone())?;
        let got = sparsify(&fine, &occ, 0.5)?;
        let lookup: HashMap<(i32, i32, i32), f64> =
            coarse.coords().iter().zip(&values).map(|(c, &v)| ((c.x, c.y, c.z), v)).collect();
        let want: Vec<VoxelCoord> = fine
            .coords()
            .iter()
            .filter(|c| lookup[&(c.x.div_euclid(2), c.y.div_euclid(2), c.z.div_euclid(2))] >= 0.5)
            .copied()
            .collect();
        if got.coords() != want.as_slice() {
            failures += 1;
        }

        let a = random_pose(&mut rng);
        let b = random_pose(&mut rng);
        let centre = |p: &Matrix4<f64>| p.try_inverse().expect("rigid").fixed_view::<3, 1>(0, 3).into_owned();
        let dt = (centre(&a) - centre(&b)).norm();
        let rot = |p: &Matrix4<f64>| {
            UnitQuaternion::from_matrix(&Matrix3::from(p.fixed_view::<3, 3>(0, 0)))
        };
        let angle = rot(&a).angle_to(&rot(&b)).to_degrees();
        if passes_view_gate(&a, &b) != (dt > 0.1 && angle > 15.0) {
            failures += 1;
        }
    }
    Ok(Check::count("sparsification and view gates", failures, 2 * cases))
}
