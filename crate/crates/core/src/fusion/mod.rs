//! Camera views, view selection, back-projection of 2D feature maps into a
//! voxel grid, and variance-weighted multi-view fusion.
//!
//! Pixel convention: pixel `(c, r)` has its center at `(u, v) = (c, r)`. A
//! feature map downsampled by `s` samples the image at
//! `u_s = (u + 0.5) / s - 0.5`.

mod extractor;
mod io;

use std::sync::Arc;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use extractor::{toy_feature_extractor, toy_feature_extractor_tape, ExtractorParams, EXTRACTOR_STRIDES};
pub use io::{load_views, save_views};

use crate::error::{Error, Result};
use crate::grad::{NodeId, ParamStore, Session, Tape, Tensor};
use crate::nn::{init_linear, linear};
use crate::par;
use crate::voxel::{ActiveSet, Grid, SparseVolume};

/// Dense `height × width × channels` map, row-major with channels last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Downsampling factor relative to the image.
    pub stride: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, stride: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Structural(format!(
                "feature map {height}×{width}×{channels} with {} values",
                data.len()
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidInput("feature map stride must be positive".into()));
        }
        Ok(Self { height, width, channels, stride, data })
    }

    pub fn pixel(&self, r: usize, c: usize) -> &[f64] {
        let o = (r * self.width + c) * self.channels;
        &self.data[o..o + self.channels]
    }

    /// Bilinear sample at map coordinates, clamped to the valid rectangle.
    pub fn sample(&self, u: f64, v: f64, out: &mut [f64]) {
        let u = u.clamp(0.0, (self.width - 1) as f64);
        let v = v.clamp(0.0, (self.height - 1) as f64);
        let (c0, r0) = (u.floor() as usize, v.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(self.width - 1), (r0 + 1).min(self.height - 1));
        let (fu, fv) = (u - c0 as f64, v - r0 as f64);
        let w = [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv];
        out.fill(0.0);
        for (k, (r, c)) in [(r0, c0), (r0, c1), (r1, c0), (r1, c1)].into_iter().enumerate() {
            for (o, p) in out.iter_mut().zip(self.pixel(r, c)) {
                *o += w[k] * p;
            }
        }
    }
}

/// Metric depth per pixel; non-positive or non-finite entries are invalid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Structural(format!("depth map {height}×{width} with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    /// Nearest-pixel depth, `None` outside the image or where invalid.
    pub fn at(&self, u: f64, v: f64) -> Option<f64> {
        let (c, r) = (u.round(), v.round());
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            return None;
        }
        let d = self.data[r as usize * self.width + c as usize];
        (d.is_finite() && d > 0.0).then_some(d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub image_id: u32,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Matrix3<f64>,
    /// World to camera.
    pub extrinsics: Matrix4<f64>,
    /// One map per pipeline level, finest first.
    pub features: Vec<FeatureMap>,
    pub depth: Option<DepthMap>,
}

/// Camera-space point and pixel coordinates of a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub z: f64,
    pub u: f64,
    pub v: f64,
}

impl CameraView {
    pub fn validate(&self) -> Result<()> {
        validate_intrinsics(&self.intrinsics)?;
        validate_extrinsics(&self.extrinsics)?;
        if let Some(d) = &self.depth {
            if d.width != self.width || d.height != self.height {
                return Err(Error::Structural("depth map size differs from the image".into()));
            }
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsics.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        camera_center(&self.extrinsics)
    }

    /// `None` for points at or behind the camera plane.
    pub fn project(&self, p: [f64; 3]) -> Option<Projection> {
        let x = self.extrinsics * Vector4::new(p[0], p[1], p[2], 1.0);
        if x.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        let (a, b) = (x.x / x.z, x.y / x.z);
        Some(Projection { z: x.z, u: k[(0, 0)] * a + k[(0, 1)] * b + k[(0, 2)], v: k[(1, 1)] * b + k[(1, 2)] })
    }
}

pub fn validate_intrinsics(k: &Matrix3<f64>) -> Result<()> {
    let upper = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0 && k[(2, 2)] == 1.0;
    if !upper || k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 || !k.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput(format!("invalid intrinsics {k}")));
    }
    Ok(())
}

pub fn validate_extrinsics(p: &Matrix4<f64>) -> Result<()> {
    let r = p.fixed_view::<3, 3>(0, 0);
    let err = (r * r.transpose() - Matrix3::identity()).abs().max();
    let bottom = p[(3, 0)] == 0.0 && p[(3, 1)] == 0.0 && p[(3, 2)] == 0.0 && p[(3, 3)] == 1.0;
    if !(err <= 1e-5) || (r.determinant() - 1.0).abs() > 1e-5 || !bottom {
        return Err(Error::InvalidInput(format!("extrinsics are not a rigid transform: {p}")));
    }
    Ok(())
}

pub fn camera_center(p: &Matrix4<f64>) -> Vector3<f64> {
    let r = p.fixed_view::<3, 3>(0, 0);
    let t = p.fixed_view::<3, 1>(0, 3);
    -(r.transpose() * t)
}

/// Angle of the relative rotation between two world-to-camera poses, radians.
pub fn relative_angle(a: &Matrix4<f64>, b: &Matrix4<f64>) -> f64 {
    let ra = a.fixed_view::<3, 3>(0, 0);
    let rb = b.fixed_view::<3, 3>(0, 0);
    let tr = (ra * rb.transpose()).trace();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Minimum relative translation (m) and rotation (degrees) between kept frames.
pub const VIEW_MIN_TRANSLATION: f64 = 0.1;
pub const VIEW_MIN_ROTATION_DEG: f64 = 15.0;

/// Whether `b` moved far enough from `a`: translation and rotation must both exceed the gates.
pub fn passes_view_gate(a: &Matrix4<f64>, b: &Matrix4<f64>) -> bool {
    let dt = (camera_center(a) - camera_center(b)).norm();
    let da = relative_angle(a, b).to_degrees();
    dt > VIEW_MIN_TRANSLATION && da > VIEW_MIN_ROTATION_DEG
}

/// Greedy keyframe scan against the last kept pose, then a seeded uniform
/// subsample down to `limit`. Indices come back ascending.
pub fn select_views(trajectory: &[Matrix4<f64>], limit: usize, seed: u64) -> Result<Vec<usize>> {
    if trajectory.is_empty() {
        return Err(Error::InvalidInput("empty trajectory".into()));
    }
    let mut kept = vec![0];
    for (i, pose) in trajectory.iter().enumerate().skip(1) {
        if passes_view_gate(&trajectory[*kept.last().expect("nonempty")], pose) {
            kept.push(i);
        }
    }
    if kept.len() > limit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick: Vec<usize> = sample(&mut rng, kept.len(), limit).into_iter().map(|i| kept[i]).collect();
        pick.sort_unstable();
        kept = pick;
    }
    Ok(kept)
}

/// One view's features lifted onto a set of voxels.
#[derive(Clone, Debug)]
pub struct BackProjection {
    pub image_id: u32,
    pub volume: SparseVolume,
    pub seen: Vec<bool>,
}

/// Samples the view's level-`level` feature map at every voxel position of `set`.
pub fn back_project(view: &CameraView, set: &Arc<ActiveSet>, level: usize) -> Result<BackProjection> {
    let map = view
        .features
        .get(level)
        .ok_or_else(|| Error::Structural(format!("view {} has no feature map for level {level}", view.image_id)))?;
    let c = map.channels;
    let grid = *set.grid();
    let s = map.stride as f64;
    let coords = set.coords();
    let rows: Vec<Option<Vec<f64>>> = par::map_collect(set.len(), |i| {
        let p = view.project(grid.position(coords[i]))?;
        let (u, v) = ((p.u + 0.5) / s - 0.5, (p.v + 0.5) / s - 0.5);
        let inside = u >= -0.5 && v >= -0.5 && u <= map.width as f64 - 0.5 && v <= map.height as f64 - 0.5;
        inside.then(|| {
            let mut out = vec![0.0; c];
            map.sample(u, v, &mut out);
            out
        })
    });
    let mut features = vec![0.0; set.len() * c];
    let mut seen = vec![false; set.len()];
    for (i, row) in rows.into_iter().enumerate() {
        if let Some(row) = row {
            features[i * c..(i + 1) * c].copy_from_slice(&row);
            seen[i] = true;
        }
    }
    Ok(BackProjection { image_id: view.image_id, volume: SparseVolume::new(Arc::clone(set), c, features)?, seen })
}

/// Two-layer perceptron scoring each (voxel, view) pair from `feature ∥ variance`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightNetParams {
    pub name: String,
    pub feature_dim: usize,
}

impl WeightNetParams {
    pub fn new(name: impl Into<String>, feature_dim: usize) -> Self {
        Self { name: name.into(), feature_dim }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let c = self.feature_dim;
        init_linear(store, &format!("{}.l1", self.name), 2 * c, c, true, rng);
        init_linear(store, &format!("{}.l2", self.name), c, 1, true, rng);
    }

    pub fn forward(&self, s: &mut Session, x: NodeId) -> NodeId {
        let h = linear(s, x, &format!("{}.l1", self.name));
        let h = s.tape.gelu(h);
        linear(s, h, &format!("{}.l2", self.name))
    }
}

/// Seen (voxel, view) pairs ordered by voxel row, then by image id.
#[derive(Clone, Debug)]
pub struct FusionPairs {
    pub set: Arc<ActiveSet>,
    /// Output row of each pair.
    pub owner: Arc<[u32]>,
    /// Index into the back-projection list of each pair.
    pub view: Vec<usize>,
    pub offsets: Arc<[usize]>,
    /// Per-pair features, pairs × C.
    pub features: Tensor,
    /// Rows of the input set kept in the output (seen by at least one view).
    pub kept: Vec<usize>,
}

impl FusionPairs {
    pub fn new(volumes: &[BackProjection]) -> Result<Self> {
        let first = volumes.first().ok_or_else(|| Error::InvalidInput("fusion needs at least one view".into()))?;
        let set = first.volume.set();
        let c = first.volume.channels();
        for v in volumes {
            if !v.volume.set().same_coords(set) || v.volume.grid() != set.grid() || v.volume.channels() != c {
                return Err(Error::Structural("back-projections disagree on grid or channels".into()));
            }
        }
        let mut order: Vec<usize> = (0..volumes.len()).collect();
        order.sort_by_key(|&i| (volumes[i].image_id, i));
        let mut owner = Vec::new();
        let mut view = Vec::new();
        let mut offsets = vec![0];
        let mut kept = Vec::new();
        let mut feats = Vec::new();
        for r in 0..set.len() {
            let before = view.len();
            for &i in &order {
                if volumes[i].seen[r] {
                    owner.push(kept.len() as u32);
                    view.push(i);
                    feats.extend_from_slice(volumes[i].volume.row(r));
                }
            }
            if view.len() > before {
                kept.push(r);
                offsets.push(view.len());
            }
        }
        let coords = kept.iter().map(|&r| set.coords()[r]).collect();
        let out_set = Arc::new(ActiveSet::from_coords(*set.grid(), coords)?);
        let n = view.len();
        Ok(Self {
            set: out_set,
            owner: owner.into(),
            view,
            offsets: offsets.into(),
            features: Tensor::from_vec(n, c, feats),
            kept,
        })
    }

    pub fn len(&self) -> usize {
        self.view.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view.is_empty()
    }

    pub fn hit_counts(&self) -> Vec<u32> {
        self.offsets.windows(2).map(|w| (w[1] - w[0]) as u32).collect()
    }
}

/// Fused voxels: `weighted mean ∥ mean variance`, seen voxels only.
#[derive(Clone, Debug)]
pub struct FusedVolume {
    pub volume: SparseVolume,
    pub hits: Vec<u32>,
}

pub struct FusionOutput {
    /// voxels × 2C.
    pub fused: NodeId,
    /// pairs × 1 weight-net logits.
    pub logits: NodeId,
    /// pairs × 1 softmax weights over views.
    pub weights: NodeId,
}

/// Mean `V̄` over seeing views, `Var_i = (V_i - V̄)²`, weights
/// `softmax_views(net(V_i ∥ Var_i))`, output
/// `(1/N) Σ V_i w_i ∥ (1/N) Σ Var_i` with `N` the voxel's view count.
pub fn fuse_tape(s: &mut Session, pairs: &FusionPairs, net: &WeightNetParams) -> FusionOutput {
    let rows = pairs.set.len();
    let c = pairs.features.cols();
    let inv: Arc<[f64]> = pairs.hit_counts().iter().map(|&k| 1.0 / k as f64).collect();
    let f = s.tape.constant(pairs.features.clone());
    let sum = s.tape.segment_sum(f, Arc::clone(&pairs.owner), rows);
    let mean = s.tape.scale_rows(sum, Arc::clone(&inv));
    let mean_g = s.tape.gather(mean, Arc::clone(&pairs.owner));
    let dev = s.tape.sub(f, mean_g);
    let var = s.tape.square(dev);
    let input = s.tape.concat_cols(&[f, var]);
    let logits = net.forward(s, input);
    let weights = s.tape.segment_softmax(logits, Arc::clone(&pairs.offsets));
    let wide = s.tape.repeat_cols(weights, c);
    let weighted = s.tape.mul(f, wide);
    let wsum = s.tape.segment_sum(weighted, Arc::clone(&pairs.owner), rows);
    let fused = s.tape.scale_rows(wsum, Arc::clone(&inv));
    let vsum = s.tape.segment_sum(var, Arc::clone(&pairs.owner), rows);
    let vmean = s.tape.scale_rows(vsum, inv);
    let fused = s.tape.concat_cols(&[fused, vmean]);
    FusionOutput { fused, logits, weights }
}

/// Eager fusion. Unseen voxels are dropped.
pub fn fuse(volumes: &[BackProjection], net: &WeightNetParams, store: &ParamStore) -> Result<FusedVolume> {
    let pairs = FusionPairs::new(volumes)?;
    let c = pairs.features.cols();
    if c != net.feature_dim {
        return Err(Error::Structural(format!("features have {c} channels, weight net expects {}", net.feature_dim)));
    }
    let mut s = Session::with_tape(store, false, Tape::new());
    let out = fuse_tape(&mut s, &pairs, net);
    let data = s.tape.value(out.fused).data().to_vec();
    Ok(FusedVolume { volume: SparseVolume::new(Arc::clone(&pairs.set), 2 * c, data)?, hits: pairs.hit_counts() })
}

/// Scales pinhole intrinsics for an image resized by `factor`.
pub fn scale_intrinsics(k: &Matrix3<f64>, factor: f64) -> Matrix3<f64> {
    let mut out = *k;
    out[(0, 0)] *= factor;
    out[(0, 1)] *= factor;
    out[(1, 1)] *= factor;
    out[(0, 2)] = (k[(0, 2)] + 0.5) * factor - 0.5;
    out[(1, 2)] = (k[(1, 2)] + 0.5) * factor - 0.5;
    out
}

/// Grid covering a world-space box padded by one voxel at `voxel_size`.
pub fn grid_for_bounds(level: u8, voxel_size: f64, lo: [f64; 3], hi: [f64; 3]) -> Grid {
    let origin = lo.map(|v| v - voxel_size);
    let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / voxel_size).ceil() as u32 + 3).max(1));
    Grid::new(level, voxel_size, dims, origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Matrix4<f64> {
        let f = (target - eye).normalize();
        let up = if f.z.abs() > 0.9 { Vector3::x() } else { Vector3::z() };
        let x = up.cross(&f).normalize();
        let y = f.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), f.transpose()]);
        let t = -(r * eye);
        let mut p = Matrix4::identity();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        p.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        p
    }

    fn view(p: Matrix4<f64>, c: usize) -> CameraView {
        let k = Matrix3::new(40.0, 0.0, 15.5, 0.0, 40.0, 11.5, 0.0, 0.0, 1.0);
        let data = (0..24 * 32 * c).map(|i| (i as f64 * 0.37).sin()).collect();
        CameraView {
            image_id: 0,
            width: 32,
            height: 24,
            intrinsics: k,
            extrinsics: p,
            features: vec![FeatureMap::new(24, 32, c, 1, data).unwrap()],
            depth: None,
        }
    }

    #[test]
    fn validation_catches_bad_cameras() {
        let v = view(Matrix4::identity(), 2);
        assert!(v.validate().is_ok());
        let mut bad = v.clone();
        bad.intrinsics[(1, 0)] = 0.1;
        assert!(bad.validate().is_err());
        let mut bad = v.clone();
        bad.extrinsics[(0, 0)] = -1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let v = view(Matrix4::identity(), 2);
        let p = v.project([0.0, 0.0, 2.0]).unwrap();
        assert_eq!((p.u, p.v), (15.5, 11.5));
        assert!(v.project([0.0, 0.0, -1.0]).is_none());
    }

    #[test]
    fn view_gates() {
        let a = look_at(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros());
        assert_eq!(select_views(&[a, a], 10, 0).unwrap(), vec![0]);
        // 0.05 m and 20°: the translation gate fails.
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), 20f64.to_radians());
        let mut b = a;
        let r = a.fixed_view::<3, 3>(0, 0) * rot.matrix();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        let c_a = camera_center(&a);
        let c_b = c_a + Vector3::new(0.0, 0.05, 0.0);
        let t = -(r * c_b);
        b.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        assert!((relative_angle(&a, &b).to_degrees() - 20.0).abs() < 1e-9);
        assert!(!passes_view_gate(&a, &b));
        assert!(select_views(&[], 1, 0).is_err());
    }

    #[test]
    fn subsample_is_seeded() {
        let poses: Vec<_> = (0..300)
            .map(|i| {
                let a = i as f64 * 0.5;
                look_at(Vector3::new(2.0 * a.cos(), 2.0 * a.sin(), 0.3), Vector3::zeros())
            })
            .collect();
        let a = select_views(&poses, 150, 7).unwrap();
        assert_eq!(a.len(), 150);
        assert_eq!(a, select_views(&poses, 150, 7).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_view_fusion_is_identity() {
        let grid = Grid::new(0, 0.1, [4, 4, 4], [-0.2, -0.2, 1.0]);
        let set = Arc::new(ActiveSet::full(grid));
        let v = view(Matrix4::identity(), 3);
        let bp = back_project(&v, &set, 0).unwrap();
        let net = WeightNetParams::new("w", 3);
        let mut store = ParamStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let fused = fuse(std::slice::from_ref(&bp), &net, &store).unwrap();
        for (i, &r) in FusionPairs::new(std::slice::from_ref(&bp)).unwrap().kept.iter().enumerate() {
            let row = fused.volume.row(i);
            for k in 0..3 {
                assert!((row[k] - bp.volume.row(r)[k]).abs() < 1e-15);
                assert_eq!(row[3 + k], 0.0);
            }
        }
    }

    #[test]
    fn fusion_ignores_view_order() {
        let grid = Grid::new(0, 0.1, [4, 4, 4], [-0.2, -0.2, 1.0]);
        let set = Arc::new(ActiveSet::full(grid));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bps: Vec<BackProjection> = (0..3)
            .map(|i| {
                let eye = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 0.0);
                let mut v = view(look_at(eye, Vector3::new(0.0, 0.0, 1.2)), 2);
                v.image_id = i;
                back_project(&v, &set, 0).unwrap()
            })
            .collect();
        let net = WeightNetParams::new("w", 2);
        let mut store = ParamStore::new();
        net.init(&mut store, &mut rng);
        let a = fuse(&bps, &net, &store).unwrap();
        let rev: Vec<_> = bps.iter().rev().cloned().collect();
        let b = fuse(&rev, &net, &store).unwrap();
        assert_eq!(a.volume.features(), b.volume.features());
    }
}
