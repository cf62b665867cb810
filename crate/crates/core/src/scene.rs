//! Analytic synthetic scenes: a signed distance function built from
//! primitives, an orbit of pinhole cameras, ray-marched depth maps and
//! feature maps, and the ground-truth TSDF and mesh.
//!
//! Feature channels per pixel, zero where the ray misses:
//! `[hit, nx, ny, nz, px, py, pz, depth]` with `n` the surface normal and
//! `p` the hit point relative to the scene center. Extra channels repeat
//! the depth band `sin(2π·depth / 0.1 k)`.
//!
//! Scene directory layout: `scene.toml`, `views/` (see
//! [`crate::fusion::save_views`]), `gt_mesh.ply`.

use std::f64::consts::PI;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{grid_for_bounds, load_views, save_views, CameraView, DepthMap, FeatureMap, EXTRACTOR_STRIDES};
use crate::mesh::{marching_cubes, write_ply, TriangleMesh};
use crate::par;
use crate::pipeline::Bounds;
use crate::supervision::TsdfVolume;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64 },
    Cuboid { center: [f64; 3], half: [f64; 3] },
    /// Half-space `n·p ≤ offset`.
    Plane { normal: [f64; 3], offset: f64 },
}

impl Primitive {
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => norm(sub(p, center)) - radius,
            Primitive::Cuboid { center, half } => {
                let q = [0, 1, 2].map(|a| (p[a] - center[a]).abs() - half[a]);
                let outside = norm(q.map(|v| v.max(0.0)));
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Primitive::Plane { normal, offset } => {
                let n = norm(normal);
                (normal[0] * p[0] + normal[1] * p[1] + normal[2] * p[2]) / n - offset
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    Union,
    Subtract,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub op: Combine,
    pub primitive: Primitive,
}

/// Cameras on a circle around `center`, all looking at it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orbit {
    pub center: [f64; 3],
    pub radius: f64,
    pub height: f64,
    pub views: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub shapes: Vec<Shape>,
    pub bounds: Bounds,
    pub orbit: Orbit,
    /// Image width and height in pixels, multiples of 16.
    pub image: [usize; 2],
    pub fov_deg: f64,
    pub feature_channels: usize,
    /// Fine voxel size of the ground-truth grid.
    pub voxel_size: f64,
}

impl Default for SceneSpec {
    /// Sphere and box with a spherical bite taken out of the box, eight views.
    fn default() -> Self {
        Self {
            seed: 0,
            shapes: vec![
                Shape { op: Combine::Union, primitive: Primitive::Sphere { center: [-0.18, 0.12, 0.0], radius: 0.14 } },
                Shape {
                    op: Combine::Union,
                    primitive: Primitive::Cuboid { center: [0.14, -0.08, -0.02], half: [0.14, 0.12, 0.1] },
                },
                Shape {
                    op: Combine::Subtract,
                    primitive: Primitive::Sphere { center: [0.22, -0.02, 0.1], radius: 0.09 },
                },
            ],
            bounds: Bounds { lo: [-0.4, -0.32, -0.24], hi: [0.4, 0.32, 0.24] },
            orbit: Orbit { center: [0.0; 3], radius: 1.3, height: 0.8, views: 8 },
            image: [128, 96],
            fov_deg: 60.0,
            feature_channels: 8,
            voxel_size: 0.04,
        }
    }
}

impl SceneSpec {
    /// Union is `min`, subtraction is `max(d, -s)`; applied in order. No
    /// shapes means empty space everywhere.
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        self.shapes.iter().fold(f64::INFINITY, |d, s| {
            let v = s.primitive.sdf(p);
            match s.op {
                Combine::Union => d.min(v),
                Combine::Subtract => d.max(-v),
            }
        })
    }

    /// Central-difference gradient, normalized.
    pub fn normal(&self, p: [f64; 3]) -> [f64; 3] {
        let h = 1e-5;
        let g = [0, 1, 2].map(|a| {
            let (mut lo, mut hi) = (p, p);
            lo[a] -= h;
            hi[a] += h;
            (self.sdf(hi) - self.sdf(lo)) / (2.0 * h)
        });
        let n = norm(g);
        if n > 0.0 {
            g.map(|v| v / n)
        } else {
            g
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.image;
        if w == 0 || h == 0 || w % 16 != 0 || h % 16 != 0 {
            return Err(Error::InvalidInput(format!("image {w}×{h} must be a positive multiple of 16")));
        }
        if self.orbit.views == 0 || self.feature_channels < 8 || !(self.voxel_size > 0.0) {
            return Err(Error::InvalidInput("orbit views, feature channels (≥ 8) and voxel size must be positive".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::InvalidInput(format!("field of view {}", self.fov_deg)));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        let [w, h] = self.image.map(|v| v as f64);
        let f = w / (2.0 * (self.fov_deg.to_radians() / 2.0).tan());
        Matrix3::new(f, 0.0, (w - 1.0) / 2.0, 0.0, f, (h - 1.0) / 2.0, 0.0, 0.0, 1.0)
    }

    /// World-to-camera poses; the seed rotates the orbit's start angle.
    pub fn poses(&self) -> Vec<Matrix4<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.orbit.views;
        let start = rng.gen_range(0.0..2.0 * PI / n as f64);
        let c = Vector3::from(self.orbit.center);
        (0..n)
            .map(|i| {
                let a = start + 2.0 * PI * i as f64 / n as f64;
                let eye = c + Vector3::new(self.orbit.radius * a.cos(), self.orbit.radius * a.sin(), self.orbit.height);
                look_at(eye, c)
            })
            .collect()
    }

    pub fn gt_tsdf(&self) -> TsdfVolume {
        let grid = grid_for_bounds(0, self.voxel_size, self.bounds.lo, self.bounds.hi);
        TsdfVolume::from_sdf(grid, |p| self.sdf(p))
    }

    /// Distance along a camera ray `o + t·d` (with `d_z = 1` in the camera
    /// frame, so `t` is the depth) to the first surface hit.
    fn march(&self, o: Vector3<f64>, d: Vector3<f64>, far: f64) -> Option<f64> {
        let len = d.norm();
        let mut t = 0.0;
        for _ in 0..512 {
            let p = o + d * t;
            let s = self.sdf([p.x, p.y, p.z]);
            if s < 1e-6 {
                return Some(t);
            }
            t += s / len;
            if t > far {
                break;
            }
        }
        None
    }

    /// Depth and feature maps for one pose.
    pub fn render(&self, id: u32, pose: &Matrix4<f64>) -> Result<CameraView> {
        let [w, h] = self.image;
        let k = self.intrinsics();
        let k_inv = k.try_inverse().expect("valid intrinsics");
        let r_t = pose.fixed_view::<3, 3>(0, 0).transpose();
        let eye = crate::fusion::camera_center(pose);
        let far = 4.0 * (self.orbit.radius + self.orbit.height.abs()) + 10.0;
        let center = Vector3::from(self.orbit.center);
        let ray = |u: f64, v: f64| -> Option<(f64, Vector3<f64>)> {
            let d_cam = k_inv * Vector3::new(u, v, 1.0);
            let d = r_t * d_cam;
            self.march(eye, d, far).map(|t| (t, eye + d * t))
        };
        let depth: Vec<f64> = par::map_collect(w * h, |i| {
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            ray(u, v).map_or(0.0, |(t, _)| t)
        });
        let c = self.feature_channels;
        let features = EXTRACTOR_STRIDES
            .iter()
            .map(|&s| {
                let (mw, mh) = (w / s, h / s);
                let rows: Vec<Vec<f64>> = par::map_collect(mw * mh, |i| {
                    let u = ((i % mw) as f64 + 0.5) * s as f64 - 0.5;
                    let v = ((i / mw) as f64 + 0.5) * s as f64 - 0.5;
                    let mut f = vec![0.0; c];
                    if let Some((t, p)) = ray(u, v) {
                        let n = self.normal([p.x, p.y, p.z]);
                        let q = p - center;
                        f[..8].copy_from_slice(&[1.0, n[0], n[1], n[2], q.x, q.y, q.z, t]);
                        for (j, x) in f[8..].iter_mut().enumerate() {
                            *x = (2.0 * PI * t / (0.1 * (j + 1) as f64)).sin();
                        }
                    }
                    f
                });
                FeatureMap::new(mh, mw, c, s, rows.concat())
            })
            .collect::<Result<Vec<_>>>()?;
        let view = CameraView {
            image_id: id,
            width: w,
            height: h,
            intrinsics: k,
            extrinsics: *pose,
            features,
            depth: Some(DepthMap::new(h, w, depth)?),
        };
        view.validate()?;
        Ok(view)
    }
}

/// World-to-camera pose at `eye` looking at `target`, world `+z` up,
/// camera `x` right, `y` down, `z` forward.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Matrix4<f64> {
    let f = (target - eye).normalize();
    let mut up = Vector3::z();
    if f.cross(&up).norm() < 1e-9 {
        up = Vector3::y();
    }
    let r = f.cross(&up).normalize();
    let d = f.cross(&r);
    let rot = Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
    let t = -(rot * eye);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub views: Vec<CameraView>,
    pub gt: TsdfVolume,
}

impl SyntheticScene {
    pub fn generate(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        let views = spec
            .poses()
            .iter()
            .enumerate()
            .map(|(i, p)| spec.render(i as u32, p))
            .collect::<Result<Vec<_>>>()?;
        let gt = spec.gt_tsdf();
        Ok(Self { spec, views, gt })
    }

    pub fn gt_mesh(&self) -> TriangleMesh {
        marching_cubes(&self.gt, 0.0)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(&self.spec).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join("scene.toml"), text)?;
        save_views(dir, &self.views)?;
        write_ply(BufWriter::new(fs::File::create(dir.join("gt_mesh.ply"))?), &self.gt_mesh())?;
        Ok(())
    }

    /// Reads the spec and views; the ground truth is recomputed from the spec.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec: SceneSpec = toml::from_str(&fs::read_to_string(dir.join("scene.toml"))?)
            .map_err(|e| Error::Format(format!("scene.toml: {e}")))?;
        spec.validate()?;
        let views = load_views(dir)?;
        let gt = spec.gt_tsdf();
        Ok(Self { spec, views, gt })
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives() {
        let s = Primitive::Sphere { center: [0.0; 3], radius: 0.5 };
        assert!((s.sdf([1.0, 0.0, 0.0]) - 0.5).abs() < 1e-15);
        let b = Primitive::Cuboid { center: [0.0; 3], half: [1.0, 1.0, 1.0] };
        assert!((b.sdf([0.0, 0.0, 0.0]) + 1.0).abs() < 1e-15);
        assert!((b.sdf([2.0, 2.0, 1.0]) - 2f64.sqrt()).abs() < 1e-15);
        let p = Primitive::Plane { normal: [0.0, 0.0, 2.0], offset: 0.1 };
        assert!((p.sdf([5.0, 1.0, 0.3]) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn poses_are_valid_and_look_inward() {
        let spec = SceneSpec::default();
        for pose in spec.poses() {
            crate::fusion::validate_extrinsics(&pose).unwrap();
            let c = pose * nalgebra::Vector4::new(0.0, 0.0, 0.0, 1.0);
            assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && c.z > 0.0);
        }
    }

    #[test]
    fn sphere_depth_matches_analytic() {
        let spec = SceneSpec {
            shapes: vec![Shape { op: Combine::Union, primitive: Primitive::Sphere { center: [0.0; 3], radius: 0.3 } }],
            orbit: Orbit { center: [0.0; 3], radius: 1.0, height: 0.0, views: 1 },
            image: [32, 32],
            ..SceneSpec::default()
        };
        let pose = look_at(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros());
        let v = spec.render(0, &pose).unwrap();
        let d = v.depth.as_ref().unwrap();
        // The principal point sits between the four central pixels.
        let k = spec.intrinsics();
        let (u, w) = (16.0, 16.0);
        let dir = k.try_inverse().unwrap() * Vector3::new(u, w, 1.0);
        let (a, b) = (dir.x, dir.y);
        // Ray (1 - t, -a t, -b t) after the camera rotation; hits |p| = 0.3.
        let qa = 1.0 + a * a + b * b;
        let t = (2.0 - (4.0 - 4.0 * qa * (1.0 - 0.09)).sqrt()) / (2.0 * qa);
        assert!((d.data[16 * 32 + 16] - t).abs() < 1e-5, "{} vs {t}", d.data[16 * 32 + 16]);
        assert_eq!(d.data[0], 0.0);
        let f = &v.features[0];
        assert_eq!(f.pixel(0, 0)[0], 0.0);
        assert_eq!(f.pixel(4, 4)[0], 1.0);
    }

    #[test]
    fn empty_composition_is_free_space() {
        let spec = SceneSpec { shapes: vec![], ..SceneSpec::default() };
        let t = spec.gt_tsdf();
        assert!(t.values().iter().all(|&v| v == 1.0));
        assert!(t.free().iter().all(|&f| f));
    }

    #[test]
    fn sphere_zero_crossing_at_radius() {
        let spec = SceneSpec {
            shapes: vec![Shape { op: Combine::Union, primitive: Primitive::Sphere { center: [0.0; 3], radius: 0.2 } }],
            bounds: Bounds { lo: [-0.3; 3], hi: [0.3; 3] },
            ..SceneSpec::default()
        };
        let m = marching_cubes(&spec.gt_tsdf(), 0.0);
        let err = m.vertices.iter().map(|v| (norm(*v) - 0.2).abs()).fold(0.0, f64::max);
        assert!(err < 0.5 * spec.voxel_size, "{err}");
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let spec = SceneSpec { image: [32, 32], ..SceneSpec::default() };
        let a = SyntheticScene::generate(spec.clone()).unwrap();
        let b = SyntheticScene::generate(spec).unwrap();
        assert_eq!(a.views, b.views);
        assert_eq!(a.gt, b.gt);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let c = SyntheticScene::load(dir.path()).unwrap();
        assert_eq!(c.spec, a.spec);
        assert_eq!(c.gt, a.gt);
        for (x, y) in c.views.iter().zip(&a.views) {
            assert_eq!(x.extrinsics, y.extrinsics);
            assert_eq!(x.intrinsics, y.intrinsics);
            let f32s: Vec<f64> = y.features[1].data.iter().map(|&v| v as f32 as f64).collect();
            assert_eq!(x.features[1].data, f32s);
        }
    }
}
