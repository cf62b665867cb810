//! Mesh (point sampled) and depth-map evaluation metrics.

use std::collections::HashMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::par;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chamfer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fscore: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abs_rel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abs_diff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sq_rel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta3: Option<f64>,
}

impl MetricsReport {
    fn fields(&self) -> [(&'static str, Option<f64>); 13] {
        [
            ("acc", self.acc),
            ("comp", self.comp),
            ("chamfer", self.chamfer),
            ("prec", self.prec),
            ("recall", self.recall),
            ("fscore", self.fscore),
            ("abs_rel", self.abs_rel),
            ("abs_diff", self.abs_diff),
            ("sq_rel", self.sq_rel),
            ("rmse", self.rmse),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta3", self.delta3),
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }

    /// One `key: value` line per present metric.
    pub fn to_text(&self) -> String {
        self.fields()
            .iter()
            .filter_map(|(k, v)| v.map(|v| format!("{k}: {v}\n")))
            .collect()
    }

    /// Fields present in `other` replace those in `self`.
    pub fn merge(&mut self, other: &MetricsReport) {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(acc, comp, chamfer, prec, recall, fscore, abs_rel, abs_diff, sq_rel, rmse, delta1, delta2, delta3);
    }
}

/// `n` points sampled uniformly by area. The same seed and mesh give the same points.
pub fn sample_points(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    let areas: Vec<f64> = (0..mesh.triangles.len()).map(|i| mesh.area(i)).collect();
    let dist = WeightedIndex::new(&areas)
        .map_err(|e| Error::InvalidInput(format!("mesh cannot be area-sampled: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let [a, b, c] = mesh.triangle(dist.sample(&mut rng));
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            let (u, v) = (s * (1.0 - r2), s * r2);
            [0, 1, 2].map(|k| a[k] + u * (b[k] - a[k]) + v * (c[k] - a[k]))
        })
        .collect())
}

/// Uniform hash grid over a point set for exact nearest-neighbor queries.
pub struct PointIndex {
    points: Vec<[f64; 3]>,
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl PointIndex {
    pub fn new(points: Vec<[f64; 3]>, cell: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("empty point set".into()));
        }
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::InvalidInput(format!("cell size {cell}")));
        }
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let (mut lo, mut hi) = ([i64::MAX; 3], [i64::MIN; 3]);
        for (i, p) in points.iter().enumerate() {
            let k = key(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            cells.entry(k).or_default().push(i as u32);
        }
        Ok(Self { points, cell, cells, lo, hi })
    }

    /// Euclidean distance to the nearest indexed point.
    pub fn nearest(&self, q: &[f64; 3]) -> f64 {
        let k = key(q, self.cell);
        let mut best = f64::INFINITY;
        // Ring r covers every point within distance r·cell of q.
        let max_r = (0..3).map(|a| (k[a] - self.lo[a]).abs().max((k[a] - self.hi[a]).abs())).max().unwrap();
        for r in 0..=max_r {
            if (r - 1) as f64 * self.cell >= best.sqrt() && r > 0 {
                break;
            }
            for_ring(k, r, |c| {
                if let Some(ids) = self.cells.get(&c) {
                    for &i in ids {
                        let p = &self.points[i as usize];
                        let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                        best = best.min(d);
                    }
                }
            });
        }
        best.sqrt()
    }
}

fn key(p: &[f64; 3], cell: f64) -> [i64; 3] {
    p.map(|v| (v / cell).floor() as i64)
}

/// Visits the cells at Chebyshev distance exactly `r` from `k`.
fn for_ring(k: [i64; 3], r: i64, mut f: impl FnMut([i64; 3])) {
    for dx in -r..=r {
        for dy in -r..=r {
            let edge = dx.abs() == r || dy.abs() == r;
            let step = if edge || r == 0 { 1 } else { 2 * r };
            let mut dz = -r;
            while dz <= r {
                f([k[0] + dx, k[1] + dy, k[2] + dz]);
                dz += step.max(1);
            }
        }
    }
}

/// Distance from each point of `from` to its nearest point in `to`.
pub fn nearest_distances(from: &[[f64; 3]], to: &[[f64; 3]], cell: f64) -> Result<Vec<f64>> {
    let index = PointIndex::new(to.to_vec(), cell)?;
    Ok(par::map_collect(from.len(), |i| index.nearest(&from[i])))
}

/// Acc, Comp, Chamfer, Prec, Recall and F-score at threshold `tau` (strict `<`).
pub fn mesh_metrics(pred: &TriangleMesh, gt: &TriangleMesh, tau: f64, samples: usize, seed: u64) -> Result<MetricsReport> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::InvalidInput("mesh metrics need two non-empty meshes".into()));
    }
    if samples == 0 {
        return Err(Error::InvalidInput("zero samples".into()));
    }
    let p = sample_points(pred, samples, seed)?;
    let g = sample_points(gt, samples, seed)?;
    let cell = tau.max(1e-6);
    let d_pg = nearest_distances(&p, &g, cell)?;
    let d_gp = nearest_distances(&g, &p, cell)?;
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let frac = |d: &[f64]| d.iter().filter(|&&v| v < tau).count() as f64 / d.len() as f64;
    let (acc, comp) = (mean(&d_pg), mean(&d_gp));
    let (prec, recall) = (frac(&d_pg), frac(&d_gp));
    let fscore = if prec + recall > 0.0 { 2.0 * prec * recall / (prec + recall) } else { 0.0 };
    Ok(MetricsReport {
        acc: Some(acc),
        comp: Some(comp),
        chamfer: Some((acc + comp) / 2.0),
        prec: Some(prec),
        recall: Some(recall),
        fscore: Some(fscore),
        ..Default::default()
    })
}

fn valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// Depth errors over pixels valid in both maps.
pub fn depth_metrics(pred: &[f64], gt: &[f64]) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::Structural(format!("depth maps of {} and {} pixels", pred.len(), gt.len())));
    }
    let pairs: Vec<(f64, f64)> =
        pred.iter().zip(gt).filter(|(&p, &g)| valid_depth(p) && valid_depth(g)).map(|(&p, &g)| (p, g)).collect();
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no pixel is valid in both depth maps".into()));
    }
    let n = pairs.len() as f64;
    let avg = |f: &dyn Fn(f64, f64) -> f64| pairs.iter().map(|&(p, g)| f(p, g)).sum::<f64>() / n;
    let delta = |i: i32| avg(&|p, g| if (p / g).max(g / p) < 1.25f64.powi(i) { 1.0 } else { 0.0 });
    Ok(MetricsReport {
        abs_rel: Some(avg(&|p, g| (p - g).abs() / g)),
        abs_diff: Some(avg(&|p, g| (p - g).abs())),
        sq_rel: Some(avg(&|p, g| (p - g).powi(2) / g)),
        rmse: Some(avg(&|p, g| (p - g).powi(2)).sqrt()),
        delta1: Some(delta(1)),
        delta2: Some(delta(2)),
        delta3: Some(delta(3)),
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(z: f64) -> TriangleMesh {
        TriangleMesh::new(
            vec![[0.0, 0.0, z], [1.0, 0.0, z], [1.0, 1.0, z], [0.0, 1.0, z]],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    fn brute(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn identical_meshes_are_perfect() {
        let m = square(0.0);
        let r = mesh_metrics(&m, &m, 0.05, 2000, 7).unwrap();
        assert_eq!((r.acc, r.comp, r.chamfer), (Some(0.0), Some(0.0), Some(0.0)));
        assert_eq!((r.prec, r.recall, r.fscore), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn threshold_is_strict() {
        let r = mesh_metrics(&square(0.05), &square(0.0), 0.05, 2000, 7).unwrap();
        assert_eq!(r.prec, Some(0.0));
        assert_eq!(r.recall, Some(0.0));
        assert_eq!(r.fscore, Some(0.0));
        let r = mesh_metrics(&square(0.05), &square(0.0), 0.0500001, 2000, 7).unwrap();
        assert_eq!(r.prec, Some(1.0));
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<[f64; 3]> = (0..300).map(|_| [rng.gen(), rng.gen(), rng.gen::<f64>() * 0.2]).collect();
        let b: Vec<[f64; 3]> = (0..200).map(|_| [rng.gen::<f64>() * 2.0 - 0.5, rng.gen(), rng.gen()]).collect();
        for cell in [0.01, 0.05, 0.3, 5.0] {
            assert_eq!(nearest_distances(&a, &b, cell).unwrap(), brute(&a, &b));
        }
    }

    #[test]
    fn chamfer_is_symmetric() {
        let a = square(0.0);
        let b = TriangleMesh::new(vec![[0.0, 0.0, 0.1], [1.5, 0.0, 0.0], [0.0, 1.2, 0.3]], vec![[0, 1, 2]]).unwrap();
        let ab = mesh_metrics(&a, &b, 0.05, 500, 3).unwrap();
        let ba = mesh_metrics(&b, &a, 0.05, 500, 3).unwrap();
        assert_eq!(ab.acc, ba.comp);
        assert_eq!(ab.comp, ba.acc);
        assert_eq!(ab.chamfer, ba.chamfer);
    }

    #[test]
    fn depth_identity_and_scale() {
        let g: Vec<f64> = (1..=40).map(|i| i as f64 * 0.5).collect();
        let r = depth_metrics(&g, &g).unwrap();
        assert_eq!((r.abs_rel, r.abs_diff, r.sq_rel, r.rmse), (Some(0.0), Some(0.0), Some(0.0), Some(0.0)));
        assert_eq!((r.delta1, r.delta2, r.delta3), (Some(1.0), Some(1.0), Some(1.0)));
        let p: Vec<f64> = g.iter().map(|v| v * 1.25).collect();
        let r = depth_metrics(&p, &g).unwrap();
        assert_eq!(r.delta1, Some(0.0));
        assert_eq!(r.delta2, Some(1.0));
    }

    #[test]
    fn depth_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g: Vec<f64> = (0..100).map(|i| if i % 10 == 0 { 0.0 } else { rng.gen_range(0.5..4.0) }).collect();
        let p: Vec<f64> = (0..100).map(|i| if i % 7 == 0 { f64::NAN } else { rng.gen_range(0.5..4.0) }).collect();
        let r = depth_metrics(&p, &g).unwrap();
        let (mut n, mut rel, mut sq, mut d1) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..100 {
            if g[i] > 0.0 && p[i].is_finite() {
                n += 1.0;
                rel += (p[i] - g[i]).abs() / g[i];
                sq += (p[i] - g[i]).powi(2);
                if f64::max(p[i] / g[i], g[i] / p[i]) < 1.25 {
                    d1 += 1.0;
                }
            }
        }
        assert!((r.abs_rel.unwrap() - rel / n).abs() < 1e-12);
        assert!((r.rmse.unwrap() - (sq / n).sqrt()).abs() < 1e-12);
        assert!((r.delta1.unwrap() - d1 / n).abs() < 1e-12);
    }

    #[test]
    fn report_text_and_json() {
        let mut r = depth_metrics(&[1.0], &[1.0]).unwrap();
        r.merge(&MetricsReport { fscore: Some(0.5), ..Default::default() });
        assert!(r.to_text().contains("fscore: 0.5\n"));
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
