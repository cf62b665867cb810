//! Marching cubes with a case table generated from face rules.
//!
//! Corner `k` of a cell sits at offset `(k & 1, k >> 1 & 1, k >> 2 & 1)`.
//! A corner is inside when its value is below the iso level. On each cube
//! face the sign changes are joined into segments; a face with all four
//! edges crossed (the ambiguous case) always cuts off its lowest corner and
//! the diagonally opposite one. The rule depends only on position, so a
//! face shared by two cells is split the same way from both sides, and it
//! is symmetric under flipping every sign.
//!
//! Segments are directed so that, with `u` the in-face direction pointing
//! from inside to outside and `f` the outward face normal, they run along
//! `u × f`. Directed segments chain into closed loops that are fan
//! triangulated, which gives triangles wound counter-clockwise around the
//! outward (positive-side) normal.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::TriangleMesh;
use crate::par;
use crate::supervision::TsdfVolume;
use crate::voxel::VoxelCoord;

/// Corner pairs of the 12 cube edges, lower corner first.
pub const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

fn corner(k: usize) -> [i32; 3] {
    [(k & 1) as i32, (k >> 1 & 1) as i32, (k >> 2 & 1) as i32]
}

fn edge_of(a: usize, b: usize) -> usize {
    let (a, b) = (a.min(b), a.max(b));
    EDGES.iter().position(|&e| e == (a, b)).expect("cube edge")
}

/// Face corners in cyclic order with the outward normal.
fn faces() -> [([usize; 4], [i32; 3]); 6] {
    [
        ([0, 2, 6, 4], [-1, 0, 0]),
        ([1, 3, 7, 5], [1, 0, 0]),
        ([0, 1, 5, 4], [0, -1, 0]),
        ([2, 3, 7, 6], [0, 1, 0]),
        ([0, 1, 3, 2], [0, 0, -1]),
        ([4, 5, 7, 6], [0, 0, 1]),
    ]
}

fn cross(a: [i32; 3], b: [i32; 3]) -> [i32; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [i32; 3], b: [i32; 3]) -> i32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Doubled coordinates of an edge midpoint.
fn mid2(e: usize) -> [i32; 3] {
    let (a, b) = EDGES[e];
    let (ca, cb) = (corner(a), corner(b));
    [ca[0] + cb[0], ca[1] + cb[1], ca[2] + cb[2]]
}

/// Triangles for one case as edge-index triples.
fn case_triangles(case: usize) -> Vec<[u8; 3]> {
    let inside = |k: usize| case >> k & 1 == 1;
    // next[e] = edge the directed segment starting at e runs to.
    let mut next: [Option<usize>; 12] = [None; 12];
    for (ring, f) in faces() {
        let crossed: Vec<usize> = (0..4)
            .filter(|&i| inside(ring[i]) != inside(ring[(i + 1) % 4]))
            .map(|i| edge_of(ring[i], ring[(i + 1) % 4]))
            .collect();
        let segments: Vec<(usize, usize)> = match crossed.len() {
            0 => Vec::new(),
            2 => vec![(crossed[0], crossed[1])],
            4 => {
                // ring[0] is the lowest corner of every face.
                let cut = |k: usize| {
                    let prev = ring[(k + 3) % 4];
                    let next = ring[(k + 1) % 4];
                    (edge_of(prev, ring[k]), edge_of(ring[k], next))
                };
                vec![cut(0), cut(2)]
            }
            _ => unreachable!("a face has an even number of sign changes"),
        };
        for (a, b) in segments {
            let (ma, mb) = (mid2(a), mid2(b));
            let dir = [mb[0] - ma[0], mb[1] - ma[1], mb[2] - ma[2]];
            let u = cross(f, dir);
            let m = [ma[0] + mb[0], ma[1] + mb[1], ma[2] + mb[2]];
            // The nearest corner on the u side of the segment belongs to the
            // region bordering it.
            let near = ring
                .iter()
                .copied()
                .filter_map(|k| {
                    let c = corner(k);
                    let r = [4 * c[0] - m[0], 4 * c[1] - m[1], 4 * c[2] - m[2]];
                    (dot(r, u) > 0).then_some((dot(r, r), k))
                })
                .min()
                .expect("a corner on each side")
                .1;
            let (from, to) = if inside(near) { (b, a) } else { (a, b) };
            assert!(next[from].is_none(), "edge {from} starts two segments in case {case}");
            next[from] = Some(to);
        }
    }
    let mut tris = Vec::new();
    let mut seen = [false; 12];
    for start in 0..12 {
        if next[start].is_none() || seen[start] {
            continue;
        }
        let mut lp = vec![start];
        seen[start] = true;
        let mut e = next[start].expect("loop");
        while e != start {
            seen[e] = true;
            lp.push(e);
            e = next[e].unwrap_or_else(|| panic!("open loop in case {case}"));
        }
        for i in 1..lp.len() - 1 {
            tris.push([lp[0] as u8, lp[i] as u8, lp[i + 1] as u8]);
        }
    }
    tris
}

/// The 256-case table, built once.
pub fn case_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(case_triangles).collect())
}

/// Extracts the `iso` surface of a dense TSDF grid in world coordinates.
/// A grid without sign changes yields an empty mesh.
pub fn marching_cubes(tsdf: &TsdfVolume, iso: f64) -> TriangleMesh {
    let table = case_table();
    let grid = *tsdf.grid();
    let [nx, ny, nz] = grid.dims.map(|d| d as i32);
    if nx < 2 || ny < 2 || nz < 2 {
        return TriangleMesh::default();
    }
    // Per x-slab: triangles as global edge keys (linear corner index · 3 + axis).
    let slabs: Vec<Vec<[u64; 3]>> = par::map_collect((nx - 1) as usize, |x| {
        let x = x as i32;
        let mut out = Vec::new();
        for y in 0..ny - 1 {
            for z in 0..nz - 1 {
                let base = VoxelCoord::new(x, y, z);
                let mut case = 0usize;
                for k in 0..8 {
                    let c = corner(k);
                    if tsdf.get(base.offset(c[0], c[1], c[2])) < iso {
                        case |= 1 << k;
                    }
                }
                for t in &table[case] {
                    out.push(t.map(|e| {
                        let (a, b) = EDGES[e as usize];
                        let ca = corner(a);
                        let cb = corner(b);
                        let axis = (0..3).find(|&i| ca[i] != cb[i]).expect("axis");
                        let lo = base.offset(ca[0], ca[1], ca[2]);
                        grid.linear(lo) as u64 * 3 + axis as u64
                    }));
                }
            }
        }
        out
    });
    let mut mesh = TriangleMesh::default();
    let mut ids: HashMap<u64, u32> = HashMap::new();
    let step = [[1, 0, 0], [0, 1, 0], [0, 0, 1]];
    for tri in slabs.into_iter().flatten() {
        let idx = tri.map(|key| {
            *ids.entry(key).or_insert_with(|| {
                let axis = (key % 3) as usize;
                let lo = grid.coord_of((key / 3) as usize);
                let s = step[axis];
                let hi = lo.offset(s[0], s[1], s[2]);
                let (va, vb) = (tsdf.get(lo), tsdf.get(hi));
                let t = ((iso - va) / (vb - va)).clamp(0.0, 1.0);
                let mut p = grid.position(lo);
                p[axis] += t * grid.voxel_size;
                mesh.vertices.push(p);
                (mesh.vertices.len() - 1) as u32
            })
        });
        mesh.triangles.push(idx);
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::Grid;
    use std::collections::{BTreeSet, HashMap};

    #[test]
    fn trivial_cases_are_empty() {
        assert!(case_table()[0].is_empty());
        assert!(case_table()[255].is_empty());
        assert_eq!(case_table()[1].len(), 1);
    }

    #[test]
    fn complement_cases_reverse_winding() {
        for case in 0..256 {
            let a = &case_table()[case];
            let b = &case_table()[255 ^ case];
            let mut ea: Vec<(u8, u8)> = a.iter().flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]).collect();
            let mut eb: Vec<(u8, u8)> = b.iter().flat_map(|t| [(t[1], t[0]), (t[2], t[1]), (t[0], t[2])]).collect();
            // Boundary loops must coincide with flipped direction.
            let boundary = |v: &mut Vec<(u8, u8)>| {
                let set: std::collections::HashSet<(u8, u8)> = v.iter().copied().collect();
                v.retain(|&(p, q)| !set.contains(&(q, p)));
                v.sort_unstable();
            };
            boundary(&mut ea);
            boundary(&mut eb);
            assert_eq!(ea, eb, "case {case}");
        }
    }

    fn sphere(n: u32, r: f64) -> TsdfVolume {
        let h = 0.04;
        let o = -(n as f64 - 1.0) * h / 2.0;
        let g = Grid::new(0, h, [n; 3], [o; 3]);
        TsdfVolume::from_sdf(g, move |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r)
    }

    #[test]
    fn sphere_is_closed_and_outward() {
        let m = marching_cubes(&sphere(32, 0.5), 0.0);
        assert!(!m.triangles.is_empty());
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &m.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *directed.entry((a, b)).or_default() += 1;
            }
        }
        for (&(a, b), &k) in &directed {
            assert_eq!(k, 1);
            assert_eq!(directed.get(&(b, a)), Some(&1));
        }
        let mut outward = 0.0;
        for t in &m.triangles {
            let [a, b, c] = t.map(|i| m.vertices[i as usize]);
            let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
            outward += n[0] * a[0] + n[1] * a[1] + n[2] * a[2];
        }
        assert!(outward > 0.0);
    }

    #[test]
    fn sign_flip_reverses_orientation() {
        let t = sphere(16, 0.213);
        let a = marching_cubes(&t, 0.0);
        let b = marching_cubes(&t.negated(), 0.0);
        assert_eq!(a.triangles.len(), b.triangles.len());
        let key = |m: &TriangleMesh, t: [u32; 3]| {
            let p = t.map(|i| m.vertices[i as usize].map(f64::to_bits));
            let i = (0..3).min_by_key(|&i| p[i]).unwrap();
            [p[i], p[(i + 1) % 3], p[(i + 2) % 3]]
        };
        let ka: BTreeSet<_> = a.triangles.iter().map(|t| key(&a, *t)).collect();
        let kb: BTreeSet<_> = b.triangles.iter().map(|t| key(&b, [t[0], t[2], t[1]])).collect();
        assert_eq!(ka, kb);
    }

    #[test]
    fn uniform_grid_is_empty() {
        let g = Grid::new(0, 0.04, [5; 3], [0.0; 3]);
        assert!(marching_cubes(&TsdfVolume::empty(g), 0.0).triangles.is_empty());
    }
}
