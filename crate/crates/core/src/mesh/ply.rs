//! Binary little-endian PLY (float x, y, z; uchar-count int face lists)
//! and plain-text XYZ point export.

use std::io::{BufRead, Write};

use super::TriangleMesh;
use crate::error::{Error, Result};

pub fn write_ply<W: Write>(mut w: W, mesh: &TriangleMesh) -> Result<()> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    let mut buf = header.into_bytes();
    buf.reserve(mesh.vertices.len() * 12 + mesh.triangles.len() * 13);
    for v in &mesh.vertices {
        for c in v {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    for t in &mesh.triangles {
        buf.push(3);
        for i in t {
            buf.extend_from_slice(&(*i as i32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Reads the layout produced by [`write_ply`]; other property layouts are rejected.
pub fn read_ply<R: BufRead>(mut r: R) -> Result<TriangleMesh> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("unexpected end of PLY header"));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(bad("missing ply magic"));
    }
    let (mut nv, mut nf) = (None, None);
    let mut props = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", ..] => return Err(bad(format!("unsupported PLY format: {l}"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => nv = Some(n.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            ["element", "face", n] => nf = Some(n.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            ["element", ..] => return Err(bad(format!("unsupported element: {l}"))),
            ["property", ..] => props.push(l.clone()),
            ["end_header"] => break,
            _ => return Err(bad(format!("unrecognized header line: {l}"))),
        }
    }
    let expected = [
        "property float x",
        "property float y",
        "property float z",
        "property list uchar int vertex_indices",
    ];
    if props != expected {
        return Err(bad(format!("unsupported PLY properties: {props:?}")));
    }
    let (nv, nf) = (nv.ok_or_else(|| bad("no vertex element"))?, nf.unwrap_or(0));
    let mut raw = vec![0u8; nv * 12];
    r.read_exact(&mut raw).map_err(|e| bad(format!("truncated vertices: {e}")))?;
    let vertices = raw
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]) as f64;
            [f(0), f(4), f(8)]
        })
        .collect();
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let mut rec = [0u8; 13];
        r.read_exact(&mut rec).map_err(|e| bad(format!("truncated faces: {e}")))?;
        if rec[0] != 3 {
            return Err(bad(format!("face with {} vertices", rec[0])));
        }
        let idx = |i: usize| i32::from_le_bytes([rec[i], rec[i + 1], rec[i + 2], rec[i + 3]]);
        let t = [idx(1), idx(5), idx(9)];
        if t.iter().any(|&v| v < 0) {
            return Err(bad("negative vertex index"));
        }
        triangles.push(t.map(|v| v as u32));
    }
    TriangleMesh::new(vertices, triangles)
}

/// One `x y z` line per vertex.
pub fn write_xyz<W: Write>(mut w: W, points: &[[f64; 3]]) -> Result<()> {
    let mut s = String::with_capacity(points.len() * 32);
    for p in points {
        s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_mesh_header() {
        let mut buf = Vec::new();
        write_ply(&mut buf, &TriangleMesh::default()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("element vertex 0\n"));
        assert!(text.ends_with("end_header\n"));
        assert!(read_ply(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn unit_triangle_round_trip() {
        let m = TriangleMesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.1]], vec![[0, 1, 2]]).unwrap();
        let mut buf = Vec::new();
        write_ply(&mut buf, &m).unwrap();
        let back = read_ply(&buf[..]).unwrap();
        assert_eq!(back.triangles, m.triangles);
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            assert_eq!(*a, b.map(|v| v as f32 as f64));
        }
        let mut again = Vec::new();
        write_ply(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn rejects_ascii() {
        let s = b"ply\nformat ascii 1.0\nend_header\n";
        assert!(read_ply(&s[..]).is_err());
    }
}
