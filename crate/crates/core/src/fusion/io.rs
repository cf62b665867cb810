//! View ingestion file set.
//!
//! ```text
//! views/0000/pose.txt        4×4 world-to-camera, row-major, whitespace separated
//! views/0000/intrinsics.txt  3×3, row-major
//! views/0000/maps.vfck       image_size [2], feat.<level> [H, W, C], optional depth [H, W]
//! ```
//!
//! The directory number is the image id.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4};

use super::{CameraView, DepthMap, FeatureMap};
use crate::container::{self, NamedTensor};
use crate::error::{Error, Result};

fn write_matrix(path: &Path, rows: usize, cols: usize, at: impl Fn(usize, usize) -> f64) -> Result<()> {
    let mut s = String::new();
    for r in 0..rows {
        let line: Vec<String> = (0..cols).map(|c| format!("{:.17e}", at(r, c))).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_matrix(path: &Path, n: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect::<Result<_>>()?;
    if vals.len() != n {
        return Err(Error::Format(format!("{}: expected {n} numbers, found {}", path.display(), vals.len())));
    }
    Ok(vals)
}

pub fn save_views(dir: impl AsRef<Path>, views: &[CameraView]) -> Result<()> {
    let root = dir.as_ref().join("views");
    fs::create_dir_all(&root)?;
    for v in views {
        let d = root.join(format!("{:04}", v.image_id));
        fs::create_dir_all(&d)?;
        write_matrix(&d.join("pose.txt"), 4, 4, |r, c| v.extrinsics[(r, c)])?;
        write_matrix(&d.join("intrinsics.txt"), 3, 3, |r, c| v.intrinsics[(r, c)])?;
        let mut tensors = vec![NamedTensor::new("image_size", vec![2], vec![v.height as f32, v.width as f32])?];
        for (l, m) in v.features.iter().enumerate() {
            tensors.push(NamedTensor::from_f64(
                format!("feat.{l}"),
                vec![m.height as u32, m.width as u32, m.channels as u32],
                &m.data,
            )?);
        }
        if let Some(dm) = &v.depth {
            tensors.push(NamedTensor::from_f64("depth", vec![dm.height as u32, dm.width as u32], &dm.data)?);
        }
        container::save(d.join("maps.vfck"), &tensors)?;
    }
    Ok(())
}

/// Loads every view under `dir/views`, ordered by image id.
pub fn load_views(dir: impl AsRef<Path>) -> Result<Vec<CameraView>> {
    let root = dir.as_ref().join("views");
    let mut ids: Vec<(u32, std::path::PathBuf)> = fs::read_dir(&root)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().parse::<u32>().ok()?;
            Some((name, e.path()))
        })
        .collect();
    ids.sort();
    let mut views = Vec::with_capacity(ids.len());
    for (id, d) in ids {
        let p = read_matrix(&d.join("pose.txt"), 16)?;
        let k = read_matrix(&d.join("intrinsics.txt"), 9)?;
        let tensors = container::load(d.join("maps.vfck"))?;
        let size = container::find(&tensors, "image_size")?;
        let (height, width) = (size.data[0] as usize, size.data[1] as usize);
        let mut features = Vec::new();
        while let Ok(t) = container::find(&tensors, &format!("feat.{}", features.len())) {
            let [h, w, c] = match t.dims.as_slice() {
                [h, w, c] => [*h as usize, *w as usize, *c as usize],
                _ => return Err(Error::Format(format!("{} must be rank 3", t.name))),
            };
            if w == 0 || width % w != 0 {
                return Err(Error::Format(format!("{}: width {w} does not divide image width {width}", t.name)));
            }
            features.push(FeatureMap::new(h, w, c, width / w, t.to_f64())?);
        }
        let depth = match container::find(&tensors, "depth") {
            Ok(t) => Some(DepthMap::new(height, width, t.to_f64())?),
            Err(_) => None,
        };
        let view = CameraView {
            image_id: id,
            width,
            height,
            intrinsics: Matrix3::from_row_slice(&k),
            extrinsics: Matrix4::from_row_slice(&p),
            features,
            depth,
        };
        view.validate()?;
        views.push(view);
    }
    if views.is_empty() {
        return Err(Error::InvalidInput(format!("no views under {}", root.display())));
    }
    Ok(views)
}
