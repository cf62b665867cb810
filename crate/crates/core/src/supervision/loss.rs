//! Training losses, each in an eager form and a tape form.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::TsdfVolume;
use crate::error::{Error, Result};
use crate::fusion::CameraView;
use crate::grad::{sigmoid, NodeId, Session, Tensor};
use crate::voxel::{ActiveSet, OccupancyVolume};

pub const PROB_CLAMP: f64 = 1e-6;

/// Two-sided binary cross-entropy with the probability clamped away from 0 and 1.
pub fn bce(p: f64, target: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Sign-preserving log transform `sign(x) · ln(1 + |x|)`.
pub fn log_transform(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Mean over voxels of `|T(s) − T(ŝ)|` with `T` = [`log_transform`].
pub fn tsdf_loss_values(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred.len(), gt.len())?;
    Ok(pred.iter().zip(gt).map(|(&s, &g)| (log_transform(s) - log_transform(g)).abs()).sum::<f64>() / pred.len() as f64)
}

/// Dense TSDF loss over every cell of matching grids.
pub fn tsdf_loss(pred: &TsdfVolume, gt: &TsdfVolume) -> Result<f64> {
    if pred.grid() != gt.grid() {
        return Err(Error::Structural("TSDF grids differ".into()));
    }
    tsdf_loss_values(pred.values(), gt.values())
}

/// `pred` is `n × 1`.
pub fn tsdf_loss_tape(s: &mut Session, pred: NodeId, gt: &[f64]) -> Result<NodeId> {
    check_pair(s.tape.shape(pred).0, gt.len())?;
    let n = gt.len();
    let sign: Vec<f64> = s.tape.value(pred).data().iter().map(|v| v.signum()).collect();
    let t_gt = s.tape.constant(Tensor::from_vec(n, 1, gt.iter().map(|&g| log_transform(g)).collect()));
    // sign(s) · ln(1 + |s|), with the sign held fixed as in `abs`.
    let a = s.tape.abs(pred);
    let a = s.tape.affine(a, 1.0, 1.0);
    let l = s.tape.log(a);
    let l = s.tape.scale_rows(l, sign.into());
    let d = s.tape.sub(l, t_gt);
    let d = s.tape.abs(d);
    Ok(s.tape.mean_all(d))
}

pub fn occupancy_loss_values(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred.len(), gt.len())?;
    Ok(pred.iter().zip(gt).map(|(&p, &t)| bce(p, t)).sum::<f64>() / pred.len() as f64)
}

/// Mean BCE over the predicted voxels; each is looked up in `gt` by coordinate.
pub fn occupancy_loss(pred: &OccupancyVolume, gt: &OccupancyVolume) -> Result<f64> {
    let targets = lookup_targets(pred.set(), gt)?;
    occupancy_loss_values(pred.values(), &targets)
}

pub(crate) fn lookup_targets(set: &ActiveSet, gt: &OccupancyVolume) -> Result<Vec<f64>> {
    if set.grid().level != gt.level() {
        return Err(Error::Structural(format!("prediction level {} vs ground truth level {}", set.grid().level, gt.level())));
    }
    set.coords()
        .iter()
        .map(|&c| gt.get(c).ok_or_else(|| Error::Structural(format!("no ground truth at {c:?}"))))
        .collect()
}

/// `prob` is `n × 1` of probabilities.
pub fn occupancy_loss_tape(s: &mut Session, prob: NodeId, gt: &[f64]) -> Result<NodeId> {
    check_pair(s.tape.shape(prob).0, gt.len())?;
    Ok(bce_tape(s, prob, gt))
}

fn bce_tape(s: &mut Session, prob: NodeId, targets: &[f64]) -> NodeId {
    let n = targets.len();
    let p = s.tape.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = s.tape.log(p);
    let q = s.tape.affine(p, -1.0, 1.0);
    let log_q = s.tape.log(q);
    let t = s.tape.constant(Tensor::from_vec(n, 1, targets.to_vec()));
    let u = s.tape.constant(Tensor::from_vec(n, 1, targets.iter().map(|t| 1.0 - t).collect()));
    let a = s.tape.mul(log_p, t);
    let b = s.tape.mul(log_q, u);
    let sum = s.tape.add(a, b);
    let mean = s.tape.mean_all(sum);
    s.tape.scale(mean, -1.0)
}

/// Per voxel of `set`: `Some(1)` when the voxel center projects within
/// `trunc` of the view's depth, `Some(0)` when it projects onto a valid depth
/// pixel farther away, `None` when invisible or without depth.
pub fn projection_targets(view: &CameraView, set: &ActiveSet, trunc: f64) -> Result<Vec<Option<f64>>> {
    let depth = view
        .depth
        .as_ref()
        .ok_or_else(|| Error::Precondition(format!("view {} has no depth map", view.image_id)))?;
    let grid = *set.grid();
    Ok(set
        .coords()
        .iter()
        .map(|&c| {
            let p = view.project(grid.position(c))?;
            let d = depth.at(p.u, p.v)?;
            Some(if (p.z - d).abs() < trunc { 1.0 } else { 0.0 })
        })
        .collect())
}

/// Mean `BCE(σ(logit), target)` over pairs with a target.
pub fn projection_weight_loss(logits: &[f64], targets: &[Option<f64>]) -> Result<Option<f64>> {
    check_pair(logits.len(), targets.len())?;
    let terms: Vec<f64> = logits
        .iter()
        .zip(targets)
        .filter_map(|(&l, t)| t.map(|t| bce(sigmoid(l), t)))
        .collect();
    Ok((!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64))
}

/// `logits` is `pairs × 1`; `None` when no pair has a target.
pub fn projection_weight_loss_tape(s: &mut Session, logits: NodeId, targets: &[Option<f64>]) -> Result<Option<NodeId>> {
    check_pair(s.tape.shape(logits).0, targets.len())?;
    let (rows, vals): (Vec<u32>, Vec<f64>) =
        targets.iter().enumerate().filter_map(|(i, t)| t.map(|t| (i as u32, t))).unzip();
    if rows.is_empty() {
        return Ok(None);
    }
    let l = s.tape.gather(logits, Arc::from(rows));
    let p = s.tape.sigmoid(l);
    Ok(Some(bce_tape(s, p, &vals)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub tsdf: f64,
    pub occupancy: f64,
    pub projection: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { tsdf: 1.0, occupancy: 1.0, projection: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub tsdf: f64,
    /// One per supervised occupancy level.
    pub occupancy: Vec<f64>,
    /// One per (level, view) with visible voxels.
    pub projection: Vec<f64>,
}

/// `w_tsdf·L⁰ + w_occ·Σ L^l + w_proj·Σ L_w`.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> f64 {
    weights.tsdf * terms.tsdf
        + weights.occupancy * terms.occupancy.iter().sum::<f64>()
        + weights.projection * terms.projection.iter().sum::<f64>()
}

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Structural(format!("{a} predictions vs {b} targets")));
    }
    if a == 0 {
        return Err(Error::InvalidInput("loss over zero elements".into()));
    }
    Ok(())
}
