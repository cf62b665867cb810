//! Ground truth, training losses and evaluation metrics.

mod loss;
mod metrics;
mod tsdf;

use std::sync::Arc;

pub use loss::{
    bce, log_transform, occupancy_loss, occupancy_loss_tape, occupancy_loss_values, projection_targets, projection_weight_loss,
    projection_weight_loss_tape, total_loss, tsdf_loss, tsdf_loss_tape, tsdf_loss_values, LossTerms, LossWeights,
    PROB_CLAMP,
};
pub use metrics::{depth_metrics, mesh_metrics, nearest_distances, sample_points, MetricsReport, PointIndex};
pub use tsdf::{TsdfVolume, TRUNCATION_VOXELS};

pub(crate) use loss::lookup_targets;

use crate::voxel::{ActiveSet, OccupancyVolume};

/// Occupied iff `|tsdf| ≤ 1` and not flagged as free space, over every cell.
pub fn occupancy_gt(tsdf: &TsdfVolume) -> OccupancyVolume {
    let set = Arc::new(ActiveSet::full(*tsdf.grid()));
    let values = tsdf
        .values()
        .iter()
        .zip(tsdf.free())
        .map(|(v, &free)| if !free && v.abs() <= 1.0 { 1.0 } else { 0.0 })
        .collect();
    OccupancyVolume::new(set, values).expect("binary values")
}

/// Coarser occupancy: each parent takes the max over its children.
pub fn pool_occupancy(occ: &OccupancyVolume) -> OccupancyVolume {
    let map = occ.set().downsample_map();
    let values = (0..map.coarse().len())
        .map(|p| map.children(p).iter().map(|&c| occ.values()[c as usize]).fold(0.0, f64::max))
        .collect();
    OccupancyVolume::new(Arc::clone(map.coarse()), values).expect("max of valid values")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{Grid, VoxelCoord};

    #[test]
    fn threshold_and_free_flag() {
        let g = Grid::new(0, 0.04, [1, 1, 4], [0.0; 3]);
        let t = TsdfVolume::with_free(g, vec![0.5, 1.0, -1.0, 1.0], vec![false, false, false, true]).unwrap();
        assert_eq!(occupancy_gt(&t).values(), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn rethresholding_is_idempotent() {
        let g = Grid::new(0, 0.04, [6; 3], [-0.1; 3]);
        let t = TsdfVolume::from_sdf(g, |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.08);
        let o = occupancy_gt(&t);
        let again: Vec<f64> = o.values().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        assert_eq!(again, o.values());
    }

    #[test]
    fn pooling_takes_max() {
        let g = Grid::new(0, 0.04, [2, 2, 2], [0.0; 3]);
        let mut v = vec![1.0; 8];
        v[3] = -0.2;
        let t = TsdfVolume::new(g, v).unwrap();
        let p = pool_occupancy(&occupancy_gt(&t));
        assert_eq!(p.values(), &[1.0]);
        assert_eq!(p.get(VoxelCoord::new(0, 0, 0)), Some(1.0));
        assert_eq!(p.level(), 1);
    }
}
