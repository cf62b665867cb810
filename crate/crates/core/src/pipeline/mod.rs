//! Coarse-to-fine reconstruction. Each of the three levels fuses the views'
//! back-projected features on its candidate voxels, runs its transformer
//! and predicts occupancy (coarse, medium) or TSDF (fine). Occupancy at one
//! level selects the children that become the next level's candidates.

mod blocks;
mod config;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{
    dilate_attention, dilate_attention_tape, occupancy_head, tsdf_head, DilateAttentionParams, DownFlow, HeadParams,
    LevelParams, VolNode,
};
pub use config::{LevelConfig, MetricsConfig, PipelineConfig, TrainConfig};

use crate::error::{Error, Result};
use crate::fusion::{back_project, fuse_tape, grid_for_bounds, CameraView, FusionPairs, WeightNetParams};
use crate::grad::{Adam, NodeId, ParamStore, Session, Tensor};
use crate::nn::{init_linear, linear};
use crate::supervision::{
    occupancy_gt, occupancy_loss_tape, pool_occupancy, projection_targets, projection_weight_loss_tape,
    tsdf_loss_tape, LossTerms, TsdfVolume, TRUNCATION_VOXELS,
};
use crate::voxel::{ActiveSet, Grid, OccupancyVolume, VoxelCoord};

/// Voxel-centre channels appended to the fused features.
pub const POSITION_CHANNELS: usize = 3;

/// Axis-aligned world box in metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

/// Parameter layout of the whole pipeline, derived from a configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: PipelineConfig,
}

/// Ground truth on the three level grids, finest first.
#[derive(Clone, Debug)]
pub struct Targets {
    pub tsdf: TsdfVolume,
    pub occupancy: [OccupancyVolume; 3],
}

impl Targets {
    pub fn from_tsdf(tsdf: TsdfVolume) -> Self {
        let o0 = occupancy_gt(&tsdf);
        let o1 = pool_occupancy(&o0);
        let o2 = pool_occupancy(&o1);
        Self { tsdf, occupancy: [o0, o1, o2] }
    }
}

/// Tape nodes of one level of a forward pass.
#[derive(Clone, Debug)]
pub struct LevelTrace {
    pub level: usize,
    pub pairs: FusionPairs,
    /// Weight-net logit per fusion pair.
    pub view_logits: NodeId,
    pub view_weights: NodeId,
    pub output: VolNode,
    /// Occupancy probability (coarse, medium) or TSDF (fine) per output voxel.
    pub head: NodeId,
}

/// Levels of a forward pass, coarse first.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub grids: [Grid; 3],
    pub levels: Vec<LevelTrace>,
}

/// Inference result.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// Coarse then medium.
    pub occupancy: Vec<OccupancyVolume>,
    /// Fine-level predictions on the active voxels.
    pub fine_set: Arc<ActiveSet>,
    pub fine_values: Vec<f64>,
    /// Densified fine TSDF, inactive voxels free at +1.
    pub tsdf: TsdfVolume,
}

impl Model {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn level(&self, level: usize) -> LevelParams {
        let l = self.config.level(level);
        LevelParams {
            name: format!("l{level}"),
            widths: self.config.widths(level),
            heads: l.heads,
            window: l.window,
            global_cap: self.config.global_cap,
        }
    }

    pub fn weight_net(&self, level: usize) -> WeightNetParams {
        WeightNetParams::new(format!("l{level}.wnet"), self.config.feature_channels)
    }

    pub fn head(&self, level: usize) -> HeadParams {
        HeadParams::new(format!("l{level}.head"), self.config.widths(level)[0])
    }

    fn input_key(level: usize) -> String {
        format!("l{level}.in")
    }

    pub fn init(&self) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut store = ParamStore::new();
        for level in (0..3).rev() {
            self.weight_net(level).init(&mut store, &mut rng);
            let w = self.config.widths(level)[0];
            let input = 2 * self.config.feature_channels + POSITION_CHANNELS;
            init_linear(&mut store, &Self::input_key(level), input, w, true, &mut rng);
            self.level(level).init(&mut store, &mut rng);
            self.head(level).init(&mut store, &mut rng);
        }
        store
    }

    /// Fine, medium and coarse grids for a scene box. The fine grid pads the
    /// box by one voxel; coarser grids halve it.
    pub fn grids(&self, bounds: &Bounds) -> Result<[Grid; 3]> {
        let coarse = self.config.coarse.voxel_size;
        if (0..3).any(|a| !(bounds.hi[a] - bounds.lo[a] >= coarse)) {
            return Err(Error::DegenerateScene { level: 2 });
        }
        let fine = grid_for_bounds(0, self.config.fine.voxel_size, bounds.lo, bounds.hi);
        let medium = fine.coarser();
        Ok([fine, medium, medium.coarser()])
    }

    /// Records the coarse-to-fine pass. With `teacher`, the next level's
    /// candidates come from ground-truth occupancy instead of predictions.
    pub fn forward_tape(
        &self,
        s: &mut Session,
        views: &[CameraView],
        bounds: &Bounds,
        teacher: Option<&Targets>,
    ) -> Result<ForwardTrace> {
        if views.is_empty() {
            return Err(Error::InvalidInput("reconstruction needs at least one view".into()));
        }
        let grids = self.grids(bounds)?;
        let mut candidates = Arc::new(ActiveSet::full(grids[2]));
        let mut levels = Vec::with_capacity(3);
        for level in (0..3).rev() {
            let projections = views
                .iter()
                .map(|v| back_project(v, &candidates, level))
                .collect::<Result<Vec<_>>>()?;
            let pairs = FusionPairs::new(&projections)?;
            if pairs.set.is_empty() {
                return Err(Error::DegenerateScene { level: level as u8 });
            }
            let net = self.weight_net(level);
            if pairs.features.cols() != net.feature_dim {
                return Err(Error::Structural(format!(
                    "level {level} feature maps have {} channels, configured {}",
                    pairs.features.cols(),
                    net.feature_dim
                )));
            }
            let fused = fuse_tape(s, &pairs, &net);
            let pos = s.tape.constant(positions(&pairs.set, bounds));
            let joined = s.tape.concat_cols(&[fused.fused, pos]);
            let x = linear(s, joined, &Self::input_key(level));
            let v = VolNode { set: Arc::clone(&pairs.set), x };
            let output = self.level(level).level_forward_tape(s, v)?;
            let head = if level > 0 {
                self.head(level).occupancy_tape(s, &output)
            } else {
                self.head(level).tsdf_tape(s, &output)
            };
            if level > 0 {
                let occ = match teacher {
                    Some(t) => crate::supervision::lookup_targets(&output.set, &t.occupancy[level])?,
                    None => s.tape.value(head).data().to_vec(),
                };
                let kept = output
                    .set
                    .coords()
                    .iter()
                    .zip(&occ)
                    .filter(|(_, &o)| o >= self.config.occupancy_threshold)
                    .map(|(c, _)| *c);
                candidates = Arc::new(children_set(kept, grids[level - 1])?);
                if candidates.is_empty() {
                    return Err(Error::DegenerateScene { level: level as u8 - 1 });
                }
            }
            levels.push(LevelTrace {
                level,
                pairs,
                view_logits: fused.logits,
                view_weights: fused.weights,
                output,
                head,
            });
        }
        Ok(ForwardTrace { grids, levels })
    }

    /// Weighted sum of the fine TSDF loss, the coarse and medium occupancy
    /// losses and one projection-weight loss per level.
    pub fn loss_tape(
        &self,
        s: &mut Session,
        trace: &ForwardTrace,
        views: &[CameraView],
        targets: &Targets,
    ) -> Result<(NodeId, LossTerms)> {
        let w = &self.config.loss;
        let mut terms = LossTerms::default();
        let mut parts = Vec::new();
        for lt in &trace.levels {
            let coords = lt.output.set.coords();
            if lt.level == 0 {
                if targets.tsdf.grid() != lt.output.set.grid() {
                    return Err(Error::Structural("ground-truth TSDF grid differs from the fine grid".into()));
                }
                let gt: Vec<f64> = coords.iter().map(|&c| targets.tsdf.get(c)).collect();
                let l = tsdf_loss_tape(s, lt.head, &gt)?;
                terms.tsdf = s.tape.value(l).item();
                parts.push(s.tape.scale(l, w.tsdf));
            } else {
                let gt = crate::supervision::lookup_targets(&lt.output.set, &targets.occupancy[lt.level])?;
                let l = occupancy_loss_tape(s, lt.head, &gt)?;
                terms.occupancy.push(s.tape.value(l).item());
                parts.push(s.tape.scale(l, w.occupancy));
            }
            let trunc = TRUNCATION_VOXELS * trace.grids[lt.level].voxel_size;
            let per_view = views
                .iter()
                .map(|v| projection_targets(v, &lt.pairs.set, trunc))
                .collect::<Result<Vec<_>>>()?;
            let pair_targets: Vec<Option<f64>> =
                (0..lt.pairs.len()).map(|p| per_view[lt.pairs.view[p]][lt.pairs.owner[p] as usize]).collect();
            if let Some(l) = projection_weight_loss_tape(s, lt.view_logits, &pair_targets)? {
                terms.projection.push(s.tape.value(l).item());
                parts.push(s.tape.scale(l, w.projection));
            }
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = s.tape.add(total, p);
        }
        Ok((total, terms))
    }

    /// One optimizer step on a single scene; returns the loss before the update.
    pub fn train_step(
        &self,
        store: &mut ParamStore,
        adam: &mut Adam,
        views: &[CameraView],
        bounds: &Bounds,
        targets: &Targets,
    ) -> Result<(f64, LossTerms)> {
        let (total, terms, grads) = {
            let mut s = Session::new(store, true);
            let teacher = self.config.train.teacher_forcing.then_some(targets);
            let trace = self.forward_tape(&mut s, views, bounds, teacher)?;
            let (loss, terms) = self.loss_tape(&mut s, &trace, views, targets)?;
            let g = s.tape.backward(loss)?;
            (s.tape.value(loss).item(), terms, s.param_grads(&g))
        };
        if !total.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite loss {total}")));
        }
        adam.step(store, &grads);
        Ok((total, terms))
    }

    /// Inference with predicted occupancy driving sparsification.
    pub fn reconstruct(&self, store: &ParamStore, views: &[CameraView], bounds: &Bounds) -> Result<Reconstruction> {
        let mut s = Session::new(store, false);
        let trace = self.forward_tape(&mut s, views, bounds, None)?;
        let mut occupancy = Vec::with_capacity(2);
        for lt in &trace.levels[..2] {
            occupancy.push(OccupancyVolume::new(Arc::clone(&lt.output.set), s.tape.value(lt.head).data().to_vec())?);
        }
        let fine = &trace.levels[2];
        let fine_values = s.tape.value(fine.head).data().to_vec();
        let grid = trace.grids[0];
        let mut values = vec![1.0; grid.num_cells() as usize];
        let mut free = vec![true; values.len()];
        for (c, &v) in fine.output.set.coords().iter().zip(&fine_values) {
            let i = grid.linear(*c);
            values[i] = v;
            free[i] = false;
        }
        Ok(Reconstruction {
            occupancy,
            fine_set: Arc::clone(&fine.output.set),
            fine_values,
            tsdf: TsdfVolume::with_free(grid, values, free)?,
        })
    }
}

/// Voxel centres relative to the middle of the scene box, one row each.
pub fn positions(set: &ActiveSet, bounds: &Bounds) -> Tensor {
    let grid = set.grid();
    let mid: [f64; 3] = std::array::from_fn(|a| 0.5 * (bounds.lo[a] + bounds.hi[a]));
    let mut data = Vec::with_capacity(set.len() * POSITION_CHANNELS);
    for &c in set.coords() {
        let p = grid.position(c);
        data.extend((0..3).map(|a| p[a] - mid[a]));
    }
    Tensor::from_vec(set.len(), POSITION_CHANNELS, data)
}

/// The in-grid children of every parent coordinate.
pub fn children_set(parents: impl IntoIterator<Item = VoxelCoord>, fine: Grid) -> Result<ActiveSet> {
    let mut coords = Vec::new();
    for p in parents {
        for o in 0..8 {
            let c = VoxelCoord::new(2 * p.x + (o >> 2), 2 * p.y + ((o >> 1) & 1), 2 * p.z + (o & 1));
            if fine.contains(c) {
                coords.push(c);
            }
        }
    }
    coords.sort_unstable();
    coords.dedup();
    ActiveSet::from_coords(fine, coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{finite_diff_check, GradCheckConfig};
    use crate::scene::{Combine, Primitive, SceneSpec, Shape, SyntheticScene};
    use crate::voxel::{sparsify, SparseVolume};
    use rand::Rng;

    fn micro_config() -> PipelineConfig {
        let level = |voxel_size| LevelConfig { voxel_size, channels: 4, depth: 1, window: 3, heads: 2 };
        PipelineConfig {
            fine: level(0.08),
            medium: level(0.16),
            coarse: level(0.32),
            ..PipelineConfig::default()
        }
    }

    fn micro_scene() -> SyntheticScene {
        let spec = SceneSpec {
            shapes: vec![Shape { op: Combine::Union, primitive: Primitive::Sphere { center: [0.0; 3], radius: 0.2 } }],
            bounds: Bounds { lo: [-0.33; 3], hi: [0.33; 3] },
            image: [32, 32],
            voxel_size: 0.08,
            ..SceneSpec::default()
        };
        SyntheticScene::generate(spec).unwrap()
    }

    #[test]
    fn children_match_sparsify_of_the_full_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fine = Grid::new(0, 0.04, [7, 6, 5], [0.0; 3]);
        let full = SparseVolume::zeros(Arc::new(ActiveSet::full(fine)), 1);
        let coarse = Arc::new(ActiveSet::full(fine.coarser()));
        let values: Vec<f64> = (0..coarse.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let occ = OccupancyVolume::new(Arc::clone(&coarse), values.clone()).unwrap();
        let kept = coarse.coords().iter().zip(&values).filter(|(_, &v)| v >= 0.5).map(|(c, _)| *c);
        let children = children_set(kept, fine).unwrap();
        assert_eq!(children.coords(), sparsify(&full, &occ, 0.5).unwrap().set().coords());
    }

    #[test]
    fn degenerate_bounds_are_reported() {
        let model = Model::new(micro_config()).unwrap();
        let flat = Bounds { lo: [0.0; 3], hi: [1.0, 1.0, 0.1] };
        assert!(matches!(model.grids(&flat), Err(Error::DegenerateScene { level: 2 })));
        let scene = micro_scene();
        let store = model.init();
        assert!(matches!(model.reconstruct(&store, &[], &scene.spec.bounds), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn grids_nest() {
        let model = Model::new(micro_config()).unwrap();
        let g = model.grids(&micro_scene().spec.bounds).unwrap();
        assert_eq!(g[1], g[0].coarser());
        assert_eq!(g[2], g[1].coarser());
        assert_eq!([g[0].level, g[1].level, g[2].level], [0, 1, 2]);
    }

    #[test]
    fn teacher_forcing_follows_ground_truth() {
        let model = Model::new(micro_config()).unwrap();
        let scene = micro_scene();
        let targets = Targets::from_tsdf(scene.gt.clone());
        let store = model.init();
        let mut s = Session::new(&store, false);
        let trace = model.forward_tape(&mut s, &scene.views, &scene.spec.bounds, Some(&targets)).unwrap();
        assert_eq!(trace.levels.iter().map(|l| l.level).collect::<Vec<_>>(), vec![2, 1, 0]);
        // Medium candidates are the children of occupied coarse voxels that some view sees.
        let coarse = &trace.levels[0];
        let occupied = coarse.output.set.coords().iter().filter(|c| targets.occupancy[2].get(**c) == Some(1.0)).copied();
        let expect = children_set(occupied, trace.grids[1]).unwrap();
        for c in trace.levels[1].pairs.set.coords() {
            assert!(expect.contains(*c));
        }
    }

    #[test]
    fn reconstruction_ranges_and_layout() {
        let model = Model::new(micro_config()).unwrap();
        let scene = micro_scene();
        let store = model.init();
        let rec = model.reconstruct(&store, &scene.views, &scene.spec.bounds).unwrap();
        assert_eq!(rec.occupancy.len(), 2);
        assert_eq!(rec.occupancy[0].level(), 2);
        for o in &rec.occupancy {
            assert!(o.values().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert!(rec.fine_values.iter().all(|&v| v > -1.0 && v < 1.0));
        assert_eq!(rec.fine_values.len(), rec.fine_set.len());
        for (c, &v) in rec.fine_set.coords().iter().zip(&rec.fine_values) {
            assert_eq!(rec.tsdf.get(*c), v);
        }
    }

    #[test]
    fn positions_are_centred() {
        let grid = Grid::new(0, 0.5, [3, 1, 1], [-0.5, 0.0, 0.0]);
        let set = ActiveSet::full(grid);
        let b = Bounds { lo: [-0.5, 0.0, 0.0], hi: [0.5, 0.0, 0.0] };
        let p = positions(&set, &b);
        assert_eq!(p.data(), &[-0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn training_step_lowers_the_loss() {
        let model = Model::new(micro_config()).unwrap();
        let scene = micro_scene();
        let targets = Targets::from_tsdf(scene.gt.clone());
        let mut store = model.init();
        let mut adam = Adam::new(1e-3);
        let (first, terms) = model.train_step(&mut store, &mut adam, &scene.views, &scene.spec.bounds, &targets).unwrap();
        assert_eq!(terms.occupancy.len(), 2);
        assert_eq!(terms.projection.len(), 3);
        let mut last = first;
        for _ in 0..10 {
            last = model.train_step(&mut store, &mut adam, &scene.views, &scene.spec.bounds, &targets).unwrap().0;
        }
        assert!(last < first, "{last} >= {first}");
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let model = Model::new(micro_config()).unwrap();
        let scene = micro_scene();
        let targets = Targets::from_tsdf(scene.gt.clone());
        let store = model.init();
        // The untrained network is sharply curved along some input biases, so
        // large gradients need a fine step while roundoff limits small ones.
        let reports: Vec<_> = [1e-5, 1e-7]
            .into_iter()
            .map(|step| {
                let cfg = GradCheckConfig { step, max_entries_per_tensor: 1, ..GradCheckConfig::default() };
                let build = |s: &mut Session| {
                    let trace = model.forward_tape(s, &scene.views, &scene.spec.bounds, Some(&targets))?;
                    Ok(model.loss_tape(s, &trace, &scene.views, &targets)?.0)
                };
                finite_diff_check(&store, build, &cfg).unwrap()
            })
            .collect();
        for (coarse, fine) in reports[0].tensors.iter().zip(&reports[1].tensors) {
            let best = coarse.max_rel_error.min(fine.max_rel_error);
            assert!(best <= reports[0].tolerance, "{}: {coarse:?} {fine:?}", coarse.name);
        }
    }
}
