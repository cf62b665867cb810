//! Per-level transformer: dilate-attention, the down flow, the global
//! bottom block, the up flow with skips, and the two output heads.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_block_tape, global_context_tape, AttentionBlockParams, AttnPairs, GlobalContextParams};
use crate::error::{Error, Result};
use crate::grad::{NodeId, ParamStore, Session, Tape, NO_ROW};
use crate::nn::{conv3, init_conv3, init_linear, linear};
use crate::voxel::{upsample_rows, ActiveSet, OccupancyVolume, SampleMap, SparseVolume};

/// A volume under construction on a tape: an active set and its `n × C` features.
#[derive(Clone, Debug)]
pub struct VolNode {
    pub set: Arc<ActiveSet>,
    pub x: NodeId,
}

impl VolNode {
    pub fn input(s: &mut Session, vol: &SparseVolume) -> Self {
        Self { set: Arc::clone(vol.set()), x: s.tape.constant(vol.to_tensor()) }
    }

    pub fn read(&self, tape: &Tape) -> Result<SparseVolume> {
        let t = tape.value(self.x);
        SparseVolume::new(Arc::clone(&self.set), t.cols(), t.data().to_vec())
    }
}

/// Runs `f` on an inference tape.
pub(crate) fn eager<T>(store: &ParamStore, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
    let mut s = Session::new(store, false);
    f(&mut s)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DilateAttentionParams {
    pub name: String,
    pub channels: usize,
    pub heads: usize,
}

impl DilateAttentionParams {
    pub fn new(name: impl Into<String>, channels: usize, heads: usize) -> Self {
        Self { name: name.into(), channels, heads }
    }

    fn dilation(&self) -> String {
        format!("{}.dil", self.name)
    }

    fn join(&self) -> String {
        format!("{}.join", self.name)
    }

    pub fn block(&self) -> AttentionBlockParams {
        AttentionBlockParams::new(format!("{}.attn", self.name), self.channels, self.heads).expect("validated widths")
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let c = self.channels;
        init_conv3(store, &self.dilation(), c, c, rng);
        self.block().init(store, rng);
        init_linear(store, &self.join(), 2 * c, c, true, rng);
    }
}

/// Dilates the active set, fills the new voxels with a kernel-3 map of their
/// active neighbors, attends over the dilated set and joins
/// `pre-attention ∥ attended` back to `C` channels.
pub fn dilate_attention_tape(s: &mut Session, v: &VolNode, p: &DilateAttentionParams, n: u32) -> VolNode {
    if v.set.is_empty() {
        return v.clone();
    }
    let dset = Arc::new(v.set.dilated());
    let table: Arc<[u32]> = dset.kernel_table(&v.set).into();
    let grown = conv3(s, v.x, table, &p.dilation());
    let mut keep = Vec::with_capacity(dset.len());
    let mut is_new = Vec::with_capacity(dset.len());
    for c in dset.coords() {
        match v.set.find(*c) {
            Some(r) => {
                keep.push(r as u32);
                is_new.push(0.0);
            }
            None => {
                keep.push(NO_ROW);
                is_new.push(1.0);
            }
        }
    }
    let old = s.tape.gather(v.x, keep.into());
    let grown = s.tape.scale_rows(grown, is_new.into());
    let pre = s.tape.add(old, grown);
    let pairs = AttnPairs::window(&dset, n);
    let attended = attention_block_tape(s, pre, &p.block(), &pairs);
    let cat = s.tape.concat_cols(&[pre, attended]);
    let x = linear(s, cat, &p.join());
    VolNode { set: dset, x }
}

pub fn dilate_attention(vol: &SparseVolume, p: &DilateAttentionParams, store: &ParamStore, n: u32) -> Result<SparseVolume> {
    check_width(vol, p.channels)?;
    eager(store, |s| {
        let v = VolNode::input(s, vol);
        dilate_attention_tape(s, &v, p, n).read(&s.tape)
    })
}

/// Layout of one level's transformer. Widths run from full resolution to the
/// bottom, `depth + 1` entries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelParams {
    pub name: String,
    pub widths: Vec<usize>,
    pub heads: usize,
    pub window: u32,
    pub global_cap: usize,
}

/// Stored coordinate maps and skip volumes of one down flow, finest first.
#[derive(Clone, Debug)]
pub struct DownFlow {
    pub bottom: VolNode,
    pub skips: Vec<VolNode>,
    pub maps: Vec<SampleMap>,
}

impl LevelParams {
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    fn key(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    fn attn(&self, part: &str, width: usize) -> AttentionBlockParams {
        AttentionBlockParams::new(self.key(part), width, self.heads).expect("validated widths")
    }

    pub fn down_da(&self, k: usize) -> DilateAttentionParams {
        DilateAttentionParams::new(self.key(&format!("down{k}.da")), self.widths[k + 1], self.heads)
    }

    pub fn down_swa(&self, k: usize, j: usize) -> AttentionBlockParams {
        self.attn(&format!("down{k}.swa{j}"), self.widths[k + 1])
    }

    pub fn bottom_attn(&self) -> AttentionBlockParams {
        self.attn("bottom.ga", self.widths[self.depth()])
    }

    pub fn bottom_ctx(&self) -> GlobalContextParams {
        GlobalContextParams::new(self.key("bottom.ctx"), self.widths[self.depth()])
    }

    pub fn up_swa(&self, k: usize) -> AttentionBlockParams {
        self.attn(&format!("up{k}.swa"), self.widths[k])
    }

    pub fn post(&self) -> DilateAttentionParams {
        DilateAttentionParams::new(self.key("post"), self.widths[0], self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0 || w % self.heads != 0) {
            return Err(Error::Structural(format!("{}: widths {:?} vs {} heads", self.name, self.widths, self.heads)));
        }
        Ok(())
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for k in 0..self.depth() {
            init_linear(store, &self.key(&format!("down{k}.proj")), self.widths[k], self.widths[k + 1], true, rng);
            self.down_da(k).init(store, rng);
            self.down_swa(k, 0).init(store, rng);
            self.down_swa(k, 1).init(store, rng);
        }
        self.bottom_attn().init(store, rng);
        self.bottom_ctx().init(store, rng);
        for k in 0..self.depth() {
            init_linear(store, &self.key(&format!("up{k}.tr")), self.widths[k + 1], 8 * self.widths[k], true, rng);
            self.up_swa(k).init(store, rng);
        }
        self.post().init(store, rng);
    }

    /// Per depth: mean downsample, width projection, dilate-attention, two
    /// window attention blocks.
    pub fn down_flow_tape(&self, s: &mut Session, v: VolNode) -> DownFlow {
        let mut cur = v;
        let mut skips = Vec::with_capacity(self.depth());
        let mut maps = Vec::with_capacity(self.depth());
        for k in 0..self.depth() {
            let map = cur.set.downsample_map();
            let parents: Arc<[u32]> = map.parent_of().into();
            let inv: Arc<[f64]> = map.child_counts().iter().map(|&c| 1.0 / c as f64).collect();
            let summed = s.tape.segment_sum(cur.x, parents, map.coarse().len());
            let mean = s.tape.scale_rows(summed, inv);
            let x = linear(s, mean, &self.key(&format!("down{k}.proj")));
            let down = VolNode { set: Arc::clone(map.coarse()), x };
            let mut next = dilate_attention_tape(s, &down, &self.down_da(k), self.window);
            let pairs = AttnPairs::window(&next.set, self.window);
            for j in 0..2 {
                next.x = attention_block_tape(s, next.x, &self.down_swa(k, j), &pairs);
            }
            skips.push(cur);
            maps.push(map);
            cur = next;
        }
        DownFlow { bottom: cur, skips, maps }
    }

    /// Global attention then global context, both residual.
    pub fn bottom_block_tape(&self, s: &mut Session, v: &VolNode) -> Result<VolNode> {
        let pairs = AttnPairs::global(&v.set, self.global_cap)?;
        let x = attention_block_tape(s, v.x, &self.bottom_attn(), &pairs);
        let x = global_context_tape(s, x, &v.set, &self.bottom_ctx());
        Ok(VolNode { set: Arc::clone(&v.set), x })
    }

    /// Per depth in reverse: octant-specific linear upsampling through the
    /// stored map, skip addition, one window attention block.
    pub fn up_flow_tape(&self, s: &mut Session, bottom: VolNode, skips: &[VolNode], maps: &[SampleMap]) -> Result<VolNode> {
        if skips.len() != maps.len() || skips.len() > self.depth() {
            return Err(Error::Structural(format!("{} skips and {} maps for depth {}", skips.len(), maps.len(), self.depth())));
        }
        let mut cur = bottom;
        for k in (0..skips.len()).rev() {
            let (skip, map) = (&skips[k], &maps[k]);
            if !skip.set.same_coords(map.fine()) {
                return Err(Error::Structural(format!("{}: skip {k} does not match its sample map", self.name)));
            }
            let rows = upsample_rows(&cur.set, map)?;
            let w = self.widths[k];
            let idx: Arc<[u32]> = map
                .fine()
                .coords()
                .iter()
                .zip(&rows)
                .map(|(c, &r)| {
                    let p = c.parent();
                    let octant = (c.x - 2 * p.x) * 4 + (c.y - 2 * p.y) * 2 + (c.z - 2 * p.z);
                    r * 8 + octant as u32
                })
                .collect();
            let t = linear(s, cur.x, &self.key(&format!("up{k}.tr")));
            let t = s.tape.reshape(t, cur.set.len() * 8, w);
            let up = s.tape.gather(t, idx);
            let x = s.tape.add(up, skip.x);
            let pairs = AttnPairs::window(&skip.set, self.window);
            let x = attention_block_tape(s, x, &self.up_swa(k), &pairs);
            cur = VolNode { set: Arc::clone(&skip.set), x };
        }
        Ok(cur)
    }

    /// Down flow, bottom block, up flow, then the post dilate-attention.
    pub fn level_forward_tape(&self, s: &mut Session, v: VolNode) -> Result<VolNode> {
        let flow = self.down_flow_tape(s, v);
        let bottom = self.bottom_block_tape(s, &flow.bottom)?;
        let up = self.up_flow_tape(s, bottom, &flow.skips, &flow.maps)?;
        Ok(dilate_attention_tape(s, &up, &self.post(), self.window))
    }

    pub fn down_flow(&self, vol: &SparseVolume, store: &ParamStore) -> Result<(SparseVolume, Vec<SparseVolume>, Vec<SampleMap>)> {
        check_width(vol, self.widths[0])?;
        eager(store, |s| {
            let v = VolNode::input(s, vol);
            let f = self.down_flow_tape(s, v);
            let skips = f.skips.iter().map(|k| k.read(&s.tape)).collect::<Result<_>>()?;
            Ok((f.bottom.read(&s.tape)?, skips, f.maps))
        })
    }

    pub fn bottom_block(&self, vol: &SparseVolume, store: &ParamStore) -> Result<SparseVolume> {
        check_width(vol, self.widths[self.depth()])?;
        eager(store, |s| {
            let v = VolNode::input(s, vol);
            self.bottom_block_tape(s, &v)?.read(&s.tape)
        })
    }

    pub fn up_flow(
        &self,
        bottom: &SparseVolume,
        skips: &[SparseVolume],
        maps: &[SampleMap],
        store: &ParamStore,
    ) -> Result<SparseVolume> {
        eager(store, |s| {
            let b = VolNode::input(s, bottom);
            let k: Vec<VolNode> = skips.iter().map(|v| VolNode::input(s, v)).collect();
            self.up_flow_tape(s, b, &k, maps)?.read(&s.tape)
        })
    }

    pub fn level_forward(&self, vol: &SparseVolume, store: &ParamStore) -> Result<SparseVolume> {
        check_width(vol, self.widths[0])?;
        eager(store, |s| {
            let v = VolNode::input(s, vol);
            self.level_forward_tape(s, v)?.read(&s.tape)
        })
    }
}

/// Submanifold kernel-3 map to one channel, then sigmoid or tanh.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadParams {
    pub name: String,
    pub channels: usize,
}

impl HeadParams {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), channels }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        init_conv3(store, &self.name, self.channels, 1, rng);
    }

    fn logits(&self, s: &mut Session, v: &VolNode) -> NodeId {
        let table: Arc<[u32]> = v.set.kernel_table(&v.set).into();
        conv3(s, v.x, table, &self.name)
    }

    pub fn occupancy_tape(&self, s: &mut Session, v: &VolNode) -> NodeId {
        let l = self.logits(s, v);
        s.tape.sigmoid(l)
    }

    pub fn tsdf_tape(&self, s: &mut Session, v: &VolNode) -> NodeId {
        let l = self.logits(s, v);
        s.tape.tanh(l)
    }
}

pub fn occupancy_head(vol: &SparseVolume, p: &HeadParams, store: &ParamStore) -> Result<OccupancyVolume> {
    check_width(vol, p.channels)?;
    eager(store, |s| {
        let v = VolNode::input(s, vol);
        let o = p.occupancy_tape(s, &v);
        OccupancyVolume::new(Arc::clone(vol.set()), s.tape.value(o).data().to_vec())
    })
}

/// Head values per active voxel, in `(-1, 1)`.
pub fn tsdf_head(vol: &SparseVolume, p: &HeadParams, store: &ParamStore) -> Result<Vec<f64>> {
    check_width(vol, p.channels)?;
    eager(store, |s| {
        let v = VolNode::input(s, vol);
        let o = p.tsdf_tape(s, &v);
        Ok(s.tape.value(o).data().to_vec())
    })
}

fn check_width(vol: &SparseVolume, c: usize) -> Result<()> {
    if vol.channels() != c {
        return Err(Error::Structural(format!("volume has {} channels, expected {c}", vol.channels())));
    }
    Ok(())
}
