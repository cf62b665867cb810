//! Sparse window multi-head attention, global attention and multi-scale
//! global context pooling over [`SparseVolume`]s.
//!
//! For query voxel `i` and neighbor `j`, with `P_ij = W_p(v_j - v_i)`:
//! `s_ij = <Q_i, K_j + P_ij> / sqrt(d)` per head, and the head output is
//! `sum_j softmax_j(s_ij) (V_j + P_ij)`. `P` is one `C`-wide embedding
//! split across heads. The block wrapping it is pre-normalized:
//! `x + attn(LN(x))`, then `x + FFN(LN(x))` with a 2× GELU feed-forward.
//!
//! Every operator exists twice: a tape version used for training and
//! gradient checks, and an eager streaming version that never
//! materializes per-pair tensors.

mod context;
mod count;

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use context::{context_cells, global_context, global_context_tape, GlobalContextParams, CONTEXT_SCALES};
pub use count::{pair_count, PairCount};

use crate::error::{Error, Result};
use crate::grad::{gelu, precision, NodeId, ParamStore, Precision, Session, Tensor};
use crate::nn::{init_layer_norm, init_linear, layer_norm, linear, linear_eval};
use crate::par;
use crate::voxel::{ActiveSet, NeighborTable, SparseVolume};

/// Default active-voxel cap for [`global_attention`].
pub const GLOBAL_ATTENTION_CAP: usize = 4096;

/// Layout of one attention block; the tensors live in a [`ParamStore`]
/// under `name.*`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionBlockParams {
    pub name: String,
    pub heads: usize,
    pub model_dim: usize,
}

impl AttentionBlockParams {
    pub fn new(name: impl Into<String>, model_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !model_dim.is_multiple_of(heads) {
            return Err(Error::Structural(format!("model dim {model_dim} not divisible by {heads} heads")));
        }
        Ok(Self { name: name.into(), heads, model_dim })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    fn key(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    /// Glorot weights, zero biases, unit norm gains.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let c = self.model_dim;
        init_linear(store, &self.key("q"), c, c, true, rng);
        // A key bias shifts every score of a query equally and cancels in
        // the softmax, so it is omitted.
        init_linear(store, &self.key("k"), c, c, false, rng);
        init_linear(store, &self.key("v"), c, c, true, rng);
        init_linear(store, &self.key("p"), 3, c, true, rng);
        init_linear(store, &self.key("o"), c, c, true, rng);
        init_layer_norm(store, &self.key("ln1"), c);
        init_layer_norm(store, &self.key("ln2"), c);
        init_linear(store, &self.key("ff1"), c, 2 * c, true, rng);
        init_linear(store, &self.key("ff2"), 2 * c, c, true, rng);
    }

    /// Checks presence, shapes and finiteness of every tensor.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        let c = self.model_dim;
        let shapes = [
            ("q.w", (c, c)),
            ("q.b", (1, c)),
            ("k.w", (c, c)),
            ("v.w", (c, c)),
            ("v.b", (1, c)),
            ("p.w", (3, c)),
            ("p.b", (1, c)),
            ("o.w", (c, c)),
            ("o.b", (1, c)),
            ("ln1.g", (1, c)),
            ("ln1.b", (1, c)),
            ("ln2.g", (1, c)),
            ("ln2.b", (1, c)),
            ("ff1.w", (c, 2 * c)),
            ("ff1.b", (1, 2 * c)),
            ("ff2.w", (2 * c, c)),
            ("ff2.b", (1, c)),
        ];
        for (part, shape) in shapes {
            let k = self.key(part);
            let t = store.get(&k).ok_or_else(|| Error::Structural(format!("parameter {k} missing")))?;
            if t.shape() != shape {
                return Err(Error::Structural(format!("parameter {k}: shape {:?} != {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::InvalidInput(format!("parameter {k} is not finite")));
            }
        }
        Ok(())
    }
}

/// Flattened (query, key) pairs for one attention call. Pairs of query `i`
/// occupy `offsets[i]..offsets[i + 1]`.
#[derive(Clone, Debug)]
pub struct AttnPairs {
    pub owners: Arc<[u32]>,
    pub keys: Arc<[u32]>,
    pub offsets: Arc<[usize]>,
    /// `v_j - v_i` per pair, M × 3.
    pub rel: Tensor,
}

impl AttnPairs {
    pub fn from_table(set: &ActiveSet, table: &NeighborTable) -> Self {
        let owners = table.owners();
        let coords = set.coords();
        let mut rel = Vec::with_capacity(owners.len() * 3);
        for (o, k) in owners.iter().zip(&table.rows) {
            let d = coords[*k as usize].delta(coords[*o as usize]);
            rel.extend(d.iter().map(|&v| v as f64));
        }
        Self {
            owners: owners.into(),
            keys: table.rows.clone().into(),
            offsets: table.offsets.clone().into(),
            rel: Tensor::from_vec(table.rows.len(), 3, rel),
        }
    }

    pub fn window(set: &ActiveSet, n: u32) -> Self {
        Self::from_table(set, &set.neighbor_table(n))
    }

    /// All pairs; errors above `cap` active voxels.
    pub fn global(set: &ActiveSet, cap: usize) -> Result<Self> {
        check_cap(set.len(), cap)?;
        Ok(Self::from_table(set, &set.all_pairs_table()))
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

fn check_cap(active: usize, cap: usize) -> Result<()> {
    if active > cap {
        return Err(Error::Resource { what: "global attention active voxels", actual: active, limit: cap });
    }
    Ok(())
}

fn check_channels(vol: &SparseVolume, block: &AttentionBlockParams) -> Result<()> {
    if vol.channels() != block.model_dim {
        return Err(Error::Structural(format!(
            "volume has {} channels, block expects {}",
            vol.channels(),
            block.model_dim
        )));
    }
    Ok(())
}

/// Multi-head attention without normalization or residual; returns
/// `(output N×C, weights M×H)`.
pub fn attention_core_tape(s: &mut Session, x: NodeId, block: &AttentionBlockParams, pairs: &AttnPairs) -> (NodeId, NodeId) {
    let n = s.tape.shape(x).0;
    let d = block.head_dim();
    let q = linear(s, x, &block.key("q"));
    let k = linear(s, x, &block.key("k"));
    let v = linear(s, x, &block.key("v"));
    let rel = s.tape.constant(pairs.rel.clone());
    let p = linear(s, rel, &block.key("p"));

    let qg = s.tape.gather(q, Arc::clone(&pairs.owners));
    let kg = s.tape.gather(k, Arc::clone(&pairs.keys));
    let kp = s.tape.add(kg, p);
    let prod = s.tape.mul(qg, kp);
    let scores = s.tape.group_col_sum(prod, d);
    let scores = s.tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = s.tape.segment_softmax(scores, Arc::clone(&pairs.offsets));

    let vg = s.tape.gather(v, Arc::clone(&pairs.keys));
    let vp = s.tape.add(vg, p);
    let wide = s.tape.repeat_cols(weights, d);
    let weighted = s.tape.mul(vp, wide);
    let heads = s.tape.segment_sum(weighted, Arc::clone(&pairs.owners), n);
    (linear(s, heads, &block.key("o")), weights)
}

/// Full pre-normalized block: attention and feed-forward, both residual.
pub fn attention_block_tape(s: &mut Session, x: NodeId, block: &AttentionBlockParams, pairs: &AttnPairs) -> NodeId {
    let h = layer_norm(s, x, &block.key("ln1"));
    let (a, _) = attention_core_tape(s, h, block, pairs);
    let x1 = s.tape.add(x, a);
    let h2 = layer_norm(s, x1, &block.key("ln2"));
    let f = linear(s, h2, &block.key("ff1"));
    let f = s.tape.gelu(f);
    let f = linear(s, f, &block.key("ff2"));
    s.tape.add(x1, f)
}

fn round_f32(t: &mut Tensor) {
    if precision() == Precision::F32 {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

fn get<'a>(store: &'a ParamStore, key: &str) -> &'a Tensor {
    store.get(key).unwrap_or_else(|| panic!("parameter {key} missing"))
}

/// Eager layer norm, same arithmetic as the tape op.
pub fn layer_norm_eval(store: &ParamStore, x: &Tensor, name: &str) -> Tensor {
    let g = get(store, &format!("{name}.g")).data();
    let b = get(store, &format!("{name}.b")).data();
    let cols = x.cols();
    let mut out = x.clone();
    par::for_each_row(out.data_mut(), cols.max(1), |_, row| {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / cols as f64;
        let s = 1.0 / (var + 1e-5).sqrt();
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * s * g[c] + b[c];
        }
    });
    out
}

struct CoreOut {
    out: Tensor,
    weights: Vec<f64>,
}

/// Streams each query row through its neighbor list.
fn attention_core_eval(
    store: &ParamStore,
    block: &AttentionBlockParams,
    set: &ActiveSet,
    x: &Tensor,
    table: &NeighborTable,
    keep_weights: bool,
) -> CoreOut {
    let c = block.model_dim;
    let (h, d) = (block.heads, block.head_dim());
    let mut q = linear_eval(store, x, &block.key("q"));
    let mut k = linear_eval(store, x, &block.key("k"));
    let mut v = linear_eval(store, x, &block.key("v"));
    round_f32(&mut q);
    round_f32(&mut k);
    round_f32(&mut v);
    let wp = get(store, &block.key("p.w")).data();
    let bp = get(store, &block.key("p.b")).data();
    let coords = set.coords();
    let inv = 1.0 / (d as f64).sqrt();
    let f32_mode = precision() == Precision::F32;
    let rnd = |v: f64| if f32_mode { v as f32 as f64 } else { v };

    let n = set.len();
    let mut heads = Tensor::zeros(n, c);
    let mut weights = if keep_weights { vec![0.0; table.pairs() * h] } else { Vec::new() };
    let rows: Vec<(Vec<f64>, Vec<f64>)> = par::map_collect(n, |i| {
        let nb = table.neighbors(i);
        let m = nb.len();
        let mut p = vec![0.0; m * c];
        for (jj, &j) in nb.iter().enumerate() {
            let rel = coords[j as usize].delta(coords[i]);
            let pr = &mut p[jj * c..(jj + 1) * c];
            for (kk, &dv) in rel.iter().enumerate() {
                if dv == 0 {
                    continue;
                }
                let dv = dv as f64;
                for (o, w) in pr.iter_mut().zip(&wp[kk * c..(kk + 1) * c]) {
                    *o += dv * w;
                }
            }
            for (o, b) in pr.iter_mut().zip(bp) {
                *o = rnd(*o + b);
            }
        }
        let qi = q.row(i);
        let mut a = vec![0.0; m * h];
        for hh in 0..h {
            let cols = hh * d..(hh + 1) * d;
            for (jj, &j) in nb.iter().enumerate() {
                let kj = &k.row(j as usize)[cols.clone()];
                let pj = &p[jj * c..(jj + 1) * c][cols.clone()];
                let mut sc = 0.0;
                for ((qv, kv), pv) in qi[cols.clone()].iter().zip(kj).zip(pj) {
                    sc += qv * (kv + pv);
                }
                a[jj * h + hh] = rnd(sc * inv);
            }
            let mx = (0..m).map(|jj| a[jj * h + hh]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for jj in 0..m {
                let e = (a[jj * h + hh] - mx).exp();
                a[jj * h + hh] = e;
                z += e;
            }
            for jj in 0..m {
                a[jj * h + hh] = rnd(a[jj * h + hh] / z);
            }
        }
        let mut out = vec![0.0; c];
        for (jj, &j) in nb.iter().enumerate() {
            let vj = v.row(j as usize);
            for cc in 0..c {
                out[cc] += (vj[cc] + p[jj * c + cc]) * a[jj * h + cc / d];
            }
        }
        out.iter_mut().for_each(|o| *o = rnd(*o));
        (out, a)
    });
    for (i, (out, a)) in rows.into_iter().enumerate() {
        heads.row_mut(i).copy_from_slice(&out);
        if keep_weights {
            weights[table.offsets[i] * h..table.offsets[i + 1] * h].copy_from_slice(&a);
        }
    }
    let mut out = linear_eval(store, &heads, &block.key("o"));
    round_f32(&mut out);
    CoreOut { out, weights }
}

fn block_eval(store: &ParamStore, block: &AttentionBlockParams, set: &ActiveSet, x: &Tensor, table: &NeighborTable) -> Tensor {
    let mut h = layer_norm_eval(store, x, &block.key("ln1"));
    round_f32(&mut h);
    let a = attention_core_eval(store, block, set, &h, table, false).out;
    let mut x1 = x.clone();
    x1.add_assign(&a);
    let mut h2 = layer_norm_eval(store, &x1, &block.key("ln2"));
    round_f32(&mut h2);
    let mut f = linear_eval(store, &h2, &block.key("ff1"));
    f.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    round_f32(&mut f);
    let f = linear_eval(store, &f, &block.key("ff2"));
    x1.add_assign(&f);
    round_f32(&mut x1);
    x1
}

/// Attention block over each voxel's size-`n` window; same active set out.
pub fn sparse_window_attention(
    vol: &SparseVolume,
    block: &AttentionBlockParams,
    store: &ParamStore,
    n: u32,
) -> Result<SparseVolume> {
    check_channels(vol, block)?;
    if n == 0 {
        return Err(Error::Precondition("window size must be at least 1".into()));
    }
    let table = vol.set().neighbor_table(n);
    let out = block_eval(store, block, vol.set(), &vol.to_tensor(), &table);
    SparseVolume::new(Arc::clone(vol.set()), vol.channels(), out.into_data())
}

/// Attention block where every active voxel attends to every other.
pub fn global_attention(
    vol: &SparseVolume,
    block: &AttentionBlockParams,
    store: &ParamStore,
    cap: usize,
) -> Result<SparseVolume> {
    check_channels(vol, block)?;
    check_cap(vol.len(), cap)?;
    let table = vol.set().all_pairs_table();
    let out = block_eval(store, block, vol.set(), &vol.to_tensor(), &table);
    SparseVolume::new(Arc::clone(vol.set()), vol.channels(), out.into_data())
}

/// Core attention output (no normalization, no residual) and the
/// per-pair softmax weights, `pairs × heads`, in neighbor-table order.
pub fn attention_core(
    vol: &SparseVolume,
    block: &AttentionBlockParams,
    store: &ParamStore,
    table: &NeighborTable,
) -> Result<(SparseVolume, Vec<f64>)> {
    check_channels(vol, block)?;
    let r = attention_core_eval(store, block, vol.set(), &vol.to_tensor(), table, true);
    Ok((SparseVolume::new(Arc::clone(vol.set()), vol.channels(), r.out.into_data())?, r.weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tape;
    use crate::voxel::{Grid, VoxelCoord};
    use rand::{Rng, SeedableRng};

    fn setup(c: usize, h: usize, seed: u64) -> (AttentionBlockParams, ParamStore) {
        let block = AttentionBlockParams::new("b", c, h).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        block.init(&mut store, &mut rng);
        // Nonzero biases and gains exercise every term.
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            if name.ends_with(".b") || name.ends_with(".g") {
                for v in store.get_mut(&name).unwrap().data_mut() {
                    *v += rng.gen_range(-0.3..0.3);
                }
            }
        }
        (block, store)
    }

    fn random_volume(dims: u32, occ: f64, c: usize, seed: u64) -> SparseVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::new(0, 0.04, [dims; 3], [0.0; 3]);
        let mut entries = Vec::new();
        for i in 0..grid.num_cells() as usize {
            if rng.gen_bool(occ) {
                entries.push((grid.coord_of(i), (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()));
            }
        }
        SparseVolume::from_entries(grid, c, entries).unwrap()
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(AttentionBlockParams::new("b", 10, 4).is_err());
    }

    #[test]
    fn channel_mismatch_is_structural() {
        let (block, store) = setup(8, 2, 0);
        let v = random_volume(4, 0.5, 4, 1);
        assert!(matches!(sparse_window_attention(&v, &block, &store, 3), Err(Error::Structural(_))));
    }

    #[test]
    fn singleton_attends_to_itself() {
        let (block, store) = setup(8, 2, 3);
        let grid = Grid::new(0, 0.04, [4; 3], [0.0; 3]);
        let f: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let v = SparseVolume::from_entries(grid, 8, vec![(VoxelCoord::new(1, 2, 3), f.clone())]).unwrap();
        let table = v.set().neighbor_table(3);
        let (out, w) = attention_core(&v, &block, &store, &table).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
        // W_o(V_i + W_p(0))
        let x = Tensor::from_vec(1, 8, f);
        let mut vp = linear_eval(&store, &x, "b.v");
        vp.add_assign(store.get("b.p.b").unwrap());
        let expect = linear_eval(&store, &vp, "b.o");
        assert!(out.to_tensor().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn eager_matches_tape() {
        let (block, store) = setup(8, 2, 5);
        let v = random_volume(6, 0.3, 8, 6);
        let eager = sparse_window_attention(&v, &block, &store, 3).unwrap();
        let mut s = Session::with_tape(&store, false, Tape::with_precision(Precision::F64));
        let x = s.tape.constant(v.to_tensor());
        let pairs = AttnPairs::window(v.set(), 3);
        let y = attention_block_tape(&mut s, x, &block, &pairs);
        assert!(s.tape.value(y).max_abs_diff(&eager.to_tensor()) < 1e-12);
    }

    #[test]
    fn weights_sum_to_one() {
        let (block, store) = setup(8, 4, 7);
        let v = random_volume(8, 0.2, 8, 8);
        let table = v.set().neighbor_table(5);
        let (_, w) = attention_core(&v, &block, &store, &table).unwrap();
        for i in 0..v.len() {
            for h in 0..4 {
                let s: f64 = (table.offsets[i]..table.offsets[i + 1]).map(|p| w[p * 4 + h]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn global_equals_covering_window() {
        let (block, store) = setup(4, 2, 9);
        let v = random_volume(5, 0.2, 4, 10);
        let g = global_attention(&v, &block, &store, GLOBAL_ATTENTION_CAP).unwrap();
        let w = sparse_window_attention(&v, &block, &store, 11).unwrap();
        assert!(g.to_tensor().max_abs_diff(&w.to_tensor()) < 1e-12);
    }

    #[test]
    fn global_cap_is_enforced() {
        let (block, store) = setup(4, 2, 9);
        let v = random_volume(5, 0.5, 4, 10);
        assert!(matches!(global_attention(&v, &block, &store, 10), Err(Error::Resource { .. })));
    }

    #[test]
    fn translation_leaves_output_unchanged() {
        let (block, store) = setup(8, 2, 11);
        let grid = Grid::new(0, 0.04, [12; 3], [0.0; 3]);
        let v = random_volume(6, 0.3, 8, 12);
        let v = SparseVolume::new(Arc::new(ActiveSet::from_coords(grid, v.coords().to_vec()).unwrap()), 8, v.features().to_vec()).unwrap();
        let shifted = v.translated([3, 5, 1]).unwrap();
        let a = sparse_window_attention(&v, &block, &store, 4).unwrap();
        let b = sparse_window_attention(&shifted, &block, &store, 4).unwrap();
        assert_eq!(a.features(), b.features());
    }
}
