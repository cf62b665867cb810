//! Parameterized building blocks shared by the attention, fusion and
//! pipeline code. Parameters live in a [`ParamStore`] under dotted names:
//! a linear layer `name` owns `name.w` (fan_in × fan_out) and, optionally,
//! `name.b` (1 × fan_out).

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::grad::{matmul, NodeId, ParamStore, Session, Tensor};

pub fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut ChaCha8Rng) {
    store.init_weight(&format!("{name}.w"), fan_in, fan_out, rng);
    if bias {
        store.init_zeros(&format!("{name}.b"), 1, fan_out);
    }
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.init_filled(&format!("{name}.g"), 1, dim, 1.0);
    store.init_zeros(&format!("{name}.b"), 1, dim);
}

/// Submanifold-style 3×3×3 kernel: weight is `27·fan_in × fan_out`.
pub fn init_conv3(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    init_linear(store, name, 27 * fan_in, fan_out, true, rng);
}

pub fn linear(s: &mut Session, x: NodeId, name: &str) -> NodeId {
    let w = s.p(&format!("{name}.w"));
    let y = s.tape.matmul(x, w);
    let b = format!("{name}.b");
    if s.store().contains(&b) {
        let b = s.p(&b);
        s.tape.add_row(y, b)
    } else {
        y
    }
}

pub fn layer_norm(s: &mut Session, x: NodeId, name: &str) -> NodeId {
    let g = s.p(&format!("{name}.g"));
    let b = s.p(&format!("{name}.b"));
    s.tape.layer_norm(x, g, b)
}

/// Kernel-3 sparse convolution as gather + matmul. `table` holds 27 source
/// rows per output row (see `ActiveSet::kernel_table`).
pub fn conv3(s: &mut Session, x: NodeId, table: Arc<[u32]>, name: &str) -> NodeId {
    let rows = table.len() / 27;
    let cols = s.tape.shape(x).1;
    let g = s.tape.gather(x, table);
    let g = s.tape.reshape(g, rows, 27 * cols);
    linear(s, g, name)
}

/// Eager counterpart of [`linear`].
pub fn linear_eval(store: &ParamStore, x: &Tensor, name: &str) -> Tensor {
    let w = store.get(&format!("{name}.w")).unwrap_or_else(|| panic!("parameter {name}.w missing"));
    let mut y = matmul(x, w);
    if let Some(b) = store.get(&format!("{name}.b")) {
        let cols = y.cols();
        if cols > 0 {
            for row in y.data_mut().chunks_mut(cols) {
                for (v, bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_matches_eager() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_linear(&mut store, "l", 3, 2, true, &mut rng);
        store.get_mut("l.b").unwrap().data_mut().copy_from_slice(&[0.5, -1.0]);
        let x = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]);
        let mut s = Session::new(&store, false);
        let xi = s.tape.constant(x.clone());
        let y = linear(&mut s, xi, "l");
        assert_eq!(s.tape.value(y), &linear_eval(&store, &x, "l"));
    }
}
