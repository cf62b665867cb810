use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;

pub fn sgd_step(params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
    for (name, g) in grads {
        if let Some(p) = params.get_mut(name) {
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let d = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * d;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * d * d;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl(p: &ParamStore) -> (f64, BTreeMap<String, Tensor>) {
        let x = p.get("x").unwrap();
        let f = x.data().iter().map(|v| v * v).sum();
        let g = Tensor::from_vec(x.rows(), x.cols(), x.data().iter().map(|v| 2.0 * v).collect());
        (f, [("x".to_string(), g)].into_iter().collect())
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let g: BTreeMap<_, _> = [("x".to_string(), Tensor::zeros(1, 2))].into_iter().collect();
        let before = p.clone();
        sgd_step(&mut p, &g, 0.1);
        Adam::new(0.1).step(&mut p, &g);
        assert_eq!(p, before);
    }

    #[test]
    fn one_step_decreases_square() {
        for adam in [false, true] {
            let mut p = ParamStore::new();
            p.insert("x", Tensor::scalar(1.0));
            let (f0, g) = bowl(&p);
            if adam {
                Adam::new(0.1).step(&mut p, &g);
            } else {
                sgd_step(&mut p, &g, 0.1);
            }
            assert!(bowl(&p).0 < f0);
        }
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_vec(1, 3, vec![1.0, -0.5, 0.25]));
        for _ in 0..100 {
            let (_, g) = bowl(&p);
            sgd_step(&mut p, &g, 0.25);
        }
        assert!(bowl(&p).0 < 1e-6);
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_vec(1, 3, vec![1.0, -0.5, 0.25]));
        let mut adam = Adam::new(0.01);
        for _ in 0..1000 {
            let (_, g) = bowl(&p);
            adam.step(&mut p, &g);
        }
        assert!(bowl(&p).0 < 1e-6, "{}", bowl(&p).0);
    }
}
