//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamStore, Session};
use super::tape::{NodeId, Precision, Tape};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Relative step; the absolute step is `step * max(1, |theta|)`.
    pub step: f64,
    pub tolerance: f64,
    /// Tensors larger than this are checked on a seeded random subset of this size.
    pub max_entries_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, max_entries_per_tensor: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<'a, F>(params: &'a ParamStore, build: &F, trainable: bool) -> Result<(f64, Session<'a>, NodeId)>
where
    F: Fn(&mut Session) -> Result<NodeId>,
{
    let mut s = Session::with_tape(params, trainable, Tape::with_precision(Precision::F64));
    let loss = build(&mut s)?;
    let v = s.tape.value(loss).item();
    Ok((v, s, loss))
}

/// Compares reverse-mode gradients of `build`'s scalar output against
/// central differences for every parameter tensor in `params`. Always runs in
/// f64 regardless of the process-wide precision.
pub fn finite_diff_check<F>(params: &ParamStore, build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<NodeId>,
{
    let (_, session, loss) = eval(params, &build, true)?;
    let grads = session.tape.backward(loss)?;
    let analytic = session.param_grads(&grads);
    drop(session);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut tensors = Vec::new();
    for (name, t) in params.iter() {
        let n = t.len();
        let idx: Vec<usize> = if n > cfg.max_entries_per_tensor {
            let mut v = sample(&mut rng, n, cfg.max_entries_per_tensor).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..n).collect()
        };
        let ga = &analytic[name];
        let mut tc = TensorCheck {
            name: name.clone(),
            checked: idx.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &idx {
            let theta = t.data()[i];
            let h = cfg.step * theta.abs().max(1.0);
            work.get_mut(name).unwrap().data_mut()[i] = theta + h;
            let (fp, _, _) = eval(&work, &build, false)?;
            work.get_mut(name).unwrap().data_mut()[i] = theta - h;
            let (fm, _, _) = eval(&work, &build, false)?;
            work.get_mut(name).unwrap().data_mut()[i] = theta;
            let numeric = (fp - fm) / (2.0 * h);
            let a = ga.data()[i];
            let e = relative_error(a, numeric);
            if e > tc.max_rel_error || i == idx[0] {
                tc.max_rel_error = e;
                tc.worst_index = i;
                tc.analytic = a;
                tc.numeric = numeric;
            }
        }
        tensors.push(tc);
    }
    let max = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { tensors, tolerance: cfg.tolerance, max_rel_error: max, pass: max <= cfg.tolerance })
}
