//! Stand-in 2D backbone: three stages of non-overlapping strided
//! convolutions (patch flatten + linear + GELU) giving maps at 1/4, 1/8 and
//! 1/16 of the input resolution.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::grad::{NodeId, ParamStore, Session, Tape};
use crate::nn::{init_linear, linear};

pub const EXTRACTOR_STRIDES: [usize; 3] = [4, 8, 16];
const STAGE_FACTORS: [usize; 3] = [4, 2, 2];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorParams {
    pub name: String,
    pub channels: usize,
}

impl ExtractorParams {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), channels }
    }

    fn stage(&self, i: usize) -> String {
        format!("{}.s{i}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let c = self.channels;
        let mut fan_in = 3;
        for (i, f) in STAGE_FACTORS.into_iter().enumerate() {
            init_linear(store, &self.stage(i), f * f * fan_in, c, true, rng);
            fan_in = c;
        }
    }
}

/// Row order of `f × f` patches of an `h × w` map: output pixel-major, patch row-major.
fn patch_index(h: usize, w: usize, f: usize) -> Arc<[u32]> {
    let (oh, ow) = (h / f, w / f);
    let mut idx = Vec::with_capacity(h * w);
    for r in 0..oh {
        for c in 0..ow {
            for dr in 0..f {
                for dc in 0..f {
                    idx.push(((r * f + dr) * w + c * f + dc) as u32);
                }
            }
        }
    }
    idx.into()
}

/// `image` is `(h·w) × 3`, row-major pixels. Returns the three stage outputs.
pub fn toy_feature_extractor_tape(
    s: &mut Session,
    image: NodeId,
    h: usize,
    w: usize,
    params: &ExtractorParams,
) -> Result<[NodeId; 3]> {
    if !h.is_multiple_of(16) || !w.is_multiple_of(16) || h == 0 || w == 0 {
        return Err(Error::InvalidInput(format!("image {h}×{w} is not divisible by 16")));
    }
    let (mut x, mut ch, mut cw) = (image, h, w);
    let mut outs = [image; 3];
    for (i, f) in STAGE_FACTORS.into_iter().enumerate() {
        let cols = s.tape.shape(x).1;
        let g = s.tape.gather(x, patch_index(ch, cw, f));
        let (nh, nw) = (ch / f, cw / f);
        let g = s.tape.reshape(g, nh * nw, f * f * cols);
        let y = linear(s, g, &params.stage(i));
        x = s.tape.gelu(y);
        outs[i] = x;
        (ch, cw) = (nh, nw);
    }
    Ok(outs)
}

/// `image` is `h × w × 3`, channels last.
pub fn toy_feature_extractor(
    image: &[f64],
    h: usize,
    w: usize,
    params: &ExtractorParams,
    store: &ParamStore,
) -> Result<Vec<FeatureMap>> {
    if image.len() != h * w * 3 {
        return Err(Error::Structural(format!("image buffer of {} values for {h}×{w}×3", image.len())));
    }
    let mut s = Session::with_tape(store, false, Tape::new());
    let x = s.tape.constant(crate::grad::Tensor::from_vec(h * w, 3, image.to_vec()));
    let outs = toy_feature_extractor_tape(&mut s, x, h, w, params)?;
    outs.iter()
        .zip(EXTRACTOR_STRIDES)
        .map(|(&o, stride)| {
            FeatureMap::new(h / stride, w / stride, params.channels, stride, s.tape.value(o).data().to_vec())
        })
        .collect()
}
