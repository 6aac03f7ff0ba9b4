use rand::Rng;

use super::layers::{Conv, Deconv, Linear};
use crate::autodiff::{ParamStore, Real, StageTag, Tape, Var};
use crate::Result;

/// Classification/box branch: two hidden affine layers on the flattened
/// 7x7 pool, then sibling class and box outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxHead {
    pub in_features: usize,
    pub fc1: Linear,
    pub fc2: Linear,
    pub cls: Linear,
    pub bbox: Linear,
}

/// Mask branch: four 3x3 convs, a 2x transposed conv and a 1x1 output,
/// fed by its own 14x14 pool.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskHead {
    pub convs: [Conv; 4],
    pub up: Deconv,
    pub out: Conv,
}

impl BoxHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, channels: usize, pool: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let d = channels * pool * pool;
        BoxHead {
            in_features: d,
            fc1: Linear::new(store, "box_head.fc1", d, hidden, StageTag::Head, rng),
            fc2: Linear::new(store, "box_head.fc2", hidden, hidden, StageTag::Head, rng),
            cls: Linear::new(store, "box_head.cls", hidden, 2, StageTag::Head, rng),
            bbox: Linear::new(store, "box_head.bbox", hidden, 4, StageTag::Head, rng),
        }
    }

    /// `[r, c, p, p]` pooled features to class logits `[r, 2]` and box
    /// deltas `[r, 4]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, pooled: Var) -> Result<(Var, Var)> {
        let r = tape.value(pooled).shape()[0];
        let x = tape.reshape(pooled, &[r, self.in_features])?;
        let x = self.fc1.forward(tape, store, x)?;
        let x = tape.relu(x);
        let x = self.fc2.forward(tape, store, x)?;
        let x = tape.relu(x);
        let cls = self.cls.forward(tape, store, x)?;
        let bbox = self.bbox.forward(tape, store, x)?;
        Ok((cls, bbox))
    }
}

impl MaskHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, in_channels: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let c = |store: &mut ParamStore<T>, i: usize, cin: usize, rng: &mut _| {
            Conv::new(store, &format!("mask_head.conv{}", i + 1), cin, channels, 3, 1, StageTag::Head, rng)
        };
        let convs = [
            c(store, 0, in_channels, rng),
            c(store, 1, channels, rng),
            c(store, 2, channels, rng),
            c(store, 3, channels, rng),
        ];
        MaskHead {
            convs,
            up: Deconv::new(store, "mask_head.up", channels, channels, StageTag::Head, rng),
            out: Conv::new(store, "mask_head.out", channels, 1, 1, 0, StageTag::Head, rng),
        }
    }

    /// `[r, c, p, p]` pooled features to mask logits `[r, 1, 2p, 2p]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, pooled: Var) -> Result<Var> {
        let mut x = pooled;
        for conv in &self.convs {
            x = conv.forward_relu(tape, store, x)?;
        }
        let x = self.up.forward(tape, store, x)?;
        let x = tape.relu(x);
        self.out.forward(tape, store, x)
    }
}
