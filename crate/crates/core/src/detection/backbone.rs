use rand::Rng;

use super::layers::Conv;
use crate::autodiff::{ParamStore, Real, StageTag, Tape, Var};
use crate::{Error, Result};

/// Strides of the four backbone outputs C2..C5.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Four-stage convolutional feature extractor.
///
/// ```text
/// stem   conv3x3 3->w0, relu, pool              /2   lower
/// C2     conv3x3 w0->w0, relu, pool             /4   lower
/// C3     conv3x3 w0->w1, relu, pool             /8   lower
/// C4     conv3x3 w1->w2, relu, pool             /16  upper
/// C5     conv3x3 w2->w3, relu, pool             /32  upper
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub widths: [usize; 4],
    stem: Conv,
    stages: [Conv; 4],
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, widths: [usize; 4], rng: &mut impl Rng) -> Self {
        let stem = Conv::new(store, "backbone.stem", 3, widths[0], 3, 1, StageTag::Lower, rng);
        let c2 = Conv::new(store, "backbone.c2", widths[0], widths[0], 3, 1, StageTag::Lower, rng);
        let c3 = Conv::new(store, "backbone.c3", widths[0], widths[1], 3, 1, StageTag::Lower, rng);
        let c4 = Conv::new(store, "backbone.c4", widths[1], widths[2], 3, 1, StageTag::Upper, rng);
        let c5 = Conv::new(store, "backbone.c5", widths[2], widths[3], 3, 1, StageTag::Upper, rng);
        Backbone {
            widths,
            stem,
            stages: [c2, c3, c4, c5],
        }
    }

    /// Channel counts of C2..C5.
    pub fn out_channels(&self) -> [usize; 4] {
        self.widths
    }

    /// Returns `[C2, C3, C4, C5]` for an `[n, 3, h, w]` image whose sides are
    /// multiples of 32.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<[Var; 4]> {
        let (_, c, h, w) = tape.value(image).dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("backbone expects 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!("backbone input {h}x{w} is not a multiple of 32")));
        }
        let x = self.stem.forward_relu(tape, store, image)?;
        let mut x = tape.max_pool2d(x)?;
        let mut outs = Vec::with_capacity(4);
        for conv in &self.stages {
            let y = conv.forward_relu(tape, store, x)?;
            x = tape.max_pool2d(y)?;
            outs.push(x);
        }
        Ok([outs[0], outs[1], outs[2], outs[3]])
    }
}
