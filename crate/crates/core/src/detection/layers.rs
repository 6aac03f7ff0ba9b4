use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Real, StageTag, Tape, Var};
use crate::Result;

/// Square convolution with He-uniform weights and zero bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        pad: usize,
        tag: StageTag,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_he_uniform(format!("{name}.weight"), &[c_out, c_in, k, k], c_in * k * k, tag, rng);
        let b = store.add_zeros(format!("{name}.bias"), &[c_out], tag);
        Conv { w, b, stride: 1, pad }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn forward_relu<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.forward(tape, store, x)?;
        Ok(tape.relu(y))
    }
}

/// 2x2 stride-2 transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Deconv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Deconv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        tag: StageTag,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_he_uniform(format!("{name}.weight"), &[c_in, c_out, 2, 2], c_in, tag, rng);
        let b = store.add_zeros(format!("{name}.bias"), &[c_out], tag);
        Deconv { w, b }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv_transpose2d(x, w, b, 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        tag: StageTag,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_he_uniform(format!("{name}.weight"), &[d_out, d_in], d_in, tag, rng);
        let b = store.add_zeros(format!("{name}.bias"), &[d_out], tag);
        Linear { w, b }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }
}
