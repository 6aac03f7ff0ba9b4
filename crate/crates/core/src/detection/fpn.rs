use rand::Rng;

use super::layers::Conv;
use crate::autodiff::{ParamStore, Real, StageTag, Tape, Var};
use crate::Result;

/// P2..P5 on one tape. Every level has the same channel count and the
/// strides of [`super::backbone::STAGE_STRIDES`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidFeatures {
    pub levels: [Var; 4],
}

/// Lateral 1x1 convs, a top-down pathway of 2x bilinear upsampling plus
/// addition, and one 3x3 smoothing conv per output level.
#[derive(Debug, Clone, PartialEq)]
pub struct Fpn {
    pub channels: usize,
    pub laterals: [Conv; 4],
    pub smooth: [Conv; 4],
}

impl Fpn {
    pub fn new<T: Real>(store: &mut ParamStore<T>, in_channels: [usize; 4], channels: usize, rng: &mut impl Rng) -> Self {
        let lat = |store: &mut ParamStore<T>, i: usize, rng: &mut _| {
            Conv::new(store, &format!("fpn.lateral{}", i + 2), in_channels[i], channels, 1, 0, StageTag::Head, rng)
        };
        let smo = |store: &mut ParamStore<T>, i: usize, rng: &mut _| {
            Conv::new(store, &format!("fpn.smooth{}", i + 2), channels, channels, 3, 1, StageTag::Head, rng)
        };
        let laterals = [lat(store, 0, rng), lat(store, 1, rng), lat(store, 2, rng), lat(store, 3, rng)];
        let smooth = [smo(store, 0, rng), smo(store, 1, rng), smo(store, 2, rng), smo(store, 3, rng)];
        Fpn {
            channels,
            laterals,
            smooth,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, stages: [Var; 4]) -> Result<PyramidFeatures> {
        let mut merged: [Option<Var>; 4] = [None; 4];
        let mut above: Option<Var> = None;
        for i in (0..4).rev() {
            let lateral = self.laterals[i].forward(tape, store, stages[i])?;
            let m = match above {
                None => lateral,
                Some(coarse) => {
                    let (_, _, h, w) = tape.value(lateral).dims4()?;
                    let up = tape.bilinear_resize(coarse, h, w)?;
                    tape.add(lateral, up)?
                }
            };
            merged[i] = Some(m);
            above = Some(m);
        }
        let mut levels = [stages[0]; 4];
        for i in 0..4 {
            levels[i] = self.smooth[i].forward(tape, store, merged[i].expect("filled above"))?;
        }
        Ok(PyramidFeatures { levels })
    }
}
