use super::roi::DetectionTargets;
use super::rpn::{RpnOutputs, RpnTargets};
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Per-ROI head outputs on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadOutputs {
    /// `[r, 2]`
    pub cls: Var,
    /// `[r, 4]`
    pub boxes: Var,
    /// `[f, 1, m, m]` for the foreground regions only, in order.
    pub masks: Option<Var>,
}

/// The three loss terms and their sum as tape nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossVars {
    pub l_cls: Var,
    pub l_bbox: Var,
    pub l_mask: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_bbox: f64,
    pub l_mask: f64,
    pub total: f64,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item().as_f64();
        LossBreakdown {
            l_cls: v(self.l_cls),
            l_bbox: v(self.l_bbox),
            l_mask: v(self.l_mask),
            total: v(self.total),
        }
    }
}

impl LossBreakdown {
    /// Adds another breakdown term by term.
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.l_cls += weight * other.l_cls;
        self.l_bbox += weight * other.l_bbox;
        self.l_mask += weight * other.l_mask;
        self.total += weight * other.total;
    }
}

fn delta_tensor<T: Real>(rows: impl Iterator<Item = [f64; 4]>) -> Result<Tensor<T>> {
    let data: Vec<f64> = rows.flatten().collect();
    Tensor::from_f64(&[data.len() / 4, 4], &data)
}

/// `l_cls` = RPN objectness CE + head class CE; `l_bbox` = smooth-L1 over
/// positive anchors + smooth-L1 over foreground regions; `l_mask` = BCE
/// over foreground mask grids. `total = (l_cls + l_bbox) + l_mask` on the
/// tape, so it is the exact floating point sum of the three terms.
pub fn multitask_loss<T: Real>(
    tape: &mut Tape<T>,
    rpn: &RpnOutputs,
    rpn_targets: &RpnTargets,
    heads: &HeadOutputs,
    det: &DetectionTargets,
) -> Result<LossVars> {
    let zero = tape.input(Tensor::scalar(T::zero()));

    let obj = tape.objectness_logits(rpn.logits);
    let rpn_cls = tape.softmax_cross_entropy(obj, &rpn_targets.labels)?;
    let head_cls = tape.softmax_cross_entropy(heads.cls, &det.labels())?;

    let pos = rpn_targets.positives();
    let rpn_box = if pos.is_empty() {
        zero
    } else {
        let pred = tape.gather_rows(rpn.deltas, &pos)?;
        let target = delta_tensor(pos.iter().map(|&i| rpn_targets.deltas[i].expect("positive has a target").to_array()))?;
        tape.smooth_l1(pred, target, 1.0)?
    };

    let fg = det.foreground();
    let (head_box, mask) = if fg.is_empty() {
        (zero, zero)
    } else {
        let pred = tape.gather_rows(heads.boxes, &fg)?;
        let target = delta_tensor(fg.iter().map(|&i| det.rois[i].delta.expect("foreground has a target").to_array()))?;
        let head_box = tape.smooth_l1(pred, target, 1.0)?;
        let masks = heads
            .masks
            .ok_or_else(|| Error::InvalidArgument("foreground regions need mask logits".into()))?;
        let m = det.mask_size;
        let mut t = Vec::with_capacity(fg.len() * m * m);
        for &i in &fg {
            t.extend_from_slice(det.rois[i].mask.as_ref().expect("foreground has a mask"));
        }
        let target = Tensor::from_f64(&[fg.len(), 1, m, m], &t)?;
        (head_box, tape.sigmoid_bce(masks, target)?)
    };

    let l_cls = tape.add(rpn_cls, head_cls)?;
    let l_bbox = tape.add(rpn_box, head_box)?;
    let cls_box = tape.add(l_cls, l_bbox)?;
    let total = tape.add(cls_box, mask)?;
    Ok(LossVars {
        l_cls,
        l_bbox,
        l_mask: mask,
        total,
    })
}
