use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::backbone::{Backbone, STAGE_STRIDES};
use super::fpn::{Fpn, PyramidFeatures};
use super::heads::{BoxHead, MaskHead};
use super::loss::{multitask_loss, HeadOutputs, LossVars};
use super::roi::{route_rois, sample_rois, DetectionTargets, RoiSampleConfig};
use super::rpn::{assign_rpn_targets, generate_proposals, sigmoid, ProposalConfig, RpnHead, RpnOutputs, RpnTargetConfig, RpnTargets};
use crate::autodiff::{gradcheck::relative_error, ParamStore, Real, Tape, Tensor, Var};
use crate::geometry::{clip_box, decode_delta, generate_anchors, nms, Anchor, AnchorSpec, BoxDelta, BoxXYXY};
use crate::maskops::{paste_mask, BinaryMask};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone_widths: [usize; 4],
    pub fpn_channels: usize,
    pub box_hidden: usize,
    pub mask_channels: usize,
    pub anchors: AnchorSpec,
    /// Pool side for the class/box branch.
    pub cls_pool: usize,
    /// Pool side for the mask branch; mask logits are twice this.
    pub mask_pool: usize,
    /// ROI-Align samples per bin along each axis.
    pub sampling: usize,
    pub level_k0: usize,
    pub canonical_roi: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_widths: [16, 32, 64, 128],
            fpn_channels: 32,
            box_hidden: 128,
            mask_channels: 32,
            anchors: AnchorSpec::default(),
            cls_pool: 7,
            mask_pool: 14,
            sampling: 2,
            level_k0: 2,
            canonical_roi: 56.0,
        }
    }
}

impl ModelConfig {
    pub fn mask_size(&self) -> usize {
        2 * self.mask_pool
    }

    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        if self.anchors.strides != STAGE_STRIDES {
            return Err(Error::Config(format!(
                "anchor strides must be {STAGE_STRIDES:?} to match the pyramid"
            )));
        }
        let a = self.anchors.anchors_per_cell(0);
        if (1..4).any(|l| self.anchors.anchors_per_cell(l) != a) {
            return Err(Error::Config("every level needs the same number of anchors per cell".into()));
        }
        if self.backbone_widths.contains(&0) || self.fpn_channels == 0 || self.box_hidden == 0 || self.mask_channels == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.cls_pool == 0 || self.mask_pool == 0 || self.sampling == 0 {
            return Err(Error::Config("pool sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Knobs for building training targets.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainTargetConfig {
    pub rpn: RpnTargetConfig,
    pub proposals: ProposalConfig,
    pub rois: RoiSampleConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub proposals: ProposalConfig,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Probability at which pasted masks are binarized.
    pub mask_threshold: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            proposals: ProposalConfig {
                min_objectness: 1e-3,
                ..ProposalConfig::default()
            },
            score_threshold: 0.7,
            nms_iou: 0.3,
            max_detections: 400,
            mask_threshold: 0.5,
        }
    }
}

/// Pyramid and RPN outputs of one image on a tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Features {
    pub pyramid: PyramidFeatures,
    pub rpn: RpnOutputs,
    pub image_h: usize,
    pub image_w: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTargets {
    pub rpn: RpnTargets,
    pub det: DetectionTargets,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoxXYXY,
    pub score: f64,
    /// Square grid of mask logits relative to `bbox`.
    pub mask_logits: Vec<f64>,
    pub mask: BinaryMask,
}

impl Detection {
    /// Maps the detection into an image scaled by `factor` and re-pastes
    /// its mask there.
    pub fn rescaled(&self, factor: f64, image_h: usize, image_w: usize, mask_threshold: f64) -> Result<Detection> {
        let m = (self.mask_logits.len() as f64).sqrt() as usize;
        let bbox = clip_box(&self.bbox.scale(factor), image_h, image_w);
        Ok(Detection {
            bbox,
            score: self.score,
            mask_logits: self.mask_logits.clone(),
            mask: paste_mask(&self.mask_logits, m, &bbox, image_h, image_w, mask_threshold)?,
        })
    }
}

/// Backbone, FPN, RPN and the two ROI heads. Holds parameter ids only; the
/// values live in a [`ParamStore`] of any precision.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRcnn {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub rpn: RpnHead,
    pub box_head: BoxHead,
    pub mask_head: MaskHead,
}

fn image_dims<T: Real>(image: &Tensor<T>) -> Result<(usize, usize)> {
    let (n, _, h, w) = image.dims4()?;
    if n != 1 {
        return Err(Error::Shape(format!("expected one image, got a batch of {n}")));
    }
    Ok((h, w))
}

impl MaskRcnn {
    /// Builds the architecture and a freshly initialised parameter store.
    /// The same config and seed always give the same parameters.
    pub fn new<T: Real>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, cfg.backbone_widths, &mut rng);
        let fpn = Fpn::new(&mut store, backbone.out_channels(), cfg.fpn_channels, &mut rng);
        let rpn = RpnHead::new(&mut store, cfg.fpn_channels, cfg.anchors.anchors_per_cell(0), &mut rng);
        let box_head = BoxHead::new(&mut store, cfg.fpn_channels, cfg.cls_pool, cfg.box_hidden, &mut rng);
        let mask_head = MaskHead::new(&mut store, cfg.fpn_channels, cfg.mask_channels, &mut rng);
        Ok((
            MaskRcnn {
                cfg,
                backbone,
                fpn,
                rpn,
                box_head,
                mask_head,
            },
            store,
        ))
    }

    pub fn anchors(&self, image_h: usize, image_w: usize) -> Vec<Anchor> {
        generate_anchors(&self.cfg.anchors, image_h, image_w)
    }

    /// Backbone, FPN and RPN for a `[1, 3, h, w]` image.
    pub fn features<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Features> {
        let (image_h, image_w) = image_dims(image)?;
        let x = tape.input(image.clone());
        let stages = self.backbone.forward(tape, store, x)?;
        let pyramid = self.fpn.forward(tape, store, stages)?;
        let rpn = self.rpn.forward(tape, store, &pyramid)?;
        Ok(Features {
            pyramid,
            rpn,
            image_h,
            image_w,
        })
    }

    fn rpn_values<T: Real>(tape: &Tape<T>, rpn: &RpnOutputs) -> (Vec<f64>, Vec<BoxDelta>) {
        let logits = tape.value(rpn.logits).to_f64_vec();
        let deltas = tape.value(rpn.deltas).to_f64_vec().chunks(4).map(BoxDelta::from_slice).collect();
        (logits, deltas)
    }

    /// Current proposals of the RPN on `feats`.
    pub fn proposals<T: Real>(&self, tape: &Tape<T>, feats: &Features, cfg: &ProposalConfig) -> Result<Vec<super::rpn::Proposal>> {
        let (logits, deltas) = Self::rpn_values(tape, &feats.rpn);
        let anchors = self.anchors(feats.image_h, feats.image_w);
        generate_proposals(&logits, &deltas, &anchors, feats.image_h, feats.image_w, cfg)
    }

    /// RPN targets and sampled ROI targets for one image. `gt_masks` are at
    /// the network input resolution; empty masks are skipped.
    pub fn prepare_targets<T: Real>(
        &self,
        tape: &Tape<T>,
        feats: &Features,
        gt_masks: &[BinaryMask],
        cfg: &TrainTargetConfig,
        rng: &mut impl Rng,
    ) -> Result<TrainingTargets> {
        let (h, w) = (feats.image_h, feats.image_w);
        if let Some(m) = gt_masks.iter().find(|m| m.height() != h || m.width() != w) {
            return Err(Error::Shape(format!(
                "gt mask {}x{} for a {h}x{w} image",
                m.height(),
                m.width()
            )));
        }
        let (masks, boxes): (Vec<BinaryMask>, Vec<BoxXYXY>) =
            gt_masks.iter().filter_map(|m| m.bbox().map(|b| (m.clone(), b))).unzip();
        let anchors: Vec<BoxXYXY> = self.anchors(h, w).iter().map(|a| a.bbox).collect();
        let rpn = assign_rpn_targets(&anchors, &boxes, &cfg.rpn, rng)?;
        let props: Vec<BoxXYXY> = self.proposals(tape, feats, &cfg.proposals)?.iter().map(|p| p.bbox).collect();
        let det = sample_rois(&props, &boxes, &masks, &cfg.rois, rng)?;
        Ok(TrainingTargets { rpn, det })
    }

    fn pool<T: Real>(&self, tape: &mut Tape<T>, feats: &Features, rois: &[BoxXYXY], size: usize) -> Result<Var> {
        let refs = route_rois(rois, self.cfg.level_k0, self.cfg.canonical_roi);
        let strides: Vec<f64> = STAGE_STRIDES.iter().map(|&s| s as f64).collect();
        tape.roi_align(&feats.pyramid.levels, &strides, &refs, size, self.cfg.sampling)
    }

    /// Class/box logits for `rois`.
    pub fn box_branch<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, feats: &Features, rois: &[BoxXYXY]) -> Result<(Var, Var)> {
        let pooled = self.pool(tape, feats, rois, self.cfg.cls_pool)?;
        self.box_head.forward(tape, store, pooled)
    }

    /// Mask logits `[r, 1, m, m]` for `rois`.
    pub fn mask_branch<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, feats: &Features, rois: &[BoxXYXY]) -> Result<Var> {
        let pooled = self.pool(tape, feats, rois, self.cfg.mask_pool)?;
        self.mask_head.forward(tape, store, pooled)
    }

    /// Runs both heads on the sampled regions; the mask branch only sees the
    /// foreground ones.
    pub fn head_outputs<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        feats: &Features,
        det: &DetectionTargets,
    ) -> Result<HeadOutputs> {
        let (cls, boxes) = self.box_branch(tape, store, feats, &det.boxes())?;
        let fg: Vec<BoxXYXY> = det.foreground().iter().map(|&i| det.rois[i].bbox).collect();
        let masks = if fg.is_empty() { None } else { Some(self.mask_branch(tape, store, feats, &fg)?) };
        Ok(HeadOutputs { cls, boxes, masks })
    }

    /// Full forward pass and loss against fixed targets.
    pub fn loss_with_targets<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        targets: &TrainingTargets,
    ) -> Result<LossVars> {
        let feats = self.features(tape, store, image)?;
        let heads = self.head_outputs(tape, store, &feats, &targets.det)?;
        multitask_loss(tape, &feats.rpn, &targets.rpn, &heads, &targets.det)
    }

    /// One image's training loss: forward, target sampling from the live
    /// RPN output, heads, multitask loss.
    pub fn training_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        gt_masks: &[BinaryMask],
        cfg: &TrainTargetConfig,
        rng: &mut impl Rng,
    ) -> Result<(LossVars, TrainingTargets)> {
        let feats = self.features(tape, store, image)?;
        let targets = self.prepare_targets(tape, &feats, gt_masks, cfg, rng)?;
        let heads = self.head_outputs(tape, store, &feats, &targets.det)?;
        let loss = multitask_loss(tape, &feats.rpn, &targets.rpn, &heads, &targets.det)?;
        Ok((loss, targets))
    }

    /// Detections for a `[1, 3, h, w]` image, masks pasted at `h x w`,
    /// sorted by score (highest first).
    pub fn detect<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>, cfg: &DetectConfig) -> Result<Vec<Detection>> {
        let mut tape = Tape::new();
        let feats = self.features(&mut tape, store, image)?;
        let props = self.proposals(&tape, &feats, &cfg.proposals)?;
        if props.is_empty() {
            return Ok(Vec::new());
        }
        let rois: Vec<BoxXYXY> = props.iter().map(|p| p.bbox).collect();
        let (cls, deltas) = self.box_branch(&mut tape, store, &feats, &rois)?;
        let cls = tape.value(cls).to_f64_vec();
        let deltas = tape.value(deltas).to_f64_vec();
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (i, roi) in rois.iter().enumerate() {
            let score = sigmoid(cls[2 * i + 1] - cls[2 * i]);
            if score < cfg.score_threshold {
                continue;
            }
            let b = clip_box(
                &decode_delta(roi, &BoxDelta::from_slice(&deltas[4 * i..4 * i + 4])),
                feats.image_h,
                feats.image_w,
            );
            if b.width() >= 1.0 && b.height() >= 1.0 {
                boxes.push(b);
                scores.push(score);
            }
        }
        let keep: Vec<usize> = nms(&boxes, &scores, cfg.nms_iou)?.into_iter().take(cfg.max_detections).collect();
        if keep.is_empty() {
            return Ok(Vec::new());
        }
        let final_boxes: Vec<BoxXYXY> = keep.iter().map(|&k| boxes[k]).collect();
        let masks = self.mask_branch(&mut tape, store, &feats, &final_boxes)?;
        let logits = tape.value(masks).to_f64_vec();
        let m = self.cfg.mask_size();
        keep.iter()
            .enumerate()
            .map(|(d, &k)| {
                let grid = logits[d * m * m..(d + 1) * m * m].to_vec();
                let mask = paste_mask(&grid, m, &boxes[k], feats.image_h, feats.image_w, cfg.mask_threshold)?;
                Ok(Detection {
                    bbox: boxes[k],
                    score: scores[k],
                    mask_logits: grid,
                    mask,
                })
            })
            .collect()
    }
}

/// Result of [`spot_check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpotCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Compares the tape gradient of the total loss with central differences
/// at `per_tensor` random coordinates of every trainable parameter, with
/// the targets held fixed.
pub fn spot_check_gradients(
    model: &MaskRcnn,
    store: &mut ParamStore<f64>,
    image: &Tensor<f64>,
    targets: &TrainingTargets,
    per_tensor: usize,
    eps: f64,
    seed: u64,
) -> Result<SpotCheck> {
    let mut tape = Tape::new();
    let loss = model.loss_with_targets(&mut tape, store, image, targets)?;
    store.zero_grad();
    tape.backward(loss.total, 1.0)?.accumulate_into(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SpotCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = model.loss_with_targets(&mut t, store, image, targets)?;
        Ok(t.value(l.total).item())
    };
    let ids: Vec<_> = (0..store.len()).map(crate::autodiff::ParamId).collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).value.len();
        for _ in 0..per_tensor.min(n) {
            let j = rng.random_range(0..n);
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + eps;
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig - eps;
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            let err = relative_error(store.get(id).grad.data()[j], (fp - fm) / (2.0 * eps));
            out.checked += 1;
            if err > out.max_rel_error {
                out.max_rel_error = err;
                out.worst_param = format!("{}[{j}]", store.get(id).name);
            }
        }
    }
    Ok(out)
}
