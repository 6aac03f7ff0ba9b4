//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Every key is optional and falls
//! back to its default; unknown or repeated keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::AugmentConfig;
use crate::detection::{DetectConfig, ModelConfig, TrainTargetConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub seed: u64,
    pub precision: Precision,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; 0 means one pass over the training ids.
    pub steps_per_epoch: usize,
    /// Validate every this many epochs (and after the last); 0 disables.
    pub val_every: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub stage_epochs: [usize; 3],
    /// Train on the train part of the split (true) or on every id (false).
    pub use_split: bool,
    pub test_count: usize,
    pub val_fraction: f64,
    pub augment_enabled: bool,
    pub augment: AugmentConfig,
    pub pixel_scale: f64,
    pub model: ModelConfig,
    pub targets: TrainTargetConfig,
    pub detect: DetectConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_root: PathBuf::from("data/stage1_train"),
            seed: 0,
            precision: Precision::F32,
            epochs: 100,
            batch_size: 6,
            steps_per_epoch: 0,
            val_every: 1,
            lr_initial: 0.001,
            lr_final: 0.001 / 10.0,
            momentum: 0.9,
            weight_decay: 0.0001,
            clip_norm: 5.0,
            stage_epochs: [40, 40, 20],
            use_split: true,
            test_count: 65,
            val_fraction: 0.1,
            augment_enabled: true,
            augment: AugmentConfig::default(),
            pixel_scale: 1.0 / 255.0,
            model: ModelConfig::default(),
            targets: TrainTargetConfig::default(),
            detect: DetectConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, v)?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => Err(Error::Config(format!("{key}: expected two comma-separated numbers"))),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        let mut lr_final_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.iter().any(|s| s == k) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            seen.push(k.to_string());
            lr_final_set |= k == "lr_final";
            cfg.set(k, v)?;
        }
        if !lr_final_set {
            cfg.lr_final = cfg.lr_initial / 10.0;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let a = &mut self.augment;
        let t = &mut self.targets;
        let d = &mut self.detect;
        let m = &mut self.model;
        match k {
            "dataset_root" => self.dataset_root = PathBuf::from(v),
            "seed" => self.seed = parse(k, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision: expected f32 or f64, got {v:?}"))),
                }
            }
            "epochs" => self.epochs = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(k, v)?,
            "val_every" => self.val_every = parse(k, v)?,
            "lr_initial" => self.lr_initial = parse(k, v)?,
            "lr_final" => self.lr_final = parse(k, v)?,
            "momentum" => self.momentum = parse(k, v)?,
            "weight_decay" => self.weight_decay = parse(k, v)?,
            "clip_norm" => self.clip_norm = parse(k, v)?,
            "stage_epochs" => {
                self.stage_epochs = parse_list::<usize>(k, v)?
                    .try_into()
                    .map_err(|_| Error::Config("stage_epochs: expected three integers".into()))?
            }
            "use_split" => self.use_split = parse_bool(k, v)?,
            "test_count" => self.test_count = parse(k, v)?,
            "val_fraction" => self.val_fraction = parse(k, v)?,
            "augment" => self.augment_enabled = parse_bool(k, v)?,
            "crop" => {
                a.crop_hw = if v == "none" {
                    None
                } else {
                    let (h, w) = v
                        .split_once('x')
                        .ok_or_else(|| Error::Config("crop: expected HxW or none".into()))?;
                    Some((parse(k, h.trim())?, parse(k, w.trim())?))
                }
            }
            "rotation_degrees" => a.rotation_degrees = parse_pair(k, v)?,
            "blur_sigma" => a.blur_sigma = parse_pair(k, v)?,
            "flip_h_prob" => a.flip_h_prob = parse(k, v)?,
            "flip_v_prob" => a.flip_v_prob = parse(k, v)?,
            "min_instance_area" => a.min_area = parse(k, v)?,
            "pixel_scale" => self.pixel_scale = parse(k, v)?,
            "backbone_widths" => {
                m.backbone_widths = parse_list::<usize>(k, v)?
                    .try_into()
                    .map_err(|_| Error::Config("backbone_widths: expected four integers".into()))?
            }
            "fpn_channels" => m.fpn_channels = parse(k, v)?,
            "box_hidden" => m.box_hidden = parse(k, v)?,
            "mask_channels" => m.mask_channels = parse(k, v)?,
            "anchor_scales" => m.anchors.scales = parse_list::<f64>(k, v)?.into_iter().map(|s| vec![s]).collect(),
            "anchor_ratios" => m.anchors.aspect_ratios = parse_list(k, v)?,
            "rpn_pos_iou" => t.rpn.pos_iou = parse(k, v)?,
            "rpn_neg_iou" => t.rpn.neg_iou = parse(k, v)?,
            "rpn_batch" => t.rpn.batch = parse(k, v)?,
            "rpn_pos_fraction" => t.rpn.pos_fraction = parse(k, v)?,
            "pre_nms_top_k" => {
                t.proposals.pre_nms_top_k = parse(k, v)?;
                d.proposals.pre_nms_top_k = t.proposals.pre_nms_top_k;
            }
            "proposal_nms_iou" => {
                t.proposals.nms_iou = parse(k, v)?;
                d.proposals.nms_iou = t.proposals.nms_iou;
            }
            "post_nms_top_k" => {
                t.proposals.post_nms_top_k = parse(k, v)?;
                d.proposals.post_nms_top_k = t.proposals.post_nms_top_k;
            }
            "min_objectness" => d.proposals.min_objectness = parse(k, v)?,
            "roi_batch" => t.rois.batch = parse(k, v)?,
            "roi_fg_fraction" => t.rois.fg_fraction = parse(k, v)?,
            "roi_fg_iou" => t.rois.fg_iou = parse(k, v)?,
            "score_threshold" => d.score_threshold = parse(k, v)?,
            "detection_nms_iou" => d.nms_iou = parse(k, v)?,
            "max_detections" => d.max_detections = parse(k, v)?,
            "mask_threshold" => d.mask_threshold = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown key {k:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_epochs.contains(&0) {
            return Err(Error::Config("every stage needs at least one epoch".into()));
        }
        if self.stage_epochs.iter().sum::<usize>() != self.epochs {
            return Err(Error::Config(format!(
                "stage_epochs {:?} must sum to epochs = {}",
                self.stage_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.lr_initial) || !pos(self.lr_final) || !pos(self.clip_norm) || !pos(self.pixel_scale) {
            return Err(Error::Config("learning rates, clip_norm and pixel_scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight_decay be >= 0".into()));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let t = &self.targets;
        let d = &self.detect;
        if ![t.rpn.pos_iou, t.rpn.neg_iou, t.rpn.pos_fraction, t.proposals.nms_iou, t.rois.fg_fraction, t.rois.fg_iou]
            .into_iter()
            .all(unit)
            || ![d.score_threshold, d.nms_iou, d.mask_threshold, d.proposals.min_objectness].into_iter().all(unit)
        {
            return Err(Error::Config("IoU thresholds, fractions and probabilities must lie in [0, 1]".into()));
        }
        if t.rpn.neg_iou > t.rpn.pos_iou {
            return Err(Error::Config("rpn_neg_iou must not exceed rpn_pos_iou".into()));
        }
        if t.rpn.batch == 0 || t.rois.batch == 0 || t.proposals.post_nms_top_k == 0 {
            return Err(Error::Config("sampling batch sizes must be positive".into()));
        }
        self.augment.validate()?;
        self.model.validate()
    }

    pub fn optimizer(&self, lr: f64) -> crate::autodiff::SgdConfig {
        crate::autodiff::SgdConfig {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }

    /// Serializes every key, with a short comment per group.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let a = &self.augment;
        let t = &self.targets;
        let d = &self.detect;
        let m = &self.model;
        let kv = |s: &mut String, k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        s.push_str("# data\n");
        kv(&mut s, "dataset_root", self.dataset_root.display().to_string());
        kv(&mut s, "seed", self.seed.to_string());
        s.push_str("# 65 held-out test images, remainder split train/val\n");
        kv(&mut s, "use_split", self.use_split.to_string());
        kv(&mut s, "test_count", self.test_count.to_string());
        kv(&mut s, "val_fraction", self.val_fraction.to_string());
        s.push_str("# optimization: SGD with momentum 0.9, batch 6, 100 epochs\n");
        kv(&mut s, "precision", if self.precision == Precision::F32 { "f32".into() } else { "f64".into() });
        kv(&mut s, "epochs", self.epochs.to_string());
        kv(&mut s, "batch_size", self.batch_size.to_string());
        kv(&mut s, "steps_per_epoch", self.steps_per_epoch.to_string());
        kv(&mut s, "val_every", self.val_every.to_string());
        s.push_str("# learning rate 0.001, lowered tenfold to 0.0001 for end-to-end training\n");
        kv(&mut s, "lr_initial", self.lr_initial.to_string());
        kv(&mut s, "lr_final", self.lr_final.to_string());
        kv(&mut s, "momentum", self.momentum.to_string());
        s.push_str("# gradient norm clipped at 5.0; L2 weight decay 0.0001 applied every step\n");
        kv(&mut s, "clip_norm", self.clip_norm.to_string());
        kv(&mut s, "weight_decay", self.weight_decay.to_string());
        s.push_str("# stage 1: heads only; stage 2: adds backbone stage 4 and up; stage 3: everything\n");
        kv(&mut s, "stage_epochs", list(&self.stage_epochs));
        s.push_str("# augmentation: random crop, rotation, gaussian blur, horizontal and vertical flips\n");
        kv(&mut s, "augment", self.augment_enabled.to_string());
        kv(
            &mut s,
            "crop",
            a.crop_hw.map_or("none".to_string(), |(h, w)| format!("{h}x{w}")),
        );
        kv(&mut s, "rotation_degrees", list(&[a.rotation_degrees.0, a.rotation_degrees.1]));
        kv(&mut s, "blur_sigma", list(&[a.blur_sigma.0, a.blur_sigma.1]));
        kv(&mut s, "flip_h_prob", a.flip_h_prob.to_string());
        kv(&mut s, "flip_v_prob", a.flip_v_prob.to_string());
        kv(&mut s, "min_instance_area", a.min_area.to_string());
        s.push_str("# images are upsampled 2x, channel means subtracted, then scaled\n");
        kv(&mut s, "pixel_scale", self.pixel_scale.to_string());
        s.push_str("# model\n");
        kv(&mut s, "backbone_widths", list(&m.backbone_widths));
        kv(&mut s, "fpn_channels", m.fpn_channels.to_string());
        kv(&mut s, "box_hidden", m.box_hidden.to_string());
        kv(&mut s, "mask_channels", m.mask_channels.to_string());
        let scales: Vec<f64> = m.anchors.scales.iter().map(|v| v[0]).collect();
        kv(&mut s, "anchor_scales", list(&scales));
        kv(&mut s, "anchor_ratios", list(&m.anchors.aspect_ratios));
        s.push_str("# training targets\n");
        kv(&mut s, "rpn_pos_iou", t.rpn.pos_iou.to_string());
        kv(&mut s, "rpn_neg_iou", t.rpn.neg_iou.to_string());
        kv(&mut s, "rpn_batch", t.rpn.batch.to_string());
        kv(&mut s, "rpn_pos_fraction", t.rpn.pos_fraction.to_string());
        kv(&mut s, "pre_nms_top_k", t.proposals.pre_nms_top_k.to_string());
        kv(&mut s, "proposal_nms_iou", t.proposals.nms_iou.to_string());
        kv(&mut s, "post_nms_top_k", t.proposals.post_nms_top_k.to_string());
        kv(&mut s, "roi_batch", t.rois.batch.to_string());
        kv(&mut s, "roi_fg_fraction", t.rois.fg_fraction.to_string());
        kv(&mut s, "roi_fg_iou", t.rois.fg_iou.to_string());
        s.push_str("# inference\n");
        kv(&mut s, "min_objectness", d.proposals.min_objectness.to_string());
        kv(&mut s, "score_threshold", d.score_threshold.to_string());
        kv(&mut s, "detection_nms_iou", d.nms_iou.to_string());
        kv(&mut s, "max_detections", d.max_detections.to_string());
        kv(&mut s, "mask_threshold", d.mask_threshold.to_string());
        s
    }
}
