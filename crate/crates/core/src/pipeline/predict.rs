use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{Checkpoint, ParamStore, Real};
use crate::config::RunConfig;
use crate::data::{preprocess, Normalization, Sample};
use crate::detection::{DetectConfig, Detection, MaskRcnn};
use crate::{Error, Result};

/// A model with its parameters and the input normalization it was trained
/// with.
#[derive(Debug, Clone)]
pub struct TrainedModel<T> {
    pub config: RunConfig,
    pub model: MaskRcnn,
    pub store: ParamStore<T>,
    pub norm: Normalization,
}

fn parse_means(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Checkpoint(format!("bad channel means {s:?}")))?;
    v.try_into().map_err(|_| Error::Checkpoint(format!("expected three channel means, got {s:?}")))
}

impl<T: Real> TrainedModel<T> {
    /// Metadata that lets [`TrainedModel::load`] rebuild the model.
    pub fn meta(&self) -> BTreeMap<String, String> {
        let m = self.norm.means;
        BTreeMap::from([
            ("config".to_string(), self.config.to_text()),
            ("means".to_string(), format!("{},{},{}", m[0], m[1], m[2])),
            ("pixel_scale".to_string(), self.norm.scale.to_string()),
        ])
    }

    pub fn checkpoint(&self, extra: &[(&str, String)]) -> Checkpoint {
        let mut meta = self.meta();
        for (k, v) in extra {
            meta.insert(k.to_string(), v.clone());
        }
        Checkpoint::from_store(&self.store, meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ckpt.meta
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks {k:?}")))
        };
        let config = RunConfig::parse(get("config")?)?;
        let means = parse_means(get("means")?)?;
        let scale: f64 = get("pixel_scale")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad pixel_scale".into()))?;
        let (model, mut store) = MaskRcnn::new::<T>(config.model.clone(), config.seed)?;
        ckpt.apply_to(&mut store)?;
        Ok(TrainedModel {
            config,
            model,
            store,
            norm: Normalization { means, scale },
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Detections for a raw sample, in the sample's own pixel grid.
    pub fn predict(&self, raw: &Sample, cfg: &DetectConfig) -> Result<Vec<Detection>> {
        predict_raw(&self.model, &self.store, &self.norm, raw, cfg)
    }
}

/// Preprocesses `raw`, runs detection at the network resolution and maps
/// boxes and masks back to the original image size.
pub fn predict_raw<T: Real>(
    model: &MaskRcnn,
    store: &ParamStore<T>,
    norm: &Normalization,
    raw: &Sample,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let pre = preprocess(
        &Sample {
            id: raw.id.clone(),
            image: raw.image.clone(),
            instances: Vec::new(),
        },
        norm,
    );
    let dets = model.detect(store, &pre.batch().cast::<T>(), cfg)?;
    let (h, w) = (raw.height(), raw.width());
    dets.iter()
        .map(|d| d.rescaled(0.5, h, w, cfg.mask_threshold))
        .filter(|d| d.as_ref().map_or(true, |d| !d.mask.is_empty()))
        .collect()
}
