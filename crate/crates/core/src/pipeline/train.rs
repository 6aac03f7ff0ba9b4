use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::predict::{predict_raw, TrainedModel};
use crate::autodiff::{sgd_momentum_step, ParamId, ParamStore, Real, StageTag, Tape, Tensor};
use crate::config::{Precision, RunConfig};
use crate::data::{augment, discover_ids, load_sample, preprocess, sample_seed, split_dataset, Normalization, Sample};
use crate::detection::{LossBreakdown, MaskRcnn};
use crate::eval::{evaluate_dataset, EvalReport};
use crate::{Error, Result};

/// Stage (1, 2 or 3) that `epoch` (0-based) belongs to.
pub fn stage_of(cfg: &RunConfig, epoch: usize) -> usize {
    let [a, b, _] = cfg.stage_epochs;
    if epoch < a {
        1
    } else if epoch < a + b {
        2
    } else {
        3
    }
}

/// Parameter groups trained in `stage`.
pub fn stage_tags(stage: usize) -> &'static [StageTag] {
    match stage {
        1 => &[StageTag::Head],
        2 => &[StageTag::Head, StageTag::Upper],
        _ => &[StageTag::Head, StageTag::Upper, StageTag::Lower],
    }
}

pub fn stage_lr(cfg: &RunConfig, stage: usize) -> f64 {
    if stage < 3 {
        cfg.lr_initial
    } else {
        cfg.lr_final
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    /// 1-based global step.
    pub step: usize,
    pub stage: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: usize,
    pub mean_loss: f64,
    pub val_ap: Option<f64>,
    pub val_ap50: Option<f64>,
    pub val_mean_iou: Option<f64>,
}

pub const STEP_LOG_HEADER: &str = "epoch,step,stage,lr,l_cls,l_bbox,l_mask,total,grad_norm";
pub const EPOCH_LOG_HEADER: &str = "epoch,stage,mean_loss,val_ap,val_ap50,val_mean_iou";

impl StepLog {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.epoch, self.step, self.stage, self.lr, l.l_cls, l.l_bbox, l.l_mask, l.total, self.grad_norm
        )
    }
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        format!(
            "{},{},{:.9},{},{},{}",
            self.epoch,
            self.stage,
            self.mean_loss,
            f(self.val_ap),
            f(self.val_ap50),
            f(self.val_mean_iou)
        )
    }
}

/// Append-only record of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut s = format!("{STEP_LOG_HEADER}\n");
        for r in &self.steps {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = format!("{EPOCH_LOG_HEADER}\n");
        for r in &self.epochs {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct TrainLock {
    path: PathBuf,
}

impl TrainLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join("train.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(TrainLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidArgument(format!(
                "{} exists: another training run owns this directory",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for TrainLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Raw samples kept in memory up to a byte budget; the rest are re-read
/// from disk when needed.
struct SampleSource {
    root: PathBuf,
    cache: HashMap<String, Sample>,
}

const CACHE_BYTES: usize = 1 << 30;

impl SampleSource {
    fn new(root: &Path, ids: &[String]) -> Result<(Self, [f64; 3])> {
        let mut cache = HashMap::new();
        let mut used = 0usize;
        let mut sum = [0f64; 3];
        let mut pixels = 0usize;
        for id in ids {
            let s = load_sample(&root.join(id))?;
            let hw = s.height() * s.width();
            for (c, acc) in sum.iter_mut().enumerate() {
                *acc += s.image.data()[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).sum::<f64>();
            }
            pixels += hw;
            let bytes = 4 * s.image.len() + s.instances.iter().map(|m| m.bits().len()).sum::<usize>();
            if used + bytes <= CACHE_BYTES {
                used += bytes;
                cache.insert(id.clone(), s);
            }
        }
        let means = if pixels == 0 { [0.0; 3] } else { sum.map(|v| v / pixels as f64) };
        Ok((
            SampleSource {
                root: root.to_path_buf(),
                cache,
            },
            means,
        ))
    }

    fn get(&self, id: &str) -> Result<Sample> {
        match self.cache.get(id) {
            Some(s) => Ok(s.clone()),
            None => load_sample(&self.root.join(id)),
        }
    }
}

/// Train, validation and test ids of a run.
pub fn run_split(cfg: &RunConfig) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    let ids = discover_ids(&cfg.dataset_root)?;
    if ids.is_empty() {
        return Err(Error::data(&cfg.dataset_root, "no samples found"));
    }
    if !cfg.use_split {
        return Ok((ids, Vec::new(), Vec::new()));
    }
    let s = split_dataset(&ids, cfg.seed, cfg.test_count, cfg.val_fraction)?;
    Ok((s.train_ids, s.val_ids, s.test_ids))
}

/// Scores the model on raw samples.
pub fn evaluate_samples<T: Real>(
    model: &MaskRcnn,
    store: &ParamStore<T>,
    norm: &Normalization,
    samples: &[Sample],
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let preds = samples
        .iter()
        .map(|s| {
            let d = predict_raw(model, store, norm, s, &cfg.detect)?;
            Ok((s.id.clone(), d.into_iter().map(|d| (d.mask, d.score)).collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = samples.iter().map(|s| (s.id.clone(), s.instances.clone())).collect();
    evaluate_dataset(&preds, &gts)
}

struct CsvSink {
    file: File,
}

impl CsvSink {
    fn create(path: &Path, header: &str) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{header}")?;
        Ok(CsvSink { file })
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}")?;
        self.file.flush()?;
        Ok(())
    }
}

/// Runs the three-stage schedule and writes logs and checkpoints to
/// `out_dir`.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, out_dir),
        Precision::F64 => train_with::<f64>(cfg, out_dir),
    }
}

fn save<T: Real>(tm: &TrainedModel<T>, path: &Path, extra: &[(&str, String)]) -> Result<()> {
    tm.checkpoint(extra).save(path)
}

fn train_with<T: Real>(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let _lock = TrainLock::acquire(out_dir)?;
    let (train_ids, val_ids, _) = run_split(cfg)?;
    log::info!("training on {} images, validating on {}", train_ids.len(), val_ids.len());
    let (source, means) = SampleSource::new(&cfg.dataset_root, &train_ids)?;
    let norm = Normalization {
        means,
        scale: cfg.pixel_scale,
    };
    let val_samples = val_ids
        .iter()
        .map(|id| load_sample(&cfg.dataset_root.join(id)))
        .collect::<Result<Vec<_>>>()?;

    let (model, store) = MaskRcnn::new::<T>(cfg.model.clone(), cfg.seed)?;
    let mut tm = TrainedModel {
        config: cfg.clone(),
        model,
        store,
        norm,
    };
    let mut steps_csv = CsvSink::create(&out_dir.join("train_log.csv"), STEP_LOG_HEADER)?;
    let mut epochs_csv = CsvSink::create(&out_dir.join("val_log.csv"), EPOCH_LOG_HEADER)?;
    let mut log = TrainLog::default();
    let steps_per_epoch = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        train_ids.len().div_ceil(cfg.batch_size)
    };
    let mut best: Option<(f64, PathBuf)> = None;
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let stage = stage_of(cfg, epoch);
        let lr = stage_lr(cfg, stage);
        tm.store.set_trainable_stages(stage_tags(stage));
        let opt = cfg.optimizer(lr);
        let mut order: Vec<usize> = (0..train_ids.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d)));
        let mut epoch_loss = 0.0;
        let t_epoch = Instant::now();

        for s in 0..steps_per_epoch {
            global_step += 1;
            let batch: Vec<&str> = (0..cfg.batch_size)
                .map(|k| train_ids[order[(s * cfg.batch_size + k) % order.len()]].as_str())
                .collect();
            let weight = 1.0 / batch.len() as f64;
            let results = batch
                .par_iter()
                .map(|id| image_step(&tm, &source, id, global_step, weight))
                .collect::<Result<Vec<_>>>()?;

            tm.store.zero_grad();
            let mut loss = LossBreakdown::default();
            for (b, grads) in &results {
                loss.accumulate(b, weight);
                for (pid, g) in grads {
                    tm.store.get_mut(*pid).grad.add_assign(g);
                }
            }
            let stats = if loss.total.is_finite() {
                sgd_momentum_step(&mut tm.store, &opt)
            } else {
                Err(Error::NonFinite(format!("loss is {} at step {global_step}", loss.total)))
            };
            let stats = match stats {
                Ok(st) => st,
                Err(e) => {
                    let p = out_dir.join("last_good.ckpt");
                    save(&tm, &p, &[("step", (global_step - 1).to_string())])?;
                    log::error!("aborting at step {global_step}: {e}; parameters before this step saved to {}", p.display());
                    return Err(e);
                }
            };
            let row = StepLog {
                epoch,
                step: global_step,
                stage,
                lr,
                loss,
                grad_norm: stats.grad_norm,
            };
            steps_csv.row(&row.csv_row())?;
            log.steps.push(row);
            epoch_loss += loss.total / steps_per_epoch as f64;
            log::debug!("step {global_step}: {loss:?}");
        }

        let mut entry = EpochLog {
            epoch,
            stage,
            mean_loss: epoch_loss,
            val_ap: None,
            val_ap50: None,
            val_mean_iou: None,
        };
        if !val_samples.is_empty() && (cfg.val_every > 0 && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs)) {
            let r = evaluate_samples(&tm.model, &tm.store, &tm.norm, &val_samples, cfg)?;
            entry.val_ap = r.ap;
            entry.val_ap50 = r.ap50();
            entry.val_mean_iou = r.mean_mask_iou;
            if let Some(ap) = r.ap {
                if best.as_ref().is_none_or(|(b, _)| ap > *b) {
                    let p = out_dir.join("best.ckpt");
                    save(&tm, &p, &[("epoch", epoch.to_string()), ("val_ap", ap.to_string())])?;
                    best = Some((ap, p));
                }
            }
        }
        epochs_csv.row(&entry.csv_row())?;
        log.epochs.push(entry);
        log::info!(
            "epoch {}/{} stage {stage} lr {lr} mean loss {:.4} ({:.1}s){}",
            epoch + 1,
            cfg.epochs,
            epoch_loss,
            t_epoch.elapsed().as_secs_f64(),
            entry.val_ap.map_or(String::new(), |ap| format!(" val AP {:.4}", ap))
        );
        if epoch + 1 == cfg.epochs || stage_of(cfg, epoch + 1) != stage {
            save(&tm, &out_dir.join(format!("stage{stage}.ckpt")), &[("epoch", epoch.to_string())])?;
        }
    }
    let final_checkpoint = out_dir.join("final.ckpt");
    save(&tm, &final_checkpoint, &[("step", global_step.to_string())])?;
    Ok(TrainOutcome {
        log,
        final_checkpoint,
        best_checkpoint: best.map(|b| b.1),
        train_ids,
        val_ids,
    })
}

type ParamGrads<T> = Vec<(ParamId, Tensor<T>)>;

/// Loss and parameter gradients (scaled by `weight`) of one image.
fn image_step<T: Real>(
    tm: &TrainedModel<T>,
    source: &SampleSource,
    id: &str,
    step: usize,
    weight: f64,
) -> Result<(LossBreakdown, ParamGrads<T>)> {
    let cfg = &tm.config;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, id, step));
    let mut sample = preprocess(&source.get(id)?, &tm.norm);
    if cfg.augment_enabled {
        sample = augment(&sample, &cfg.augment, &mut rng);
    }
    let mut tape = Tape::new();
    let (loss, _) = tm
        .model
        .training_loss(&mut tape, &tm.store, &sample.batch().cast::<T>(), &sample.instances, &cfg.targets, &mut rng)?;
    let b = loss.breakdown(&tape);
    if !b.total.is_finite() {
        return Ok((b, Vec::new()));
    }
    Ok((b, tape.backward(loss.total, T::of(weight))?.into_param_grads()))
}
