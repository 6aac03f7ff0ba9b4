use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::gradcheck::{grad_check_with, registry};
use crate::autodiff::OpKind;
use crate::config::RunConfig;
use crate::data::sample::image_to_tensor;
use crate::data::{load_sample, Sample};
use crate::detection::Detection;
use crate::eval::{evaluate_dataset, predictions_from_submission, EvalReport};
use crate::maskops::{rle_decode, Submission, SubmissionLine, SUBMISSION_HEADER};
use crate::{Error, Result};

use super::overlay::draw_overlay;
use super::predict::TrainedModel;
use super::train::run_split;

/// Which part of the dataset a command works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            "all" => Ok(Subset::All),
            _ => Err(Error::InvalidArgument(format!("unknown subset {s:?} (train, val, test, all)"))),
        }
    }
}

/// Ids of `subset` under the split that `cfg` describes.
pub fn subset_ids(cfg: &RunConfig, subset: Subset) -> Result<Vec<String>> {
    let (train, val, test) = run_split(cfg)?;
    let mut ids = match subset {
        Subset::Train => train,
        Subset::Val => val,
        Subset::Test => test,
        Subset::All => train.into_iter().chain(val).chain(test).collect(),
    };
    ids.sort();
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!("the {subset:?} subset is empty")));
    }
    Ok(ids)
}

fn submission_text(lines: &[String]) -> String {
    let mut s = format!("{SUBMISSION_HEADER}\n");
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    s
}

/// Submission lines for one image; an image without detections gets a
/// single line with no runs.
pub fn rle_lines(image_id: &str, dets: &[Detection]) -> Vec<String> {
    if dets.is_empty() {
        return vec![format!("{image_id},")];
    }
    dets.iter()
        .map(|d| SubmissionLine::from_mask(image_id, &d.mask).to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferSummary {
    pub processed: Vec<String>,
    /// `(path, reason)` for inputs that could not be read.
    pub failed: Vec<(PathBuf, String)>,
    pub detections: usize,
}

fn read_image(path: &Path) -> Result<(String, Sample)> {
    let file = if path.is_dir() {
        let id = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
        path.join("images").join(format!("{id}.png"))
    } else {
        path.to_path_buf()
    };
    let id = file
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::data(path, "no file name"))?
        .to_string();
    let img = image::open(&file).map_err(|e| Error::data(&file, e.to_string()))?;
    let sample = Sample {
        id: id.clone(),
        image: image_to_tensor(&img),
        instances: Vec::new(),
    };
    Ok((id, sample))
}

/// Runs detection on each image (a PNG file or a sample directory) and
/// writes `<id>_overlay.png`, `detections.csv` and `submission.csv` to
/// `out_dir`. Unreadable images are skipped and reported.
pub fn cmd_infer(checkpoint: &Path, images: &[PathBuf], out_dir: &Path) -> Result<InferSummary> {
    let tm = TrainedModel::<f32>::load(checkpoint)?;
    fs::create_dir_all(out_dir)?;
    let mut summary = InferSummary {
        processed: Vec::new(),
        failed: Vec::new(),
        detections: 0,
    };
    let mut det_csv = String::from("image_id,rank,score,x1,y1,x2,y2,area\n");
    let mut rle = Vec::new();
    for path in images {
        let (id, sample) = match read_image(path) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                summary.failed.push((path.clone(), e.to_string()));
                continue;
            }
        };
        let dets = tm.predict(&sample, &tm.config.detect)?;
        for (k, d) in dets.iter().enumerate() {
            let b = d.bbox;
            let _ = writeln!(det_csv, "{id},{k},{:.6},{:.2},{:.2},{:.2},{:.2},{}", d.score, b.x1, b.y1, b.x2, b.y2, d.mask.count());
        }
        rle.extend(rle_lines(&id, &dets));
        let masks: Vec<_> = dets.iter().map(|d| d.mask.clone()).collect();
        let overlay = out_dir.join(format!("{id}_overlay.png"));
        draw_overlay(&sample.image, &masks)
            .save(&overlay)
            .map_err(|e| Error::data(&overlay, e.to_string()))?;
        log::info!("{id}: {} detections", dets.len());
        summary.detections += dets.len();
        summary.processed.push(id);
    }
    fs::write(out_dir.join("detections.csv"), det_csv)?;
    fs::write(out_dir.join("submission.csv"), submission_text(&rle))?;
    Ok(summary)
}

/// Writes the submission file for every image of `subset`.
pub fn cmd_export_rle(checkpoint: &Path, cfg: &RunConfig, subset: Subset, out: &Path) -> Result<usize> {
    let tm = TrainedModel::<f32>::load(checkpoint)?;
    let mut lines = Vec::new();
    for id in subset_ids(cfg, subset)? {
        let s = load_sample(&cfg.dataset_root.join(&id))?;
        let dets = tm.predict(&s, &tm.config.detect)?;
        lines.extend(rle_lines(&id, &dets));
    }
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let n = lines.iter().filter(|l| !l.ends_with(',')).count();
    fs::write(out, submission_text(&lines))?;
    Ok(n)
}

/// Where `eval` gets its predictions from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PredictionSource {
    Checkpoint(PathBuf),
    Submission(PathBuf),
}

/// Scores predictions on `subset` and, if `out` is given, writes the
/// per-image CSV report there.
pub fn cmd_eval(source: &PredictionSource, cfg: &RunConfig, subset: Subset, out: Option<&Path>) -> Result<EvalReport> {
    let ids = subset_ids(cfg, subset)?;
    let samples = ids
        .iter()
        .map(|id| load_sample(&cfg.dataset_root.join(id)))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = samples.iter().map(|s| (s.id.clone(), s.instances.clone())).collect();
    let preds = match source {
        PredictionSource::Checkpoint(p) => {
            let tm = TrainedModel::<f32>::load(p)?;
            samples
                .iter()
                .map(|s| {
                    let d = tm.predict(s, &cfg.detect)?;
                    Ok((s.id.clone(), d.into_iter().map(|d| (d.mask, d.score)).collect()))
                })
                .collect::<Result<Vec<_>>>()?
        }
        PredictionSource::Submission(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::data(p, e.to_string()))?;
            let sub = Submission::parse(&text)?;
            let dims: Vec<_> = samples.iter().map(|s| (s.id.clone(), s.height(), s.width())).collect();
            predictions_from_submission(&sub, &dims)?
        }
    };
    let report = evaluate_dataset(&preds, &gts)?;
    if let Some(out) = out {
        if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(out, report.to_csv())?;
    }
    Ok(report)
}

/// The two headline numbers plus the published reference values.
pub fn eval_summary(report: &EvalReport) -> String {
    let pct = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{:.2}", 100.0 * x));
    let mut s = String::new();
    let _ = writeln!(s, "AP: {}", pct(report.ap));
    let _ = writeln!(s, "AP@0.5: {}", pct(report.ap50()));
    let _ = writeln!(s, "Mask Average IoU: {}", pct(report.mean_mask_iou));
    let _ = writeln!(s, "images: {}  gt instances: {}  predictions: {}", report.per_image.len(), report.n_gt, report.n_pred);
    let _ = writeln!(
        s,
        "reference only, not comparable at this scale: ResNet-50-FPN AP 56.06 / IoU 66.98, ResNet-101-FPN AP 59.40 / IoU 70.54"
    );
    s
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-6;
pub const GRADCHECK_VARIANTS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub op: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub pass: bool,
}

/// Finite-difference check of every registered op at 64-bit over a few
/// shape variants. `corrupt` breaks one op's backward pass on purpose.
pub fn cmd_gradcheck(seed: u64, corrupt: Option<OpKind>) -> Result<Vec<GradCheckRow>> {
    let mut rows: Vec<GradCheckRow> = Vec::new();
    for variant in 0..GRADCHECK_VARIANTS {
        for case in registry(seed, variant) {
            let r = grad_check_with(&*case.build, &case.inputs, GRADCHECK_EPS, corrupt)?;
            match rows.iter_mut().find(|row| row.op == case.name) {
                Some(row) => {
                    row.max_rel_error = row.max_rel_error.max(r.max_rel_error);
                    row.coordinates += r.coordinates;
                }
                None => rows.push(GradCheckRow {
                    op: case.name.clone(),
                    max_rel_error: r.max_rel_error,
                    coordinates: r.coordinates,
                    pass: true,
                }),
            }
        }
    }
    for row in &mut rows {
        row.pass = row.max_rel_error < GRADCHECK_TOLERANCE;
    }
    Ok(rows)
}

pub fn gradcheck_table(rows: &[GradCheckRow]) -> String {
    let mut s = format!("{:<24} {:>14} {:>8}  result\n", "op", "max_rel_error", "coords");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<24} {:>14.3e} {:>8}  {}",
            r.op,
            r.max_rel_error,
            r.coordinates,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    s
}

/// Decodes every line of a submission against known image sizes; used to
/// check that exported runs reproduce the pasted masks.
pub fn decode_submission(text: &str, dims: &[(String, usize, usize)]) -> Result<Vec<(String, Vec<crate::maskops::BinaryMask>)>> {
    let sub = Submission::parse(text)?;
    dims.iter()
        .map(|(id, h, w)| {
            let masks = sub
                .lines
                .iter()
                .filter(|l| &l.image_id == id && !l.is_empty())
                .map(|l| rle_decode(&l.to_rle(*h, *w)))
                .collect::<Result<Vec<_>>>()?;
            Ok((id.clone(), masks))
        })
        .collect()
}
