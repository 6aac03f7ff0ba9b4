//! Central finite-difference certification of backward passes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{OpKind, RoiRef, Tape, Var};
use super::tensor::Tensor;
use crate::geometry::BoxXYXY;
use crate::{Error, Result};

/// Builds a scalar on `tape` from leaves holding the checked inputs.
pub type Builder = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate(f: &Builder, inputs: &[Tensor<f64>], corrupt: Option<OpKind>) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = match corrupt {
        Some(k) => Tape::with_corruption(k),
        None => Tape::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Shape("grad_check needs a scalar-valued function".into()));
    }
    Ok((tape, vars, out))
}

/// Compares the tape gradient of `f` against central differences with step
/// `eps`, over every coordinate of every input.
pub fn grad_check(f: &Builder, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport> {
    grad_check_with(f, inputs, eps, None)
}

/// Like [`grad_check`], with the analytic pass run on a tape that corrupts
/// one op kind's backward.
pub fn grad_check_with(
    f: &Builder,
    inputs: &[Tensor<f64>],
    eps: f64,
    corrupt: Option<OpKind>,
) -> Result<GradCheckReport> {
    let (tape, vars, out) = evaluate(f, inputs, corrupt)?;
    let grads = tape.backward(out, 1.0)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(v).unwrap_or(&zero);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let (tp, _, op) = evaluate(f, &probe, None)?;
            let fp = tp.value(op).item();
            probe[i].data_mut()[j] = orig - eps;
            let (tm, _, om) = evaluate(f, &probe, None)?;
            let fm = tm.value(om).item();
            probe[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// One registered differentiable op with concrete random inputs.
pub struct OpCase {
    pub name: String,
    pub kind: OpKind,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Builder>,
}

impl std::fmt::Debug for OpCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpCase")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("inputs", &self.inputs)
            .finish()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Values bounded away from 0 so relu has no kink within one step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).expect("sized")
}

/// Distinct values spaced 0.01 apart so no pooling window has a near tie.
fn tie_free(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).expect("sized")
}

/// Wraps a tensor-valued op into a scalar with fixed random weights.
fn weighted(rng: &mut ChaCha8Rng, out_shape: &[usize], op: Box<Builder>) -> Box<Builder> {
    let w = uniform(rng, out_shape, -1.0, 1.0);
    Box::new(move |t, v| {
        let y = op(t, v)?;
        t.weighted_sum(y, w.clone())
    })
}

fn case(name: &str, kind: OpKind, inputs: Vec<Tensor<f64>>, build: Box<Builder>) -> OpCase {
    OpCase {
        name: name.to_string(),
        kind,
        inputs,
        build,
    }
}

/// Every differentiable op with inputs drawn for shape variant `variant`.
/// Different variants change batch, channel and spatial sizes.
pub fn registry(seed: u64, variant: usize) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (variant as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let n = 1 + variant % 2;
    let c = 2 + variant % 3;
    let h = 4 + 2 * (variant % 3);
    let w = 4 + 2 * ((variant + 1) % 3);
    let mut cases = Vec::new();

    // conv2d with stride/pad varying by variant; keeps the output integral
    {
        let f = 1 + variant % 3;
        let k = if variant.is_multiple_of(2) { 3 } else { 1 };
        let (stride, pad) = if k == 3 { (1 + variant % 2, 1) } else { (1, 0) };
        let (h, w) = if stride == 2 { (h + 1, w + 1) } else { (h, w) };
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let inputs = vec![
            uniform(&mut rng, &[n, c, h, w], -1.0, 1.0),
            uniform(&mut rng, &[f, c, k, k], -1.0, 1.0),
            uniform(&mut rng, &[f], -1.0, 1.0),
        ];
        let b = weighted(&mut rng, &[n, f, oh, ow], Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], stride, pad)));
        cases.push(case("conv2d", OpKind::Conv2d, inputs, b));
    }
    {
        let f = 1 + variant % 2;
        let (k, s) = (2, 2);
        let inputs = vec![
            uniform(&mut rng, &[n, c, h / 2, w / 2], -1.0, 1.0),
            uniform(&mut rng, &[c, f, k, k], -1.0, 1.0),
            uniform(&mut rng, &[f], -1.0, 1.0),
        ];
        let out = [n, f, (h / 2 - 1) * s + k, (w / 2 - 1) * s + k];
        let b = weighted(&mut rng, &out, Box::new(move |t, v| t.conv_transpose2d(v[0], v[1], v[2], s)));
        cases.push(case("conv_transpose2d", OpKind::ConvTranspose2d, inputs, b));
    }
    {
        let shape = [n, c, h, w];
        let inputs = vec![away_from_zero(&mut rng, &shape)];
        let b = weighted(&mut rng, &shape, Box::new(|t, v| Ok(t.relu(v[0]))));
        cases.push(case("relu", OpKind::Relu, inputs, b));
    }
    {
        let inputs = vec![tie_free(&mut rng, &[n, c, h, w])];
        let b = weighted(&mut rng, &[n, c, h / 2, w / 2], Box::new(|t, v| t.max_pool2d(v[0])));
        cases.push(case("max_pool2d", OpKind::MaxPool2d, inputs, b));
    }
    {
        let (oh, ow) = (h * 2 - variant % 2, w + 3 * (variant % 2));
        let inputs = vec![uniform(&mut rng, &[n, c, h, w], -1.0, 1.0)];
        let b = weighted(&mut rng, &[n, c, oh, ow], Box::new(move |t, v| t.bilinear_resize(v[0], oh, ow)));
        cases.push(case("bilinear_resize", OpKind::BilinearResize, inputs, b));
    }
    {
        let shape = [n, c, h, w];
        let inputs = vec![uniform(&mut rng, &shape, -1.0, 1.0), uniform(&mut rng, &shape, -1.0, 1.0)];
        let b = weighted(&mut rng, &shape, Box::new(|t, v| t.add(v[0], v[1])));
        cases.push(case("add", OpKind::Add, inputs, b));
    }
    {
        let (rows, k, m) = (n + 2, c * 3, 2 + variant % 4);
        let inputs = vec![
            uniform(&mut rng, &[rows, k], -1.0, 1.0),
            uniform(&mut rng, &[m, k], -1.0, 1.0),
            uniform(&mut rng, &[m], -1.0, 1.0),
        ];
        let b = weighted(&mut rng, &[rows, m], Box::new(|t, v| t.linear(v[0], v[1], v[2])));
        cases.push(case("linear", OpKind::Linear, inputs, b));
    }
    {
        let shape = [n, c, h, w];
        let flat = [n * c, h * w];
        let inputs = vec![uniform(&mut rng, &shape, -1.0, 1.0)];
        let b = weighted(&mut rng, &flat, Box::new(move |t, v| t.reshape(v[0], &flat)));
        cases.push(case("reshape", OpKind::Reshape, inputs, b));
    }
    {
        let (a, k) = (1 + variant % 3, 4);
        let inputs = vec![uniform(&mut rng, &[n, a * k, h, w], -1.0, 1.0)];
        let b = weighted(&mut rng, &[n, h * w * a, k], Box::new(move |t, v| t.anchor_rows(v[0], k)));
        cases.push(case("anchor_rows", OpKind::AnchorRows, inputs, b));
    }
    {
        let axis = variant % 3;
        let s1 = vec![n, c, h];
        let mut s2 = s1.clone();
        s2[axis] += 1 + variant % 2;
        let mut out = s1.clone();
        out[axis] += s2[axis];
        let inputs = vec![uniform(&mut rng, &s1, -1.0, 1.0), uniform(&mut rng, &s2, -1.0, 1.0)];
        let b = weighted(&mut rng, &out, Box::new(move |t, v| t.concat(&[v[0], v[1]], axis)));
        cases.push(case("concat", OpKind::Concat, inputs, b));
    }
    {
        let m = 3 + variant;
        let rows: Vec<usize> = (0..m + 2).map(|i| (i * 7 + variant) % m).collect();
        let inputs = vec![uniform(&mut rng, &[m, c], -1.0, 1.0)];
        let r = rows.clone();
        let b = weighted(&mut rng, &[rows.len(), c], Box::new(move |t, v| t.gather_rows(v[0], &r)));
        cases.push(case("gather_rows", OpKind::GatherRows, inputs, b));
    }
    {
        let m = 3 + 2 * variant;
        let inputs = vec![uniform(&mut rng, &[m], -3.0, 3.0)];
        let b = weighted(&mut rng, &[m, 2], Box::new(|t, v| Ok(t.objectness_logits(v[0]))));
        cases.push(case("objectness_logits", OpKind::ObjectnessLogits, inputs, b));
    }
    {
        // two levels, strides 4 and 8, boxes partly outside the image
        let (h0, w0) = (h + 2, w + 2);
        let (h1, w1) = (h0.div_ceil(2), w0.div_ceil(2));
        let inputs = vec![
            uniform(&mut rng, &[n, c, h0, w0], -1.0, 1.0),
            uniform(&mut rng, &[n, c, h1, w1], -1.0, 1.0),
        ];
        let (iw, ih) = (4.0 * w0 as f64, 4.0 * h0 as f64);
        let rois: Vec<RoiRef> = (0..3 + variant % 3)
            .map(|i| {
                let x1 = rng.random_range(-6.0..iw * 0.7);
                let y1 = rng.random_range(-6.0..ih * 0.7);
                let bw = rng.random_range(3.0..iw * 0.6);
                let bh = rng.random_range(3.0..ih * 0.6);
                RoiRef {
                    feature: i % 2,
                    batch: i % n,
                    bbox: BoxXYXY { x1, y1, x2: x1 + bw, y2: y1 + bh },
                }
            })
            .collect();
        let p = 2 + variant % 3;
        let out = [rois.len(), c, p, p];
        let b = weighted(
            &mut rng,
            &out,
            Box::new(move |t, v| t.roi_align(&[v[0], v[1]], &[4.0, 8.0], &rois, p, 2)),
        );
        cases.push(case("roi_align", OpKind::RoiAlign, inputs, b));
    }
    {
        let (rows, k) = (3 + variant, 2 + variant % 3);
        let labels: Vec<i64> = (0..rows)
            .map(|i| if i == 1 { -1 } else { rng.random_range(0..k as i64) })
            .collect();
        let inputs = vec![uniform(&mut rng, &[rows, k], -2.0, 2.0)];
        let b: Box<Builder> = Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels));
        cases.push(case("softmax_cross_entropy", OpKind::SoftmaxCrossEntropy, inputs, b));
    }
    {
        let shape = [2 + variant, 4];
        let pred = uniform(&mut rng, &shape, -2.0, 2.0);
        // keep every difference at least 0.05 away from the +-1 seam
        let target = pred.map(|p| {
            let d = ((p * 7.3).sin() * 2.5).clamp(-2.5, 2.5);
            let d = if (d.abs() - 1.0).abs() < 0.05 { d * 1.2 } else { d };
            p - d
        });
        let b: Box<Builder> = Box::new(move |t, v| t.smooth_l1(v[0], target.clone(), 1.0));
        cases.push(case("smooth_l1", OpKind::SmoothL1, vec![pred], b));
    }
    {
        let shape = [n, 1, 3 + variant, 3];
        let targets = uniform(&mut rng, &shape, 0.0, 1.0);
        let inputs = vec![uniform(&mut rng, &shape, -4.0, 4.0)];
        let b: Box<Builder> = Box::new(move |t, v| t.sigmoid_bce(v[0], targets.clone()));
        cases.push(case("sigmoid_bce", OpKind::SigmoidBce, inputs, b));
    }
    cases
}
