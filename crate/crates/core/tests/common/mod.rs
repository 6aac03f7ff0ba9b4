#![allow(dead_code)]

pub mod oracles;

use nucleo::autodiff::gradcheck::relative_error;
use nucleo::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use nucleo::data::{channel_means, preprocess, synth_sample, Normalization};
use nucleo::detection::{MaskRcnn, ModelConfig};
use nucleo::maskops::BinaryMask;

/// Narrow model so finite differences over every coordinate stay cheap.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        backbone_widths: [4, 4, 6, 8],
        fpn_channels: 4,
        box_hidden: 8,
        mask_channels: 3,
        ..ModelConfig::default()
    }
}

/// A preprocessed synthetic sample as a `[1, 3, h, w]` batch plus masks.
pub fn synth_input(seed: u64) -> (Tensor<f64>, Vec<BinaryMask>) {
    let raw = synth_sample(seed, 0);
    let s = preprocess(&raw, &Normalization::new(channel_means(std::slice::from_ref(&raw))));
    (s.batch().cast(), s.instances)
}

pub fn tiny_model(seed: u64) -> (MaskRcnn, ParamStore<f64>) {
    MaskRcnn::new(tiny_config(), seed).unwrap()
}

/// Central differences of `f` against its tape gradient at up to
/// `per_tensor` evenly spread coordinates of each parameter in `ids`.
/// Returns the worst relative error and where it occurred.
pub fn param_fd_check(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    per_tensor: usize,
    f: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
) -> (f64, String) {
    let mut tape = Tape::new();
    let out = f(&mut tape, store);
    store.zero_grad();
    tape.backward(out, 1.0).unwrap().accumulate_into(store);
    let eval = |s: &ParamStore<f64>| {
        let mut t = Tape::new();
        let v = f(&mut t, s);
        t.value(v).item()
    };
    let eps = 1e-6;
    let mut worst = (0.0, String::new());
    for &id in ids {
        let n = store.get(id).value.len();
        let step = (n / per_tensor.max(1)).max(1);
        for j in (0..n).step_by(step) {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + eps;
            let fp = eval(store);
            store.get_mut(id).value.data_mut()[j] = orig - eps;
            let fm = eval(store);
            store.get_mut(id).value.data_mut()[j] = orig;
            let e = relative_error(store.get(id).grad.data()[j], (fp - fm) / (2.0 * eps));
            if e > worst.0 {
                worst = (e, format!("{}[{j}]", store.get(id).name));
            }
        }
    }
    worst
}

/// Fixed pseudo-random weights in `[-1, 1]` for a weighted-sum loss.
pub fn probe(shape: &[usize], salt: usize) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| (((i + 1) * 7919 + salt * 104_729) % 2001) as f64 / 1000.0 - 1.0).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn ids_with_prefix(store: &ParamStore<f64>, prefix: &str) -> Vec<ParamId> {
    (0..store.len())
        .map(ParamId)
        .filter(|&id| store.get(id).name.starts_with(prefix))
        .collect()
}

/// Moves every bias off zero. Zero-initialised biases put units fed only by
/// dead inputs exactly on the relu kink, where central differences are
/// meaningless.
pub fn jitter_biases(store: &mut ParamStore<f64>, salt: usize) {
    for (k, p) in store.iter_mut().enumerate() {
        if p.name.ends_with(".bias") {
            let n = p.value.len();
            let mut v = probe(&[n], salt + k);
            v.scale_assign(0.05);
            p.value = v;
        }
    }
}
