//! DSB-layout loading, preprocessing, augmentation, splits and the
//! synthetic nucleus generator.

pub mod sample;
pub mod split;
pub mod synth;
pub mod transform;

pub use sample::{channel_means, discover, discover_ids, load_sample, save_mask_png, Sample};
pub use split::{split_dataset, DatasetSplit};
pub use synth::{make_synth, synth_sample, write_sample};
pub use transform::{augment, preprocess, AugmentConfig, Normalization};

/// Seed of the augmentation stream for one sample in one epoch.
pub fn sample_seed(seed: u64, id: &str, epoch: usize) -> u64 {
    // FNV-1a over the id, mixed with seed and epoch
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.rotate_left(17) ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}
