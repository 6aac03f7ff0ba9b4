use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

/// Sorts `ids`, shuffles them with `seed`, takes the first `test_count` as
/// the test set and splits the rest into validation
/// (`round(val_fraction * rest)`) and training.
pub fn split_dataset(ids: &[String], seed: u64, test_count: usize, val_fraction: f64) -> Result<DatasetSplit> {
    if ids.len() < test_count {
        return Err(Error::InvalidArgument(format!(
            "{} ids cannot provide {test_count} test images",
            ids.len()
        )));
    }
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!("val fraction {val_fraction} outside [0, 1]")));
    }
    let mut all = ids.to_vec();
    all.sort();
    all.dedup();
    if all.len() != ids.len() {
        return Err(Error::InvalidArgument("duplicate sample ids".into()));
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rest = all.split_off(test_count);
    let n_val = (val_fraction * rest.len() as f64).round() as usize;
    let (val, train) = rest.split_at(n_val);
    Ok(DatasetSplit {
        train_ids: train.to_vec(),
        val_ids: val.to_vec(),
        test_ids: all,
        seed,
    })
}

impl DatasetSplit {
    /// `train,val,test` lines of `split,id`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,image_id\n");
        for (name, ids) in [("train", &self.train_ids), ("val", &self.val_ids), ("test", &self.test_ids)] {
            for id in ids {
                s.push_str(&format!("{name},{id}\n"));
            }
        }
        s
    }
}
