use super::DataError;
use crate::tensor::Prng;

pub const DEFAULT_SPLIT_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffle with `seed`, then cut. The train and val parts get
/// `⌊ratio·N⌋` items each and test takes the remainder.
pub fn split<T>(mut items: Vec<T>, ratios: [f64; 3], seed: u64) -> Result<Split<T>, DataError> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(DataError::InvalidSplit(format!(
            "ratios {ratios:?} must be finite and non-negative"
        )));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidSplit(format!(
            "ratios {ratios:?} sum to {total}, not 1"
        )));
    }
    Prng::new(seed).shuffle(&mut items);
    let n = items.len();
    let take = |r: f64| ((r * n as f64 + 1e-9).floor() as usize).min(n);
    let n_train = take(ratios[0]);
    let n_val = take(ratios[1]).min(n - n_train);
    let mut rest = items.split_off(n_train);
    let test = rest.split_off(n_val);
    Ok(Split {
        train: items,
        val: rest,
        test,
    })
}
