use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EvalError;

/// Seeded partition into (guidance, evaluation). The guidance side holds
/// `round(ratio * n)` items, clamped so neither side is empty; both sides
/// keep the input order.
pub fn split_holdout<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), EvalError> {
    let n = items.len();
    if n < 2 {
        return Err(EvalError::TooFewInstances(n));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(EvalError::BadRatio(ratio));
    }
    let k = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut guidance_idx = order[..k].to_vec();
    let mut eval_idx = order[k..].to_vec();
    guidance_idx.sort_unstable();
    eval_idx.sort_unstable();
    Ok((guidance_idx.iter().map(|&i| items[i].clone()).collect(), eval_idx.iter().map(|&i| items[i].clone()).collect()))
}
