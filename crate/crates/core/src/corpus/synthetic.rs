use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::QaPair;

/// Token spelling used by [`copy_pairs`].
pub fn copy_token(i: usize) -> String {
    format!("w{i:02}")
}

/// Echo pairs: `n` random sequences over `symbols` distinct tokens, with
/// lengths uniform in `min_len..=max_len`, each paired with itself.
pub fn copy_pairs(n: usize, symbols: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<QaPair> {
    assert!(symbols >= 1 && min_len >= 1 && min_len <= max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            let tokens: Vec<String> = (0..len).map(|_| copy_token(rng.random_range(0..symbols))).collect();
            QaPair::new(tokens.clone(), tokens).expect("non-empty")
        })
        .collect()
}
