//! Shared fixtures for the benchmarks.

use cgans_core::trainer::TrainConfig;
use cgans_core::{AgeGroup, Tensor, NUM_GROUPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A batch of `n` images in `[-1, 1]` with one target group per image.
pub fn image_batch(n: usize, size: usize, seed: u64) -> (Tensor, Vec<AgeGroup>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::uniform(&[n, 3, size, size], -1.0, 1.0, &mut rng);
    let groups = (0..n)
        .map(|_| AgeGroup::new(rng.random_range(0..NUM_GROUPS)).expect("in range"))
        .collect();
    (images, groups)
}

/// The default architecture at image size `size`.
pub fn config(size: usize) -> TrainConfig {
    TrainConfig {
        image_size: size,
        ..TrainConfig::default()
    }
}
