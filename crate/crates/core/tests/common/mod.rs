use rand::Rng as _;

use digitfuse::dataset::{Dataset, Image};
use digitfuse::seed;

/// Ten classes of 6x6 images: one bright row and one bright column per
/// class, plus noise.
pub fn toy_digits(n: usize, seed_value: u64) -> Dataset {
    let mut rng = seed::rng(seed_value);
    let images = (0..n)
        .map(|i| {
            let c = i % 10;
            Image::from_clamped(
                6,
                6,
                (0..36).map(|p| {
                    let on = p / 6 == c % 6 || p % 6 == c / 2;
                    (if on { 0.8 } else { 0.1 }) + rng.random_range(0.0..0.2)
                }),
            )
        })
        .collect();
    Dataset::new(images, (0..n).map(|i| i % 10).collect(), 10, "toy").unwrap()
}
