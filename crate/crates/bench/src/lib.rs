//! Fixtures shared by the benchmarks.

use densesim::mixer::{Domain, SampleBatch};
use densesim::net::gradcheck::random_sample;
use densesim::toy::{make_figures, make_raw_figures, DatasetConfig};
use densesim::{Result, SkinnedFigure};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default dataset settings with `figures` figures.
pub fn dataset(figures: usize) -> DatasetConfig {
    DatasetConfig {
        figures,
        ..DatasetConfig::default()
    }
}

/// Figures with and without transferred uv.
pub fn figures(cfg: &DatasetConfig) -> Result<(Vec<SkinnedFigure>, Vec<SkinnedFigure>)> {
    Ok((make_raw_figures(cfg)?, make_figures(cfg)?))
}

/// Half simulated, half real batch of random samples.
pub fn mixed_batch(size: usize, n: usize, parts: usize, seed: u64) -> SampleBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|k| {
            let d = if k < n / 2 { Domain::Sim } else { Domain::Real };
            random_sample(size, d, parts, &mut rng)
        })
        .collect();
    SampleBatch { samples }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_is_half_simulated() {
        let b = mixed_batch(8, 4, 3, 1);
        assert_eq!(b.samples.iter().filter(|s| s.domain == Domain::Sim).count(), 2);
        assert!(b.samples.iter().all(|s| s.validate().is_ok()));
    }
}
