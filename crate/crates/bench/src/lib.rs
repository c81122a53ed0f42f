//! Shared fixture builders for the pipeline benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use r2d_core::response::{random_bundle, DecodedBox, NodeGrid, ResponseBundle};

/// A bundle shaped like a small detector output: two grid levels with a
/// handful of confident nodes.
pub fn detector_like_bundle(num_classes: usize, seed: u64) -> ResponseBundle {
    let grid = NodeGrid {
        levels: vec![
            r2d_core::response::GridLevel { width: 20, height: 20, stride: 8.0 },
            r2d_core::response::GridLevel { width: 10, height: 10, stride: 16.0 },
        ],
    };
    let mut bundle = random_bundle(grid, num_classes, 8, 0.5, 2.0, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF);
    for _ in 0..30 {
        let node = rng.random_range(0..bundle.node_count());
        let class = rng.random_range(0..num_classes);
        bundle.cls.nodes[node][class] = rng.random_range(0.5..4.0);
    }
    bundle
}

/// Uniformly random scored boxes for NMS benchmarks.
pub fn random_boxes(n: usize, seed: u64) -> Vec<(usize, DecodedBox)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let x1 = rng.random_range(0.0..200.0);
            let y1 = rng.random_range(0.0..200.0);
            let w = rng.random_range(4.0..60.0);
            let h = rng.random_range(4.0..60.0);
            (i, DecodedBox { x1, y1, x2: x1 + w, y2: y1 + h, score: rng.random_range(0.01..1.0) })
        })
        .collect()
}

/// Bimodal quality values for EM benchmarks.
pub fn bimodal_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let center = if rng.random_range(0.0..1.0) < 0.4 { 0.15 } else { 0.7 };
            (center + rng.random_range(-0.1..0.1f64)).clamp(0.0, 1.0)
        })
        .collect()
}
