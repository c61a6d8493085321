//! Fixtures shared by the benchmarks.

use voxreg_core::features::mind_ssc;
use voxreg_core::{make_pair, FeatureVolume, GridGeometry, MindConfig, SynthConfig, SynthPair};

/// Seeded synthetic pair on an `n`-cube.
pub fn pair(n: usize, seed: u64) -> SynthPair {
    let g = GridGeometry::isotropic([n, n, n]).expect("valid cube");
    let cfg = SynthConfig {
        seed,
        magnitude_cap: 3.0,
        ..Default::default()
    };
    make_pair(&g, &cfg).expect("synthetic pair")
}

/// MIND-SSC features of both images of a pair.
pub fn mind_pair(p: &SynthPair) -> (FeatureVolume, FeatureVolume) {
    let cfg = MindConfig::default();
    (
        mind_ssc(&p.fixed, &cfg).expect("mind"),
        mind_ssc(&p.moving, &cfg).expect("mind"),
    )
}
