//! Fixtures shared by the benchmarks under `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgate::{
    Activation, ArchSpec, Dataset, GatedModel, Granularity, InitConfig, LayerSpec, Padding, Targets, Tensor,
};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// The three-conv glyph classifier with channel gates on every conv.
pub fn cnn_arch() -> ArchSpec {
    let conv = |filters| LayerSpec::Conv2d {
        filters,
        kernel: 3,
        stride: 2,
        padding: Padding::Same,
        bias: true,
        gate: Some(Granularity::Channel),
        share: None,
        name: None,
    };
    let relu = || LayerSpec::Activation { func: Activation::Relu };
    ArchSpec {
        input_shape: vec![1, 28, 28],
        input_gate: false,
        layers: vec![
            conv(8),
            relu(),
            conv(16),
            relu(),
            conv(32),
            relu(),
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 10, bias: true, gate: None, share: None, name: None },
        ],
    }
}

pub fn cnn_model(seed: u64) -> GatedModel {
    cnn_arch()
        .build(&InitConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))
        .expect("valid architecture")
}

pub fn glyph_batch(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&[n, 1, 28, 28], seed).map(|v| 0.5 * (v + 1.0));
    let labels = (0..n).map(|_| rng.random_range(0..10)).collect();
    Dataset::new(x, Targets::Classes { labels, classes: 10 }).expect("batch")
}
