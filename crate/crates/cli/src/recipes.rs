//! Default configs for the built-in experiments.

use std::path::PathBuf;

use tgate::{
    Activation, ArchSpec, CostKind, Granularity, InitConfig, LayerSpec, Mode, OptimizerConfig,
    OptimizerKind, Padding, RegularizerConfig, ShapeKind, TaskLoss, TrainConfig, TrainableGate,
};

use crate::config::{DatasetSpec, ExperimentConfig, ExperimentKind, ExperimentOptions, CONFIG_VERSION};

pub const ALL: [ExperimentKind; 4] = [
    ExperimentKind::SineSelection,
    ExperimentKind::PlantedFeatures,
    ExperimentKind::CnnBudget,
    ExperimentKind::GradcheckSuite,
];

fn dense(units: usize, bias: bool, gate: Option<Granularity>, name: &str) -> LayerSpec {
    LayerSpec::Dense { units, bias, gate, share: None, name: Some(name.into()) }
}

fn conv(filters: usize, name: &str) -> LayerSpec {
    LayerSpec::Conv2d {
        filters,
        kernel: 3,
        stride: 2,
        padding: Padding::Same,
        bias: true,
        gate: Some(Granularity::Channel),
        share: None,
        name: Some(name.into()),
    }
}

fn act(func: Activation) -> LayerSpec {
    LayerSpec::Activation { func }
}

fn adam(lr: f64) -> OptimizerConfig {
    OptimizerConfig { kind: OptimizerKind::adam(), lr }
}

pub fn recipe(kind: ExperimentKind) -> ExperimentConfig {
    match kind {
        ExperimentKind::SineSelection => sine_selection(1),
        ExperimentKind::PlantedFeatures => planted_features(1),
        ExperimentKind::CnnBudget => cnn_budget(0.5, 1),
        ExperimentKind::GradcheckSuite => gradcheck_suite(),
    }
}

/// One hidden dense layer of 20 sine units behind a channel gate; the
/// channel-count regularizer targets a single open unit.
pub fn sine_selection(seed: u64) -> ExperimentConfig {
    let mut train = TrainConfig::new(Mode::Joint, TaskLoss::Mse, CostKind::Channels);
    train.epochs = 5000;
    train.batch_size = 1000;
    train.seed = seed;
    train.regularizer = RegularizerConfig { rho: 0.05, lambda: 10.0 };
    train.optimizer = adam(1e-3);
    train.shuffle = false;
    train.log_every = 10;
    ExperimentConfig {
        version: CONFIG_VERSION,
        kind: ExperimentKind::SineSelection,
        output_dir: Some(PathBuf::from(format!("sine_selection_seed{seed}"))),
        dataset: DatasetSpec::SyntheticSine {
            n: 1000,
            test_n: 500,
            x_range: (-std::f64::consts::PI, std::f64::consts::PI),
            seed,
        },
        arch: ArchSpec {
            input_shape: vec![1],
            input_gate: false,
            layers: vec![
                dense(20, false, Some(Granularity::Channel), "hidden"),
                act(Activation::Sin),
                dense(1, false, None, "out"),
            ],
        },
        init: InitConfig::default(),
        train,
        options: ExperimentOptions::default(),
    }
}

/// Linear regression on 10 features behind an input gate; 3 are relevant.
pub fn planted_features(seed: u64) -> ExperimentConfig {
    let mut train = TrainConfig::new(Mode::Joint, TaskLoss::Mse, CostKind::Channels);
    train.epochs = 3000;
    train.batch_size = 500;
    train.seed = seed;
    train.regularizer = RegularizerConfig { rho: 0.3, lambda: 0.1 };
    train.optimizer = adam(1e-2);
    train.lr_halve_at = vec![1500, 2000, 2500];
    train.shuffle = false;
    ExperimentConfig {
        version: CONFIG_VERSION,
        kind: ExperimentKind::PlantedFeatures,
        output_dir: Some(PathBuf::from(format!("planted_features_seed{seed}"))),
        dataset: DatasetSpec::SyntheticPlanted { n_features: 10, k_relevant: 3, n: 500, noise: 0.01, seed },
        arch: ArchSpec {
            input_shape: vec![10],
            input_gate: true,
            layers: vec![dense(1, true, None, "out")],
        },
        // Gates start well open so θ fits before the budget bites.
        init: InitConfig { gate_range: (0.5, 1.0), ..InitConfig::default() },
        train,
        options: ExperimentOptions::default(),
    }
}

/// Three gated stride-2 convolutions (8, 16, 32 channels) and a dense head
/// on 28×28 glyphs, trained against a FLOPs budget.
pub fn cnn_budget(rho: f64, seed: u64) -> ExperimentConfig {
    let mut train = TrainConfig::new(Mode::Joint, TaskLoss::CrossEntropy, CostKind::Flops);
    train.epochs = 8;
    train.batch_size = 32;
    train.seed = seed;
    train.regularizer = RegularizerConfig { rho, lambda: 10.0 };
    train.optimizer = adam(2e-3);
    train.log_every = 10;
    ExperimentConfig {
        version: CONFIG_VERSION,
        kind: ExperimentKind::CnnBudget,
        output_dir: Some(PathBuf::from(format!("cnn_budget_rho{rho}_seed{seed}"))),
        dataset: DatasetSpec::SyntheticGlyphs { n: 3000, test_n: 1000, classes: 10, noise: 0.25, seed },
        arch: ArchSpec {
            input_shape: vec![1, 28, 28],
            input_gate: false,
            layers: vec![
                conv(8, "conv0"),
                act(Activation::Relu),
                conv(16, "conv1"),
                act(Activation::Relu),
                conv(32, "conv2"),
                act(Activation::Relu),
                LayerSpec::Flatten,
                dense(10, true, None, "head"),
            ],
        },
        init: InitConfig::default(),
        train,
        options: ExperimentOptions { baseline: true, ..ExperimentOptions::default() },
    }
}

/// Selection-only pruning of a pre-trained cnn_budget model.
pub fn cnn_selection(rho: f64, seed: u64) -> ExperimentConfig {
    let mut cfg = cnn_budget(rho, seed);
    cfg.output_dir = Some(PathBuf::from(format!("cnn_selection_rho{rho}_seed{seed}")));
    cfg.train.mode = Mode::SelectionOnly;
    cfg.train.epochs = 4;
    // 94 steps per epoch; the decay damps gate flicker around w = 0.
    cfg.train.lr_halve_at = vec![94, 188, 235, 282, 329];
    cfg.options = ExperimentOptions { baseline: false, pretrain_epochs: 4, ..ExperimentOptions::default() };
    cfg
}

/// Finite-difference check of the full regularized loss on a small gated
/// network. Gate weights sit at the middle of sawtooth pieces; with
/// `M = 100` the stencil (`±2h`, `h = 1e-3`) stays inside one piece.
pub fn gradcheck_suite() -> ExperimentConfig {
    let mut train = TrainConfig::new(Mode::Joint, TaskLoss::Mse, CostKind::Flops);
    train.epochs = 0;
    train.batch_size = 16;
    train.seed = 7;
    train.regularizer = RegularizerConfig { rho: 0.5, lambda: 0.1 };
    ExperimentConfig {
        version: CONFIG_VERSION,
        kind: ExperimentKind::GradcheckSuite,
        output_dir: Some(PathBuf::from("gradcheck_suite")),
        dataset: DatasetSpec::SyntheticPlanted { n_features: 4, k_relevant: 2, n: 16, noise: 0.1, seed: 7 },
        arch: ArchSpec {
            input_shape: vec![4],
            input_gate: true,
            layers: vec![
                dense(6, true, Some(Granularity::Channel), "hidden"),
                act(Activation::Sin),
                dense(1, true, None, "out"),
            ],
        },
        init: InitConfig {
            gate: TrainableGate { m: 100, shape: ShapeKind::SigmoidPrime },
            gate_range: (-0.3, 0.3),
        },
        train,
        options: ExperimentOptions::default(),
    }
}
