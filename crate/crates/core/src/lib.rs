//! Trainable gate functions and differentiable channel pruning.
//!
//! The crate provides a small reverse-mode autodiff engine ([`Tape`]), the
//! trainable gate `TG(w) = 1[w > 0] + s(w)·g(w)` ([`gates`]), gated network
//! layers with structural pruning ([`layers`]), FLOPs/parameter/channel cost
//! models with the compression-ratio regularizer ([`budget`]), and training
//! loops for joint and selection-only pruning ([`trainer`]).

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod budget;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod gates;
pub mod layers;
pub mod tensor;
pub mod trainer;

pub use autodiff::{ElemOp, Gradients, Precision, Tape, Var};
pub use budget::{
    gated_cost, layer_cost_static, reg_loss, total_cost_static, CostKind, CostModel, CostReport,
    RegularizerConfig,
};
pub use conv::Padding;
pub use data::{Dataset, Targets};
pub use error::{Error, Result};
pub use gates::{
    gate_tensor, grad_shaping, make_shape, step_gate, trainable_gate, trainable_gate_backward,
    GateSpec, ShapeFunction, ShapeKind, TrainableGate,
};
pub use layers::{
    active_mask, hard_prune, tgl_forward, weight_gate_forward, Activation, ArchSpec, GatedModel,
    Granularity, InitConfig, LayerKind, LayerSpec, PruneReport, TrainableGateLayer,
};
pub use tensor::Tensor;
pub use trainer::{
    evaluate, fit, loss_total, train_step, History, MetricsWriter, Mode, OptimizerConfig,
    OptimizerKind, OptimizerState, StepMetrics, TaskLoss, TrainConfig, Trainer,
};
