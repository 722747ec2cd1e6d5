//! Trainable gate functions.
//!
//! A binary step gate `b(w) = 1[w > 0]` has zero derivative wherever it is
//! differentiable, so gradient descent cannot move its latent weight. The
//! trainable gate adds a sawtooth of height `1/M` and unit slope,
//!
//! ```text
//! s(w)  = (M·w − ⌊M·w⌋) / M
//! TG(w) = b(w) + s(w)·g(w)
//! ```
//!
//! which changes the forward value by less than `sup|g| / M` while making the
//! derivative equal to `g(w) + s(w)·g′(w)` on every smooth piece. `g` is the
//! derivative shape the gate should present to the optimizer.
//!
//! At multiples of `1/M` the sawtooth jumps; the same closed form is
//! evaluated there (right-continuous, `s = 0`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_GRANULARITY: u32 = 100_000;

/// Catalog of derivative shapes `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    #[default]
    ConstantOne,
    SigmoidPrime,
    TanhPrime,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [
        ShapeKind::ConstantOne,
        ShapeKind::SigmoidPrime,
        ShapeKind::TanhPrime,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::ConstantOne => "constant_one",
            ShapeKind::SigmoidPrime => "sigmoid_prime",
            ShapeKind::TanhPrime => "tanh_prime",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant_one" => Ok(ShapeKind::ConstantOne),
            "sigmoid_prime" => Ok(ShapeKind::SigmoidPrime),
            "tanh_prime" => Ok(ShapeKind::TanhPrime),
            other => Err(Error::Argument(format!("unknown derivative shape `{other}`"))),
        }
    }
}

fn sigmoid(w: f64) -> f64 {
    1.0 / (1.0 + (-w).exp())
}

/// A derivative shape `g` together with its analytic derivative `g′`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeFunction {
    kind: ShapeKind,
}

impl ShapeFunction {
    pub fn kind(&self) -> ShapeKind {
        self.kind
    }

    #[inline]
    pub fn g(&self, w: f64) -> f64 {
        match self.kind {
            ShapeKind::ConstantOne => 1.0,
            ShapeKind::SigmoidPrime => {
                let s = sigmoid(w);
                s * (1.0 - s)
            }
            ShapeKind::TanhPrime => {
                let t = w.tanh();
                1.0 - t * t
            }
        }
    }

    #[inline]
    pub fn g_prime(&self, w: f64) -> f64 {
        match self.kind {
            ShapeKind::ConstantOne => 0.0,
            ShapeKind::SigmoidPrime => {
                let s = sigmoid(w);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            ShapeKind::TanhPrime => {
                let t = w.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }

    /// `sup |g|` over the real line.
    pub fn sup_abs(&self) -> f64 {
        match self.kind {
            ShapeKind::ConstantOne | ShapeKind::TanhPrime => 1.0,
            ShapeKind::SigmoidPrime => 0.25,
        }
    }
}

pub fn make_shape(kind: ShapeKind) -> ShapeFunction {
    ShapeFunction { kind }
}

/// Parses a shape name, e.g. `"sigmoid_prime"`.
pub fn make_shape_named(name: &str) -> Result<ShapeFunction> {
    name.parse().map(make_shape)
}

#[inline]
fn shaping_unchecked(w: f64, m: f64) -> f64 {
    let mw = m * w;
    (mw - mw.floor()) / m
}

/// The gradient-shaping sawtooth `(M·w − ⌊M·w⌋)/M`, in `[0, 1/M)`.
pub fn grad_shaping(w: f64, m: u32) -> Result<f64> {
    if m == 0 {
        return Err(Error::Argument("granularity M must be at least 1".into()));
    }
    if !w.is_finite() {
        return Err(Error::Argument(format!("gate weight must be finite, got {w}")));
    }
    Ok(shaping_unchecked(w, f64::from(m)))
}

/// `1[w > 0]`; closed at exactly zero.
#[inline]
pub fn step_gate(w: f64) -> u8 {
    u8::from(w > 0.0)
}

/// The trainable gate `TG(w) = b(w) + s(w)·g(w)` for one granularity and shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableGate {
    pub m: u32,
    pub shape: ShapeKind,
}

impl Default for TrainableGate {
    fn default() -> Self {
        Self {
            m: DEFAULT_GRANULARITY,
            shape: ShapeKind::ConstantOne,
        }
    }
}

impl TrainableGate {
    pub fn new(m: u32, shape: ShapeKind) -> Result<Self> {
        if m == 0 {
            return Err(Error::Argument("granularity M must be at least 1".into()));
        }
        Ok(Self { m, shape })
    }

    pub fn shape_fn(&self) -> ShapeFunction {
        make_shape(self.shape)
    }

    #[inline]
    pub fn shaping(&self, w: f64) -> f64 {
        shaping_unchecked(w, f64::from(self.m))
    }

    #[inline]
    pub fn value(&self, w: f64) -> f64 {
        f64::from(step_gate(w)) + self.shaping(w) * self.shape_fn().g(w)
    }

    /// `g(w) + s(w)·g′(w)`, the derivative of [`Self::value`] on each smooth piece.
    #[inline]
    pub fn derivative(&self, w: f64) -> f64 {
        let shape = self.shape_fn();
        match self.shape {
            ShapeKind::ConstantOne => 1.0,
            _ => shape.g(w) + self.shaping(w) * shape.g_prime(w),
        }
    }

    #[inline]
    pub fn backward(&self, w: f64, upstream: f64) -> f64 {
        upstream * self.derivative(w)
    }
}

pub fn trainable_gate(w: f64, gate: &TrainableGate) -> f64 {
    gate.value(w)
}

pub fn trainable_gate_backward(w: f64, upstream: f64, gate: &TrainableGate) -> f64 {
    gate.backward(w, upstream)
}

/// A gate function together with its trainable weight vector, one weight per
/// gated unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    pub gate: TrainableGate,
    pub weights: Tensor,
}

impl GateSpec {
    pub fn new(gate: TrainableGate, weights: Tensor) -> Self {
        Self { gate, weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mask(&self) -> Vec<u8> {
        self.weights.data().iter().map(|&w| step_gate(w)).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.weights.data().iter().map(|&w| self.gate.value(w)).collect()
    }
}

/// Applies `TG` elementwise to a weight tensor on the tape. The recorded
/// backward rule is [`TrainableGate::backward`], not the step function's
/// zero derivative.
pub fn gate_tensor(tape: &mut Tape, w: Var, gate: TrainableGate) -> Result<Var> {
    let value = tape.value(w).map(|x| gate.value(x));
    tape.custom("trainable_gate", value, &[w], move |up, ins| {
        vec![up.zip_map(ins[0], |u, x| gate.backward(x, u))]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-12;

    #[test]
    fn shaping_examples() {
        assert_eq!(grad_shaping(0.5, 10).unwrap(), 0.0);
        assert!((grad_shaping(0.37, 10).unwrap() - 0.07).abs() < TOL);
        assert!((grad_shaping(-0.25, 10).unwrap() - 0.05).abs() < TOL);
        assert!(grad_shaping(f64::NAN, 10).is_err());
        assert!(grad_shaping(1.0, 0).is_err());
    }

    #[test]
    fn step_examples() {
        assert_eq!(step_gate(1.0), 1);
        assert_eq!(step_gate(-1.0), 0);
        assert_eq!(step_gate(0.0), 0);
        assert_eq!(step_gate(-0.0), 0);
    }

    #[test]
    fn gate_examples() {
        let one = TrainableGate::default();
        assert!((one.value(3e-6) - 1.000003).abs() < TOL);
        let coarse = TrainableGate::new(10, ShapeKind::ConstantOne).unwrap();
        assert!((coarse.value(-0.25) - 0.05).abs() < TOL);
        assert_eq!(coarse.value(0.5), 1.0);
    }

    #[test]
    fn backward_examples() {
        let one = TrainableGate::default();
        assert_eq!(one.backward(0.3, 2.0), 2.0);
        let sig = TrainableGate::new(10, ShapeKind::SigmoidPrime).unwrap();
        // σ(0.37), σ′ = σ(1−σ), σ″ = σ(1−σ)(1−2σ), evaluated by hand.
        let s = 1.0 / (1.0 + (-0.37f64).exp());
        let expected = s * (1.0 - s) + 0.07 * s * (1.0 - s) * (1.0 - 2.0 * s);
        assert!((sig.backward(0.37, 1.0) - expected).abs() < TOL);
        assert_eq!(sig.backward(1.234, 0.0), 0.0);
    }

    #[test]
    fn shape_catalog() {
        let c = make_shape(ShapeKind::ConstantOne);
        assert_eq!((c.g(7.0), c.g_prime(7.0)), (1.0, 0.0));
        assert_eq!(make_shape(ShapeKind::SigmoidPrime).g(0.0), 0.25);
        assert_eq!(make_shape(ShapeKind::TanhPrime).g(0.0), 1.0);
        assert!(matches!(make_shape_named("relu_prime"), Err(Error::Argument(_))));
        assert_eq!(make_shape_named("tanh_prime").unwrap().kind(), ShapeKind::TanhPrime);
    }

    #[test]
    fn shape_derivatives_match_finite_differences() {
        for kind in ShapeKind::ALL {
            let f = make_shape(kind);
            for &w in &[-1.7, -0.3, 0.0, 0.4, 2.2] {
                let h = 1e-6;
                let fd = (f.g(w + h) - f.g(w - h)) / (2.0 * h);
                assert!((fd - f.g_prime(w)).abs() < 1e-8, "{kind} at {w}");
            }
        }
    }

    #[test]
    fn gate_tensor_examples() {
        let gate = TrainableGate::default();
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![-1.0, 1.0]));
        let g = gate_tensor(&mut tape, w, gate).unwrap();
        let v = tape.value(g).data().to_vec();
        assert!(v[0].abs() <= 1e-5 && (v[1] - 1.0).abs() <= 1e-5);
        let loss = tape.sum(g).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(w).data(), &[1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![0.0]));
        let g = gate_tensor(&mut tape, w, gate).unwrap();
        assert_eq!(tape.value(g).data(), &[0.0]);
        let loss = tape.sum(g).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(w).data(), &[1.0]);
    }
}
