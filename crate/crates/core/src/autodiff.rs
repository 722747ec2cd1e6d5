//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node holding its forward value,
//! its input nodes and a backward rule. Nodes are appended in evaluation
//! order, so the sequence is always topologically sorted and [`Tape::backward`]
//! is a single reverse sweep.
//!
//! ```
//! use tgate::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
//! let sq = tape.square(x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
//! ```

use crate::conv::{ConvGeometry, Padding};
use crate::error::{dim, Error, Result};
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule: `(upstream, input values, output value) -> input gradients`.
pub type BackwardRule = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

/// Floating-point precision of forward values recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    /// Every op result is rounded through `f32`.
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Sin,
    Relu,
    Square,
}

impl ElemOp {
    pub fn is_binary(self) -> bool {
        matches!(self, ElemOp::Add | ElemOp::Sub | ElemOp::Mul)
    }

    fn name(self) -> &'static str {
        match self {
            ElemOp::Add => "add",
            ElemOp::Sub => "sub",
            ElemOp::Mul => "mul",
            ElemOp::Sin => "sin",
            ElemOp::Relu => "relu",
            ElemOp::Square => "square",
        }
    }
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: &'static str,
    rule: Option<BackwardRule>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when unreachable.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn is_reachable(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Records an input or parameter tensor.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        if self.precision == Precision::F32 {
            value.round_to_f32();
        }
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: "leaf",
            rule: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op: &'static str,
        mut value: Tensor,
        inputs: Vec<Var>,
        rule: BackwardRule,
    ) -> Result<Var> {
        if self.precision == Precision::F32 {
            value.round_to_f32();
        }
        if !value.all_finite() {
            return Err(Error::NonFinite(op));
        }
        self.nodes.push(Node {
            value,
            inputs,
            op,
            rule: Some(rule),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn elementwise(&mut self, op: ElemOp, a: Var, b: Option<Var>) -> Result<Var> {
        let av = self.value(a);
        if !op.is_binary() {
            if b.is_some() {
                return Err(Error::Argument(format!("{} is unary", op.name())));
            }
            let value = match op {
                ElemOp::Sin => av.map(f64::sin),
                ElemOp::Relu => av.map(|x| x.max(0.0)),
                ElemOp::Square => av.map(|x| x * x),
                _ => unreachable!(),
            };
            let rule: BackwardRule = match op {
                ElemOp::Sin => Box::new(|up, ins, _| vec![up.zip_map(ins[0], |u, x| u * x.cos())]),
                ElemOp::Relu => Box::new(|up, ins, _| {
                    vec![up.zip_map(ins[0], |u, x| if x > 0.0 { u } else { 0.0 })]
                }),
                ElemOp::Square => Box::new(|up, ins, _| vec![up.zip_map(ins[0], |u, x| 2.0 * u * x)]),
                _ => unreachable!(),
            };
            return self.push(op.name(), value, vec![a], rule);
        }

        let b = b.ok_or_else(|| Error::Argument(format!("{} needs two operands", op.name())))?;
        let bv = self.value(b);
        let scalar_b = if av.shape() == bv.shape() {
            false
        } else if bv.len() == 1 {
            true
        } else {
            return Err(dim(
                op.name(),
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        };
        let f: fn(f64, f64) -> f64 = match op {
            ElemOp::Add => |x, y| x + y,
            ElemOp::Sub => |x, y| x - y,
            ElemOp::Mul => |x, y| x * y,
            _ => unreachable!(),
        };
        let value = if scalar_b {
            let s = bv.item();
            av.map(|x| f(x, s))
        } else {
            av.zip_map(bv, f)
        };
        let b_shape = bv.shape().to_vec();
        let reduce = move |g: Tensor| -> Tensor {
            if scalar_b {
                Tensor::new(b_shape.clone(), vec![g.sum()]).expect("scalar shape")
            } else {
                g
            }
        };
        let rule: BackwardRule = match op {
            ElemOp::Add => Box::new(move |up, _, _| vec![up.clone(), reduce(up.clone())]),
            ElemOp::Sub => Box::new(move |up, _, _| vec![up.clone(), reduce(up.map(|u| -u))]),
            ElemOp::Mul => Box::new(move |up, ins, _| {
                let (x, y) = (ins[0], ins[1]);
                if scalar_b {
                    let s = y.item();
                    vec![up.map(|u| u * s), reduce(up.zip_map(x, |u, xv| u * xv))]
                } else {
                    vec![up.zip_map(y, |u, yv| u * yv), up.zip_map(x, |u, xv| u * xv)]
                }
            }),
            _ => unreachable!(),
        };
        self.push(op.name(), value, vec![a, b], rule)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElemOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElemOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElemOp::Mul, a, Some(b))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElemOp::Sin, a, None)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElemOp::Relu, a, None)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElemOp::Square, a, None)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push("scale", value, vec![a], Box::new(move |up, _, _| vec![up.map(|u| u * c)]))
    }

    /// Divides by a constant (exact where `x / d` is, unlike scaling by `1/d`).
    pub fn div_const(&mut self, a: Var, d: f64) -> Result<Var> {
        if d == 0.0 {
            return Err(Error::Argument("division by zero".into()));
        }
        let value = self.value(a).map(|x| x / d);
        self.push("div_const", value, vec![a], Box::new(move |up, _, _| vec![up.map(|u| u / d)]))
    }

    /// Adds a constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push("offset", value, vec![a], Box::new(|up, _, _| vec![up.clone()]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            "sum",
            value,
            vec![a],
            Box::new(move |up, _, _| vec![Tensor::full(&shape, up.item())]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(a).to_vec();
        let value = self
            .value(a)
            .reshape(shape)
            .map_err(|_| dim("reshape", format!("{old:?} -> {shape:?}")))?;
        self.push(
            "reshape",
            value,
            vec![a],
            Box::new(move |up, _, _| vec![up.reshape(&old).expect("reshape back")]),
        )
    }

    /// Collapses all but the first axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let rest: usize = shape[1..].iter().product();
        let n = shape[0];
        self.reshape(a, &[n, rest.max(1)])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(dim(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let value = Tensor::new(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n))?;
        self.push(
            "matmul",
            value,
            vec![a, b],
            Box::new(move |up, ins, _| {
                let ga = matmul_a_bt(up.data(), ins[1].data(), m, n, k);
                let gb = matmul_at_b(ins[0].data(), up.data(), m, k, n);
                vec![
                    Tensor::new(vec![m, k], ga).expect("grad a"),
                    Tensor::new(vec![k, n], gb).expect("grad b"),
                ]
            }),
        )
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Argument("conv2d stride must be positive".into()));
        }
        let (xv, kv) = (self.value(input), self.value(kernel));
        if xv.rank() != 4 || kv.rank() != 4 || kv.shape()[2] != kv.shape()[3] {
            return Err(dim(
                "conv2d",
                format!("input {:?}, kernel {:?}", xv.shape(), kv.shape()),
            ));
        }
        let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let [o, i, k, _] = [kv.shape()[0], kv.shape()[1], kv.shape()[2], kv.shape()[3]];
        if c != i {
            return Err(dim(
                "conv2d",
                format!("input has {c} channels, kernel expects {i}"),
            ));
        }
        let geom = ConvGeometry::new(c, o, k, stride, h, w, padding).ok_or_else(|| {
            dim("conv2d", format!("kernel {k} larger than input {h}x{w}"))
        })?;
        let value = Tensor::new(
            vec![n, o, geom.out_h, geom.out_w],
            geom.forward(n, xv.data(), kv.data()),
        )?;
        self.push(
            "conv2d",
            value,
            vec![input, kernel],
            Box::new(move |up, ins, _| {
                let (gx, gk) = geom.backward(n, ins[0].data(), ins[1].data(), up.data());
                vec![
                    Tensor::new(ins[0].shape().to_vec(), gx).expect("grad input"),
                    Tensor::new(ins[1].shape().to_vec(), gk).expect("grad kernel"),
                ]
            }),
        )
    }

    /// Adds `bias[c]` to every element of channel `c` of an `[N, C, ...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (c, inner) = channel_layout(xv.shape());
        if bv.len() != c || bv.rank() != 1 {
            return Err(dim(
                "add_channel_bias",
                format!("{:?} with bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut value = xv.clone();
        for (idx, v) in value.data_mut().iter_mut().enumerate() {
            *v += bv.data()[(idx / inner) % c];
        }
        self.push(
            "add_channel_bias",
            value,
            vec![x, bias],
            Box::new(move |up, _, _| {
                let mut gb = vec![0.0; c];
                for (idx, u) in up.data().iter().enumerate() {
                    gb[(idx / inner) % c] += u;
                }
                vec![up.clone(), Tensor::from_vec(gb)]
            }),
        )
    }

    /// Multiplies channel `c` of an `[N, C, ...]` tensor by `scale[c]`.
    pub fn mul_channels(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(scale));
        let (c, inner) = channel_layout(xv.shape());
        if sv.len() != c || sv.rank() != 1 {
            return Err(dim(
                "mul_channels",
                format!("{:?} has {c} channels, scale has {}", xv.shape(), sv.len()),
            ));
        }
        let mut value = xv.clone();
        for (idx, v) in value.data_mut().iter_mut().enumerate() {
            *v *= sv.data()[(idx / inner) % c];
        }
        self.push(
            "mul_channels",
            value,
            vec![x, scale],
            Box::new(move |up, ins, _| {
                let (xv, sv) = (ins[0], ins[1]);
                let mut gx = up.clone();
                let mut gs = vec![0.0; c];
                for (idx, g) in gx.data_mut().iter_mut().enumerate() {
                    let ch = (idx / inner) % c;
                    gs[ch] += *g * xv.data()[idx];
                    *g *= sv.data()[ch];
                }
                vec![gx, Tensor::from_vec(gs)]
            }),
        )
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(dim(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", lv.shape(), labels.len()),
            ));
        }
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Argument(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv.data()[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - max).exp() / z;
            }
            loss += z.ln() + max - row[label];
        }
        let labels = labels.to_vec();
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss / n as f64),
            vec![logits],
            Box::new(move |up, _, _| {
                let u = up.item() / n as f64;
                let mut g = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    g[r * k + label] -= 1.0;
                }
                for v in &mut g {
                    *v *= u;
                }
                vec![Tensor::new(vec![n, k], g).expect("logit grad")]
            }),
        )
    }

    /// Records a node whose forward value and backward rule are both supplied
    /// by the caller. The rule's outputs must match the input shapes; this is
    /// checked when [`Tape::backward`] runs.
    pub fn custom(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var],
        rule: impl Fn(&Tensor, &[&Tensor]) -> Vec<Tensor> + 'static,
    ) -> Result<Var> {
        self.push(
            op,
            value,
            inputs.to_vec(),
            Box::new(move |up, ins, _| rule(up, ins)),
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(rule) = &node.rule else { continue };
            let Some(up) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let parts = rule(&up, &inputs, &node.value);
            if parts.len() != node.inputs.len() {
                return Err(Error::Argument(format!(
                    "backward rule of {} returned {} gradients for {} inputs",
                    node.op,
                    parts.len(),
                    node.inputs.len()
                )));
            }
            for (input, g) in node.inputs.iter().zip(parts) {
                let expected = self.nodes[input.0].value.shape();
                if g.shape() != expected {
                    return Err(Error::GradientShape {
                        op: node.op,
                        expected: expected.to_vec(),
                        got: g.shape().to_vec(),
                    });
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(up);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Channel count and per-channel inner size for an `[N, C, ...]` or `[C]` shape.
fn channel_layout(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (shape[0], 1),
        _ => (shape[1], shape[2..].iter().product()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1., 2.]));
        let b = tape.leaf(t(&[3., 4.]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4., 6.]);

        let z = tape.leaf(t(&[0.]));
        let sz = tape.sin(z).unwrap();
        assert_eq!(tape.value(sz).data(), &[0.]);

        let c = tape.leaf(t(&[2., 3.]));
        let d = tape.leaf(t(&[0.5, 2.]));
        let p = tape.mul(c, d).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 6.]);
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1., 2., 3.]));
        let s = tape.leaf(Tensor::scalar(2.0));
        let p = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(p).data(), &[2., 4., 6.]);
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(s).data(), &[6.0]);

        let bad = tape.leaf(t(&[1., 2.]));
        assert!(matches!(tape.add(a, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let id = tape.leaf(Tensor::from_rows(&[&[1., 0.], &[0., 1.]]));
        let m = tape.leaf(Tensor::from_rows(&[&[1., 2.], &[3., 4.]]));
        let p = tape.matmul(id, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);

        let a = tape.leaf(Tensor::from_rows(&[&[1., 2.]]));
        let b = tape.leaf(Tensor::from_rows(&[&[3.], &[4.]]));
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[11.]);
        let loss = tape.sum(ab).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).data(), &[3., 4.]);
        assert_eq!(g.get(a).shape(), &[1, 2]);

        let wrong = tape.leaf(Tensor::from_rows(&[&[1., 2., 3.]]));
        assert!(matches!(tape.matmul(a, wrong), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 3, 3], (0..18).map(f64::from).collect()).unwrap());
        // 1x1 identity kernel over two channels
        let k = tape.leaf(Tensor::new(vec![2, 2, 1, 1], vec![1., 0., 0., 1.]).unwrap());
        let y = tape.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let ones = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let k2 = tape.leaf(Tensor::ones(&[1, 1, 2, 2]));
        let y2 = tape.conv2d(ones, k2, 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y2).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y2).data(), &[4., 4., 4., 4.]);

        assert!(matches!(tape.conv2d(x, k2, 1, Padding::Valid), Err(Error::Dimension { .. })));
        assert!(matches!(tape.conv2d(ones, k2, 0, Padding::Valid), Err(Error::Argument(_))));
    }

    #[test]
    fn custom_grad_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1., -2., 3.]));
        let v = tape.value(x).clone();
        let id = tape.custom("identity", v, &[x], |up, _| vec![up.clone()]).unwrap();
        assert_eq!(tape.value(id), tape.value(x));
        let loss = tape.sum(id).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(x).data(), &[1., 1., 1.]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1., -2., 3.]));
        let zero = tape.value(x).map(|_| 0.0);
        let y = tape.custom("seven", zero, &[x], |up, _| vec![up.map(|u| 7.0 * u)]).unwrap();
        let loss = tape.sum(y).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        assert_eq!(tape.backward(loss).unwrap().get(x).data(), &[7., 7., 7.]);
    }

    #[test]
    fn custom_grad_shape_violation_detected_at_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1., 2.]));
        let v = tape.value(x).clone();
        let y = tape.custom("bad", v, &[x], |_, _| vec![Tensor::scalar(1.0)]).unwrap();
        let loss = tape.sum(y).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::GradientShape { .. })));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1., 2., 3.]));
        let unused = tape.leaf(Tensor::ones(&[2, 2]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[1., 1., 1.]);
        assert_eq!(g.get(unused), Tensor::zeros(&[2, 2]));
        assert!(!g.is_reachable(unused));

        let y = tape.leaf(t(&[1., 2.]));
        let sq = tape.square(y).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(y).data(), &[2., 4.]);

        assert!(matches!(tape.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn reused_parameter_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3.]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).data(), &[7.]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1e300]));
        assert!(matches!(tape.square(x), Err(Error::NonFinite("square"))));
    }

    #[test]
    fn f32_precision_rounds_values() {
        let mut tape = Tape::with_precision(Precision::F32);
        let x = tape.leaf(t(&[0.1]));
        assert_eq!(tape.value(x).item(), 0.1f32 as f64);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[2, 4]));
        let ce = tape.softmax_cross_entropy(l, &[0, 3]).unwrap();
        assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-15);
        let g = tape.backward(ce).unwrap().get(l);
        assert!((g.data()[0] - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!((g.data()[1] - 0.125).abs() < 1e-15);
    }
}
