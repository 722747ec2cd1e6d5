//! Sequential networks with trainable gate layers (TGLs).
//!
//! A TGL attaches to the output of a dense or convolution layer (after the
//! bias, before the activation) and multiplies each output channel by
//! `TG(w_i)`. Weight-mode TGLs gate every kernel element instead, and
//! block-mode TGLs gate the whole layer output with a single weight.
//!
//! Gate weights live in a registry on [`GatedModel`]; a TGL references a
//! registry entry by index, so layers sharing a group alias one weight vector
//! and accumulate gradients into it.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conv::{output_extent, Padding};
use crate::error::{dim, Error, Result};
use crate::gates::{gate_tensor, step_gate, GateSpec, TrainableGate};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Channel,
    Weight,
    Block,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Channel => "channel",
            Granularity::Weight => "weight",
            Granularity::Block => "block",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        n_in: usize,
        n_out: usize,
        bias: bool,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    },
    Activation {
        func: Activation,
    },
    Flatten,
}

impl LayerKind {
    pub fn is_counted(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    pub fn has_bias(&self) -> bool {
        matches!(
            self,
            LayerKind::Dense { bias: true, .. } | LayerKind::Conv2d { bias: true, .. }
        )
    }

    /// Shape of the main weight: `(n_in, n_out)` dense, `(out, in, k, k)` conv.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Dense { n_in, n_out, .. } => Some(vec![n_in, n_out]),
            LayerKind::Conv2d { in_ch, out_ch, k, .. } => Some(vec![out_ch, in_ch, k, k]),
            _ => None,
        }
    }

    pub fn out_channels(&self) -> Option<usize> {
        match *self {
            LayerKind::Dense { n_out, .. } => Some(n_out),
            LayerKind::Conv2d { out_ch, .. } => Some(out_ch),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Activation { .. } => "activation",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerKind::Dense { n_in, n_out, .. } => {
                if input != [n_in] {
                    return Err(dim(
                        "dense",
                        format!("expects input [{n_in}], got {input:?}"),
                    ));
                }
                Ok(vec![n_out])
            }
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                k,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 || input[0] != in_ch {
                    return Err(dim(
                        "conv2d",
                        format!("expects [{in_ch}, H, W], got {input:?}"),
                    ));
                }
                if stride == 0 || k == 0 {
                    return Err(Error::Argument("conv2d stride and kernel must be positive".into()));
                }
                let (h, _) = output_extent(input[1], k, stride, padding)
                    .ok_or_else(|| dim("conv2d", format!("kernel {k} exceeds input {input:?}")))?;
                let (w, _) = output_extent(input[2], k, stride, padding)
                    .ok_or_else(|| dim("conv2d", format!("kernel {k} exceeds input {input:?}")))?;
                Ok(vec![out_ch, h, w])
            }
            LayerKind::Activation { .. } => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Attachment of a gate-registry entry to a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableGateLayer {
    pub group: usize,
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Weight first, then bias when present.
    pub params: Vec<Tensor>,
    pub gate: Option<TrainableGateLayer>,
}

/// One entry of the gate registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateGroup {
    pub name: String,
    pub spec: GateSpec,
}

/// A sequential network plus its gate registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedModel {
    /// Per-sample input shape (no batch axis).
    pub input_shape: Vec<usize>,
    /// Gate on the input features (axis 1 of the batch), if any.
    pub input_gate: Option<usize>,
    /// Input channels kept by a hard-pruned model, applied before layer 0.
    pub input_select: Option<Vec<usize>>,
    pub layers: Vec<Layer>,
    pub gates: Vec<GateGroup>,
}

/// Tape handles for a model's parameters.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub layers: Vec<Vec<Var>>,
    pub gates: Vec<Var>,
}

/// Identifies one trainable tensor of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRef {
    Theta { layer: usize, index: usize },
    Gate { group: usize },
}

/// Multiplies channel `i` of `y` by `TG(w_i)`.
pub fn tgl_forward(tape: &mut Tape, y: Var, w: Var, gate: TrainableGate) -> Result<Var> {
    let channels = match tape.shape(y) {
        [c] => *c,
        s => s[1],
    };
    let n = tape.value(w).len();
    if channels != n {
        return Err(dim(
            "tgl_forward",
            format!("{channels} channels but {n} gates"),
        ));
    }
    let tg = gate_tensor(tape, w, gate)?;
    tape.mul_channels(y, tg)
}

/// `TG(w) ⊙ K`, used in place of the kernel `K`.
pub fn weight_gate_forward(tape: &mut Tape, kernel: Var, w: Var, gate: TrainableGate) -> Result<Var> {
    let kshape = tape.shape(kernel).to_vec();
    let n = tape.value(w).len();
    if n != tape.value(kernel).len() {
        return Err(dim(
            "weight_gate_forward",
            format!("kernel {kshape:?} has {} elements but {n} gates", tape.value(kernel).len()),
        ));
    }
    let tg = gate_tensor(tape, w, gate)?;
    let tg = tape.reshape(tg, &kshape)?;
    tape.mul(kernel, tg)
}

/// Multiplies the whole tensor by a single gate value.
pub fn block_gate_forward(tape: &mut Tape, y: Var, w: Var, gate: TrainableGate) -> Result<Var> {
    if tape.value(w).len() != 1 {
        return Err(dim("block_gate_forward", "block gates hold exactly one weight"));
    }
    let tg = gate_tensor(tape, w, gate)?;
    tape.mul(y, tg)
}

/// `step_gate` over a gate spec's weights.
pub fn active_mask(spec: &GateSpec) -> Vec<u8> {
    spec.mask()
}

fn apply_activation(tape: &mut Tape, x: Var, func: Activation) -> Result<Var> {
    match func {
        Activation::Relu => tape.relu(x),
        Activation::Sin => tape.sin(x),
    }
}

/// Uniform gate weights in `[lo, hi]`; all gates start open for `lo > 0`.
pub fn init_gate_weights<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec((0..n).map(|_| rng.random_range(lo..=hi)).collect())
}

impl GatedModel {
    /// Per-layer `(input, output)` sample shapes; fails if layers do not chain.
    pub fn shapes(&self) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        let mut cur = self.input_shape.clone();
        if let Some(sel) = &self.input_select {
            cur[0] = sel.len();
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let next = layer.kind.output_shape(&cur).map_err(|e| match e {
                Error::Dimension { op, detail } => Error::Dimension {
                    op,
                    detail: format!("layer `{}`: {detail}", layer.name),
                },
                other => other,
            })?;
            out.push((cur, next.clone()));
            cur = next;
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(match self.shapes()?.last() {
            Some((_, o)) => o.clone(),
            None => self.input_shape.clone(),
        })
    }

    /// Checks shape chaining, parameter shapes and the gate registry.
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("bad input shape {:?}", self.input_shape)));
        }
        let shapes = self.shapes()?;
        let mut used = vec![false; self.gates.len()];
        let mut check_group = |g: usize, expected: usize, who: &str| -> Result<()> {
            let group = self
                .gates
                .get(g)
                .ok_or_else(|| Error::Config(format!("{who}: gate group {g} does not exist")))?;
            if group.spec.len() != expected {
                return Err(dim(
                    "gate",
                    format!("{who}: gate group `{}` has {} weights, expected {expected}", group.name, group.spec.len()),
                ));
            }
            used[g] = true;
            Ok(())
        };
        if let Some(g) = self.input_gate {
            check_group(g, self.input_shape[0], "input")?;
        }
        for (layer, (_, out)) in self.layers.iter().zip(&shapes) {
            let expect_params = match (&layer.kind.weight_shape(), layer.kind.has_bias()) {
                (Some(_), true) => 2,
                (Some(_), false) => 1,
                (None, _) => 0,
            };
            if layer.params.len() != expect_params {
                return Err(Error::Config(format!(
                    "layer `{}` has {} parameter tensors, expected {expect_params}",
                    layer.name,
                    layer.params.len()
                )));
            }
            if let Some(ws) = layer.kind.weight_shape() {
                if layer.params[0].shape() != ws.as_slice() {
                    return Err(dim(
                        "layer",
                        format!("`{}` weight {:?}, expected {ws:?}", layer.name, layer.params[0].shape()),
                    ));
                }
                if layer.kind.has_bias() && layer.params[1].shape() != [out[0]] {
                    return Err(dim("layer", format!("`{}` bias shape", layer.name)));
                }
            }
            if let Some(tgl) = layer.gate {
                if !layer.kind.is_counted() {
                    return Err(Error::Config(format!(
                        "layer `{}`: gates attach to dense or conv2d layers only",
                        layer.name
                    )));
                }
                let expected = match tgl.granularity {
                    Granularity::Channel => out[0],
                    Granularity::Weight => layer.params[0].len(),
                    Granularity::Block => 1,
                };
                check_group(tgl.group, expected, &layer.name)?;
            }
        }
        if let Some(g) = used.iter().position(|u| !u) {
            return Err(Error::Config(format!(
                "gate group `{}` is not referenced by any layer",
                self.gates[g].name
            )));
        }
        Ok(())
    }

    /// Every trainable tensor in a fixed order: layer parameters, then gates.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut refs: Vec<ParamRef> = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| (0..layer.params.len()).map(move |i| ParamRef::Theta { layer: l, index: i }))
            .collect();
        refs.extend((0..self.gates.len()).map(|g| ParamRef::Gate { group: g }));
        refs
    }

    pub fn param(&self, r: ParamRef) -> &Tensor {
        match r {
            ParamRef::Theta { layer, index } => &self.layers[layer].params[index],
            ParamRef::Gate { group } => &self.gates[group].spec.weights,
        }
    }

    pub fn param_mut(&mut self, r: ParamRef) -> &mut Tensor {
        match r {
            ParamRef::Theta { layer, index } => &mut self.layers[layer].params[index],
            ParamRef::Gate { group } => &mut self.gates[group].spec.weights,
        }
    }

    pub fn bound_var(&self, bound: &BoundParams, r: ParamRef) -> Var {
        match r {
            ParamRef::Theta { layer, index } => bound.layers[layer][index],
            ParamRef::Gate { group } => bound.gates[group],
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            layers: self
                .layers
                .iter()
                .map(|l| l.params.iter().map(|p| tape.leaf(p.clone())).collect())
                .collect(),
            gates: self.gates.iter().map(|g| tape.leaf(g.spec.weights.clone())).collect(),
        }
    }

    pub fn is_gated(&self) -> bool {
        !self.gates.is_empty()
    }

    /// The same network with every gate removed; θ is copied unchanged.
    pub fn without_gates(&self) -> GatedModel {
        GatedModel {
            input_shape: self.input_shape.clone(),
            input_gate: None,
            input_select: self.input_select.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer { gate: None, ..l.clone() })
                .collect(),
            gates: Vec::new(),
        }
    }

    /// Forward pass of a `[N, ...input_shape]` batch.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let mut expected = vec![tape.shape(x)[0]];
        expected.extend_from_slice(&self.input_shape);
        if tape.shape(x) != expected.as_slice() {
            return Err(dim(
                "forward",
                format!("batch shape {:?}, model expects {expected:?}", tape.shape(x)),
            ));
        }
        let mut h = x;
        if let Some(sel) = &self.input_select {
            let selected = tape.value(h).select_axis(1, sel)?;
            h = tape.leaf(selected);
        }
        if let Some(g) = self.input_gate {
            h = tgl_forward(tape, h, bound.gates[g], self.gates[g].spec.gate)?;
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let p = &bound.layers[l];
            let gate = layer.gate.map(|t| (t, bound.gates[t.group], self.gates[t.group].spec.gate));
            h = match &layer.kind {
                LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                    let mut kernel = p[0];
                    if let Some((t, w, g)) = gate {
                        if t.granularity == Granularity::Weight {
                            kernel = weight_gate_forward(tape, kernel, w, g)?;
                        }
                    }
                    let mut y = match layer.kind {
                        LayerKind::Dense { .. } => tape.matmul(h, kernel)?,
                        LayerKind::Conv2d { stride, padding, .. } => tape.conv2d(h, kernel, stride, padding)?,
                        _ => unreachable!(),
                    };
                    if layer.kind.has_bias() {
                        y = tape.add_channel_bias(y, p[1])?;
                    }
                    match gate {
                        Some((t, w, g)) if t.granularity == Granularity::Channel => tgl_forward(tape, y, w, g)?,
                        Some((t, w, g)) if t.granularity == Granularity::Block => block_gate_forward(tape, y, w, g)?,
                        _ => y,
                    }
                }
                LayerKind::Activation { func } => apply_activation(tape, h, *func)?,
                LayerKind::Flatten => tape.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// Evaluates the model on a batch without keeping the tape.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn gate_group_named(&self, name: &str) -> Option<usize> {
        self.gates.iter().position(|g| g.name == name)
    }

    /// Layer indices (and the input gate as `None`) attached to a group.
    pub fn group_members(&self, group: usize) -> Vec<Option<usize>> {
        let mut m = Vec::new();
        if self.input_gate == Some(group) {
            m.push(None);
        }
        m.extend(
            self.layers
                .iter()
                .enumerate()
                .filter(|(_, l)| l.gate.is_some_and(|t| t.group == group))
                .map(|(i, _)| Some(i)),
        );
        m
    }

    /// Makes the listed layers alias one gate vector. The group keeps the first
    /// member's weights; registry entries left unreferenced are dropped.
    pub fn share_gates(&mut self, layers: &[usize], group_name: &str) -> Result<usize> {
        let first = *layers
            .first()
            .ok_or_else(|| Error::Argument("share_gates needs at least one layer".into()))?;
        let mut granularity = None;
        let mut count = None;
        for &l in layers {
            let layer = self
                .layers
                .get(l)
                .ok_or_else(|| Error::Argument(format!("no layer {l}")))?;
            let tgl = layer
                .gate
                .ok_or_else(|| Error::Argument(format!("layer `{}` has no gate", layer.name)))?;
            let n = self.gates[tgl.group].spec.len();
            if *count.get_or_insert(n) != n {
                return Err(dim(
                    "share_gates",
                    format!("layer `{}` has {n} gates, group has {}", layer.name, count.unwrap()),
                ));
            }
            if *granularity.get_or_insert(tgl.granularity) != tgl.granularity {
                return Err(Error::Argument("shared gates must use one granularity".into()));
            }
        }
        let source = self.layers[first].gate.expect("checked").group;
        let spec = self.gates[source].spec.clone();
        self.gates.push(GateGroup {
            name: group_name.to_string(),
            spec,
        });
        let target = self.gates.len() - 1;
        for &l in layers {
            if let Some(t) = &mut self.layers[l].gate {
                t.group = target;
            }
        }
        self.compact_gate_registry();
        Ok(self
            .layers[first]
            .gate
            .expect("still gated")
            .group)
    }

    /// Drops registry entries no layer references and renumbers the rest.
    pub fn compact_gate_registry(&mut self) {
        let mut used = vec![false; self.gates.len()];
        if let Some(g) = self.input_gate {
            used[g] = true;
        }
        for l in &self.layers {
            if let Some(t) = l.gate {
                used[t.group] = true;
            }
        }
        let mut remap = vec![usize::MAX; self.gates.len()];
        let mut next = 0;
        for (i, u) in used.iter().enumerate() {
            if *u {
                remap[i] = next;
                next += 1;
            }
        }
        let mut idx = 0;
        self.gates.retain(|_| {
            idx += 1;
            used[idx - 1]
        });
        if let Some(g) = &mut self.input_gate {
            *g = remap[*g];
        }
        for l in &mut self.layers {
            if let Some(t) = &mut l.gate {
                t.group = remap[t.group];
            }
        }
    }

    /// Channel count of every layer output (per-sample axis 0).
    pub fn channel_counts(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.into_iter().map(|(_, o)| o[0]).collect())
    }
}

/// Result of [`hard_prune`].
#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub input_channels: (usize, usize),
    /// `(layer name, kept, original)` output channels of every dense/conv layer.
    pub layers: Vec<(String, usize, usize)>,
}

fn kept_indices(mask: &[u8]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m == 1)
        .map(|(i, _)| i)
        .collect()
}

/// Multiplies slice `i` along `axis` by `scale[i]`.
fn scale_axis(t: &mut Tensor, axis: usize, scale: &[f64]) {
    let shape = t.shape().to_vec();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    for (chunk_idx, chunk) in t.data_mut().chunks_mut(inner).enumerate() {
        let f = scale[chunk_idx % n];
        chunk.iter_mut().for_each(|v| *v *= f);
    }
}

/// Structurally removes every channel whose gate is closed and drops the
/// gates. Downstream input dimensions are sliced to match. Open channels
/// keep their gate value `TG(w) = 1 + s(w)·g(w)` folded into the layer's
/// weight and bias, so the pruned network differs from the gated one only
/// by the closed gates' `s·g` leakage.
pub fn hard_prune(model: &GatedModel) -> Result<(GatedModel, PruneReport)> {
    model.validate()?;
    for l in &model.layers {
        if let Some(t) = l.gate {
            if t.granularity != Granularity::Channel {
                return Err(Error::Argument(format!(
                    "hard_prune supports channel gates only; layer `{}` uses {} gates",
                    l.name, t.granularity
                )));
            }
        }
    }
    let shapes = model.shapes()?;
    let mut pruned = GatedModel {
        input_shape: model.input_shape.clone(),
        input_gate: None,
        input_select: model.input_select.clone(),
        layers: Vec::with_capacity(model.layers.len()),
        gates: Vec::new(),
    };
    let in_total = shapes.first().map_or(model.input_shape[0], |(i, _)| i[0]);
    // Surviving indices along axis 0 of the current per-sample tensor.
    let mut keep: Option<Vec<usize>> = None;
    let mut input_scale: Option<Vec<f64>> = None;
    if let Some(g) = model.input_gate {
        let k = kept_indices(&model.gates[g].spec.mask());
        if k.is_empty() {
            return Err(Error::Degenerate("input gate closes every feature".into()));
        }
        let base: Vec<usize> = match &model.input_select {
            Some(sel) => k.iter().map(|&i| sel[i]).collect(),
            None => k.clone(),
        };
        pruned.input_select = Some(base);
        let values = model.gates[g].spec.values();
        input_scale = Some(k.iter().map(|&i| values[i]).collect::<Vec<f64>>());
        keep = Some(k);
    }
    let mut report = PruneReport {
        input_channels: (pruned.input_select.as_ref().map_or(in_total, Vec::len), in_total),
        layers: Vec::new(),
    };
    let mut input_keep = keep.take();

    // The input-gate scale folds into the first layer only when it is linear in its input.
    if !matches!(model.layers.first().map(|l| l.kind), Some(LayerKind::Dense { .. } | LayerKind::Conv2d { .. })) {
        input_scale = None;
    }
    for (idx, (layer, (in_shape, _))) in model.layers.iter().zip(&shapes).enumerate() {
        let in_keep = input_keep.take();
        let mut kind = layer.kind;
        let mut params = layer.params.clone();
        let mut out_scale = None;
        let out_keep = match layer.gate {
            Some(t) => {
                let spec = &model.gates[t.group].spec;
                let k = kept_indices(&spec.mask());
                if k.is_empty() {
                    return Err(Error::Degenerate(format!(
                        "layer `{}` has zero active channels",
                        layer.name
                    )));
                }
                let values = spec.values();
                out_scale = Some(k.iter().map(|&i| values[i]).collect::<Vec<f64>>());
                Some(k)
            }
            None => None,
        };
        let in_scale = if idx == 0 { input_scale.take() } else { None };
        match &mut kind {
            LayerKind::Dense { n_in, n_out, .. } => {
                if let Some(k) = &in_keep {
                    params[0] = params[0].select_axis(0, k)?;
                    *n_in = k.len();
                }
                let orig = *n_out;
                if let Some(k) = &out_keep {
                    params[0] = params[0].select_axis(1, k)?;
                    if params.len() > 1 {
                        params[1] = params[1].select_axis(0, k)?;
                    }
                    *n_out = k.len();
                }
                if let Some(sc) = &in_scale {
                    scale_axis(&mut params[0], 0, sc);
                }
                if let Some(sc) = &out_scale {
                    scale_axis(&mut params[0], 1, sc);
                    if params.len() > 1 {
                        scale_axis(&mut params[1], 0, sc);
                    }
                }
                report.layers.push((layer.name.clone(), *n_out, orig));
                input_keep = out_keep;
            }
            LayerKind::Conv2d { in_ch, out_ch, .. } => {
                if let Some(k) = &in_keep {
                    params[0] = params[0].select_axis(1, k)?;
                    *in_ch = k.len();
                }
                let orig = *out_ch;
                if let Some(k) = &out_keep {
                    params[0] = params[0].select_axis(0, k)?;
                    if params.len() > 1 {
                        params[1] = params[1].select_axis(0, k)?;
                    }
                    *out_ch = k.len();
                }
                if let Some(sc) = &in_scale {
                    scale_axis(&mut params[0], 1, sc);
                }
                if let Some(sc) = &out_scale {
                    scale_axis(&mut params[0], 0, sc);
                    if params.len() > 1 {
                        scale_axis(&mut params[1], 0, sc);
                    }
                }
                report.layers.push((layer.name.clone(), *out_ch, orig));
                input_keep = out_keep;
            }
            LayerKind::Activation { .. } => input_keep = in_keep,
            LayerKind::Flatten => {
                input_keep = in_keep.map(|k| {
                    let inner: usize = in_shape[1..].iter().product();
                    k.iter()
                        .flat_map(|&c| (c * inner)..((c + 1) * inner))
                        .collect()
                });
            }
        }
        pruned.layers.push(Layer {
            name: layer.name.clone(),
            kind,
            params,
            gate: None,
        });
    }
    pruned.validate()?;
    Ok((pruned, report))
}

/// Declarative layer description; input extents are inferred by chaining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
        #[serde(default)]
        bias: bool,
        #[serde(default)]
        gate: Option<Granularity>,
        #[serde(default)]
        share: Option<String>,
        #[serde(default)]
        name: Option<String>,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "same")]
        padding: Padding,
        #[serde(default)]
        bias: bool,
        #[serde(default)]
        gate: Option<Granularity>,
        #[serde(default)]
        share: Option<String>,
        #[serde(default)]
        name: Option<String>,
    },
    Activation {
        func: Activation,
    },
    Flatten,
}

fn one() -> usize {
    1
}

fn same() -> Padding {
    Padding::Same
}

/// Architecture description: input shape, layers and gate placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub input_gate: bool,
    pub layers: Vec<LayerSpec>,
}

/// Initialization settings used by [`ArchSpec::build`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub gate: TrainableGate,
    /// Gate weights are drawn uniformly from this range.
    pub gate_range: (f64, f64),
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            gate: TrainableGate::default(),
            gate_range: (0.01, 0.1),
        }
    }
}

impl ArchSpec {
    /// Builds a model with Glorot-uniform weights, zero biases and gate
    /// weights drawn from `init.gate_range`.
    pub fn build<R: Rng>(&self, init: &InitConfig, rng: &mut R) -> Result<GatedModel> {
        if self.layers.is_empty() {
            return Err(Error::Config("architecture has no layers".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut model = GatedModel {
            input_shape: self.input_shape.clone(),
            input_gate: None,
            input_select: None,
            layers: Vec::new(),
            gates: Vec::new(),
        };
        let (lo, hi) = init.gate_range;
        if !(lo <= hi) {
            return Err(Error::Config(format!("bad gate init range [{lo}, {hi}]")));
        }
        let new_group = |model: &mut GatedModel, name: String, n: usize, rng: &mut R| -> usize {
            let weights = init_gate_weights(rng, n, lo, hi);
            model.gates.push(GateGroup {
                name,
                spec: GateSpec::new(init.gate, weights),
            });
            model.gates.len() - 1
        };
        if self.input_gate {
            let g = new_group(&mut model, "input".into(), self.input_shape[0], rng);
            model.input_gate = Some(g);
        }
        let mut cur = self.input_shape.clone();
        let mut shares: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, spec) in self.layers.iter().enumerate() {
            let (kind, gate, share, name) = match spec {
                LayerSpec::Dense { units, bias, gate, share, name } => {
                    let n_in = match cur.as_slice() {
                        [n] => *n,
                        other => {
                            return Err(Error::Config(format!(
                                "layer {i}: dense needs a flat input, got {other:?} (add a flatten layer)"
                            )))
                        }
                    };
                    (
                        LayerKind::Dense { n_in, n_out: *units, bias: *bias },
                        *gate,
                        share.clone(),
                        name.clone(),
                    )
                }
                LayerSpec::Conv2d { filters, kernel, stride, padding, bias, gate, share, name } => {
                    let in_ch = cur.first().copied().unwrap_or(0);
                    (
                        LayerKind::Conv2d {
                            in_ch,
                            out_ch: *filters,
                            k: *kernel,
                            stride: *stride,
                            padding: *padding,
                            bias: *bias,
                        },
                        *gate,
                        share.clone(),
                        name.clone(),
                    )
                }
                LayerSpec::Activation { func } => (LayerKind::Activation { func: *func }, None, None, None),
                LayerSpec::Flatten => (LayerKind::Flatten, None, None, None),
            };
            if let LayerKind::Dense { n_out: 0, .. } | LayerKind::Conv2d { out_ch: 0, .. } = kind {
                return Err(Error::Config(format!("layer {i} has zero outputs")));
            }
            let out = kind
                .output_shape(&cur)
                .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
            let name = name.unwrap_or_else(|| format!("{}{i}", kind.name()));
            let mut params = Vec::new();
            if let Some(ws) = kind.weight_shape() {
                let (fan_in, fan_out) = match &kind {
                    LayerKind::Dense { n_in, n_out, .. } => (*n_in, *n_out),
                    LayerKind::Conv2d { in_ch, out_ch, k, .. } => (in_ch * k * k, out_ch * k * k),
                    _ => unreachable!(),
                };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n: usize = ws.iter().product();
                let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
                params.push(Tensor::new(ws, data)?);
                if kind.has_bias() {
                    params.push(Tensor::zeros(&[out[0]]));
                }
            }
            let tgl = match gate {
                Some(granularity) => {
                    if !kind.is_counted() {
                        return Err(Error::Config(format!("layer {i}: only dense/conv2d layers can be gated")));
                    }
                    let n = match granularity {
                        Granularity::Channel => out[0],
                        Granularity::Weight => params[0].len(),
                        Granularity::Block => 1,
                    };
                    let group = new_group(&mut model, name.clone(), n, rng);
                    Some(TrainableGateLayer { group, granularity })
                }
                None => {
                    if share.is_some() {
                        return Err(Error::Config(format!("layer {i}: `share` requires a gate")));
                    }
                    None
                }
            };
            if let Some(s) = share {
                match shares.iter_mut().find(|(n, _)| *n == s) {
                    Some((_, members)) => members.push(model.layers.len()),
                    None => shares.push((s, vec![model.layers.len()])),
                }
            }
            model.layers.push(Layer { name, kind, params, gate: tgl });
            cur = out;
        }
        for (name, members) in shares {
            model.share_gates(&members, &name)?;
        }
        model.validate()?;
        Ok(model)
    }
}

/// Binary mask per gate group, in registry order.
pub fn gate_masks(model: &GatedModel) -> Vec<Vec<u8>> {
    model.gates.iter().map(|g| g.spec.mask()).collect()
}

/// Number of open gates per group.
pub fn active_counts(model: &GatedModel) -> Vec<(String, usize, usize)> {
    model
        .gates
        .iter()
        .map(|g| {
            let active = g.spec.weights.data().iter().filter(|&&w| step_gate(w) == 1).count();
            (g.name.clone(), active, g.spec.len())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn small_conv_arch() -> ArchSpec {
        ArchSpec {
            input_shape: vec![2, 5, 5],
            input_gate: false,
            layers: vec![
                LayerSpec::Conv2d {
                    filters: 3,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Same,
                    bias: true,
                    gate: Some(Granularity::Channel),
                    share: None,
                    name: None,
                },
                LayerSpec::Activation { func: Activation::Relu },
                LayerSpec::Conv2d {
                    filters: 4,
                    kernel: 3,
                    stride: 2,
                    padding: Padding::Valid,
                    bias: true,
                    gate: Some(Granularity::Channel),
                    share: None,
                    name: None,
                },
                LayerSpec::Activation { func: Activation::Relu },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: 2,
                    bias: true,
                    gate: None,
                    share: None,
                    name: None,
                },
            ],
        }
    }

    #[test]
    fn build_chains_shapes() {
        let m = small_conv_arch().build(&InitConfig::default(), &mut rng()).unwrap();
        let shapes = m.shapes().unwrap();
        assert_eq!(shapes[2].1, vec![4, 2, 2]);
        assert_eq!(shapes[5].0, vec![16]);
        assert_eq!(m.gates.len(), 2);
        for g in &m.gates {
            assert!(g.spec.weights.data().iter().all(|&w| (0.01..=0.1).contains(&w)));
        }
    }

    #[test]
    fn build_rejects_bad_chain() {
        let mut arch = small_conv_arch();
        arch.layers.remove(4); // drop flatten
        assert!(matches!(
            arch.build(&InitConfig::default(), &mut rng()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tgl_examples() {
        let gate = TrainableGate::default();
        let mut tape = Tape::new();
        let y = tape.leaf(Tensor::new(vec![1, 2, 2, 1], vec![3.0, -1.0, 2.0, 5.0]).unwrap());
        let open = tape.leaf(Tensor::from_vec(vec![0.5, 0.5]));
        let out = tgl_forward(&mut tape, y, open, gate).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(tape.value(y).data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs());
        }

        let ones = tape.leaf(Tensor::ones(&[1, 2, 3]));
        let w = tape.leaf(Tensor::from_vec(vec![-1.0, 1.0]));
        let out = tgl_forward(&mut tape, ones, w, gate).unwrap();
        let v = tape.value(out).data();
        assert!(v[..3].iter().all(|x| x.abs() <= 1e-5));
        assert!(v[3..].iter().all(|x| (x - 1.0).abs() <= 1e-5));

        let bad = tape.leaf(Tensor::from_vec(vec![1.0, 1.0, 1.0]));
        assert!(matches!(tgl_forward(&mut tape, ones, bad, gate), Err(Error::Dimension { .. })));
    }

    #[test]
    fn tgl_gate_gradient_is_channel_sum() {
        let gate = TrainableGate::default();
        let mut tape = Tape::new();
        let data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let y = tape.leaf(Tensor::new(vec![2, 2, 2], data).unwrap());
        let w = tape.leaf(Tensor::from_vec(vec![-0.3, 0.2]));
        let out = tgl_forward(&mut tape, y, w, gate).unwrap();
        let loss = tape.sum(out).unwrap();
        let g = tape.backward(loss).unwrap().get(w);
        // channel 0: 1+2+5+6, channel 1: 3+4+7+8
        assert_eq!(g.data(), &[14.0, 22.0]);
    }

    #[test]
    fn weight_gate_examples() {
        let gate = TrainableGate::default();
        let mut tape = Tape::new();
        let k = tape.leaf(Tensor::new(vec![2, 1, 1, 2], vec![1.5, -2.0, 0.5, 3.0]).unwrap());
        let open = tape.leaf(Tensor::full(&[4], 0.25));
        let gk = weight_gate_forward(&mut tape, k, open, gate).unwrap();
        for (a, b) in tape.value(gk).data().iter().zip(tape.value(k).data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs());
        }
        let half = tape.leaf(Tensor::from_vec(vec![-0.5, 0.5, -0.5, 0.5]));
        let gk = weight_gate_forward(&mut tape, k, half, gate).unwrap();
        let (gv, kv) = (tape.value(gk).data().to_vec(), tape.value(k).data().to_vec());
        assert!(gv[0].abs() <= 1e-5 * kv[0].abs() && gv[2].abs() <= 1e-5 * kv[2].abs());
        let wrong = tape.leaf(Tensor::full(&[3], 0.25));
        assert!(weight_gate_forward(&mut tape, k, wrong, gate).is_err());
    }

    #[test]
    fn masks() {
        let spec = GateSpec::new(TrainableGate::default(), Tensor::from_vec(vec![0.1, -0.1, 0.3]));
        assert_eq!(active_mask(&spec), vec![1, 0, 1]);
        let zero = GateSpec::new(TrainableGate::default(), Tensor::zeros(&[4]));
        assert_eq!(active_mask(&zero), vec![0, 0, 0, 0]);
    }

    #[test]
    fn share_gates_aliases_and_compacts() {
        let arch = ArchSpec {
            input_shape: vec![3],
            input_gate: false,
            layers: vec![
                LayerSpec::Dense { units: 4, bias: false, gate: Some(Granularity::Channel), share: None, name: None },
                LayerSpec::Dense { units: 4, bias: false, gate: Some(Granularity::Channel), share: None, name: None },
                LayerSpec::Dense { units: 5, bias: false, gate: Some(Granularity::Channel), share: None, name: None },
            ],
        };
        let mut m = arch.build(&InitConfig::default(), &mut rng()).unwrap();
        let first = m.gates[0].spec.clone();
        let g = m.share_gates(&[0, 1], "tied").unwrap();
        assert_eq!(m.gates.len(), 2);
        assert_eq!(m.gates[g].spec, first);
        assert_eq!(m.group_members(g), vec![Some(0), Some(1)]);
        assert!(matches!(m.share_gates(&[1, 2], "bad"), Err(Error::Dimension { .. })));
        m.validate().unwrap();
    }

    #[test]
    fn hard_prune_slices_next_layer() {
        let mut m = small_conv_arch().build(&InitConfig::default(), &mut rng()).unwrap();
        m.gates[0].spec.weights = Tensor::from_vec(vec![0.05, -0.05, 0.05]);
        let (p, report) = hard_prune(&m).unwrap();
        assert_eq!(report.layers[0], ("conv2d0".to_string(), 2, 3));
        let LayerKind::Conv2d { in_ch, .. } = p.layers[2].kind else { panic!() };
        assert_eq!(in_ch, 2);
        // Middle input slice removed from the next kernel, whose output
        // channels carry their own gate values.
        let orig = &m.layers[2].params[0];
        let kept = &p.layers[2].params[0];
        let tg = m.gates[1].spec.values()[0];
        let scaled = |r: std::ops::Range<usize>| orig.data()[r].iter().map(|v| v * tg).collect::<Vec<_>>();
        assert_eq!(kept.data()[..9], scaled(0..9)[..]);
        assert_eq!(kept.data()[9..18], scaled(18..27)[..]);
        assert!(p.gates.is_empty());
    }

    #[test]
    fn hard_prune_zero_active_is_degenerate() {
        let mut m = small_conv_arch().build(&InitConfig::default(), &mut rng()).unwrap();
        m.gates[1].spec.weights = Tensor::full(&[4], -0.1);
        assert!(matches!(hard_prune(&m), Err(Error::Degenerate(_))));
    }
}
