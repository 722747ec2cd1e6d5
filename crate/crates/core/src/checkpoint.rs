//! Model checkpoints.
//!
//! A checkpoint is one UTF-8 JSON document:
//!
//! ```text
//! {
//!   "format": "tgate-checkpoint",
//!   "version": 1,
//!   "input_shape": [1, 28, 28],
//!   "input_gate": null | "<gate name>",
//!   "input_select": null | [kept input channel indices],
//!   "layers": [{"name": "conv0", "kind": {"type": "conv2d", ...}, "gate": null | {"group": "<gate name>", "granularity": "channel"}}],
//!   "params": [{"name": "conv0.weight", "shape": [8, 1, 3, 3], "data": [...]}, {"name": "conv0.bias", ...}],
//!   "gates": [{"name": "conv0", "m": 100000, "shape_kind": "constant_one", "members": ["conv0"], "shape": [8], "data": [...]}]
//! }
//! ```
//!
//! Parameters are listed in layer order, weight before bias. Floats are
//! written in shortest round-trip form, so save/load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{GateSpec, ShapeKind, TrainableGate};
use crate::layers::{GateGroup, GatedModel, Granularity, Layer, LayerKind, TrainableGateLayer};
use crate::tensor::Tensor;

pub const FORMAT: &str = "tgate-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct File {
    format: String,
    version: u32,
    input_shape: Vec<usize>,
    input_gate: Option<String>,
    input_select: Option<Vec<usize>>,
    layers: Vec<LayerEntry>,
    params: Vec<ParamEntry>,
    gates: Vec<GateEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    kind: LayerKind,
    gate: Option<GateRef>,
}

#[derive(Serialize, Deserialize)]
struct GateRef {
    group: String,
    granularity: Granularity,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GateEntry {
    name: String,
    m: u32,
    shape_kind: ShapeKind,
    members: Vec<String>,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn param_names(layer: &Layer) -> Vec<String> {
    let mut names = Vec::new();
    if layer.kind.weight_shape().is_some() {
        names.push(format!("{}.weight", layer.name));
        if layer.kind.has_bias() {
            names.push(format!("{}.bias", layer.name));
        }
    }
    names
}

pub fn to_string(model: &GatedModel) -> Result<String> {
    model.validate()?;
    let gate_name = |g: usize| model.gates[g].name.clone();
    let file = File {
        format: FORMAT.into(),
        version: VERSION,
        input_shape: model.input_shape.clone(),
        input_gate: model.input_gate.map(gate_name),
        input_select: model.input_select.clone(),
        layers: model
            .layers
            .iter()
            .map(|l| LayerEntry {
                name: l.name.clone(),
                kind: l.kind,
                gate: l.gate.map(|t| GateRef { group: gate_name(t.group), granularity: t.granularity }),
            })
            .collect(),
        params: model
            .layers
            .iter()
            .flat_map(|l| {
                param_names(l).into_iter().zip(&l.params).map(|(name, p)| ParamEntry {
                    name,
                    shape: p.shape().to_vec(),
                    data: p.data().to_vec(),
                })
            })
            .collect(),
        gates: model
            .gates
            .iter()
            .enumerate()
            .map(|(g, group)| GateEntry {
                name: group.name.clone(),
                m: group.spec.gate.m,
                shape_kind: group.spec.gate.shape,
                members: model
                    .group_members(g)
                    .into_iter()
                    .map(|m| m.map_or_else(|| "input".to_string(), |l| model.layers[l].name.clone()))
                    .collect(),
                shape: group.spec.weights.shape().to_vec(),
                data: group.spec.weights.data().to_vec(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn from_str(text: &str) -> Result<GatedModel> {
    let file: File = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if file.format != FORMAT {
        return Err(Error::Checkpoint(format!("not a checkpoint: format `{}`", file.format)));
    }
    if file.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", file.version)));
    }
    let mut gates = Vec::with_capacity(file.gates.len());
    for g in file.gates {
        let gate = TrainableGate::new(g.m, g.shape_kind).map_err(|e| Error::Checkpoint(e.to_string()))?;
        gates.push(GateGroup {
            name: g.name,
            spec: GateSpec::new(gate, Tensor::new(g.shape, g.data)?),
        });
    }
    let find_gate = |name: &str| {
        gates
            .iter()
            .position(|g| g.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown gate group `{name}`")))
    };
    let input_gate = file.input_gate.as_deref().map(find_gate).transpose()?;
    let mut params = file.params.into_iter();
    let mut layers = Vec::with_capacity(file.layers.len());
    for entry in file.layers {
        let mut layer = Layer {
            name: entry.name,
            kind: entry.kind,
            params: Vec::new(),
            gate: match entry.gate {
                Some(r) => Some(TrainableGateLayer { group: find_gate(&r.group)?, granularity: r.granularity }),
                None => None,
            },
        };
        for expected in param_names(&layer) {
            let p = params
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{expected}`")))?;
            if p.name != expected {
                return Err(Error::Checkpoint(format!("expected parameter `{expected}`, found `{}`", p.name)));
            }
            layer.params.push(Tensor::new(p.shape, p.data)?);
        }
        layers.push(layer);
    }
    if let Some(extra) = params.next() {
        return Err(Error::Checkpoint(format!("unexpected parameter `{}`", extra.name)));
    }
    let model = GatedModel {
        input_shape: file.input_shape,
        input_gate,
        input_select: file.input_select,
        layers,
        gates,
    };
    model.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(model)
}

pub fn save(model: &GatedModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_string(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<GatedModel> {
    from_str(&fs::read_to_string(path)?)
}
