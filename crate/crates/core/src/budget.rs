//! Cost accounting: exact static cost `C_tot`, differentiable gated cost
//! `C(w)`, and the compression-ratio regularizer `λ·(ρ − C(w)/C_tot)²`.
//!
//! Only dense and convolution layers carry cost. FLOPs are counted as
//! multiply-accumulates (one per weight use, no factor 2). Bias terms count
//! toward parameters but not FLOPs. The channels cost counts output channels
//! of gated layers (and input features behind an input gate).
//!
//! A layer's cost is a sum of terms `coef · Π_g S_g / denom`, where `S_g` is
//! the sum of gate values of group `g`. Substituting `S_g = len(g)` gives the
//! static cost, hard masks give the cost of the pruned model, and `TG`
//! values on a tape give the differentiable `C(w)`. A layer's input channel
//! count is the predecessor's gate sum, so closing a channel removes its cost
//! from both the producing and the consuming layer.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gates::gate_tensor;
use crate::layers::{BoundParams, GatedModel, Granularity, LayerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Flops,
    Params,
    Channels,
}

impl CostKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CostKind::Flops => "flops",
            CostKind::Params => "params",
            CostKind::Channels => "channels",
        }
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flops" => Ok(CostKind::Flops),
            "params" => Ok(CostKind::Params),
            "channels" => Ok(CostKind::Channels),
            other => Err(Error::Argument(format!("unknown cost kind `{other}`"))),
        }
    }
}

/// Target ratio `ρ ∈ (0, 1]` and weight `λ ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    pub rho: f64,
    pub lambda: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self { rho: 1.0, lambda: 0.1 }
    }
}

impl RegularizerConfig {
    pub fn new(rho: f64, lambda: f64) -> Result<Self> {
        let cfg = Self { rho, lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Static cost of one layer given its per-sample output shape.
pub fn layer_cost_static(kind: &LayerKind, out_shape: &[usize], cost: CostKind) -> u64 {
    let bias_out = |n: usize| if kind.has_bias() { n as u64 } else { 0 };
    match (*kind, cost) {
        (LayerKind::Dense { n_in, n_out, .. }, CostKind::Flops) => (n_in * n_out) as u64,
        (LayerKind::Dense { n_in, n_out, .. }, CostKind::Params) => (n_in * n_out) as u64 + bias_out(n_out),
        (LayerKind::Conv2d { in_ch, out_ch, k, .. }, CostKind::Flops) => {
            (k * k * in_ch * out_ch * out_shape[1] * out_shape[2]) as u64
        }
        (LayerKind::Conv2d { in_ch, out_ch, k, .. }, CostKind::Params) => {
            (k * k * in_ch * out_ch) as u64 + bias_out(out_ch)
        }
        (LayerKind::Dense { n_out, .. }, CostKind::Channels) => n_out as u64,
        (LayerKind::Conv2d { out_ch, .. }, CostKind::Channels) => out_ch as u64,
        (LayerKind::Activation { .. } | LayerKind::Flatten, _) => 0,
    }
}

/// Sum of static layer costs over counted layers; zero is an error.
pub fn total_cost_static(model: &GatedModel, cost: CostKind) -> Result<u64> {
    let shapes = model.shapes()?;
    let mut total = 0;
    if cost == CostKind::Channels {
        if model.input_gate.is_some() {
            total += model.input_shape[0] as u64;
        }
        for (layer, (_, out)) in model.layers.iter().zip(&shapes) {
            if layer.gate.is_some() {
                total += layer_cost_static(&layer.kind, out, cost);
            }
        }
    } else {
        for (layer, (_, out)) in model.layers.iter().zip(&shapes) {
            total += layer_cost_static(&layer.kind, out, cost);
        }
    }
    if total == 0 {
        return Err(Error::Config(format!(
            "model has zero total {cost} cost; nothing to regularize"
        )));
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
struct Term {
    /// `None` for the input gate.
    layer: Option<usize>,
    coef: u64,
    denom: u64,
    groups: Vec<usize>,
}

/// A channel count as `mult · S_group`, or a fixed count.
#[derive(Debug, Clone, Copy)]
struct Count {
    group: Option<usize>,
    mult: u64,
    fixed: u64,
}

impl Count {
    fn fixed(n: u64) -> Self {
        Self { group: None, mult: 1, fixed: n }
    }

    fn coef(&self) -> u64 {
        if self.group.is_some() {
            self.mult
        } else {
            self.fixed
        }
    }
}

/// The cost structure of a model for one cost kind.
#[derive(Debug, Clone)]
pub struct CostModel {
    kind: CostKind,
    terms: Vec<Term>,
    group_sizes: Vec<usize>,
    layer_names: Vec<String>,
    layer_static: Vec<u64>,
    total_static: u64,
}

impl CostModel {
    pub fn new(model: &GatedModel, kind: CostKind) -> Result<Self> {
        model.validate()?;
        let shapes = model.shapes()?;
        let total_static = total_cost_static(model, kind)?;
        let mut terms = Vec::new();
        let in0 = shapes.first().map_or(model.input_shape[0], |(i, _)| i[0]) as u64;
        let mut cur = match model.input_gate {
            Some(g) => {
                if kind == CostKind::Channels {
                    terms.push(Term { layer: None, coef: 1, denom: 1, groups: vec![g] });
                }
                Count { group: Some(g), mult: 1, fixed: in0 }
            }
            None => Count::fixed(in0),
        };
        let mut layer_static = Vec::with_capacity(model.layers.len());
        for (l, (layer, (in_shape, out_shape))) in model.layers.iter().zip(&shapes).enumerate() {
            layer_static.push(layer_cost_static(&layer.kind, out_shape, kind));
            // (kernel area, output positions, output channels)
            let (area, positions, out_ch) = match layer.kind {
                LayerKind::Dense { n_out, .. } => (1u64, 1u64, n_out as u64),
                LayerKind::Conv2d { k, out_ch, .. } => {
                    ((k * k) as u64, (out_shape[1] * out_shape[2]) as u64, out_ch as u64)
                }
                LayerKind::Activation { .. } => continue,
                LayerKind::Flatten => {
                    let inner: u64 = in_shape[1..].iter().product::<usize>() as u64;
                    cur.mult *= inner;
                    cur.fixed *= inner;
                    continue;
                }
            };
            let weight_gate = layer
                .gate
                .filter(|t| t.granularity == Granularity::Weight)
                .map(|t| t.group);
            let out = match layer.gate {
                Some(t) if t.granularity == Granularity::Channel => Count { group: Some(t.group), mult: 1, fixed: out_ch },
                Some(t) if t.granularity == Granularity::Block => Count { group: Some(t.group), mult: out_ch, fixed: out_ch },
                _ => Count::fixed(out_ch),
            };
            let product_groups: Vec<usize> = cur.group.into_iter().chain(out.group).collect();
            let weights = Term {
                layer: Some(l),
                coef: area * cur.coef() * out.coef(),
                denom: 1,
                groups: product_groups,
            };
            match kind {
                CostKind::Flops => {
                    let mut t = Term { coef: weights.coef * positions, ..weights };
                    if let Some(g) = weight_gate {
                        t.groups.push(g);
                        t.denom = model.gates[g].spec.len() as u64;
                    }
                    terms.push(t);
                }
                CostKind::Params => {
                    terms.push(match weight_gate {
                        Some(g) => Term { layer: Some(l), coef: 1, denom: 1, groups: vec![g] },
                        None => weights,
                    });
                    if layer.kind.has_bias() {
                        terms.push(Term {
                            layer: Some(l),
                            coef: out.coef(),
                            denom: 1,
                            groups: out.group.into_iter().collect(),
                        });
                    }
                }
                CostKind::Channels => {
                    if layer.gate.is_some() {
                        terms.push(Term {
                            layer: Some(l),
                            coef: out.coef(),
                            denom: 1,
                            groups: out.group.into_iter().collect(),
                        });
                    }
                }
            }
            cur = out;
        }
        let cm = Self {
            kind,
            terms,
            group_sizes: model.gates.iter().map(|g| g.spec.len()).collect(),
            layer_names: model.layers.iter().map(|l| l.name.clone()).collect(),
            layer_static,
            total_static,
        };
        debug_assert_eq!(cm.evaluate(&cm.full_sums()), total_static as f64);
        Ok(cm)
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    /// `C_tot`.
    pub fn total_static(&self) -> u64 {
        self.total_static
    }

    pub fn layer_static(&self, layer: usize) -> u64 {
        self.layer_static[layer]
    }

    fn full_sums(&self) -> Vec<f64> {
        self.group_sizes.iter().map(|&n| n as f64).collect()
    }

    fn term_value(t: &Term, sums: &[f64]) -> f64 {
        let prod = t.groups.iter().fold(t.coef as f64, |acc, &g| acc * sums[g]);
        prod / t.denom as f64
    }

    /// Cost with the given per-group gate sums.
    pub fn evaluate(&self, sums: &[f64]) -> f64 {
        self.terms.iter().map(|t| Self::term_value(t, sums)).sum()
    }

    /// Per-layer cost with the given per-group gate sums; index `None` is the input gate.
    pub fn evaluate_layers(&self, sums: &[f64]) -> Vec<(Option<usize>, f64)> {
        let mut out: Vec<(Option<usize>, f64)> = Vec::new();
        for t in &self.terms {
            let v = Self::term_value(t, sums);
            match out.iter_mut().find(|(l, _)| *l == t.layer) {
                Some((_, acc)) => *acc += v,
                None => out.push((t.layer, v)),
            }
        }
        out
    }

    /// Cost of the model with hard 0/1 masks in place of gate values.
    pub fn masked_cost(&self, model: &GatedModel) -> f64 {
        self.evaluate(&mask_sums(model))
    }

    /// Cost with `TG` values (no tape).
    pub fn soft_cost(&self, model: &GatedModel) -> f64 {
        self.evaluate(&soft_sums(model))
    }

    pub fn masked_ratio(&self, model: &GatedModel) -> f64 {
        self.masked_cost(model) / self.total_static as f64
    }

    /// Differentiable `C(w)` recorded on the tape.
    pub fn gated_cost(&self, model: &GatedModel, tape: &mut Tape, bound: &BoundParams) -> Result<Var> {
        let mut sums: Vec<Option<Var>> = vec![None; model.gates.len()];
        let mut constant = 0.0;
        let mut acc: Option<Var> = None;
        for t in &self.terms {
            if t.groups.is_empty() {
                constant += t.coef as f64 / t.denom as f64;
                continue;
            }
            let mut v: Option<Var> = None;
            for &g in &t.groups {
                let s = match sums[g] {
                    Some(s) => s,
                    None => {
                        let tg = gate_tensor(tape, bound.gates[g], model.gates[g].spec.gate)?;
                        let s = tape.sum(tg)?;
                        sums[g] = Some(s);
                        s
                    }
                };
                v = Some(match v {
                    Some(prev) => tape.mul(prev, s)?,
                    None => s,
                });
            }
            let mut v = tape.scale(v.expect("non-empty"), t.coef as f64)?;
            if t.denom != 1 {
                v = tape.div_const(v, t.denom as f64)?;
            }
            acc = Some(match acc {
                Some(a) => tape.add(a, v)?,
                None => v,
            });
        }
        match acc {
            Some(a) => tape.offset(a, constant),
            None => {
                let c = tape.leaf(crate::Tensor::scalar(constant));
                tape.scale(c, 1.0)
            }
        }
    }

    pub fn report(&self, model: &GatedModel) -> CostReport {
        let soft = self.evaluate_layers(&soft_sums(model));
        let hard = self.evaluate_layers(&mask_sums(model));
        let full = self.evaluate_layers(&self.full_sums());
        let channel_counts = model.channel_counts().unwrap_or_default();
        let mut rows = Vec::new();
        for (i, (layer, static_cost)) in full.iter().enumerate() {
            let (name, active, total) = match layer {
                None => {
                    let g = model.input_gate.expect("input term implies input gate");
                    let m = model.gates[g].spec.mask();
                    ("input".to_string(), m.iter().filter(|&&x| x == 1).count(), m.len())
                }
                Some(l) => {
                    let total = channel_counts[*l];
                    let active = match model.layers[*l].gate {
                        Some(t) if t.granularity == Granularity::Channel => {
                            model.gates[t.group].spec.mask().iter().filter(|&&x| x == 1).count()
                        }
                        Some(t) if t.granularity == Granularity::Block => {
                            total * model.gates[t.group].spec.mask()[0] as usize
                        }
                        _ => total,
                    };
                    (self.layer_names[*l].clone(), active, total)
                }
            };
            rows.push(CostRow {
                layer: name,
                static_cost: *static_cost as u64,
                gated_cost: soft[i].1,
                masked_cost: hard[i].1,
                active_channels: active,
                total_channels: total,
            });
        }
        CostReport {
            kind: self.kind,
            total_static: self.total_static,
            total_gated: self.soft_cost(model),
            total_masked: self.masked_cost(model),
            rows,
        }
    }
}

fn mask_sums(model: &GatedModel) -> Vec<f64> {
    model
        .gates
        .iter()
        .map(|g| g.spec.mask().iter().map(|&m| f64::from(m)).sum())
        .collect()
}

fn soft_sums(model: &GatedModel) -> Vec<f64> {
    model.gates.iter().map(|g| g.spec.values().iter().sum()).collect()
}

/// Differentiable gated cost; convenience wrapper over [`CostModel::gated_cost`].
pub fn gated_cost(model: &GatedModel, kind: CostKind, tape: &mut Tape, bound: &BoundParams) -> Result<Var> {
    CostModel::new(model, kind)?.gated_cost(model, tape, bound)
}

/// `λ·(ρ − cost/C_tot)²`.
pub fn reg_loss(tape: &mut Tape, cost: Var, total: f64, cfg: &RegularizerConfig) -> Result<Var> {
    if total <= 0.0 {
        return Err(Error::Config("total cost must be positive".into()));
    }
    let ratio = tape.div_const(cost, total)?;
    let neg = tape.scale(ratio, -1.0)?;
    let diff = tape.offset(neg, cfg.rho)?;
    let sq = tape.square(diff)?;
    tape.scale(sq, cfg.lambda)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub layer: String,
    pub static_cost: u64,
    pub gated_cost: f64,
    pub masked_cost: f64,
    pub active_channels: usize,
    pub total_channels: usize,
}

/// Per-layer static, gated and masked cost plus channel counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub kind: CostKind,
    pub total_static: u64,
    pub total_gated: f64,
    pub total_masked: f64,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn masked_ratio(&self) -> f64 {
        self.total_masked / self.total_static as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,static_cost,gated_cost,masked_cost,active_channels,total_channels\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.layer, r.static_cost, r.gated_cost, r.masked_cost, r.active_channels, r.total_channels
            );
        }
        let _ = writeln!(s, "total,{},{},{},,", self.total_static, self.total_gated, self.total_masked);
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cost kind: {}", self.kind);
        let _ = writeln!(
            s,
            "{:<16} {:>12} {:>16} {:>14} {:>10}",
            "layer", "static", "gated", "masked", "channels"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<16} {:>12} {:>16.3} {:>14} {:>10}",
                r.layer,
                r.static_cost,
                r.gated_cost,
                r.masked_cost,
                format!("{}/{}", r.active_channels, r.total_channels)
            );
        }
        let _ = writeln!(
            s,
            "{:<16} {:>12} {:>16.3} {:>14} {:>10}",
            "total", self.total_static, self.total_gated, self.total_masked, ""
        );
        let _ = writeln!(s, "masked ratio: {:.4}", self.masked_ratio());
        s
    }
}
