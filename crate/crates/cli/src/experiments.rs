//! Experiment runner and artifact emission.
//!
//! A run writes into its output directory:
//!
//! - `metrics.csv`: `iteration,task_loss,reg_loss,cost_ratio,active_<group>...`
//! - `gates.txt`: gate dump (format below)
//! - `cost_report.txt`, `cost_report.csv`: per-layer static/gated/masked cost
//! - `checkpoint.json`: final model
//! - `plot_data.csv`: `series,x,y` rows; series `gate_w.<group>` (x = gate
//!   index, y = w), `cost_ratio` and `task_loss` (x = iteration)
//! - `summary.json`: final metrics
//! - `gradcheck.csv` (gradcheck_suite only)
//!
//! Gate dump format, one gate per line after the group header:
//!
//! ```text
//! # tgate gate dump v1
//! group <name> m=<M> shape=<shape_kind> members=<layer>[,<layer>...] open=<k>/<n>
//! <name> <index> <w> <mask>
//! ```
//!
//! `w` is printed in shortest round-trip form and `mask` is `1[w > 0]`.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tgate::layers::ParamRef;
use tgate::trainer::Evaluation;
use tgate::{
    checkpoint, evaluate, fit, loss_total, step_gate, CostKind, CostModel, Dataset, GatedModel,
    History, MetricsWriter, Mode, Tape,
};

use crate::config::{ConfigError, DatasetSpec, ExperimentConfig, ExperimentKind};
use crate::datasets::{bytes_to_dataset, gen_glyphs, gen_planted_dataset, gen_sine_dataset};
use crate::idx::{read_image_set, IdxError};
use crate::oracle::{brute_force_select, OracleResult};

/// Environment variable overriding the output root directory.
pub const OUTPUT_ROOT_ENV: &str = "TGATE_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
const TEST_SEED_SALT: u64 = 0x7e57_7e57;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Divergence { iteration: usize, loss: f64 },
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(tgate::Error),
}

impl RunError {
    /// Process exit status: 2 for config/data problems, 3 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Data(_) => 2,
            RunError::Divergence { .. } => 3,
            _ => 1,
        }
    }
}

impl From<tgate::Error> for RunError {
    fn from(e: tgate::Error) -> Self {
        match e {
            tgate::Error::Divergence { iteration, loss } => RunError::Divergence { iteration, loss },
            tgate::Error::Config(m) => RunError::Config(ConfigError::Invalid(m)),
            other => RunError::Core(other),
        }
    }
}

impl From<IdxError> for RunError {
    fn from(e: IdxError) -> Self {
        RunError::Data(e.to_string())
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> RunError {
    let context = context.into();
    move |source| RunError::Io { context, source }
}

/// Output root: `$TGATE_OUTPUT_ROOT` if set, else `runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from)
}

/// Exclusive lock on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE: &'static str = ".tgate.lock";

    pub fn acquire(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(RunError::Locked(dir.to_path_buf())),
            Err(e) => Err(io_err(format!("creating {}", path.display()))(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Training and optional held-out data for a run.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Option<Dataset>,
    /// Ground-truth relevant features for planted data.
    pub planted: Option<Vec<usize>>,
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<LoadedData, RunError> {
    let data_err = |e: tgate::Error| RunError::Data(e.to_string());
    Ok(match spec {
        DatasetSpec::SyntheticSine { n, test_n, x_range, seed } => LoadedData {
            train: gen_sine_dataset(*n, *x_range, *seed).map_err(data_err)?,
            test: (*test_n > 0)
                .then(|| gen_sine_dataset(*test_n, *x_range, seed ^ TEST_SEED_SALT))
                .transpose()
                .map_err(data_err)?,
            planted: None,
        },
        DatasetSpec::SyntheticPlanted { n_features, k_relevant, n, noise, seed } => {
            let p = gen_planted_dataset(*n_features, *k_relevant, *n, *noise, *seed).map_err(data_err)?;
            LoadedData { train: p.data, test: None, planted: Some(p.relevant) }
        }
        DatasetSpec::SyntheticGlyphs { n, test_n, classes, noise, seed } => {
            let train = gen_glyphs(*n, *classes, *noise, *seed).map_err(data_err)?;
            let test = (*test_n > 0)
                .then(|| gen_glyphs(*test_n, *classes, *noise, seed ^ TEST_SEED_SALT))
                .transpose()
                .map_err(data_err)?;
            LoadedData {
                train: train.to_dataset(*classes).map_err(data_err)?,
                test: test.map(|t| t.to_dataset(*classes)).transpose().map_err(data_err)?,
                planted: None,
            }
        }
        DatasetSpec::IdxFiles { train_images, train_labels, test_images, test_labels, classes, limit } => {
            let load = |img: &Path, lab: &Path| -> Result<Dataset, RunError> {
                let (images, labels) = read_image_set(img, lab)?;
                if images.dims.len() != 3 {
                    return Err(RunError::Data(format!("{}: expected rank-3 images", img.display())));
                }
                let (rows, cols) = (images.dims[1], images.dims[2]);
                let count = limit.map_or(labels.data.len(), |l| l.min(labels.data.len()));
                bytes_to_dataset(
                    &images.data[..count * rows * cols],
                    &labels.data[..count],
                    rows,
                    cols,
                    *classes,
                )
                .map_err(data_err)
            };
            let train = load(train_images, train_labels)?;
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(load(i, l)?),
                _ => None,
            };
            LoadedData { train, test, planted: None }
        }
    })
}

/// One finite-difference comparison.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckRow {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub max_rel_err: f64,
    pub rows: Vec<GradcheckRow>,
}

/// Denominator floor for relative errors of exactly-zero gradients.
pub const GRADCHECK_FLOOR: f64 = 1e-12;

fn param_label(model: &GatedModel, r: ParamRef) -> String {
    match r {
        ParamRef::Theta { layer, index } => {
            format!("{}.{}", model.layers[layer].name, if index == 0 { "weight" } else { "bias" })
        }
        ParamRef::Gate { group } => format!("gate.{}", model.gates[group].name),
    }
}

fn total_loss(model: &GatedModel, data: &Dataset, cfg: &tgate::TrainConfig, cost: Option<&CostModel>) -> Result<f64, RunError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let terms = loss_total(model, &mut tape, &bound, data, cfg, cost)?;
    Ok(tape.value(terms.total).item())
}

/// Moves every gate weight to the middle of its sawtooth piece, so a
/// stencil reaching `±2h` with `h < 1/(4M)` never crosses a jump.
pub fn center_gate_weights(model: &mut GatedModel) {
    for g in &mut model.gates {
        let m = f64::from(g.spec.gate.m);
        for w in g.spec.weights.data_mut() {
            *w = ((*w * m).floor() + 0.5) / m;
        }
    }
}

/// Five-point central difference of the full regularized loss against
/// autodiff for every θ and gate weight.
pub fn gradcheck(model: &GatedModel, data: &Dataset, cfg: &tgate::TrainConfig, step: f64) -> Result<GradcheckReport, RunError> {
    let cost = if model.is_gated() { Some(CostModel::new(model, cfg.cost_kind)?) } else { None };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let terms = loss_total(model, &mut tape, &bound, data, cfg, cost.as_ref())?;
    let grads = tape.backward(terms.total)?;
    let mut probe = model.clone();
    let mut rows = Vec::new();
    for r in model.param_refs() {
        let analytic = grads.get(model.bound_var(&bound, r));
        for i in 0..model.param(r).len() {
            let orig = model.param(r).data()[i];
            let mut at = |offset: f64| -> Result<f64, RunError> {
                probe.param_mut(r).data_mut()[i] = orig + offset;
                let l = total_loss(&probe, data, cfg, cost.as_ref());
                probe.param_mut(r).data_mut()[i] = orig;
                l
            };
            let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let a = analytic.data()[i];
            let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            rows.push(GradcheckRow { param: param_label(model, r), index: i, analytic: a, numeric, rel_err });
        }
    }
    Ok(GradcheckReport {
        step,
        max_rel_err: rows.iter().map(|r| r.rel_err).fold(0.0, f64::max),
        rows,
    })
}

/// Planted-feature selection compared against the exhaustive oracle.
#[derive(Debug, Clone, Serialize)]
pub struct PlantedOutcome {
    pub planted: Vec<usize>,
    pub selected: Vec<usize>,
    pub oracle_features: Vec<usize>,
    pub oracle_mse: f64,
    pub model_mse: f64,
    pub subsets_evaluated: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub kind: ExperimentKind,
    pub iterations: usize,
    pub initial_cost_ratio: Option<f64>,
    pub final_cost_ratio: Option<f64>,
    pub rho: f64,
    pub train_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub baseline_test_accuracy: Option<f64>,
    pub baseline_test_loss: Option<f64>,
    /// `(group, open, total)`.
    pub active_counts: Vec<(String, usize, usize)>,
    /// Selection-only runs: whether every θ bit survived training.
    pub theta_unchanged: Option<bool>,
    pub planted: Option<PlantedOutcome>,
    pub gradcheck_max_rel_err: Option<f64>,
}

/// Everything a run produced.
pub struct Outcome {
    pub dir: PathBuf,
    pub model: GatedModel,
    pub history: History,
    pub summary: Summary,
    pub gradcheck: Option<GradcheckReport>,
    pub oracle: Option<OracleResult>,
}

fn theta_bits(model: &GatedModel) -> Vec<u64> {
    model
        .layers
        .iter()
        .flat_map(|l| l.params.iter().flat_map(|p| p.data().iter().map(|v| v.to_bits())))
        .collect()
}

fn eval_opt(model: &GatedModel, data: Option<&Dataset>, cfg: &ExperimentConfig) -> Result<Option<Evaluation>, RunError> {
    data.map(|d| evaluate(model, d, cfg.train.task_loss, cfg.options.eval_batch))
        .transpose()
        .map_err(RunError::from)
}

/// Trains an ungated copy of `model` with the run's optimizer, optionally
/// keeping its learning-rate schedule.
fn train_ungated(
    model: &GatedModel,
    data: &Dataset,
    cfg: &ExperimentConfig,
    epochs: usize,
    keep_schedule: bool,
) -> Result<GatedModel, RunError> {
    let mut plain = model.without_gates();
    let mut tc = cfg.train.clone();
    tc.mode = Mode::Joint;
    tc.epochs = epochs;
    tc.regularizer.lambda = 0.0;
    if !keep_schedule {
        tc.lr_halve_at.clear();
    }
    fit::<std::io::Sink>(&mut plain, data, &tc, None)?;
    Ok(plain)
}

/// Renders the gate dump text format.
pub fn gate_dump(model: &GatedModel) -> String {
    let mut s = String::from("# tgate gate dump v1\n");
    for (g, group) in model.gates.iter().enumerate() {
        let members: Vec<String> = model
            .group_members(g)
            .into_iter()
            .map(|m| m.map_or_else(|| "input".to_string(), |l| model.layers[l].name.clone()))
            .collect();
        let mask = group.spec.mask();
        let open = mask.iter().filter(|&&b| b == 1).count();
        let _ = writeln!(
            s,
            "group {} m={} shape={} members={} open={}/{}",
            group.name,
            group.spec.gate.m,
            group.spec.gate.shape,
            members.join(","),
            open,
            mask.len()
        );
        for (i, &w) in group.spec.weights.data().iter().enumerate() {
            let _ = writeln!(s, "{} {} {} {}", group.name, i, w, step_gate(w));
        }
    }
    s
}

/// Parses a gate dump back into `(group, index, w, mask)` records.
pub fn parse_gate_dump(text: &str) -> Result<Vec<(String, usize, f64, u8)>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("group ") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || format!("line {}: malformed gate record `{line}`", n + 1);
        if f.len() != 4 {
            return Err(bad());
        }
        out.push((
            f[0].to_string(),
            f[1].parse().map_err(|_| bad())?,
            f[2].parse().map_err(|_| bad())?,
            f[3].parse().map_err(|_| bad())?,
        ));
    }
    Ok(out)
}

fn plot_data(model: &GatedModel, history: &History) -> String {
    let mut s = String::from("series,x,y\n");
    for g in &model.gates {
        for (i, w) in g.spec.weights.data().iter().enumerate() {
            let _ = writeln!(s, "gate_w.{},{},{}", g.name, i, w);
        }
    }
    for m in &history.log {
        let _ = writeln!(s, "cost_ratio,{},{}", m.iteration, m.cost_ratio);
    }
    for m in &history.log {
        let _ = writeln!(s, "task_loss,{},{}", m.iteration, m.task_loss);
    }
    s
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), RunError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(io_err(format!("writing {}", path.display())))
}

/// Runs a validated config, writing artifacts under `root/<output_dir>`.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<Outcome, RunError> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    if data.train.sample_shape() != cfg.arch.input_shape.as_slice() {
        return Err(RunError::Config(ConfigError::Invalid(format!(
            "dataset samples have shape {:?}, arch expects {:?}",
            data.train.sample_shape(),
            cfg.arch.input_shape
        ))));
    }
    if data.train.len() < cfg.train.batch_size {
        return Err(RunError::Config(ConfigError::Invalid(format!(
            "{} training samples is fewer than batch_size {}",
            data.train.len(),
            cfg.train.batch_size
        ))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = cfg.arch.build(&cfg.init, &mut rng)?;
    if cfg.train.f32 {
        // Parameters start on the f32 grid so the whole run stays there.
        for r in model.param_refs() {
            model.param_mut(r).round_to_f32();
        }
    }

    let dir = root.join(cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(cfg.kind.to_string())));
    fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let _lock = DirLock::acquire(&dir)?;
    write_file(&dir, "config.toml", &cfg.to_toml())?;

    let cost = if model.is_gated() { Some(CostModel::new(&model, cfg.train.cost_kind)?) } else { None };
    let initial_cost_ratio = cost.as_ref().map(|c| c.masked_ratio(&model));

    let mut gradcheck_report = None;
    let mut history = History::default();
    let mut theta_unchanged = None;
    let mut baseline = None;
    if cfg.kind == ExperimentKind::GradcheckSuite {
        center_gate_weights(&mut model);
        let report = gradcheck(&model, &data.train, &cfg.train, cfg.options.gradcheck_step)?;
        let mut csv = String::from("param,index,analytic,numeric,rel_err\n");
        for r in &report.rows {
            let _ = writeln!(csv, "{},{},{},{},{}", r.param, r.index, r.analytic, r.numeric, r.rel_err);
        }
        write_file(&dir, "gradcheck.csv", &csv)?;
        gradcheck_report = Some(report);
    } else {
        let initial = model.clone();
        if cfg.options.pretrain_epochs > 0 {
            let plain = train_ungated(&model, &data.train, cfg, cfg.options.pretrain_epochs, false)?;
            for (dst, src) in model.layers.iter_mut().zip(plain.layers) {
                dst.params = src.params;
            }
        }
        let before = (cfg.train.mode == Mode::SelectionOnly).then(|| theta_bits(&model));
        let path = dir.join("metrics.csv");
        let file = File::create(&path).map_err(io_err(format!("creating {}", path.display())))?;
        let mut sink = MetricsWriter::new(BufWriter::new(file), &model)?;
        history = fit(&mut model, &data.train, &cfg.train, Some(&mut sink))?;
        theta_unchanged = before.map(|b| b == theta_bits(&model));
        if cfg.options.baseline {
            let epochs = cfg.options.pretrain_epochs + cfg.train.epochs;
            let plain = train_ungated(&initial, &data.train, cfg, epochs, true)?;
            baseline = eval_opt(&plain, data.test.as_ref().or(Some(&data.train)), cfg)?;
        }
    }

    let planted_outcome = match (&data.planted, &cfg.dataset) {
        (Some(planted), DatasetSpec::SyntheticPlanted { k_relevant, .. }) if cfg.kind == ExperimentKind::PlantedFeatures => {
            let oracle = brute_force_select(&data.train, *k_relevant)?;
            let g = model.input_gate.expect("validated: planted runs gate the input");
            let selected = model.gates[g]
                .spec
                .mask()
                .iter()
                .enumerate()
                .filter(|(_, &m)| m == 1)
                .map(|(i, _)| i)
                .collect();
            let model_mse = evaluate(&model, &data.train, cfg.train.task_loss, cfg.options.eval_batch)?.task_loss;
            Some((
                PlantedOutcome {
                    planted: planted.clone(),
                    selected,
                    oracle_features: oracle.best.features.clone(),
                    oracle_mse: oracle.best.mse,
                    model_mse,
                    subsets_evaluated: oracle.evaluated,
                },
                oracle,
            ))
        }
        _ => None,
    };

    let train_eval = (cfg.kind != ExperimentKind::GradcheckSuite)
        .then(|| evaluate(&model, &data.train, cfg.train.task_loss, cfg.options.eval_batch))
        .transpose()?;
    let test_eval = eval_opt(&model, data.test.as_ref(), cfg)?;
    let final_cost_ratio = cost.as_ref().map(|c| c.masked_ratio(&model));

    write_file(&dir, "gates.txt", &gate_dump(&model))?;
    if let Some(c) = &cost {
        let report = c.report(&model);
        write_file(&dir, "cost_report.txt", &report.to_text())?;
        write_file(&dir, "cost_report.csv", &report.to_csv())?;
    }
    checkpoint::save(&model, dir.join("checkpoint.json"))?;
    write_file(&dir, "plot_data.csv", &plot_data(&model, &history))?;

    let summary = Summary {
        kind: cfg.kind,
        iterations: history.epochs.len() * data.train.len().div_ceil(cfg.train.batch_size),
        initial_cost_ratio,
        final_cost_ratio,
        rho: cfg.train.regularizer.rho,
        train_loss: train_eval.map(|e| e.task_loss),
        train_accuracy: train_eval.and_then(|e| e.accuracy),
        test_loss: test_eval.map(|e| e.task_loss),
        test_accuracy: test_eval.and_then(|e| e.accuracy),
        baseline_test_accuracy: baseline.and_then(|e| e.accuracy),
        baseline_test_loss: baseline.map(|e| e.task_loss),
        active_counts: tgate::layers::active_counts(&model),
        theta_unchanged,
        planted: planted_outcome.as_ref().map(|(p, _)| p.clone()),
        gradcheck_max_rel_err: gradcheck_report.as_ref().map(|r| r.max_rel_err),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&dir, "summary.json", &json)?;

    Ok(Outcome {
        dir,
        model,
        history,
        summary,
        gradcheck: gradcheck_report,
        oracle: planted_outcome.map(|(_, o)| o),
    })
}

/// Loads `path` and runs it under [`output_root`].
pub fn run_experiment_file(path: impl AsRef<Path>) -> Result<Outcome, RunError> {
    let cfg = ExperimentConfig::load(path)?;
    run_experiment(&cfg, &output_root())
}

/// Static cost of a model for every kind that applies to it.
pub fn static_costs(model: &GatedModel) -> Vec<(CostKind, u64)> {
    [CostKind::Flops, CostKind::Params, CostKind::Channels]
        .into_iter()
        .filter_map(|k| tgate::total_cost_static(model, k).ok().map(|c| (k, c)))
        .collect()
}
