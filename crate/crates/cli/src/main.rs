use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tgate::{checkpoint, hard_prune, CostKind, CostModel};
use tgate_cli::config::{DatasetSpec, ExperimentConfig, ExperimentKind};
use tgate_cli::experiments::{load_dataset, run_experiment_file, static_costs, RunError};
use tgate_cli::idx::{write_idx, IdxArray};
use tgate_cli::{datasets, oracle, recipes};

#[derive(Parser)]
#[command(name = "tgate", version, about = "Trainable-gate pruning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config.
    Run { config: PathBuf },
    /// Hard-prune a checkpoint and write the smaller model.
    Prune {
        checkpoint: PathBuf,
        #[arg(long)]
        emit: PathBuf,
    },
    /// Print cost tables for a checkpoint.
    Report {
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<CostKind>,
    },
    /// Exhaustive subset search on a planted-features config.
    Oracle {
        config: PathBuf,
        /// Largest subset size; defaults to the planted count.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Print the default config of a built-in recipe.
    Recipe {
        #[arg(value_parser = parse_experiment)]
        kind: ExperimentKind,
    },
    /// Write a synthetic glyph dataset as IDX files.
    GenGlyphs {
        dir: PathBuf,
        #[arg(long, default_value_t = 3000)]
        n: usize,
        #[arg(long, default_value_t = 1000)]
        test_n: usize,
        #[arg(long, default_value_t = 0.25)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn parse_kind(s: &str) -> Result<CostKind, String> {
    match s {
        "flops" => Ok(CostKind::Flops),
        "params" => Ok(CostKind::Params),
        "channels" => Ok(CostKind::Channels),
        _ => Err(format!("unknown cost kind `{s}` (flops, params, channels)")),
    }
}

fn parse_experiment(s: &str) -> Result<ExperimentKind, String> {
    recipes::ALL
        .into_iter()
        .find(|k| k.to_string() == s)
        .ok_or_else(|| format!("unknown experiment `{s}`"))
}

fn run(config: PathBuf) -> Result<(), RunError> {
    let outcome = run_experiment_file(&config)?;
    let s = &outcome.summary;
    println!("output: {}", outcome.dir.display());
    if let (Some(a), Some(b)) = (s.initial_cost_ratio, s.final_cost_ratio) {
        println!("cost_ratio: {a:.4} -> {b:.4} (target {})", s.rho);
    }
    for (name, open, total) in &s.active_counts {
        println!("gate {name}: {open}/{total} open");
    }
    if let Some(l) = s.train_loss {
        println!("train loss: {l:.6e}");
    }
    if let Some(l) = s.test_loss {
        println!("test loss: {l:.6e}");
    }
    if let Some(a) = s.test_accuracy {
        println!("test accuracy: {:.2}%", 100.0 * a);
    }
    if let Some(a) = s.baseline_test_accuracy {
        println!("baseline test accuracy: {:.2}%", 100.0 * a);
    }
    if let Some(p) = &s.planted {
        println!(
            "selected {:?}, oracle {:?} (planted {:?}); mse {:.6e} vs oracle {:.6e}",
            p.selected, p.oracle_features, p.planted, p.model_mse, p.oracle_mse
        );
    }
    if let Some(e) = s.gradcheck_max_rel_err {
        println!("gradcheck max relative error: {e:.3e}");
    }
    Ok(())
}

fn prune(path: PathBuf, emit: PathBuf) -> anyhow::Result<()> {
    let model = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let (pruned, report) = hard_prune(&model)?;
    checkpoint::save(&pruned, &emit).with_context(|| format!("writing {}", emit.display()))?;
    let (kept, orig) = report.input_channels;
    println!("input: {kept}/{orig} channels");
    for (name, kept, orig) in &report.layers {
        println!("{name}: {kept}/{orig} channels");
    }
    let before = static_costs(&model.without_gates());
    let after = static_costs(&pruned);
    for ((kind, b), (_, a)) in before.iter().zip(&after) {
        println!("{kind}: {b} -> {a} ({:.4})", *a as f64 / *b as f64);
    }
    println!("wrote {}", emit.display());
    Ok(())
}

fn report(path: PathBuf, kind: Option<CostKind>) -> anyhow::Result<()> {
    let model = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let kinds = kind.map_or_else(|| vec![CostKind::Flops, CostKind::Params, CostKind::Channels], |k| vec![k]);
    for k in kinds {
        match CostModel::new(&model, k) {
            Ok(cm) => println!("{}", cm.report(&model).to_text()),
            Err(e) => println!("{k}: {e}\n"),
        }
    }
    Ok(())
}

fn run_oracle(path: PathBuf, budget: Option<usize>) -> Result<(), RunError> {
    let cfg = ExperimentConfig::load(&path)?;
    let data = load_dataset(&cfg.dataset)?;
    let budget = match (&cfg.dataset, budget) {
        (_, Some(b)) => b,
        (DatasetSpec::SyntheticPlanted { k_relevant, .. }, None) => *k_relevant,
        _ => data.train.sample_shape()[0],
    };
    let r = oracle::brute_force_select(&data.train, budget)?;
    for fit in &r.per_size {
        println!("k={}: {:?} mse {:.6e}", fit.features.len(), fit.features, fit.mse);
    }
    println!("best (budget {budget}): {:?} mse {:.6e} over {} subsets", r.best.features, r.best.mse, r.evaluated);
    if let Some(p) = data.planted {
        println!("planted: {p:?}");
    }
    Ok(())
}

fn gen_glyphs(dir: PathBuf, n: usize, test_n: usize, noise: f64, seed: u64) -> anyhow::Result<()> {
    std::fs::create_dir_all(&dir)?;
    let side = datasets::GLYPH_SIDE;
    for (prefix, count, s) in [("train", n, seed), ("test", test_n, seed ^ 0x7e57_7e57)] {
        let set = datasets::gen_glyphs(count, 10, noise, s)?;
        write_idx(
            dir.join(format!("{prefix}-images.idx3-ubyte")),
            &IdxArray { dims: vec![count, side, side], data: set.images },
        )?;
        write_idx(
            dir.join(format!("{prefix}-labels.idx1-ubyte")),
            &IdxArray { dims: vec![count], data: set.labels },
        )?;
    }
    println!("wrote glyph IDX files to {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<(), (i32, String)> = match cli.command {
        Command::Run { config } => run(config).map_err(|e| (e.exit_code(), e.to_string())),
        Command::Oracle { config, budget } => run_oracle(config, budget).map_err(|e| (e.exit_code(), e.to_string())),
        Command::Prune { checkpoint, emit } => prune(checkpoint, emit).map_err(|e| (1, format!("{e:#}"))),
        Command::Report { checkpoint, kind } => report(checkpoint, kind).map_err(|e| (1, format!("{e:#}"))),
        Command::Recipe { kind } => {
            print!("{}", recipes::recipe(kind).to_toml());
            Ok(())
        }
        Command::GenGlyphs { dir, n, test_n, noise, seed } => {
            gen_glyphs(dir, n, test_n, noise, seed).map_err(|e| (1, format!("{e:#}")))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code as u8)
        }
    }
}
