use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use treereg::config::RunConfig;
use treereg::datasets::write_delimited;
use treereg::experiment::{
    distill, evaluate, sweep, train_target, write_history_csv, write_surrogate_csv, Task,
};
use treereg::nn::Mlp;
use treereg::{Error, Result};

#[derive(Parser)]
#[command(name = "treereg", version, about = "Train small networks under a regional tree penalty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train / validation / test splits and the region cover.
    GenData(Common),
    /// Train one network and write its checkpoint, history and distilled trees.
    Train(Common),
    /// Run the strength sweep with baselines.
    Sweep(Common),
    /// Evaluate a checkpoint on the test split.
    Eval(WithCheckpoint),
    /// Distil a checkpoint into per-region trees.
    Distill(WithCheckpoint),
}

#[derive(Args)]
struct Common {
    /// Base JSON config; sections missing from it take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON fragment merged into the `dataset` section.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    regions: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    regularizer: Option<String>,
    #[arg(long)]
    tree: Option<String>,
    #[arg(long)]
    surrogate: Option<String>,
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let pairs = [
            ("dataset", &self.dataset),
            ("regions", &self.regions),
            ("model", &self.model),
            ("regularizer", &self.regularizer),
            ("tree", &self.tree),
            ("surrogate", &self.surrogate),
            ("sweep", &self.sweep),
        ];
        let overrides: Vec<(&str, &str)> =
            pairs.iter().filter_map(|(k, v)| v.as_deref().map(|v| (*k, v))).collect();
        let mut cfg = RunConfig::resolve(self.config.as_deref(), &overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_checkpoint(path: &Path, task: &Task) -> Result<Mlp> {
    let model: Mlp = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if model.input_dim() != task.n_features() || model.output_dim() != task.n_outputs() {
        return Err(Error::Shape(format!(
            "checkpoint maps {} -> {} but the task has {} features and {} outputs",
            model.input_dim(),
            model.output_dim(),
            task.n_features(),
            task.n_outputs()
        )));
    }
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let task = c.resolve()?.build_task()?;
            std::fs::create_dir_all(&c.out)?;
            for (name, d) in [("train", &task.train), ("validation", &task.validation), ("test", &task.test)] {
                write_delimited(d, &c.out.join(format!("{name}.csv")), Some(&task.regions))?;
            }
            write_json(&c.out.join("regions.json"), &task.regions)?;
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let task = cfg.build_task()?;
            let tc = cfg.train_config();
            let out = train_target(&tc, &task)?;
            std::fs::create_dir_all(&c.out)?;
            write_json(&c.out.join("checkpoint.json"), &out.model)?;
            write_history_csv(&out.history, &c.out.join("history.csv"))?;
            write_surrogate_csv(&out.history, &c.out.join("surrogates.csv"))?;
            let metrics = evaluate(&out.model, &task, &tc.tree)?;
            write_json(&c.out.join("metrics.json"), &metrics)?;
            distill(&out.model, &task.train.x, &task.regions, &tc.tree)?.export(&c.out.join("trees"))?;
            println!("{}", serde_json::to_string(&metrics)?);
        }
        Command::Sweep(c) => {
            let cfg = c.resolve()?;
            let task = cfg.build_task()?;
            let result = sweep(&cfg.train_config(), &cfg.sweep, &task)?;
            std::fs::create_dir_all(&c.out)?;
            result.write_csv(&c.out.join("results.csv"))?;
            result.write_curves_csv(&c.out.join("tradeoff.csv"))?;
            let failed = result.rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                log::warn!("{failed} sweep cells failed; see the error column");
            }
        }
        Command::Eval(w) => {
            let cfg = w.common.resolve()?;
            let task = cfg.build_task()?;
            let model = load_checkpoint(&w.checkpoint, &task)?;
            let metrics = evaluate(&model, &task, &cfg.tree)?;
            std::fs::create_dir_all(&w.common.out)?;
            write_json(&w.common.out.join("metrics.json"), &metrics)?;
            println!("{}", serde_json::to_string(&metrics)?);
        }
        Command::Distill(w) => {
            let cfg = w.common.resolve()?;
            let task = cfg.build_task()?;
            let model = load_checkpoint(&w.checkpoint, &task)?;
            distill(&model, &task.train.x, &task.regions, &cfg.tree)?.export(&w.common.out.join("trees"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": e.kind(), "message": e.to_string()}}));
            ExitCode::FAILURE
        }
    }
}
