use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dft_core::config::ExperimentConfig;
use dft_core::data::TaskData;
use dft_core::experiment::{
    ablate, ablation_csv, evaluate_files, format_checks, model_config_for, oracle_check, pretrain_base, run,
    AblationAxis,
};
use dft_core::fcco::{write_metrics_csv, Method, SchedulerKind, TrainConfig};
use dft_core::model::{load_params, save_params, GenConfig};
use dft_core::objectives::ScoringMode;
use dft_core::pool::{generate_pool, PromptStrategy};
use dft_core::task::{make_task, TaskKind};
use dft_core::Result;

#[derive(Parser)]
#[command(name = "dft", version, about = "Discriminative fine-tuning lab for tiny token models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample an offline negative pool from a base model.
    GeneratePool {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        strategy: PromptStrategy,
        #[arg(long, default_value_t = 0.7)]
        temperature: f64,
        /// 0 keeps every token.
        #[arg(long, default_value_t = 50)]
        top_k: usize,
        #[arg(long, default_value_t = 1.0)]
        top_p: f64,
        #[arg(long, default_value_t = 8)]
        max_tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per a key=value config; writes metrics.csv, params.bin, summary.json.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Greedy exact-match and log-likelihood report on a task's test split.
    Evaluate {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        task: PathBuf,
    },
    /// Oracle invariant suite on a checkpoint over an enumerable answer space.
    OracleCheck {
        #[arg(long)]
        params: PathBuf,
        #[arg(long = "K")]
        k: usize,
        #[arg(long = "L")]
        l: usize,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value = "unnormalized")]
        mode: ScoringMode,
    },
    /// Sweep one axis over several seeds and write a comparison CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Write a synthetic task file.
    MakeTask {
        #[arg(long)]
        name: TaskKind,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a base model that emits both good and bad answers.
    PretrainBase {
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-step metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GeneratePool {
            data,
            base,
            m,
            strategy,
            temperature,
            top_k,
            top_p,
            max_tokens,
            seed,
            out,
        } => {
            let task = TaskData::load(&data)?;
            let params = load_params(&base, None)?;
            let gen = GenConfig {
                temperature,
                top_k: (top_k > 0).then_some(top_k),
                top_p,
                max_tokens,
                seed,
            };
            let pool = generate_pool(&params, &task.train, m, &gen, strategy, &task.vocab)?;
            pool.save(&out)?;
            println!("wrote {} entries to {}", pool.n_examples() * m, out.display());
        }
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = run(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Evaluate { params, task } => {
            let report = evaluate_files(&params, &task)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::OracleCheck { params, k, l, tau, mode } => {
            let checks = oracle_check(&params, k, l, tau, mode)?;
            print!("{}", format_checks(&checks));
            if checks.iter().any(|c| !c.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate { config, axis, values } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rows = ablate(&cfg, axis, &values)?;
            print!("{}", ablation_csv(axis, &rows));
        }
        Command::MakeTask { name, size, seed, out } => {
            let task = make_task(name, size, seed)?;
            task.save(&out)?;
            println!(
                "wrote {} ({} train, {} test) to {}",
                task.name,
                task.train.len(),
                task.test.len(),
                out.display()
            );
        }
        Command::PretrainBase {
            task,
            d_model,
            layers,
            epochs,
            lr,
            seed,
            out,
            metrics,
        } => {
            let task = TaskData::load(&task)?;
            let model = model_config_for(&task, d_model, layers)?;
            let mut cfg = TrainConfig::for_method(Method::Sft);
            cfg.epochs = epochs;
            cfg.lr = lr;
            cfg.seed = seed;
            cfg.scheduler = SchedulerKind::Cosine;
            let res = pretrain_base(&task, model, &cfg, seed)?;
            save_params(&res.params, &out)?;
            if let Some(path) = metrics {
                write_metrics_csv(&res.metrics, path)?;
            }
            println!("wrote base model {model:?} to {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
