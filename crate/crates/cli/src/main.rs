//! `steprl` — config-driven pipeline runner.
//!
//! Every subcommand resolves the same experiment config (file + CLI
//! overrides), computes the run id, and works under `<out>/<run-id>/`.
//! Failures exit nonzero with a machine-readable JSON record on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use steprl_core::config::{ExperimentConfig, PromptMix};
use steprl_core::harness::{Harness, ResultsTable};
use steprl_core::reward::SchemeKind;
use steprl_core::rm::RmObjective;

#[derive(Parser)]
#[command(
    name = "steprl",
    about = "Step-level RLHF pipeline on synthetic arithmetic: corpus generation, SFT, reward models, PPO with five reward delivery schemes"
)]
struct Cli {
    /// TOML experiment config; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Skip stages whose artifacts are already complete.
    #[arg(long, global = true)]
    resume: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpora (SFT, reward-model, eval splits).
    GenData,
    /// Stage one: supervised fine-tuning of the generator.
    TrainSft,
    /// Stage two: train a reward model.
    TrainRm {
        /// orm | prm
        #[arg(long)]
        objective: String,
    },
    /// Stage three: PPO against the configured reward scheme.
    TrainPpo {
        /// orm | prm_avg | prm_prod | prm_max | prm_min (config default
        /// when omitted)
        #[arg(long)]
        scheme: Option<String>,
        /// simple_only | complex_only | mixed (config default when omitted)
        #[arg(long)]
        mix: Option<String>,
    },
    /// Evaluate existing artifacts into a results table (no training).
    Eval,
    /// Full pipeline for every scheme plus the SFT baseline (12-row table).
    CompareSchemes,
    /// Dataset-mixing ablation across the three prompt mixes (6-row table).
    AblateMixing {
        /// Scheme to ablate (default prm_prod).
        #[arg(long)]
        scheme: Option<String>,
    },
    /// Regenerate report files from the stored results table.
    Report,
    /// Run the whole single-scheme pipeline end to end.
    RunPipeline,
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::GenData => "gen-data",
        Command::TrainSft => "train-sft",
        Command::TrainRm { .. } => "train-rm",
        Command::TrainPpo { .. } => "train-ppo",
        Command::Eval => "eval",
        Command::CompareSchemes => "compare-schemes",
        Command::AblateMixing { .. } => "ablate-mixing",
        Command::Report => "report",
        Command::RunPipeline => "run-pipeline",
    }
}

fn resolve_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    Ok(cfg)
}

fn parse_scheme(s: &str) -> anyhow::Result<SchemeKind> {
    SchemeKind::parse(s)
        .ok_or_else(|| anyhow::anyhow!("unknown scheme `{s}` (orm|prm_avg|prm_prod|prm_max|prm_min)"))
}

fn parse_mix(s: &str) -> anyhow::Result<PromptMix> {
    PromptMix::parse(s)
        .ok_or_else(|| anyhow::anyhow!("unknown mix `{s}` (simple_only|complex_only|mixed)"))
}

fn print_table(table: &ResultsTable) {
    println!("{}", table.to_csv().trim_end());
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(cli)?;
    let harness = Harness::new(cfg.clone(), cli.resume)?;
    println!("run-id: {}", harness.id());
    println!("artifacts: {}", harness.root().display());

    match &cli.command {
        Command::GenData => {
            harness.ensure_corpus()?;
            println!("corpus written under {}", harness.root().join("corpus").display());
        }
        Command::TrainSft => {
            let ckpt = harness.ensure_sft()?;
            println!("sft checkpoint: {}", ckpt.display());
        }
        Command::TrainRm { objective } => {
            let objective = match objective.as_str() {
                "orm" => RmObjective::Orm,
                "prm" => RmObjective::Prm,
                other => anyhow::bail!("unknown objective `{other}` (orm|prm)"),
            };
            let ckpt = harness.ensure_rm(objective)?;
            println!("{} checkpoint: {}", objective.as_str(), ckpt.display());
        }
        Command::TrainPpo { scheme, mix } => {
            let kind = match scheme {
                Some(s) => parse_scheme(s)?,
                None => cfg.ppo.reward_scheme,
            };
            let mix = match mix {
                Some(m) => parse_mix(m)?,
                None => cfg.ppo.prompt_mix,
            };
            let dir = harness.ensure_ppo_cell(kind, mix)?;
            println!("ppo cell: {}", dir.display());
        }
        Command::Eval => {
            let table = harness.eval_only()?;
            print_table(&table);
        }
        Command::CompareSchemes => {
            let table = harness.compare_schemes()?;
            print_table(&table);
        }
        Command::AblateMixing { scheme } => {
            let kind = match scheme {
                Some(s) => parse_scheme(s)?,
                None => SchemeKind::PrmProd,
            };
            let table = harness.ablate_mixing(kind)?;
            print_table(&table);
        }
        Command::Report => {
            let files = harness.report_from_stored()?;
            println!("report: {}", files.summary_json.display());
        }
        Command::RunPipeline => {
            let table = harness.run_pipeline()?;
            print_table(&table);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = serde_json::json!({
                "error": err.to_string(),
                "command": command_name(&cli.command),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
