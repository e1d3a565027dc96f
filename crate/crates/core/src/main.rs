use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use rclrec::pipeline::{self, RunConfig};

#[derive(Parser)]
#[command(name = "rclrec", version, about = "Reverse-curriculum generative recommendation: data, tokenizer, training, retrieval")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic interactions, or ingest data.sequences and data.items.
    GenData,
    /// Fit residual k-means codebooks over the item embeddings.
    FitTokenizer,
    /// Pretrain θ0 on mixed-behavior targets.
    Pretrain,
    /// Fine-tune on pay targets with the curriculum prefix.
    Sft,
    /// Beam-search retrieval on the test split; writes Recall/NDCG reports.
    Eval,
    /// Ablation variants and the curriculum-size sweep over all seeds.
    Ablate,
    /// gen-data, fit-tokenizer, pretrain, sft and eval in order.
    Run,
    /// Re-hash the run directory against its manifest.
    Verify,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn resolve(cli: &Cli) -> rclrec::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn execute(cli: &Cli) -> rclrec::Result<bool> {
    let config = resolve(cli)?;
    let done = |stage: &str| println!("{stage}: done, artifacts under {}", config.out.display());
    match cli.command {
        Command::GenData => {
            pipeline::gen_data(&config)?;
            done("gen-data");
        }
        Command::FitTokenizer => {
            pipeline::fit_tokenizer(&config)?;
            done("fit-tokenizer");
        }
        Command::Pretrain => {
            pipeline::run_pretrain(&config)?;
            done("pretrain");
        }
        Command::Sft => {
            pipeline::run_sft(&config)?;
            done("sft");
        }
        Command::Eval => {
            let (_, report) = pipeline::run_eval(&config)?;
            print!("{}", report.summary_csv());
        }
        Command::Ablate => {
            let (_, table) = pipeline::run_ablate(&config)?;
            print!("{}", table.to_csv());
        }
        Command::Run => {
            pipeline::gen_data(&config)?;
            pipeline::fit_tokenizer(&config)?;
            pipeline::run_pretrain(&config)?;
            pipeline::run_sft(&config)?;
            let (_, report) = pipeline::run_eval(&config)?;
            print!("{}", report.summary_csv());
        }
        Command::Verify => {
            let problems = pipeline::verify(&config.out)?;
            for p in &problems {
                eprintln!("{p}");
            }
            if !problems.is_empty() {
                return Ok(false);
            }
            println!("verify: {} is consistent with its manifest", config.out.display());
        }
        Command::ShowConfig => print!("{}", config.to_toml()?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let keys = format!("Configuration keys and defaults:\n{}", RunConfig::describe_keys());
    let matches = Cli::command().after_long_help(keys).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
