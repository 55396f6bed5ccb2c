use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use phenoauth_cli::{cmd_attack, cmd_auth, cmd_bench, cmd_enroll, AuthArgs, Outcome, ScenarioConfig, Suite, TransportKind};

#[derive(Parser)]
#[command(name = "phenoauth", version, about = "PUF phenotype mutual authentication scenarios")]
struct Cli {
    /// Scenario file (TOML). Defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    transport: Option<TransportKind>,
    /// Print the report as JSON instead of a summary.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Provision and enroll the device group; write NVM and model files.
    Enroll,
    /// Run honest sessions between enrolled devices.
    Auth {
        #[arg(long)]
        initiator: Option<String>,
        #[arg(long)]
        peer: Option<String>,
        #[arg(long)]
        sessions: Option<usize>,
        /// Let the peer initiate.
        #[arg(long)]
        swap: bool,
        /// Run every disjoint pair of devices.
        #[arg(long)]
        all_pairs: bool,
        /// Run pairs on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Play security games against an enrolled pair.
    Attack {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        /// Trials per game, overriding the config.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Time each primitive over honest sessions; write metrics.csv.
    Bench {
        #[arg(long)]
        sessions: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Some(t) = cli.transport {
        cfg.transport = t;
    }
    if let Command::Auth { parallel: true, .. } = cli.command {
        cfg.parallel = true;
    }
    cfg.validate()?;
    match cli.command {
        Command::Enroll => cmd_enroll(&cfg),
        Command::Auth {
            initiator,
            peer,
            sessions,
            swap,
            all_pairs,
            ..
        } => cmd_auth(
            &cfg,
            &AuthArgs {
                initiator,
                peer,
                sessions,
                swap,
                all_pairs,
            },
        ),
        Command::Attack { suite, trials } => cmd_attack(&cfg, suite, trials),
        Command::Bench { sessions } => cmd_bench(&cfg, sessions),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(outcome) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&outcome.report).expect("report serializes"));
            } else {
                println!("{}", outcome.summary);
                for f in &outcome.files {
                    println!("wrote {}", f.display());
                }
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
