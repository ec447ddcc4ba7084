use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rowleak_core::experiment::{run_experiment, validate_config, Experiment, ExperimentConfig};
use rowleak_core::hammerleak::Strategy;
use rowleak_core::Error;

#[derive(Parser)]
#[command(name = "rowleak", version, about = "Simulated rowhammer weight leakage experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the vulnerable-cell template
    Template(Opts),
    /// Train the victim (if needed) and run the leakage attack
    Attack(Opts),
    /// Turn stored ledgers into per-weight range profiles
    Profile(Opts),
    /// Train one substitute per arm from stored ledgers
    Train(Opts),
    /// Evaluate stored substitutes against the victim
    Eval(Opts),
    /// Run every stage and write the report
    Run(Opts),
    /// Validate a config file and print its normalized form
    Check(Opts),
}

#[derive(Args)]
struct Opts {
    /// TOML experiment config; desk-scale defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated round budgets, e.g. 0,100,300
    #[arg(long, value_delimiter = ',')]
    rounds: Option<Vec<usize>>,
    /// Restrict the attack to one strategy
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

impl Opts {
    fn experiment(&self) -> Result<Experiment, Error> {
        let mut c = match &self.config {
            Some(path) => validate_config(path)?,
            None => ExperimentConfig::desk_scale(),
        };
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        if let Some(out) = &self.out {
            c.out = out.clone();
        }
        if let Some(rounds) = &self.rounds {
            c.attack.rounds = rounds.clone();
        }
        if let Some(s) = self.strategy {
            c.attack.strategies = vec![s];
        }
        Experiment::new(c)
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Template(o) => {
            let e = o.experiment()?;
            let t = e.template_stage()?;
            println!(
                "{} cells, vulnerable page fraction {:.4}, cell rate {:.6}",
                t.len(),
                t.vulnerable_page_fraction(),
                t.cell_rate()
            );
        }
        Command::Attack(o) => {
            let e = o.experiment()?;
            for run in e.attack_stage()? {
                let last = run.curve.last();
                println!(
                    "{}: {} rounds, msb {:.4}, full {:.4}, {:.1} s simulated",
                    run.strategy,
                    last.map_or(0, |p| p.round),
                    last.map_or(0.0, |p| p.msb),
                    last.map_or(0.0, |p| p.full),
                    last.map_or(0.0, |p| p.seconds)
                );
            }
        }
        Command::Profile(o) => o.experiment()?.profile_stage()?,
        Command::Train(o) => {
            for (arm, _) in o.experiment()?.train_stage()? {
                println!("trained {}", arm.file_stem());
            }
        }
        Command::Eval(o) => {
            let rows = o.experiment()?.eval_stage()?;
            print!("{}", rowleak_core::experiment::metrics_csv(&rows));
        }
        Command::Run(o) => {
            let e = o.experiment()?;
            let report = run_experiment(e.config)?;
            print!("{}", report.summary_table());
        }
        Command::Check(o) => {
            let e = o.experiment()?;
            println!("config {}", e.hash);
            println!("{:#?}", e.config);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config(issues)) => {
            eprintln!("error: stage `config` failed");
            for i in issues {
                eprintln!("  {i}");
            }
            ExitCode::from(2)
        }
        Err(e @ Error::Stage { .. }) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: stage `config` failed: {e}");
            ExitCode::FAILURE
        }
    }
}
