use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gta_cli::{
    cmd_bench, cmd_detect, cmd_eval, cmd_graph_report, cmd_synth, cmd_train, format_log_row, parse_override,
    CliError, RunConfig,
};

/// Graph-learning transformer anomaly detector for multivariate sensor series.
#[derive(Parser, Debug)]
#[command(name = "gta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file with run settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides one setting, e.g. `--set lambda_s=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    train: Option<PathBuf>,
    #[arg(long, global = true)]
    test: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    scores: Option<PathBuf>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with a planted graph.
    Synth,
    /// Train a model and write a checkpoint.
    Train,
    /// Score a test series with a trained checkpoint.
    Detect,
    /// Report the best-F1 and best-recall operating points of a score file.
    Eval,
    /// Print the learned graph, with recovery metrics when a planted graph exists.
    GraphReport,
    /// Parameter counts, multiply-adds and forward timings of the attention variants.
    Bench,
}

impl Cli {
    fn overrides(&self) -> Result<Vec<(String, toml::Value)>, CliError> {
        let mut out = Vec::new();
        for s in &self.overrides {
            out.push(parse_override(s)?);
        }
        let path = |p: &PathBuf| toml::Value::String(p.display().to_string());
        let flags = [
            ("seed", self.seed.map(|v| toml::Value::Integer(v as i64))),
            ("out", self.out.as_ref().map(path)),
            ("train", self.train.as_ref().map(path)),
            ("test", self.test.as_ref().map(path)),
            ("checkpoint", self.checkpoint.as_ref().map(path)),
            ("scores", self.scores.as_ref().map(path)),
            ("epochs", self.epochs.map(|v| toml::Value::Integer(v as i64))),
            ("threshold", self.threshold.map(toml::Value::Float)),
        ];
        out.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_owned(), v))));
        Ok(out)
    }
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides()?)?;
    Ok(match cli.command {
        Command::Synth => cmd_synth(&cfg)?.to_string(),
        Command::Train => {
            let quiet = cli.quiet;
            cmd_train(&cfg, |row| {
                if !quiet {
                    eprintln!("{}", format_log_row(cfg.seed, row));
                }
            })?
            .to_string()
        }
        Command::Detect => cmd_detect(&cfg)?.to_string(),
        Command::Eval => cmd_eval(&cfg)?.to_string(),
        Command::GraphReport => cmd_graph_report(&cfg)?.to_string(),
        Command::Bench => cmd_bench(&cfg)?.to_string(),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(report) => {
            print!("{report}");
            if !report.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("gta: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
