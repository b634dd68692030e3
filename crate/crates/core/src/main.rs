use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bssad::commands::{
    cmd_detect, cmd_eval, cmd_sweep, cmd_synth, cmd_train, report_outcome, BeliefOutput, Settings, SplitOutputs,
};
use bssad::config::{Assignment, RunConfig, SYNTH_KEYS};

/// Bayesian state-space anomaly detection for multivariate time series.
///
/// Every configuration key can also be given as `--key value`
/// (for example `--filter pf --n_particles 2000`); flags beat the config file,
/// which beats the built-in defaults.
#[derive(Debug, Parser)]
#[command(name = "bssad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled synthetic series.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the rows before `--split-at` here.
        #[arg(long, requires_all = ["test_out", "split_at"])]
        train_out: Option<PathBuf>,
        /// Also write the rows from `--split-at` on here.
        #[arg(long, requires_all = ["train_out", "split_at"])]
        test_out: Option<PathBuf>,
        #[arg(long, requires_all = ["train_out", "test_out"])]
        split_at: Option<usize>,
    },
    /// Train the state-space network on normal-only data.
    Train {
        train_csv: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        label_column: Option<String>,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the filter over a test series and write per-timestep scores.
    Detect {
        test_csv: PathBuf,
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        label_column: Option<String>,
        /// Score CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Also export the observation beliefs.
        #[arg(long)]
        beliefs_out: Option<PathBuf>,
        /// Include covariance entries in the belief export.
        #[arg(long, requires = "beliefs_out")]
        covariance: bool,
    },
    /// Threshold search and point-adjusted metrics over a labelled score CSV.
    Eval {
        scores_csv: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON report to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect and evaluate for every (seed, size) pair.
    Sweep {
        test_csv: PathBuf,
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        label_column: Option<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Ensemble or particle counts, depending on the filter.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        /// JSON report to write.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Pull `--key value` / `--key=value` pairs naming configuration keys out of
/// the argument list; everything else goes to clap.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<Assignment>) {
    let is_key = |k: &str| RunConfig::KEYS.contains(&k) || SYNTH_KEYS.contains(&k);
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.replace('-', "_"), Some(v.to_string())),
            None => (flag.replace('-', "_"), None),
        };
        if !is_key(&name) {
            rest.push(arg);
            continue;
        }
        match inline.or_else(|| iter.next()) {
            Some(value) => overrides.push(Assignment {
                origin: format!("--{name}"),
                key: name,
                value,
            }),
            None => {
                // Let clap report the missing value.
                rest.push(arg);
            }
        }
    }
    (rest, overrides)
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    let outcome = match cli.command {
        Command::Synth {
            config,
            out,
            train_out,
            test_out,
            split_at,
        } => {
            let split = match (train_out, test_out, split_at) {
                (Some(train), Some(test), Some(at)) => Some(SplitOutputs { train, test, at }),
                _ => None,
            };
            cmd_synth(config.as_deref(), &overrides, &out, split.as_ref())
        }
        Command::Train {
            train_csv,
            config,
            label_column,
            out,
        } => cmd_train(&train_csv, label_column.as_deref(), &Settings { config, overrides }, &out),
        Command::Detect {
            test_csv,
            model,
            config,
            label_column,
            out,
            beliefs_out,
            covariance,
        } => {
            let beliefs = beliefs_out.map(|path| BeliefOutput { path, covariance });
            cmd_detect(
                &test_csv,
                &model,
                label_column.as_deref(),
                &Settings { config, overrides },
                &out,
                beliefs.as_ref(),
            )
        }
        Command::Eval { scores_csv, config, out } => cmd_eval(&scores_csv, &Settings { config, overrides }, &out),
        Command::Sweep {
            test_csv,
            model,
            config,
            label_column,
            seeds,
            sizes,
            out,
        } => cmd_sweep(
            &test_csv,
            &model,
            label_column.as_deref(),
            &Settings { config, overrides },
            &seeds,
            &sizes,
            &out,
        ),
    };
    ExitCode::from(report_outcome(outcome) as u8)
}
