use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use drcc_cli::commands::{self, CliResult, SetKind};
use drcc_cli::config::{LoadedConfig, ModelKind};
use drcc_cli::WORKERS_ENV;

#[derive(Parser)]
#[command(name = "drcc", version, about = "Distributionally robust chance-constrained dispatch")]
struct Cli {
    /// Worker threads (overrides `solver.workers` and the environment).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override `output.dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override `output.timing`.
    #[arg(long)]
    timing: Option<bool>,
}

#[derive(Args, Clone)]
struct AmbiguityOverride {
    /// Override `ambiguity.k` (clears `epsilon_target`).
    #[arg(long, conflicts_with = "epsilon_target")]
    k: Option<usize>,
    /// Override `ambiguity.epsilon_target` (clears `k`).
    #[arg(long)]
    epsilon_target: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Network summaries.
    #[command(subcommand)]
    Case(CaseCmd),
    /// Forecast-error scenarios.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Ambiguity-set arithmetic.
    #[command(subcommand)]
    Ambiguity(AmbiguityCmd),
    /// Solve one chance-constrained dispatch and evaluate it.
    Solve {
        /// Network model.
        #[arg(value_enum)]
        model: Model,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        ambiguity: AmbiguityOverride,
    },
    /// Solve over a range of k and tabulate cost and violation.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare deterministic, chance-constrained and robust dispatches.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        ambiguity: AmbiguityOverride,
    },
}

#[derive(Subcommand)]
enum CaseCmd {
    /// Bus, generator and branch counts.
    Info {
        /// Run configuration; the case is built with its options.
        #[arg(long, short, conflicts_with = "case", required_unless_present = "case")]
        config: Option<PathBuf>,
        /// Case path or `bundled:<name>`.
        #[arg(long)]
        case: Option<String>,
        /// Accept series-compensated branches (needed for case300).
        #[arg(long)]
        allow_negative_reactance: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Set {
    Train,
    Test,
}

impl From<Set> for SetKind {
    fn from(s: Set) -> Self {
        match s {
            Set::Train => SetKind::Train,
            Set::Test => SetKind::Test,
        }
    }
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Write `scenarios_<set>.csv` to the output directory.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Which configured set to write.
        #[arg(long, value_enum, default_value = "train")]
        set: Set,
        /// Override the set's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the set's size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Sample moments of a set.
    Stats {
        /// Run configuration; the set is drawn as `solve` would draw it.
        #[arg(long, short, conflicts_with = "csv", required_unless_present = "csv")]
        config: Option<PathBuf>,
        /// Scenario CSV written by `scenario gen`.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Which configured set to describe.
        #[arg(long, value_enum, default_value = "train")]
        set: Set,
    },
}

#[derive(Subcommand)]
enum AmbiguityCmd {
    /// Optimal violation level for k of S.
    Eps {
        /// Enforced scenarios.
        #[arg(long)]
        k: usize,
        /// Sample size.
        #[arg(long)]
        s: usize,
        /// Decimal places printed.
        #[arg(long, default_value_t = 3)]
        digits: usize,
    },
    /// Scenarios to enforce for a given (epsilon, radius).
    K {
        /// Violation level in (0, 1).
        #[arg(long)]
        eps: f64,
        /// Relative-entropy radius, at least 0.
        #[arg(long)]
        radius: f64,
        /// Sample size.
        #[arg(long)]
        s: usize,
    },
    /// Smallest k whose optimal epsilon meets a target.
    Mink {
        /// Largest acceptable optimal epsilon.
        #[arg(long)]
        target: f64,
        /// Sample size.
        #[arg(long)]
        s: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Dc,
    Ac,
}

fn load(args: &ConfigArgs) -> CliResult<LoadedConfig> {
    let mut cfg = LoadedConfig::from_path(&args.config)?;
    if let Some(dir) = &args.out_dir {
        cfg.config.output.dir = dir.clone();
    }
    if let Some(t) = args.timing {
        cfg.config.output.timing = t;
    }
    Ok(cfg)
}

fn apply_ambiguity(cfg: &mut LoadedConfig, a: &AmbiguityOverride) {
    if let Some(k) = a.k {
        cfg.config.ambiguity.k = Some(k);
        cfg.config.ambiguity.epsilon_target = None;
    }
    if let Some(t) = a.epsilon_target {
        cfg.config.ambiguity.epsilon_target = Some(t);
        cfg.config.ambiguity.k = None;
    }
}

/// Flag, then config key, then environment, then rayon's default.
fn init_workers(flag: Option<usize>, config: Option<usize>) {
    let env = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok());
    if let Some(n) = flag.or(config).or(env).filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("cannot set worker count: {e}");
        }
    }
}

fn run(cli: Cli) -> CliResult<String> {
    let workers = cli.workers;
    let with_config = |cfg: &LoadedConfig| init_workers(workers, cfg.config.solver.workers);
    match cli.command {
        Command::Case(CaseCmd::Info { config, case, allow_negative_reactance }) => match (config, case) {
            (Some(path), _) => commands::cmd_case_info_config(&LoadedConfig::from_path(&path)?),
            (None, Some(source)) => commands::cmd_case_info_source(&source, allow_negative_reactance),
            (None, None) => unreachable!("clap requires one of --config and --case"),
        },
        Command::Scenario(ScenarioCmd::Gen { config, set, seed, size }) => {
            let mut cfg = load(&config)?;
            let s = &mut cfg.config.scenarios;
            match set {
                Set::Train => {
                    s.train_seed = seed.unwrap_or(s.train_seed);
                    s.train_size = size.unwrap_or(s.train_size);
                }
                Set::Test => {
                    s.test_seed = seed.unwrap_or(s.test_seed);
                    s.test_size = size.unwrap_or(s.test_size);
                }
            }
            commands::cmd_scenario_gen(&cfg, set.into())
        }
        Command::Scenario(ScenarioCmd::Stats { config, csv, set }) => match (config, csv) {
            (Some(path), _) => commands::cmd_scenario_stats_config(&LoadedConfig::from_path(&path)?, set.into()),
            (None, Some(csv)) => commands::cmd_scenario_stats_csv(&csv),
            (None, None) => unreachable!("clap requires one of --config and --csv"),
        },
        Command::Ambiguity(AmbiguityCmd::Eps { k, s, digits }) => commands::cmd_ambiguity_eps(k, s, digits),
        Command::Ambiguity(AmbiguityCmd::K { eps, radius, s }) => commands::cmd_ambiguity_k(eps, radius, s),
        Command::Ambiguity(AmbiguityCmd::Mink { target, s }) => commands::cmd_ambiguity_mink(target, s),
        Command::Solve { model, config, ambiguity } => {
            let mut cfg = load(&config)?;
            apply_ambiguity(&mut cfg, &ambiguity);
            with_config(&cfg);
            let kind = match model {
                Model::Dc => ModelKind::Dc,
                Model::Ac => ModelKind::Ac,
            };
            commands::cmd_solve(&cfg, kind)
        }
        Command::Sweep { config } => {
            let cfg = load(&config)?;
            with_config(&cfg);
            commands::cmd_sweep(&cfg)
        }
        Command::Eval { config, ambiguity } => {
            let mut cfg = load(&config)?;
            apply_ambiguity(&mut cfg, &ambiguity);
            with_config(&cfg);
            commands::cmd_eval(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
