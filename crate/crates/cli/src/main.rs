use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedconform::harness::{
    emit_report, run_experiment, sample_outputs, stream_rng, DataSource, ExperimentConfig, ReportFormat, Stream,
    SyntheticSpec, OUT_DIR_ENV,
};
use fedconform::moreau::{smoothed_quantile_reference, PinballParams};
use fedconform::privacy::{calibrate_sigma_g, PrivacyBudget};
use fedconform::scores::write_probs_csv;
use fedconform::weighted_dist::WeightedEmpiricalDistribution;
use fedconform::Error;

#[derive(Parser)]
#[command(
    name = "fedconform",
    version,
    about = "Federated conformal prediction under label shift"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a replicated coverage experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replications: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// Temperature applied to logit-format score files.
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Print the gradient-noise level that makes DP-FedAvgQE (ε, δ)-private.
    CalibrateDp {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        rounds: usize,
        #[arg(long)]
        local_steps: usize,
        /// Agents sampled per round.
        #[arg(long)]
        subsample: usize,
        /// Total number of agents.
        #[arg(long)]
        agents: usize,
        #[arg(long)]
        lambda_max: f64,
    },
    /// Write synthetic classifier outputs as `label,p0,...` files.
    GenSynthetic {
        /// Experiment config with a synthetic data source; the toy problem
        /// is used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        output: PathBuf,
    },
    /// Exact or smoothed weighted quantile of a score file.
    Quantile {
        /// Scores in [0, 1], separated by whitespace, commas or newlines.
        #[arg(long)]
        scores: PathBuf,
        /// Non-negative weights in the same layout; uniform when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 1e-6)]
        gamma: f64,
        #[arg(long, value_enum, default_value_t = Mode::Exact)]
        mode: Mode,
        /// Add an atom at 1 carrying weight 1/(N+1) and scale the given
        /// weights to N/(N+1).
        #[arg(long)]
        append_one: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Exact,
    Smoothed,
}

/// Exit code 2 for usage and configuration problems, 1 for runtime failures.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn classify(err: Error) -> Self {
        match err {
            Error::Parse { .. } | Error::InvalidBudget { .. } | Error::InvalidInput(_) => {
                Failure::Usage(err.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            replications,
            output,
            format,
            temperature,
        } => cmd_run(&config, seed, replications, output, format, temperature),
        Command::CalibrateDp {
            epsilon,
            delta,
            rounds,
            local_steps,
            subsample,
            agents,
            lambda_max,
        } => cmd_calibrate_dp(epsilon, delta, rounds, local_steps, subsample, agents, lambda_max),
        Command::GenSynthetic { config, seed, output } => cmd_gen_synthetic(config.as_deref(), seed, &output),
        Command::Quantile {
            scores,
            weights,
            alpha,
            gamma,
            mode,
            append_one,
        } => cmd_quantile(&scores, weights.as_deref(), alpha, gamma, mode, append_one),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::from_path(path).map_err(|e| Failure::Usage(e.to_string()))
}

fn cmd_run(
    config_path: &Path,
    seed: Option<u64>,
    replications: Option<usize>,
    output: Option<PathBuf>,
    format: Option<Format>,
    temperature: Option<f64>,
) -> Result<(), Failure> {
    let mut config = load_config(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(r) = replications {
        config.replications = r;
    }
    if let Some(t) = temperature {
        match &mut config.data {
            DataSource::ScoreFile(source) => source.temperature = Some(t),
            DataSource::Synthetic(_) => {
                return Err(Failure::Usage("--temperature only applies to score-file data".into()));
            }
        }
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let format = format.map(ReportFormat::from);
    let path = match output {
        Some(p) => Some(p),
        None => config.resolved_output().map_err(|e| Failure::Usage(e.to_string()))?,
    };
    let path = path.or_else(|| {
        std::env::var_os(OUT_DIR_ENV).map(|dir| {
            let ext = format.unwrap_or(ReportFormat::Csv).extension();
            PathBuf::from(dir).join(format!("report.{ext}"))
        })
    });

    let report = run_experiment(&config).map_err(|e| Failure::Runtime(e.to_string()))?;
    print!("{}", report.summary_table());
    if let Some(path) = path {
        let format = format
            .or_else(|| ReportFormat::from_path(&path))
            .unwrap_or(ReportFormat::Csv);
        emit_report(&report, &path, format).map_err(|e| Failure::Runtime(e.to_string()))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_calibrate_dp(
    epsilon: f64,
    delta: f64,
    rounds: usize,
    local_steps: usize,
    subsample: usize,
    agents: usize,
    lambda_max: f64,
) -> Result<(), Failure> {
    let budget = PrivacyBudget::new(epsilon, delta, 0.0).map_err(Failure::classify)?;
    let c =
        calibrate_sigma_g(&budget, rounds, local_steps, subsample, agents, lambda_max).map_err(Failure::classify)?;
    println!("sigma_g = {}", c.sigma_g);
    println!("delta_bar = {}", c.delta_bar);
    Ok(())
}

fn cmd_gen_synthetic(config: Option<&Path>, seed: u64, output: &Path) -> Result<(), Failure> {
    let (spec, target) = match config {
        Some(path) => {
            let config = load_config(path)?;
            match config.data {
                DataSource::Synthetic(spec) => (spec, config.target_agent),
                DataSource::ScoreFile(_) => {
                    return Err(Failure::Usage(format!(
                        "{}: data source is not synthetic",
                        path.display()
                    )));
                }
            }
        }
        None => (SyntheticSpec::toy(), 1),
    };
    spec.validate().map_err(Failure::classify)?;
    let mut rng = stream_rng(seed, 0, Stream::Data);
    let mut files = Vec::new();
    for (agent, (dist, &n)) in spec.label_dists.iter().zip(&spec.cal_sizes).enumerate() {
        let (o, l) = sample_outputs(&spec, dist, n, &mut rng).map_err(Failure::classify)?;
        files.push((format!("agent_{agent}.csv"), o, l));
    }
    let (o, l) =
        sample_outputs(&spec, &spec.label_dists[target], spec.test_size, &mut rng).map_err(Failure::classify)?;
    files.push(("test.csv".to_string(), o, l));
    std::fs::create_dir_all(output).map_err(|e| Failure::Runtime(format!("{}: {e}", output.display())))?;
    for (name, o, l) in &files {
        let path = output.join(name);
        write_probs_csv(&path, o, l).map_err(|e| Failure::Runtime(e.to_string()))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn read_numbers(path: &Path) -> Result<Vec<f64>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(|l| l.split(|c: char| c == ',' || c.is_whitespace()))
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Failure::Usage(format!("{}: `{t}` is not a number", path.display())))
        })
        .collect()
}

fn cmd_quantile(
    scores_path: &Path,
    weights_path: Option<&Path>,
    alpha: f64,
    gamma: f64,
    mode: Mode,
    append_one: bool,
) -> Result<(), Failure> {
    let scores = read_numbers(scores_path)?;
    if scores.is_empty() {
        return Err(Failure::Usage(format!("{}: no scores", scores_path.display())));
    }
    let weights = match weights_path {
        Some(p) => {
            let w = read_numbers(p)?;
            if w.len() != scores.len() {
                return Err(Failure::Usage(format!(
                    "{}: {} weights for {} scores",
                    p.display(),
                    w.len(),
                    scores.len()
                )));
            }
            w
        }
        None => vec![1.0; scores.len()],
    };
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Failure::Usage("weights must have a positive finite sum".into()));
    }
    let n = scores.len() as f64;
    let (scale, sentinel) = if append_one {
        (n / (n + 1.0), Some((1.0, 1.0 / (n + 1.0))))
    } else {
        (1.0, None)
    };
    let pairs = scores
        .iter()
        .zip(&weights)
        .map(|(&s, &w)| (s, scale * w / total))
        .chain(sentinel);
    let dist = WeightedEmpiricalDistribution::new(pairs)
        .map_err(Failure::classify)?
        .normalize();

    let q = match mode {
        Mode::Exact => {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Failure::Usage(format!("alpha = {alpha} must lie in [0, 1]")));
            }
            dist.quantile(1.0 - alpha).map_err(Failure::classify)?
        }
        Mode::Smoothed => {
            let params = PinballParams::new(alpha, gamma).map_err(Failure::classify)?;
            smoothed_quantile_reference(&dist, &params)
                .map_err(Failure::classify)?
                .value
        }
    };
    println!("{q}");
    Ok(())
}
