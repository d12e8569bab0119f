use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use qnet_core::atvc::AtvcModel;
use qnet_core::baselines::PolicyKind;
use qnet_core::harness::{self, plot, EvalSettings, RunConfig};
use qnet_core::oracle::{stationary_drop_rate, ChainSpec};
use qnet_core::trainer::{self, TrainOutput, Trainer};
use qnet_core::Error;

#[derive(Parser)]
#[command(name = "qnet", version, about = "Train and evaluate communicating schedulers on a queueing network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the shared policy and write metrics.csv plus checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue the run in this directory from its last checkpoint.
        #[arg(long, value_name = "RUN_DIR")]
        resume: Option<PathBuf>,
    },
    /// Evaluate every configured policy on the configured network.
    Eval(EvalArgs),
    /// Evaluate every policy at each synchronization interval.
    SweepDeltaT(EvalArgs),
    /// Evaluate every policy at each agent count without retraining.
    SweepAgents(EvalArgs),
    /// Probability of sending to the second queue for each observed pair.
    Heatmap(EvalArgs),
    /// Stationary drops per epoch, and per arrival, of one queue fed by a
    /// fixed Poisson stream.
    Oracle {
        #[arg(long)]
        buffer: usize,
        /// Expected arrivals per epoch.
        #[arg(long)]
        arrival_rate: f64,
        /// Expected services per epoch.
        #[arg(long)]
        service_rate: f64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, short, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set env.delta_t=2`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Model file, or a training run directory.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Shorthand for `--set experiment.eval_episodes=N`.
    #[arg(long)]
    episodes: Option<usize>,
    /// Restrict to these policies (repeatable); defaults to experiment.policies.
    #[arg(long, value_parser = parse_policy)]
    policy: Vec<PolicyKind>,
    /// Act with the policy mean instead of sampling.
    #[arg(long)]
    deterministic: bool,
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    PolicyKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = PolicyKind::ALL.iter().map(|p| p.name()).collect();
        format!("unknown policy {s:?}; expected one of {}", names.join(", "))
    })
}

/// A failure together with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config, resume } => train(&config, resume.as_deref()),
        Command::Eval(a) => eval(&a),
        Command::SweepDeltaT(a) => sweep_delta_t(&a),
        Command::SweepAgents(a) => sweep_agents(&a),
        Command::Heatmap(a) => heatmap(&a),
        Command::Oracle {
            buffer,
            arrival_rate,
            service_rate,
        } => oracle(buffer, arrival_rate, service_rate),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(args: &ConfigArgs, extra: &[String]) -> CliResult<RunConfig> {
    let path = args
        .config
        .as_deref()
        .ok_or_else(|| usage("--config <FILE> is required"))?;
    if !path.is_file() {
        return Err(usage(format!("config file {} not found", path.display())));
    }
    let mut sets = args.set.clone();
    sets.extend_from_slice(extra);
    Ok(RunConfig::load(path, &sets)?)
}

fn train(args: &ConfigArgs, resume: Option<&Path>) -> CliResult<()> {
    let (cfg, mut trainer, dir) = match resume {
        Some(dir) => {
            if args.config.is_some() {
                return Err(usage("--resume reads the run's own config.toml; drop --config"));
            }
            if let Some(s) = args.set.iter().find(|s| !s.starts_with("experiment.")) {
                return Err(usage(format!("only experiment.* keys may change on resume, got {s}")));
            }
            let snapshot = dir.join("config.toml");
            if !snapshot.is_file() {
                return Err(usage(format!("{} is not a run directory", dir.display())));
            }
            let cfg = RunConfig::load(&snapshot, &args.set)?;
            let ckpt = dir.join("checkpoints").join("last.ckpt");
            let trainer = Trainer::resume(&ckpt, cfg.env.clone(), cfg.ppo.clone(), cfg.train_seed())?;
            std::fs::write(&snapshot, cfg.to_toml()).map_err(Error::from)?;
            (cfg, trainer, dir.to_path_buf())
        }
        None => {
            let cfg = load_config(args, &[])?;
            let trainer = Trainer::new(cfg.env.clone(), cfg.ppo.clone(), cfg.model_config(), cfg.train_seed())?;
            let dir = harness::create_run_dir(&cfg, "train")?;
            (cfg, trainer, dir)
        }
    };
    println!("run directory: {}", dir.display());
    let out = TrainOutput::in_dir(&dir);
    let x = &cfg.experiment;
    let start = Instant::now();
    let result = trainer::train(&mut trainer, x.iterations, x.checkpoint_every, Some(&out), |m| {
        eprintln!(
            "iter {:>4}  reward {:>8.3}  drop {:.4}  comm {:.3}  {:>6.1}s",
            m.iteration,
            m.mean_reward,
            m.drop_rate,
            m.comm_ratio,
            start.elapsed().as_secs_f64()
        );
    });
    if let Err(e) = result {
        let mut f = Failure::from(e);
        if f.code == 3 {
            f.message = format!("{} (aborted during iteration {})", f.message, trainer.iteration + 1);
        }
        return Err(f);
    }
    let curve = plot::series_from_csv(&out.metrics, "iteration", "mean_reward", None)?;
    plot::line_chart(&dir.join("learning_curve.svg"), "Training reward", "iteration", "mean episode reward", &curve)?;
    Ok(())
}

/// Configuration, model and run directory shared by the evaluation commands.
struct EvalRun {
    cfg: RunConfig,
    model: Option<AtvcModel>,
    policies: Vec<PolicyKind>,
    dir: PathBuf,
}

impl EvalRun {
    fn settings(&self) -> EvalSettings<'_> {
        EvalSettings {
            model: self.model.as_ref(),
            episodes: self.cfg.experiment.eval_episodes,
            seed: self.cfg.eval_seed(),
            deterministic: self.cfg.experiment.deterministic_eval,
        }
    }
}

fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        let in_run = path.join("checkpoints").join("model.ckpt");
        if in_run.is_file() {
            return in_run;
        }
        return path.join("model.ckpt");
    }
    path.to_path_buf()
}

fn prepare(args: &EvalArgs, command: &str) -> CliResult<EvalRun> {
    let mut extra = Vec::new();
    if let Some(n) = args.episodes {
        extra.push(format!("experiment.eval_episodes={n}"));
    }
    if args.deterministic {
        extra.push("experiment.deterministic_eval=true".to_string());
    }
    if !args.policy.is_empty() {
        let names: Vec<String> = args.policy.iter().map(|p| format!("\"{p}\"")).collect();
        extra.push(format!("experiment.policies=[{}]", names.join(",")));
    }
    let cfg = load_config(&args.config, &extra)?;
    let model = match &args.checkpoint {
        Some(p) => {
            let path = resolve_checkpoint(p);
            if !path.is_file() {
                return Err(usage(format!("checkpoint {} not found", path.display())));
            }
            let mut model = AtvcModel::load(&path)?;
            model.config.threshold = cfg.model.threshold;
            Some(model)
        }
        None => None,
    };
    let mut policies = cfg.experiment.policies.clone();
    if model.is_none() {
        let skipped: Vec<String> = policies.iter().filter(|p| p.is_learned()).map(|p| p.to_string()).collect();
        if !skipped.is_empty() {
            eprintln!("no --checkpoint; skipping {}", skipped.join(", "));
        }
        policies.retain(|p| !p.is_learned());
    }
    let dir = harness::create_run_dir(&cfg, command)?;
    if let Some(m) = &model {
        m.save(&dir.join("model.ckpt"))?;
    }
    println!("run directory: {}", dir.display());
    Ok(EvalRun {
        cfg,
        model,
        policies,
        dir,
    })
}

fn emit(dir: &Path, name: &str, header: &str, rows: &[String]) -> CliResult<PathBuf> {
    let path = dir.join(name);
    trainer::write_csv(&path, header, rows)?;
    println!("{header}");
    for r in rows {
        println!("{r}");
    }
    Ok(path)
}

fn eval(args: &EvalArgs) -> CliResult<()> {
    let run = prepare(args, "eval")?;
    let reports = harness::evaluate_policies(&run.cfg.env, &run.policies, run.settings())?;
    let rows: Vec<String> = reports.iter().map(harness::eval_row).collect();
    emit(&run.dir, "eval.csv", harness::EVAL_HEADER, &rows)?;
    Ok(())
}

fn sweep_delta_t(args: &EvalArgs) -> CliResult<()> {
    let run = prepare(args, "sweep-delta-t")?;
    let values = &run.cfg.experiment.delta_t_values;
    let rows = harness::sweep_delta_t(&run.cfg.env, values, &run.policies, run.settings())?;
    let rows: Vec<String> = rows.iter().map(|r| r.csv()).collect();
    let csv = emit(&run.dir, "sweep_delta_t.csv", harness::DELTA_T_HEADER, &rows)?;
    let series = plot::series_from_csv(&csv, "delta_t", "drop_rate", Some("policy"))?;
    plot::line_chart(&run.dir.join("sweep_delta_t.svg"), "Drop rate vs synchronization interval", "delta_t", "drop rate", &series)?;
    Ok(())
}

fn sweep_agents(args: &EvalArgs) -> CliResult<()> {
    let run = prepare(args, "sweep-agents")?;
    let counts = &run.cfg.experiment.agent_counts;
    let rows = harness::sweep_agents(&run.cfg.env, counts, &run.policies, run.settings())?;
    let rows: Vec<String> = rows.iter().map(|r| r.csv()).collect();
    let csv = emit(&run.dir, "sweep_agents.csv", harness::AGENTS_HEADER, &rows)?;
    let series = plot::series_from_csv(&csv, "agents", "drop_rate", Some("policy"))?;
    plot::line_chart(&run.dir.join("sweep_agents.svg"), "Drop rate vs number of agents", "agents", "drop rate", &series)?;
    Ok(())
}

fn heatmap(args: &EvalArgs) -> CliResult<()> {
    if args.checkpoint.is_none() {
        return Err(usage("heatmap needs --checkpoint"));
    }
    let run = prepare(args, "heatmap")?;
    let model = run.model.as_ref().expect("checkpoint loaded");
    let grid = harness::heatmap(model, &run.cfg.env, run.cfg.experiment.heatmap_samples, run.cfg.heatmap_seed())?;
    let mut rows = Vec::new();
    for (b1, row) in grid.iter().enumerate() {
        for (b2, p) in row.iter().enumerate() {
            rows.push(format!("{b1},{b2},{p}"));
        }
    }
    let csv = emit(&run.dir, "heatmap.csv", harness::HEATMAP_HEADER, &rows)?;
    let grid = plot::grid_from_csv(&csv)?;
    plot::heatmap(&run.dir.join("heatmap.svg"), "P(send to queue 2)", "b2", "b1", &grid)?;
    Ok(())
}

fn oracle(buffer: usize, arrival_rate: f64, service_rate: f64) -> CliResult<()> {
    let spec = ChainSpec::new(buffer, arrival_rate, service_rate)?;
    let per_epoch = stationary_drop_rate(&spec)?;
    let fraction = if arrival_rate > 0.0 { per_epoch / arrival_rate } else { 0.0 };
    println!("drops_per_epoch,drop_rate");
    println!("{per_epoch},{fraction}");
    Ok(())
}
