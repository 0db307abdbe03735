use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fbmebe_core::env::{task_grid, TaskSpec};
use fbmebe_core::eval::{self, EVAL_FILE};
use fbmebe_core::oracle::{run_oracle_suite, OracleSuiteConfig};
use fbmebe_core::trainer::{self, CHECKPOINT_DIR};
use fbmebe_core::{Error, Result, RunConfig, Trainer};

/// Online forward-backward training with maximum-entropy behavior
/// exploration on a 2-D point-mass.
#[derive(Parser, Debug)]
#[command(name = "fbmebe", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a run. Any config key can be overridden with `--key value`
    /// after the named options, e.g. `--mode FB --seed 1 --steps 0`.
    Train {
        /// Key-value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory for the checkpoint, metrics and config.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Continue the run in `--out` from its checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Zero-shot evaluation of a run on the task grid.
    Eval {
        /// Run directory or checkpoint directory.
        run: PathBuf,
        /// `all`, `boundary`, or `vx,vy;vx,vy;...`.
        #[arg(long, default_value = "all")]
        tasks: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report CSV path; defaults to eval.csv in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Infer a task embedding from a `vel_x,vel_y,reward` CSV.
    Infer {
        /// Run directory or checkpoint directory.
        run: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value = "z.csv")]
        out: PathBuf,
    },
    /// Run the exact finite-MDP checks.
    OracleCheck {
        #[arg(long, default_value_t = 50)]
        mdps: usize,
        #[arg(long, default_value_t = 8)]
        max_states: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb every successor measure; the suite must then fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write plot data for one or more run directories.
    Export {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Print the default configuration file.
    Config,
}

/// `--key value` or `--key=value` pairs. `steps` is accepted for
/// `total_steps`.
fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Usage(format!("expected --key, found {a:?}")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::Usage(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        let key = key.replace('-', "_");
        let key = if key == "steps" { "total_steps".to_string() } else { key };
        out.push((key, value));
    }
    Ok(out)
}

fn checkpoint_dir(run: &Path) -> PathBuf {
    if run.join(CHECKPOINT_DIR).is_dir() {
        run.join(CHECKPOINT_DIR)
    } else {
        run.to_path_buf()
    }
}

fn parse_tasks(spec: &str) -> Result<Vec<TaskSpec>> {
    match spec {
        "all" => Ok(task_grid()),
        "boundary" => Ok(task_grid().into_iter().filter(|t| (t.speed() - 1.6).abs() < 1e-3).collect()),
        list => list
            .split(';')
            .map(|pair| {
                let v: Vec<f32> = pair
                    .split(',')
                    .map(|x| x.trim().parse::<f32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Usage(format!("bad task {pair:?}; expected vx,vy")))?;
                match v[..] {
                    [x, y] if x.is_finite() && y.is_finite() => Ok(TaskSpec::new([x, y])),
                    _ => Err(Error::Usage(format!("bad task {pair:?}; expected vx,vy"))),
                }
            })
            .collect(),
    }
}

fn cmd_train(config: Option<PathBuf>, out: PathBuf, resume: bool, overrides: &[String]) -> Result<()> {
    let pairs = parse_overrides(overrides)?;
    if resume {
        if config.is_some() || !pairs.is_empty() {
            return Err(Error::Usage("--resume takes the config stored in the run".into()));
        }
        let art = trainer::resume(&out)?;
        println!("resumed {}; metrics {}", art.run_dir.display(), art.metrics.display());
        return Ok(());
    }
    let mut cfg = match &config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    log::info!("training {} seed {} for {} steps into {}", cfg.mode, cfg.seed, cfg.total_steps, out.display());
    let art = trainer::train(&cfg, &out)?;
    match art.entropy_trace.last() {
        Some((step, h)) => println!("{} seed {}: {step} steps, behavior entropy {h:.4}", cfg.mode, cfg.seed),
        None => println!("{} seed {}: initial checkpoint only", cfg.mode, cfg.seed),
    }
    println!("checkpoint {}\nmetrics {}", art.checkpoint.display(), art.metrics.display());
    Ok(())
}

fn cmd_eval(run: PathBuf, tasks: &str, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let tasks = parse_tasks(tasks)?;
    let ckpt = checkpoint_dir(&run);
    let trainer = Trainer::load(&ckpt)?;
    let report = eval::evaluate_trainer(&trainer, &tasks, seed)?;
    println!("{:>16} {:>10} {:>10}", "task", "return", "std");
    for t in &report.tasks {
        println!("{:>16} {:>10.2} {:>10.2}", t.task.label(), t.mean_return, t.std_return);
    }
    println!(
        "behavior entropy {:.4}, mean action-rate penalty {:.5}",
        report.behavior_entropy, report.mean_action_rate
    );
    let out = out.unwrap_or_else(|| {
        let base = if ckpt != run { run.clone() } else { ckpt.parent().map(Path::to_path_buf).unwrap_or_default() };
        base.join(EVAL_FILE)
    });
    write_file(&out, &report.to_csv()?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn cmd_infer(run: PathBuf, samples: PathBuf, out: PathBuf) -> Result<()> {
    let (proj, rewards) = eval::read_reward_samples(&samples)?;
    let trainer = Trainer::load(&checkpoint_dir(&run))?;
    let z = eval::infer_from_samples(&trainer.fb, proj.view(), &rewards)?;
    write_file(&out, &eval::z_csv(&z))?;
    println!("z written to {}; norm {:.6}", out.display(), z.norm());
    Ok(())
}

fn cmd_oracle(cfg: OracleSuiteConfig) -> Result<bool> {
    let report = run_oracle_suite(&cfg)?;
    println!("{report}");
    Ok(report.all_passed())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Command::Train { config, out, resume, overrides } => cmd_train(config, out, resume, &overrides)?,
        Command::Eval { run, tasks, seed, out } => cmd_eval(run, &tasks, seed, out)?,
        Command::Infer { run, samples, out } => cmd_infer(run, samples, out)?,
        Command::OracleCheck { mdps, max_states, trials, seed, inject_fault } => {
            let cfg = OracleSuiteConfig {
                mdps,
                max_states,
                perturbations: trials,
                seed,
                inject_fault,
                ..OracleSuiteConfig::default()
            };
            if !cmd_oracle(cfg)? {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Export { runs, out } => {
            for f in eval::export_runs(&runs, &out)? {
                println!("{}", f.display());
            }
        }
        Command::Config => print!("{}", RunConfig::default().dump()),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
