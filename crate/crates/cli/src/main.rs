use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stabcal::blockdyn::{Assignment, UnitConfig, UnitModel};
use stabcal::pipeline::{Pipeline, PipelineConfig, PipelineError};
use stabcal::playback::{playback, PlaybackOptions, Trajectory};

const EXIT_NEEDS_CALIBRATION: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "stabcal", version)]
#[command(about = "Calibrate generator stability-model parameters from event playback")]
struct Cli {
    /// Pipeline configuration (JSON)
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Output directory
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,

    /// Seed for sampling, splitting and training
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Replay the event through the current model and score the fit
    Validate,
    /// Rank candidate parameters by trajectory sensitivity
    Sensitivity,
    /// Simulate the training dataset
    Generate,
    /// Train the CNN (and the dense baseline with --baseline)
    Train {
        #[arg(long)]
        baseline: bool,
    },
    /// Estimate parameters from the event and re-validate
    Predict {
        #[arg(long)]
        baseline: bool,
    },
    /// Write summary.md from the artifacts in the output directory
    Report,
    /// Run every stage in order
    Pipeline {
        #[arg(long)]
        baseline: bool,
    },
    /// Write a synthetic event: a voltage step replayed through the model
    Simulate {
        /// Destination CSV
        #[arg(long)]
        output: PathBuf,
        /// Parameter values, NAME=VALUE
        #[arg(long = "set", value_parser = parse_assignment)]
        set: Vec<(String, f64)>,
        /// Relative voltage step
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        /// Step time (s)
        #[arg(long, default_value_t = 1.0)]
        at: f64,
        /// Record length (s)
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        /// Sample rate (Hz)
        #[arg(long, default_value_t = 30.0)]
        rate: f64,
    },
}

fn parse_assignment(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got \"{s}\""))?;
    let v: f64 = v.trim().parse().map_err(|_| format!("not a number: \"{v}\""))?;
    Ok((k.trim().to_string(), v))
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_path(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Command::Train { baseline: true } | Command::Predict { baseline: true } | Command::Pipeline { baseline: true } =
        cli.command
    {
        cfg.baseline = true;
    }
    Ok(cfg)
}

fn simulate(cfg: &PipelineConfig, cmd: &Command) -> Result<(), Failure> {
    let Command::Simulate { output, set, step, at, duration, rate } = cmd else {
        unreachable!()
    };
    let mut unit = match &cfg.model {
        Some(p) => UnitConfig::from_path(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => UnitConfig::default(),
    };
    for (k, v) in &cfg.overrides {
        unit.params.set_value(k, *v).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let model = UnitModel::<f64>::from_config(&unit).map_err(|e| Failure::Usage(e.to_string()))?;
    let assignment: Assignment<f64> = set.iter().cloned().collect();
    let runtime = |e: &dyn std::fmt::Display| Failure::Runtime(e.to_string());
    let event = Trajectory::voltage_step(*duration, *rate, *at, 1.0, *step).map_err(|e| Failure::Usage(e.to_string()))?;
    let sim = playback(&model, &assignment, &event, &PlaybackOptions::default()).map_err(|e| runtime(&e))?;
    sim.save_csv(output).map_err(|e| runtime(&e))?;
    println!("wrote {} samples to {}", sim.len(), output.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    let cfg = load_config(cli)?;
    if let Command::Simulate { .. } = cli.command {
        simulate(&cfg, &cli.command)?;
        return Ok(0);
    }
    let workers = cfg.workers;
    if workers > 0 {
        // caps every parallel section, including ones outside explicit pools
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
    if let Command::Report = cli.command {
        let pipe = Pipeline { config: cfg };
        pipe.report()?;
        println!("wrote {}", pipe.out().join(stabcal::pipeline::SUMMARY).display());
        return Ok(0);
    }
    let pipe = Pipeline::new(cfg)?;
    match &cli.command {
        Command::Validate => {
            let v = pipe.validate()?;
            println!(
                "mismatch: P {:.4}, Q {:.4}, combined {:.4} (threshold {})",
                v.score.nrmse_p, v.score.nrmse_q, v.score.combined, v.threshold
            );
            if v.needs_calibration {
                println!("verdict: calibration needed");
                return Ok(EXIT_NEEDS_CALIBRATION);
            }
            println!("verdict: no calibration needed");
        }
        Command::Sensitivity => {
            let r = pipe.sensitivity()?;
            for p in &r.results {
                println!("{:>8}  S = {:.6}", p.name, p.s);
            }
            println!("selected: {}", r.selected.join(", "));
        }
        Command::Generate => {
            let ds = pipe.generate()?;
            println!("generated {} samples of {} parameters", ds.n(), ds.k());
        }
        Command::Train { .. } => {
            let out = pipe.train()?;
            for (label, r) in [("CNN", Some(&out.cnn)), ("MLP", out.mlp.as_ref())] {
                if let Some(r) = r {
                    println!(
                        "{label}: best epoch {} of {}, validation loss {:.5}",
                        r.best_epoch, r.epochs_run, r.best_val_loss
                    );
                }
            }
        }
        Command::Predict { .. } | Command::Pipeline { .. } => {
            let report = if let Command::Pipeline { .. } = cli.command {
                pipe.run()?
            } else {
                pipe.predict()?
            };
            for row in &report.parameters {
                println!("{:>8}  {:.4} -> {:.4}", row.name, row.original, row.cnn);
            }
            println!("mismatch before: {:.4}", report.pre.combined);
            match report.post {
                Some(p) => println!("mismatch after:  {:.4}", p.combined),
                None => println!("re-validation failed: {}", report.post_error.unwrap_or_default()),
            }
        }
        Command::Report | Command::Simulate { .. } => unreachable!(),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
