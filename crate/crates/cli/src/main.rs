use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use cktwam_core::ckt::{CktModule, Grouping};
use cktwam_core::harness::{
    budget_table, checkpoint, eval_invariants, gradcheck, route_stats, Experiment, RunConfig, REFERENCE_SIZES,
};
use cktwam_core::injection::Observation;
use cktwam_core::tensor::{Faults, Precision};
use cktwam_core::training::{StepMetrics, TrainObserver};
use cktwam_core::CktError;
use clap::{Args, Parser, Subcommand};

const EXIT_VALIDATION: u8 = 1;
const EXIT_CHECK: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "cktwam",
    version,
    about = "Train and check a context transfer module between frozen world-action models"
)]
struct Cli {
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted-path config override, e.g. `--set ckt.k=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the transfer module on the synthetic staged task.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Overrides training.steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Overrides output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the trainable parameter budget.
    ReportParams {
        #[command(flatten)]
        cfg: ConfigArg,
        /// `paper-table` or `structural`.
        #[arg(long, default_value = "paper-table")]
        grouping: String,
        #[arg(long)]
        json: bool,
    },
    /// Run the structural invariance checks.
    EvalInvariants {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Per-stage routing probabilities of a checkpoint.
    RouteStats {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config to check the checkpoint against; defaults to its own echo.
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of the training gradient.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Entries sampled per tensor.
        #[arg(long, default_value_t = 32, conflicts_with = "all")]
        entries: usize,
        /// Check every entry of every tensor.
        #[arg(long)]
        all: bool,
        /// Deliberately break a backward rule (`gelu`).
        #[arg(long)]
        inject_fault: Option<String>,
    },
}

/// Reported failure with its exit code.
struct Failure(u8, anyhow::Error);

impl From<CktError> for Failure {
    fn from(e: CktError) -> Self {
        let code = match e {
            CktError::Numeric(_) => EXIT_NUMERIC,
            CktError::Integrity(_) => EXIT_CHECK,
            _ => EXIT_VALIDATION,
        };
        Failure(code, e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<CktError>() {
            Ok(c) => c.into(),
            Err(e) => Failure(EXIT_VALIDATION, e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure(EXIT_VALIDATION, e.into())
    }
}

fn load(cli: &Cli, path: &Path) -> Result<RunConfig, Failure> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    Ok(RunConfig::load(path, &overrides)?)
}

struct RunWriter {
    dir: PathBuf,
    config: RunConfig,
    metrics: BufWriter<File>,
}

impl RunWriter {
    fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("ckpt_{step:06}.ckpt"))
    }
}

impl TrainObserver for RunWriter {
    fn on_metrics(&mut self, m: &StepMetrics) -> cktwam_core::Result<()> {
        serde_json::to_writer(&mut self.metrics, m)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    fn on_checkpoint(&mut self, step: u64, ckt: &CktModule) -> cktwam_core::Result<()> {
        let path = self.checkpoint_path(step);
        checkpoint::save(&path, &self.config, step, ckt.params())?;
        fs::copy(&path, self.dir.join("latest.ckpt"))?;
        Ok(())
    }
}

fn train(cli: &Cli, cfg: &Path, steps: Option<u64>, out: Option<&Path>) -> Result<(), Failure> {
    let mut config = load(cli, cfg)?;
    if let Some(s) = steps {
        config.training.steps = s;
    }
    if let Some(o) = out {
        config.output_dir = o.display().to_string();
    }
    let dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&config).map_err(CktError::from)? + "\n",
    )?;

    let started = Instant::now();
    let mut exp = Experiment::build(config.clone())?;
    let mut writer = RunWriter {
        metrics: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
        dir: dir.clone(),
        config,
    };
    let result = exp.train(&mut writer);
    writer.metrics.flush()?;
    let report = result?;
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&report).map_err(CktError::from)? + "\n",
    )?;
    let last = report.metrics.last().unwrap_or(&report.initial);
    println!(
        "trained {} steps in {:.1}s: L_total {:.4} -> {:.4}, L_bal {:.4}",
        report.steps_run,
        started.elapsed().as_secs_f64(),
        report.initial.l_total,
        last.l_total,
        last.l_bal
    );
    println!(
        "teacher forwards {}, cache hits {}, misses {}, backbone hash {:016x}",
        report.teacher_forwards, report.cache_hits, report.cache_misses, report.frozen_hash_end
    );
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn report_params(cli: &Cli, cfg: &Path, grouping: &str, json: bool) -> Result<(), Failure> {
    let config = load(cli, cfg)?;
    let g = Grouping::parse(grouping)
        .ok_or_else(|| CktError::Config(format!("unknown grouping '{grouping}' (paper-table or structural)")))?;
    let (budget, text) = budget_table(&config.ckt, g);
    if json {
        let overheads: Vec<_> = REFERENCE_SIZES
            .iter()
            .map(|(label, size)| serde_json::json!({"reference": label, "size": size, "percent": budget.overhead_pct(*size)}))
            .collect();
        let v = serde_json::json!({"budget": budget, "overheads": overheads});
        println!("{}", serde_json::to_string_pretty(&v).map_err(CktError::from)?);
    } else {
        print!("{text}");
    }
    Ok(())
}

fn eval(cli: &Cli, cfg: &Path) -> Result<(), Failure> {
    let config = load(cli, cfg)?;
    let report = eval_invariants(&config)?;
    print!("{}", report.to_text());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure(EXIT_CHECK, anyhow::anyhow!("invariance checks failed")))
    }
}

fn stats(cli: &Cli, ckpt: &Path, cfg: Option<&Path>, csv: Option<&Path>) -> Result<(), Failure> {
    let bytes = fs::read(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let (header, _) = checkpoint::decode(&bytes)?;
    let config = match cfg {
        Some(p) => load(cli, p)?,
        None => header.config,
    };
    let mut exp = Experiment::build(config.clone())?;
    checkpoint::load(ckpt, &config, exp.ckt.params_mut())?;
    let obs: Vec<&Observation> = exp.task.samples.iter().map(|s| &s.observation).collect();
    let st = route_stats(&exp.teacher, &exp.ckt, &obs, Precision::F64)?;
    print!("{}", st.to_text());
    println!("distinct argmax adapters across stages: {}", st.distinct_argmax());
    if let Some(p) = csv {
        fs::write(p, st.to_csv())?;
    }
    Ok(())
}

fn check_grads(cli: &Cli, cfg: &Path, entries: usize, all: bool, fault: Option<&str>) -> Result<(), Failure> {
    let config = load(cli, cfg)?;
    let faults = match fault {
        None => Faults::default(),
        Some("gelu") => Faults {
            wrong_gelu_backward: true,
        },
        Some(other) => return Err(CktError::Config(format!("unknown fault '{other}' (expected gelu)")).into()),
    };
    println!("gradcheck at f64 with dropout forced to 0");
    let r = gradcheck(&config, faults, (!all).then_some(entries))?;
    print!("{}", r.to_text());
    if r.passed {
        Ok(())
    } else {
        Err(Failure(EXIT_CHECK, anyhow::anyhow!("gradient check failed")))
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train { cfg, steps, out } => train(cli, &cfg.config, *steps, out.as_deref()),
        Command::ReportParams { cfg, grouping, json } => report_params(cli, &cfg.config, grouping, *json),
        Command::EvalInvariants { cfg } => eval(cli, &cfg.config),
        Command::RouteStats {
            checkpoint,
            config,
            csv,
        } => stats(cli, checkpoint, config.as_deref(), csv.as_deref()),
        Command::Gradcheck {
            cfg,
            entries,
            all,
            inject_fault,
        } => check_grads(cli, &cfg.config, *entries, *all, inject_fault.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
