use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use gfnrom_cli::config::{load_config, parse_override, Profile, RunConfig};
use serde_json::Value;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_ERROR: u8 = 1;
const EXIT_BOUND_VIOLATED: u8 = 3;

#[derive(Parser)]
#[command(name = "gfnrom", version, about = "GFN weight transfer and multifidelity reduced-order models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Default set: desk (500 epochs, 30x30 base grid) or paper (5000 epochs, 50x50).
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    /// Override a config value, e.g. `--set train.lr=1e-4`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed; falls back to GFNROM_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    family: Option<String>,
    /// fixed, adaptive or precomputed_adaptive.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// adam or sgd.
    #[arg(long, global = true)]
    optimizer: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the mesh hierarchy and snapshot dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Mesh id to evaluate on; defaults to the config's eval_mesh.
        #[arg(long)]
        eval_mesh: Option<String>,
        /// Add the POD projection baseline.
        #[arg(long)]
        with_pod: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the error bounds from the checkpoint mesh to another mesh.
    Bounds {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Target mesh id; defaults to the config's bounds_mesh.
        #[arg(long)]
        mesh: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize every metrics.json under a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// gen, train, eval, bounds and report in one go.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
    },
}

enum Outcome {
    Done,
    BoundViolated(String),
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut overrides: Vec<Value> = c.overrides.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
    let mut push = |key: &str, v: Value| {
        let mut o = Value::Object(Default::default());
        let mut slot = &mut o;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .unwrap()
                .entry(part)
                .or_insert_with(|| Value::Object(Default::default()));
        }
        *slot = v;
        overrides.push(o);
    };
    if let Some(s) = c.seed {
        push("seed", s.into());
    }
    if let Some(e) = c.epochs {
        push("train.epochs", e.into());
    }
    if let Some(f) = &c.family {
        push("family", f.clone().into());
    }
    if let Some(m) = &c.mode {
        push("train.mode", m.clone().into());
    }
    if let Some(o) = &c.optimizer {
        push("train.optimizer", o.clone().into());
    }
    load_config(c.config.as_deref(), c.profile, &overrides)
}

fn bound_outcome(report: &gfnrom::bounds::BoundReport) -> Outcome {
    if report.pass() {
        return Outcome::Done;
    }
    let failed: Vec<String> = report
        .checks()
        .iter()
        .filter(|c| !c.pass)
        .map(|c| format!("{} ({} violations)", c.bound, c.violations))
        .collect();
    Outcome::BoundViolated(failed.join(", "))
}

fn run(cli: Cli) -> Result<Outcome> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Gen { out } => {
            gfnrom_cli::run_gen(&cfg, &out)?;
        }
        Command::Train { data, out } => {
            let s = gfnrom_cli::run_train(&cfg, &data, &out)?;
            log::info!("trained on {:?}: final loss {:?}", s.train_meshes, s.final_loss);
        }
        Command::Eval {
            checkpoint,
            data,
            eval_mesh,
            with_pod,
            out,
        } => {
            let mesh = eval_mesh.unwrap_or_else(|| cfg.eval_mesh.clone());
            let m = gfnrom_cli::run_eval(&cfg, &checkpoint, &data, &mesh, with_pod, &out)?;
            println!("mean relative error on {}: {:.4}%", m.eval_mesh, m.mean_relative_error);
            if let Some(p) = &m.pod {
                println!("POD rank {}: {:.4}%", p.rank, p.mean_relative_error);
            }
        }
        Command::Bounds {
            checkpoint,
            data,
            mesh,
            out,
        } => {
            let mesh = mesh.unwrap_or_else(|| cfg.bounds_mesh.clone());
            let report = gfnrom_cli::run_bounds(&checkpoint, &data, &mesh, &out)?;
            return Ok(bound_outcome(&report));
        }
        Command::Report { run, out } => {
            let out = out.unwrap_or_else(|| run.join("report"));
            gfnrom_cli::report::run_report(&run, &out)?;
        }
        Command::Pipeline { out } => {
            let report = gfnrom_cli::run_pipeline(&cfg, &out)?;
            return Ok(bound_outcome(&report));
        }
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::BoundViolated(what)) => {
            eprintln!("error: bound violated: {what}");
            ExitCode::from(EXIT_BOUND_VIOLATED)
        }
        Err(e) => {
            let msg = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
