use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rdpc::config::ExperimentConfig;
use rdpc::experiment::{
    compare, config_from_run_dir, format_table, read_manifest, run_experiment, thread_count, write_artifacts,
};
use rdpc::hankel::{build_hankel, is_persistently_exciting, Dataset};
use rdpc::linalg::numerical_rank;
use rdpc::sim::{initial_qp, ControllerKind};
use rdpc::Result;

#[derive(Parser)]
#[command(
    name = "rdpc",
    version,
    about = "Robust bi-level data-driven predictive control experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a (Monte-Carlo) closed-loop experiment and write its artifacts.
    Run {
        /// Built-in config name or path to a TOML file.
        #[arg(long, conflicts_with = "from_manifest")]
        config: Option<String>,
        /// Re-run the experiment recorded in this run directory.
        #[arg(long)]
        from_manifest: Option<PathBuf>,
        /// Override a config value, e.g. `--set scenario.noise_std=0.1`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Number of Monte-Carlo runs.
        #[arg(long)]
        mc: Option<usize>,
        #[arg(long, value_enum)]
        controller: Option<Controller>,
        /// Output directory; defaults to `output.dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit 0 even if some runs aborted.
        #[arg(long)]
        allow_partial: bool,
    },
    /// Compare run directories that share a scenario.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Write the first-step upper-level QP of a bi-level controller.
    DumpQp {
        #[arg(long)]
        config: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report Hankel ranks of a recorded dataset.
    CheckPe {
        /// Dataset CSV with columns `t,u_*,w_*,y_*`.
        dataset: PathBuf,
        /// Hankel depth.
        #[arg(long)]
        order: usize,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Controller {
    BilevelRobust,
    BilevelNonrobust,
    SingleLevel,
    RlsMpc,
}

impl Controller {
    fn kind(self) -> ControllerKind {
        match self {
            Controller::BilevelRobust => ControllerKind::BilevelRobust,
            Controller::BilevelNonrobust => ControllerKind::BilevelNonrobust,
            Controller::SingleLevel => ControllerKind::SingleLevel,
            Controller::RlsMpc => ControllerKind::RlsMpc,
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run(
    config: Option<String>,
    from_manifest: Option<PathBuf>,
    mut overrides: Vec<String>,
    mc: Option<usize>,
    controller: Option<Controller>,
    out: Option<PathBuf>,
    allow_partial: bool,
) -> Result<ExitCode> {
    if let Some(n) = mc {
        overrides.push(format!("scenario.mc_runs={n}"));
    }
    if let Some(c) = controller {
        overrides.push(format!("controller.kind={}", c.kind().name()));
    }
    let cfg = match (&config, &from_manifest) {
        (Some(c), None) => ExperimentConfig::load(c, &overrides)?,
        (None, Some(dir)) => {
            let base = config_from_run_dir(dir)?;
            ExperimentConfig::from_toml(&base.to_toml(), &overrides)?
        }
        _ => {
            return Err(rdpc::Error::config(
                "run",
                "give exactly one of --config or --from-manifest",
            ));
        }
    };
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    let result = run_experiment(&cfg, thread_count()?)?;
    let manifest = write_artifacts(&cfg, &result, &dir)?;
    println!(
        "{}",
        format_table(&[rdpc::experiment::ComparisonRow {
            label: manifest.controller.clone(),
            metrics: result.metrics.clone(),
        }])
    );
    println!("artifacts in {}", dir.display());
    for a in &manifest.aborted {
        eprintln!("seed {} aborted: {}", a.seed, a.reason);
    }
    if !manifest.aborted.is_empty() && !allow_partial {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn check_pe(path: &Path, order: usize) -> Result<ExitCode> {
    let ds = Dataset::read_csv(std::fs::File::open(path)?, None)?;
    let inputs = ds.inputs();
    let u_rank = numerical_rank(&build_hankel(&inputs, order)?);
    let joint: Vec<_> = ds
        .samples()
        .map(|s| nalgebra::DVector::from_iterator(ds.n_u() + ds.n_w(), s.u.iter().chain(s.w.iter()).cloned()))
        .collect();
    let joint_rank = numerical_rank(&build_hankel(&joint, order)?);
    let pe = is_persistently_exciting(&inputs, order);
    println!("samples {}", ds.len());
    println!("input Hankel rank {u_rank} of {}", order * ds.n_u());
    println!(
        "input+disturbance Hankel rank {joint_rank} of {}",
        order * (ds.n_u() + ds.n_w())
    );
    println!(
        "persistently exciting of order {order}: {}",
        if pe { "yes" } else { "no" }
    );
    Ok(if pe { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            from_manifest,
            overrides,
            mc,
            controller,
            out,
            allow_partial,
        } => run(config, from_manifest, overrides, mc, controller, out, allow_partial),
        Command::Compare { dirs } => {
            let rows = compare(&dirs)?;
            print!("{}", format_table(&rows));
            let m = read_manifest(&dirs[0])?;
            println!("scenario {} over {} runs", &m.scenario_hash[..12], m.seeds.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::DumpQp { config, overrides, out } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let qp = initial_qp(&cfg.scenario(cfg.scenario.seed)?, &cfg.controller())?;
            qp.write_dump(std::fs::File::create(&out)?)?;
            println!(
                "wrote {} ({} variables, {} inequalities, {} equalities)",
                out.display(),
                qp.n,
                qp.a.len(),
                qp.e.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::CheckPe { dataset, order } => check_pe(&dataset, order),
    }
}
