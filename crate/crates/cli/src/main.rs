use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use pdlearn::channel::SystemConfig;
use pdlearn::experiments::{rerun_from_manifest, run_experiment, ExperimentOutput, ExperimentSpec, Manifest, Scale, Scenario};
use pdlearn::Error;

#[derive(Parser)]
#[command(name = "pdlearn", version, about = "Primal-dual learning experiments for URLLC resource allocation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// CCDFs of the bandwidth error and QoS violation of the single-user learner.
    BandwidthCcdf(RunArgs),
    /// Total bandwidth against the number of users.
    JointCurve(RunArgs),
    /// Slots to convergence with and without pre-training.
    Convergence(RunArgs),
    /// Learned average-power policy against water-filling.
    WaterFilling(RunArgs),
    /// Tiny versions of all four experiments.
    Smoke {
        #[arg(long, default_value = "results/smoke")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Re-run the experiment recorded in a manifest.
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Args)]
struct RunArgs {
    /// TOML file overriding system constants.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON experiment spec; replaces all scale defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "desk")]
    scale: ScaleArg,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 1 if any check fails.
    #[arg(long)]
    check: bool,
}

enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::TomlDe(_) | Error::InvalidArgument(_) => Failure::Config(e.into()),
            other => Failure::Run(other.into()),
        }
    }
}

fn build_spec(scenario: Scenario, args: &RunArgs) -> Result<ExperimentSpec, Failure> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::Config)?;
            let spec: ExperimentSpec = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(Failure::Config)?;
            if spec.scenario != scenario {
                return Err(Failure::Config(anyhow::anyhow!(
                    "spec is for {}, not {}",
                    spec.scenario.name(),
                    scenario.name()
                )));
            }
            spec
        }
        None => {
            let scale = match args.scale {
                ScaleArg::Desk => Scale::Desk,
                ScaleArg::Paper => Scale::Paper,
            };
            ExperimentSpec::new(scenario, scale)
        }
    };
    if let Some(path) = &args.config {
        spec.config = SystemConfig::from_toml_file(path)
            .with_context(|| format!("loading {}", path.display()))
            .map_err(Failure::Config)?;
    }
    if let Some(t) = args.trials {
        spec.trials = t;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(o) = &args.out {
        spec.output_dir = o.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn print_output(out: &ExperimentOutput) -> bool {
    let m = &out.manifest;
    println!(
        "{} ({} trials, seed {}) -> {} [{:.1} s]",
        m.spec.scenario.name(),
        m.spec.trials,
        m.spec.seed,
        m.spec.output_dir.display(),
        m.wall_time_s
    );
    for c in out.report.checks() {
        println!("  [{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    out.report.passed()
}

fn run(cli: Cli) -> Result<bool, Failure> {
    let (scenario, args) = match &cli.command {
        Command::BandwidthCcdf(a) => (Scenario::BandwidthCcdf, a),
        Command::JointCurve(a) => (Scenario::JointBandwidthCurve, a),
        Command::Convergence(a) => (Scenario::ConvergenceTable, a),
        Command::WaterFilling(a) => (Scenario::WaterFillingCheck, a),
        Command::Smoke { out, seed } => {
            let mut ok = true;
            for sc in Scenario::ALL {
                let mut spec = ExperimentSpec::smoke(sc);
                spec.seed = *seed;
                spec.output_dir = out.join(sc.name());
                let res = run_experiment(&spec)?;
                println!("{}: {} files written", sc.name(), res.manifest.files.len());
                ok &= !res.manifest.files.is_empty();
            }
            return Ok(ok);
        }
        Command::Rerun { manifest, out } => {
            let m = Manifest::load(manifest)?;
            let res = rerun_from_manifest(&m, out)?;
            let identical = m
                .files
                .iter()
                .zip(&res.manifest.files)
                .all(|(a, b)| a.file == b.file && a.sha256 == b.sha256);
            print_output(&res);
            println!("  outputs {} the recorded hashes", if identical { "match" } else { "differ from" });
            return Ok(identical);
        }
    };
    let spec = build_spec(scenario, args)?;
    let out = run_experiment(&spec)?;
    let passed = print_output(&out);
    Ok(passed || !args.check)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
