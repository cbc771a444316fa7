use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nonstat_opt::base::ProblemConstants;
use nonstat_opt::environment::ObjectiveSequence;
use nonstat_opt::harness::{self, ExperimentConfig, Stack, SweepSpec};
use nonstat_opt::{Error, Result};

#[derive(Parser)]
#[command(name = "nonstat", version, about = "Non-stationary bandit optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Single seed (overrides the config's seed list).
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Half-open seed range `N..M`.
    #[arg(long, value_parser = parse_seed_range)]
    seeds: Option<SeedRange>,
    #[arg(long)]
    kappa_scale: Option<f64>,
    /// base, master-base or master-adapter
    #[arg(long)]
    stack: Option<Stack>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config and write trace, regret, audit and sequence CSVs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Re-audit a trace CSV against a sequence CSV.
    Audit {
        /// Experiment config supplying the stack's ρ and λ.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        /// Where to write the audit CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        kappa_scale: Option<f64>,
        #[arg(long)]
        stack: Option<Stack>,
    },
    /// Run a (T, V_T) grid and write per-run rows, cell means and slopes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the derived base-learner constants.
    Params {
        /// Read the constants from an experiment config instead of flags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2.0)]
        smoothness: f64,
        #[arg(long, default_value_t = 0.5)]
        strong_concavity: f64,
        #[arg(long, default_value_t = 1)]
        dimension: usize,
        #[arg(long, default_value_t = 4096)]
        horizon: u64,
        #[arg(long, default_value_t = 2.0)]
        diameter: f64,
        #[arg(long, default_value_t = 0.5)]
        interior_margin: f64,
        #[arg(long)]
        kappa_scale: Option<f64>,
    },
}

#[derive(Clone)]
struct SeedRange(Vec<u64>);

fn parse_seed_range(s: &str) -> std::result::Result<SeedRange, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected N..M, got {s:?}"))?;
    let a: u64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if b <= a {
        return Err(format!("empty seed range {s}"));
    }
    Ok(SeedRange((a..b).collect()))
}

fn apply(config: &mut ExperimentConfig, o: &Overrides) {
    if let Some(seed) = o.seed {
        config.seeds = vec![seed];
    }
    if let Some(seeds) = &o.seeds {
        config.seeds = seeds.0.clone();
    }
    if let Some(k) = o.kappa_scale {
        config.algorithm.kappa_scale = k;
    }
    if let Some(s) = o.stack {
        config.algorithm.stack = s;
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out, overrides } => {
            let mut config = ExperimentConfig::from_file(&config)?;
            apply(&mut config, &overrides);
            let out = config.output_dir.clone().filter(|_| out.as_os_str() == "out").unwrap_or(out);
            let runs = harness::run_experiment(&config, &out)?;
            println!("config_hash {}", config.config_hash());
            println!("{:>8} {:>16} {:>9} {:>11}", "seed", "dynamic_regret", "restarts", "violations");
            for r in &runs {
                println!(
                    "{:>8} {:>16.6} {:>9} {:>11}",
                    r.seed, r.final_dynamic_regret, r.restart_count, r.audit_violations
                );
            }
            println!("wrote {} files to {}", runs.len() * 5, out.display());
        }
        Command::Audit { config, trace, sequence, out, kappa_scale, stack } => {
            let mut config = ExperimentConfig::from_file(&config)?;
            if let Some(k) = kappa_scale {
                config.algorithm.kappa_scale = k;
            }
            if let Some(s) = stack {
                config.algorithm.stack = s;
            }
            let seq = ObjectiveSequence::read_csv(&sequence)?;
            config.environment.horizon = seq.horizon();
            let run_trace = harness::read_trace_csv(&trace)?;
            let (rho, lambda) = config.radius()?;
            let report = harness::audit_ucb_properties(&run_trace, &seq, &rho, lambda)?;
            println!(
                "in scope {} of {}; property 1 violations {} ({:.4}); property 2 violations {} ({:.4})",
                report.in_scope,
                report.rows.len(),
                report.property1_violations,
                report.property1_rate(),
                report.property2_violations,
                report.property2_rate()
            );
            if let Some(path) = out {
                let hash = harness::read_config_hash(&trace).unwrap_or_else(|_| config.config_hash());
                harness::write_audit_csv(&path, &hash, &report)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Sweep { config, out, overrides } => {
            let mut spec = SweepSpec::from_file(&config)?;
            apply(&mut spec.base, &overrides);
            if let Some(seed) = overrides.seed {
                spec.seeds = vec![seed];
            }
            if let Some(seeds) = overrides.seeds {
                spec.seeds = seeds.0;
            }
            let summary = harness::sweep(&spec);
            let files = harness::write_sweep(&summary, &out, &spec.config_hash())?;
            let failures = summary.rows.iter().filter(|r| !r.error.is_empty()).count();
            for s in &summary.slopes {
                let se = s.stderr.map_or("-".to_string(), |e| format!("{e:.3}"));
                println!("V_T {:>8}: slope {:.3} (se {se}, {} points)", s.budget, s.slope, s.points);
            }
            println!("{} runs, {} failed", summary.rows.len(), failures);
            println!("wrote {}", files.summary.display());
        }
        Command::Params {
            config,
            smoothness,
            strong_concavity,
            dimension,
            horizon,
            diameter,
            interior_margin,
            kappa_scale,
        } => {
            let (constants, scale) = match config {
                Some(path) => {
                    let c = ExperimentConfig::from_file(&path)?;
                    (c.constants(), kappa_scale.unwrap_or(c.algorithm.kappa_scale))
                }
                None => (
                    ProblemConstants {
                        smoothness,
                        strong_concavity,
                        dimension,
                        horizon,
                        diameter,
                        interior_margin,
                    },
                    kappa_scale.unwrap_or(1.0),
                ),
            };
            print!("{}", harness::describe_params(&constants, scale)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::InvalidConfig(_) = e {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
