use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bgl_downscale::par::Exec;
use bgl_downscale::pipeline::{Pipeline, PipelineConfig};
use bgl_downscale::synthetic::ScenarioSpec;
use bgl_downscale::YearMonth;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bgl-downscale",
    version,
    about = "Bivariate graphical lasso statistical downscaling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML); relative paths resolve against its directory.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the parallel pool (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Run every stage on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a ready-to-run synthetic scenario config.
    Init {
        /// Destination file.
        #[arg(long, short, default_value = "bgl.toml")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Use the uncorrelated scenario instead of the dependent one.
        #[arg(long)]
        independent: bool,
    },
    /// Generate the synthetic scenario described by the config.
    Simulate(Common),
    /// Estimate the trend and seasonal precision models.
    Fit(Common),
    /// Write mean and sd maps for the requested months.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Comma-separated YYYY-MM list; defaults to every month after training.
        #[arg(long, value_delimiter = ',')]
        months: Option<Vec<YearMonth>>,
    },
    /// Score the hold-out window and check model invariants.
    Validate(Common),
}

fn open(common: &Common) -> Result<Pipeline> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    let mut pipeline = Pipeline::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        pipeline.config_mut().seed = seed;
    }
    let exec = if common.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    Ok(pipeline.with_exec(exec))
}

fn init(out: &Path, seed: u64, independent: bool) -> Result<()> {
    let spec = if independent {
        ScenarioSpec::independent(seed)
    } else {
        ScenarioSpec::standard(seed)
    };
    let config = PipelineConfig::for_scenario(spec, Path::new(""));
    std::fs::write(out, config.to_toml()?).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Init {
            out,
            seed,
            independent,
        } => init(&out, seed, independent)?,
        Command::Simulate(c) => {
            let p = open(&c)?;
            let s = p.simulate()?;
            println!(
                "simulated {} coarse months, {} observed months, {} truth months",
                s.coarse.time().len(),
                s.obs.time().len(),
                s.truth.time().len()
            );
        }
        Command::Fit(c) => {
            let p = open(&c)?;
            let fitted = p.fit()?;
            for m in &fitted.models {
                println!(
                    "{}: L={} lambda={:.4} rho={:.4} outer_iterations={}",
                    m.season(),
                    m.levels(),
                    m.lambda(),
                    m.rho(),
                    m.trace().iterations()
                );
            }
            println!("models written to {}", p.output_dir().display());
        }
        Command::Predict { common, months } => {
            let p = open(&common)?;
            let written = p.predict(months.as_deref())?;
            println!(
                "wrote {} files under {}",
                written.len(),
                p.output_dir().join("predict").display()
            );
        }
        Command::Validate(c) => {
            let p = open(&c)?;
            let outcome = p.validate()?;
            print!("{}", outcome.report.to_csv());
            if !outcome.passed() {
                for f in &outcome.failures {
                    eprintln!("invariant failed: {f}");
                }
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            // library errors already embed their source in the message
            let mut text = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !text.contains(&cause) {
                    if !text.is_empty() {
                        text.push_str(": ");
                    }
                    text.push_str(&cause);
                }
            }
            eprintln!("error: {text}");
            ExitCode::FAILURE
        }
    }
}
