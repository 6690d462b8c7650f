use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use searchgrid::commands::{self, BatchOptions, RatingsFile};
use searchgrid::store::SessionStore;
use searchgrid::{api, CACHE_ENV};
use searchgrid_core::sim::AgentKind;
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "searchgrid", version, about = "Operator-informed target search: reward fusion, planning and evaluation")]
struct Cli {
    /// Cache directory for geographic feature grids.
    #[arg(long, global = true, env = CACHE_ENV)]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit the reward map and print the fit manifest.
    Fuse {
        scenario: PathBuf,
        /// Write mean.csv, variance.csv and manifest.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo episodes for one agent.
    Simulate {
        scenario: PathBuf,
        #[arg(long, default_value = "pomcp")]
        agent: AgentKind,
        /// Runs per start cell (defaults to the scenario's value).
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write runs.csv and summary.json here instead of printing the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired runs of both agents with significance tests.
    Compare {
        scenario: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the fitted map against operator ratings.
    EvaluateAlignment {
        scenario: PathBuf,
        /// Ratings JSON; derived from the scenario's truth weights when omitted.
        #[arg(long)]
        ratings: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the mission service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Persist sessions here and restore them at startup.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cache = cli.cache_dir.as_deref();
    match cli.command {
        Cmd::Fuse { scenario, out } => print_json(&commands::fuse(&scenario, cache, out.as_deref())?),
        Cmd::Simulate {
            scenario,
            agent,
            runs,
            seed,
            out,
        } => {
            let (s, fused, _) = commands::load_and_fuse(&scenario, cache)?;
            let (records, summary) = commands::simulate(&s, &fused, &[agent], BatchOptions { runs, seed })?.remove(0);
            match out {
                Some(dir) => commands::write_batch(&dir, &records, &summary)?,
                None => commands::write_runs(std::io::stdout().lock(), &records)?,
            }
            eprintln!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Cmd::Compare { scenario, runs, seed, out } => {
            let (s, fused, _) = commands::load_and_fuse(&scenario, cache)?;
            let mut batches = commands::simulate(&s, &fused, &[AgentKind::Pomcp, AgentKind::Baseline], BatchOptions { runs, seed })?;
            let (base_records, base) = batches.pop().expect("two agents");
            let (mut records, pomcp) = batches.pop().expect("two agents");
            let comparison = commands::compare(pomcp, base)?;
            if let Some(dir) = out {
                records.extend(base_records);
                commands::write_batch(&dir, &records, &comparison)?;
            }
            print_json(&comparison)
        }
        Cmd::EvaluateAlignment {
            scenario,
            ratings,
            samples,
            seed,
        } => {
            let (s, fused, _) = commands::load_and_fuse(&scenario, cache)?;
            let ratings: RatingsFile = match ratings {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => commands::ratings_from_truth(&s, &fused)?,
            };
            print_json(&commands::evaluate_alignment(&s, &fused, &ratings, samples, seed)?)
        }
        Cmd::Serve { port, host, data_dir } => {
            let store = match data_dir {
                Some(dir) => SessionStore::open(dir, cli.cache_dir.clone())?,
                None => SessionStore::in_memory(cli.cache_dir.clone()),
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(api::serve(Arc::new(store), (host, port).into()))?;
            Ok(())
        }
    }
}
