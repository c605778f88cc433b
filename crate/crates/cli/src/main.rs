//! Cluster manager for protokv: scaffolds descriptors, launches and
//! monitors servers, runs experiment suites and aggregates their reports.
//!
//! Exit codes: 0 success, 1 invalid input (arguments, descriptors, queries),
//! 2 runtime failure.

mod check;
mod cluster;
mod experiment;
mod shell;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use protokv::descriptor::ClusterDescriptor;
use protokv::protocols::ProtocolKind;
use protokv::NodeId;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub fn validation(e: impl ToString) -> CliError {
    CliError::Validation(e.to_string())
}

pub fn runtime(e: impl ToString) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "protokv", version, about = "Manage protokv clusters and experiments")]
struct Cli {
    /// Cluster descriptor (TOML).
    #[arg(long, global = true, default_value = "cluster.toml")]
    descriptor: PathBuf,
    /// Run on the in-process deterministic simulator instead of TCP servers.
    #[arg(long, global = true)]
    sim: bool,
    /// Seed overriding the descriptor's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a descriptor for a full-replication R x P cluster.
    Scaffold {
        #[arg(long, default_value_t = 2)]
        replicas: u32,
        #[arg(long, default_value_t = 3)]
        partitions: u32,
        #[arg(long, default_value = "eventual")]
        protocol: ProtocolKind,
        /// First port; node i uses base+2i (clients) and base+2i+1 (servers).
        #[arg(long, default_value_t = 7000)]
        base_port: u16,
        /// Print instead of writing the descriptor file.
        #[arg(long)]
        stdout: bool,
        /// Overwrite an existing descriptor.
        #[arg(long)]
        force: bool,
    },
    /// Launch every server of the cluster.
    Start {
        /// Where launched process ids are recorded.
        #[arg(long)]
        state: Option<PathBuf>,
        /// How long to wait for servers to answer status requests.
        #[arg(long, default_value_t = 10_000)]
        wait_ms: u64,
    },
    /// Stop servers launched by `start`. Stopping a stopped cluster is fine.
    Stop {
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Per-node health: up or down, peer links, clients, queue depths.
    Status {
        #[arg(long, default_value_t = 1_000)]
        timeout_ms: u64,
    },
    /// Interactive put/get against one replica.
    Shell {
        /// Node whose replica the shell attaches to.
        #[arg(long, default_value = "0_0")]
        node: NodeId,
        #[arg(long, default_value_t = 5_000)]
        timeout_ms: u64,
    },
    /// Run every workload and repetition of an experiment descriptor.
    RunExperiment {
        #[arg(long)]
        experiment: PathBuf,
        /// Results file; defaults to `<experiment>.results.toml`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
    },
    /// Evaluate a query such as `avg(throughput) where replica=0` over
    /// report or results files.
    Aggregate {
        query: String,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Check a recorded history, or with --sim record and check a fresh run.
    Check {
        #[arg(long)]
        history: Option<PathBuf>,
        /// Protocol whose visibility rule is audited; the cluster's by default.
        #[arg(long)]
        protocol: Option<ProtocolKind>,
        /// Operations of the simulated run.
        #[arg(long, default_value_t = 10_000)]
        ops: usize,
        /// Save the simulated run's history here.
        #[arg(long)]
        save_history: Option<PathBuf>,
    },
    #[command(hide = true)]
    Serve {
        #[arg(long)]
        node: NodeId,
    },
    /// Runs one client machine's share of a workload; used by launchers.
    #[command(hide = true)]
    ClientRun {
        #[arg(long)]
        experiment: PathBuf,
        #[arg(long)]
        workload: String,
        #[arg(long)]
        rep: u32,
        #[arg(long)]
        client_id: u64,
        #[arg(long)]
        replica: u32,
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
    },
}

pub fn load_cluster(path: &Path) -> Result<ClusterDescriptor, CliError> {
    ClusterDescriptor::load(path).map_err(validation)
}

fn scaffold(path: &Path, protocol: ProtocolKind, r: u32, p: u32, base: u16, stdout: bool, force: bool) -> Result<(), CliError> {
    if r == 0 || p == 0 {
        return Err(validation("replicas and partitions must be positive"));
    }
    if (base as u64) + 2 * (r as u64 * p as u64) > u16::MAX as u64 {
        return Err(validation(format!("{r}x{p} nodes do not fit above port {base}")));
    }
    let mut d = ClusterDescriptor::scaffold(protocol, r, p, base);
    if let Some(stem) = path.file_stem() {
        d.name = stem.to_string_lossy().into_owned();
    }
    let text = d.to_toml();
    if stdout {
        print!("{text}");
        return Ok(());
    }
    if path.exists() && !force {
        return Err(validation(format!("{} exists; pass --force to overwrite", path.display())));
    }
    std::fs::write(path, text).map_err(|e| runtime(format!("writing {}: {e}", path.display())))?;
    println!("wrote {} ({} nodes, {} directed links)", path.display(), d.nodes.len(), d.directed_links().len());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let desc = &cli.descriptor;
    match cli.command {
        Command::Scaffold { replicas, partitions, protocol, base_port, stdout, force } => {
            scaffold(desc, protocol, replicas, partitions, base_port, stdout, force)
        }
        Command::Start { state, wait_ms } => {
            let cluster = load_cluster(desc)?;
            if cli.sim {
                cluster::sim_status(&cluster, cli.seed.unwrap_or(0))
            } else {
                cluster::start(desc, &cluster, &cluster::state_path(desc, state), wait_ms)
            }
        }
        Command::Stop { state } => cluster::stop(&cluster::state_path(desc, state)),
        Command::Status { timeout_ms } => {
            let cluster = load_cluster(desc)?;
            if cli.sim {
                cluster::sim_status(&cluster, cli.seed.unwrap_or(0))
            } else {
                cluster::status(&cluster, timeout_ms);
                Ok(())
            }
        }
        Command::Shell { node, timeout_ms } => {
            let cluster = load_cluster(desc)?;
            shell::run(&cluster, node, timeout_ms)
        }
        Command::RunExperiment { experiment, out, timeout_ms } => {
            let cluster = load_cluster(desc)?;
            experiment::run_experiment(desc, &cluster, &experiment, out, cli.sim, cli.seed, timeout_ms)
        }
        Command::Aggregate { query, files } => experiment::aggregate(&query, &files),
        Command::Check { history, protocol, ops, save_history } => match history {
            Some(h) => check::check_file(&h, protocol),
            None if cli.sim => {
                let cluster = load_cluster(desc)?;
                check::check_sim(&cluster, cli.seed.unwrap_or(0), ops, save_history.as_deref())
            }
            None => Err(validation("check needs --history FILE or --sim")),
        },
        Command::Serve { node } => {
            let cluster = load_cluster(desc)?;
            cluster::serve(&cluster, node)
        }
        Command::ClientRun { experiment, workload, rep, client_id, replica, timeout_ms } => {
            let cluster = load_cluster(desc)?;
            experiment::client_run(&cluster, &experiment, &workload, rep, client_id, replica, cli.seed, timeout_ms)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
