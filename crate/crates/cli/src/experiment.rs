//! Experiment suites, remote client runs and report aggregation.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use protokv::descriptor::{ClientMachine, ClusterDescriptor, ExperimentDescriptor};
use protokv::experiment::{repetition_seed, run_experiment_sim, run_experiment_tcp, ExperimentError, ExperimentResults};
use protokv::runtime::ClientSetup;
use protokv::with_protocol;
use protokv::workload::{run_tcp_workload, MetricsReport, Query, WorkloadSpec};

use crate::{runtime, validation, CliError};

fn load_experiment(path: &Path) -> Result<ExperimentDescriptor, CliError> {
    ExperimentDescriptor::load(path).map_err(validation)
}

fn experiment_error(e: ExperimentError) -> CliError {
    match e {
        ExperimentError::Descriptor(_) => validation(e),
        _ => runtime(e),
    }
}

/// Command line that runs `machine`'s share of a workload through its
/// launcher: the launcher words, then the host, then a `protokv client-run`
/// invocation.
pub fn remote_command(
    machine: &ClientMachine,
    descriptor: &Path,
    experiment: &Path,
    spec: &WorkloadSpec,
    rep: u32,
    client_id: u64,
    seed: u64,
) -> Result<Vec<String>, String> {
    let launcher = machine
        .launcher
        .as_deref()
        .ok_or_else(|| format!("client {}: no launcher configured for host {}", machine.name, machine.host))?;
    let mut argv: Vec<String> = launcher.split_whitespace().map(str::to_string).collect();
    if argv.is_empty() {
        return Err(format!("client {}: empty launcher", machine.name));
    }
    argv.push(machine.host.clone());
    argv.extend(
        [
            "protokv",
            "--descriptor",
            &descriptor.display().to_string(),
            "--seed",
            &seed.to_string(),
            "client-run",
            "--experiment",
            &experiment.display().to_string(),
            "--workload",
            &spec.name,
            "--rep",
            &rep.to_string(),
            "--client-id",
            &client_id.to_string(),
            "--replica",
            &machine.replica.to_string(),
        ]
        .map(str::to_string),
    );
    Ok(argv)
}

fn run_remote(argv: &[String]) -> Result<MetricsReport, String> {
    let out = Command::new(&argv[0]).args(&argv[1..]).output().map_err(|e| format!("{}: {e}", argv[0]))?;
    if !out.status.success() {
        let err = String::from_utf8_lossy(&out.stderr);
        let last = err.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("no output");
        return Err(format!("remote client failed ({}): {last}", out.status));
    }
    MetricsReport::from_toml(&String::from_utf8_lossy(&out.stdout)).map_err(|e| format!("remote report: {e}"))
}

pub fn run_experiment(
    descriptor: &Path,
    cluster: &ClusterDescriptor,
    experiment: &Path,
    out: Option<PathBuf>,
    sim: bool,
    seed: Option<u64>,
    timeout_ms: u64,
) -> Result<(), CliError> {
    let exp = load_experiment(experiment)?;
    exp.validate_for(cluster).map_err(validation)?;
    let results = if sim {
        run_experiment_sim(cluster, &exp, seed)
    } else {
        let descriptor = descriptor.canonicalize().map_err(runtime)?;
        let experiment_abs = experiment.canonicalize().map_err(runtime)?;
        let base_seed = seed.unwrap_or(exp.seed);
        let mut remote = |m: &ClientMachine, spec: &WorkloadSpec, rep: u32, client_id: u64| {
            let argv = remote_command(m, &descriptor, &experiment_abs, spec, rep, client_id, base_seed)?;
            run_remote(&argv)
        };
        run_experiment_tcp(cluster, &exp, seed, Duration::from_millis(timeout_ms), &mut remote)
    }
    .map_err(experiment_error)?;
    print!("{}", results.render());
    let out = out.unwrap_or_else(|| experiment.with_extension("results.toml"));
    std::fs::write(&out, results.to_toml()).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    println!("results written to {}", out.display());
    match results.failed() {
        0 => Ok(()),
        n => Err(runtime(format!("{n} of {} runs failed", results.rows.len()))),
    }
}

/// Runs one client machine's threads against the cluster and prints its
/// report as TOML on stdout.
#[allow(clippy::too_many_arguments)]
pub fn client_run(
    cluster: &ClusterDescriptor,
    experiment: &Path,
    workload: &str,
    rep: u32,
    client_id: u64,
    replica: u32,
    seed: Option<u64>,
    timeout_ms: u64,
) -> Result<(), CliError> {
    let exp = load_experiment(experiment)?;
    let (wi, spec) = exp
        .selected()
        .into_iter()
        .enumerate()
        .find(|(_, w)| w.name == workload)
        .ok_or_else(|| validation(format!("unknown workload {workload:?}")))?;
    if replica >= cluster.replicas {
        return Err(validation(format!("replica {replica} is not in the cluster")));
    }
    let rseed = repetition_seed(seed.unwrap_or(exp.seed), wi, rep);
    let setup = ClientSetup { client_id, replica, shape: cluster.shape() };
    let servers = cluster.client_addresses();
    let report = with_protocol!(cluster.protocol, _P, C => {
        run_tcp_workload::<C>(spec, setup, &servers, Duration::from_millis(timeout_ms), rseed)
    });
    if report.operations > 0 && report.failures() == report.operations {
        return Err(runtime("every operation failed"));
    }
    print!("{}", report.to_toml());
    Ok(())
}

/// Reports in a results file or a single report file.
pub fn read_reports(path: &Path) -> Result<Vec<MetricsReport>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    if let Ok(r) = ExperimentResults::from_toml(&text) {
        return Ok(r.reports().cloned().collect());
    }
    MetricsReport::from_toml(&text)
        .map(|r| vec![r])
        .map_err(|e| validation(format!("{}: neither a results nor a report file: {e}", path.display())))
}

pub fn aggregate(query: &str, files: &[PathBuf]) -> Result<(), CliError> {
    let q: Query = query.parse().map_err(|e: protokv::workload::QueryError| {
        validation(format!("{e}\n  {query}\n  {}^", " ".repeat(e.offset)))
    })?;
    let mut reports = Vec::new();
    for f in files {
        reports.extend(read_reports(f)?);
    }
    match q.evaluate(&reports) {
        Some(v) => println!("{query} = {v}"),
        None => println!("{query} = none (no matching reports)"),
    }
    Ok(())
}
