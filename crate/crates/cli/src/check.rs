//! Offline history checks.

use std::path::Path;

use protokv::checker::{audit_visibility, check_causal, check_convergence, Audit};
use protokv::descriptor::{ClusterDescriptor, SimSettings};
use protokv::experiment::{local_clients, run_sim_workload};
use protokv::history::History;
use protokv::protocols::ProtocolKind;
use protokv::with_protocol;
use protokv::workload::WorkloadSpec;

use crate::{runtime, validation, CliError};

/// Violations printed before the rest are summarized.
const SHOWN: usize = 10;

fn report(history: &History, protocol: ProtocolKind) -> Result<usize, CliError> {
    let violations = check_causal(history).map_err(validation)?;
    println!("{} events, {} causal violations", history.len(), violations.len());
    for v in violations.iter().take(SHOWN) {
        println!("  {v}");
    }
    let audit = match audit_visibility(history, protocol.name()).map_err(validation)? {
        Audit::Skipped => {
            println!("no visibility rule to audit for {protocol}");
            Vec::new()
        }
        Audit::Checked(a) => {
            println!("{} visibility audit violations", a.len());
            a
        }
    };
    for a in audit.iter().take(SHOWN) {
        println!("  event {}: {}#{:x}: {}", a.index, a.key, a.version, a.reason);
    }
    Ok(violations.len() + audit.len())
}

pub fn check_file(path: &Path, protocol: Option<ProtocolKind>) -> Result<(), CliError> {
    let history = History::load(path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    let protocol = protocol.unwrap_or_default();
    match report(&history, protocol)? {
        0 => Ok(()),
        n => Err(runtime(format!("{n} violations"))),
    }
}

/// Records a mixed workload on the simulated cluster, then checks causality,
/// visibility and convergence.
pub fn check_sim(cluster: &ClusterDescriptor, seed: u64, ops: usize, save: Option<&Path>) -> Result<(), CliError> {
    cluster.validate().map_err(validation)?;
    let clients = local_clients(cluster.replicas, 2);
    let threads = 2;
    let spec = WorkloadSpec {
        name: "check".into(),
        key_count: 200,
        thread_count: threads,
        operation_count: ops.div_ceil(clients.len() * threads).max(1),
        ..Default::default()
    };
    let mut cfg = SimSettings::default().sim_config(cluster, seed);
    cfg.record_history = true;
    let (history, heads) = with_protocol!(cluster.protocol, P, _C => {
        let (mut sim, _) = run_sim_workload::<P>(cluster, cfg, &clients, &spec, 0).map_err(runtime)?;
        sim.run_for(1_000);
        (sim.take_history(), sim.heads())
    });
    if let Some(path) = save {
        history.save(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    let mut bad = report(&history, cluster.protocol)?;
    let conv = check_convergence(&heads);
    println!("convergence: {} keys differ across replicas", conv.diffs.len());
    bad += conv.diffs.len();
    match bad {
        0 => Ok(()),
        n => Err(runtime(format!("{n} violations"))),
    }
}
