//! Runs workloads against a described cluster, in the simulator or over TCP,
//! and aggregates the client reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::descriptor::{ClientMachine, ClusterDescriptor, DescriptorError, ExperimentDescriptor, SimSettings};
use crate::runtime::{ClientSetup, Protocol};
use crate::sim::{Sim, SimConfig, SimError};
use crate::with_protocol;
use crate::workload::{run_tcp_workload, MetricsReport, OpGenerator, OpSample, WorkloadSpec};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("simulation did not drain within {0} steps")]
    NotQuiescent(u64),
}

/// Simulator holding every node of `cluster`.
pub fn build_sim<P: Protocol>(cluster: &ClusterDescriptor, cfg: SimConfig) -> Result<Sim<P>, SimError> {
    let mut sim = Sim::new(cfg);
    for config in cluster.server_configs() {
        sim.add_node(config)?;
    }
    Ok(sim)
}

/// Adds `spec.thread_count` sessions per client machine; returns the session
/// ids of each machine.
pub fn attach_workload<P: Protocol>(
    sim: &mut Sim<P>,
    clients: &[ClientMachine],
    spec: &WorkloadSpec,
    seed: u64,
    first_session: u64,
) -> Result<Vec<Vec<u64>>, SimError> {
    let mut next = first_session;
    let mut out = Vec::new();
    for c in clients {
        let mut ids = Vec::new();
        for _ in 0..spec.thread_count {
            let id = sim.add_session(c.replica, OpGenerator::new(spec, next, seed))?;
            debug_assert_eq!(id, next);
            next += 1;
            ids.push(id);
        }
        out.push(ids);
    }
    Ok(out)
}

/// Per-client reports built from the simulator's operation records. Wall
/// time runs from the client's first request to its last reply.
pub fn collect_reports<P: Protocol>(
    sim: &Sim<P>,
    clients: &[ClientMachine],
    sessions: &[Vec<u64>],
    spec: &WorkloadSpec,
    repetition: u32,
) -> Vec<MetricsReport> {
    clients
        .iter()
        .zip(sessions)
        .map(|(c, ids)| {
            let ops: Vec<_> = sim.ops().iter().filter(|o| ids.contains(&o.session)).collect();
            let start = ops.iter().map(|o| o.start_ns).min().unwrap_or(0);
            let end = ops.iter().map(|o| o.start_ns + o.latency_ns).max().unwrap_or(0);
            let samples: Vec<OpSample> = ops
                .iter()
                .map(|o| OpSample {
                    kind: o.kind,
                    latency_us: o.latency_ns as f64 / 1e3,
                    ok: o.ok,
                    requests: o.steps,
                    deps: o.deps,
                })
                .collect();
            MetricsReport {
                client: c.name.clone(),
                protocol: P::NAME.to_string(),
                workload: spec.name.clone(),
                replica: c.replica,
                repetition,
                ..MetricsReport::from_samples(&samples, Duration::from_nanos(end - start), ids.len() as u64)
            }
        })
        .collect()
}

/// One workload on a fresh simulated cluster, run until every message has
/// been delivered.
pub fn run_sim_workload<P: Protocol>(
    cluster: &ClusterDescriptor,
    cfg: SimConfig,
    clients: &[ClientMachine],
    spec: &WorkloadSpec,
    repetition: u32,
) -> Result<(Sim<P>, Vec<MetricsReport>), ExperimentError> {
    let seed = cfg.seed;
    let max_steps = cfg.max_steps;
    let mut sim = build_sim::<P>(cluster, cfg)?;
    let sessions = attach_workload(&mut sim, clients, spec, seed, 0)?;
    if !sim.run_until_quiescent().quiescent {
        return Err(ExperimentError::NotQuiescent(max_steps));
    }
    let reports = collect_reports(&sim, clients, &sessions, spec, repetition);
    Ok((sim, reports))
}

/// Reports of one workload repetition, or why it failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub workload: String,
    pub repetition: u32,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Sum over clients.
    pub throughput: f64,
    #[serde(default)]
    pub reports: Vec<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub query: String,
    pub workload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub experiment: String,
    pub protocol: String,
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<AggregateRow>,
}

impl ExperimentResults {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("results serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn reports(&self) -> impl Iterator<Item = &MetricsReport> {
        self.rows.iter().flat_map(|r| r.reports.iter())
    }

    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| !r.ok).count()
    }

    /// Plain-text results table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>4} {:>8} {:>14} {:>12} {:>12}", "workload", "rep", "status", "ops/s", "get_us", "put_us");
        for r in &self.rows {
            let mean = |get: bool| {
                let (sum, n) = r.reports.iter().fold((0.0, 0u64), |(s, n), rep| {
                    let l = if get { &rep.get } else { &rep.put };
                    (s + l.mean_us * l.count as f64, n + l.count)
                });
                if n == 0 { 0.0 } else { sum / n as f64 }
            };
            let status = if r.ok { "ok" } else { "failed" };
            let _ = writeln!(
                out,
                "{:<20} {:>4} {:>8} {:>14.1} {:>12.1} {:>12.1}",
                r.workload,
                r.repetition,
                status,
                r.throughput,
                mean(true),
                mean(false)
            );
            if let Some(e) = &r.error {
                let _ = writeln!(out, "    {e}");
            }
        }
        for a in &self.aggregates {
            let value = a.value.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{:<20} {} = {value}", a.workload, a.query);
        }
        out
    }
}

fn aggregate(exp: &ExperimentDescriptor, rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut out = Vec::new();
    for (text, q) in exp.queries.iter().zip(exp.queries()) {
        for w in exp.selected() {
            let reports: Vec<MetricsReport> =
                rows.iter().filter(|r| r.workload == w.name).flat_map(|r| r.reports.iter().cloned()).collect();
            out.push(AggregateRow { query: text.clone(), workload: w.name.clone(), value: q.evaluate(&reports) });
        }
    }
    out
}

fn row(workload: &str, repetition: u32, result: Result<Vec<MetricsReport>, String>) -> ResultRow {
    match result {
        Ok(reports) => ResultRow {
            workload: workload.to_string(),
            repetition,
            ok: true,
            error: None,
            throughput: reports.iter().map(|r| r.throughput).sum(),
            reports,
        },
        Err(e) => ResultRow {
            workload: workload.to_string(),
            repetition,
            ok: false,
            error: Some(e),
            throughput: 0.0,
            reports: Vec::new(),
        },
    }
}

/// Seed of a repetition; every workload and repetition gets its own stream.
pub fn repetition_seed(seed: u64, workload_index: usize, repetition: u32) -> u64 {
    seed.wrapping_mul(0x100_0000_01b3) ^ ((workload_index as u64) << 32) ^ repetition as u64
}

/// Every selected workload and repetition in the simulator. With a fixed
/// seed the results are identical run to run.
pub fn run_experiment_sim(
    cluster: &ClusterDescriptor,
    exp: &ExperimentDescriptor,
    seed_override: Option<u64>,
) -> Result<ExperimentResults, ExperimentError> {
    exp.validate_for(cluster)?;
    let seed = seed_override.unwrap_or(exp.seed);
    let mut rows = Vec::new();
    for (wi, spec) in exp.selected().into_iter().enumerate() {
        for rep in 0..exp.repetitions {
            let cfg = exp.sim.sim_config(cluster, repetition_seed(seed, wi, rep));
            let result = with_protocol!(cluster.protocol, P, _C => {
                run_sim_workload::<P>(cluster, cfg, &exp.clients, spec, rep).map(|(_, reports)| reports)
            });
            rows.push(row(&spec.name, rep, result.map_err(|e| e.to_string())));
        }
    }
    Ok(ExperimentResults {
        experiment: exp.name.clone(),
        protocol: cluster.protocol.to_string(),
        aggregates: aggregate(exp, &rows),
        rows,
    })
}

/// Runs a remote client machine and returns its report.
pub type RemoteRunner<'a> = dyn FnMut(&ClientMachine, &WorkloadSpec, u32, u64) -> Result<MetricsReport, String> + 'a;

/// Every selected workload and repetition against running TCP servers.
/// Local client machines run in-process; others go through `remote`. A
/// failing client marks its repetition failed and the suite continues.
pub fn run_experiment_tcp(
    cluster: &ClusterDescriptor,
    exp: &ExperimentDescriptor,
    seed_override: Option<u64>,
    timeout: Duration,
    remote: &mut RemoteRunner<'_>,
) -> Result<ExperimentResults, ExperimentError> {
    exp.validate_for(cluster)?;
    let seed = seed_override.unwrap_or(exp.seed);
    let servers = cluster.client_addresses();
    let mut rows = Vec::new();
    for (wi, spec) in exp.selected().into_iter().enumerate() {
        for rep in 0..exp.repetitions {
            let rseed = repetition_seed(seed, wi, rep);
            let mut reports = Vec::new();
            let mut failure = None;
            for (ci, c) in exp.clients.iter().enumerate() {
                // Distinct client ids keep value tags unique across the suite.
                let client_id = ((wi as u64 * exp.repetitions as u64 + rep as u64) * exp.clients.len() as u64) + ci as u64;
                let result = if c.is_local() {
                    with_protocol!(cluster.protocol, _P, C => {
                        let setup = ClientSetup { client_id, replica: c.replica, shape: cluster.shape() };
                        let r = run_tcp_workload::<C>(spec, setup, &servers, timeout, rseed);
                        if r.operations > 0 && r.failures() == r.operations {
                            Err(format!("client {}: every operation failed", c.name))
                        } else {
                            Ok(r)
                        }
                    })
                } else {
                    remote(c, spec, rep, client_id)
                };
                match result {
                    Ok(r) => reports.push(MetricsReport {
                        client: c.name.clone(),
                        protocol: cluster.protocol.to_string(),
                        workload: spec.name.clone(),
                        replica: c.replica,
                        repetition: rep,
                        ..r
                    }),
                    Err(e) => {
                        log::warn!("{} rep {rep}: {e}", spec.name);
                        failure = Some(e);
                    }
                }
            }
            rows.push(row(&spec.name, rep, failure.map_or(Ok(reports), Err)));
        }
    }
    Ok(ExperimentResults {
        experiment: exp.name.clone(),
        protocol: cluster.protocol.to_string(),
        aggregates: aggregate(exp, &rows),
        rows,
    })
}

/// Per-protocol results of the same experiment.
pub fn run_protocol_sweep(
    cluster: &ClusterDescriptor,
    exp: &ExperimentDescriptor,
    protocols: &[crate::protocols::ProtocolKind],
) -> Result<BTreeMap<String, ExperimentResults>, ExperimentError> {
    protocols
        .iter()
        .map(|p| {
            let c = ClusterDescriptor { protocol: *p, ..cluster.clone() };
            run_experiment_sim(&c, exp, None).map(|r| (p.to_string(), r))
        })
        .collect()
}

/// Client machines: `per_replica` on every replica of `replicas`.
pub fn local_clients(replicas: u32, per_replica: usize) -> Vec<ClientMachine> {
    (0..replicas)
        .flat_map(|r| {
            (0..per_replica).map(move |i| ClientMachine {
                name: format!("client-{r}-{i}"),
                host: "local".into(),
                replica: r,
                launcher: None,
            })
        })
        .collect()
}

impl Default for ExperimentDescriptor {
    fn default() -> Self {
        ExperimentDescriptor {
            name: "experiment".into(),
            seed: 0,
            repetitions: 1,
            run: Vec::new(),
            queries: Vec::new(),
            sim: SimSettings::default(),
            clients: local_clients(1, 1),
            workloads: vec![WorkloadSpec::default()],
        }
    }
}
