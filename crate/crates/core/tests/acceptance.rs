//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always print. Positional
//! arguments filter criteria by number or name substring.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protokv::checker::{audit_visibility, check_causal, check_convergence, Audit};
use protokv::codec::dynamic::{self, DynMessage, DynValue};
use protokv::codec::{FieldKind, Label, Message, MessageSchema};
use protokv::config::{ConfigError, ServerConfig, Versioning};
use protokv::descriptor::ClusterDescriptor;
use protokv::experiment::{local_clients, run_sim_workload};
use protokv::node::{partition_for, ClusterShape, NodeId, TreeShape};
use protokv::protocols::causalspartan::CausalSpartan;
use protokv::protocols::gentlerain::{self, GentleRain};
use protokv::protocols::{causalspartan, cops, eventual, ProtocolKind};
use protokv::runtime::envelope;
use protokv::runtime::{
    ClientError, ClientSetup, Context, GetOutcome, OpKind, Protocol, ProtocolClient, PutOutcome, ReplyAgent, SendError,
};
use protokv::sim::{Delay, Outage, SessionOp, Sim, SimConfig, SimError};
use protokv::storage::{ReplicatedStore, Storage};
use protokv::workload::{MetricsReport, WorkloadSpec};
use protokv::{history, sim, with_protocol};

// Pinned parameters and tolerances.
const C1_SEEDS: u64 = 20;
const C1_OPS: usize = 10_000;
const C1_BUDGET: Duration = Duration::from_secs(60);
const C2_SEEDS: u64 = 20;
const C2_OPS: usize = 2_000;
const C3_SKEW_MS: i64 = 50;
const C3_MIN_GAP_MS: f64 = 40.0;
const C3_TOLERANCE: f64 = 0.20;
const C3_PUT_PAIRS: usize = 100;
const C4_REPS: u64 = 3;
const C4_MIN_HOLDING_REPS: usize = 2;
const LOAD_CLIENTS_PER_REPLICA: usize = 8;
const LOAD_THREADS: usize = 8;
const LOAD_OPS_PER_THREAD: usize = 250;
const C6_READS: [f64; 4] = [0.25, 0.5, 0.75, 0.95];
const C6_OPS_PER_THREAD: usize = 500;
const C7_SNAPSHOTS: usize = 100;
const C7_MAX_ROUNDS: usize = 2;
const C8_FACTORS: [usize; 4] = [1, 2, 4, 8];
const C9_MESSAGES: u64 = 1_000;
const C9_MAX_OUTAGE_MS: u64 = 500;
const C9_CAPACITY: usize = 2_000;
const C9_SMALL_CAPACITY: usize = 16;
const C10_SAMPLES: usize = 100_000;
const THROUGHPUT_REL_TOL: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn cluster(protocol: ProtocolKind) -> ClusterDescriptor {
    ClusterDescriptor::scaffold(protocol, 2, 3, 0)
}

fn mixed(read: f64, ops_per_thread: usize, threads: usize) -> WorkloadSpec {
    WorkloadSpec {
        name: format!("read-{read}"),
        read_proportion: read,
        insert_proportion: 1.0 - read,
        value_size: 64,
        thread_count: threads,
        operation_count: ops_per_thread,
        key_count: 1_000,
        ..Default::default()
    }
}

fn total_throughput(reports: &[MetricsReport], sim_ops: &[sim::OpRecord]) -> f64 {
    let start = sim_ops.iter().map(|o| o.start_ns).min().unwrap_or(0);
    let end = sim_ops.iter().map(|o| o.start_ns + o.latency_ns).max().unwrap_or(0);
    let done: u64 = reports.iter().map(|r| r.operations - r.failures()).sum();
    done as f64 / ((end - start) as f64 / 1e9)
}

// 1. Causal safety.

fn causal_runs<P: Protocol>(seeds: u64) -> Result<(usize, usize, usize, Duration), String> {
    let started = Instant::now();
    let clients = local_clients(2, 2);
    let per_thread = C1_OPS / (clients.len() * 2);
    let spec = WorkloadSpec { key_count: 100, ..mixed(0.5, per_thread, 2) };
    let mut violations = 0;
    let mut audit = 0;
    let mut gets = 0;
    for seed in 0..seeds {
        let cfg = SimConfig { record_history: true, server_link: Delay::uniform(0.0, 50.0), ..SimConfig::seeded(seed) };
        let (sim, _) = run_sim_workload::<P>(&cluster(kind_of::<P>()), cfg, &clients, &spec, 0).map_err(|e| e.to_string())?;
        if sim.ops().len() != C1_OPS {
            return Err(format!("seed {seed}: {} ops completed", sim.ops().len()));
        }
        let h = sim.history();
        gets += h.events.iter().filter(|e| matches!(e, history::HistoryEvent::Get(_))).count();
        let v = check_causal(&h).map_err(|e| e.to_string())?;
        if let Some(first) = v.first() {
            eprintln!("  {} seed {seed}: {first}", P::NAME);
        }
        violations += v.len();
        match audit_visibility(&h, P::NAME).map_err(|e| e.to_string())? {
            Audit::Checked(a) => audit += a.len(),
            Audit::Skipped => return Err("visibility audit skipped".into()),
        }
    }
    Ok((violations, audit, gets, started.elapsed()))
}

fn kind_of<P: Protocol>() -> ProtocolKind {
    P::NAME.parse().expect("built-in protocol")
}

fn criterion_1() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for kind in [ProtocolKind::Cops, ProtocolKind::GentleRain, ProtocolKind::CausalSpartan] {
        let r = with_protocol!(kind, P, _C => causal_runs::<P>(C1_SEEDS));
        match r {
            Ok((v, a, gets, t)) => {
                pass &= v == 0 && a == 0 && t < C1_BUDGET;
                parts.push(format!("{kind}: {v} violations, {a} audit, {gets} gets checked, {:.1}s", t.as_secs_f64()));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{kind}: {e}"));
            }
        }
    }
    outcome(pass, format!("{C1_SEEDS} seeds x {C1_OPS} ops; {}", parts.join("; ")))
}

// 2. Convergence.

fn criterion_2() -> Outcome {
    let clients = local_clients(2, 2);
    let spec = WorkloadSpec { key_count: 100, ..mixed(0.5, C2_OPS / 8, 2) };
    let mut failed = Vec::new();
    let mut keys = 0;
    for kind in ProtocolKind::ALL {
        for seed in 0..C2_SEEDS {
            let heads = with_protocol!(kind, P, _C => {
                run_sim_workload::<P>(&cluster(kind), SimConfig::seeded(seed), &clients, &spec, 0).map(|(s, _)| s.heads())
            });
            match heads {
                Ok(h) => {
                    keys += h.values().map(|m| m.len()).sum::<usize>();
                    let report = check_convergence(&h);
                    if !report.converged {
                        failed.push(format!("{kind}/{seed}: {} keys differ", report.diffs.len()));
                    }
                }
                Err(e) => failed.push(format!("{kind}/{seed}: {e}")),
            }
        }
    }
    let detail = if failed.is_empty() {
        format!("4 protocols x {C2_SEEDS} seeds converged ({keys} node-key heads compared)")
    } else {
        failed.join("; ")
    };
    outcome(failed.is_empty(), detail)
}

// 3. GentleRain put delay under skew.

fn key_on(partition: u32, partitions: u32, prefix: &str) -> String {
    (0..).map(|i| format!("{prefix}{i}")).find(|k| partition_for(k, partitions) == partition).unwrap()
}

struct SkewRun {
    mean_unskewed_put_ms: f64,
    mean_put_ms: f64,
    macro_ms: f64,
    sleep_ms: u64,
}

fn skew_run<P: Protocol>(sleep: impl Fn(&P) -> u64) -> Result<SkewRun, String> {
    let d = cluster(kind_of::<P>());
    let skewed = NodeId::new(0, 1);
    let unskewed = NodeId::new(0, 0);
    let mut cfg = SimConfig::seeded(3);
    cfg.clock_skew_ms.insert(skewed, C3_SKEW_MS);
    let mut sim = protokv::experiment::build_sim::<P>(&d, cfg).map_err(|e| e.to_string())?;
    let a = key_on(1, 3, "skewed");
    let b = key_on(0, 3, "plain");
    let mut ops = Vec::new();
    for i in 0..C3_PUT_PAIRS {
        ops.push(SessionOp::put(a.clone(), history::tagged_value(history::make_tag(0, 2 * i as u64 + 1), 64)));
        ops.push(SessionOp::put(b.clone(), history::tagged_value(history::make_tag(0, 2 * i as u64 + 2), 64)));
    }
    // Amplified inserts spanning both partitions, factor 8.
    let amplified: Vec<SessionOp> = (0..20u64)
        .map(|i| {
            SessionOp::amplified(
                (0..8u64)
                    .map(|j| {
                        let k = if j % 2 == 0 { a.clone() } else { b.clone() };
                        (k, history::tagged_value(history::make_tag(1, i * 8 + j + 1), 64))
                    })
                    .collect(),
            )
        })
        .collect();
    sim.add_session(0, ops.into_iter()).map_err(|e| e.to_string())?;
    sim.add_session(0, amplified.into_iter()).map_err(|e| e.to_string())?;
    if !sim.run_until_quiescent().quiescent {
        return Err("did not drain".into());
    }
    let plain: Vec<f64> = sim
        .ops()
        .iter()
        .filter(|o| o.session == 0 && o.node == unskewed && o.kind == OpKind::Put)
        .map(|o| o.latency_ns as f64 / 1e6)
        .collect();
    let all: Vec<f64> =
        sim.ops().iter().filter(|o| o.session == 0 && o.kind == OpKind::Put).map(|o| o.latency_ns as f64 / 1e6).collect();
    let macros: Vec<f64> = sim.ops().iter().filter(|o| o.session == 1).map(|o| o.latency_ns as f64 / 1e6).collect();
    let sleep_ms = sim.node_ids().iter().map(|id| sleep(sim.node(*id).unwrap())).sum();
    Ok(SkewRun {
        mean_unskewed_put_ms: plain.iter().sum::<f64>() / plain.len().max(1) as f64,
        mean_put_ms: all.iter().sum::<f64>() / all.len().max(1) as f64,
        macro_ms: macros.iter().sum::<f64>() / macros.len().max(1) as f64,
        sleep_ms,
    })
}

fn criterion_3() -> Outcome {
    let gr = skew_run::<GentleRain>(|n| n.injected_sleep_ms());
    let cs = skew_run::<CausalSpartan>(|n| n.injected_sleep_ms());
    match (gr, cs) {
        (Ok(gr), Ok(cs)) => {
            let gap = gr.mean_unskewed_put_ms - cs.mean_unskewed_put_ms;
            let needed = C3_MIN_GAP_MS * (1.0 - C3_TOLERANCE);
            let pass = gap >= needed && cs.sleep_ms == 0 && gr.macro_ms > cs.macro_ms;
            outcome(
                pass,
                format!(
                    "mean put at unskewed partition: gentlerain {:.2} ms, causalspartan {:.2} ms, gap {gap:.2} ms (need >= {needed:.1}); \
                     all puts {:.2} vs {:.2} ms; causalspartan sleep {} ms; f=8 macro latency {:.2} vs {:.2} ms",
                    gr.mean_unskewed_put_ms,
                    cs.mean_unskewed_put_ms,
                    gr.mean_put_ms,
                    cs.mean_put_ms,
                    cs.sleep_ms,
                    gr.macro_ms,
                    cs.macro_ms
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

// 4 and 5. Throughput.

fn loaded_throughput(kind: ProtocolKind, read: f64, seed: u64) -> Result<f64, String> {
    let clients = local_clients(2, LOAD_CLIENTS_PER_REPLICA);
    let spec = mixed(read, LOAD_OPS_PER_THREAD, LOAD_THREADS);
    with_protocol!(kind, P, _C => {
        let (sim, reports) =
            run_sim_workload::<P>(&cluster(kind), SimConfig::seeded(seed), &clients, &spec, seed as u32).map_err(|e| e.to_string())?;
        Ok(total_throughput(&reports, sim.ops()))
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ordered(t: &BTreeMap<ProtocolKind, f64>) -> bool {
    let (ev, gr, cs, co) = (
        t[&ProtocolKind::Eventual],
        t[&ProtocolKind::GentleRain],
        t[&ProtocolKind::CausalSpartan],
        t[&ProtocolKind::Cops],
    );
    ev > gr && ev > cs && gr > co && cs > co
}

fn criterion_4() -> Outcome {
    let mut per_rep = Vec::new();
    for rep in 0..C4_REPS {
        let mut t = BTreeMap::new();
        for kind in ProtocolKind::ALL {
            match loaded_throughput(kind, 0.5, 100 + rep) {
                Ok(x) => t.insert(kind, x),
                Err(e) => return outcome(false, e),
            };
        }
        per_rep.push(t);
    }
    let medians: BTreeMap<ProtocolKind, f64> =
        ProtocolKind::ALL.iter().map(|k| (*k, median(per_rep.iter().map(|t| t[k]).collect()))).collect();
    let holding = per_rep.iter().filter(|t| ordered(t)).count();
    let pass = ordered(&medians) && holding >= C4_MIN_HOLDING_REPS;
    let table: Vec<String> = medians.iter().map(|(k, v)| format!("{k} {v:.0}")).collect();
    outcome(pass, format!("median ops/s: {}; ordering held in {holding}/{C4_REPS} reps", table.join(", ")))
}

fn criterion_5() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for kind in ProtocolKind::ALL {
        match (loaded_throughput(kind, 0.1, 7), loaded_throughput(kind, 0.9, 7)) {
            (Ok(lo), Ok(hi)) => {
                pass &= hi > lo;
                parts.push(format!("{kind} {lo:.0} -> {hi:.0}"));
            }
            (Err(e), _) | (_, Err(e)) => return outcome(false, e),
        }
    }
    outcome(pass, format!("ops/s at read 0.1 -> 0.9: {}", parts.join(", ")))
}

// 6. COPS dependency growth.

fn criterion_6() -> Outcome {
    let clients = local_clients(2, 2);
    let mut means = Vec::new();
    for read in C6_READS {
        let spec = mixed(read, C6_OPS_PER_THREAD, 2);
        match run_sim_workload::<cops::Cops>(&cluster(ProtocolKind::Cops), SimConfig::seeded(5), &clients, &spec, 0) {
            Ok((sim, _)) => {
                let puts: Vec<_> = sim.ops().iter().filter(|o| o.kind == OpKind::Put).collect();
                let deps: u64 = puts.iter().map(|o| o.deps).sum();
                let requests: u64 = puts.iter().map(|o| o.steps as u64).sum();
                means.push(deps as f64 / requests.max(1) as f64);
            }
            Err(e) => return outcome(false, e.to_string()),
        }
    }
    let pass = means.windows(2).all(|w| w[1] > w[0]);
    let shown: Vec<String> = C6_READS.iter().zip(&means).map(|(r, m)| format!("{r}: {m:.3}")).collect();
    outcome(pass, format!("mean deps per put by read proportion: {}", shown.join(", ")))
}

// 7. GST correctness.

/// Offline GST of each replica: the minimum entry over every version vector
/// of its partitions.
fn gst_oracle(sim: &Sim<GentleRain>) -> BTreeMap<u32, u64> {
    let mut out: BTreeMap<u32, u64> = BTreeMap::new();
    for id in sim.node_ids() {
        let m = sim.node(id).unwrap().vv().into_iter().min().unwrap_or(0);
        out.entry(id.replica).and_modify(|v| *v = (*v).min(m)).or_insert(m);
    }
    out
}

fn criterion_7() -> Outcome {
    let d = cluster(ProtocolKind::GentleRain);
    let mut sim = match protokv::experiment::build_sim::<GentleRain>(&d, SimConfig::seeded(9)) {
        Ok(s) => s,
        Err(e) => return outcome(false, e.to_string()),
    };
    let spec = mixed(0.5, 400, 2);
    if let Err(e) = protokv::experiment::attach_workload(&mut sim, &local_clients(2, 2), &spec, 9, 0) {
        return outcome(false, e.to_string());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut last: BTreeMap<NodeId, u64> = BTreeMap::new();
    let (mut above, mut regress) = (0, 0);
    for _ in 0..C7_SNAPSHOTS {
        sim.run_for(rng.random_range(1..15));
        let oracle = gst_oracle(&sim);
        for id in sim.node_ids() {
            let g = sim.node(id).unwrap().gst();
            above += (g > oracle[&id.replica]) as usize;
            regress += (g < last.get(&id).copied().unwrap_or(0)) as usize;
            last.insert(id, g);
        }
    }
    sim.run_until_quiescent();
    sim.disable_task_everywhere(gentlerain::HEARTBEAT_TASK);
    sim.disable_task_everywhere(gentlerain::GST_TASK);
    sim.run_for(500);
    let oracle = gst_oracle(&sim);
    let mut rounds = None;
    for round in 1..=C7_MAX_ROUNDS + 1 {
        for id in sim.node_ids() {
            sim.fire_timer(id, gentlerain::GST_TASK).unwrap();
        }
        sim.run_until_quiescent();
        if sim.node_ids().iter().all(|id| sim.node(*id).unwrap().gst() == oracle[&id.replica]) {
            rounds = Some(round);
            break;
        }
    }
    let pass = above == 0 && regress == 0 && rounds.is_some_and(|r| r <= C7_MAX_ROUNDS);
    outcome(
        pass,
        format!(
            "{C7_SNAPSHOTS} snapshots x 6 nodes: {above} above oracle, {regress} regressions; exact after {} round(s)",
            rounds.map_or("more than 3".to_string(), |r| r.to_string())
        ),
    )
}

// 8. Amplification counting.

fn criterion_8() -> Outcome {
    let clients = local_clients(2, 1);
    let mut parts = Vec::new();
    let mut pass = true;
    for kind in [ProtocolKind::Eventual, ProtocolKind::GentleRain] {
        for f in C8_FACTORS {
            let spec = WorkloadSpec { amplification_factor: f, ..mixed(0.5, 200, 2) };
            let r = with_protocol!(kind, P, _C => {
                run_sim_workload::<P>(&cluster(kind), SimConfig::seeded(f as u64), &clients, &spec, 0)
                    .map(|(sim, reports)| {
                        let macro_puts = sim.ops().iter().filter(|o| o.kind == OpKind::Put).count() as u64;
                        let wire = sim.stats().client_requests.get(&OpKind::Put).copied().unwrap_or(0);
                        (macro_puts, wire, reports)
                    })
            });
            let Ok((macro_puts, wire, reports)) = r else { return outcome(false, "run failed") };
            let ops: u64 = reports.iter().map(|r| r.operations).sum();
            let reported_puts: u64 = reports.iter().map(|r| r.put_requests).sum();
            let tput_ok = reports.iter().all(|r| {
                let expect = (r.operations - r.failures()) as f64 / (r.wall_ms / 1e3);
                ((r.throughput - expect) / expect).abs() <= THROUGHPUT_REL_TOL
            });
            let ok = wire == f as u64 * macro_puts
                && reported_puts == wire
                && ops == (spec.operation_count * spec.thread_count * clients.len()) as u64
                && tput_ok;
            pass &= ok;
            parts.push(format!("{kind} f={f}: {wire} wire puts / {macro_puts} macro"));
        }
    }
    outcome(pass, parts.join(", "))
}

// 9. Reliable FIFO under link faults.

protokv::message! {
    pub struct Num {
        1 => pub n: u64,
    }
}

protokv::oneof! {
    pub enum RelayMsg {
        1 => Num(Num),
    }
}

/// Records the order numbered messages arrive in.
struct Relay {
    store: Storage<Num>,
    seen: Mutex<Vec<(NodeId, u64)>>,
}

struct RelayClient(ClientSetup);

impl Protocol for Relay {
    const NAME: &'static str = "relay";
    type ServerMsg = RelayMsg;
    type ClientMsg = RelayMsg;
    type Reply = Num;
    type Client = RelayClient;

    fn build(_: &ServerConfig) -> Result<Self, ConfigError> {
        Ok(Relay { store: Storage::in_memory(Versioning::Single, |a, b| a.n.cmp(&b.n)), seen: Mutex::new(Vec::new()) })
    }

    fn handle_client(&self, ctx: &dyn Context<Self>, agent: ReplyAgent, _: RelayMsg) {
        let _ = ctx.send_reply(&agent, &Num { n: 0 });
    }

    fn handle_server(&self, _: &dyn Context<Self>, from: NodeId, RelayMsg::Num(m): RelayMsg) {
        self.seen.lock().push((from, m.n));
    }

    fn store(&self) -> &dyn ReplicatedStore {
        &self.store
    }

    fn classify(_: &RelayMsg) -> OpKind {
        OpKind::Other
    }

    fn heads(&self) -> BTreeMap<String, Vec<u8>> {
        BTreeMap::new()
    }
}

impl ProtocolClient for RelayClient {
    type Protocol = Relay;
    fn new(setup: ClientSetup) -> Self {
        RelayClient(setup)
    }
    fn setup(&self) -> &ClientSetup {
        &self.0
    }
    fn put_request(&mut self, _: &str, _: Vec<u8>) -> RelayMsg {
        RelayMsg::Num(Num { n: 0 })
    }
    fn put_complete(&mut self, _: Num) -> Result<PutOutcome, ClientError> {
        Ok(PutOutcome { meta: String::new() })
    }
    fn get_request(&mut self, _: &str) -> RelayMsg {
        RelayMsg::Num(Num { n: 0 })
    }
    fn get_complete(&mut self, _: Num) -> Result<GetOutcome, ClientError> {
        Ok(GetOutcome { value: None, meta: String::new() })
    }
}

fn relay_cluster(cfg: SimConfig, replicas: u32) -> Sim<Relay> {
    Sim::cluster(cfg, ClusterShape::new(replicas, 1), TreeShape::Star, |_| {}).unwrap()
}

type Channel = (NodeId, NodeId);

/// Per-channel received sequence, per-channel sent count, frames dropped.
type FifoRun = (BTreeMap<Channel, Vec<u64>>, BTreeMap<Channel, u64>, u64);

fn fifo_run(seed: u64) -> Result<FifoRun, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes: Vec<NodeId> = (0..3).map(|r| NodeId::new(r, 0)).collect();
    let mut outages = Vec::new();
    for (i, a) in nodes.iter().enumerate() {
        for b in &nodes[i + 1..] {
            for _ in 0..4 {
                let start = rng.random_range(0..2_500);
                outages.push(Outage { a: *a, b: *b, start_ms: start, end_ms: start + rng.random_range(0..=C9_MAX_OUTAGE_MS) });
            }
        }
    }
    let cfg = SimConfig { outages, queue_capacity: C9_CAPACITY, resend_interval_ms: 40, ..SimConfig::seeded(seed) };
    let mut sim = relay_cluster(cfg, 3);
    let mut sent: BTreeMap<(NodeId, NodeId), u64> = BTreeMap::new();
    for _ in 0..C9_MESSAGES {
        sim.run_for(rng.random_range(0..6));
        let a = nodes[rng.random_range(0..3)];
        let b = loop {
            let b = nodes[rng.random_range(0..3)];
            if b != a {
                break b;
            }
        };
        let n = sent.entry((a, b)).or_insert(0);
        *n += 1;
        sim.inject_server_message(a, b, &RelayMsg::Num(Num { n: *n })).map_err(|e| e.to_string())?;
    }
    if !sim.run_until_quiescent().quiescent {
        return Err("did not drain".into());
    }
    let mut got: BTreeMap<(NodeId, NodeId), Vec<u64>> = BTreeMap::new();
    for b in &nodes {
        for (from, n) in sim.node(*b).unwrap().seen.lock().iter() {
            got.entry((*from, *b)).or_default().push(*n);
        }
    }
    Ok((got, sent, sim.stats().frames_dropped))
}

fn queue_full_index() -> (Option<usize>, usize, bool) {
    let (a, b) = (NodeId::new(0, 0), NodeId::new(1, 0));
    let cfg = SimConfig {
        outages: vec![Outage { a, b, start_ms: 0, end_ms: 300 }],
        queue_capacity: C9_SMALL_CAPACITY,
        resend_interval_ms: 40,
        ..SimConfig::seeded(1)
    };
    let mut sim = relay_cluster(cfg, 2);
    let mut first_full = None;
    for i in 0..C9_SMALL_CAPACITY + 4 {
        match sim.inject_server_message(a, b, &RelayMsg::Num(Num { n: i as u64 + 1 })) {
            Ok(_) => {}
            Err(SimError::Send(SendError::QueueFull { capacity, .. })) if capacity == C9_SMALL_CAPACITY => {
                first_full.get_or_insert(i);
            }
            Err(e) => panic!("unexpected {e}"),
        }
    }
    sim.run_until_quiescent();
    let seen: Vec<u64> = sim.node(b).unwrap().seen.lock().iter().map(|(_, n)| *n).collect();
    let in_order = seen == (1..=C9_SMALL_CAPACITY as u64).collect::<Vec<_>>();
    (first_full, seen.len(), in_order)
}

fn criterion_9() -> Outcome {
    let mut dropped = 0;
    for seed in 0..3 {
        match fifo_run(seed) {
            Ok((got, sent, d)) => {
                dropped += d;
                for (chan, count) in &sent {
                    let expect: Vec<u64> = (1..=*count).collect();
                    if got.get(chan) != Some(&expect) {
                        return outcome(false, format!("seed {seed}: channel {}->{} out of order or lossy", chan.0, chan.1));
                    }
                }
            }
            Err(e) => return outcome(false, e),
        }
    }
    let (first, delivered, in_order) = queue_full_index();
    let again = queue_full_index();
    let pass = first == Some(C9_SMALL_CAPACITY) && again.0 == first && in_order && delivered == C9_SMALL_CAPACITY;
    outcome(
        pass,
        format!(
            "3 seeds x {C9_MESSAGES} messages delivered in order with {dropped} frames dropped by outages; \
             capacity {C9_SMALL_CAPACITY}: first queue-full at message {} (repeat run {}), {delivered} delivered in order",
            first.map_or("none".into(), |i| (i + 1).to_string()),
            again.0.map_or("none".into(), |i| (i + 1).to_string()),
        ),
    )
}

// 10. Codec round trips.

fn gen_u64(rng: &mut ChaCha8Rng) -> u64 {
    match rng.random_range(0..4) {
        0 => rng.random_range(0..128),
        1 => rng.random_range(0..1 << 21),
        2 => rng.random(),
        _ => u64::MAX - rng.random_range(0..3),
    }
}

fn gen_scalar(kind: FieldKind, rng: &mut ChaCha8Rng, depth: u32, nonzero: bool) -> DynValue {
    loop {
        let v = match kind {
            FieldKind::U64 => DynValue::U64(gen_u64(rng)),
            FieldKind::U32 => DynValue::U32(gen_u64(rng) as u32),
            FieldKind::I64 => DynValue::I64(gen_u64(rng) as i64),
            FieldKind::Bool => DynValue::Bool(rng.random_bool(0.5)),
            FieldKind::F64 => {
                // Finite and without negative zero, which compares equal to
                // zero but encodes differently.
                let x: f64 = rng.random_range(-1e9..1e9);
                DynValue::F64(if x == 0.0 { 0.0 } else { x })
            }
            FieldKind::String => {
                let len = rng.random_range(0..12);
                let alphabet = ['a', 'z', '0', '_', '/', 'é', 'ß', '中', '🙂'];
                DynValue::Str((0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect())
            }
            FieldKind::Bytes => {
                let len = rng.random_range(0..40);
                DynValue::Bytes((0..len).map(|_| rng.random()).collect())
            }
            FieldKind::Message(schema) => DynValue::Message(gen_message(schema(), rng, depth + 1)),
        };
        let zero = match &v {
            DynValue::U64(x) => *x == 0,
            DynValue::U32(x) => *x == 0,
            DynValue::I64(x) => *x == 0,
            DynValue::Bool(x) => !*x,
            DynValue::F64(x) => *x == 0.0,
            DynValue::Str(s) => s.is_empty(),
            DynValue::Bytes(b) => b.is_empty(),
            _ => false,
        };
        if !(nonzero && zero) {
            return v;
        }
    }
}

fn gen_message(schema: &'static MessageSchema, rng: &mut ChaCha8Rng, depth: u32) -> DynMessage {
    let mut m = DynMessage::default();
    for group in schema.oneofs {
        let tag = group.tags[rng.random_range(0..group.tags.len())];
        let field = schema.field(tag).expect("oneof member declared");
        m.fields.insert(tag, gen_scalar(field.kind, rng, depth, false));
    }
    for f in schema.fields {
        if schema.oneof_for(f.tag).is_some() {
            continue;
        }
        let nested = matches!(f.kind, FieldKind::Message(_));
        match f.label {
            Label::Repeated => {
                let max = if nested && depth > 2 { 1 } else { 5 };
                let n = rng.random_range(0..max);
                if n > 0 {
                    m.fields.insert(f.tag, DynValue::List((0..n).map(|_| gen_scalar(f.kind, rng, depth, false)).collect()));
                }
            }
            Label::Singular => {
                if f.required || (rng.random_bool(0.75) && !(nested && depth > 3)) {
                    m.fields.insert(f.tag, gen_scalar(f.kind, rng, depth, f.required));
                }
            }
        }
    }
    m
}

/// Mutates one field of `m`, possibly to an equal value.
fn perturb(schema: &'static MessageSchema, m: &DynMessage, rng: &mut ChaCha8Rng) -> DynMessage {
    let mut out = m.clone();
    if schema.fields.is_empty() {
        return out;
    }
    let f = &schema.fields[rng.random_range(0..schema.fields.len())];
    if schema.oneof_for(f.tag).is_some() {
        return gen_message(schema, rng, 1);
    }
    match f.label {
        Label::Repeated => {
            out.fields.insert(f.tag, DynValue::List(vec![gen_scalar(f.kind, rng, 3, false)]));
        }
        Label::Singular => {
            out.fields.insert(f.tag, gen_scalar(f.kind, rng, 3, f.required));
        }
    }
    out
}

fn codec_check<M: Message + PartialEq + Debug>(seed: u64) -> Result<(), String> {
    let schema = M::schema();
    schema.validate_deep().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut equal_pairs = 0;
    for i in 0..C10_SAMPLES {
        let g = gen_message(schema, &mut rng, 0);
        let bytes = dynamic::encode(schema, &g).map_err(|e| format!("{}: sample {i}: {e}", schema.name))?;
        let typed = M::decode(&bytes).map_err(|e| format!("{}: sample {i}: {e}", schema.name))?;
        let again = typed.encode();
        if again != bytes {
            return Err(format!("{}: sample {i}: typed re-encoding differs", schema.name));
        }
        if dynamic::encode(schema, &typed.to_dyn()).ok().as_ref() != Some(&bytes) {
            return Err(format!("{}: sample {i}: to_dyn differs", schema.name));
        }
        let d = dynamic::decode(schema, &bytes).map_err(|e| e.to_string())?;
        if dynamic::encode(schema, &d).ok().as_ref() != Some(&bytes) {
            return Err(format!("{}: sample {i}: dynamic re-encoding differs", schema.name));
        }
        // Canonical encoding: equal values exactly when equal bytes.
        let other = if rng.random_bool(0.5) { perturb(schema, &g, &mut rng) } else { g.clone() };
        let Ok(other_bytes) = dynamic::encode(schema, &other) else { continue };
        let other_typed = M::decode(&other_bytes).map_err(|e| e.to_string())?;
        if (other_typed == typed) != (other_bytes == bytes) {
            return Err(format!("{}: sample {i}: equality and encoding disagree", schema.name));
        }
        equal_pairs += (other_bytes == bytes) as usize;
    }
    if equal_pairs == 0 {
        return Err(format!("{}: equality side never exercised", schema.name));
    }
    Ok(())
}

type Check = (&'static str, fn(u64) -> Result<(), String>);

macro_rules! checks {
    ($($ty:path),* $(,)?) => {
        vec![$((stringify!($ty), codec_check::<$ty> as fn(u64) -> Result<(), String>)),*]
    };
}

fn criterion_10() -> Outcome {
    let all: Vec<Check> = checks![
        envelope::ServerFrame,
        envelope::StorageFrame,
        envelope::ClientFrame,
        envelope::ReplyFrame,
        envelope::Hello,
        envelope::Ack,
        envelope::Ping,
        envelope::Pong,
        envelope::StatusRequest,
        envelope::PeerStatus,
        envelope::StatusReport,
        envelope::Envelope,
        history::VersionRef,
        history::PutEvent,
        history::GetEvent,
        history::AppliedEvent,
        history::HistoryEvent,
        sim::TraceEvent,
        eventual::EcRecord,
        eventual::EcGet,
        eventual::EcPut,
        eventual::EcClientMessage,
        eventual::EcReplicate,
        eventual::EcServerMessage,
        eventual::EcGetReply,
        eventual::EcPutReply,
        eventual::EcReply,
        cops::CopsRecord,
        cops::Dependency,
        cops::CopsGet,
        cops::CopsPutAfter,
        cops::CopsClientMessage,
        cops::CopsReplicate,
        cops::CopsDepCheck,
        cops::CopsDepAck,
        cops::CopsServerMessage,
        cops::CopsGetReply,
        cops::CopsPutReply,
        cops::CopsReply,
        gentlerain::GrRecord,
        gentlerain::GetMessage,
        gentlerain::PutMessage,
        gentlerain::GrClientMessage,
        gentlerain::GetReply,
        gentlerain::PutReply,
        gentlerain::GrReply,
        gentlerain::ReplicateMessage,
        gentlerain::HeartbeatMessage,
        gentlerain::VvMessage,
        gentlerain::GstMessage,
        gentlerain::GrServerMessage,
        causalspartan::CsRecord,
        causalspartan::CsGet,
        causalspartan::CsPut,
        causalspartan::CsClientMessage,
        causalspartan::CsGetReply,
        causalspartan::CsPutReply,
        causalspartan::CsReply,
        causalspartan::CsReplicate,
        causalspartan::CsHeartbeat,
        causalspartan::CsVv,
        causalspartan::CsDsv,
        causalspartan::CsServerMessage,
    ];
    let n = all.len();
    let errors: Vec<String> = std::thread::scope(|s| {
        let handles: Vec<_> = all
            .chunks(n.div_ceil(8))
            .enumerate()
            .map(|(i, chunk)| {
                s.spawn(move || {
                    chunk
                        .iter()
                        .enumerate()
                        .filter_map(|(j, (name, f))| f((i * 100 + j) as u64).err().map(|e| format!("{name}: {e}")))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    let detail = if errors.is_empty() {
        format!("{n} schemas x {C10_SAMPLES} generated messages round-trip byte-identically; equality matches encoding")
    } else {
        errors.join("; ")
    };
    outcome(errors.is_empty(), detail)
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    type Criterion = (u32, &'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        (1, "causal safety", criterion_1),
        (2, "convergence", criterion_2),
        (3, "put delay under clock skew", criterion_3),
        (4, "throughput ordering", criterion_4),
        (5, "throughput rises with read proportion", criterion_5),
        (6, "dependency list growth", criterion_6),
        (7, "stable time correctness", criterion_7),
        (8, "amplification counting", criterion_8),
        (9, "reliable fifo under faults", criterion_9),
        (10, "codec round trips", criterion_10),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| f == &id.to_string() || name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let r = run();
        let verdict = if r.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} [{name}] {} ({:.1}s)", r.detail, started.elapsed().as_secs_f64());
        failed += (!r.pass) as u32;
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
