//! Launching, stopping and monitoring servers.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use protokv::descriptor::{ClusterDescriptor, SimSettings};
use protokv::experiment::build_sim;
use protokv::runtime::envelope::StatusReport;
use protokv::runtime::tcp::{query_status, start_server};
use protokv::runtime::Protocol;
use protokv::{with_protocol, NodeId};
use serde::{Deserialize, Serialize};

use crate::{runtime, validation, CliError};

/// Process ids of launched servers.
#[derive(Debug, Default, Serialize, Deserialize)]
struct LaunchState {
    #[serde(default)]
    servers: Vec<Launched>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Launched {
    node: NodeId,
    pid: u32,
    log: PathBuf,
}

pub fn state_path(descriptor: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| descriptor.with_extension("state.toml"))
}

fn read_state(path: &Path) -> Result<LaunchState, CliError> {
    match std::fs::read_to_string(path) {
        Ok(text) => toml::from_str(&text).map_err(|e| validation(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(LaunchState::default()),
        Err(e) => Err(runtime(format!("{}: {e}", path.display()))),
    }
}

fn alive(pid: u32) -> bool {
    // SAFETY: signal 0 only checks for existence.
    if unsafe { libc::kill(pid as libc::pid_t, 0) } != 0 {
        return false;
    }
    // Unreaped children still accept signal 0.
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => !stat.rsplit_once(')').is_some_and(|(_, rest)| rest.trim_start().starts_with('Z')),
        Err(_) => true,
    }
}

fn last_line(path: &Path) -> String {
    std::fs::read_to_string(path)
        .ok()
        .and_then(|s| s.lines().rev().find(|l| !l.trim().is_empty()).map(str::to_string))
        .unwrap_or_else(|| "exited without output".into())
}

/// Spawns one `serve` process per node and waits until each answers a status
/// request. Nodes that fail are named; the others keep running.
pub fn start(descriptor: &Path, cluster: &ClusterDescriptor, state: &Path, wait_ms: u64) -> Result<(), CliError> {
    let previous = read_state(state)?;
    if previous.servers.iter().any(|s| alive(s.pid)) {
        return Err(validation(format!("cluster already running ({}); stop it first", state.display())));
    }
    let exe = std::env::current_exe().map_err(runtime)?;
    let descriptor = descriptor.canonicalize().map_err(runtime)?;
    let log_dir = state.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    let mut children: Vec<(NodeId, Child, PathBuf)> = Vec::new();
    let mut failed: Vec<(NodeId, String)> = Vec::new();
    for n in &cluster.nodes {
        let log = log_dir.join(format!("{}-{}.log", cluster.name, n.id));
        let spawned = File::create(&log).and_then(|f| {
            Command::new(&exe)
                .arg("--descriptor")
                .arg(&descriptor)
                .args(["serve", "--node", &n.id.to_string()])
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(f)
                .spawn()
        });
        match spawned {
            Ok(child) => children.push((n.id, child, log)),
            Err(e) => failed.push((n.id, e.to_string())),
        }
    }

    let deadline = Instant::now() + Duration::from_millis(wait_ms);
    let mut pending: Vec<usize> = (0..children.len()).collect();
    while !pending.is_empty() {
        pending.retain(|&i| {
            let (id, child, log) = &mut children[i];
            if let Ok(Some(status)) = child.try_wait() {
                failed.push((*id, format!("{status}: {}", last_line(log))));
                return false;
            }
            let addr = cluster.node(*id).expect("declared").client_addr();
            query_status(&addr, Duration::from_millis(200)).is_err()
        });
        if Instant::now() > deadline {
            for &i in &pending {
                let (id, child, _) = &mut children[i];
                let _ = child.kill();
                failed.push((*id, "no status reply before the deadline".into()));
            }
            break;
        }
        if !pending.is_empty() {
            std::thread::sleep(Duration::from_millis(50));
        }
    }

    let failed_ids: Vec<NodeId> = failed.iter().map(|(id, _)| *id).collect();
    let launched: Vec<Launched> = children
        .iter()
        .filter(|(id, _, _)| !failed_ids.contains(id))
        .map(|(id, c, log)| Launched { node: *id, pid: c.id(), log: log.clone() })
        .collect();
    for l in &launched {
        println!("{} up (pid {})", l.node, l.pid);
    }
    let text = toml::to_string(&LaunchState { servers: launched }).map_err(runtime)?;
    std::fs::write(state, text).map_err(|e| runtime(format!("{}: {e}", state.display())))?;
    if failed.is_empty() {
        println!("{} nodes up, {} directed peer links", cluster.nodes.len(), cluster.directed_links().len());
        return Ok(());
    }
    failed.sort_by_key(|(id, _)| *id);
    for (id, why) in &failed {
        println!("{id} FAILED: {why}");
    }
    let names: Vec<String> = failed.iter().map(|(id, _)| id.to_string()).collect();
    Err(runtime(format!("{} of {} nodes failed to start: {}", failed.len(), cluster.nodes.len(), names.join(", "))))
}

pub fn stop(state: &Path) -> Result<(), CliError> {
    let st = read_state(state)?;
    let running: Vec<&Launched> = st.servers.iter().filter(|s| alive(s.pid)).collect();
    for s in &running {
        // SAFETY: plain signal delivery to a recorded pid.
        unsafe { libc::kill(s.pid as libc::pid_t, libc::SIGTERM) };
    }
    let deadline = Instant::now() + Duration::from_secs(5);
    while running.iter().any(|s| alive(s.pid)) && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(20));
    }
    for s in running.iter().filter(|s| alive(s.pid)) {
        unsafe { libc::kill(s.pid as libc::pid_t, libc::SIGKILL) };
    }
    if state.exists() {
        std::fs::remove_file(state).map_err(runtime)?;
    }
    if running.is_empty() {
        println!("not running");
    } else {
        println!("stopped {} servers", running.len());
    }
    Ok(())
}

/// Long-running server process for one node.
pub fn serve(cluster: &ClusterDescriptor, node: NodeId) -> Result<(), CliError> {
    let cfg = cluster
        .server_configs()
        .into_iter()
        .find(|c| c.node == node)
        .ok_or_else(|| validation(format!("node {node} is not in the descriptor")))?;
    with_protocol!(cluster.protocol, P, _C => {
        let protocol = P::build(&cfg).map_err(validation)?;
        let handle = start_server(cfg, protocol).map_err(runtime)?;
        log::info!("{} serving on {} / {}", handle.node(), handle.client_addr(), handle.server_addr());
        loop {
            std::thread::park();
        }
    })
}

pub fn render_status(id: NodeId, report: &Result<StatusReport, String>) -> String {
    match report {
        Err(e) => format!("{id:<6} down    ({e})\n"),
        Ok(r) => {
            let mut out = format!(
                "{id:<6} up      protocol {} uptime {:.1}s clients {} dropped {} panics {}\n",
                r.protocol,
                r.uptime_ms as f64 / 1e3,
                r.clients_connected,
                r.dropped_envelopes,
                r.handler_panics
            );
            for p in &r.peers {
                let link = if p.connected { "connected" } else { "disconnected" };
                let rtt = if p.rtt_us > 0 { format!("{:.2} ms", p.rtt_us as f64 / 1e3) } else { "-".into() };
                out.push_str(&format!("         -> {:<6} {link:<12} rtt {rtt:<10} queue {} sent {}\n", p.node, p.queue_depth, p.sent));
            }
            out
        }
    }
}

/// Queries every node; unreachable nodes are reported down.
pub fn status(cluster: &ClusterDescriptor, timeout_ms: u64) {
    let timeout = Duration::from_millis(timeout_ms);
    let mut up = 0;
    for n in &cluster.nodes {
        let r = query_status(&n.client_addr(), timeout).map_err(|e| e.to_string());
        up += r.is_ok() as usize;
        print!("{}", render_status(n.id, &r));
    }
    println!("{up} of {} nodes up", cluster.nodes.len());
}

/// Builds the cluster in the simulator, lets it settle and reports it.
pub fn sim_status(cluster: &ClusterDescriptor, seed: u64) -> Result<(), CliError> {
    cluster.validate().map_err(validation)?;
    let cfg = SimSettings::default().sim_config(cluster, seed);
    with_protocol!(cluster.protocol, P, _C => {
        let mut sim = build_sim::<P>(cluster, cfg).map_err(runtime)?;
        sim.run_for(1_000);
        let links = cluster.directed_links();
        for id in sim.node_ids() {
            let out: Vec<String> = links
                .iter()
                .filter(|(a, _)| *a == id)
                .map(|(a, b)| format!("{b}(queue {})", sim.queue_depth(*a, *b)))
                .collect();
            println!("{id:<6} up      {} -> {}", <P as Protocol>::NAME, out.join(" "));
        }
        println!("{} nodes up, {} directed peer links (simulated, {} frames sent)", sim.node_ids().len(), links.len(), sim.stats().frames_sent);
        Ok(())
    })
}
