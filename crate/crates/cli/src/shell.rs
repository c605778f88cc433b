//! Interactive put/get shell over the active protocol's client.

use std::collections::BTreeMap;
use std::io::{BufRead, IsTerminal, Write};
use std::time::Duration;

use protokv::descriptor::ClusterDescriptor;
use protokv::runtime::tcp::TcpClient;
use protokv::runtime::{ClientSetup, ProtocolClient};
use protokv::{with_protocol, ClusterShape, NodeId};

use crate::{runtime, validation, CliError};

const USAGE: &str = "usage: put <key> <value> | get <key> | connect <replica>_<partition> | quit";

pub fn run(cluster: &ClusterDescriptor, node: NodeId, timeout_ms: u64) -> Result<(), CliError> {
    if cluster.node(node).is_none() {
        return Err(validation(format!("node {node} is not in the descriptor")));
    }
    let servers = cluster.client_addresses();
    let stdin = std::io::stdin();
    let prompt = stdin.is_terminal();
    with_protocol!(cluster.shell_client(), _P, C => {
        let mut sh = Shell::<C>::new(cluster.shape(), servers, node, Duration::from_millis(timeout_ms));
        sh.run(stdin.lock(), &mut std::io::stdout(), prompt).map_err(runtime)
    })
}

/// Renders bytes as hex and lossy UTF-8.
pub fn show_bytes(bytes: &[u8]) -> String {
    let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
    format!("hex={hex} utf8={:?}", String::from_utf8_lossy(bytes))
}

pub struct Shell<C: ProtocolClient> {
    shape: ClusterShape,
    servers: BTreeMap<NodeId, String>,
    timeout: Duration,
    client: TcpClient<C>,
    node: NodeId,
}

impl<C: ProtocolClient> Shell<C> {
    pub fn new(shape: ClusterShape, servers: BTreeMap<NodeId, String>, node: NodeId, timeout: Duration) -> Self {
        let client = Self::connect_to(shape, &servers, node, timeout);
        Shell { shape, servers, timeout, client, node }
    }

    fn connect_to(shape: ClusterShape, servers: &BTreeMap<NodeId, String>, node: NodeId, timeout: Duration) -> TcpClient<C> {
        let client_id = u64::from(std::process::id()) << 16 | u64::from(node.replica);
        TcpClient::new(ClientSetup { client_id, replica: node.replica, shape }, servers.clone(), timeout)
    }

    /// Handles one command line; `None` means quit.
    pub fn execute(&mut self, line: &str) -> Option<String> {
        let mut words = line.split_whitespace();
        let reply = match (words.next(), words.next()) {
            (None, _) => String::new(),
            (Some("quit" | "exit"), None) => return None,
            (Some("help"), None) => USAGE.to_string(),
            (Some("get"), Some(key)) if words.next().is_none() => {
                let via = self.client.state().route(key);
                match self.client.get(key) {
                    Ok(o) => match o.value {
                        Some(v) => format!("{} {} (via {via})", show_bytes(&v), o.meta).replace("  ", " "),
                        None => format!("not found (via {via})"),
                    },
                    Err(e) => format!("error: {e}"),
                }
            }
            (Some("put"), Some(key)) => {
                let value: Vec<&str> = words.collect();
                if value.is_empty() {
                    return Some(USAGE.to_string());
                }
                let via = self.client.state().route(key);
                match self.client.put(key, value.join(" ").into_bytes()) {
                    Ok(o) => format!("ok {} (via {via})", o.meta).replace("  ", " "),
                    Err(e) => format!("error: {e}"),
                }
            }
            (Some("connect"), Some(target)) if words.next().is_none() => match target.parse::<NodeId>() {
                Ok(id) if self.shape.contains(id) => {
                    self.node = id;
                    self.client = Self::connect_to(self.shape, &self.servers, id, self.timeout);
                    format!("attached to replica {}", id.replica)
                }
                Ok(id) => format!("error: {id} is not in the cluster"),
                Err(e) => format!("error: {e}"),
            },
            _ => USAGE.to_string(),
        };
        Some(reply)
    }

    pub fn run(&mut self, input: impl BufRead, out: &mut impl Write, prompt: bool) -> std::io::Result<()> {
        let mut lines = input.lines();
        loop {
            if prompt {
                write!(out, "{}> ", self.node)?;
                out.flush()?;
            }
            let Some(line) = lines.next() else { return Ok(()) };
            match self.execute(&line?) {
                None => return Ok(()),
                Some(r) if r.is_empty() => {}
                Some(r) => writeln!(out, "{r}")?,
            }
        }
    }
}
