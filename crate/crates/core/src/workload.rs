//! YCSB-style workloads: operation mix, key choice, tagged values and
//! amplified inserts, plus per-client metrics reports and the small query
//! language used to aggregate them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;
use serde::{Deserialize, Serialize};

use crate::history::{make_tag, tagged_value};
use crate::node::NodeId;
use crate::runtime::tcp::TcpClient;
use crate::runtime::{ClientSetup, OpKind, ProtocolClient};
use crate::sim::{SessionOp, Step};

pub const DEFAULT_ZIPF_THETA: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorkloadError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("unknown property {0:?}")]
    UnknownProperty(String),
    #[error("property {name}: bad value {value:?}")]
    BadValue { name: String, value: String },
    #[error("invalid workload: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum KeyDistribution {
    Uniform,
    Zipfian { theta: f64 },
}

impl Default for KeyDistribution {
    fn default() -> Self {
        KeyDistribution::Zipfian { theta: DEFAULT_ZIPF_THETA }
    }
}

impl fmt::Display for KeyDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyDistribution::Uniform => write!(f, "uniform"),
            KeyDistribution::Zipfian { .. } => write!(f, "zipfian"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub name: String,
    pub read_proportion: f64,
    pub insert_proportion: f64,
    pub value_size: usize,
    pub thread_count: usize,
    /// Operations per thread.
    pub operation_count: usize,
    pub key_count: usize,
    pub key_distribution: KeyDistribution,
    pub amplification_factor: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            name: "default".into(),
            read_proportion: 0.5,
            insert_proportion: 0.5,
            value_size: 64,
            thread_count: 1,
            operation_count: 1000,
            key_count: 1000,
            key_distribution: KeyDistribution::default(),
            amplification_factor: 1,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let unit = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(WorkloadError::Invalid(format!("{name} {p} outside [0, 1]")))
            }
        };
        unit("read_proportion", self.read_proportion)?;
        unit("insert_proportion", self.insert_proportion)?;
        if self.read_proportion + self.insert_proportion > 1.0 + 1e-9 {
            return Err(WorkloadError::Invalid("proportions sum above 1".into()));
        }
        if self.read_proportion + self.insert_proportion <= 0.0 {
            return Err(WorkloadError::Invalid("no operations selected".into()));
        }
        if self.amplification_factor < 1 {
            return Err(WorkloadError::Invalid("amplification_factor must be at least 1".into()));
        }
        if self.key_count == 0 || self.thread_count == 0 {
            return Err(WorkloadError::Invalid("key_count and thread_count must be positive".into()));
        }
        if let KeyDistribution::Zipfian { theta } = self.key_distribution {
            if !(theta > 0.0 && theta.is_finite()) {
                return Err(WorkloadError::Invalid(format!("zipfian theta {theta}")));
            }
        }
        Ok(())
    }

    /// Probability that an operation is a get; the two proportions are
    /// rescaled to sum to one.
    pub fn get_probability(&self) -> f64 {
        self.read_proportion / (self.read_proportion + self.insert_proportion)
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn from_properties(text: &str) -> Result<Self, WorkloadError> {
        let mut spec = WorkloadSpec::default();
        let mut theta = DEFAULT_ZIPF_THETA;
        let mut dist = "zipfian".to_string();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, value) = line.split_once('=').ok_or(WorkloadError::Syntax { line: i + 1 })?;
            let (name, value) = (name.trim(), value.trim());
            fn parse<T: FromStr>(name: &str, value: &str) -> Result<T, WorkloadError> {
                value.parse().map_err(|_| WorkloadError::BadValue { name: name.into(), value: value.into() })
            }
            match name {
                "name" => spec.name = value.to_string(),
                "readproportion" | "read_proportion" => spec.read_proportion = parse(name, value)?,
                "insertproportion" | "insert_proportion" => spec.insert_proportion = parse(name, value)?,
                "valuesize" | "value_size" | "fieldlength" => spec.value_size = parse(name, value)?,
                "threadcount" | "thread_count" | "threads" => spec.thread_count = parse(name, value)?,
                "operationcount" | "operation_count" => spec.operation_count = parse(name, value)?,
                "recordcount" | "key_count" => spec.key_count = parse(name, value)?,
                "requestdistribution" | "key_distribution" => dist = value.to_string(),
                "zipfian_theta" | "zipfianconstant" => theta = parse(name, value)?,
                "amplification_factor" | "amplificationfactor" => spec.amplification_factor = parse(name, value)?,
                other => return Err(WorkloadError::UnknownProperty(other.to_string())),
            }
        }
        spec.key_distribution = match dist.as_str() {
            "uniform" => KeyDistribution::Uniform,
            "zipfian" => KeyDistribution::Zipfian { theta },
            other => return Err(WorkloadError::BadValue { name: "key_distribution".into(), value: other.into() }),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_properties(&self) -> String {
        let mut out = format!(
            "name={}\nread_proportion={}\ninsert_proportion={}\nvalue_size={}\nthread_count={}\noperation_count={}\nkey_count={}\nkey_distribution={}\namplification_factor={}\n",
            self.name,
            self.read_proportion,
            self.insert_proportion,
            self.value_size,
            self.thread_count,
            self.operation_count,
            self.key_count,
            self.key_distribution,
            self.amplification_factor,
        );
        if let KeyDistribution::Zipfian { theta } = self.key_distribution {
            out.push_str(&format!("zipfian_theta={theta}\n"));
        }
        out
    }

    pub fn key_name(&self, index: usize) -> String {
        let width = (self.key_count.max(2) - 1).to_string().len();
        format!("user{index:0width$}")
    }
}

enum KeyChooser {
    Uniform(usize),
    Zipf(Zipf<f64>),
}

/// Deterministic operation stream of one worker.
pub struct OpGenerator {
    spec: WorkloadSpec,
    session: u64,
    rng: ChaCha8Rng,
    keys: KeyChooser,
    issued: usize,
    writes: u64,
}

impl OpGenerator {
    pub fn new(spec: &WorkloadSpec, session: u64, seed: u64) -> Self {
        let keys = match spec.key_distribution {
            KeyDistribution::Uniform => KeyChooser::Uniform(spec.key_count),
            KeyDistribution::Zipfian { theta } => match Zipf::new(spec.key_count as f64, theta) {
                Ok(z) => KeyChooser::Zipf(z),
                Err(_) => KeyChooser::Uniform(spec.key_count),
            },
        };
        let stream = seed ^ session.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        OpGenerator { spec: spec.clone(), session, rng: ChaCha8Rng::seed_from_u64(stream), keys, issued: 0, writes: 0 }
    }

    fn next_key(&mut self) -> String {
        let index = match &self.keys {
            KeyChooser::Uniform(n) => self.rng.random_range(0..*n),
            KeyChooser::Zipf(z) => (z.sample(&mut self.rng) as usize).saturating_sub(1),
        };
        self.spec.key_name(index)
    }

    fn next_value(&mut self) -> Vec<u8> {
        self.writes += 1;
        tagged_value(make_tag(self.session, self.writes), self.spec.value_size)
    }
}

impl Iterator for OpGenerator {
    type Item = SessionOp;

    fn next(&mut self) -> Option<SessionOp> {
        if self.issued >= self.spec.operation_count {
            return None;
        }
        self.issued += 1;
        let key = self.next_key();
        if self.rng.random_bool(self.spec.get_probability().clamp(0.0, 1.0)) {
            return Some(SessionOp::get(key));
        }
        let f = self.spec.amplification_factor.max(1);
        let puts = (0..f)
            .map(|i| {
                let k = if i == 0 { key.clone() } else { format!("{key}.{i}") };
                (k, self.next_value())
            })
            .collect();
        Some(SessionOp::amplified(puts))
    }
}

/// Outcome of one client operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpSample {
    pub kind: OpKind,
    pub latency_us: f64,
    pub ok: bool,
    /// Requests sent for the operation.
    pub requests: u32,
    pub deps: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencySummary {
    pub count: u64,
    pub failures: u64,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencySummary {
    fn from_samples<'a>(samples: impl Iterator<Item = &'a OpSample>) -> Self {
        let mut lat = Vec::new();
        let mut failures = 0;
        for s in samples {
            if s.ok {
                lat.push(s.latency_us);
            } else {
                failures += 1;
            }
        }
        lat.sort_by(f64::total_cmp);
        let mean = if lat.is_empty() { 0.0 } else { lat.iter().sum::<f64>() / lat.len() as f64 };
        LatencySummary {
            count: lat.len() as u64 + failures,
            failures,
            mean_us: mean,
            p50_us: percentile(&lat, 50.0),
            p95_us: percentile(&lat, 95.0),
            p99_us: percentile(&lat, 99.0),
            max_us: lat.last().copied().unwrap_or(0.0),
        }
    }
}

/// Measurements of one client: its worker threads against one replica.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsReport {
    pub client: String,
    pub protocol: String,
    pub workload: String,
    pub replica: u32,
    pub repetition: u32,
    pub threads: u64,
    /// Client operations; an amplified insert counts once.
    pub operations: u64,
    /// Put requests sent, counting each step of an amplified insert.
    pub put_requests: u64,
    pub wall_ms: f64,
    /// Completed client operations per second.
    pub throughput: f64,
    pub mean_deps_per_put: f64,
    pub get: LatencySummary,
    pub put: LatencySummary,
}

impl MetricsReport {
    pub fn from_samples(samples: &[OpSample], wall: Duration, threads: u64) -> Self {
        let gets = samples.iter().filter(|s| s.kind == OpKind::Get);
        let puts: Vec<&OpSample> = samples.iter().filter(|s| s.kind == OpKind::Put).collect();
        let put_requests: u64 = puts.iter().map(|s| s.requests as u64).sum();
        let deps: u64 = puts.iter().map(|s| s.deps).sum();
        let wall_ms = wall.as_secs_f64() * 1e3;
        let completed = samples.iter().filter(|s| s.ok).count() as f64;
        MetricsReport {
            threads,
            operations: samples.len() as u64,
            put_requests,
            wall_ms,
            throughput: if wall_ms > 0.0 { completed / (wall_ms / 1e3) } else { 0.0 },
            mean_deps_per_put: if put_requests > 0 { deps as f64 / put_requests as f64 } else { 0.0 },
            get: LatencySummary::from_samples(gets),
            put: LatencySummary::from_samples(puts.into_iter()),
            ..Default::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn failures(&self) -> u64 {
        self.get.failures + self.put.failures
    }

    /// Named numeric measurement, as used by queries.
    pub fn metric(&self, name: &str) -> Option<f64> {
        let lat = |s: &LatencySummary, field: &str| match field {
            "mean" | "latency" => Some(s.mean_us),
            "p50" => Some(s.p50_us),
            "p95" => Some(s.p95_us),
            "p99" => Some(s.p99_us),
            "max" => Some(s.max_us),
            "count" => Some(s.count as f64),
            "failures" => Some(s.failures as f64),
            _ => None,
        };
        match name {
            "throughput" => Some(self.throughput),
            "wall_ms" => Some(self.wall_ms),
            "operations" => Some(self.operations as f64),
            "put_requests" => Some(self.put_requests as f64),
            "failures" => Some(self.failures() as f64),
            "threads" => Some(self.threads as f64),
            "mean_deps_per_put" | "deps_per_put" => Some(self.mean_deps_per_put),
            "get_count" => Some(self.get.count as f64),
            "put_count" => Some(self.put.count as f64),
            _ => {
                let (op, rest) = name.split_once('_')?;
                let field = rest.strip_prefix("latency_").unwrap_or(rest);
                match op {
                    "get" => lat(&self.get, field),
                    "put" => lat(&self.put, field),
                    _ => None,
                }
            }
        }
    }

    /// Label used by `where` filters.
    pub fn label(&self, name: &str) -> Option<String> {
        match name {
            "client" => Some(self.client.clone()),
            "protocol" => Some(self.protocol.clone()),
            "workload" => Some(self.workload.clone()),
            "replica" => Some(self.replica.to_string()),
            "repetition" | "rep" => Some(self.repetition.to_string()),
            _ => None,
        }
    }
}

pub const METRIC_NAMES: &[&str] = &[
    "throughput",
    "wall_ms",
    "operations",
    "put_requests",
    "failures",
    "threads",
    "mean_deps_per_put",
    "get_count",
    "put_count",
    "get_latency",
    "get_latency_p50",
    "get_latency_p95",
    "get_latency_p99",
    "get_latency_max",
    "put_latency",
    "put_latency_p50",
    "put_latency_p95",
    "put_latency_p99",
    "put_latency_max",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggFunc {
    Avg,
    Min,
    Max,
    Sum,
    P50,
    P95,
    P99,
}

impl AggFunc {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "avg" => AggFunc::Avg,
            "min" => AggFunc::Min,
            "max" => AggFunc::Max,
            "sum" => AggFunc::Sum,
            "p50" => AggFunc::P50,
            "p95" => AggFunc::P95,
            "p99" => AggFunc::P99,
            _ => return None,
        })
    }

    pub fn apply(self, values: &[f64]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(match self {
            AggFunc::Avg => values.iter().sum::<f64>() / values.len() as f64,
            AggFunc::Min => sorted[0],
            AggFunc::Max => sorted[sorted.len() - 1],
            AggFunc::Sum => values.iter().sum(),
            AggFunc::P50 => percentile(&sorted, 50.0),
            AggFunc::P95 => percentile(&sorted, 95.0),
            AggFunc::P99 => percentile(&sorted, 99.0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("query error at offset {offset}: {message}")]
pub struct QueryError {
    pub offset: usize,
    pub message: String,
}

/// `FUNC(metric) [where key=value [and key=value ...]]`
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub func: AggFunc,
    pub metric: String,
    pub filters: Vec<(String, String)>,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn skip_ws(&mut self) {
        while self.src[self.pos..].starts_with(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn err(&self, message: impl Into<String>) -> QueryError {
        QueryError { offset: self.pos, message: message.into() }
    }

    fn word(&mut self) -> Result<(usize, &'a str), QueryError> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let len = rest.find(|c: char| !(c.is_alphanumeric() || c == '_' || c == '.' || c == '-')).unwrap_or(rest.len());
        if len == 0 {
            return Err(self.err("expected a name"));
        }
        self.pos += len;
        Ok((start, &rest[..len]))
    }

    fn punct(&mut self, c: char) -> Result<(), QueryError> {
        self.skip_ws();
        if self.src[self.pos..].starts_with(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected '{c}'")))
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos >= self.src.len()
    }
}

impl FromStr for Query {
    type Err = QueryError;

    fn from_str(src: &str) -> Result<Self, QueryError> {
        let mut lx = Lexer { src, pos: 0 };
        let (at, name) = lx.word()?;
        let func = AggFunc::parse(name).ok_or(QueryError { offset: at, message: format!("unknown function {name:?}") })?;
        lx.punct('(')?;
        let (at, metric) = lx.word()?;
        if !METRIC_NAMES.contains(&metric) && MetricsReport::default().metric(metric).is_none() {
            return Err(QueryError { offset: at, message: format!("unknown metric {metric:?}") });
        }
        lx.punct(')')?;
        let mut filters = Vec::new();
        if !lx.at_end() {
            let (at, kw) = lx.word()?;
            if !kw.eq_ignore_ascii_case("where") {
                return Err(QueryError { offset: at, message: "expected 'where'".into() });
            }
            loop {
                let (at, key) = lx.word()?;
                if MetricsReport::default().label(key).is_none() {
                    return Err(QueryError { offset: at, message: format!("unknown label {key:?}") });
                }
                lx.punct('=')?;
                let (_, value) = lx.word()?;
                filters.push((key.to_string(), value.to_string()));
                if lx.at_end() {
                    break;
                }
                let (at, kw) = lx.word()?;
                if !kw.eq_ignore_ascii_case("and") {
                    return Err(QueryError { offset: at, message: "expected 'and'".into() });
                }
            }
        }
        Ok(Query { func, metric: metric.to_string(), filters })
    }
}

impl Query {
    pub fn matches(&self, report: &MetricsReport) -> bool {
        self.filters.iter().all(|(k, v)| report.label(k).as_deref() == Some(v.as_str()))
    }

    /// Aggregate over matching reports; `None` when nothing matches.
    pub fn evaluate(&self, reports: &[MetricsReport]) -> Option<f64> {
        let values: Vec<f64> = reports.iter().filter(|r| self.matches(r)).filter_map(|r| r.metric(&self.metric)).collect();
        self.func.apply(&values)
    }
}

/// Runs `spec` with one thread per worker against TCP servers; `client_id`
/// numbers workers so their sessions and value tags stay distinct.
pub fn run_tcp_workload<C: ProtocolClient>(
    spec: &WorkloadSpec,
    setup: ClientSetup,
    servers: &BTreeMap<NodeId, String>,
    timeout: Duration,
    seed: u64,
) -> MetricsReport {
    let start = Instant::now();
    let samples: Vec<OpSample> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..spec.thread_count)
            .map(|t| {
                let session = setup.client_id * 1_000 + t as u64;
                let worker_setup = ClientSetup { client_id: session, ..setup };
                let servers = servers.clone();
                scope.spawn(move || {
                    let mut client = TcpClient::<C>::new(worker_setup, servers, timeout);
                    let mut out = Vec::new();
                    for op in OpGenerator::new(spec, session, seed) {
                        let began = Instant::now();
                        let mut ok = true;
                        let mut requests = 0;
                        let mut deps = 0;
                        for step in op.steps {
                            requests += 1;
                            let r = match step {
                                Step::Get(k) => client.get(&k).map(|_| ()),
                                Step::Put(k, v) => {
                                    let r = client.put(&k, v).map(|_| ());
                                    deps += client.state().last_put_deps() as u64;
                                    r
                                }
                            };
                            if let Err(e) = r {
                                log::debug!("session {session}: {e}");
                                ok = false;
                                break;
                            }
                        }
                        out.push(OpSample {
                            kind: op.kind,
                            latency_us: began.elapsed().as_secs_f64() * 1e6,
                            ok,
                            requests,
                            deps,
                        });
                    }
                    out
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap_or_default()).collect()
    });
    MetricsReport {
        workload: spec.name.clone(),
        replica: setup.replica,
        ..MetricsReport::from_samples(&samples, start.elapsed(), spec.thread_count as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> WorkloadSpec {
        WorkloadSpec { operation_count: 2000, key_count: 100, ..Default::default() }
    }

    #[test]
    fn properties_round_trip() {
        let s = WorkloadSpec { amplification_factor: 4, key_distribution: KeyDistribution::Uniform, ..spec() };
        assert_eq!(WorkloadSpec::from_properties(&s.to_properties()).unwrap(), s);
        let z = spec();
        assert_eq!(WorkloadSpec::from_properties(&z.to_properties()).unwrap(), z);
        assert!(matches!(WorkloadSpec::from_properties("bogus=1"), Err(WorkloadError::UnknownProperty(_))));
        assert!(matches!(WorkloadSpec::from_properties("read_proportion"), Err(WorkloadError::Syntax { line: 1 })));
        assert!(WorkloadSpec::from_properties("read_proportion=0.9\ninsert_proportion=0.5").is_err());
        assert!(WorkloadSpec::from_properties("amplification_factor=0").is_err());
    }

    #[test]
    fn same_seed_same_ops() {
        let a: Vec<SessionOp> = OpGenerator::new(&spec(), 3, 42).collect();
        let b: Vec<SessionOp> = OpGenerator::new(&spec(), 3, 42).collect();
        let c: Vec<SessionOp> = OpGenerator::new(&spec(), 4, 42).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 2000);
    }

    #[test]
    fn read_only_issues_no_puts() {
        let s = WorkloadSpec { read_proportion: 1.0, insert_proportion: 0.0, ..spec() };
        assert!(OpGenerator::new(&s, 0, 1).all(|op| op.kind == OpKind::Get));
    }

    #[test]
    fn proportions_are_normalized() {
        let s = WorkloadSpec { read_proportion: 0.3, insert_proportion: 0.3, operation_count: 100_000, ..spec() };
        let gets = OpGenerator::new(&s, 0, 9).filter(|op| op.kind == OpKind::Get).count();
        let frac = gets as f64 / 100_000.0;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    /// Chi-square test of the realized mix against the requested one at
    /// 1e5 operations (one degree of freedom, 99.9% critical value 10.83).
    #[test]
    fn realized_mix_passes_chi_square() {
        for read in [0.1, 0.5, 0.9] {
            let s = WorkloadSpec { read_proportion: read, insert_proportion: 1.0 - read, operation_count: 100_000, ..spec() };
            let n = 100_000.0;
            let gets = OpGenerator::new(&s, 1, 5).filter(|op| op.kind == OpKind::Get).count() as f64;
            let puts = n - gets;
            let chi = (gets - n * read).powi(2) / (n * read) + (puts - n * (1.0 - read)).powi(2) / (n * (1.0 - read));
            assert!(chi < 10.83, "read={read} chi={chi}");
            assert!((gets / n - read).abs() < 0.01);
        }
    }

    #[test]
    fn zipf_prefers_low_ranks() {
        let s = WorkloadSpec { read_proportion: 1.0, insert_proportion: 0.0, operation_count: 20_000, ..spec() };
        let mut counts = BTreeMap::new();
        for op in OpGenerator::new(&s, 0, 2) {
            *counts.entry(op.steps[0].key().to_string()).or_insert(0) += 1;
        }
        assert!(counts["user00"] > counts.get("user50").copied().unwrap_or(0) * 10);
        assert!(counts.keys().all(|k| k.len() == 6));
    }

    #[test]
    fn amplified_insert_expands_keys() {
        let s = WorkloadSpec { read_proportion: 0.0, insert_proportion: 1.0, amplification_factor: 3, ..spec() };
        let op = OpGenerator::new(&s, 0, 2).next().unwrap();
        let keys: Vec<&str> = op.steps.iter().map(|s| s.key()).collect();
        assert_eq!(keys.len(), 3);
        assert_eq!(keys[1], format!("{}.1", keys[0]));
        assert_eq!(keys[2], format!("{}.2", keys[0]));
        let tags: Vec<u64> = op
            .steps
            .iter()
            .map(|s| match s {
                Step::Put(_, v) => crate::history::value_tag(v),
                _ => 0,
            })
            .collect();
        assert_eq!(tags, vec![make_tag(0, 1), make_tag(0, 2), make_tag(0, 3)]);
    }

    #[test]
    fn report_counts_and_latencies() {
        let sample = |kind, latency_us, ok| OpSample { kind, latency_us, ok, requests: 2, deps: 3 };
        let r = MetricsReport::from_samples(
            &[
                sample(OpKind::Get, 100.0, true),
                sample(OpKind::Get, 300.0, true),
                sample(OpKind::Put, 50.0, true),
                sample(OpKind::Put, 0.0, false),
            ],
            Duration::from_secs(2),
            1,
        );
        assert_eq!(r.operations, 4);
        assert_eq!(r.get.count + r.put.count, 4);
        assert_eq!(r.put.failures, 1);
        assert_eq!(r.get.mean_us, 200.0);
        assert_eq!(r.get.p50_us, 100.0);
        assert_eq!(r.throughput, 1.5);
        assert_eq!(r.put_requests, 4);
        assert_eq!(r.mean_deps_per_put, 1.5);
        assert_eq!(MetricsReport::from_toml(&r.to_toml()).unwrap(), r);
    }

    fn report(replica: u32, throughput: f64, p95: f64) -> MetricsReport {
        MetricsReport { replica, throughput, put: LatencySummary { p95_us: p95, ..Default::default() }, ..Default::default() }
    }

    #[test]
    fn query_evaluation() {
        let same = vec![report(0, 7.0, 1.0), report(0, 7.0, 1.0), report(0, 7.0, 1.0)];
        assert_eq!("avg(throughput)".parse::<Query>().unwrap().evaluate(&same), Some(7.0));
        let mixed = vec![report(0, 1.0, 5.0), report(0, 2.0, 9.0), report(1, 3.0, 20.0)];
        let q: Query = "max(put_latency_p95) where replica=0".parse().unwrap();
        assert_eq!(q.evaluate(&mixed), Some(9.0));
        assert_eq!("sum(throughput)".parse::<Query>().unwrap().evaluate(&mixed), Some(6.0));
        assert_eq!("min(throughput) where replica=7".parse::<Query>().unwrap().evaluate(&mixed), None);
    }

    #[test]
    fn query_errors_carry_offsets() {
        assert_eq!("avg(".parse::<Query>().unwrap_err().offset, 4);
        assert_eq!("mode(throughput)".parse::<Query>().unwrap_err().offset, 0);
        assert_eq!("avg(speed)".parse::<Query>().unwrap_err().offset, 4);
        assert_eq!("avg(throughput".parse::<Query>().unwrap_err().offset, 14);
        assert_eq!("avg(throughput) when".parse::<Query>().unwrap_err().offset, 16);
        assert_eq!("avg(throughput) where colour=red".parse::<Query>().unwrap_err().offset, 22);
    }
}
