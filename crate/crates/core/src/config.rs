//! Run configuration and the key-value config file format.
//!
//! ```text
//! # comment
//! seed = 7
//! num_queue_pairs = 16
//! devices[0] = {blocks=65536, block_size=4096, base_latency_ns=70850, parallelism=64, jitter=none}
//! share_table = {enabled=true, buckets=1024}
//! ```
//!
//! Values are integers, floats, booleans or bare words; `{k=v, ...}` is an
//! inline table. Every key must be consumed by the experiment that reads the
//! file, so typos fail loudly.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cache::{BusyEviction, PolicyKind};
use crate::nvme::check_depth;
use crate::sim::{Nanos, SimConfig, TieBreak};
use crate::ssd::{DeviceConfig, Jitter};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("key `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("unknown key(s): {0}")]
    Unknown(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(String),
    Table(BTreeMap<String, String>),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Scalar(s) => f.write_str(s),
            Value::Table(t) => {
                f.write_str("{")?;
                for (i, (k, v)) in t.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{k}={v}")?;
                }
                f.write_str("}")
            }
        }
    }
}

/// Parsed key-value document that tracks which keys were read.
#[derive(Debug, Default)]
pub struct KvDoc {
    entries: BTreeMap<String, Value>,
    used: RefCell<BTreeSet<String>>,
}

fn parse_table(line: usize, body: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut t = BTreeMap::new();
    for part in body.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .or_else(|| part.split_once(':'))
            .ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("expected key=value in table, got `{part}`"),
            })?;
        t.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(t)
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let l = raw.split('#').next().unwrap().trim();
            if l.is_empty() {
                continue;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("expected `key = value`, got `{l}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    msg: "empty key".into(),
                });
            }
            let value = if let Some(body) = v.strip_prefix('{') {
                let body = body.strip_suffix('}').ok_or_else(|| ConfigError::Syntax {
                    line,
                    msg: "unterminated `{`".into(),
                })?;
                Value::Table(parse_table(line, body)?)
            } else {
                Value::Scalar(v.trim_matches('"').to_string())
            };
            if entries.insert(k.to_string(), value).is_some() {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(KvDoc {
            entries,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&Value> {
        let v = self.entries.get(key);
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Scalar(s)) => parse_value(key, s).map(Some),
            Some(Value::Table(_)) => Err(ConfigError::Value {
                key: key.into(),
                msg: "expected a scalar, got a table".into(),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn table(&self, key: &str) -> Result<Option<BTreeMap<String, String>>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Table(t)) => Ok(Some(t.clone())),
            Some(Value::Scalar(_)) => Err(ConfigError::Value {
                key: key.into(),
                msg: "expected a `{...}` table".into(),
            }),
        }
    }

    /// Comma-separated list value.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Scalar(s)) => s
                .trim_start_matches('[')
                .trim_end_matches(']')
                .split(',')
                .map(str::trim)
                .filter(|x| !x.is_empty())
                .map(|x| parse_value(key, x))
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
            Some(Value::Table(_)) => Err(ConfigError::Value {
                key: key.into(),
                msg: "expected a list".into(),
            }),
        }
    }

    /// Indices N of all `prefix[N]` keys, ascending.
    pub fn indexed(&self, prefix: &str) -> Vec<usize> {
        self.entries
            .keys()
            .filter_map(|k| {
                k.strip_prefix(prefix)?
                    .strip_prefix('[')?
                    .strip_suffix(']')?
                    .parse()
                    .ok()
            })
            .collect()
    }

    /// Fails if any key was never read.
    pub fn finish(&self) -> Result<(), ConfigError> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Unknown(unknown.join(", ")))
        }
    }
}

fn parse_value<T: FromStr>(key: &str, s: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    s.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        msg: format!("`{s}`: {e}"),
    })
}

fn table_get<T: FromStr>(t: &BTreeMap<String, String>, key: &str, field: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    t.get(field)
        .map(|s| parse_value(&format!("{key}.{field}"), s))
        .transpose()
}

/// `none`, `uniform:<max_ns>` or `exponential:<mean_ns>`.
pub fn parse_jitter(s: &str) -> Result<Jitter, String> {
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    let num = |a: &str| a.parse::<f64>().map_err(|e| format!("jitter `{s}`: {e}"));
    match kind {
        "none" => Ok(Jitter::None),
        "uniform" => Ok(Jitter::Uniform {
            max_ns: num(arg)? as Nanos,
        }),
        "exponential" | "exp" => {
            let mean_ns = num(arg)?;
            if mean_ns <= 0.0 {
                return Err(format!("jitter `{s}`: mean must be positive"));
            }
            Ok(Jitter::Exponential { mean_ns })
        }
        _ => Err(format!("unknown jitter `{s}`")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShareTableConfig {
    pub enabled: bool,
    pub buckets: usize,
}

impl Default for ShareTableConfig {
    fn default() -> Self {
        ShareTableConfig {
            enabled: false,
            buckets: 1024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgileConfig {
    pub sim: SimConfig,
    pub devices: Vec<DeviceConfig>,
    /// Queue pairs per device.
    pub queue_pairs: usize,
    pub queue_depth: u32,
    pub cache_lines: usize,
    pub policy: PolicyKind,
    pub busy_eviction: BusyEviction,
    pub share_table: ShareTableConfig,
    pub service_warps: usize,
    /// Simulated time of one service sweep over a warp's CQs.
    pub poll_interval_ns: Nanos,
    /// Simulated time to write one submission entry.
    pub sqe_write_ns: Nanos,
    /// Back-off after finding every submission queue full.
    pub retry_backoff_ns: Nanos,
    pub warp_size: usize,
    pub lock_debug: bool,
    /// Abort the run on protocol violations.
    pub strict: bool,
    pub time_limit_ns: Nanos,
}

impl Default for AgileConfig {
    fn default() -> Self {
        AgileConfig {
            sim: SimConfig::default(),
            devices: vec![DeviceConfig::default()],
            queue_pairs: 128,
            queue_depth: 256,
            cache_lines: 4096,
            policy: PolicyKind::Clock,
            busy_eviction: BusyEviction::Wait,
            share_table: ShareTableConfig::default(),
            service_warps: 4,
            poll_interval_ns: 1_000,
            sqe_write_ns: 20,
            retry_backoff_ns: 500,
            warp_size: 32,
            lock_debug: true,
            strict: true,
            time_limit_ns: 60_000_000_000,
        }
    }
}

impl AgileConfig {
    /// One small calibrated device and a modest queue/cache geometry.
    pub fn small() -> Self {
        AgileConfig {
            devices: vec![DeviceConfig::calibrated(4096)],
            queue_pairs: 8,
            queue_depth: 64,
            cache_lines: 256,
            ..AgileConfig::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        self
    }

    pub fn with_trace(mut self, on: bool) -> Self {
        self.sim.trace = on;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.devices.is_empty() {
            return bad("at least one device is required".into());
        }
        if self.devices.len() > u16::MAX as usize {
            return bad("too many devices".into());
        }
        if self.queue_pairs == 0 || self.queue_pairs > u16::MAX as usize {
            return bad(format!("num_queue_pairs {} out of range", self.queue_pairs));
        }
        check_depth(self.queue_depth).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.cache_lines == 0 {
            return bad("cache_lines must be positive".into());
        }
        if self.service_warps == 0 {
            return bad("service_warps must be positive".into());
        }
        if self.warp_size == 0 || self.warp_size > 32 {
            return bad("warp_size must be in 1..=32".into());
        }
        if self.poll_interval_ns == 0 {
            return bad("poll_interval_ns must be positive".into());
        }
        let bs = self.devices[0].block_size;
        for (i, d) in self.devices.iter().enumerate() {
            d.validate()
                .map_err(|e| ConfigError::Invalid(format!("devices[{i}]: {e}")))?;
            if d.block_size != bs {
                return bad("all devices must share one block size".into());
            }
        }
        if self.share_table.enabled && !self.share_table.buckets.is_power_of_two() {
            return bad("share_table.buckets must be a power of two".into());
        }
        Ok(())
    }

    pub fn block_size(&self) -> usize {
        self.devices[0].block_size as usize
    }

    /// Overlay the keys this struct understands from `doc`.
    pub fn apply(&mut self, doc: &KvDoc) -> Result<(), ConfigError> {
        self.sim.seed = doc.get_or("seed", self.sim.seed)?;
        if let Some(tb) = doc.get::<String>("tie_break")? {
            self.sim.tie_break = match tb.as_str() {
                "fifo" => TieBreak::Fifo,
                "random" => TieBreak::Random,
                _ => {
                    return Err(ConfigError::Value {
                        key: "tie_break".into(),
                        msg: format!("`{tb}` is not fifo|random"),
                    })
                }
            };
        }
        self.sim.livelock_budget = doc.get_or("livelock_budget", self.sim.livelock_budget)?;
        self.queue_pairs = doc.get_or("num_queue_pairs", self.queue_pairs)?;
        self.queue_depth = doc.get_or("queue_depth", self.queue_depth)?;
        self.cache_lines = doc.get_or("cache_lines", self.cache_lines)?;
        if let Some(bytes) = doc.get::<u64>("cache_bytes")? {
            self.cache_lines = (bytes / self.block_size() as u64).max(1) as usize;
        }
        if let Some(p) = doc.get::<String>("cache_policy")? {
            self.policy = match p.as_str() {
                "clock" => PolicyKind::Clock,
                "direct" => PolicyKind::DirectMapped,
                _ => {
                    return Err(ConfigError::Value {
                        key: "cache_policy".into(),
                        msg: format!("`{p}` is not clock|direct"),
                    })
                }
            };
        }
        if let Some(b) = doc.get::<String>("busy_eviction")? {
            self.busy_eviction = match b.as_str() {
                "wait" => BusyEviction::Wait,
                "find_another" => BusyEviction::FindAnother,
                _ => {
                    return Err(ConfigError::Value {
                        key: "busy_eviction".into(),
                        msg: format!("`{b}` is not wait|find_another"),
                    })
                }
            };
        }
        if let Some(t) = doc.table("share_table")? {
            self.share_table.enabled = table_get(&t, "share_table", "enabled")?.unwrap_or(false);
            self.share_table.buckets =
                table_get(&t, "share_table", "buckets")?.unwrap_or(self.share_table.buckets);
        }
        self.service_warps = doc.get_or("service_warps", self.service_warps)?;
        self.poll_interval_ns = doc.get_or("poll_interval_ns", self.poll_interval_ns)?;
        self.sqe_write_ns = doc.get_or("sqe_write_ns", self.sqe_write_ns)?;
        self.retry_backoff_ns = doc.get_or("retry_backoff_ns", self.retry_backoff_ns)?;
        self.lock_debug = doc.get_or("lock_debug", self.lock_debug)?;
        self.strict = doc.get_or("strict", self.strict)?;
        self.time_limit_ns = doc.get_or("time_limit_ns", self.time_limit_ns)?;
        let idx = doc.indexed("devices");
        if !idx.is_empty() {
            if idx != (0..idx.len()).collect::<Vec<_>>() {
                return Err(ConfigError::Invalid(
                    "devices[N] indices must be 0..n without gaps".into(),
                ));
            }
            self.devices = idx
                .iter()
                .map(|i| {
                    let key = format!("devices[{i}]");
                    let t = doc.table(&key)?.unwrap_or_default();
                    device_from_table(&key, &t)
                })
                .collect::<Result<_, _>>()?;
        }
        Ok(())
    }
}

fn device_from_table(key: &str, t: &BTreeMap<String, String>) -> Result<DeviceConfig, ConfigError> {
    const FIELDS: [&str; 8] = [
        "blocks",
        "block_size",
        "base_latency_ns",
        "write_latency_ns",
        "parallelism",
        "jitter",
        "backing",
        "calibrated",
    ];
    if let Some(f) = t.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(ConfigError::Value {
            key: key.into(),
            msg: format!("unknown field `{f}`"),
        });
    }
    let blocks = table_get(t, key, "blocks")?.unwrap_or(1 << 20);
    let mut d = DeviceConfig::calibrated(blocks);
    if let Some(bs) = table_get(t, key, "block_size")? {
        d.block_size = bs;
    }
    if let Some(p) = table_get(t, key, "parallelism")? {
        d.parallelism = p;
    }
    match table_get::<u64>(t, key, "base_latency_ns")? {
        Some(l) => {
            d.read_latency_ns = l;
            d.write_latency_ns = l;
        }
        // Keep the calibrated plateaus for a changed geometry.
        None => {
            let scale = d.parallelism as f64 * d.block_size as f64 / (64.0 * 4096.0);
            let c = DeviceConfig::calibrated(blocks);
            d.read_latency_ns = (c.read_latency_ns as f64 * scale).round().max(1.0) as u64;
            d.write_latency_ns = (c.write_latency_ns as f64 * scale).round().max(1.0) as u64;
        }
    }
    if let Some(w) = table_get(t, key, "write_latency_ns")? {
        d.write_latency_ns = w;
    }
    if let Some(j) = t.get("jitter") {
        d.jitter = parse_jitter(j).map_err(|msg| ConfigError::Value {
            key: format!("{key}.jitter"),
            msg,
        })?;
    }
    d.backing = t.get("backing").map(PathBuf::from);
    Ok(d)
}
