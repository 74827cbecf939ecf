//! Flat `key = value` experiment configuration with `[section]` headers.
//!
//! ```text
//! # comments start with '#'
//! [device]
//! total_cores = 57
//! [link]
//! mode = serialized
//! [workload]
//! name = mm
//! tile = 100
//! [command]
//! kind = sweep
//! axis = partitions
//! from = 1
//! to = 56
//! [measurements]
//! transfer = 33554432 0.0052
//! fit = bandwidth
//! [output]
//! dir = out
//! ```
//!
//! Every key is optional; missing keys take the desk defaults, and workload
//! defaults follow the benchmark named by `name` wherever it appears.
//! `[measurements]` lines may repeat: `transfer = <bytes> <s>`,
//! `kernel = <work> <threads> <streams> <s>`, `alloc = <threads> <events> <s>`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::device::presets::{desk_device, desk_link};
use crate::device::{
    make_partitioning, DeviceParams, DeviceSpec, LinkMode, LinkSpec, Measurement, Param, Scenario,
};
use crate::tuner::DEFAULT_M_MAX;
use crate::workloads::{Benchmark, WorkloadParams};

/// A configuration problem, located at the offending line and key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// 1-based; `None` when the key took its default value.
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl std::error::Error for ConfigError {}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}, key `{}`: {}", self.key, self.message),
            None => write!(f, "key `{}`: {}", self.key, self.message),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Calibrate,
    Simulate,
    Sweep,
    Tune,
    Report,
}

impl CommandKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandKind::Calibrate => "calibrate",
            CommandKind::Simulate => "simulate",
            CommandKind::Sweep => "sweep",
            CommandKind::Tune => "tune",
            CommandKind::Report => "report",
        }
    }
}

impl FromStr for CommandKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "calibrate" => Ok(CommandKind::Calibrate),
            "simulate" => Ok(CommandKind::Simulate),
            "sweep" => Ok(CommandKind::Sweep),
            "tune" => Ok(CommandKind::Tune),
            "report" => Ok(CommandKind::Report),
            _ => Err(format!(
                "unknown command `{s}` (expected calibrate, simulate, sweep, tune or report)"
            )),
        }
    }
}

/// What a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Partition count, one stream per partition, configured tile.
    Partitions,
    /// Task count at the configured streams and partitions.
    Tiles,
    /// hBench transfer split step over the CC/IC/CD/ID scenarios.
    Transfers,
    /// hBench kernel iterations.
    Iterations,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Partitions => "partitions",
            SweepAxis::Tiles => "tiles",
            SweepAxis::Transfers => "transfers",
            SweepAxis::Iterations => "iterations",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "partitions" => Ok(SweepAxis::Partitions),
            "tiles" => Ok(SweepAxis::Tiles),
            "transfers" => Ok(SweepAxis::Transfers),
            "iterations" => Ok(SweepAxis::Iterations),
            _ => Err(format!(
                "unknown sweep axis `{s}` (expected partitions, tiles, transfers or iterations)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandSpec {
    pub kind: CommandKind,
    pub axis: SweepAxis,
    pub from: usize,
    pub to: usize,
    pub step: usize,
    pub heuristics: bool,
    pub m_max: usize,
}

impl CommandSpec {
    /// Sweep values `from, from + step, ..., <= to`.
    pub fn range(&self) -> impl Iterator<Item = usize> {
        (self.from..=self.to).step_by(self.step.max(1))
    }
}

impl Default for CommandSpec {
    fn default() -> Self {
        Self {
            kind: CommandKind::Simulate,
            axis: SweepAxis::Partitions,
            from: 1,
            to: 8,
            step: 1,
            heuristics: true,
            m_max: DEFAULT_M_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub device: DeviceParams,
    /// Seconds added to every dependency that crosses devices.
    pub cross_device_sync: f64,
    pub bandwidth: f64,
    pub latency: f64,
    pub link_mode: LinkMode,
    pub workload: WorkloadParams,
    pub streams: usize,
    pub partitions: usize,
    pub command: CommandSpec,
    pub measurements: Vec<Measurement>,
    /// Parameters `calibrate` fits; the rest keep their configured values.
    pub fit: Vec<Param>,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let link = desk_link();
        Self {
            device: desk_device().params().clone(),
            cross_device_sync: 0.0,
            bandwidth: link.bandwidth(),
            latency: link.latency(),
            link_mode: link.mode(),
            workload: WorkloadParams::desk(Benchmark::Mm),
            streams: 4,
            partitions: 4,
            command: CommandSpec::default(),
            measurements: Vec::new(),
            fit: vec![Param::Bandwidth, Param::PerThreadRate],
            output_dir: "out".to_string(),
        }
    }
}

impl ExperimentConfig {
    pub fn device_spec(&self) -> DeviceSpec {
        DeviceSpec::new(self.device.clone()).expect("validated at parse time")
    }

    pub fn link_spec(&self) -> LinkSpec {
        LinkSpec::new(self.bandwidth, self.latency, self.link_mode).expect("validated at parse time")
    }

    /// Serializes every field; parsing the result gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = &self.device;
        let w = &self.workload;
        let c = &self.command;
        let _ = writeln!(s, "[device]");
        let _ = writeln!(s, "total_cores = {}", d.total_cores);
        let _ = writeln!(s, "reserved_cores = {}", d.reserved_cores);
        let _ = writeln!(s, "threads_per_core = {}", d.threads_per_core);
        let _ = writeln!(s, "per_thread_rate = {}", d.per_thread_rate);
        let _ = writeln!(s, "kernel_launch_overhead = {}", d.kernel_launch_overhead);
        let _ = writeln!(s, "per_stream_overhead = {}", d.per_stream_overhead);
        let _ = writeln!(s, "alloc_cost_per_thread = {}", d.alloc_cost_per_thread);
        let _ = writeln!(s, "device_count = {}", d.device_count);
        let _ = writeln!(s, "cross_device_sync = {}", self.cross_device_sync);
        let _ = writeln!(s, "\n[link]");
        let _ = writeln!(s, "bandwidth = {}", self.bandwidth);
        let _ = writeln!(s, "latency = {}", self.latency);
        let _ = writeln!(s, "mode = {}", self.link_mode);
        let _ = writeln!(s, "\n[workload]");
        let _ = writeln!(s, "name = {}", w.benchmark);
        let _ = writeln!(s, "size = {}", w.size);
        let _ = writeln!(s, "tile = {}", w.tile);
        let _ = writeln!(s, "iterations = {}", w.iterations);
        let _ = writeln!(s, "element_size = {}", w.element_size);
        let _ = writeln!(s, "flops_per_element = {}", w.flops_per_element);
        let _ = writeln!(s, "streams = {}", self.streams);
        let _ = writeln!(s, "partitions = {}", self.partitions);
        let _ = writeln!(s, "\n[command]");
        let _ = writeln!(s, "kind = {}", c.kind.as_str());
        let _ = writeln!(s, "axis = {}", c.axis.as_str());
        let _ = writeln!(s, "from = {}", c.from);
        let _ = writeln!(s, "to = {}", c.to);
        let _ = writeln!(s, "step = {}", c.step);
        let _ = writeln!(s, "heuristics = {}", if c.heuristics { "on" } else { "off" });
        let _ = writeln!(s, "m_max = {}", c.m_max);
        let _ = writeln!(s, "\n[measurements]");
        for m in &self.measurements {
            let _ = match m.scenario {
                Scenario::Transfer { bytes } => writeln!(s, "transfer = {bytes} {}", m.seconds),
                Scenario::Kernel {
                    work,
                    threads,
                    streams,
                } => writeln!(s, "kernel = {work} {threads} {streams} {}", m.seconds),
                Scenario::Alloc { threads, events } => {
                    writeln!(s, "alloc = {threads} {events} {}", m.seconds)
                }
            };
        }
        let fit: Vec<&str> = self.fit.iter().map(|p| p.as_str()).collect();
        let _ = writeln!(s, "fit = {}", fit.join(", "));
        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "dir = {}", self.output_dir);
        s
    }
}

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "device",
        &[
            "total_cores",
            "reserved_cores",
            "threads_per_core",
            "per_thread_rate",
            "kernel_launch_overhead",
            "per_stream_overhead",
            "alloc_cost_per_thread",
            "device_count",
            "cross_device_sync",
        ],
    ),
    ("link", &["bandwidth", "latency", "mode"]),
    (
        "workload",
        &[
            "name",
            "size",
            "tile",
            "iterations",
            "element_size",
            "flops_per_element",
            "streams",
            "partitions",
        ],
    ),
    ("command", &["kind", "axis", "from", "to", "step", "heuristics", "m_max"]),
    ("measurements", &["transfer", "kernel", "alloc", "fit"]),
    ("output", &["dir"]),
];

struct Entry {
    line: usize,
    value: String,
}

/// Raw entries keyed by `(section, key)`; measurement lines kept in order.
struct Entries {
    map: BTreeMap<(&'static str, &'static str), Entry>,
    measurements: Vec<(usize, &'static str, String)>,
}

impl Entries {
    fn err(&self, section: &'static str, key: &'static str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            line: self.map.get(&(section, key)).map(|e| e.line),
            key: key.to_string(),
            message: message.into(),
        }
    }

    fn get<T: FromStr>(&self, section: &'static str, key: &'static str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let Some(entry) = self.map.get(&(section, key)) else {
            return Ok(None);
        };
        entry.value.parse::<T>().map(Some).map_err(|e| ConfigError {
            line: Some(entry.line),
            key: key.to_string(),
            message: format!("cannot parse `{}`: {e}", entry.value),
        })
    }

    fn set<T: FromStr>(&self, section: &'static str, key: &'static str, slot: &mut T) -> Result<(), ConfigError>
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.get(section, key)? {
            *slot = v;
        }
        Ok(())
    }
}

fn lex(text: &str) -> Result<Entries, ConfigError> {
    let mut entries = Entries {
        map: BTreeMap::new(),
        measurements: Vec::new(),
    };
    let mut section: Option<(&'static str, &'static [&'static str])> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            let name = name.trim();
            section = Some(
                SECTIONS
                    .iter()
                    .copied()
                    .find(|(s, _)| *s == name)
                    .ok_or_else(|| ConfigError {
                        line: Some(line),
                        key: name.to_string(),
                        message: "unknown section".into(),
                    })?,
            );
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError {
                line: Some(line),
                key: content.to_string(),
                message: "expected `key = value`".into(),
            });
        };
        let (key, value) = (key.trim(), value.trim().to_string());
        let Some((sname, keys)) = section else {
            return Err(ConfigError {
                line: Some(line),
                key: key.to_string(),
                message: "key outside of any section".into(),
            });
        };
        let Some(&key) = keys.iter().find(|k| **k == key) else {
            return Err(ConfigError {
                line: Some(line),
                key: key.to_string(),
                message: format!("unknown key in [{sname}] (expected one of: {})", keys.join(", ")),
            });
        };
        if sname == "measurements" && key != "fit" {
            entries.measurements.push((line, key, value));
            continue;
        }
        if let Some(previous) = entries.map.insert((sname, key), Entry { line, value }) {
            return Err(ConfigError {
                line: Some(line),
                key: key.to_string(),
                message: format!("duplicate key, first set on line {}", previous.line),
            });
        }
    }
    Ok(entries)
}

fn parse_measurement(line: usize, key: &'static str, value: &str) -> Result<Measurement, ConfigError> {
    let err = |message: String| ConfigError {
        line: Some(line),
        key: key.to_string(),
        message,
    };
    let fields: Vec<&str> = value.split_whitespace().collect();
    let expected = match key {
        "transfer" => 2,
        "kernel" => 4,
        _ => 3,
    };
    if fields.len() != expected {
        return Err(err(format!("expected {expected} fields, found {}", fields.len())));
    }
    let float = |s: &str| s.parse::<f64>().map_err(|e| err(format!("cannot parse `{s}`: {e}")));
    let count = |s: &str| s.parse::<usize>().map_err(|e| err(format!("cannot parse `{s}`: {e}")));
    let scenario = match key {
        "transfer" => Scenario::Transfer {
            bytes: float(fields[0])?,
        },
        "kernel" => Scenario::Kernel {
            work: float(fields[0])?,
            threads: count(fields[1])?,
            streams: count(fields[2])?,
        },
        _ => Scenario::Alloc {
            threads: count(fields[0])?,
            events: float(fields[1])?,
        },
    };
    let seconds = float(fields[expected - 1])?;
    if !(seconds.is_finite() && seconds > 0.0) {
        return Err(err("observed seconds must be positive".into()));
    }
    Ok(Measurement::new(scenario, seconds))
}

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let e = lex(text)?;
    let mut c = ExperimentConfig::default();

    let d = &mut c.device;
    e.set("device", "total_cores", &mut d.total_cores)?;
    e.set("device", "reserved_cores", &mut d.reserved_cores)?;
    e.set("device", "threads_per_core", &mut d.threads_per_core)?;
    e.set("device", "per_thread_rate", &mut d.per_thread_rate)?;
    e.set("device", "kernel_launch_overhead", &mut d.kernel_launch_overhead)?;
    e.set("device", "per_stream_overhead", &mut d.per_stream_overhead)?;
    e.set("device", "alloc_cost_per_thread", &mut d.alloc_cost_per_thread)?;
    e.set("device", "device_count", &mut d.device_count)?;
    e.set("device", "cross_device_sync", &mut c.cross_device_sync)?;
    e.set("link", "bandwidth", &mut c.bandwidth)?;
    e.set("link", "latency", &mut c.latency)?;
    e.set("link", "mode", &mut c.link_mode)?;

    if let Some(name) = e.get::<Benchmark>("workload", "name")? {
        c.workload = WorkloadParams::desk(name);
    }
    let w = &mut c.workload;
    e.set("workload", "size", &mut w.size)?;
    e.set("workload", "tile", &mut w.tile)?;
    e.set("workload", "iterations", &mut w.iterations)?;
    e.set("workload", "element_size", &mut w.element_size)?;
    e.set("workload", "flops_per_element", &mut w.flops_per_element)?;
    e.set("workload", "streams", &mut c.streams)?;
    e.set("workload", "partitions", &mut c.partitions)?;

    let cmd = &mut c.command;
    e.set("command", "kind", &mut cmd.kind)?;
    e.set("command", "axis", &mut cmd.axis)?;
    e.set("command", "from", &mut cmd.from)?;
    e.set("command", "to", &mut cmd.to)?;
    e.set("command", "step", &mut cmd.step)?;
    e.set("command", "m_max", &mut cmd.m_max)?;
    if let Some(h) = e.get::<OnOff>("command", "heuristics")? {
        cmd.heuristics = h.0;
    }

    c.measurements = e
        .measurements
        .iter()
        .map(|(line, key, value)| parse_measurement(*line, key, value))
        .collect::<Result<_, _>>()?;
    if let Some(fit) = e.map.get(&("measurements", "fit")) {
        c.fit = fit
            .value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<Param>())
            .collect::<Result<_, _>>()
            .map_err(|m| e.err("measurements", "fit", m))?;
    }
    e.set("output", "dir", &mut c.output_dir)?;

    validate(&c, &e)?;
    Ok(c)
}

/// `on` / `off`.
struct OnOff(bool);

impl FromStr for OnOff {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "on" => Ok(OnOff(true)),
            "off" => Ok(OnOff(false)),
            _ => Err("expected `on` or `off`".into()),
        }
    }
}

fn validate(c: &ExperimentConfig, e: &Entries) -> Result<(), ConfigError> {
    let d = &c.device;
    let positive = |v: f64| v.is_finite() && v > 0.0;
    let non_negative = |v: f64| v.is_finite() && v >= 0.0;
    let checks: [(bool, &'static str, &'static str, &str); 11] = [
        (d.total_cores > 0, "device", "total_cores", "must be positive"),
        (d.reserved_cores < d.total_cores, "device", "reserved_cores", "must be below total_cores"),
        (d.threads_per_core >= 1, "device", "threads_per_core", "must be at least 1"),
        (positive(d.per_thread_rate), "device", "per_thread_rate", "must be positive"),
        (non_negative(d.kernel_launch_overhead), "device", "kernel_launch_overhead", "must be non-negative"),
        (non_negative(d.per_stream_overhead), "device", "per_stream_overhead", "must be non-negative"),
        (non_negative(d.alloc_cost_per_thread), "device", "alloc_cost_per_thread", "must be non-negative"),
        (d.device_count >= 1, "device", "device_count", "must be at least 1"),
        (non_negative(c.cross_device_sync), "device", "cross_device_sync", "must be non-negative"),
        (positive(c.bandwidth), "link", "bandwidth", "must be positive"),
        (non_negative(c.latency), "link", "latency", "must be non-negative"),
    ];
    for (ok, section, key, message) in checks {
        if !ok {
            return Err(e.err(section, key, message));
        }
    }
    let device = DeviceSpec::new(d.clone()).map_err(|err| e.err("device", "total_cores", err.to_string()))?;

    if c.streams == 0 {
        return Err(e.err("workload", "streams", "must be at least 1"));
    }
    if let Err(err) = make_partitioning(&device, c.partitions) {
        return Err(e.err("workload", "partitions", err.to_string()));
    }
    if let Err(err) = c.workload.validate() {
        let key = if c.workload.iterations == 0 { "iterations" } else { "tile" };
        return Err(e.err("workload", key, err.to_string()));
    }

    let cmd = &c.command;
    if cmd.m_max == 0 {
        return Err(e.err("command", "m_max", "must be at least 1"));
    }
    if cmd.kind == CommandKind::Sweep {
        validate_sweep(c, e, &device)?;
    }
    Ok(())
}

fn validate_sweep(c: &ExperimentConfig, e: &Entries, device: &DeviceSpec) -> Result<(), ConfigError> {
    let cmd = &c.command;
    if cmd.step == 0 {
        return Err(e.err("command", "step", "must be at least 1"));
    }
    if cmd.from > cmd.to {
        return Err(e.err(
            "command",
            "to",
            format!("empty sweep range {}..={}", cmd.from, cmd.to),
        ));
    }
    let hbench = c.workload.benchmark == Benchmark::HBench;
    match cmd.axis {
        SweepAxis::Partitions => {
            let max = crate::device::usable_threads(device);
            if cmd.from == 0 || cmd.to > max {
                return Err(e.err("command", "to", format!("partition counts must lie in 1..={max}")));
            }
        }
        SweepAxis::Tiles | SweepAxis::Iterations if cmd.from == 0 => {
            return Err(e.err("command", "from", "must be at least 1"));
        }
        _ => {}
    }
    match cmd.axis {
        SweepAxis::Transfers | SweepAxis::Iterations if !hbench => Err(e.err(
            "command",
            "axis",
            format!("the {} sweep needs workload name = hbench", cmd.axis.as_str()),
        )),
        SweepAxis::Transfers if cmd.to > c.workload.size / c.workload.tile => Err(e.err(
            "command",
            "to",
            format!("step exceeds the {} hBench blocks", c.workload.size / c.workload.tile),
        )),
        _ => Ok(()),
    }
}
