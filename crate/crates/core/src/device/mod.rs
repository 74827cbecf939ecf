//! Coprocessor resources, the host link, and the cost model that turns
//! payloads into durations.

mod calibrate;
pub mod presets;

pub use calibrate::{calibrate, predict, Calibration, CalibrationError, Measurement, Param, Scenario};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Absolute tolerance used for every time comparison, in seconds.
pub const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeviceError {
    #[error("invalid device spec: {0}")]
    InvalidDevice(String),
    #[error("invalid link spec: {0}")]
    InvalidLink(String),
    #[error("invalid partition count {requested}: must be within 1..={max}")]
    InvalidPartitionCount { requested: usize, max: usize },
}

/// Raw device parameters. Validated into a [`DeviceSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceParams {
    pub total_cores: usize,
    pub reserved_cores: usize,
    pub threads_per_core: usize,
    /// Element-iterations per second retired by one hardware thread.
    pub per_thread_rate: f64,
    /// Fixed cost of every kernel launch, seconds.
    pub kernel_launch_overhead: f64,
    /// Cost per active stream added to every kernel launch, seconds.
    pub per_stream_overhead: f64,
    /// Cost per partition thread of one allocation event, seconds.
    pub alloc_cost_per_thread: f64,
    pub device_count: usize,
}

impl Default for DeviceParams {
    fn default() -> Self {
        presets::reference_device().params().clone()
    }
}

/// A validated coprocessor description. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSpec {
    params: DeviceParams,
}

impl DeviceSpec {
    pub fn new(params: DeviceParams) -> Result<Self, DeviceError> {
        let p = &params;
        let bad = |msg: &str| Err(DeviceError::InvalidDevice(msg.to_string()));
        if p.total_cores <= p.reserved_cores {
            return bad("total_cores must exceed reserved_cores");
        }
        if p.threads_per_core == 0 {
            return bad("threads_per_core must be at least 1");
        }
        if !(p.per_thread_rate.is_finite() && p.per_thread_rate > 0.0) {
            return bad("per_thread_rate must be positive");
        }
        for (name, v) in [
            ("kernel_launch_overhead", p.kernel_launch_overhead),
            ("per_stream_overhead", p.per_stream_overhead),
            ("alloc_cost_per_thread", p.alloc_cost_per_thread),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DeviceError::InvalidDevice(format!("{name} must be non-negative")));
            }
        }
        if p.device_count == 0 {
            return bad("device_count must be at least 1");
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &DeviceParams {
        &self.params
    }

    pub fn total_cores(&self) -> usize {
        self.params.total_cores
    }

    pub fn reserved_cores(&self) -> usize {
        self.params.reserved_cores
    }

    pub fn threads_per_core(&self) -> usize {
        self.params.threads_per_core
    }

    pub fn per_thread_rate(&self) -> f64 {
        self.params.per_thread_rate
    }

    pub fn kernel_launch_overhead(&self) -> f64 {
        self.params.kernel_launch_overhead
    }

    pub fn per_stream_overhead(&self) -> f64 {
        self.params.per_stream_overhead
    }

    pub fn alloc_cost_per_thread(&self) -> f64 {
        self.params.alloc_cost_per_thread
    }

    pub fn device_count(&self) -> usize {
        self.params.device_count
    }

    /// Cores left to user code after the reserved ones.
    pub fn usable_cores(&self) -> usize {
        self.params.total_cores - self.params.reserved_cores
    }

    /// Returns a copy with a different number of identical devices.
    pub fn with_device_count(&self, device_count: usize) -> Result<Self, DeviceError> {
        Self::new(DeviceParams {
            device_count,
            ..self.params.clone()
        })
    }
}

/// Hardware threads available to offloaded kernels.
pub fn usable_threads(device: &DeviceSpec) -> usize {
    device.usable_cores() * device.threads_per_core()
}

/// How transfers in the two directions share the host link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinkMode {
    /// One engine for both directions; transfers never overlap each other.
    Serialized,
    /// One engine per direction.
    DuplexEngines,
    /// No contention between transfers at all.
    IdealUnlimited,
}

impl LinkMode {
    pub const ALL: [LinkMode; 3] = [
        LinkMode::Serialized,
        LinkMode::DuplexEngines,
        LinkMode::IdealUnlimited,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LinkMode::Serialized => "serialized",
            LinkMode::DuplexEngines => "duplex",
            LinkMode::IdealUnlimited => "ideal",
        }
    }
}

impl fmt::Display for LinkMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LinkMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "serialized" => Ok(LinkMode::Serialized),
            "duplex" => Ok(LinkMode::DuplexEngines),
            "ideal" => Ok(LinkMode::IdealUnlimited),
            other => Err(format!(
                "unknown link mode `{other}` (expected serialized, duplex or ideal)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkSpec {
    bandwidth: f64,
    latency: f64,
    mode: LinkMode,
}

impl LinkSpec {
    /// `bandwidth` in bytes per second, `latency` in seconds per transfer.
    pub fn new(bandwidth: f64, latency: f64, mode: LinkMode) -> Result<Self, DeviceError> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(DeviceError::InvalidLink("bandwidth must be positive".into()));
        }
        if !(latency.is_finite() && latency >= 0.0) {
            return Err(DeviceError::InvalidLink("latency must be non-negative".into()));
        }
        Ok(Self {
            bandwidth,
            latency,
            mode,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn latency(&self) -> f64 {
        self.latency
    }

    pub fn mode(&self) -> LinkMode {
        self.mode
    }

    pub fn with_mode(self, mode: LinkMode) -> Self {
        Self { mode, ..self }
    }
}

/// Hardware threads split into disjoint groups, one group per partition.
///
/// Threads are numbered core-major (`core * threads_per_core + lane`) and
/// handed out core-contiguously, so a partition covers a run of consecutive
/// thread indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Partitioning {
    groups: Vec<Vec<usize>>,
    aligned: bool,
}

impl Partitioning {
    pub fn partition_count(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn threads_in(&self, partition: usize) -> usize {
        self.groups[partition].len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// True iff no physical core has its threads spread over two partitions.
    pub fn aligned(&self) -> bool {
        self.aligned
    }
}

pub fn make_partitioning(device: &DeviceSpec, count: usize) -> Result<Partitioning, DeviceError> {
    let threads = usable_threads(device);
    if count == 0 || count > threads {
        return Err(DeviceError::InvalidPartitionCount {
            requested: count,
            max: threads,
        });
    }
    let tpc = device.threads_per_core();
    let base = threads / count;
    let extra = threads % count;
    let mut groups = Vec::with_capacity(count);
    let mut next = 0;
    for p in 0..count {
        let size = base + usize::from(p < extra);
        groups.push((next..next + size).collect::<Vec<_>>());
        next += size;
    }
    // A core is split iff some partition boundary falls strictly inside it.
    let aligned = groups.iter().all(|g| g[0] % tpc == 0);
    Ok(Partitioning { groups, aligned })
}

/// Partition counts that divide the usable cores evenly.
pub fn aligned_partition_counts(device: &DeviceSpec) -> Vec<usize> {
    let cores = device.usable_cores();
    (1..=cores).filter(|d| cores.is_multiple_of(*d)).collect()
}

/// Duration of one transfer occupying one link engine.
pub fn transfer_time(link: &LinkSpec, bytes: f64) -> f64 {
    link.latency + bytes / link.bandwidth
}

/// Duration of one kernel launch of `work` element-iterations on a partition
/// of `threads` hardware threads while `streams_sharing` streams are active
/// on the device.
pub fn kernel_time(device: &DeviceSpec, work: f64, threads: usize, streams_sharing: usize) -> f64 {
    debug_assert!(threads > 0 && streams_sharing > 0);
    device.kernel_launch_overhead()
        + device.per_stream_overhead() * streams_sharing as f64
        + work / (threads as f64 * device.per_thread_rate())
}

/// Duration of `events` allocation events on a partition of `threads` threads.
pub fn alloc_time(device: &DeviceSpec, events: f64, threads: usize) -> f64 {
    events * device.alloc_cost_per_thread() * threads as f64
}
