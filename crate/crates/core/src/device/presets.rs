//! Ready-made device and link descriptions.
//!
//! The `reference_*` presets reproduce the measured 31SP-class coprocessor: 57
//! cores with one reserved for the card OS, 4 threads per core, a link that
//! moves 32 MiB in 5.2 ms with both directions on one engine, and a thread
//! rate at which a 16 Mi-element kernel needs 40 iterations to take as long
//! as its 16 MiB round trip. All management overheads are zero.
//!
//! The `desk_*` presets keep those rates but add small launch, per-stream and
//! allocation overheads so that resource-granularity trade-offs show up in
//! desk-scale runs.

use super::{DeviceParams, DeviceSpec, LinkMode, LinkSpec};

const MIB: f64 = 1024.0 * 1024.0;

/// Bytes per second that move 32 MiB in 5.2 ms.
pub const REFERENCE_BANDWIDTH: f64 = 32.0 * MIB / 5.2e-3;

/// Per-thread element-iterations per second such that 16 Mi elements times
/// 40 iterations on 224 threads take 5.2 ms.
pub const REFERENCE_PER_THREAD_RATE: f64 = 16.0 * MIB * 40.0 / (224.0 * 5.2e-3);

pub const DESK_LAUNCH_OVERHEAD: f64 = 20e-6;
pub const DESK_PER_STREAM_OVERHEAD: f64 = 0.2e-6;
pub const DESK_ALLOC_COST_PER_THREAD: f64 = 1e-6;

pub fn reference_device() -> DeviceSpec {
    DeviceSpec::new(DeviceParams {
        total_cores: 57,
        reserved_cores: 1,
        threads_per_core: 4,
        per_thread_rate: REFERENCE_PER_THREAD_RATE,
        kernel_launch_overhead: 0.0,
        per_stream_overhead: 0.0,
        alloc_cost_per_thread: 0.0,
        device_count: 1,
    })
    .expect("reference device parameters are valid")
}

pub fn reference_link() -> LinkSpec {
    LinkSpec::new(REFERENCE_BANDWIDTH, 0.0, LinkMode::Serialized).expect("reference link is valid")
}

pub fn desk_device() -> DeviceSpec {
    DeviceSpec::new(DeviceParams {
        kernel_launch_overhead: DESK_LAUNCH_OVERHEAD,
        per_stream_overhead: DESK_PER_STREAM_OVERHEAD,
        alloc_cost_per_thread: DESK_ALLOC_COST_PER_THREAD,
        ..reference_device().params().clone()
    })
    .expect("desk device parameters are valid")
}

pub fn desk_link() -> LinkSpec {
    reference_link()
}
