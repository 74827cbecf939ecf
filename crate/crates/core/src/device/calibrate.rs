//! Least-squares fit of the cost model to observed timings.
//!
//! The cost model is linear in (latency, 1/bandwidth), in (launch overhead,
//! per-stream overhead, 1/rate) and in the allocation cost, so each group is
//! an independent weighted linear least-squares problem. Rows are scaled by
//! the inverse observation, which minimizes the sum of squared relative
//! errors.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use super::{
    alloc_time, kernel_time, transfer_time, DeviceError, DeviceParams, DeviceSpec, LinkSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Param {
    Bandwidth,
    Latency,
    PerThreadRate,
    KernelLaunchOverhead,
    PerStreamOverhead,
    AllocCostPerThread,
}

impl Param {
    pub const ALL: [Param; 6] = [
        Param::Bandwidth,
        Param::Latency,
        Param::PerThreadRate,
        Param::KernelLaunchOverhead,
        Param::PerStreamOverhead,
        Param::AllocCostPerThread,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Param::Bandwidth => "bandwidth",
            Param::Latency => "latency",
            Param::PerThreadRate => "per_thread_rate",
            Param::KernelLaunchOverhead => "kernel_launch_overhead",
            Param::PerStreamOverhead => "per_stream_overhead",
            Param::AllocCostPerThread => "alloc_cost_per_thread",
        }
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Param {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Param::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown calibration parameter `{s}`"))
    }
}

/// What was timed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scenario {
    Transfer { bytes: f64 },
    Kernel { work: f64, threads: usize, streams: usize },
    Alloc { threads: usize, events: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub scenario: Scenario,
    pub seconds: f64,
}

impl Measurement {
    pub fn new(scenario: Scenario, seconds: f64) -> Self {
        Self { scenario, seconds }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("measurements do not constrain: {}", join(.0))]
    Underdetermined(Vec<Param>),
    #[error("invalid measurement #{index}: {reason}")]
    InvalidMeasurement { index: usize, reason: String },
    #[error("fitted {param} = {value} is not physical")]
    NonPhysical { param: Param, value: f64 },
    #[error(transparent)]
    Device(#[from] DeviceError),
}

fn join(params: &[Param]) -> String {
    params.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub device: DeviceSpec,
    pub link: LinkSpec,
    /// Relative error (predicted - observed) / observed, in input order.
    pub residuals: Vec<f64>,
}

/// One fitted coefficient of a linear group.
struct Column {
    param: Param,
    /// Value currently held by the base spec, in coefficient form.
    fixed: f64,
    feature: fn(&Scenario) -> Option<f64>,
}

fn link_columns(link: &LinkSpec) -> [Column; 2] {
    [
        Column {
            param: Param::Latency,
            fixed: link.latency(),
            feature: |s| matches!(s, Scenario::Transfer { .. }).then_some(1.0),
        },
        Column {
            param: Param::Bandwidth,
            fixed: 1.0 / link.bandwidth(),
            feature: |s| match s {
                Scenario::Transfer { bytes } => Some(*bytes),
                _ => None,
            },
        },
    ]
}

fn kernel_columns(device: &DeviceSpec) -> [Column; 3] {
    [
        Column {
            param: Param::KernelLaunchOverhead,
            fixed: device.kernel_launch_overhead(),
            feature: |s| matches!(s, Scenario::Kernel { .. }).then_some(1.0),
        },
        Column {
            param: Param::PerStreamOverhead,
            fixed: device.per_stream_overhead(),
            feature: |s| match s {
                Scenario::Kernel { streams, .. } => Some(*streams as f64),
                _ => None,
            },
        },
        Column {
            param: Param::PerThreadRate,
            fixed: 1.0 / device.per_thread_rate(),
            feature: |s| match s {
                Scenario::Kernel { work, threads, .. } => Some(work / *threads as f64),
                _ => None,
            },
        },
    ]
}

fn alloc_columns(device: &DeviceSpec) -> [Column; 1] {
    [Column {
        param: Param::AllocCostPerThread,
        fixed: device.alloc_cost_per_thread(),
        feature: |s| match s {
            Scenario::Alloc { threads, events } => Some(*threads as f64 * events),
            _ => None,
        },
    }]
}

/// Fits the `free` parameters; every other parameter keeps its value from
/// `base_device` / `base_link`.
pub fn calibrate(
    measurements: &[Measurement],
    base_device: &DeviceSpec,
    base_link: &LinkSpec,
    free: &[Param],
) -> Result<Calibration, CalibrationError> {
    for (index, m) in measurements.iter().enumerate() {
        check_measurement(index, m)?;
    }

    let mut fitted = Vec::new();
    let mut unconstrained = Vec::new();
    fit_group(&link_columns(base_link), measurements, free, &mut fitted, &mut unconstrained);
    fit_group(&kernel_columns(base_device), measurements, free, &mut fitted, &mut unconstrained);
    fit_group(&alloc_columns(base_device), measurements, free, &mut fitted, &mut unconstrained);
    if !unconstrained.is_empty() {
        unconstrained.sort();
        unconstrained.dedup();
        return Err(CalibrationError::Underdetermined(unconstrained));
    }

    let mut params: DeviceParams = base_device.params().clone();
    let mut bandwidth = base_link.bandwidth();
    let mut latency = base_link.latency();
    for (param, coeff) in fitted {
        match param {
            Param::Bandwidth | Param::PerThreadRate => {
                if !(coeff.is_finite() && coeff > 0.0) {
                    return Err(CalibrationError::NonPhysical { param, value: 1.0 / coeff });
                }
                if param == Param::Bandwidth {
                    bandwidth = 1.0 / coeff;
                } else {
                    params.per_thread_rate = 1.0 / coeff;
                }
            }
            _ => {
                // Round-off can push a true zero slightly negative.
                let value = if coeff < 0.0 && coeff > -1e-12 { 0.0 } else { coeff };
                if !(value.is_finite() && value >= 0.0) {
                    return Err(CalibrationError::NonPhysical { param, value });
                }
                match param {
                    Param::Latency => latency = value,
                    Param::KernelLaunchOverhead => params.kernel_launch_overhead = value,
                    Param::PerStreamOverhead => params.per_stream_overhead = value,
                    Param::AllocCostPerThread => params.alloc_cost_per_thread = value,
                    Param::Bandwidth | Param::PerThreadRate => unreachable!(),
                }
            }
        }
    }

    let device = DeviceSpec::new(params)?;
    let link = LinkSpec::new(bandwidth, latency, base_link.mode())?;
    let residuals = measurements
        .iter()
        .map(|m| (predict(&device, &link, &m.scenario) - m.seconds) / m.seconds)
        .collect();
    Ok(Calibration {
        device,
        link,
        residuals,
    })
}

/// Model prediction for one scenario.
pub fn predict(device: &DeviceSpec, link: &LinkSpec, scenario: &Scenario) -> f64 {
    match *scenario {
        Scenario::Transfer { bytes } => transfer_time(link, bytes),
        Scenario::Kernel {
            work,
            threads,
            streams,
        } => kernel_time(device, work, threads, streams),
        Scenario::Alloc { threads, events } => alloc_time(device, events, threads),
    }
}

fn check_measurement(index: usize, m: &Measurement) -> Result<(), CalibrationError> {
    let bad = |reason: &str| {
        Err(CalibrationError::InvalidMeasurement {
            index,
            reason: reason.to_string(),
        })
    };
    if !(m.seconds.is_finite() && m.seconds > 0.0) {
        return bad("observed time must be positive");
    }
    match m.scenario {
        Scenario::Transfer { bytes } if !(bytes.is_finite() && bytes >= 0.0) => {
            bad("bytes must be non-negative")
        }
        Scenario::Kernel { work, threads, streams }
            if !(work.is_finite() && work >= 0.0) || threads == 0 || streams == 0 =>
        {
            bad("kernel needs non-negative work and at least one thread and stream")
        }
        Scenario::Alloc { threads, events } if threads == 0 || !(events.is_finite() && events >= 0.0) => {
            bad("allocation needs at least one thread and non-negative events")
        }
        _ => Ok(()),
    }
}

fn fit_group(
    columns: &[Column],
    measurements: &[Measurement],
    free: &[Param],
    fitted: &mut Vec<(Param, f64)>,
    unconstrained: &mut Vec<Param>,
) {
    let free_cols: Vec<&Column> = columns.iter().filter(|c| free.contains(&c.param)).collect();
    if free_cols.is_empty() {
        return;
    }

    let rows: Vec<(&Measurement, Vec<f64>)> = measurements
        .iter()
        .filter_map(|m| {
            let feats: Option<Vec<f64>> = columns.iter().map(|c| (c.feature)(&m.scenario)).collect();
            feats.map(|f| (m, f))
        })
        .collect();

    let n_free = free_cols.len();
    // Zero rows keep the SVD square or tall so the full right basis is available.
    let n_rows = rows.len().max(n_free);
    let mut a = DMatrix::<f64>::zeros(n_rows, n_free);
    let mut b = DVector::<f64>::zeros(n_rows);
    for (r, (m, feats)) in rows.iter().enumerate() {
        let w = 1.0 / m.seconds;
        let mut target = m.seconds;
        let mut k = 0;
        for (c, col) in columns.iter().enumerate() {
            if free.contains(&col.param) {
                a[(r, k)] = feats[c] * w;
                k += 1;
            } else {
                target -= col.fixed * feats[c];
            }
        }
        b[r] = target * w;
    }

    let mut scale = vec![1.0; n_free];
    for (k, s) in scale.iter_mut().enumerate() {
        let norm = a.column(k).norm();
        if norm > 0.0 {
            *s = norm;
            a.column_mut(k).scale_mut(1.0 / norm);
        }
    }

    let svd = a.svd(true, true);
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s_max = svd.singular_values.max();
    let threshold = s_max.max(f64::MIN_POSITIVE) * 1e-10;
    let mut deficient = false;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s <= threshold {
            deficient = true;
            for (k, col) in free_cols.iter().enumerate() {
                if v_t[(i, k)].abs() > 1e-8 {
                    unconstrained.push(col.param);
                }
            }
        }
    }
    if deficient {
        return;
    }

    let x = svd.solve(&b, threshold).expect("u and v_t computed");
    for (k, col) in free_cols.iter().enumerate() {
        fitted.push((col.param, x[k] / scale[k]));
    }
}
