//! Search over resource granularity `P` and task granularity `T`.
//!
//! Every candidate runs the workload split into `T` tasks on `P` partitions
//! per device with one stream per partition.

use rayon::prelude::*;
use thiserror::Error;

use crate::device::{
    aligned_partition_counts, kernel_time, transfer_time, usable_threads, DeviceSpec, LinkSpec,
    TIME_EPS,
};
use crate::engine::{simulate, SimConfig, SimError};
use crate::workloads::{WorkloadError, WorkloadParams};

pub const DEFAULT_M_MAX: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TuneError {
    #[error("candidate space is empty")]
    EmptySpace,
    #[error("m_max must be at least 1")]
    InvalidMMax,
    #[error("crossover is undefined when a kernel iteration does no work")]
    UndefinedCrossover,
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// One simulated `(P, T)` point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub partitions: usize,
    pub tasks: usize,
    pub makespan: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningResult {
    /// Sorted by `(partitions, tasks)`.
    pub evaluated: Vec<Evaluation>,
    pub best: Evaluation,
    pub pruned_space_size: usize,
    pub full_space_size: usize,
}

/// Every feasible `(P, T)`: `P` in `1..=usable cores`, `T` in `1..=max tasks`.
fn full_space(device: &DeviceSpec, workload: &WorkloadParams) -> Vec<(usize, usize)> {
    let tasks: Vec<usize> = (1..=workload.max_tasks())
        .filter(|&t| workload.supports_task_count(t))
        .collect();
    (1..=device.usable_cores())
        .flat_map(|p| tasks.iter().map(move |&t| (p, t)))
        .collect()
}

/// Aligned `P` except 1, and `T = m * P` for `m` in `1..=m_max`.
fn pruned_space(device: &DeviceSpec, workload: &WorkloadParams, m_max: usize) -> Vec<(usize, usize)> {
    let max_t = workload.max_tasks();
    aligned_partition_counts(device)
        .into_iter()
        .filter(|&p| p > 1)
        .flat_map(|p| {
            (1..=m_max)
                .map(move |m| (p, m * p))
                .take_while(move |&(_, t)| t <= max_t)
        })
        .filter(|&(_, t)| workload.supports_task_count(t))
        .collect()
}

/// Candidates in `(P, T)` order.
pub fn candidate_space(
    device: &DeviceSpec,
    workload: &WorkloadParams,
    heuristics: bool,
    m_max: usize,
) -> Result<Vec<(usize, usize)>, TuneError> {
    if m_max == 0 {
        return Err(TuneError::InvalidMMax);
    }
    Ok(if heuristics {
        pruned_space(device, workload, m_max)
    } else {
        full_space(device, workload)
    })
}

/// Makespan of `workload` split into `tasks` tasks over `partitions`
/// partitions on every device, one stream per partition.
pub fn evaluate(
    workload: &WorkloadParams,
    device: &DeviceSpec,
    link: &LinkSpec,
    cross_device_sync: f64,
    partitions: usize,
    tasks: usize,
) -> Result<f64, TuneError> {
    let streams = partitions * device.device_count();
    let graph = workload.flow_with_tasks(tasks, streams)?;
    let config = SimConfig::round_robin(device.clone(), *link, partitions, streams)?
        .with_cross_device_sync(cross_device_sync)?;
    Ok(simulate(&graph, &config)?.makespan())
}

/// Simulates every candidate and keeps the fastest; ties within the time
/// tolerance go to fewer partitions, then fewer tasks.
pub fn tune(
    workload: &WorkloadParams,
    device: &DeviceSpec,
    link: &LinkSpec,
    heuristics: bool,
    m_max: usize,
) -> Result<TuningResult, TuneError> {
    tune_with_sync(workload, device, link, 0.0, heuristics, m_max)
}

/// [`tune`] with a cross-device dependency delay.
pub fn tune_with_sync(
    workload: &WorkloadParams,
    device: &DeviceSpec,
    link: &LinkSpec,
    cross_device_sync: f64,
    heuristics: bool,
    m_max: usize,
) -> Result<TuningResult, TuneError> {
    workload.validate()?;
    let space = candidate_space(device, workload, heuristics, m_max)?;
    if space.is_empty() {
        return Err(TuneError::EmptySpace);
    }
    let evaluated = space
        .par_iter()
        .map(|&(p, t)| {
            evaluate(workload, device, link, cross_device_sync, p, t).map(|makespan| Evaluation {
                partitions: p,
                tasks: t,
                makespan,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    // `space` is already in (P, T) order and collect keeps it.
    let best = evaluated
        .iter()
        .copied()
        .reduce(|best, e| if e.makespan < best.makespan - TIME_EPS { e } else { best })
        .expect("space is non-empty");
    Ok(TuningResult {
        evaluated,
        best,
        pruned_space_size: pruned_space(device, workload, m_max).len(),
        full_space_size: full_space(device, workload).len(),
    })
}

/// Smallest iteration count at which a kernel over `elements` on the whole
/// device lasts at least as long as moving `bytes_each_way` in and out.
pub fn crossover_iterations(
    device: &DeviceSpec,
    link: &LinkSpec,
    bytes_each_way: f64,
    elements: f64,
) -> Result<usize, TuneError> {
    let threads = usable_threads(device);
    let per_iteration =
        kernel_time(device, elements, threads, 1) - kernel_time(device, 0.0, threads, 1);
    if per_iteration.is_nan() || per_iteration <= 0.0 {
        return Err(TuneError::UndefinedCrossover);
    }
    let round_trip = 2.0 * transfer_time(link, bytes_each_way);
    let fixed = kernel_time(device, 0.0, threads, 1);
    let guess = ((round_trip - fixed - TIME_EPS) / per_iteration).ceil().max(0.0) as usize;
    // Settle rounding at the boundary against the cost functions themselves.
    let reaches = |n: usize| kernel_time(device, elements * n as f64, threads, 1) >= round_trip - TIME_EPS;
    let mut n = guess.saturating_sub(1);
    while !reaches(n) {
        n += 1;
    }
    while n > 0 && reaches(n - 1) {
        n -= 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::presets::{desk_device, desk_link, reference_device, reference_link};
    use crate::device::DeviceParams;
    use crate::workloads::Benchmark;

    const MIB: f64 = 1024.0 * 1024.0;

    #[test]
    fn heuristic_partition_set() {
        let w = WorkloadParams::desk(Benchmark::Mm);
        let space = candidate_space(&reference_device(), &w, true, 8).unwrap();
        let mut ps: Vec<usize> = space.iter().map(|c| c.0).collect();
        ps.dedup();
        assert_eq!(ps, vec![2, 4, 7, 8, 14, 28, 56]);
    }

    #[test]
    fn pruned_space_size_with_m_max_8() {
        let w = WorkloadParams {
            size: 6000,
            tile: 10,
            ..WorkloadParams::desk(Benchmark::Nn)
        };
        let space = candidate_space(&reference_device(), &w, true, 8).unwrap();
        assert_eq!(space.len(), 56);
        let full = candidate_space(&reference_device(), &w, false, 8).unwrap();
        assert_eq!(full.len(), 56 * w.max_tasks());
    }

    #[test]
    fn m_max_one_gives_t_equal_p() {
        let w = WorkloadParams::desk(Benchmark::Mm);
        for (p, t) in candidate_space(&reference_device(), &w, true, 1).unwrap() {
            assert_eq!(p, t);
        }
        assert_eq!(
            candidate_space(&reference_device(), &w, true, 0),
            Err(TuneError::InvalidMMax)
        );
    }

    #[test]
    fn pruned_is_subset_of_full() {
        let w = WorkloadParams::desk(Benchmark::Cf);
        let full = candidate_space(&reference_device(), &w, false, 16).unwrap();
        let pruned = candidate_space(&reference_device(), &w, true, 16).unwrap();
        assert!(pruned.len() < full.len());
        assert!(pruned.iter().all(|c| full.contains(c)));
    }

    #[test]
    fn single_candidate() {
        let device = DeviceSpec::new(DeviceParams {
            total_cores: 2,
            reserved_cores: 1,
            ..desk_device().params().clone()
        })
        .unwrap();
        let w = WorkloadParams {
            size: 100,
            tile: 100,
            ..WorkloadParams::desk(Benchmark::Mm)
        };
        let r = tune(&w, &device, &desk_link(), false, 16).unwrap();
        assert_eq!(r.evaluated.len(), 1);
        assert_eq!((r.best.partitions, r.best.tasks), (1, 1));
        // Heuristics drop P = 1, leaving nothing.
        assert_eq!(tune(&w, &device, &desk_link(), true, 16), Err(TuneError::EmptySpace));
    }

    #[test]
    fn tune_is_reproducible() {
        let w = WorkloadParams::desk(Benchmark::Mm);
        let a = tune(&w, &desk_device(), &desk_link(), true, 16).unwrap();
        let b = tune(&w, &desk_device(), &desk_link(), true, 16).unwrap();
        assert_eq!(a, b);
        let min = a.evaluated.iter().map(|e| e.makespan).fold(f64::INFINITY, f64::min);
        assert!(a.best.makespan <= min + TIME_EPS);
    }

    #[test]
    fn crossover_at_reference_calibration() {
        let n = crossover_iterations(&reference_device(), &reference_link(), 16.0 * MIB, 16.0 * MIB).unwrap();
        assert_eq!(n, 40);
    }

    #[test]
    fn crossover_halves_with_double_bandwidth() {
        let fast = LinkSpec::new(2.0 * reference_link().bandwidth(), 0.0, reference_link().mode()).unwrap();
        let n = crossover_iterations(&reference_device(), &fast, 16.0 * MIB, 16.0 * MIB).unwrap();
        assert_eq!(n, 20);
    }

    #[test]
    fn crossover_edge_cases() {
        assert_eq!(
            crossover_iterations(&reference_device(), &reference_link(), 0.0, 16.0 * MIB).unwrap(),
            0
        );
        assert_eq!(
            crossover_iterations(&reference_device(), &reference_link(), 16.0 * MIB, 0.0),
            Err(TuneError::UndefinedCrossover)
        );
    }

    #[test]
    fn crossover_monotone() {
        let mut last = usize::MAX;
        for k in 1..20 {
            let link = LinkSpec::new(k as f64 * 1e9, 0.0, reference_link().mode()).unwrap();
            let n = crossover_iterations(&reference_device(), &link, 16.0 * MIB, 16.0 * MIB).unwrap();
            assert!(n <= last);
            last = n;
        }
        let mut last = 0;
        for mib in 0..40 {
            let n = crossover_iterations(&reference_device(), &reference_link(), mib as f64 * MIB, 16.0 * MIB)
                .unwrap();
            assert!(n >= last);
            last = n;
        }
    }
}
