//! Command execution and report writing.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::device::{
    aligned_partition_counts, calibrate, kernel_time, predict, transfer_time,
    usable_threads, DeviceSpec, LinkSpec, Scenario,
};
use crate::engine::{lower_bound, simulate, utilization, SimConfig, Timeline};
use crate::numfmt::format_sig;
use crate::pipeline::{classify_overlappable, ActionKind, FlowGraph};
use crate::tuner::{tune_with_sync, TuningResult};
use crate::workloads::{hbench_flow, Benchmark, HBenchParams, TransferScenario};

use super::config::{CommandKind, ConfigError, ExperimentConfig, SweepAxis};

const SIG: usize = 6;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("cannot run: {0}")]
    Precondition(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            RunError::Io { .. } => 2,
            RunError::Precondition(_) => 3,
        }
    }

    fn pre(err: impl std::fmt::Display) -> Self {
        RunError::Precondition(err.to_string())
    }
}

/// Files written and a one-line summary for the terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Runs `config.command.kind`, writing its outputs under `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome, RunError> {
    fs::create_dir_all(out_dir).map_err(|source| RunError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut out = Output {
        dir: out_dir,
        files: Vec::new(),
    };
    let summary = match config.command.kind {
        CommandKind::Simulate => run_simulate(config, &mut out)?,
        CommandKind::Sweep => run_sweep(config, &mut out)?,
        CommandKind::Tune => run_tune(config, &mut out)?,
        CommandKind::Calibrate => run_calibrate(config, &mut out)?,
        CommandKind::Report => run_report(config, &mut out)?,
    };
    Ok(RunOutcome {
        files: out.files,
        summary,
    })
}

struct Output<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Output<'_> {
    fn write(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), RunError> {
        let path = self.dir.join(name);
        let io_err = |source| RunError::Io {
            path: path.clone(),
            source,
        };
        let mut w = BufWriter::new(File::create(&path).map_err(io_err)?);
        body(&mut w).and_then(|_| w.flush()).map_err(io_err)?;
        self.files.push(path);
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), RunError> {
        self.write(name, |w| {
            let mut csv = csv::Writer::from_writer(w);
            csv.write_record(header)?;
            for row in rows {
                csv.write_record(row)?;
            }
            csv.flush()
        })
    }
}

fn ms(seconds: f64) -> String {
    format_sig(seconds * 1e3, SIG)
}

fn sim_config(c: &ExperimentConfig, device: &DeviceSpec, partitions: usize, streams: usize) -> Result<SimConfig, RunError> {
    SimConfig::round_robin(device.clone(), c.link_spec(), partitions, streams)
        .and_then(|s| s.with_cross_device_sync(c.cross_device_sync))
        .map_err(RunError::pre)
}

fn simulate_graph(graph: &FlowGraph, config: &SimConfig) -> Result<Timeline, RunError> {
    simulate(graph, config).map_err(RunError::pre)
}

fn run_simulate(c: &ExperimentConfig, out: &mut Output) -> Result<String, RunError> {
    let device = c.device_spec();
    let graph = c.workload.flow(c.streams).map_err(RunError::pre)?;
    let timeline = simulate_graph(&graph, &sim_config(c, &device, c.partitions, c.streams)?)?;
    out.write("timeline.csv", |w| timeline.write_csv(w))?;
    Ok(format!(
        "{} actions, makespan {} ms",
        graph.len(),
        ms(timeline.makespan())
    ))
}

fn run_sweep(c: &ExperimentConfig, out: &mut Output) -> Result<String, RunError> {
    let device = c.device_spec();
    let cmd = &c.command;
    let mut rows = Vec::new();
    let (file, header): (&str, &[&str]) = match cmd.axis {
        SweepAxis::Partitions => {
            for p in cmd.range() {
                let streams = p * device.device_count();
                let graph = c.workload.flow(streams).map_err(RunError::pre)?;
                let t = simulate_graph(&graph, &sim_config(c, &device, p, streams)?)?;
                rows.push(vec![p.to_string(), ms(t.makespan())]);
            }
            ("sweep_partitions.csv", &["P", "makespan_ms"])
        }
        SweepAxis::Tiles => {
            let config = sim_config(c, &device, c.partitions, c.streams)?;
            for tasks in cmd.range() {
                let graph = c.workload.flow_with_tasks(tasks, c.streams).map_err(RunError::pre)?;
                let t = simulate_graph(&graph, &config)?;
                rows.push(vec![tasks.to_string(), ms(t.makespan())]);
            }
            ("sweep_tiles.csv", &["T", "makespan_ms"])
        }
        SweepAxis::Transfers => {
            let config = sim_config(c, &device, c.partitions, c.streams)?;
            let blocks = c.workload.size / c.workload.tile;
            let block_bytes = c.workload.tile as f64 * c.workload.element_size;
            for k in cmd.range() {
                let mut row = vec![k.to_string()];
                for scenario in TransferScenario::ALL {
                    let (hd, dh) = scenario.blocks(k, blocks);
                    let graph = hbench_flow(&HBenchParams::transfers(hd, dh, block_bytes), c.streams)
                        .map_err(RunError::pre)?;
                    row.push(ms(simulate_graph(&graph, &config)?.makespan()));
                }
                rows.push(row);
            }
            ("sweep_transfers.csv", &["step", "cc_ms", "ic_ms", "cd_ms", "id_ms"])
        }
        SweepAxis::Iterations => {
            let config = sim_config(c, &device, c.partitions, c.streams)?;
            let w = &c.workload;
            let blocks = w.size / w.tile;
            let data = 2.0 * blocks as f64 * transfer_time(&c.link_spec(), w.tile as f64 * w.element_size);
            for n in cmd.range() {
                let iterated = crate::workloads::WorkloadParams {
                    iterations: n,
                    ..w.clone()
                };
                let graph = iterated.flow(c.streams).map_err(RunError::pre)?;
                let kernel = kernel_time(
                    &device,
                    w.size as f64 * n as f64 * w.flops_per_element,
                    usable_threads(&device),
                    1,
                );
                let expected = lower_bound(&graph, &config).map_err(RunError::pre)?;
                let measured = simulate_graph(&graph, &config)?.makespan();
                rows.push(vec![n.to_string(), ms(data), ms(kernel), ms(expected), ms(measured)]);
            }
            (
                "sweep_iterations.csv",
                &["iterations", "data_ms", "kernel_ms", "expected_ms", "measured_ms"],
            )
        }
    };
    out.csv(file, header, &rows)?;
    Ok(format!("{} sweep: {} points", cmd.axis.as_str(), rows.len()))
}

fn run_tune(c: &ExperimentConfig, out: &mut Output) -> Result<String, RunError> {
    let cmd = &c.command;
    let result = tune_with_sync(
        &c.workload,
        &c.device_spec(),
        &c.link_spec(),
        c.cross_device_sync,
        cmd.heuristics,
        cmd.m_max,
    )
    .map_err(RunError::pre)?;
    let summary = tune_summary(&result);
    out.write("tune.csv", |w| {
        {
            let mut csv = csv::Writer::from_writer(&mut *w);
            csv.write_record(["P", "T", "makespan_s"])?;
            for e in &result.evaluated {
                csv.write_record([
                    e.partitions.to_string(),
                    e.tasks.to_string(),
                    format_sig(e.makespan, SIG),
                ])?;
            }
            csv.flush()?;
        }
        writeln!(w, "# {summary}")
    })?;
    Ok(summary)
}

fn tune_summary(r: &TuningResult) -> String {
    format!(
        "best P={} T={} makespan_s={} evaluated={} pruned_space={} full_space={}",
        r.best.partitions,
        r.best.tasks,
        format_sig(r.best.makespan, SIG),
        r.evaluated.len(),
        r.pruned_space_size,
        r.full_space_size
    )
}

fn scenario_name(s: &Scenario) -> &'static str {
    match s {
        Scenario::Transfer { .. } => "transfer",
        Scenario::Kernel { .. } => "kernel",
        Scenario::Alloc { .. } => "alloc",
    }
}

fn run_calibrate(c: &ExperimentConfig, out: &mut Output) -> Result<String, RunError> {
    let fitted = calibrate(&c.measurements, &c.device_spec(), &c.link_spec(), &c.fit).map_err(RunError::pre)?;
    let updated = ExperimentConfig {
        device: fitted.device.params().clone(),
        bandwidth: fitted.link.bandwidth(),
        latency: fitted.link.latency(),
        ..c.clone()
    };
    out.write("calibration.cfg", |w| w.write_all(updated.to_text().as_bytes()))?;
    let rows: Vec<Vec<String>> = c
        .measurements
        .iter()
        .zip(&fitted.residuals)
        .enumerate()
        .map(|(i, (m, r))| {
            vec![
                i.to_string(),
                scenario_name(&m.scenario).to_string(),
                format_sig(m.seconds, SIG),
                format_sig(predict(&fitted.device, &fitted.link, &m.scenario), SIG),
                format_sig(*r, SIG),
            ]
        })
        .collect();
    out.csv(
        "residuals.csv",
        &["index", "scenario", "observed_s", "predicted_s", "relative_error"],
        &rows,
    )?;
    let worst = fitted.residuals.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    Ok(format!(
        "fitted {} from {} measurements, max |relative error| {}",
        c.fit.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(", "),
        c.measurements.len(),
        format_sig(worst, 3)
    ))
}

fn run_report(c: &ExperimentConfig, out: &mut Output) -> Result<String, RunError> {
    let device = c.device_spec();
    let link: LinkSpec = c.link_spec();
    let graph = c.workload.flow(c.streams).map_err(RunError::pre)?;
    let config = sim_config(c, &device, c.partitions, c.streams)?;
    let timeline = simulate_graph(&graph, &config)?;
    let bound = lower_bound(&graph, &config).map_err(RunError::pre)?;

    let transfer_demand = transfer_time(&link, 0.0)
        * (graph.count(ActionKind::H2D) + graph.count(ActionKind::D2H)) as f64
        + (graph.total_payload(ActionKind::H2D) + graph.total_payload(ActionKind::D2H)) / link.bandwidth();
    let kernel_demand = graph.total_payload(ActionKind::EXE)
        / (usable_threads(&device) as f64 * device.per_thread_rate());
    let regime = if transfer_demand > kernel_demand {
        "dominant-transfer"
    } else {
        "dominant-kernel"
    };

    let mut r = String::new();
    let _ = writeln!(r, "device");
    let _ = writeln!(
        r,
        "  cores {} ({} reserved), {} threads/core, {} usable threads, {} device(s)",
        device.total_cores(),
        device.reserved_cores(),
        device.threads_per_core(),
        usable_threads(&device),
        device.device_count()
    );
    let _ = writeln!(r, "  aligned partition counts {:?}", aligned_partition_counts(&device));
    let _ = writeln!(
        r,
        "  link {} B/s, latency {} s, mode {}",
        format_sig(link.bandwidth(), SIG),
        format_sig(link.latency(), SIG),
        link.mode()
    );
    let w = &c.workload;
    let _ = writeln!(r, "workload");
    let _ = writeln!(
        r,
        "  {} size {} tile {} iterations {} -> {} tasks, {} actions",
        w.benchmark,
        w.size,
        w.tile,
        w.iterations,
        w.task_count(),
        graph.len()
    );
    for kind in [ActionKind::H2D, ActionKind::EXE, ActionKind::D2H, ActionKind::ALLOC, ActionKind::SYNC] {
        let _ = writeln!(
            r,
            "  {kind}: {} actions, payload {}",
            graph.count(kind),
            format_sig(graph.total_payload(kind), SIG)
        );
    }
    let _ = writeln!(r, "  overlappable {}", classify_overlappable(&graph));
    let _ = writeln!(
        r,
        "  transfer demand {} ms, kernel demand {} ms ({regime})",
        ms(transfer_demand),
        ms(kernel_demand)
    );
    if w.benchmark == Benchmark::HBench {
        let bytes = w.size as f64 * w.element_size;
        match crate::tuner::crossover_iterations(&device, &link, bytes, w.size as f64 * w.flops_per_element) {
            Ok(n) => {
                let _ = writeln!(r, "  crossover at {n} iterations");
            }
            Err(e) => {
                let _ = writeln!(r, "  crossover: {e}");
            }
        }
    }
    let _ = writeln!(r, "simulation (S={}, P={})", c.streams, c.partitions);
    let _ = writeln!(r, "  makespan {} ms", ms(timeline.makespan()));
    let _ = writeln!(r, "  lower bound {} ms", ms(bound));
    for (resource, u) in utilization(&timeline, &config) {
        let _ = writeln!(r, "  utilization {resource} {}", format_sig(u, 4));
    }
    out.write("report.txt", |f| f.write_all(r.as_bytes()))?;
    Ok(format!("makespan {} ms, lower bound {} ms", ms(timeline.makespan()), ms(bound)))
}
