mod support;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamsim::device::presets::{desk_device, desk_link};
use streamsim::device::{DeviceParams, DeviceSpec, LinkMode, TIME_EPS};
use streamsim::engine::{lower_bound, simulate, utilization, SimConfig};
use streamsim::pipeline::{classify_overlappable, ActionKind, FlowGraph};
use streamsim::workloads::{Benchmark, WorkloadParams};

use support::{check_legal, random_case, time_stepped};

#[test]
fn event_driven_matches_time_stepped_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case_no in 0..500 {
        let case = random_case(&mut rng, 30);
        let timeline = simulate(&case.graph, &case.config).unwrap();
        let oracle = time_stepped(&case.graph, &case.config);
        assert!(
            (timeline.makespan() - oracle.makespan).abs() <= 2.0 * oracle.dt,
            "case {case_no}: engine {} oracle {}\n{}",
            timeline.makespan(),
            oracle.makespan,
            case.graph.to_text()
        );
        for (slot, start) in timeline.slots().iter().zip(&oracle.start) {
            assert!(
                (slot.start - start).abs() <= 2.0 * oracle.dt,
                "case {case_no}: action {} starts at {} vs {start}\n{}",
                slot.id,
                slot.start,
                case.graph.to_text()
            );
        }
        check_legal(&case.graph, &case.config, &timeline)
            .unwrap_or_else(|e| panic!("case {case_no}: {e}\n{}", case.graph.to_text()));
    }
}

#[test]
fn larger_random_graphs_are_legal() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let case = random_case(&mut rng, 200);
        let timeline = simulate(&case.graph, &case.config).unwrap();
        check_legal(&case.graph, &case.config, &timeline).unwrap();
        let bound = lower_bound(&case.graph, &case.config).unwrap();
        assert!(bound <= timeline.makespan() + TIME_EPS);
        let max_end = timeline.slots().iter().map(|s| s.end).fold(0.0, f64::max);
        assert_eq!(timeline.makespan(), max_end);
    }
}

#[test]
fn simulation_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let case = random_case(&mut rng, 60);
        let a = simulate(&case.graph, &case.config).unwrap();
        let b = simulate(&case.graph, &case.config).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.slots().iter().zip(b.slots()) {
            assert_eq!(x.start.to_bits(), y.start.to_bits());
            assert_eq!(x.end.to_bits(), y.end.to_bits());
        }
    }
}

#[test]
fn utilization_stays_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let case = random_case(&mut rng, 40);
        let t = simulate(&case.graph, &case.config).unwrap();
        for (_, u) in utilization(&t, &case.config) {
            assert!((0.0..=1.0).contains(&u));
        }
    }
}

fn no_stream_overhead() -> DeviceSpec {
    DeviceSpec::new(DeviceParams {
        per_stream_overhead: 0.0,
        ..desk_device().params().clone()
    })
    .unwrap()
}

fn no_overheads() -> DeviceSpec {
    DeviceSpec::new(DeviceParams {
        per_stream_overhead: 0.0,
        kernel_launch_overhead: 0.0,
        alloc_cost_per_thread: 0.0,
        ..desk_device().params().clone()
    })
    .unwrap()
}

#[test]
fn streams_help_overlappable_graphs() {
    let device = no_stream_overhead();
    for b in [Benchmark::Mm, Benchmark::Nn, Benchmark::HBench] {
        let w = WorkloadParams::desk(b);
        for mode in [LinkMode::DuplexEngines, LinkMode::IdealUnlimited] {
            let link = desk_link().with_mode(mode);
            for s in [2, 4, 7, 8, 14] {
                let tasks = (2 * s).min(w.max_tasks());
                let single_graph = w.flow_with_tasks(tasks, 1).unwrap();
                let single = SimConfig::round_robin(device.clone(), link, 1, 1).unwrap();
                let multi_graph = w.flow_with_tasks(tasks, s).unwrap();
                assert!(classify_overlappable(&multi_graph));
                let multi = SimConfig::round_robin(device.clone(), link, s, s).unwrap();
                let one = simulate(&single_graph, &single).unwrap().makespan();
                let many = simulate(&multi_graph, &multi).unwrap().makespan();
                assert!(many <= one + TIME_EPS, "{b} {mode} S={s}: {many} > {one}");
            }
        }
    }
}

#[test]
fn partitioning_does_not_help_non_overlappable_graphs() {
    let device = no_overheads();
    for b in [Benchmark::Hotspot, Benchmark::Srad] {
        let w = WorkloadParams::desk(b);
        for p in [2, 4, 7, 8, 14, 28, 56] {
            let tasks = p;
            let graph = w.flow_with_tasks(tasks, p).unwrap();
            assert!(!classify_overlappable(&graph));
            assert_eq!(graph.count(ActionKind::ALLOC), 0);
            let multi = SimConfig::round_robin(device.clone(), desk_link(), p, p).unwrap();
            let single_graph = w.flow_with_tasks(tasks, 1).unwrap();
            let single = SimConfig::round_robin(device.clone(), desk_link(), 1, 1).unwrap();
            let many = simulate(&graph, &multi).unwrap().makespan();
            let one = simulate(&single_graph, &single).unwrap().makespan();
            assert!(many >= one - TIME_EPS, "{b} P={p}: {many} < {one}");
        }
    }
}

/// Greedy list scheduling is not monotone in resources: here a zero-byte
/// download that briefly holds the shared engine delays stream 1 just
/// enough for stream 0 to win the next tie, and serialized ends sooner
/// than duplex.
#[test]
fn greedy_mode_anomaly() {
    let text = "streams 2\n0 H2D 1 0 -\n1 D2H 0 1 -\n2 H2D 4 1 -\n3 H2D 3 0 -\n4 EXE 4 0 -\n5 EXE 0 0 -\n6 EXE 3 1 3/sync\n";
    let graph = FlowGraph::parse_text(text).unwrap();
    let device = support::unit_device(3, 1.0, 1.0, 1.0, 1);
    let config = SimConfig::round_robin(device, support::unit_link(LinkMode::Serialized), 3, 2).unwrap();
    let span = |m| simulate(&graph, &config.clone().with_link_mode(m)).unwrap().makespan();
    assert_eq!(span(LinkMode::IdealUnlimited), 14.0);
    assert_eq!(span(LinkMode::DuplexEngines), 18.0);
    assert_eq!(span(LinkMode::Serialized), 14.0);
}

#[test]
fn link_modes_are_ordered_on_benchmark_graphs() {
    let device = desk_device();
    for b in Benchmark::ALL {
        let w = WorkloadParams::desk(b);
        for (p, t) in [(1, 1), (2, 4), (4, 16), (7, 28), (8, 64), (14, 56)] {
            if !w.supports_task_count(t) {
                continue;
            }
            let graph = w.flow_with_tasks(t, p).unwrap();
            let config = SimConfig::round_robin(device.clone(), desk_link(), p, p).unwrap();
            let span = |m| simulate(&graph, &config.clone().with_link_mode(m)).unwrap().makespan();
            let (ideal, duplex, serial) = (
                span(LinkMode::IdealUnlimited),
                span(LinkMode::DuplexEngines),
                span(LinkMode::Serialized),
            );
            assert!(ideal <= duplex + TIME_EPS, "{b} P={p} T={t}: {ideal} > {duplex}");
            assert!(duplex <= serial + TIME_EPS, "{b} P={p} T={t}: {duplex} > {serial}");
        }
    }
}
