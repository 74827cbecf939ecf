//! Shared helpers for the integration tests: independent oracles and random
//! graph generators.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;

use rand::Rng;
use streamsim::device::{make_partitioning, DeviceParams, DeviceSpec, LinkMode, LinkSpec};
use streamsim::engine::{SimConfig, Timeline};
use streamsim::pipeline::{ActionId, ActionKind, Dep, FlowGraph};

pub const MIB: f64 = 1024.0 * 1024.0;

/// One thread per core, one element-iteration per second per thread.
pub fn unit_device(cores: usize, launch: f64, per_stream: f64, alloc: f64, devices: usize) -> DeviceSpec {
    DeviceSpec::new(DeviceParams {
        total_cores: cores,
        reserved_cores: 0,
        threads_per_core: 1,
        per_thread_rate: 1.0,
        kernel_launch_overhead: launch,
        per_stream_overhead: per_stream,
        alloc_cost_per_thread: alloc,
        device_count: devices,
    })
    .unwrap()
}

/// One byte per second, no latency.
pub fn unit_link(mode: LinkMode) -> LinkSpec {
    LinkSpec::new(1.0, 0.0, mode).unwrap()
}

/// A random simulation case with integer-valued durations, at least one of
/// them exactly 1.
pub struct Case {
    pub graph: FlowGraph,
    pub config: SimConfig,
}

pub fn random_case<R: Rng>(rng: &mut R, max_actions: usize) -> Case {
    let streams = rng.gen_range(1..=4);
    let devices = rng.gen_range(1..=2);
    let partitions = rng.gen_range(1..=3);
    let mode = LinkMode::ALL[rng.gen_range(0..3)];
    let device = unit_device(
        partitions,
        rng.gen_range(0..=1) as f64,
        rng.gen_range(0..=1) as f64,
        rng.gen_range(0..=1) as f64,
        devices,
    );
    let config = SimConfig::round_robin(device, unit_link(mode), partitions, streams)
        .unwrap()
        .with_cross_device_sync(rng.gen_range(0..=2) as f64)
        .unwrap();
    let n = rng.gen_range(1..=max_actions);
    let graph = random_graph(rng, n, streams);
    Case { graph, config }
}

/// Random DAG: each action may depend on any earlier one. The first action
/// is a one-byte upload so that the shortest duration is exactly one unit.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, streams: usize) -> FlowGraph {
    let kinds = [
        ActionKind::H2D,
        ActionKind::EXE,
        ActionKind::EXE,
        ActionKind::D2H,
        ActionKind::ALLOC,
        ActionKind::SYNC,
    ];
    let mut g = FlowGraph::new(streams).unwrap();
    g.add_action(ActionKind::H2D, 1.0, rng.gen_range(0..streams), []).unwrap();
    let density = rng.gen_range(0.02..0.3);
    for id in 1..n {
        let kind = kinds[rng.gen_range(0..kinds.len())];
        let payload = if kind == ActionKind::SYNC {
            0.0
        } else {
            rng.gen_range(0..=4) as f64
        };
        let mut deps = Vec::new();
        for d in 0..id {
            if rng.gen_bool(density) {
                deps.push(if rng.gen_bool(0.5) { Dep::sync(d) } else { Dep::async_(d) });
            }
        }
        g.add_action(kind, payload, rng.gen_range(0..streams), deps).unwrap();
    }
    g
}

/// Resource key used by the oracle, derived from first principles rather
/// than from the engine's resource table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OracleResource {
    Link(usize, u8),
    Partition(usize, usize),
}

pub fn oracle_resource(config: &SimConfig, kind: ActionKind, stream: usize) -> Option<OracleResource> {
    let dev = config.device_of(stream);
    match kind {
        ActionKind::H2D | ActionKind::D2H => match config.link().mode() {
            LinkMode::Serialized => Some(OracleResource::Link(dev, 0)),
            LinkMode::DuplexEngines => Some(OracleResource::Link(dev, if kind == ActionKind::H2D { 1 } else { 2 })),
            LinkMode::IdealUnlimited => None,
        },
        ActionKind::EXE | ActionKind::ALLOC => Some(OracleResource::Partition(dev, config.partition_of(stream))),
        ActionKind::SYNC => None,
    }
}

/// Duration straight from the cost formulas.
pub fn oracle_duration(config: &SimConfig, kind: ActionKind, payload: f64, stream: usize) -> f64 {
    let d = config.device();
    let l = config.link();
    let threads = config.partitioning().threads_in(config.partition_of(stream)) as f64;
    let dev = config.device_of(stream);
    let sharing = (0..config.stream_count()).filter(|&s| config.device_of(s) == dev).count() as f64;
    match kind {
        ActionKind::H2D | ActionKind::D2H => l.latency() + payload / l.bandwidth(),
        ActionKind::EXE => {
            d.kernel_launch_overhead() + d.per_stream_overhead() * sharing + payload / (threads * d.per_thread_rate())
        }
        ActionKind::ALLOC => payload * d.alloc_cost_per_thread() * threads,
        ActionKind::SYNC => 0.0,
    }
}

/// Outcome of the time-stepped oracle.
pub struct Stepped {
    pub dt: f64,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub makespan: f64,
}

/// Fixed-step simulator: the clock advances in ticks of
/// `dt = 1e-6 * shortest nonzero duration`, and at every tick the earliest
/// (ready tick, stream, id) action whose dependencies are done and whose
/// resource is idle starts, until none can. Runs of ticks in which nothing
/// finishes or becomes ready are stepped over in one go.
pub fn time_stepped(graph: &FlowGraph, config: &SimConfig) -> Stepped {
    let actions = graph.actions();
    let n = actions.len();
    let durations: Vec<f64> = actions
        .iter()
        .map(|a| oracle_duration(config, a.kind, a.payload, a.stream))
        .collect();
    let shortest = durations.iter().copied().filter(|&d| d > 0.0).fold(f64::INFINITY, f64::min);
    let dt = if shortest.is_finite() { 1e-6 * shortest } else { 1.0 };
    let ticks = |x: f64| (x / dt).round() as u64;
    let dur: Vec<u64> = durations.iter().map(|&d| ticks(d)).collect();
    let delay = ticks(config.cross_device_sync());

    // predecessors with their edge delay, FIFO edges included
    let mut preds: Vec<Vec<(ActionId, u64)>> = vec![Vec::new(); n];
    let mut last_in_stream: BTreeMap<usize, ActionId> = BTreeMap::new();
    for a in actions {
        for d in &a.deps {
            let cross = config.device_of(actions[d.id].stream) != config.device_of(a.stream);
            preds[a.id].push((d.id, if cross { delay } else { 0 }));
        }
        if let Some(&p) = last_in_stream.get(&a.stream) {
            preds[a.id].push((p, 0));
        }
        last_in_stream.insert(a.stream, a.id);
    }
    let resource: Vec<Option<OracleResource>> = actions
        .iter()
        .map(|a| oracle_resource(config, a.kind, a.stream))
        .collect();

    let mut start: Vec<Option<u64>> = vec![None; n];
    let mut end: Vec<Option<u64>> = vec![None; n];
    let mut holder: BTreeMap<OracleResource, ActionId> = BTreeMap::new();
    let mut now: u64 = 0;
    let mut finished = 0;
    while finished < n {
        // release resources whose occupant is done by now
        holder.retain(|_, &mut id| end[id].is_some_and(|e| e > now));
        loop {
            let mut best: Option<(u64, usize, ActionId)> = None;
            for id in 0..n {
                if start[id].is_some() {
                    continue;
                }
                let mut ready = 0u64;
                let mut ok = true;
                for &(p, d) in &preds[id] {
                    match end[p] {
                        Some(e) if e + d <= now => ready = ready.max(e + d),
                        _ => {
                            ok = false;
                            break;
                        }
                    }
                }
                if !ok || resource[id].is_some_and(|r| holder.contains_key(&r)) {
                    continue;
                }
                let key = (ready, actions[id].stream, id);
                if best.is_none_or(|b| key < b) {
                    best = Some(key);
                }
            }
            let Some((_, _, id)) = best else { break };
            start[id] = Some(now);
            end[id] = Some(now + dur[id]);
            finished += 1;
            if dur[id] > 0 {
                if let Some(r) = resource[id] {
                    holder.insert(r, id);
                }
            }
        }
        if finished == n {
            break;
        }
        // next tick at which an occupant finishes or a dependency delay lapses
        let mut next = u64::MAX;
        for id in 0..n {
            if let Some(e) = end[id] {
                if e > now {
                    next = next.min(e);
                }
                if e + delay > now && delay > 0 {
                    next = next.min(e + delay);
                }
            }
        }
        assert!(next != u64::MAX, "oracle stalled at tick {now}");
        now = next.max(now + 1);
    }
    let start: Vec<f64> = start.iter().map(|s| s.unwrap() as f64 * dt).collect();
    let end: Vec<f64> = end.iter().map(|e| e.unwrap() as f64 * dt).collect();
    let makespan = end.iter().copied().fold(0.0, f64::max);
    Stepped { dt, start, end, makespan }
}

/// Checks dependency order (with cross-device delay), stream FIFO order,
/// durations and resource exclusivity. Returns the first violation.
pub fn check_legal(graph: &FlowGraph, config: &SimConfig, timeline: &Timeline) -> Result<(), String> {
    let eps = 1e-9;
    let slots = timeline.slots();
    if slots.len() != graph.len() {
        return Err(format!("{} slots for {} actions", slots.len(), graph.len()));
    }
    let mut last_in_stream: BTreeMap<usize, ActionId> = BTreeMap::new();
    for a in graph.actions() {
        let s = &slots[a.id];
        if s.id != a.id {
            return Err(format!("slot {} holds action {}", a.id, s.id));
        }
        let want = oracle_duration(config, a.kind, a.payload, a.stream);
        if ((s.end - s.start) - want).abs() > eps * want.max(1.0) {
            return Err(format!("action {} lasts {} not {want}", a.id, s.end - s.start));
        }
        for d in &a.deps {
            let cross = config.device_of(graph.action(d.id).stream) != config.device_of(a.stream);
            let delay = if cross { config.cross_device_sync() } else { 0.0 };
            if s.start + eps < slots[d.id].end + delay {
                return Err(format!("action {} starts before dep {} is done", a.id, d.id));
            }
        }
        if let Some(&p) = last_in_stream.get(&a.stream) {
            if s.start + eps < slots[p].end {
                return Err(format!("action {} overtakes {p} in stream {}", a.id, a.stream));
            }
        }
        last_in_stream.insert(a.stream, a.id);
        if oracle_resource(config, a.kind, a.stream).is_some() != s.resource.is_some() {
            return Err(format!("action {} has the wrong resource kind", a.id));
        }
    }
    let mut by_resource: BTreeMap<OracleResource, Vec<(f64, f64, ActionId)>> = BTreeMap::new();
    for a in graph.actions() {
        if let Some(r) = oracle_resource(config, a.kind, a.stream) {
            let s = &slots[a.id];
            if s.end > s.start {
                by_resource.entry(r).or_default().push((s.start, s.end, a.id));
            }
        }
    }
    for (r, mut spans) in by_resource {
        spans.sort_by(|x, y| x.0.total_cmp(&y.0));
        for w in spans.windows(2) {
            if w[1].0 + eps < w[0].1 {
                return Err(format!("actions {} and {} overlap on {r:?}", w[0].2, w[1].2));
            }
        }
    }
    Ok(())
}

/// `reach[a][b]` iff there is a directed path from `a` to `b`, FIFO edges included.
pub fn reachability(graph: &FlowGraph) -> Vec<Vec<bool>> {
    let n = graph.len();
    let mut reach = vec![vec![false; n]; n];
    let mut last_in_stream: BTreeMap<usize, ActionId> = BTreeMap::new();
    for a in graph.actions() {
        for d in &a.deps {
            reach[d.id][a.id] = true;
        }
        if let Some(&p) = last_in_stream.get(&a.stream) {
            reach[p][a.id] = true;
        }
        last_in_stream.insert(a.stream, a.id);
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    reach
}

/// Overlappability by exhaustive pair scan over the reachability matrix.
pub fn overlappable_by_pairs(graph: &FlowGraph) -> bool {
    let reach = reachability(graph);
    let acts = graph.actions();
    acts.iter().filter(|t| t.kind.is_transfer()).any(|t| {
        acts.iter().any(|e| {
            e.kind == ActionKind::EXE && e.stream != t.stream && !reach[t.id][e.id] && !reach[e.id][t.id]
        })
    })
}

/// One tiled Cholesky kernel with the tiles it reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct TileTask {
    pub reads: Vec<(usize, usize)>,
    pub write: (usize, usize),
    pub work_cubes: f64,
}

/// Right-looking tiled Cholesky in column-major order as a plain task list.
pub fn cholesky_tasks(n: usize) -> Vec<TileTask> {
    let mut out = Vec::new();
    for k in 0..n {
        out.push(TileTask {
            reads: vec![],
            write: (k, k),
            work_cubes: 1.0 / 3.0,
        });
        for i in k + 1..n {
            out.push(TileTask {
                reads: vec![(k, k)],
                write: (i, k),
                work_cubes: 1.0,
            });
        }
        for j in k + 1..n {
            for i in j..n {
                let reads = if i == j { vec![(i, k)] } else { vec![(i, k), (j, k)] };
                out.push(TileTask {
                    reads,
                    write: (i, j),
                    work_cubes: if i == j { 1.0 } else { 2.0 },
                });
            }
        }
    }
    out
}

/// Task-level dependencies from read/write sets: read-after-write,
/// write-after-write and write-after-read on every tile.
pub fn task_dependencies(tasks: &[TileTask]) -> Vec<Vec<usize>> {
    let mut last_writer: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut readers: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let mut deps = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let mut d = Vec::new();
        for tile in &task.reads {
            d.extend(last_writer.get(tile));
        }
        d.extend(last_writer.get(&task.write));
        d.extend(readers.get(&task.write).into_iter().flatten());
        d.sort_unstable();
        d.dedup();
        deps.push(d);
        for tile in &task.reads {
            readers.entry(*tile).or_default().push(t);
        }
        readers.remove(&task.write);
        last_writer.insert(task.write, t);
    }
    deps
}

/// Partition sizes for `count` partitions, by the public API.
pub fn sizes(device: &DeviceSpec, count: usize) -> Vec<usize> {
    make_partitioning(device, count).unwrap().sizes()
}
