//! Deterministic discrete-event list scheduler.
//!
//! At every decision instant the scheduler repeatedly starts the
//! highest-priority ready action whose resource is free, retiring
//! zero-duration actions on the spot, until nothing else can start. Priority
//! is `(ready time, stream, action id)`, smallest first. Transfers occupy a
//! link engine of their stream's device (per [`LinkMode`]), kernels and
//! allocations occupy their stream's partition, `SYNC` occupies nothing.
//! Nothing is preempted.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;
use std::io;

use thiserror::Error;

use crate::device::{
    alloc_time, kernel_time, make_partitioning, transfer_time, DeviceError, DeviceSpec, LinkMode,
    LinkSpec, Partitioning,
};
use crate::numfmt::format_sig;
use crate::pipeline::{Action, ActionId, ActionKind, FlowGraph, GraphError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("stream {0} is not mapped to a partition and device")]
    UnmappedStream(usize),
    #[error("invalid simulation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinkEngine {
    /// Both directions, [`LinkMode::Serialized`].
    Shared,
    H2D,
    D2H,
}

/// An exclusive resource: one link engine or one partition of one device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Resource {
    Link { device: usize, engine: LinkEngine },
    Partition { device: usize, index: usize },
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resource::Link { device, engine } => {
                let e = match engine {
                    LinkEngine::Shared => "link",
                    LinkEngine::H2D => "h2d",
                    LinkEngine::D2H => "d2h",
                };
                write!(f, "dev{device}.{e}")
            }
            Resource::Partition { device, index } => write!(f, "dev{device}.p{index}"),
        }
    }
}

/// Where each stream runs and what the hardware costs.
///
/// Devices are identical copies of `device` and each is split by the same
/// `partitioning`; every device has its own link.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    device: DeviceSpec,
    link: LinkSpec,
    partitioning: Partitioning,
    stream_to_partition: Vec<usize>,
    stream_to_device: Vec<usize>,
    cross_device_sync: f64,
    streams_per_device: Vec<usize>,
}

impl SimConfig {
    pub fn new(
        device: DeviceSpec,
        link: LinkSpec,
        partitioning: Partitioning,
        stream_to_partition: Vec<usize>,
        stream_to_device: Vec<usize>,
    ) -> Result<Self, SimError> {
        if stream_to_partition.len() != stream_to_device.len() {
            return Err(SimError::Config(format!(
                "{} partition mappings but {} device mappings",
                stream_to_partition.len(),
                stream_to_device.len()
            )));
        }
        let p = partitioning.partition_count();
        if let Some(s) = stream_to_partition.iter().position(|&x| x >= p) {
            return Err(SimError::Config(format!(
                "stream {s} maps to partition {} of {p}",
                stream_to_partition[s]
            )));
        }
        let dc = device.device_count();
        if let Some(s) = stream_to_device.iter().position(|&x| x >= dc) {
            return Err(SimError::Config(format!(
                "stream {s} maps to device {} of {dc}",
                stream_to_device[s]
            )));
        }
        let mut streams_per_device = vec![0; dc];
        for &d in &stream_to_device {
            streams_per_device[d] += 1;
        }
        Ok(Self {
            device,
            link,
            partitioning,
            stream_to_partition,
            stream_to_device,
            cross_device_sync: 0.0,
            streams_per_device,
        })
    }

    /// `streams` streams dealt over devices first, then over `partitions`
    /// partitions of each device: stream `s` lands on device
    /// `s mod devices`, partition `(s / devices) mod partitions`.
    pub fn round_robin(
        device: DeviceSpec,
        link: LinkSpec,
        partitions: usize,
        streams: usize,
    ) -> Result<Self, SimError> {
        let partitioning = make_partitioning(&device, partitions)?;
        let dc = device.device_count();
        let to_device = (0..streams).map(|s| s % dc).collect();
        let to_partition = (0..streams).map(|s| (s / dc) % partitions).collect();
        Self::new(device, link, partitioning, to_partition, to_device)
    }

    /// Extra delay on every dependency edge that crosses devices.
    pub fn with_cross_device_sync(mut self, seconds: f64) -> Result<Self, SimError> {
        if !(seconds.is_finite() && seconds >= 0.0) {
            return Err(SimError::Config("cross-device sync must be non-negative".into()));
        }
        self.cross_device_sync = seconds;
        Ok(self)
    }

    pub fn with_link_mode(mut self, mode: LinkMode) -> Self {
        self.link = self.link.with_mode(mode);
        self
    }

    pub fn device(&self) -> &DeviceSpec {
        &self.device
    }

    pub fn link(&self) -> &LinkSpec {
        &self.link
    }

    pub fn partitioning(&self) -> &Partitioning {
        &self.partitioning
    }

    pub fn cross_device_sync(&self) -> f64 {
        self.cross_device_sync
    }

    pub fn stream_count(&self) -> usize {
        self.stream_to_device.len()
    }

    pub fn device_of(&self, stream: usize) -> usize {
        self.stream_to_device[stream]
    }

    pub fn partition_of(&self, stream: usize) -> usize {
        self.stream_to_partition[stream]
    }

    /// Streams mapped to `device`; this is the stream count that every kernel
    /// launch on that device pays management overhead for.
    pub fn streams_on_device(&self, device: usize) -> usize {
        self.streams_per_device[device]
    }

    /// Every exclusive resource, in a fixed order.
    pub fn resources(&self) -> Vec<Resource> {
        let mut out = Vec::new();
        for device in 0..self.device.device_count() {
            match self.link.mode() {
                LinkMode::Serialized => out.push(Resource::Link {
                    device,
                    engine: LinkEngine::Shared,
                }),
                LinkMode::DuplexEngines => {
                    out.push(Resource::Link {
                        device,
                        engine: LinkEngine::H2D,
                    });
                    out.push(Resource::Link {
                        device,
                        engine: LinkEngine::D2H,
                    });
                }
                LinkMode::IdealUnlimited => {}
            }
            for index in 0..self.partitioning.partition_count() {
                out.push(Resource::Partition { device, index });
            }
        }
        out
    }

    /// Exclusive resource an action occupies, if any.
    pub fn resource_of(&self, action: &Action) -> Option<Resource> {
        let device = self.stream_to_device[action.stream];
        match action.kind {
            ActionKind::H2D | ActionKind::D2H => {
                let engine = match (self.link.mode(), action.kind) {
                    (LinkMode::Serialized, _) => LinkEngine::Shared,
                    (LinkMode::DuplexEngines, ActionKind::H2D) => LinkEngine::H2D,
                    (LinkMode::DuplexEngines, _) => LinkEngine::D2H,
                    (LinkMode::IdealUnlimited, _) => return None,
                };
                Some(Resource::Link { device, engine })
            }
            ActionKind::EXE | ActionKind::ALLOC => Some(Resource::Partition {
                device,
                index: self.stream_to_partition[action.stream],
            }),
            ActionKind::SYNC => None,
        }
    }

    pub fn duration(&self, action: &Action) -> f64 {
        let threads = || self.partitioning.threads_in(self.stream_to_partition[action.stream]);
        match action.kind {
            ActionKind::H2D | ActionKind::D2H => transfer_time(&self.link, action.payload),
            ActionKind::EXE => kernel_time(
                &self.device,
                action.payload,
                threads(),
                self.streams_on_device(self.stream_to_device[action.stream]),
            ),
            ActionKind::ALLOC => alloc_time(&self.device, action.payload, threads()),
            ActionKind::SYNC => 0.0,
        }
    }

    /// Delay added to an edge from `from` to `to`.
    fn edge_delay(&self, from: &Action, to: &Action) -> f64 {
        if self.stream_to_device[from.stream] != self.stream_to_device[to.stream] {
            self.cross_device_sync
        } else {
            0.0
        }
    }

    fn check_graph(&self, graph: &FlowGraph) -> Result<(), SimError> {
        graph.validate()?;
        if graph.stream_count() > self.stream_count() {
            return Err(SimError::UnmappedStream(self.stream_count()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    pub id: ActionId,
    pub kind: ActionKind,
    pub stream: usize,
    pub resource: Option<Resource>,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    slots: Vec<Slot>,
    makespan: f64,
    busy: BTreeMap<Resource, f64>,
}

impl Timeline {
    /// Slot of every action, indexed by action id.
    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, id: ActionId) -> &Slot {
        &self.slots[id]
    }

    pub fn makespan(&self) -> f64 {
        self.makespan
    }

    /// Busy seconds per exclusive resource of the config, unused ones at 0.
    pub fn busy(&self) -> &BTreeMap<Resource, f64> {
        &self.busy
    }

    /// CSV with columns `action_id,kind,stream,resource,start_s,end_s`.
    pub fn write_csv<W: io::Write>(&self, out: W) -> io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["action_id", "kind", "stream", "resource", "start_s", "end_s"])?;
        for s in &self.slots {
            let resource = s.resource.map_or_else(|| "-".to_string(), |r| r.to_string());
            w.write_record([
                s.id.to_string(),
                s.kind.to_string(),
                s.stream.to_string(),
                resource,
                format_sig(s.start, 6),
                format_sig(s.end, 6),
            ])?;
        }
        w.flush()
    }
}

/// Latest end time, 0 for an empty timeline.
pub fn makespan(timeline: &Timeline) -> f64 {
    timeline.makespan
}

#[derive(Debug, Clone, Copy)]
struct Key {
    ready: f64,
    stream: usize,
    id: ActionId,
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.ready
            .total_cmp(&other.ready)
            .then(self.stream.cmp(&other.stream))
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Key {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Key {}

#[derive(Debug, Clone, Copy, PartialEq)]
struct At(f64, ActionId);

impl Eq for At {}

impl Ord for At {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl PartialOrd for At {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Scheduler<'a> {
    graph: &'a FlowGraph,
    config: &'a SimConfig,
    succ: Vec<Vec<ActionId>>,
    duration: Vec<f64>,
    /// Index into `resources`, or none.
    resource: Vec<Option<usize>>,
    resources: Vec<Resource>,
    remaining: Vec<usize>,
    ready: Vec<f64>,
    start: Vec<f64>,
    end: Vec<f64>,
    started: usize,
    busy: Vec<bool>,
    waiting: Vec<BinaryHeap<Reverse<Key>>>,
    candidates: BinaryHeap<Reverse<Key>>,
    releases: BinaryHeap<Reverse<At>>,
    completions: BinaryHeap<Reverse<At>>,
}

impl<'a> Scheduler<'a> {
    fn new(graph: &'a FlowGraph, config: &'a SimConfig) -> Self {
        let n = graph.len();
        let resources = config.resources();
        let index: BTreeMap<Resource, usize> =
            resources.iter().enumerate().map(|(i, r)| (*r, i)).collect();
        let preds = graph.predecessor_lists();
        let remaining = preds.iter().map(Vec::len).collect();
        Self {
            graph,
            config,
            succ: graph.successor_lists(),
            duration: graph.actions().iter().map(|a| config.duration(a)).collect(),
            resource: graph
                .actions()
                .iter()
                .map(|a| config.resource_of(a).map(|r| index[&r]))
                .collect(),
            waiting: vec![BinaryHeap::new(); resources.len()],
            busy: vec![false; resources.len()],
            resources,
            remaining,
            ready: vec![0.0; n],
            start: vec![f64::NAN; n],
            end: vec![f64::NAN; n],
            started: 0,
            candidates: BinaryHeap::new(),
            releases: BinaryHeap::new(),
            completions: BinaryHeap::new(),
        }
    }

    fn key(&self, id: ActionId) -> Key {
        Key {
            ready: self.ready[id],
            stream: self.graph.action(id).stream,
            id,
        }
    }

    fn run(mut self) -> Timeline {
        for id in 0..self.graph.len() {
            if self.remaining[id] == 0 {
                self.candidates.push(Reverse(self.key(id)));
            }
        }
        let mut now = 0.0;
        loop {
            self.settle(now);
            let next_done = self.completions.peek().map(|Reverse(At(t, _))| *t);
            let next_release = self.releases.peek().map(|Reverse(At(t, _))| *t);
            now = match (next_done, next_release) {
                (None, None) => break,
                (Some(a), None) | (None, Some(a)) => a,
                (Some(a), Some(b)) => a.min(b),
            };
            while let Some(&Reverse(At(t, id))) = self.completions.peek() {
                if t > now {
                    break;
                }
                self.completions.pop();
                self.retire(id, now);
            }
            while let Some(&Reverse(At(t, id))) = self.releases.peek() {
                if t > now {
                    break;
                }
                self.releases.pop();
                self.candidates.push(Reverse(self.key(id)));
            }
        }
        debug_assert_eq!(self.started, self.graph.len(), "validated graphs always drain");
        self.into_timeline()
    }

    fn settle(&mut self, now: f64) {
        while let Some(Reverse(key)) = self.candidates.pop() {
            let id = key.id;
            if let Some(r) = self.resource[id] {
                if self.busy[r] {
                    self.waiting[r].push(Reverse(key));
                    continue;
                }
                self.busy[r] = true;
            }
            self.started += 1;
            self.start[id] = now;
            self.end[id] = now + self.duration[id];
            if self.duration[id] == 0.0 {
                self.retire(id, now);
            } else {
                self.completions.push(Reverse(At(self.end[id], id)));
            }
        }
    }

    fn retire(&mut self, id: ActionId, now: f64) {
        if let Some(r) = self.resource[id] {
            self.busy[r] = false;
            if let Some(next) = self.waiting[r].pop() {
                self.candidates.push(next);
            }
        }
        let from = self.graph.action(id);
        for i in 0..self.succ[id].len() {
            let s = self.succ[id][i];
            let at = self.end[id] + self.config.edge_delay(from, self.graph.action(s));
            if at > self.ready[s] {
                self.ready[s] = at;
            }
            self.remaining[s] -= 1;
            if self.remaining[s] == 0 {
                if self.ready[s] <= now {
                    self.candidates.push(Reverse(self.key(s)));
                } else {
                    self.releases.push(Reverse(At(self.ready[s], s)));
                }
            }
        }
    }

    fn into_timeline(self) -> Timeline {
        let mut busy: BTreeMap<Resource, f64> = self.resources.iter().map(|r| (*r, 0.0)).collect();
        let mut makespan = 0.0f64;
        let slots = self
            .graph
            .actions()
            .iter()
            .map(|a| {
                let resource = self.resource[a.id].map(|r| self.resources[r]);
                if let Some(r) = resource {
                    *busy.get_mut(&r).expect("known resource") += self.end[a.id] - self.start[a.id];
                }
                makespan = makespan.max(self.end[a.id]);
                Slot {
                    id: a.id,
                    kind: a.kind,
                    stream: a.stream,
                    resource,
                    start: self.start[a.id],
                    end: self.end[a.id],
                }
            })
            .collect();
        Timeline {
            slots,
            makespan,
            busy,
        }
    }
}

/// Schedules every action of `graph` under `config`.
pub fn simulate(graph: &FlowGraph, config: &SimConfig) -> Result<Timeline, SimError> {
    config.check_graph(graph)?;
    Ok(Scheduler::new(graph, config).run())
}

/// No schedule can finish before this: the longest dependency chain, and
/// the total demand placed on any single exclusive resource.
pub fn lower_bound(graph: &FlowGraph, config: &SimConfig) -> Result<f64, SimError> {
    config.check_graph(graph)?;
    let preds = graph.predecessor_lists();
    let succ = graph.successor_lists();
    let duration: Vec<f64> = graph.actions().iter().map(|a| config.duration(a)).collect();

    let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
    let mut queue: VecDeque<ActionId> = (0..graph.len()).filter(|&v| indeg[v] == 0).collect();
    let mut earliest = vec![0.0f64; graph.len()];
    let mut path = 0.0f64;
    while let Some(v) = queue.pop_front() {
        let finish = earliest[v] + duration[v];
        path = path.max(finish);
        for &s in &succ[v] {
            let at = finish + config.edge_delay(graph.action(v), graph.action(s));
            earliest[s] = earliest[s].max(at);
            indeg[s] -= 1;
            if indeg[s] == 0 {
                queue.push_back(s);
            }
        }
    }

    let mut demand: BTreeMap<Resource, f64> = BTreeMap::new();
    for a in graph.actions() {
        if let Some(r) = config.resource_of(a) {
            *demand.entry(r).or_default() += duration[a.id];
        }
    }
    Ok(demand.values().copied().fold(path, f64::max))
}

/// Busy fraction of every exclusive resource; all zeros when the timeline
/// is empty.
pub fn utilization(timeline: &Timeline, config: &SimConfig) -> BTreeMap<Resource, f64> {
    let span = timeline.makespan();
    config
        .resources()
        .into_iter()
        .map(|r| {
            let busy = timeline.busy.get(&r).copied().unwrap_or(0.0);
            let frac = if span > 0.0 { (busy / span).clamp(0.0, 1.0) } else { 0.0 };
            (r, frac)
        })
        .collect()
}
