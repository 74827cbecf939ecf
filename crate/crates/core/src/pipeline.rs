//! Stream-annotated action graphs.
//!
//! A [`FlowGraph`] is an ordered list of offload actions. Every action sits
//! in one stream; a stream is a FIFO queue, so each action implicitly waits
//! for the previous action of its stream in addition to its explicit deps.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub type ActionId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionKind {
    H2D,
    EXE,
    D2H,
    ALLOC,
    SYNC,
}

impl ActionKind {
    pub const ALL: [ActionKind; 5] = [
        ActionKind::H2D,
        ActionKind::EXE,
        ActionKind::D2H,
        ActionKind::ALLOC,
        ActionKind::SYNC,
    ];

    pub fn is_transfer(self) -> bool {
        matches!(self, ActionKind::H2D | ActionKind::D2H)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::H2D => "H2D",
            ActionKind::EXE => "EXE",
            ActionKind::D2H => "D2H",
            ActionKind::ALLOC => "ALLOC",
            ActionKind::SYNC => "SYNC",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown action kind `{s}`"))
    }
}

/// Whether the two connected stages may work on different data blocks
/// concurrently (`Async`) or form a hard barrier (`Sync`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Sync,
    Async,
}

impl EdgeKind {
    fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Sync => "sync",
            EdgeKind::Async => "async",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dep {
    pub id: ActionId,
    pub kind: EdgeKind,
}

impl Dep {
    pub fn sync(id: ActionId) -> Self {
        Self {
            id,
            kind: EdgeKind::Sync,
        }
    }

    pub fn async_(id: ActionId) -> Self {
        Self {
            id,
            kind: EdgeKind::Async,
        }
    }
}

/// One offload stage.
///
/// `payload` is bytes for transfers, element-iterations for kernels and
/// allocation events for `ALLOC`; `SYNC` carries none.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub id: ActionId,
    pub kind: ActionKind,
    pub payload: f64,
    pub stream: usize,
    pub deps: Vec<Dep>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("action {action} depends on unknown action {dep}")]
    DanglingDep { action: ActionId, dep: ActionId },
    #[error("action {action} uses stream {stream} but the graph has {stream_count} streams")]
    InvalidStream {
        action: ActionId,
        stream: usize,
        stream_count: usize,
    },
    #[error("action {action}: {reason}")]
    InvalidPayload { action: ActionId, reason: String },
    #[error("action at position {position} has id {id}")]
    MisnumberedAction { position: usize, id: ActionId },
    #[error("dependency cycle through actions {0:?}")]
    Cycle(Vec<ActionId>),
    #[error("stream count must be at least 1")]
    InvalidStreamCount,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowGraph {
    actions: Vec<Action>,
    stream_count: usize,
}

impl FlowGraph {
    pub fn new(stream_count: usize) -> Result<Self, GraphError> {
        if stream_count == 0 {
            return Err(GraphError::InvalidStreamCount);
        }
        Ok(Self {
            actions: Vec::new(),
            stream_count,
        })
    }

    /// Builds a graph from raw actions without checking them; call
    /// [`FlowGraph::validate`] before use.
    pub fn from_actions(stream_count: usize, actions: Vec<Action>) -> Self {
        Self {
            actions,
            stream_count,
        }
    }

    /// Appends an action. Deps must already exist, so graphs grown this way
    /// are acyclic by construction.
    pub fn add_action(
        &mut self,
        kind: ActionKind,
        payload: f64,
        stream: usize,
        deps: impl IntoIterator<Item = Dep>,
    ) -> Result<ActionId, GraphError> {
        let id = self.actions.len();
        let mut deps: Vec<Dep> = deps.into_iter().collect();
        if let Some(d) = deps.iter().find(|d| d.id >= id) {
            return Err(GraphError::DanglingDep {
                action: id,
                dep: d.id,
            });
        }
        if stream >= self.stream_count {
            return Err(GraphError::InvalidStream {
                action: id,
                stream,
                stream_count: self.stream_count,
            });
        }
        check_payload(id, kind, payload)?;
        deps.sort_by_key(|d| d.id);
        deps.dedup_by_key(|d| d.id);
        self.actions.push(Action {
            id,
            kind,
            payload,
            stream,
            deps,
        });
        Ok(id)
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn action(&self, id: ActionId) -> &Action {
        &self.actions[id]
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn stream_count(&self) -> usize {
        self.stream_count
    }

    pub fn count(&self, kind: ActionKind) -> usize {
        self.actions.iter().filter(|a| a.kind == kind).count()
    }

    pub fn total_payload(&self, kind: ActionKind) -> f64 {
        self.actions.iter().filter(|a| a.kind == kind).map(|a| a.payload).sum()
    }

    /// Previous action of each action's stream in program order.
    pub fn stream_predecessors(&self) -> Vec<Option<ActionId>> {
        let mut last = vec![None; self.stream_count];
        self.actions
            .iter()
            .map(|a| {
                let prev = last.get(a.stream).copied().flatten();
                if let Some(slot) = last.get_mut(a.stream) {
                    *slot = Some(a.id);
                }
                prev
            })
            .collect()
    }

    /// Explicit deps plus the implicit FIFO edge, per action, deduplicated.
    pub fn predecessor_lists(&self) -> Vec<Vec<ActionId>> {
        let fifo = self.stream_predecessors();
        self.actions
            .iter()
            .zip(fifo)
            .map(|(a, prev)| {
                let mut preds: Vec<ActionId> = a.deps.iter().map(|d| d.id).chain(prev).collect();
                preds.sort_unstable();
                preds.dedup();
                preds
            })
            .collect()
    }

    pub fn successor_lists(&self) -> Vec<Vec<ActionId>> {
        let mut succ = vec![Vec::new(); self.actions.len()];
        for (id, preds) in self.predecessor_lists().into_iter().enumerate() {
            for p in preds {
                succ[p].push(id);
            }
        }
        succ
    }

    /// Checks numbering, stream range, payloads, dep existence and
    /// acyclicity including the FIFO edges.
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.stream_count == 0 {
            return Err(GraphError::InvalidStreamCount);
        }
        let n = self.actions.len();
        for (position, a) in self.actions.iter().enumerate() {
            if a.id != position {
                return Err(GraphError::MisnumberedAction { position, id: a.id });
            }
            if a.stream >= self.stream_count {
                return Err(GraphError::InvalidStream {
                    action: a.id,
                    stream: a.stream,
                    stream_count: self.stream_count,
                });
            }
            check_payload(a.id, a.kind, a.payload)?;
            if let Some(d) = a.deps.iter().find(|d| d.id >= n) {
                return Err(GraphError::DanglingDep {
                    action: a.id,
                    dep: d.id,
                });
            }
        }

        // Kahn's algorithm; anything left over sits on or behind a cycle.
        let preds = self.predecessor_lists();
        let succ = self.successor_lists();
        let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
        let mut queue: VecDeque<ActionId> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(v) = queue.pop_front() {
            seen += 1;
            for &s in &succ[v] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    queue.push_back(s);
                }
            }
        }
        if seen == n {
            return Ok(());
        }
        Err(GraphError::Cycle(find_cycle(&preds, &indeg)))
    }

    /// Line-oriented dump: `id kind payload stream deps`, where deps is `-`
    /// or a comma-separated list of `id/sync` and `id/async`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("streams {}\n", self.stream_count));
        for a in &self.actions {
            let deps = if a.deps.is_empty() {
                "-".to_string()
            } else {
                a.deps
                    .iter()
                    .map(|d| format!("{}/{}", d.id, d.kind.as_str()))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            out.push_str(&format!("{} {} {} {} {}\n", a.id, a.kind, a.payload, a.stream, deps));
        }
        out
    }

    /// Parses [`FlowGraph::to_text`] output. The result is not validated.
    pub fn parse_text(text: &str) -> Result<Self, GraphError> {
        let mut stream_count = None;
        let mut actions = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |reason: String| GraphError::Parse { line, reason };
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split_whitespace().collect();
            if stream_count.is_none() {
                match fields.as_slice() {
                    ["streams", n] => {
                        stream_count =
                            Some(n.parse::<usize>().map_err(|e| err(format!("stream count: {e}")))?);
                        continue;
                    }
                    _ => return Err(err("expected `streams <count>` header".into())),
                }
            }
            let [id, kind, payload, stream, deps] = fields.as_slice() else {
                return Err(err(format!("expected 5 fields, found {}", fields.len())));
            };
            let deps = if *deps == "-" {
                Vec::new()
            } else {
                deps.split(',')
                    .map(|d| {
                        let (id, kind) = d.split_once('/').ok_or_else(|| err(format!("bad dep `{d}`")))?;
                        let id = id.parse().map_err(|e| err(format!("dep id `{id}`: {e}")))?;
                        let kind = match kind {
                            "sync" => EdgeKind::Sync,
                            "async" => EdgeKind::Async,
                            other => return Err(err(format!("bad edge kind `{other}`"))),
                        };
                        Ok(Dep { id, kind })
                    })
                    .collect::<Result<_, _>>()?
            };
            actions.push(Action {
                id: id.parse().map_err(|e| err(format!("id: {e}")))?,
                kind: kind.parse().map_err(err)?,
                payload: payload.parse().map_err(|e| err(format!("payload: {e}")))?,
                stream: stream.parse().map_err(|e| err(format!("stream: {e}")))?,
                deps,
            });
        }
        let stream_count = stream_count.ok_or(GraphError::Parse {
            line: 0,
            reason: "empty input".into(),
        })?;
        Ok(Self::from_actions(stream_count, actions))
    }
}

fn check_payload(id: ActionId, kind: ActionKind, payload: f64) -> Result<(), GraphError> {
    if !(payload.is_finite() && payload >= 0.0) {
        return Err(GraphError::InvalidPayload {
            action: id,
            reason: format!("payload {payload} must be finite and non-negative"),
        });
    }
    if kind == ActionKind::SYNC && payload != 0.0 {
        return Err(GraphError::InvalidPayload {
            action: id,
            reason: "SYNC carries no payload".into(),
        });
    }
    Ok(())
}

/// Walks predecessor edges among the unresolved actions until one repeats.
fn find_cycle(preds: &[Vec<ActionId>], indeg: &[usize]) -> Vec<ActionId> {
    let stuck = |v: ActionId| indeg[v] > 0;
    let start = (0..preds.len()).find(|&v| stuck(v)).expect("a stuck action exists");
    let mut pos = vec![usize::MAX; preds.len()];
    let mut path = Vec::new();
    let mut v = start;
    loop {
        if pos[v] != usize::MAX {
            let mut cycle = path[pos[v]..].to_vec();
            cycle.sort_unstable();
            return cycle;
        }
        pos[v] = path.len();
        path.push(v);
        // Every stuck action has at least one stuck predecessor.
        v = *preds[v].iter().find(|&&p| stuck(p)).expect("stuck predecessor");
    }
}

/// Task-to-stream mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamAssignment {
    task_to_stream: Vec<usize>,
    stream_count: usize,
}

impl StreamAssignment {
    pub fn stream_of(&self, task: usize) -> usize {
        self.task_to_stream[task]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.task_to_stream
    }

    pub fn stream_count(&self) -> usize {
        self.stream_count
    }

    /// Tasks per stream.
    pub fn loads(&self) -> Vec<usize> {
        let mut loads = vec![0; self.stream_count];
        for &s in &self.task_to_stream {
            loads[s] += 1;
        }
        loads
    }
}

/// Task `i` goes to stream `i mod streams`.
pub fn round_robin_assign(task_count: usize, streams: usize) -> Result<StreamAssignment, GraphError> {
    if streams == 0 {
        return Err(GraphError::InvalidStreamCount);
    }
    Ok(StreamAssignment {
        task_to_stream: (0..task_count).map(|i| i % streams).collect(),
        stream_count: streams,
    })
}

/// True iff some transfer and some kernel in another stream have no directed
/// path between them, i.e. the graph admits transfer/compute concurrency.
pub fn classify_overlappable(graph: &FlowGraph) -> bool {
    let preds = graph.predecessor_lists();
    let succ = graph.successor_lists();
    let n = graph.len();
    let kernels: Vec<&Action> = graph
        .actions()
        .iter()
        .filter(|a| a.kind == ActionKind::EXE)
        .collect();
    let mut mark = vec![0u32; n];
    let mut stamp = 0u32;
    for t in graph.actions().iter().filter(|a| a.kind.is_transfer()) {
        stamp += 1;
        flood(t.id, &succ, &mut mark, stamp);
        flood(t.id, &preds, &mut mark, stamp);
        if kernels.iter().any(|k| k.stream != t.stream && mark[k.id] != stamp) {
            return true;
        }
    }
    false
}

fn flood(from: ActionId, edges: &[Vec<ActionId>], mark: &mut [u32], stamp: u32) {
    let mut stack = vec![from];
    while let Some(v) = stack.pop() {
        for &w in &edges[v] {
            if mark[w] != stamp {
                mark[w] = stamp;
                stack.push(w);
            }
        }
    }
}
