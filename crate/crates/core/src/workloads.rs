//! Offload flow generators for the benchmark suite.
//!
//! Each generator turns a problem size and a tiling into a [`FlowGraph`].
//! Tasks are dealt round-robin over the streams in generation order. Only
//! payload sizes and work are modeled; nothing is computed.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::pipeline::{ActionId, ActionKind, Dep, FlowGraph, GraphError};

/// Bytes written back per NN record (one distance).
pub const NN_RESULT_BYTES: f64 = 4.0;
/// Bytes written back per Kmeans point (one cluster index).
pub const KMEANS_MEMBERSHIP_BYTES: f64 = 4.0;
/// Phase kernels per SRAD iteration: preparation, reduction, statistics, computation.
pub const SRAD_PHASES: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("invalid workload parameters: {0}")]
    Parameter(String),
    #[error("unknown benchmark `{0}` (accepted: hbench, mm, cf, kmeans, hotspot, nn, srad)")]
    UnknownBenchmark(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Benchmark {
    HBench,
    Mm,
    Cf,
    Kmeans,
    Hotspot,
    Nn,
    Srad,
}

impl Benchmark {
    pub const ALL: [Benchmark; 7] = [
        Benchmark::HBench,
        Benchmark::Mm,
        Benchmark::Cf,
        Benchmark::Kmeans,
        Benchmark::Hotspot,
        Benchmark::Nn,
        Benchmark::Srad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::HBench => "hbench",
            Benchmark::Mm => "mm",
            Benchmark::Cf => "cf",
            Benchmark::Kmeans => "kmeans",
            Benchmark::Hotspot => "hotspot",
            Benchmark::Nn => "nn",
            Benchmark::Srad => "srad",
        }
    }

    /// Whether the benchmark's flow lets transfers overlap foreign kernels.
    pub fn is_overlappable(self) -> bool {
        matches!(self, Benchmark::Mm | Benchmark::Cf | Benchmark::Nn | Benchmark::HBench)
    }

    fn tiling(self) -> Tiling {
        match self {
            Benchmark::Mm | Benchmark::Hotspot | Benchmark::Srad => Tiling::Grid2d,
            Benchmark::Cf => Tiling::Square2d,
            Benchmark::Kmeans | Benchmark::Nn | Benchmark::HBench => Tiling::Linear,
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Benchmark {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Benchmark::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| WorkloadError::UnknownBenchmark(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tiling {
    /// Rectangular tiles over a `D x D` domain.
    Grid2d,
    /// Uniform square tiles whose edge divides `D`.
    Square2d,
    /// Contiguous chunks of a 1-D range.
    Linear,
}

/// Benchmark problem description.
///
/// `size` is the matrix order or grid edge (MM, CF, Hotspot, SRAD), the
/// number of points or records (Kmeans, NN) or the elements per array
/// (hBench). `tile` is the tile edge, chunk length or hBench block length in
/// elements, and also the finest granularity the tuner may pick.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadParams {
    pub benchmark: Benchmark,
    pub size: usize,
    pub tile: usize,
    pub iterations: usize,
    /// Bytes per element (per record or point for NN and Kmeans).
    pub element_size: f64,
    /// Scale applied to each kernel's base work count.
    pub flops_per_element: f64,
}

impl WorkloadParams {
    /// Desk-scale defaults for `benchmark`.
    pub fn desk(benchmark: Benchmark) -> Self {
        let (size, tile, iterations, element_size) = match benchmark {
            Benchmark::HBench => (16 << 20, 1 << 20, 40, 1.0),
            Benchmark::Mm => (1200, 100, 1, 8.0),
            Benchmark::Cf => (1200, 100, 1, 8.0),
            Benchmark::Kmeans => (112_000, 2_000, 10, 16.0),
            Benchmark::Hotspot => (1024, 128, 10, 4.0),
            Benchmark::Nn => (1 << 20, 8192, 1, 8.0),
            Benchmark::Srad => (512, 64, 4, 4.0),
        };
        Self {
            benchmark,
            size,
            tile,
            iterations,
            element_size,
            flops_per_element: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::Parameter(m));
        if self.size == 0 || self.tile == 0 {
            return bad("size and tile must be positive".into());
        }
        if self.tile > self.size {
            return bad(format!("tile {} exceeds size {}", self.tile, self.size));
        }
        if !(self.element_size.is_finite() && self.element_size > 0.0) {
            return bad("element_size must be positive".into());
        }
        if !(self.flops_per_element.is_finite() && self.flops_per_element >= 0.0) {
            return bad("flops_per_element must be non-negative".into());
        }
        let iterative = matches!(
            self.benchmark,
            Benchmark::Kmeans | Benchmark::Hotspot | Benchmark::Srad
        );
        if iterative && self.iterations == 0 {
            return bad(format!("{} needs at least one iteration", self.benchmark));
        }
        if matches!(self.benchmark, Benchmark::Cf | Benchmark::HBench) && !self.size.is_multiple_of(self.tile) {
            return bad(format!(
                "{}: tile {} does not divide size {}",
                self.benchmark, self.tile, self.size
            ));
        }
        Ok(())
    }

    /// Tiles along one axis at the configured tile edge.
    fn tiles_per_axis(&self) -> usize {
        self.size.div_ceil(self.tile)
    }

    /// Task count `T` at the configured tile: tiles per kernel phase.
    pub fn task_count(&self) -> usize {
        match self.benchmark.tiling() {
            Tiling::Grid2d | Tiling::Square2d => self.tiles_per_axis().pow(2),
            Tiling::Linear => self.tiles_per_axis(),
        }
    }

    /// Largest task count the tuner may request.
    pub fn max_tasks(&self) -> usize {
        self.task_count()
    }

    /// Whether `tasks` tiles can be laid out for this benchmark.
    pub fn supports_task_count(&self, tasks: usize) -> bool {
        if tasks == 0 || tasks > self.max_tasks() {
            return false;
        }
        match self.benchmark.tiling() {
            Tiling::Linear => tasks <= self.size,
            Tiling::Grid2d => TileGrid::with_count(self.size, tasks).is_some(),
            Tiling::Square2d => {
                let n = exact_sqrt(tasks);
                n.is_some_and(|n| self.size.is_multiple_of(n))
            }
        }
    }

    /// Flow at the configured tile.
    pub fn flow(&self, streams: usize) -> Result<FlowGraph, WorkloadError> {
        self.validate()?;
        let d = self.size;
        match self.benchmark {
            Benchmark::HBench => hbench_flow(&self.hbench_params(self.tiles_per_axis())?, streams),
            Benchmark::Cf => cf_flow(self, streams),
            Benchmark::Mm => mm_graph(self, &TileGrid::square(d, self.tile), streams),
            Benchmark::Hotspot => hotspot_graph(self, &TileGrid::square(d, self.tile), streams),
            Benchmark::Srad => srad_graph(self, &TileGrid::square(d, self.tile), streams),
            Benchmark::Nn => nn_graph(self, &chunks(d, self.tile), streams),
            Benchmark::Kmeans => kmeans_graph(self, &chunks(d, self.tile), streams),
        }
    }

    /// Flow split into exactly `tasks` tiles per kernel phase.
    pub fn flow_with_tasks(&self, tasks: usize, streams: usize) -> Result<FlowGraph, WorkloadError> {
        self.validate()?;
        if !self.supports_task_count(tasks) {
            return Err(WorkloadError::Parameter(format!(
                "{} cannot be split into {tasks} tasks",
                self.benchmark
            )));
        }
        let d = self.size;
        let grid = || TileGrid::with_count(d, tasks).expect("checked by supports_task_count");
        match self.benchmark {
            Benchmark::HBench => hbench_flow(&self.hbench_params(tasks)?, streams),
            Benchmark::Cf => {
                let n = exact_sqrt(tasks).expect("checked by supports_task_count");
                cf_flow(
                    &WorkloadParams {
                        tile: d / n,
                        ..self.clone()
                    },
                    streams,
                )
            }
            Benchmark::Mm => mm_graph(self, &grid(), streams),
            Benchmark::Hotspot => hotspot_graph(self, &grid(), streams),
            Benchmark::Srad => srad_graph(self, &grid(), streams),
            Benchmark::Nn => nn_graph(self, &even_split(d, tasks), streams),
            Benchmark::Kmeans => kmeans_graph(self, &even_split(d, tasks), streams),
        }
    }

    fn hbench_params(&self, tiles: usize) -> Result<HBenchParams, WorkloadError> {
        let blocks = self.size / self.tile;
        Ok(HBenchParams {
            hd_blocks: blocks,
            dh_blocks: blocks,
            block_bytes: self.tile as f64 * self.element_size,
            iterations: self.iterations,
            tiles,
            element_bytes: self.element_size,
            flops_per_element: self.flops_per_element,
        })
    }
}

fn exact_sqrt(x: usize) -> Option<usize> {
    let r = (x as f64).sqrt().round() as usize;
    (r * r == x).then_some(r)
}

/// Extents of a 1-D range cut into `tile`-sized chunks, remainder last.
fn chunks(len: usize, tile: usize) -> Vec<usize> {
    let mut out = vec![tile; len / tile];
    if !len.is_multiple_of(tile) {
        out.push(len % tile);
    }
    out
}

/// `len` split into `parts` extents differing by at most one.
fn even_split(len: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|p| len / parts + usize::from(p < len % parts))
        .collect()
}

/// Row and column extents of a 2-D tiling.
#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl TileGrid {
    /// Square `tile x tile` tiles, smaller remainder tiles on the last row and column.
    pub fn square(size: usize, tile: usize) -> Self {
        Self {
            rows: chunks(size, tile),
            cols: chunks(size, tile),
        }
    }

    /// Exactly `count` tiles, laid out as the most nearly square
    /// `rows x cols` factorization with balanced extents.
    pub fn with_count(size: usize, count: usize) -> Option<Self> {
        let rows = (1..=count)
            .take_while(|r| r * r <= count)
            .filter(|r| count.is_multiple_of(*r))
            .last()?;
        let cols = count / rows;
        (cols <= size).then(|| Self {
            rows: even_split(size, rows),
            cols: even_split(size, cols),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell counts of every tile, row-major.
    pub fn areas(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .flat_map(move |&r| self.cols.iter().map(move |&c| (r, c)))
    }
}

fn mm_graph(p: &WorkloadParams, grid: &TileGrid, streams: usize) -> Result<FlowGraph, WorkloadError> {
    let mut g = FlowGraph::new(streams)?;
    let d = p.size as f64;
    for (t, (r, c)) in grid.areas().enumerate() {
        let s = t % streams;
        let cells = (r * c) as f64;
        let h = g.add_action(ActionKind::H2D, 2.0 * cells * p.element_size, s, [])?;
        let e = g.add_action(ActionKind::EXE, 2.0 * cells * d * p.flops_per_element, s, [Dep::async_(h)])?;
        g.add_action(ActionKind::D2H, cells * p.element_size, s, [Dep::async_(e)])?;
    }
    Ok(g)
}

/// Independent tiles: each uploads its A and B tiles, multiplies, and
/// downloads its C tile.
pub fn mm_flow(p: &WorkloadParams, streams: usize) -> Result<FlowGraph, WorkloadError> {
    p.validate()?;
    mm_graph(p, &TileGrid::square(p.size, p.tile), streams)
}

fn nn_graph(p: &WorkloadParams, parts: &[usize], streams: usize) -> Result<FlowGraph, WorkloadError> {
    let mut g = FlowGraph::new(streams)?;
    for (t, &n) in parts.iter().enumerate() {
        let s = t % streams;
        let n = n as f64;
        let h = g.add_action(ActionKind::H2D, n * p.element_size, s, [])?;
        let e = g.add_action(ActionKind::EXE, n * p.flops_per_element, s, [Dep::async_(h)])?;
        g.add_action(ActionKind::D2H, n * NN_RESULT_BYTES, s, [Dep::async_(e)])?;
    }
    Ok(g)
}

/// Same shape as MM, with record chunks: heavy transfers, light kernels.
pub fn nn_flow(p: &WorkloadParams, streams: usize) -> Result<FlowGraph, WorkloadError> {
    p.validate()?;
    nn_graph(p, &chunks(p.size, p.tile), streams)
}

fn hotspot_graph(p: &WorkloadParams, grid: &TileGrid, streams: usize) -> Result<FlowGraph, WorkloadError> {
    let mut g = FlowGraph::new(streams)?;
    let cells = (p.size * p.size) as f64;
    // power and temperature maps
    let mut barrier = g.add_action(ActionKind::H2D, 2.0 * cells * p.element_size, 0, [])?;
    for _ in 0..p.iterations {
        let mut tiles = Vec::with_capacity(grid.len());
        for (t, (r, c)) in grid.areas().enumerate() {
            let work = (r * c) as f64 * p.flops_per_element;
            tiles.push(g.add_action(ActionKind::EXE, work, t % streams, [Dep::sync(barrier)])?);
        }
        // neighbor exchange
        barrier = g.add_action(ActionKind::SYNC, 0.0, 0, tiles.into_iter().map(Dep::sync))?;
    }
    g.add_action(ActionKind::D2H, cells * p.element_size, 0, [Dep::sync(barrier)])?;
    Ok(g)
}

/// One upload, per-iteration tile kernels joined by a global barrier, one download.
pub fn hotspot_flow(p: &WorkloadParams, streams: usize) -> Result<FlowGraph, WorkloadError> {
    p.validate()?;
    hotspot_graph(p, &TileGrid::square(p.size, p.tile), streams)
}

fn kmeans_graph(p: &WorkloadParams, parts: &[usize], streams: usize) -> Result<FlowGraph, WorkloadError> {
    let mut g = FlowGraph::new(streams)?;
    let points = p.size as f64;
    let mut barrier = g.add_action(ActionKind::H2D, points * p.element_size, 0, [])?;
    let active = streams.min(parts.len());
    for _ in 0..p.iterations {
        let allocs = (0..active)
            .map(|s| g.add_action(ActionKind::ALLOC, 1.0, s, [Dep::sync(barrier)]))
            .collect::<Result<Vec<_>, _>>()?;
        let mut tiles = Vec::with_capacity(parts.len());
        for (t, &n) in parts.iter().enumerate() {
            let s = t % streams;
            let work = n as f64 * p.flops_per_element;
            tiles.push(g.add_action(ActionKind::EXE, work, s, [Dep::async_(allocs[s])])?);
        }
        // centroid update
        barrier = g.add_action(ActionKind::SYNC, 0.0, 0, tiles.into_iter().map(Dep::sync))?;
    }
    g.add_action(ActionKind::D2H, points * KMEANS_MEMBERSHIP_BYTES, 0, [Dep::sync(barrier)])?;
    Ok(g)
}

/// Per iteration every active stream allocates scratch space, runs its
/// tiles, and all streams meet at the centroid update.
pub fn kmeans_flow(p: &WorkloadParams, streams: usize) -> Result<FlowGraph, WorkloadError> {
    p.validate()?;
    kmeans_graph(p, &chunks(p.size, p.tile), streams)
}

fn srad_graph(p: &WorkloadParams, grid: &TileGrid, streams: usize) -> Result<FlowGraph, WorkloadError> {
    let mut g = FlowGraph::new(streams)?;
    let cells = (p.size * p.size) as f64;
    let h = g.add_action(ActionKind::H2D, cells * p.element_size, 0, [])?;
    let extract = g.add_action(ActionKind::EXE, cells * p.flops_per_element, 0, [Dep::async_(h)])?;
    let mut barrier = extract;
    let mut previous: Vec<ActionId> = Vec::new();
    for _ in 0..p.iterations {
        for _ in 0..SRAD_PHASES {
            if !previous.is_empty() {
                barrier = g.add_action(ActionKind::SYNC, 0.0, 0, previous.drain(..).map(Dep::sync))?;
            }
            for (t, (r, c)) in grid.areas().enumerate() {
                let work = (r * c) as f64 * p.flops_per_element;
                previous.push(g.add_action(ActionKind::EXE, work, t % streams, [Dep::sync(barrier)])?);
            }
        }
    }
    let compress = g.add_action(
        ActionKind::EXE,
        cells * p.flops_per_element,
        0,
        previous.into_iter().map(Dep::sync),
    )?;
    g.add_action(ActionKind::D2H, cells * p.element_size, 0, [Dep::async_(compress)])?;
    Ok(g)
}

/// Extraction, then per iteration four phase kernels over all tiles with a
/// barrier between consecutive phases, then compression.
pub fn srad_flow(p: &WorkloadParams, streams: usize) -> Result<FlowGraph, WorkloadError> {
    p.validate()?;
    srad_graph(p, &TileGrid::square(p.size, p.tile), streams)
}

/// Right-looking tiled Cholesky over the lower triangle, tiles visited
/// column-major.
///
/// Step `k` factors the diagonal tile, solves the `n-k-1` panel tiles
/// below it, then updates every trailing tile `(i, j)` from its panel pair
/// `(i, k)`, `(j, k)`. Each tile is uploaded just before its first use and
/// downloaded right after it is final.
pub fn cf_flow(p: &WorkloadParams, streams: usize) -> Result<FlowGraph, WorkloadError> {
    p.validate()?;
    if p.benchmark != Benchmark::Cf && !p.size.is_multiple_of(p.tile) {
        return Err(WorkloadError::Parameter(format!(
            "tile {} does not divide size {}",
            p.tile, p.size
        )));
    }
    let n = p.size / p.tile;
    let b = p.tile as f64;
    let tile_bytes = b * b * p.element_size;
    let cube = b * b * b * p.flops_per_element;

    let mut g = FlowGraph::new(streams)?;
    // Last writer of each tile, the upload if nothing has written it yet.
    let mut last: Vec<Option<ActionId>> = vec![None; n * n];
    let mut next_task = 0usize;
    let mut stream = || {
        let s = next_task % streams;
        next_task += 1;
        s
    };
    let touch = |g: &mut FlowGraph, last: &[Option<ActionId>], i: usize, j: usize, s: usize| match last[i * n + j] {
        Some(id) => Ok(id),
        None => g.add_action(ActionKind::H2D, tile_bytes, s, []),
    };

    for k in 0..n {
        let s = stream();
        let dkk = touch(&mut g, &last, k, k, s)?;
        let potrf = g.add_action(ActionKind::EXE, cube / 3.0, s, [Dep::async_(dkk)])?;
        last[k * n + k] = Some(potrf);
        g.add_action(ActionKind::D2H, tile_bytes, s, [Dep::async_(potrf)])?;

        let mut panel = vec![0; n];
        for i in k + 1..n {
            let s = stream();
            let dik = touch(&mut g, &last, i, k, s)?;
            let trsm = g.add_action(ActionKind::EXE, cube, s, [Dep::sync(potrf), Dep::async_(dik)])?;
            last[i * n + k] = Some(trsm);
            panel[i] = trsm;
            g.add_action(ActionKind::D2H, tile_bytes, s, [Dep::async_(trsm)])?;
        }

        for j in k + 1..n {
            for i in j..n {
                let s = stream();
                let dij = touch(&mut g, &last, i, j, s)?;
                let work = if i == j { cube } else { 2.0 * cube };
                let upd = g.add_action(
                    ActionKind::EXE,
                    work,
                    s,
                    [Dep::async_(dij), Dep::sync(panel[i]), Dep::sync(panel[j])],
                )?;
                last[i * n + j] = Some(upd);
            }
        }
    }
    Ok(g)
}

/// Microbenchmark layout: `hd_blocks` uploads and `dh_blocks` downloads of
/// `block_bytes` each, optionally with `tiles` kernels in between.
#[derive(Debug, Clone, PartialEq)]
pub struct HBenchParams {
    pub hd_blocks: usize,
    pub dh_blocks: usize,
    pub block_bytes: f64,
    pub iterations: usize,
    pub tiles: usize,
    pub element_bytes: f64,
    pub flops_per_element: f64,
}

impl HBenchParams {
    /// Transfers only.
    pub fn transfers(hd_blocks: usize, dh_blocks: usize, block_bytes: f64) -> Self {
        Self {
            hd_blocks,
            dh_blocks,
            block_bytes,
            iterations: 0,
            tiles: 0,
            element_bytes: 1.0,
            flops_per_element: 1.0,
        }
    }

    /// Elements processed per kernel iteration over the whole array.
    pub fn elements(&self) -> f64 {
        self.hd_blocks.max(self.dh_blocks) as f64 * self.block_bytes / self.element_bytes
    }
}

/// Without kernels the uploads come first, then the downloads, dealt
/// round-robin over streams. With kernels, tile `t` uploads its share of
/// blocks, runs `elements / tiles * iterations` of work and downloads its
/// share of the output blocks.
pub fn hbench_flow(p: &HBenchParams, streams: usize) -> Result<FlowGraph, WorkloadError> {
    if !(p.block_bytes.is_finite() && p.block_bytes >= 0.0 && p.element_bytes > 0.0) {
        return Err(WorkloadError::Parameter("block and element sizes must be positive".into()));
    }
    let mut g = FlowGraph::new(streams)?;
    if p.iterations == 0 || p.tiles == 0 {
        for b in 0..p.hd_blocks {
            g.add_action(ActionKind::H2D, p.block_bytes, b % streams, [])?;
        }
        for b in 0..p.dh_blocks {
            g.add_action(ActionKind::D2H, p.block_bytes, (p.hd_blocks + b) % streams, [])?;
        }
        return Ok(g);
    }

    let work = p.elements() * p.iterations as f64 * p.flops_per_element / p.tiles as f64;
    let share = |blocks: usize, t: usize| (t * blocks / p.tiles)..((t + 1) * blocks / p.tiles);
    for t in 0..p.tiles {
        let s = t % streams;
        let uploads = share(p.hd_blocks, t)
            .map(|_| g.add_action(ActionKind::H2D, p.block_bytes, s, []))
            .collect::<Result<Vec<_>, _>>()?;
        let exe = g.add_action(ActionKind::EXE, work, s, uploads.into_iter().map(Dep::async_))?;
        for _ in share(p.dh_blocks, t) {
            g.add_action(ActionKind::D2H, p.block_bytes, s, [Dep::async_(exe)])?;
        }
    }
    Ok(g)
}

/// The four transfer-overlap scenarios of the microbenchmark, each swept
/// over a step `k` in `0..=max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferScenario {
    /// `hd = dh = max`.
    Cc,
    /// `hd = k`, `dh = max`.
    Ic,
    /// `hd = max`, `dh = max - k`.
    Cd,
    /// `hd = k`, `dh = max - k`.
    Id,
}

impl TransferScenario {
    pub const ALL: [TransferScenario; 4] = [
        TransferScenario::Cc,
        TransferScenario::Ic,
        TransferScenario::Cd,
        TransferScenario::Id,
    ];

    /// `(hd, dh)` block counts at step `k`.
    pub fn blocks(self, k: usize, max: usize) -> (usize, usize) {
        match self {
            TransferScenario::Cc => (max, max),
            TransferScenario::Ic => (k, max),
            TransferScenario::Cd => (max, max - k),
            TransferScenario::Id => (k, max - k),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransferScenario::Cc => "cc",
            TransferScenario::Ic => "ic",
            TransferScenario::Cd => "cd",
            TransferScenario::Id => "id",
        }
    }
}
