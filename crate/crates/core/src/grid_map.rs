//! Static 4-connected grid maps in the MovingAI benchmark format, plus
//! single-source shortest paths over them under pluggable edge costs.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row-major index of a grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellId(pub u32);

impl CellId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Movement directions in canonical order. Tie-breaking everywhere
/// downstream relies on this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::North, Direction::East, Direction::South, Direction::West];

    pub fn opposite(self) -> Direction {
        match self {
            Direction::North => Direction::South,
            Direction::East => Direction::West,
            Direction::South => Direction::North,
            Direction::West => Direction::East,
        }
    }
}

/// A directed edge between two orthogonally adjacent free cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeId {
    pub from: CellId,
    pub to: CellId,
}

impl EdgeId {
    pub fn new(from: CellId, to: CellId) -> Self {
        EdgeId { from, to }
    }

    pub fn reversed(self) -> Self {
        EdgeId { from: self.to, to: self.from }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MapError {
    #[error("line {line}: malformed header: {message}")]
    Header { line: usize, message: String },
    #[error("line {line}: expected {expected} cells, found {found}")]
    RowLength { line: usize, expected: usize, found: usize },
    #[error("line {line}, column {column}: unknown cell character {ch:?}")]
    UnknownCell { line: usize, column: usize, ch: char },
    #[error("expected {expected} grid rows, found {found}")]
    MissingRows { expected: usize, found: usize },
    #[error("cell {0} is out of range")]
    OutOfRange(CellId),
    #[error("cell {0} is blocked")]
    Blocked(CellId),
}

const NO_CELL: u32 = u32::MAX;

/// Immutable occupancy grid. Free cells may carry a label glyph
/// (`E` workstation, `S` shelf); blocked cells keep their original glyph so
/// the map serializes back unchanged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridMap {
    width: usize,
    height: usize,
    glyphs: Vec<u8>,
    free: Vec<bool>,
    adjacency: Vec<[u32; 4]>,
    free_count: usize,
}

impl GridMap {
    /// Builds a map from per-cell glyphs. Glyphs must be one of `. E S @ T`.
    pub fn from_glyphs(width: usize, height: usize, glyphs: Vec<u8>) -> Result<Self, MapError> {
        if width == 0 || height == 0 {
            return Err(MapError::Header { line: 0, message: "width and height must be positive".into() });
        }
        if glyphs.len() != width * height {
            return Err(MapError::MissingRows { expected: width * height, found: glyphs.len() });
        }
        let mut free = Vec::with_capacity(glyphs.len());
        for (i, &g) in glyphs.iter().enumerate() {
            match g {
                b'.' | b'E' | b'S' => free.push(true),
                b'@' | b'T' => free.push(false),
                other => {
                    return Err(MapError::UnknownCell { line: i / width + 1, column: i % width + 1, ch: other as char })
                }
            }
        }
        let mut map = GridMap { width, height, glyphs, free, adjacency: Vec::new(), free_count: 0 };
        map.rebuild_adjacency();
        Ok(map)
    }

    /// Fully open map of the given size.
    pub fn open(width: usize, height: usize) -> Self {
        Self::from_glyphs(width, height, vec![b'.'; width * height]).expect("open map is valid")
    }

    fn rebuild_adjacency(&mut self) {
        let (w, h) = (self.width, self.height);
        self.free_count = self.free.iter().filter(|&&f| f).count();
        self.adjacency = (0..w * h)
            .map(|i| {
                let mut out = [NO_CELL; 4];
                if !self.free[i] {
                    return out;
                }
                let (x, y) = (i % w, i / w);
                let candidates = [
                    (y > 0).then(|| i - w),
                    (x + 1 < w).then(|| i + 1),
                    (y + 1 < h).then(|| i + w),
                    (x > 0).then(|| i - 1),
                ];
                for (slot, c) in candidates.into_iter().enumerate() {
                    if let Some(j) = c {
                        if self.free[j] {
                            out[slot] = j as u32;
                        }
                    }
                }
                out
            })
            .collect();
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_cells(&self) -> usize {
        self.free.len()
    }

    pub fn num_free(&self) -> usize {
        self.free_count
    }

    pub fn cell(&self, x: usize, y: usize) -> CellId {
        CellId((y * self.width + x) as u32)
    }

    pub fn coords(&self, c: CellId) -> (usize, usize) {
        (c.index() % self.width, c.index() / self.width)
    }

    pub fn in_range(&self, c: CellId) -> bool {
        c.index() < self.free.len()
    }

    pub fn is_free(&self, c: CellId) -> bool {
        self.in_range(c) && self.free[c.index()]
    }

    /// Label glyph of a free cell, if it has one (`E` or `S`).
    pub fn label(&self, c: CellId) -> Option<char> {
        match self.glyphs.get(c.index()) {
            Some(b'E') => Some('E'),
            Some(b'S') => Some('S'),
            _ => None,
        }
    }

    pub fn cells_with_label(&self, label: char) -> Vec<CellId> {
        self.free_cells().filter(|&c| self.label(c) == Some(label)).collect()
    }

    pub fn free_cells(&self) -> impl Iterator<Item = CellId> + '_ {
        self.free.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| CellId(i as u32))
    }

    /// Free orthogonal neighbors in N, E, S, W order.
    pub fn neighbors(&self, v: CellId) -> Result<Vec<CellId>, MapError> {
        self.check_free(v)?;
        Ok(self.adjacent(v).map(|(_, c)| c).collect())
    }

    pub(crate) fn check_free(&self, v: CellId) -> Result<(), MapError> {
        if !self.in_range(v) {
            Err(MapError::OutOfRange(v))
        } else if !self.free[v.index()] {
            Err(MapError::Blocked(v))
        } else {
            Ok(())
        }
    }

    /// Unchecked neighbor iteration in canonical order; yields nothing for
    /// blocked cells.
    #[inline]
    pub fn adjacent(&self, v: CellId) -> impl Iterator<Item = (Direction, CellId)> + '_ {
        let row = &self.adjacency[v.index()];
        Direction::ALL.into_iter().zip(row.iter()).filter(|(_, &c)| c != NO_CELL).map(|(d, &c)| (d, CellId(c)))
    }

    /// The neighbor of `v` in direction `d`, if free.
    #[inline]
    pub fn step(&self, v: CellId, d: Direction) -> Option<CellId> {
        let c = self.adjacency[v.index()][d as usize];
        (c != NO_CELL).then_some(CellId(c))
    }

    /// Direction from `from` to an adjacent `to`, or `None` when the cells
    /// are not connected by a traversable edge.
    pub fn direction(&self, from: CellId, to: CellId) -> Option<Direction> {
        if !self.in_range(from) {
            return None;
        }
        let row = &self.adjacency[from.index()];
        Direction::ALL.into_iter().find(|&d| row[d as usize] == to.0)
    }

    pub fn is_edge(&self, e: EdgeId) -> bool {
        self.direction(e.from, e.to).is_some()
    }

    /// Dense slot of a directed edge: `4 * from + direction`. Valid slots
    /// range over `0..self.num_edge_slots()`.
    #[inline]
    pub fn edge_slot(&self, from: CellId, d: Direction) -> usize {
        from.index() * 4 + d as usize
    }

    pub fn edge_slot_of(&self, e: EdgeId) -> Option<usize> {
        self.direction(e.from, e.to).map(|d| self.edge_slot(e.from, d))
    }

    pub fn num_edge_slots(&self) -> usize {
        self.free.len() * 4
    }

    /// All directed traversable edges, ordered by tail cell then direction.
    pub fn edges(&self) -> impl Iterator<Item = EdgeId> + '_ {
        self.free_cells().flat_map(move |v| self.adjacent(v).map(move |(_, to)| EdgeId::new(v, to)))
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().flatten().filter(|&&c| c != NO_CELL).count()
    }

    pub fn manhattan(&self, a: CellId, b: CellId) -> usize {
        let (ax, ay) = self.coords(a);
        let (bx, by) = self.coords(b);
        ax.abs_diff(bx) + ay.abs_diff(by)
    }

    /// Serializes in the same text format accepted by [`parse_map`].
    pub fn to_map_string(&self) -> String {
        let mut out = format!("type octile\nheight {}\nwidth {}\nmap\n", self.height, self.width);
        for row in self.glyphs.chunks(self.width) {
            out.push_str(std::str::from_utf8(row).expect("glyphs are ascii"));
            out.push('\n');
        }
        out
    }

    /// Blocks every free cell outside the largest 4-connected component.
    pub fn keep_largest_component(&mut self) {
        let n = self.num_cells();
        let mut comp = vec![u32::MAX; n];
        let mut best = (0usize, u32::MAX);
        let mut next_id = 0u32;
        let mut stack = Vec::new();
        for start in 0..n {
            if !self.free[start] || comp[start] != u32::MAX {
                continue;
            }
            let mut size = 0;
            comp[start] = next_id;
            stack.push(start);
            while let Some(v) = stack.pop() {
                size += 1;
                for (_, u) in self.adjacent(CellId(v as u32)) {
                    if comp[u.index()] == u32::MAX {
                        comp[u.index()] = next_id;
                        stack.push(u.index());
                    }
                }
            }
            if size > best.0 {
                best = (size, next_id);
            }
            next_id += 1;
        }
        for i in 0..n {
            if self.free[i] && comp[i] != best.1 {
                self.free[i] = false;
                self.glyphs[i] = b'@';
            }
        }
        self.rebuild_adjacency();
    }
}

/// Parses a MovingAI-style map: `type`, `height H`, `width W`, `map`, then
/// H rows of W characters.
pub fn parse_map(text: &str) -> Result<GridMap, MapError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));

    let mut header_field = |key: &str| -> Result<(usize, String), MapError> {
        let (line, content) =
            lines.next().ok_or_else(|| MapError::Header { line: 0, message: format!("missing `{key}` line") })?;
        let mut parts = content.split_whitespace();
        match parts.next() {
            Some(k) if k == key => Ok((line, parts.collect::<Vec<_>>().join(" "))),
            _ => Err(MapError::Header { line, message: format!("expected `{key}`, found {content:?}") }),
        }
    };

    let (line, ty) = header_field("type")?;
    if ty.is_empty() {
        return Err(MapError::Header { line, message: "missing map type".into() });
    }
    let parse_dim = |(line, v): (usize, String)| {
        v.parse::<usize>()
            .ok()
            .filter(|&d| d > 0)
            .ok_or(MapError::Header { line, message: format!("invalid dimension {v:?}") })
    };
    let height = parse_dim(header_field("height")?)?;
    let width = parse_dim(header_field("width")?)?;
    header_field("map")?;

    let mut glyphs = Vec::with_capacity(width * height);
    let mut rows = 0;
    for (line, content) in lines {
        if rows == height {
            if content.trim().is_empty() {
                continue;
            }
            return Err(MapError::MissingRows { expected: height, found: rows + 1 });
        }
        let found = content.chars().count();
        if found != width {
            return Err(MapError::RowLength { line, expected: width, found });
        }
        for (col, ch) in content.chars().enumerate() {
            match ch {
                '.' | 'E' | 'S' | '@' | 'T' => glyphs.push(ch as u8),
                _ => return Err(MapError::UnknownCell { line, column: col + 1, ch }),
            }
        }
        rows += 1;
    }
    if rows != height {
        return Err(MapError::MissingRows { expected: height, found: rows });
    }
    GridMap::from_glyphs(width, height, glyphs)
}

/// Cost of traversing a directed edge. Implementations must return a
/// nonnegative value for every traversable edge.
pub trait EdgeCost {
    fn cost(&self, edge: EdgeId) -> f64;
}

impl<F: Fn(EdgeId) -> f64> EdgeCost for F {
    fn cost(&self, edge: EdgeId) -> f64 {
        self(edge)
    }
}

/// Precomputed per-slot edge costs, indexed by [`GridMap::edge_slot`].
#[derive(Clone, Debug)]
pub struct EdgeCostTable<'m> {
    map: &'m GridMap,
    costs: Vec<f64>,
}

impl<'m> EdgeCostTable<'m> {
    pub fn new<C: EdgeCost + ?Sized>(map: &'m GridMap, cost: &C) -> Self {
        let mut costs = vec![f64::INFINITY; map.num_edge_slots()];
        for v in map.free_cells() {
            for (d, to) in map.adjacent(v) {
                costs[map.edge_slot(v, d)] = cost.cost(EdgeId::new(v, to));
            }
        }
        EdgeCostTable { map, costs }
    }

    pub fn unit(map: &'m GridMap) -> Self {
        Self::new(map, &|_: EdgeId| 1.0)
    }

    #[inline]
    pub fn slot_cost(&self, slot: usize) -> f64 {
        self.costs[slot]
    }

    pub fn map(&self) -> &'m GridMap {
        self.map
    }
}

impl EdgeCost for EdgeCostTable<'_> {
    fn cost(&self, edge: EdgeId) -> f64 {
        self.map.edge_slot_of(edge).map_or(f64::INFINITY, |s| self.costs[s])
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry {
    cost: f64,
    cell: u32,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    // Min-heap on (cost, cell).
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Result of a single-source search: settled distances and a shortest-path
/// tree.
#[derive(Clone, Debug)]
pub struct DistanceMap {
    source: CellId,
    dist: Vec<f64>,
    parent: Vec<u32>,
    settled: Vec<bool>,
}

impl DistanceMap {
    pub fn source(&self) -> CellId {
        self.source
    }

    /// Exact distance to `c` if it was settled by the search.
    pub fn get(&self, c: CellId) -> Option<f64> {
        self.settled.get(c.index()).copied().unwrap_or(false).then(|| self.dist[c.index()])
    }

    pub fn iter(&self) -> impl Iterator<Item = (CellId, f64)> + '_ {
        self.settled.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| (CellId(i as u32), self.dist[i]))
    }

    pub fn len(&self) -> usize {
        self.settled.iter().filter(|&&s| s).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cells from the source to `target` inclusive.
    pub fn path_to(&self, target: CellId) -> Option<Vec<CellId>> {
        self.get(target)?;
        let mut path = vec![target];
        let mut cur = target.0;
        while cur != self.source.0 {
            cur = self.parent[cur as usize];
            path.push(CellId(cur));
        }
        path.reverse();
        Some(path)
    }
}

/// Dijkstra from `source`. When `targets` is given the search stops as soon
/// as every target is settled; cells never settled are absent from the
/// result.
pub fn shortest_distances<C: EdgeCost + ?Sized>(
    map: &GridMap,
    source: CellId,
    edge_cost: &C,
    targets: Option<&[CellId]>,
) -> DistanceMap {
    let n = map.num_cells();
    let mut out =
        DistanceMap { source, dist: vec![f64::INFINITY; n], parent: vec![NO_CELL; n], settled: vec![false; n] };
    if !map.is_free(source) {
        return out;
    }

    let mut pending_targets = 0usize;
    let mut is_target = Vec::new();
    if let Some(ts) = targets {
        is_target = vec![false; n];
        for t in ts {
            if map.is_free(*t) && !is_target[t.index()] {
                is_target[t.index()] = true;
                pending_targets += 1;
            }
        }
        if pending_targets == 0 {
            return out;
        }
    }

    let mut heap = BinaryHeap::new();
    out.dist[source.index()] = 0.0;
    out.parent[source.index()] = source.0;
    heap.push(HeapEntry { cost: 0.0, cell: source.0 });
    while let Some(HeapEntry { cost, cell }) = heap.pop() {
        let v = cell as usize;
        if out.settled[v] || cost > out.dist[v] {
            continue;
        }
        out.settled[v] = true;
        if targets.is_some() && is_target[v] {
            pending_targets -= 1;
            if pending_targets == 0 {
                break;
            }
        }
        for (_, u) in map.adjacent(CellId(cell)) {
            let w = edge_cost.cost(EdgeId::new(CellId(cell), u));
            let nd = cost + w;
            if nd < out.dist[u.index()] {
                out.dist[u.index()] = nd;
                out.parent[u.index()] = cell;
                heap.push(HeapEntry { cost: nd, cell: u.0 });
            }
        }
    }
    out
}

/// Unit-cost breadth-first distances from `source` to every reachable cell
/// (`u32::MAX` when unreachable).
pub fn bfs_distances(map: &GridMap, source: CellId) -> Vec<u32> {
    multi_source_bfs(map, std::iter::once(source))
}

/// Unit-cost distance from each cell to the nearest of `sources`.
pub fn multi_source_bfs(map: &GridMap, sources: impl IntoIterator<Item = CellId>) -> Vec<u32> {
    let mut dist = vec![u32::MAX; map.num_cells()];
    let mut queue = std::collections::VecDeque::new();
    for s in sources {
        if map.is_free(s) && dist[s.index()] == u32::MAX {
            dist[s.index()] = 0;
            queue.push_back(s);
        }
    }
    while let Some(v) = queue.pop_front() {
        let d = dist[v.index()];
        for (_, u) in map.adjacent(v) {
            if dist[u.index()] == u32::MAX {
                dist[u.index()] = d + 1;
                queue.push_back(u);
            }
        }
    }
    dist
}
