//! Task assignment strategies: greedy nearest pair, bipartite linear
//! assignment over shortest-path distances, and the spatial flow model that
//! solves one min-cost flow over the map itself and reads assignments and
//! guide paths back out of the flow.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid_map::{bfs_distances, shortest_distances, CellId, EdgeCost, EdgeId, GridMap};
use crate::mincost_flow::{solve_min_cost_flow, Capacity, FlowError, FlowNetwork, FlowSolution};

pub type AgentId = u32;
pub type TaskId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum AssignmentError {
    #[error("agents {0} and {1} share cell {2}")]
    SharedStart(AgentId, AgentId, CellId),
    #[error("agent {0} stands on unusable cell {1}")]
    AgentNotOnFreeCell(AgentId, CellId),
    #[error("task {0} has unusable pickup cell {1}")]
    TaskNotOnFreeCell(TaskId, CellId),
    #[error("flow walk for agent {0} exceeded {1} steps without reaching a task")]
    WalkTooLong(AgentId, usize),
    #[error("flow walk for agent {0} got stuck at cell {1}")]
    WalkStuck(AgentId, CellId),
    #[error("illegal task transition {from:?} -> {to:?} for task {task}")]
    IllegalTransition { task: TaskId, from: TaskState, to: TaskState },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Pooled,
    Assigned,
    PickedUp,
    Delivered,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub pickup: CellId,
    pub delivery: CellId,
    pub state: TaskState,
    pub release_step: u64,
}

impl Task {
    pub fn new(id: TaskId, pickup: CellId, delivery: CellId, release_step: u64) -> Self {
        Task { id, pickup, delivery, state: TaskState::Pooled, release_step }
    }

    /// Moves the task forward in its lifecycle. The only backward move is
    /// assigned -> pooled, used when a task is swapped away before pickup.
    pub fn transition(&mut self, to: TaskState) -> Result<(), AssignmentError> {
        use TaskState::*;
        let ok = matches!(
            (self.state, to),
            (Pooled, Assigned) | (Assigned, Pooled) | (Assigned, PickedUp) | (PickedUp, Delivered)
        );
        if !ok {
            return Err(AssignmentError::IllegalTransition { task: self.id, from: self.state, to });
        }
        self.state = to;
        Ok(())
    }
}

/// Time-independent spatial path toward an agent's current goal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GuidePath {
    cells: Vec<CellId>,
}

impl GuidePath {
    pub fn new(cells: Vec<CellId>) -> Self {
        assert!(!cells.is_empty(), "guide path needs at least one cell");
        GuidePath { cells }
    }

    pub fn cells(&self) -> &[CellId] {
        &self.cells
    }

    pub fn start(&self) -> CellId {
        self.cells[0]
    }

    pub fn goal(&self) -> CellId {
        *self.cells.last().expect("non-empty")
    }

    /// Number of moves along the path.
    pub fn len(&self) -> usize {
        self.cells.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.cells.len() == 1
    }

    /// True when consecutive cells are joined by traversable edges.
    pub fn is_valid(&self, map: &GridMap) -> bool {
        map.is_free(self.cells[0]) && self.cells.windows(2).all(|w| map.is_edge(EdgeId::new(w[0], w[1])))
    }

    pub fn cost<C: EdgeCost + ?Sized>(&self, cost: &C) -> f64 {
        self.cells.windows(2).map(|w| cost.cost(EdgeId::new(w[0], w[1]))).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: AgentId,
    pub location: CellId,
    pub carried: Option<TaskId>,
    pub assigned: Option<TaskId>,
    pub guide: Option<GuidePath>,
}

impl Agent {
    pub fn new(id: AgentId, location: CellId) -> Self {
        Agent { id, location, carried: None, assigned: None, guide: None }
    }

    pub fn is_delivering(&self) -> bool {
        self.carried.is_some()
    }
}

/// Agent offered to an assignment solver.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgentSlot {
    pub id: AgentId,
    pub location: CellId,
}

/// Task offered to an assignment solver.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSlot {
    pub id: TaskId,
    pub pickup: CellId,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssignmentSet {
    pub pairs: BTreeMap<AgentId, TaskId>,
    pub guide_paths: BTreeMap<AgentId, GuidePath>,
    pub total_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub agent: AgentId,
    pub task: TaskId,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub path: Option<Vec<CellId>>,
}

impl AssignmentSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// True when no task is paired with two agents.
    pub fn is_injective(&self) -> bool {
        let mut seen: Vec<TaskId> = self.pairs.values().copied().collect();
        seen.sort_unstable();
        seen.windows(2).all(|w| w[0] != w[1])
    }

    pub fn records(&self) -> Vec<AssignmentRecord> {
        self.pairs
            .iter()
            .map(|(&agent, &task)| AssignmentRecord {
                agent,
                task,
                path: self.guide_paths.get(&agent).map(|p| p.cells().to_vec()),
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.records()).expect("records serialize")
    }
}

/// Source of agent-to-pickup distances for the greedy strategy.
pub trait DistanceProvider {
    fn distance(&mut self, from: CellId, to: CellId) -> Option<f64>;
}

/// Unit-cost distances computed on demand by BFS from each pickup cell and
/// cached across calls.
#[derive(Clone, Debug)]
pub struct CachedUnitDistances<'m> {
    map: &'m GridMap,
    cache: HashMap<CellId, Vec<u32>>,
}

impl<'m> CachedUnitDistances<'m> {
    pub fn new(map: &'m GridMap) -> Self {
        CachedUnitDistances { map, cache: HashMap::new() }
    }

    pub fn cached_sources(&self) -> usize {
        self.cache.len()
    }
}

impl DistanceProvider for CachedUnitDistances<'_> {
    fn distance(&mut self, from: CellId, to: CellId) -> Option<f64> {
        if !self.map.is_free(from) || !self.map.is_free(to) {
            return None;
        }
        // unit costs are symmetric, so search from the (shared) pickup side
        let map = self.map;
        let table = self.cache.entry(to).or_insert_with(|| bfs_distances(map, to));
        match table[from.index()] {
            u32::MAX => None,
            d => Some(d as f64),
        }
    }
}

/// Repeatedly fixes the globally closest remaining (agent, task) pair. Ties
/// go to the lower agent id, then the lower task id. Unreachable pairs are
/// never formed.
pub fn greedy_assign<D: DistanceProvider + ?Sized>(
    agents: &[AgentSlot],
    tasks: &[TaskSlot],
    dist: &mut D,
) -> AssignmentSet {
    let mut candidates = Vec::with_capacity(agents.len() * tasks.len());
    for a in agents {
        for t in tasks {
            if let Some(d) = dist.distance(a.location, t.pickup) {
                candidates.push((d, a.id, t.id));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let mut out = AssignmentSet::default();
    let mut used_tasks = std::collections::HashSet::new();
    let limit = agents.len().min(tasks.len());
    for (d, agent, task) in candidates {
        if out.pairs.len() == limit {
            break;
        }
        if out.pairs.contains_key(&agent) || used_tasks.contains(&task) {
            continue;
        }
        out.pairs.insert(agent, task);
        used_tasks.insert(task);
        out.total_cost += d;
    }
    out
}

/// Optimal rectangular assignment on a dense cost matrix (`rows <= cols`).
/// Returns the column chosen for each row. Shortest augmenting path
/// Hungarian method with row and column potentials.
pub fn hungarian(costs: &[Vec<f64>]) -> Vec<usize> {
    let n = costs.len();
    if n == 0 {
        return Vec::new();
    }
    let m = costs[0].len();
    assert!(n <= m, "hungarian needs rows <= cols");
    // 1-based with a virtual column 0
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0f64; m + 1];
    let mut used = vec![false; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let row = &costs[i0 - 1];
            for j in 1..=m {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![usize::MAX; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Pairwise agent-to-pickup distance matrix: one Dijkstra per agent that
/// stops once every pickup is settled. `None` marks unreachable pairs.
pub fn pickup_distances<C: EdgeCost + ?Sized>(
    agents: &[AgentSlot],
    tasks: &[TaskSlot],
    map: &GridMap,
    edge_cost: &C,
) -> Vec<Vec<Option<f64>>> {
    let pickups: Vec<CellId> = tasks.iter().map(|t| t.pickup).collect();
    agents
        .iter()
        .map(|a| {
            let d = shortest_distances(map, a.location, edge_cost, Some(&pickups));
            pickups.iter().map(|&p| d.get(p)).collect()
        })
        .collect()
}

/// Minimum-cost one-to-one assignment over a distance matrix. Unreachable
/// pairs are priced above any finite solution so the result is the cheapest
/// among maximum-cardinality matchings of reachable pairs.
pub fn assign_from_matrix(agents: &[AgentSlot], tasks: &[TaskSlot], dist: &[Vec<Option<f64>>]) -> AssignmentSet {
    let mut out = AssignmentSet::default();
    if agents.is_empty() || tasks.is_empty() {
        return out;
    }
    let max_finite = dist.iter().flatten().flatten().copied().fold(0.0, f64::max);
    let big = (max_finite + 1.0) * (agents.len().min(tasks.len()) as f64 + 1.0);
    let price = |i: usize, j: usize| dist[i][j].unwrap_or(big);

    let transpose = agents.len() > tasks.len();
    let (rows, cols) = if transpose { (tasks.len(), agents.len()) } else { (agents.len(), tasks.len()) };
    let matrix: Vec<Vec<f64>> =
        (0..rows).map(|r| (0..cols).map(|c| if transpose { price(c, r) } else { price(r, c) }).collect()).collect();
    for (r, c) in hungarian(&matrix).into_iter().enumerate() {
        let (i, j) = if transpose { (c, r) } else { (r, c) };
        if let Some(d) = dist[i][j] {
            out.pairs.insert(agents[i].id, tasks[j].id);
            out.total_cost += d;
        }
    }
    out
}

/// Two-stage baseline: shortest-path distances per agent, then an optimal
/// unbalanced bipartite assignment.
pub fn linear_assignment<C: EdgeCost + ?Sized>(
    agents: &[AgentSlot],
    tasks: &[TaskSlot],
    map: &GridMap,
    edge_cost: &C,
) -> AssignmentSet {
    if agents.is_empty() || tasks.is_empty() {
        return AssignmentSet::default();
    }
    let dist = pickup_distances(agents, tasks, map, edge_cost);
    assign_from_matrix(agents, tasks, &dist)
}

const NO_NODE: u32 = u32::MAX;

/// Flow network embedded in the map: one node per free cell plus a source
/// and a sink, with bookkeeping to read assignments back.
#[derive(Clone, Debug)]
pub struct FlowModel {
    net: FlowNetwork,
    node_of_cell: Vec<u32>,
    cell_of_node: Vec<CellId>,
    /// Interior out-edges per node as (edge index, head node), ordered by
    /// head cell index.
    out_edges: Vec<Vec<(usize, usize)>>,
    /// Sink edges per node as (edge index, task id), ordered by task id.
    sink_edges: Vec<Vec<(usize, TaskId)>>,
    /// Source edge per offered agent: (edge index, agent id, node).
    source_edges: Vec<(usize, AgentId, usize)>,
    num_interior: usize,
}

impl FlowModel {
    pub fn network(&self) -> &FlowNetwork {
        &self.net
    }

    pub fn node_of(&self, c: CellId) -> Option<usize> {
        self.node_of_cell.get(c.index()).filter(|&&n| n != NO_NODE).map(|&n| n as usize)
    }

    pub fn cell_of(&self, node: usize) -> Option<CellId> {
        self.cell_of_node.get(node).copied()
    }

    /// Number of edges that mirror traversable map edges.
    pub fn num_interior_edges(&self) -> usize {
        self.num_interior
    }

    pub fn num_source_edges(&self) -> usize {
        self.source_edges.len()
    }

    pub fn num_sink_edges(&self) -> usize {
        self.sink_edges.iter().map(Vec::len).sum()
    }

    pub fn source_edge_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.source_edges.iter().map(|s| s.0)
    }

    pub fn sink_edge_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.sink_edges.iter().flatten().map(|s| s.0)
    }
}

/// Builds the spatial flow network. Required flow is `min(agents, tasks)`;
/// [`flow_assign`] lowers it when the map is disconnected.
pub fn build_flow_network<C: EdgeCost + ?Sized>(
    map: &GridMap,
    agents: &[AgentSlot],
    tasks: &[TaskSlot],
    edge_cost: &C,
) -> Result<FlowModel, AssignmentError> {
    let mut node_of_cell = vec![NO_NODE; map.num_cells()];
    let mut cell_of_node = Vec::with_capacity(map.num_free());
    for c in map.free_cells() {
        node_of_cell[c.index()] = cell_of_node.len() as u32;
        cell_of_node.push(c);
    }
    let num_cells = cell_of_node.len();
    let (source, sink) = (num_cells, num_cells + 1);
    let mut net = FlowNetwork::new(num_cells + 2, source, sink)?;

    let mut out_edges = vec![Vec::new(); num_cells];
    for (v, &c) in cell_of_node.iter().enumerate() {
        for (_, to) in map.adjacent(c) {
            let w = edge_cost.cost(EdgeId::new(c, to));
            let head = node_of_cell[to.index()] as usize;
            let idx = net.add_edge(v, head, Capacity::Unbounded, w)?;
            out_edges[v].push((idx, head));
        }
        out_edges[v].sort_by_key(|&(_, head)| cell_of_node[head]);
    }
    let num_interior = net.edges().len();

    let mut sorted_agents = agents.to_vec();
    sorted_agents.sort_by_key(|a| a.id);
    let mut occupied: HashMap<CellId, AgentId> = HashMap::new();
    let mut source_edges = Vec::with_capacity(agents.len());
    for a in &sorted_agents {
        if !map.is_free(a.location) {
            return Err(AssignmentError::AgentNotOnFreeCell(a.id, a.location));
        }
        if let Some(&other) = occupied.get(&a.location) {
            return Err(AssignmentError::SharedStart(other, a.id, a.location));
        }
        occupied.insert(a.location, a.id);
        let node = node_of_cell[a.location.index()] as usize;
        let idx = net.add_edge(source, node, Capacity::Finite(1), 0.0)?;
        source_edges.push((idx, a.id, node));
    }

    let mut sorted_tasks = tasks.to_vec();
    sorted_tasks.sort_by_key(|t| t.id);
    let mut sink_edges = vec![Vec::new(); num_cells];
    for t in &sorted_tasks {
        if !map.is_free(t.pickup) {
            return Err(AssignmentError::TaskNotOnFreeCell(t.id, t.pickup));
        }
        let node = node_of_cell[t.pickup.index()] as usize;
        let idx = net.add_edge(node, sink, Capacity::Finite(1), 0.0)?;
        sink_edges[node].push((idx, t.id));
    }

    net.set_required(agents.len().min(tasks.len()) as u64);
    Ok(FlowModel { net, node_of_cell, cell_of_node, out_edges, sink_edges, source_edges, num_interior })
}

/// Walks the unit flow from each participating agent (ascending id) to the
/// first node with remaining flow into the sink, consuming one unit per
/// traversed edge. At every node the positive-flow edge toward the lowest
/// indexed cell is taken. Returns the assignments and the unconsumed flow.
pub fn decompose_flow(
    solution: &FlowSolution,
    model: &FlowModel,
) -> Result<(AssignmentSet, Vec<u64>), AssignmentError> {
    let mut residual = solution.flow.clone();
    let mut out = AssignmentSet::default();
    let edges = model.net.edges();
    let max_steps = model.cell_of_node.len();

    for &(src_edge, agent, start) in &model.source_edges {
        if residual[src_edge] == 0 {
            continue;
        }
        residual[src_edge] -= 1;
        let mut v = start;
        let mut path = Vec::new();
        let mut cost = 0.0;
        loop {
            path.push(model.cell_of_node[v]);
            if let Some(&(sink_edge, task)) = model.sink_edges[v].iter().find(|(e, _)| residual[*e] > 0) {
                residual[sink_edge] -= 1;
                out.pairs.insert(agent, task);
                out.guide_paths.insert(agent, GuidePath::new(path));
                out.total_cost += cost;
                break;
            }
            if path.len() > max_steps {
                return Err(AssignmentError::WalkTooLong(agent, max_steps));
            }
            let &(e, head) = model.out_edges[v]
                .iter()
                .find(|(e, _)| residual[*e] > 0)
                .ok_or(AssignmentError::WalkStuck(agent, model.cell_of_node[v]))?;
            residual[e] -= 1;
            cost += edges[e].cost;
            v = head;
        }
    }
    Ok((out, residual))
}

pub fn retrieve_assignments(solution: &FlowSolution, model: &FlowModel) -> Result<AssignmentSet, AssignmentError> {
    decompose_flow(solution, model).map(|(set, _)| set)
}

/// Full flow strategy: build, solve (lowering the required value to the
/// maximum feasible flow on disconnected maps) and retrieve.
pub fn flow_assign<C: EdgeCost + ?Sized>(
    map: &GridMap,
    agents: &[AgentSlot],
    tasks: &[TaskSlot],
    edge_cost: &C,
) -> Result<AssignmentSet, AssignmentError> {
    let mut model = build_flow_network(map, agents, tasks, edge_cost)?;
    let solution = match solve_min_cost_flow(&model.net) {
        Ok(s) => s,
        Err(FlowError::Infeasible { max_feasible, .. }) => {
            model.net.set_required(max_feasible);
            solve_min_cost_flow(&model.net)?
        }
        Err(e) => return Err(e.into()),
    };
    retrieve_assignments(&solution, &model)
}
