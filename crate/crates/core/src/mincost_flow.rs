//! Integral minimum-cost flow over sparse directed networks with real-valued
//! nonnegative costs, solved by a primal network simplex.

use std::collections::VecDeque;
use std::fmt::Write as _;

use thiserror::Error;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Capacity {
    Finite(u64),
    /// No explicit bound; the solver caps it at the required flow value.
    Unbounded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowEdge {
    pub from: NodeId,
    pub to: NodeId,
    pub capacity: Capacity,
    pub cost: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("node {node} out of range (network has {num_nodes} nodes)")]
    InvalidNode { node: NodeId, num_nodes: usize },
    #[error("edge {from}->{to} has invalid cost {cost}")]
    InvalidCost { from: NodeId, to: NodeId, cost: f64 },
    #[error("source and sink must differ")]
    SourceIsSink,
    #[error("required flow {required} exceeds maximum feasible flow {max_feasible}")]
    Infeasible { required: u64, max_feasible: u64 },
}

/// Directed network with a single source and sink and a required flow value.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowNetwork {
    num_nodes: usize,
    edges: Vec<FlowEdge>,
    source: NodeId,
    sink: NodeId,
    required: u64,
}

impl FlowNetwork {
    pub fn new(num_nodes: usize, source: NodeId, sink: NodeId) -> Result<Self, FlowError> {
        for node in [source, sink] {
            if node >= num_nodes {
                return Err(FlowError::InvalidNode { node, num_nodes });
            }
        }
        if source == sink {
            return Err(FlowError::SourceIsSink);
        }
        Ok(FlowNetwork { num_nodes, edges: Vec::new(), source, sink, required: 0 })
    }

    /// Adds an edge and returns its index.
    pub fn add_edge(&mut self, from: NodeId, to: NodeId, capacity: Capacity, cost: f64) -> Result<usize, FlowError> {
        for node in [from, to] {
            if node >= self.num_nodes {
                return Err(FlowError::InvalidNode { node, num_nodes: self.num_nodes });
            }
        }
        if !(cost.is_finite() && cost >= 0.0) {
            return Err(FlowError::InvalidCost { from, to, cost });
        }
        self.edges.push(FlowEdge { from, to, capacity, cost });
        Ok(self.edges.len() - 1)
    }

    pub fn set_required(&mut self, value: u64) {
        self.required = value;
    }

    pub fn required(&self) -> u64 {
        self.required
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[FlowEdge] {
        &self.edges
    }

    pub fn source(&self) -> NodeId {
        self.source
    }

    pub fn sink(&self) -> NodeId {
        self.sink
    }

    /// Capacity used by the cost solver: unbounded edges never need to carry
    /// more than the required value.
    pub fn effective_capacity(&self, edge: usize) -> u64 {
        match self.edges[edge].capacity {
            Capacity::Finite(c) => c,
            Capacity::Unbounded => self.required,
        }
    }

    /// DIMACS min-cost-flow dump (1-based node ids) for cross-checking
    /// against external solvers.
    pub fn to_dimacs(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "c mapd flow network");
        let _ = writeln!(out, "p min {} {}", self.num_nodes, self.edges.len());
        if self.required > 0 {
            let _ = writeln!(out, "n {} {}", self.source + 1, self.required);
            let _ = writeln!(out, "n {} -{}", self.sink + 1, self.required);
        }
        for (i, e) in self.edges.iter().enumerate() {
            let _ = writeln!(out, "a {} {} 0 {} {}", e.from + 1, e.to + 1, self.effective_capacity(i), e.cost);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSolution {
    pub flow: Vec<u64>,
    pub total_cost: f64,
    pub value: u64,
}

impl FlowSolution {
    /// Checks capacity bounds, conservation and the flow value. Returns a
    /// description of the first violation.
    pub fn check_feasible(&self, net: &FlowNetwork) -> Result<(), String> {
        if self.flow.len() != net.edges.len() {
            return Err(format!("flow has {} entries for {} edges", self.flow.len(), net.edges.len()));
        }
        let mut balance = vec![0i128; net.num_nodes];
        for (i, e) in net.edges.iter().enumerate() {
            let f = self.flow[i];
            if f > net.effective_capacity(i) {
                return Err(format!("edge {i} carries {f} over capacity {}", net.effective_capacity(i)));
            }
            balance[e.from] -= f as i128;
            balance[e.to] += f as i128;
        }
        for (v, &b) in balance.iter().enumerate() {
            let expected = if v == net.source {
                -(self.value as i128)
            } else if v == net.sink {
                self.value as i128
            } else {
                0
            };
            if b != expected {
                return Err(format!("node {v} has net inflow {b}, expected {expected}"));
            }
        }
        Ok(())
    }
}

const INF_CAP: u64 = u64::MAX / 4;

/// Maximum source-to-sink flow value (Dinic). Unbounded edges are treated as
/// infinite here.
pub fn max_flow_value(net: &FlowNetwork) -> u64 {
    let n = net.num_nodes;
    // residual arcs stored in pairs: 2i forward, 2i+1 backward
    let mut head = Vec::with_capacity(net.edges.len() * 2);
    let mut cap = Vec::with_capacity(net.edges.len() * 2);
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in &net.edges {
        let c = match e.capacity {
            Capacity::Finite(c) => c.min(INF_CAP),
            Capacity::Unbounded => INF_CAP,
        };
        adj[e.from].push(head.len());
        head.push(e.to);
        cap.push(c);
        adj[e.to].push(head.len());
        head.push(e.from);
        cap.push(0);
    }

    let (s, t) = (net.source, net.sink);
    let mut total: u64 = 0;
    let mut level = vec![usize::MAX; n];
    let mut iter = vec![0usize; n];
    loop {
        level.fill(usize::MAX);
        level[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            for &a in &adj[v] {
                if cap[a] > 0 && level[head[a]] == usize::MAX {
                    level[head[a]] = level[v] + 1;
                    queue.push_back(head[a]);
                }
            }
        }
        if level[t] == usize::MAX {
            return total;
        }
        iter.fill(0);
        loop {
            let pushed = augment(s, t, INF_CAP, &adj, &head, &mut cap, &level, &mut iter);
            if pushed == 0 {
                break;
            }
            total = total.saturating_add(pushed);
            if total >= INF_CAP {
                return INF_CAP;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn augment(
    v: usize,
    t: usize,
    limit: u64,
    adj: &[Vec<usize>],
    head: &[usize],
    cap: &mut [u64],
    level: &[usize],
    iter: &mut [usize],
) -> u64 {
    if v == t {
        return limit;
    }
    while iter[v] < adj[v].len() {
        let a = adj[v][iter[v]];
        let u = head[a];
        if cap[a] > 0 && level[u] == level[v] + 1 {
            let d = augment(u, t, limit.min(cap[a]), adj, head, cap, level, iter);
            if d > 0 {
                cap[a] -= d;
                cap[a ^ 1] += d;
                return d;
            }
        }
        iter[v] += 1;
    }
    0
}

/// Minimum-cost flow of exactly `net.required()` units.
pub fn solve_min_cost_flow(net: &FlowNetwork) -> Result<FlowSolution, FlowError> {
    let m = net.edges.len();
    if net.required == 0 {
        return Ok(FlowSolution { flow: vec![0; m], total_cost: 0.0, value: 0 });
    }
    let mut simplex = NetworkSimplex::new(net);
    simplex.run();
    if !simplex.artificial_flow_is_zero() {
        return Err(FlowError::Infeasible { required: net.required, max_feasible: max_flow_value(net) });
    }
    let flow = simplex.flow[..m].to_vec();
    let total_cost = flow.iter().zip(&net.edges).map(|(&f, e)| f as f64 * e.cost).sum();
    Ok(FlowSolution { flow, total_cost, value: net.required })
}

const STATE_UPPER: i8 = -1;
const STATE_TREE: i8 = 0;
const STATE_LOWER: i8 = 1;

/// Primal network simplex on a spanning tree rooted at an artificial node.
/// Every real node starts attached to the root through a big-M artificial
/// arc. Leaving arcs are chosen with the strongly feasible tie rule, which
/// rules out cycling.
struct NetworkSimplex {
    num_real_arcs: usize,
    root: usize,
    tail: Vec<usize>,
    head: Vec<usize>,
    cap: Vec<u64>,
    cost: Vec<f64>,
    flow: Vec<u64>,
    state: Vec<i8>,

    parent: Vec<usize>,
    pred: Vec<usize>,
    // pred arc oriented node -> parent
    pred_up: Vec<bool>,
    depth: Vec<usize>,
    children: Vec<Vec<usize>>,
    child_pos: Vec<usize>,
    pi: Vec<f64>,

    eps: f64,
    block_size: usize,
    next_arc: usize,
}

impl NetworkSimplex {
    fn new(net: &FlowNetwork) -> Self {
        let n = net.num_nodes;
        let m = net.edges.len();
        let root = n;
        let max_cost = net.edges.iter().map(|e| e.cost).fold(0.0, f64::max);
        let art_cost = (max_cost + 1.0) * (n as f64 + 1.0);

        let mut tail = Vec::with_capacity(m + n);
        let mut head = Vec::with_capacity(m + n);
        let mut cap = Vec::with_capacity(m + n);
        let mut cost = Vec::with_capacity(m + n);
        for (i, e) in net.edges.iter().enumerate() {
            tail.push(e.from);
            head.push(e.to);
            cap.push(net.effective_capacity(i));
            cost.push(e.cost);
        }
        let mut flow = vec![0; m];
        let mut state = vec![STATE_LOWER; m];

        let mut parent = vec![root; n + 1];
        let mut pred = vec![usize::MAX; n + 1];
        let mut pred_up = vec![false; n + 1];
        let mut depth = vec![1; n + 1];
        let mut pi = vec![0.0; n + 1];
        let mut children = vec![Vec::new(); n + 1];
        let mut child_pos = vec![0; n + 1];
        depth[root] = 0;
        parent[root] = usize::MAX;

        for v in 0..n {
            let supply: i128 = if v == net.source {
                net.required as i128
            } else if v == net.sink {
                -(net.required as i128)
            } else {
                0
            };
            let arc = tail.len();
            if supply >= 0 {
                tail.push(v);
                head.push(root);
                pred_up[v] = true;
                pi[v] = -art_cost;
            } else {
                tail.push(root);
                head.push(v);
                pred_up[v] = false;
                pi[v] = art_cost;
            }
            cap.push(INF_CAP);
            cost.push(art_cost);
            flow.push(supply.unsigned_abs() as u64);
            state.push(STATE_TREE);
            pred[v] = arc;
            child_pos[v] = children[root].len();
            children[root].push(v);
        }

        let total_arcs = tail.len();
        let block_size = ((total_arcs as f64).sqrt().ceil() as usize).max(10);
        NetworkSimplex {
            num_real_arcs: m,
            root,
            tail,
            head,
            cap,
            cost,
            flow,
            state,
            parent,
            pred,
            pred_up,
            depth,
            children,
            child_pos,
            pi,
            eps: 1e-9 * (1.0 + max_cost),
            block_size,
            next_arc: 0,
        }
    }

    fn reduced_cost(&self, a: usize) -> f64 {
        self.cost[a] + self.pi[self.tail[a]] - self.pi[self.head[a]]
    }

    /// Block-search pricing: scans arcs cyclically in blocks and returns the
    /// most violating arc of the first block that contains a violation.
    fn find_entering_arc(&mut self) -> Option<usize> {
        let total = self.tail.len();
        let mut best = None;
        let mut best_violation = -self.eps;
        let mut scanned_in_block = 0;
        let mut a = self.next_arc;
        for _ in 0..total {
            if self.state[a] != STATE_TREE && self.cap[a] > 0 {
                let violation = self.state[a] as f64 * self.reduced_cost(a);
                if violation < best_violation {
                    best_violation = violation;
                    best = Some(a);
                }
            }
            a += 1;
            if a == total {
                a = 0;
            }
            scanned_in_block += 1;
            if scanned_in_block == self.block_size {
                if best.is_some() {
                    break;
                }
                scanned_in_block = 0;
            }
        }
        self.next_arc = a;
        best
    }

    fn find_join(&self, mut u: usize, mut v: usize) -> usize {
        while u != v {
            if self.depth[u] >= self.depth[v] {
                u = self.parent[u];
            } else {
                v = self.parent[v];
            }
        }
        u
    }

    fn run(&mut self) {
        loop {
            while let Some(entering) = self.find_entering_arc() {
                self.pivot(entering);
            }
            // Potentials drift slightly through repeated shifts; recompute
            // them exactly from the tree and confirm optimality.
            self.recompute_potentials();
            match self.find_entering_arc() {
                Some(entering) => self.pivot(entering),
                None => return,
            }
        }
    }

    fn pivot(&mut self, entering: usize) {
        let (first, second) = if self.state[entering] == STATE_LOWER {
            (self.tail[entering], self.head[entering])
        } else {
            (self.head[entering], self.tail[entering])
        };
        let join = self.find_join(first, second);

        // Flow travels join -> first, across the entering arc, then
        // second -> join.
        let mut delta = self.cap[entering];
        let mut leaving_node = usize::MAX;
        let mut side = 0u8;
        let mut u = first;
        while u != join {
            let e = self.pred[u];
            let d = if self.pred_up[u] { self.flow[e] } else { self.cap[e] - self.flow[e] };
            if d < delta {
                delta = d;
                leaving_node = u;
                side = 1;
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != join {
            let e = self.pred[u];
            let d = if self.pred_up[u] { self.cap[e] - self.flow[e] } else { self.flow[e] };
            if d <= delta {
                delta = d;
                leaving_node = u;
                side = 2;
            }
            u = self.parent[u];
        }

        if delta > 0 {
            if self.state[entering] == STATE_LOWER {
                self.flow[entering] += delta;
            } else {
                self.flow[entering] -= delta;
            }
            let mut u = first;
            while u != join {
                let e = self.pred[u];
                if self.pred_up[u] {
                    self.flow[e] -= delta;
                } else {
                    self.flow[e] += delta;
                }
                u = self.parent[u];
            }
            let mut u = second;
            while u != join {
                let e = self.pred[u];
                if self.pred_up[u] {
                    self.flow[e] += delta;
                } else {
                    self.flow[e] -= delta;
                }
                u = self.parent[u];
            }
        }

        if side == 0 {
            // entering arc is its own bottleneck: it just switches bound
            self.state[entering] = -self.state[entering];
            return;
        }

        let leaving = self.pred[leaving_node];
        self.state[leaving] = if self.flow[leaving] == 0 { STATE_LOWER } else { STATE_UPPER };
        self.state[entering] = STATE_TREE;
        let (u_in, v_in) = if side == 1 { (first, second) } else { (second, first) };
        self.reattach(u_in, v_in, leaving_node, entering);
    }

    /// Detaches the subtree below `leaving_node`, re-roots it at `u_in` and
    /// hangs it from `v_in` through the entering arc.
    fn reattach(&mut self, u_in: usize, v_in: usize, leaving_node: usize, entering: usize) {
        let mut path = vec![u_in];
        let mut x = u_in;
        while x != leaving_node {
            x = self.parent[x];
            path.push(x);
        }
        let old_preds: Vec<usize> = path.iter().map(|&x| self.pred[x]).collect();

        self.remove_child(self.parent[leaving_node], leaving_node);
        for i in 1..path.len() {
            self.remove_child(path[i], path[i - 1]);
        }

        self.set_parent(path[0], v_in, entering);
        for i in 1..path.len() {
            self.set_parent(path[i], path[i - 1], old_preds[i - 1]);
        }

        let new_pi = if self.tail[entering] == u_in {
            self.pi[v_in] - self.cost[entering]
        } else {
            self.pi[v_in] + self.cost[entering]
        };
        let sigma = new_pi - self.pi[u_in];
        let mut stack = vec![u_in];
        while let Some(v) = stack.pop() {
            self.pi[v] += sigma;
            self.depth[v] = self.depth[self.parent[v]] + 1;
            stack.extend_from_slice(&self.children[v]);
        }
    }

    fn remove_child(&mut self, p: usize, c: usize) {
        let pos = self.child_pos[c];
        let list = &mut self.children[p];
        debug_assert_eq!(list[pos], c);
        list.swap_remove(pos);
        if pos < list.len() {
            let moved = list[pos];
            self.child_pos[moved] = pos;
        }
    }

    fn set_parent(&mut self, c: usize, p: usize, arc: usize) {
        self.parent[c] = p;
        self.pred[c] = arc;
        self.pred_up[c] = self.tail[arc] == c;
        self.child_pos[c] = self.children[p].len();
        self.children[p].push(c);
    }

    fn recompute_potentials(&mut self) {
        self.pi[self.root] = 0.0;
        let mut stack: Vec<usize> = self.children[self.root].clone();
        while let Some(v) = stack.pop() {
            let a = self.pred[v];
            let p = self.parent[v];
            self.pi[v] = if self.pred_up[v] { self.pi[p] - self.cost[a] } else { self.pi[p] + self.cost[a] };
            stack.extend_from_slice(&self.children[v]);
        }
    }

    fn artificial_flow_is_zero(&self) -> bool {
        self.flow[self.num_real_arcs..].iter().all(|&f| f == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diamond() -> FlowNetwork {
        // 0 source, 1 A, 2 B, 3 C, 4 sink
        let mut net = FlowNetwork::new(5, 0, 4).unwrap();
        net.add_edge(0, 1, Capacity::Finite(1), 0.0).unwrap();
        net.add_edge(1, 2, Capacity::Unbounded, 1.0).unwrap();
        net.add_edge(1, 3, Capacity::Unbounded, 3.0).unwrap();
        net.add_edge(2, 4, Capacity::Finite(1), 0.0).unwrap();
        net.add_edge(3, 4, Capacity::Finite(1), 0.0).unwrap();
        net
    }

    #[test]
    fn max_flow_simple_chain() {
        let mut net = FlowNetwork::new(3, 0, 2).unwrap();
        net.add_edge(0, 1, Capacity::Finite(1), 0.0).unwrap();
        net.add_edge(1, 2, Capacity::Finite(1), 0.0).unwrap();
        assert_eq!(max_flow_value(&net), 1);
    }

    #[test]
    fn max_flow_isolated_source() {
        let mut net = FlowNetwork::new(3, 0, 2).unwrap();
        net.add_edge(1, 2, Capacity::Finite(5), 0.0).unwrap();
        assert_eq!(max_flow_value(&net), 0);
    }

    #[test]
    fn max_flow_two_agents_one_task() {
        // source 0, agents at 1 and 2, cell 3 holds the only task, sink 4
        let mut net = FlowNetwork::new(5, 0, 4).unwrap();
        net.add_edge(0, 1, Capacity::Finite(1), 0.0).unwrap();
        net.add_edge(0, 2, Capacity::Finite(1), 0.0).unwrap();
        net.add_edge(1, 3, Capacity::Unbounded, 1.0).unwrap();
        net.add_edge(2, 3, Capacity::Unbounded, 1.0).unwrap();
        net.add_edge(3, 4, Capacity::Finite(1), 0.0).unwrap();
        assert_eq!(max_flow_value(&net), 1);
    }

    #[test]
    fn diamond_routes_through_cheaper_branch() {
        let mut net = diamond();
        net.set_required(1);
        let sol = solve_min_cost_flow(&net).unwrap();
        assert_eq!(sol.flow, vec![1, 1, 0, 1, 0]);
        assert_eq!(sol.total_cost, 1.0);
        sol.check_feasible(&net).unwrap();
    }

    #[test]
    fn zero_requirement_is_noop() {
        let net = diamond();
        let sol = solve_min_cost_flow(&net).unwrap();
        assert_eq!(sol.flow, vec![0; 5]);
        assert_eq!(sol.total_cost, 0.0);
        assert_eq!(sol.value, 0);
    }

    #[test]
    fn infeasible_reports_max_flow() {
        let mut net = diamond();
        net.set_required(2);
        assert_eq!(solve_min_cost_flow(&net), Err(FlowError::Infeasible { required: 2, max_feasible: 1 }));
    }

    #[test]
    fn rejects_bad_networks() {
        assert_eq!(FlowNetwork::new(2, 0, 0), Err(FlowError::SourceIsSink));
        assert_eq!(FlowNetwork::new(2, 0, 2), Err(FlowError::InvalidNode { node: 2, num_nodes: 2 }));
        let mut net = FlowNetwork::new(2, 0, 1).unwrap();
        assert!(matches!(net.add_edge(0, 1, Capacity::Finite(1), -1.0), Err(FlowError::InvalidCost { .. })));
        assert!(matches!(net.add_edge(0, 1, Capacity::Finite(1), f64::NAN), Err(FlowError::InvalidCost { .. })));
        assert!(matches!(net.add_edge(0, 5, Capacity::Finite(1), 1.0), Err(FlowError::InvalidNode { .. })));
    }

    #[test]
    fn parallel_paths_split_by_cost() {
        // two units must go; cheapest path has capacity 1
        let mut net = FlowNetwork::new(4, 0, 3).unwrap();
        net.add_edge(0, 1, Capacity::Finite(2), 0.0).unwrap();
        net.add_edge(1, 3, Capacity::Finite(1), 1.5).unwrap();
        net.add_edge(1, 2, Capacity::Finite(2), 0.25).unwrap();
        net.add_edge(2, 3, Capacity::Finite(2), 2.0).unwrap();
        net.set_required(2);
        let sol = solve_min_cost_flow(&net).unwrap();
        assert_eq!(sol.flow, vec![2, 1, 1, 1]);
        assert!((sol.total_cost - 3.75).abs() < 1e-12);
    }

    #[test]
    fn deterministic_across_runs() {
        let mut net = FlowNetwork::new(6, 0, 5).unwrap();
        for (a, b, c) in
            [(0, 1, 0.0), (0, 2, 0.0), (1, 3, 1.0), (2, 3, 1.0), (1, 4, 1.0), (2, 4, 1.0), (3, 5, 0.0), (4, 5, 0.0)]
        {
            net.add_edge(a, b, Capacity::Finite(1), c).unwrap();
        }
        net.set_required(2);
        let a = solve_min_cost_flow(&net).unwrap();
        let b = solve_min_cost_flow(&net).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimacs_dump_lists_every_arc() {
        let mut net = diamond();
        net.set_required(1);
        let dump = net.to_dimacs();
        assert!(dump.contains("p min 5 5"));
        assert!(dump.contains("n 1 1"));
        assert!(dump.contains("n 5 -1"));
        assert!(dump.contains("a 2 3 0 1 1"));
        assert_eq!(dump.lines().filter(|l| l.starts_with("a ")).count(), 5);
    }
}
