//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use mapd_core::grid_map::{CellId, GridMap};
use mapd_core::mincost_flow::{Capacity, FlowNetwork, FlowSolution};
use rand::Rng;
use std::collections::HashMap;

/// Random network with at most `max_nodes` nodes and `max_edges` edges.
/// Source is node 0 and sink the last node.
pub fn random_network<R: Rng>(rng: &mut R, max_nodes: usize, max_edges: usize, integer_costs: bool) -> FlowNetwork {
    let n = rng.gen_range(2..=max_nodes);
    let mut net = FlowNetwork::new(n, 0, n - 1).unwrap();
    let m = rng.gen_range(1..=max_edges);
    for _ in 0..m {
        let from = rng.gen_range(0..n);
        let mut to = rng.gen_range(0..n - 1);
        if to >= from {
            to += 1;
        }
        let cap = if rng.gen_bool(0.1) { Capacity::Unbounded } else { Capacity::Finite(rng.gen_range(0..=3)) };
        let cost = if integer_costs { rng.gen_range(0..=9) as f64 } else { rng.gen_range(0.0..10.0) };
        net.add_edge(from, to, cap, cost).unwrap();
    }
    net
}

/// Exhaustive search over integral edge flows meeting the required value.
/// Returns the minimum total cost, or `None` if no feasible flow exists.
pub fn brute_force_min_cost(net: &FlowNetwork) -> Option<f64> {
    let m = net.edges().len();
    let n = net.num_nodes();
    let mut last_incident = vec![usize::MAX; n];
    for (i, e) in net.edges().iter().enumerate() {
        last_incident[e.from] = i;
        last_incident[e.to] = i;
    }
    let target: Vec<i64> = (0..n)
        .map(|v| {
            if v == net.source() {
                -(net.required() as i64)
            } else if v == net.sink() {
                net.required() as i64
            } else {
                0
            }
        })
        .collect();
    // nodes with no incident edges must already balance
    for v in 0..n {
        if last_incident[v] == usize::MAX && target[v] != 0 {
            return None;
        }
    }
    let caps: Vec<u64> = (0..m).map(|i| net.effective_capacity(i)).collect();
    let mut balance = vec![0i64; n];
    let mut best: Option<f64> = None;
    search(net, &caps, &last_incident, &target, 0, 0.0, &mut balance, &mut best);
    best
}

#[allow(clippy::too_many_arguments)]
fn search(
    net: &FlowNetwork,
    caps: &[u64],
    last: &[usize],
    target: &[i64],
    i: usize,
    cost: f64,
    balance: &mut [i64],
    best: &mut Option<f64>,
) {
    if let Some(b) = *best {
        if cost >= b {
            return;
        }
    }
    if i == caps.len() {
        *best = Some(cost);
        return;
    }
    let e = &net.edges()[i];
    for f in 0..=caps[i] as i64 {
        balance[e.from] -= f;
        balance[e.to] += f;
        let closed_ok = [e.from, e.to].iter().all(|&v| last[v] != i || balance[v] == target[v]);
        if closed_ok {
            search(net, caps, last, target, i + 1, cost + f as f64 * e.cost, balance, best);
        }
        balance[e.from] += f;
        balance[e.to] -= f;
    }
}

/// True when the residual network of `sol` has no negative-cost cycle
/// (Bellman-Ford from a virtual root attached to every node).
pub fn no_negative_residual_cycle(net: &FlowNetwork, sol: &FlowSolution) -> bool {
    let n = net.num_nodes();
    let mut residual = Vec::new();
    for (i, e) in net.edges().iter().enumerate() {
        if sol.flow[i] < net.effective_capacity(i) {
            residual.push((e.from, e.to, e.cost));
        }
        if sol.flow[i] > 0 {
            residual.push((e.to, e.from, -e.cost));
        }
    }
    let tol = 1e-9;
    let mut dist = vec![0.0f64; n];
    for _ in 0..n {
        let mut changed = false;
        for &(u, v, c) in &residual {
            if dist[u] + c < dist[v] - tol {
                dist[v] = dist[u] + c;
                changed = true;
            }
        }
        if !changed {
            return true;
        }
    }
    false
}

/// Dense single-source Dijkstra over the 4-connected free cells of `map`,
/// written against coordinates only. `cost(from, to)` prices one move.
pub fn grid_dijkstra(map: &GridMap, source: CellId, cost: &dyn Fn(CellId, CellId) -> f64) -> Vec<f64> {
    let (w, h) = (map.width(), map.height());
    let mut dist = vec![f64::INFINITY; w * h];
    let mut done = vec![false; w * h];
    dist[source.index()] = 0.0;
    loop {
        let mut u = None;
        for i in 0..w * h {
            if !done[i] && dist[i].is_finite() && u.is_none_or(|j: usize| dist[i] < dist[j]) {
                u = Some(i);
            }
        }
        let Some(u) = u else { break };
        done[u] = true;
        let (x, y) = (u % w, u / w);
        let mut near = Vec::new();
        if y > 0 {
            near.push(u - w);
        }
        if x + 1 < w {
            near.push(u + 1);
        }
        if y + 1 < h {
            near.push(u + w);
        }
        if x > 0 {
            near.push(u - 1);
        }
        for v in near {
            if map.is_free(CellId(v as u32)) {
                let d = dist[u] + cost(CellId(u as u32), CellId(v as u32));
                if d < dist[v] {
                    dist[v] = d;
                }
            }
        }
    }
    dist
}

/// Minimum total over all injective matchings of size `min(rows, cols)`,
/// by exhaustive enumeration.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let transposed: Vec<Vec<f64>>;
    let m = if rows <= cols {
        cost
    } else {
        transposed = (0..cols).map(|c| (0..rows).map(|r| cost[r][c]).collect()).collect();
        &transposed
    };
    fn go(m: &[Vec<f64>], r: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if r == m.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                go(m, r + 1, used, acc + m[r][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(m, 0, &mut vec![false; m[0].len()], 0.0, &mut best);
    best
}

/// Vertex and swap conflicts between two consecutive location vectors, plus
/// moves that are not unit steps between free cells.
pub fn movement_violations(map: &GridMap, before: &[CellId], after: &[CellId]) -> Vec<String> {
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (i, &c) in after.iter().enumerate() {
        if let Some(j) = seen.insert(c, i) {
            out.push(format!("agents {j} and {i} share cell {c:?}"));
        }
        if !map.is_free(c) || (before[i] != c && map.manhattan(before[i], c) != 1) {
            out.push(format!("agent {i} jumps {:?} -> {c:?}", before[i]));
        }
    }
    let start: HashMap<CellId, usize> = before.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    for (i, &c) in after.iter().enumerate() {
        if let Some(&j) = start.get(&c) {
            if j != i && after[j] == before[i] {
                out.push(format!("agents {i} and {j} swap"));
            }
        }
    }
    out
}
