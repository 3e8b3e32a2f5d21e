//! Per-edge cost models: unit cost, planner-side traffic estimates and
//! decayed average waiting time observed during execution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid_map::{CellId, Direction, EdgeCost, EdgeId, GridMap};

/// Default decay for the waiting-time statistics.
pub const DEFAULT_GAMMA: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("negative wait time {wait} on edge {from}->{to}")]
    NegativeWait { from: CellId, to: CellId, wait: f64 },
    #[error("decay factor {0} outside (0, 1]")]
    InvalidGamma(f64),
    #[error("edge {from}->{to} does not join adjacent cells")]
    NotAnEdge { from: CellId, to: CellId },
}

/// Dense slot of a directed edge between adjacent cells of a grid with the
/// given width.
fn slot(width: usize, e: EdgeId) -> Option<usize> {
    let (from, to) = (e.from.index(), e.to.index());
    let d = if to + width == from {
        Direction::North
    } else if to == from + 1 && to % width != 0 {
        Direction::East
    } else if to == from + width {
        Direction::South
    } else if to + 1 == from && from % width != 0 {
        Direction::West
    } else {
        return None;
    };
    Some(from * 4 + d as usize)
}

pub fn unit_cost(_e: EdgeId) -> f64 {
    1.0
}

/// Planned-traffic statistics from the guide paths of delivering agents:
/// entries per vertex and planned traversals per directed edge.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficState {
    width: usize,
    entering: Vec<u32>,
    planned: Vec<u32>,
}

impl TrafficState {
    pub fn new(map: &GridMap) -> Self {
        TrafficState { width: map.width(), entering: vec![0; map.num_cells()], planned: vec![0; map.num_edge_slots()] }
    }

    /// Counts every step of every path: the entered vertex and the directed
    /// edge used. A path's first cell is not an entry.
    pub fn from_guide_paths<'p, I>(map: &GridMap, paths: I) -> Self
    where
        I: IntoIterator<Item = &'p [CellId]>,
    {
        let mut ts = Self::new(map);
        for path in paths {
            for w in path.windows(2) {
                if let Some(s) = slot(ts.width, EdgeId::new(w[0], w[1])) {
                    ts.planned[s] += 1;
                    ts.entering[w[1].index()] += 1;
                }
            }
        }
        ts
    }

    pub fn entering(&self, v: CellId) -> u32 {
        self.entering.get(v.index()).copied().unwrap_or(0)
    }

    pub fn planned(&self, e: EdgeId) -> u32 {
        slot(self.width, e).map_or(0, |s| self.planned[s])
    }

    pub fn set_entering(&mut self, v: CellId, count: u32) {
        self.entering[v.index()] = count;
    }

    pub fn set_planned(&mut self, e: EdgeId, count: u32) -> Result<(), CostError> {
        let s = slot(self.width, e).ok_or(CostError::NotAnEdge { from: e.from, to: e.to })?;
        self.planned[s] = count;
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entering.iter().all(|&c| c == 0) && self.planned.iter().all(|&c| c == 0)
    }
}

/// Expected future delay for entering `v`: `ceil((n_v - 1) / 2)`, zero when
/// nobody enters.
pub fn vertex_congestion(v: CellId, ts: &TrafficState) -> f64 {
    let n = ts.entering(v);
    (n.saturating_sub(1)).div_ceil(2) as f64
}

/// Product of the planned traversal counts in both directions of `e`.
pub fn contraflow(e: EdgeId, ts: &TrafficState) -> f64 {
    ts.planned(e) as f64 * ts.planned(e.reversed()) as f64
}

pub fn fcost(e: EdgeId, ts: &TrafficState) -> f64 {
    1.0 + vertex_congestion(e.to, ts) + contraflow(e, ts)
}

/// Exponentially decayed waiting time and traversal count per directed edge.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWaitStats {
    width: usize,
    wait: Vec<f64>,
    count: Vec<f64>,
    gamma: f64,
}

impl EdgeWaitStats {
    pub fn new(map: &GridMap, gamma: f64) -> Result<Self, CostError> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(CostError::InvalidGamma(gamma));
        }
        let slots = map.num_edge_slots();
        Ok(EdgeWaitStats { width: map.width(), wait: vec![0.0; slots], count: vec![0.0; slots], gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `(W_e, N_e)` for an edge; zero for non-edges.
    pub fn get(&self, e: EdgeId) -> (f64, f64) {
        slot(self.width, e).map_or((0.0, 0.0), |s| (self.wait[s], self.count[s]))
    }

    pub fn set(&mut self, e: EdgeId, wait: f64, count: f64) -> Result<(), CostError> {
        let s = slot(self.width, e).ok_or(CostError::NotAnEdge { from: e.from, to: e.to })?;
        self.wait[s] = wait;
        self.count[s] = count;
        Ok(())
    }

    /// One decay window: `W <- gamma W + sum(t)`, `N <- gamma N + #events`
    /// on every edge. Events on the same edge are aggregated first, so the
    /// result does not depend on event order.
    pub fn update(&mut self, events: &[(EdgeId, f64)]) -> Result<(), CostError> {
        let mut added: Vec<(usize, f64, f64)> = Vec::with_capacity(events.len());
        for &(e, t) in events {
            if t.is_nan() || t < 0.0 {
                return Err(CostError::NegativeWait { from: e.from, to: e.to, wait: t });
            }
            let s = slot(self.width, e).ok_or(CostError::NotAnEdge { from: e.from, to: e.to })?;
            added.push((s, t, 1.0));
        }
        added.sort_by_key(|a| a.0);
        added.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                a.2 += b.2;
                true
            } else {
                false
            }
        });

        if self.gamma != 1.0 {
            for w in &mut self.wait {
                *w *= self.gamma;
            }
            for n in &mut self.count {
                *n *= self.gamma;
            }
        }
        for (s, t, k) in added {
            self.wait[s] += t;
            self.count[s] += k;
        }
        Ok(())
    }
}

/// Historical average traversal time: `1 + W_e / N_e`, or 1 without data.
pub fn pcost(e: EdgeId, stats: &EdgeWaitStats) -> f64 {
    let (w, n) = stats.get(e);
    if n > 0.0 {
        1.0 + w / n
    } else {
        1.0
    }
}

/// Cost model selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostModelKind {
    Unit,
    Traffic,
    AvgWait,
}

impl CostModelKind {
    pub fn name(self) -> &'static str {
        match self {
            CostModelKind::Unit => "unit",
            CostModelKind::Traffic => "traffic",
            CostModelKind::AvgWait => "avg-wait",
        }
    }
}

impl std::str::FromStr for CostModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unit" => Ok(CostModelKind::Unit),
            "traffic" => Ok(CostModelKind::Traffic),
            "avg-wait" => Ok(CostModelKind::AvgWait),
            other => Err(format!("unknown cost model {other:?} (expected unit, traffic or avg-wait)")),
        }
    }
}

/// A cost model bound to the statistics it reads.
#[derive(Clone, Copy, Debug)]
pub enum CostModel<'a> {
    Unit,
    Traffic(&'a TrafficState),
    AvgWait(&'a EdgeWaitStats),
}

impl EdgeCost for CostModel<'_> {
    fn cost(&self, e: EdgeId) -> f64 {
        match self {
            CostModel::Unit => unit_cost(e),
            CostModel::Traffic(ts) => fcost(e, ts),
            CostModel::AvgWait(stats) => pcost(e, stats),
        }
    }
}
