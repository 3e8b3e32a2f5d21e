//! One-step collision-free execution with PIBT (priority inheritance with
//! backtracking), steering each agent by a heuristic derived from its guide
//! path.

use serde::{Deserialize, Serialize};

use crate::assignment::{AgentId, GuidePath};
use crate::grid_map::{CellId, Direction, GridMap};

const UNREACHABLE: u32 = u32::MAX;

/// Distance-to-goal table anchored on a guide path. Cells on the path hold
/// their remaining path length; every other cell holds its unit-cost
/// distance to the nearest path cell plus that cell's value, so an agent
/// pushed off its path heads back to the closest point of it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuideHeuristic {
    values: Vec<u32>,
    goal: CellId,
}

impl GuideHeuristic {
    pub fn value(&self, c: CellId) -> Option<u32> {
        match self.values.get(c.index()) {
            Some(&v) if v != UNREACHABLE => Some(v),
            _ => None,
        }
    }

    pub fn goal(&self) -> CellId {
        self.goal
    }

    #[inline]
    fn raw(&self, c: CellId) -> u32 {
        self.values[c.index()]
    }
}

pub fn build_guide_heuristic(map: &GridMap, path: &GuidePath) -> GuideHeuristic {
    let cells = path.cells();
    let n = map.num_cells();
    let mut anchor = vec![UNREACHABLE; n];
    let mut detour = vec![UNREACHABLE; n];
    let last = cells.len() - 1;
    for (i, c) in cells.iter().enumerate() {
        let remaining = (last - i) as u32;
        anchor[c.index()] = anchor[c.index()].min(remaining);
        detour[c.index()] = 0;
    }

    // multi-source BFS outward from the path; among equally near path cells
    // the one closest to the goal wins
    let mut frontier: Vec<CellId> = cells.to_vec();
    frontier.sort_unstable();
    frontier.dedup();
    let mut level = 0;
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &v in &frontier {
            for (_, u) in map.adjacent(v) {
                let ui = u.index();
                if detour[ui] == UNREACHABLE {
                    detour[ui] = level + 1;
                    anchor[ui] = anchor[v.index()];
                    next.push(u);
                } else if detour[ui] == level + 1 {
                    anchor[ui] = anchor[ui].min(anchor[v.index()]);
                }
            }
        }
        frontier = next;
        level += 1;
    }

    let values =
        detour.iter().zip(&anchor).map(|(&d, &a)| if d == UNREACHABLE { UNREACHABLE } else { d + a }).collect();
    GuideHeuristic { values, goal: path.goal() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Wait,
    Move(#[serde(with = "direction_serde")] Direction),
}

mod direction_serde {
    use super::Direction;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Direction, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match d {
            Direction::North => "N",
            Direction::East => "E",
            Direction::South => "S",
            Direction::West => "W",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Direction, D::Error> {
        match String::deserialize(d)?.as_str() {
            "N" => Ok(Direction::North),
            "E" => Ok(Direction::East),
            "S" => Ok(Direction::South),
            "W" => Ok(Direction::West),
            other => Err(serde::de::Error::custom(format!("bad direction {other:?}"))),
        }
    }
}

/// One synchronous step for all agents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionStep {
    pub actions: Vec<Action>,
    pub next: Vec<CellId>,
}

/// Agent as seen by the planner. Agents without a heuristic are idle.
#[derive(Clone, Copy, Debug)]
pub struct PlannerAgent<'h> {
    pub id: AgentId,
    pub location: CellId,
    pub heuristic: Option<&'h GuideHeuristic>,
}

/// Checks the MAPD movement rules between two consecutive configurations:
/// moves go to adjacent free cells, no two agents share a cell, and no two
/// agents swap cells.
pub fn check_step(map: &GridMap, from: &[CellId], to: &[CellId]) -> Result<(), String> {
    if from.len() != to.len() {
        return Err(format!("{} agents before the step, {} after", from.len(), to.len()));
    }
    let mut owner = vec![u32::MAX; map.num_cells()];
    for (i, (&a, &b)) in from.iter().zip(to).enumerate() {
        if a != b && map.direction(a, b).is_none() {
            return Err(format!("agent #{i} jumps from {a} to {b}"));
        }
        if !map.is_free(b) {
            return Err(format!("agent #{i} enters blocked cell {b}"));
        }
        if owner[b.index()] != u32::MAX {
            return Err(format!("agents #{} and #{i} collide at {b}", owner[b.index()]));
        }
        owner[b.index()] = i as u32;
    }
    let mut before = vec![u32::MAX; map.num_cells()];
    for (i, &a) in from.iter().enumerate() {
        before[a.index()] = i as u32;
    }
    for (i, (&a, &b)) in from.iter().zip(to).enumerate() {
        if a == b {
            continue;
        }
        let j = before[b.index()];
        if j != u32::MAX && to[j as usize] == a {
            return Err(format!("agents #{i} and #{j} swap across {a}-{b}"));
        }
    }
    Ok(())
}

const NOBODY: u32 = u32::MAX;

struct Pibt<'a, 'h> {
    map: &'a GridMap,
    agents: &'a [PlannerAgent<'h>],
    occupied_now: Vec<u32>,
    occupied_next: Vec<u32>,
    next: Vec<Option<CellId>>,
    salt: u64,
}

impl Pibt<'_, '_> {
    /// Candidate cells ordered best-first. Assigned agents sort by heuristic
    /// value, then direction (canonical or salted), with waiting last among
    /// equals. Idle agents prefer to stay put.
    fn candidates(&self, i: usize) -> ([CellId; 5], usize) {
        let agent = &self.agents[i];
        let here = agent.location;
        let mut keyed: [(u32, u8, CellId); 5] = [(0, 0, here); 5];
        let mut n = 0;
        for (d, c) in self.map.adjacent(here) {
            let h = match agent.heuristic {
                Some(h) => h.raw(c),
                None => 1,
            };
            keyed[n] = (h, d as u8, c);
            n += 1;
        }
        let stay = match agent.heuristic {
            Some(h) => h.raw(here),
            None => 0,
        };
        keyed[n] = (stay, 4, here);
        n += 1;
        if self.salt != 0 {
            let mix = |o: u8| {
                let mut z = self.salt ^ ((agent.id as u64) << 8) ^ o as u64;
                z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
                z ^ (z >> 31)
            };
            keyed[..n].sort_unstable_by_key(|&(h, order, _)| (h, if order == 4 { u64::MAX } else { mix(order) }));
        } else {
            keyed[..n].sort_unstable_by_key(|&(h, order, _)| (h, order as u64));
        }
        let mut out = [here; 5];
        for (slot, k) in out.iter_mut().zip(&keyed[..n]) {
            *slot = k.2;
        }
        (out, n)
    }

    /// Heuristic value of `c` for agent `i`; idle agents are indifferent.
    fn dist(&self, i: usize, c: CellId) -> u32 {
        self.agents[i].heuristic.map_or(0, |h| h.raw(c))
    }

    fn degree(&self, c: CellId) -> usize {
        self.map.adjacent(c).count()
    }

    /// Neighbors of `v` an agent could be pulled into, ignoring `from` and
    /// dead ends already holding an agent at its goal. Returns the count and
    /// the last such cell.
    fn pull_options(&self, v: CellId, from: CellId) -> (usize, Option<CellId>) {
        let mut n = 0;
        let mut last = None;
        for (_, u) in self.map.adjacent(v) {
            let a = self.occupied_now[u.index()];
            let parked =
                self.degree(u) == 1 && a != NOBODY && self.agents[a as usize].heuristic.is_some_and(|h| h.goal() == u);
            if u != from && !parked {
                n += 1;
                last = Some(u);
            }
        }
        (n, last)
    }

    /// Whether `pusher` (at `v_pusher`) and `puller` (at `v_puller`) want to
    /// pass each other along a corridor too narrow to do so.
    fn swap_required(&self, pusher: usize, puller: usize, mut v_pusher: CellId, mut v_puller: CellId) -> bool {
        while self.dist(pusher, v_puller) < self.dist(pusher, v_pusher) {
            let (n, next) = self.pull_options(v_puller, v_pusher);
            if n >= 2 {
                return false;
            }
            match next {
                Some(u) if n == 1 => {
                    v_pusher = v_puller;
                    v_puller = u;
                }
                _ => break,
            }
        }
        self.dist(puller, v_pusher) < self.dist(puller, v_puller)
            && (self.dist(pusher, v_pusher) == 0 || self.dist(pusher, v_puller) < self.dist(pusher, v_pusher))
    }

    /// Whether backing out of the corridor from `v_puller` reaches a branch
    /// where the two agents can pass.
    fn swap_possible(&self, v_pusher: CellId, v_puller: CellId) -> bool {
        let origin = v_pusher;
        let (mut v_pusher, mut v_puller) = (v_pusher, v_puller);
        for _ in 0..self.map.num_cells() {
            if v_puller == origin {
                return false;
            }
            let (n, next) = self.pull_options(v_puller, v_pusher);
            if n >= 2 {
                return true;
            }
            match next {
                Some(u) if n == 1 => {
                    v_pusher = v_puller;
                    v_puller = u;
                }
                _ => return false,
            }
        }
        false
    }

    /// Agent that `i` should pull behind it instead of pushing against.
    fn swap_partner(&self, i: usize, best: CellId) -> Option<usize> {
        let here = self.agents[i].location;
        let j = self.occupied_now[best.index()];
        if j != NOBODY
            && j as usize != i
            && self.next[j as usize].is_none()
            && self.swap_required(i, j as usize, here, best)
            && self.swap_possible(best, here)
        {
            return Some(j as usize);
        }
        None
    }

    fn plan(&mut self, i: usize) -> bool {
        let here = self.agents[i].location;
        let (mut cands, n) = self.candidates(i);
        let partner = self.swap_partner(i, cands[0]);
        if partner.is_some() {
            cands[..n].reverse();
        }
        for (rank, &v) in cands[..n].iter().enumerate() {
            if self.occupied_next[v.index()] != NOBODY {
                continue;
            }
            let k = self.occupied_now[v.index()];
            if k != NOBODY && self.next[k as usize] == Some(here) {
                continue;
            }
            self.occupied_next[v.index()] = i as u32;
            self.next[i] = Some(v);
            if k != NOBODY && k as usize != i && self.next[k as usize].is_none() && !self.plan(k as usize) {
                continue;
            }
            if let Some(j) = partner {
                if rank == 0 && self.next[j].is_none() && self.occupied_next[here.index()] == NOBODY {
                    self.occupied_next[here.index()] = j as u32;
                    self.next[j] = Some(here);
                }
            }
            return true;
        }
        self.occupied_next[here.index()] = i as u32;
        self.next[i] = Some(here);
        false
    }
}

/// Plans one collision-free step. Agents are processed by descending
/// priority (ties by ascending agent id); a higher-priority agent may push
/// lower-priority ones out of its way, and a pushed agent that cannot move
/// makes its pusher try its next candidate.
pub fn pibt_step(map: &GridMap, agents: &[PlannerAgent<'_>], priorities: &[f64]) -> ActionStep {
    pibt_step_salted(map, agents, priorities, 0)
}

/// [`pibt_step`] with equal-valued moves ordered by a hash of `salt`, the
/// agent and the direction instead of the fixed N, E, S, W order. A fresh
/// salt each step keeps agents from replaying the same standoff forever.
/// Salt 0 keeps the fixed order.
pub fn pibt_step_salted(map: &GridMap, agents: &[PlannerAgent<'_>], priorities: &[f64], salt: u64) -> ActionStep {
    assert_eq!(agents.len(), priorities.len(), "one priority per agent");
    let mut order: Vec<usize> = (0..agents.len()).collect();
    order.sort_by(|&a, &b| priorities[b].total_cmp(&priorities[a]).then(agents[a].id.cmp(&agents[b].id)));

    let mut state = Pibt {
        map,
        agents,
        occupied_now: vec![NOBODY; map.num_cells()],
        occupied_next: vec![NOBODY; map.num_cells()],
        next: vec![None; agents.len()],
        salt,
    };
    for (i, a) in agents.iter().enumerate() {
        debug_assert_eq!(state.occupied_now[a.location.index()], NOBODY, "agents share a start cell");
        state.occupied_now[a.location.index()] = i as u32;
    }
    for i in order {
        if state.next[i].is_none() {
            state.plan(i);
        }
    }

    let next: Vec<CellId> = state.next.into_iter().map(|c| c.expect("every agent planned")).collect();
    let actions = agents
        .iter()
        .zip(&next)
        .map(|(a, &to)| match map.direction(a.location, to) {
            Some(d) => Action::Move(d),
            None => Action::Wait,
        })
        .collect();
    ActionStep { actions, next }
}

/// Planner-relevant status of an agent at the end of a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoalStatus {
    Idle,
    /// Goal reached this step; priority resets.
    Reached,
    EnRoute,
    /// No progress toward the goal for a long spell; priority resets.
    Stalled,
}

/// Priority for idle agents; below every agent that has a goal.
pub const IDLE_PRIORITY: f64 = -1.0;

/// Elapsed-time priorities: +1 for every step spent short of the goal, reset
/// to zero when the goal is reached. Ties are broken by agent id inside
/// [`pibt_step`].
pub fn update_priorities(status: &[GoalStatus], prev: &[f64]) -> Vec<f64> {
    status
        .iter()
        .zip(prev)
        .map(|(s, &p)| match s {
            GoalStatus::Idle => IDLE_PRIORITY,
            GoalStatus::Reached | GoalStatus::Stalled => 0.0,
            GoalStatus::EnRoute => p.max(0.0) + 1.0,
        })
        .collect()
}
