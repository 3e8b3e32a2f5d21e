//! The lifelong pickup-and-delivery loop. Each step runs, in order:
//! assignment at scheduling boundaries, guide-path planning, one PIBT move,
//! pickup and delivery detection, wait-statistics update, task release and
//! metric recording.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{
    flow_assign, greedy_assign, linear_assignment, Agent, AgentSlot, AssignmentError, AssignmentSet,
    CachedUnitDistances, GuidePath, Task, TaskId, TaskSlot, TaskState,
};
use crate::cost_models::{CostError, CostModel, CostModelKind, EdgeWaitStats, TrafficState, DEFAULT_GAMMA};
use crate::grid_map::{multi_source_bfs, shortest_distances, CellId, EdgeCostTable, EdgeId, GridMap};
use crate::planner::{
    build_guide_heuristic, check_step, pibt_step_salted, update_priorities, Action, GoalStatus, GuideHeuristic,
    PlannerAgent, IDLE_PRIORITY,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invariant violated at step {step}: {message}")]
    Invariant { step: u64, message: String },
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Linear,
    Flow,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Greedy, Strategy::Linear, Strategy::Flow];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Linear => "linear",
            Strategy::Flow => "flow",
        }
    }

    /// Whether assigned but not yet picked-up tasks may move between agents.
    pub fn reassigns(self) -> bool {
        self != Strategy::Greedy
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "linear" => Ok(Strategy::Linear),
            "flow" => Ok(Strategy::Flow),
            other => Err(format!("unknown strategy {other:?} (expected greedy, linear or flow)")),
        }
    }
}

/// How new tasks enter the pool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskPolicy {
    /// Keep `ceil(ratio * agents)` released tasks waiting for pickup.
    ConstantRatio { ratio: f64 },
    /// Release a fixed number of tasks every step.
    PerStep { per_step: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskDistribution {
    Uniform,
    /// Pickups and deliveries alternate between `S` and `E` cells, biased
    /// toward cells close to an `E` cell.
    LabeledEs,
}

impl FromStr for TaskDistribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(TaskDistribution::Uniform),
            "labeled-es" => Ok(TaskDistribution::LabeledEs),
            other => Err(format!("unknown task distribution {other:?} (expected uniform or labeled-es)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub strategy: Strategy,
    pub cost: CostModelKind,
    pub gamma: f64,
    pub agents: usize,
    pub policy: TaskPolicy,
    /// Total number of tasks ever released. When set, the run ends as soon
    /// as all of them are delivered.
    pub task_budget: Option<u64>,
    pub schedule_k: u64,
    pub horizon: u64,
    /// Wall-clock planning budget per step; `None` runs in logical mode.
    pub budget_ms: Option<f64>,
    pub seed: u64,
    pub distribution: TaskDistribution,
}

impl SimConfig {
    pub fn new(strategy: Strategy, agents: usize) -> Self {
        SimConfig {
            strategy,
            cost: CostModelKind::Unit,
            gamma: DEFAULT_GAMMA,
            agents,
            policy: TaskPolicy::ConstantRatio { ratio: 1.5 },
            task_budget: None,
            schedule_k: 1,
            horizon: 1000,
            budget_ms: None,
            seed: 0,
            distribution: TaskDistribution::Uniform,
        }
    }

    pub fn is_logical(&self) -> bool {
        self.budget_ms.is_none()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.agents == 0 {
            return bad("at least one agent is required");
        }
        if self.schedule_k == 0 {
            return bad("scheduling period must be at least 1");
        }
        match self.policy {
            TaskPolicy::ConstantRatio { ratio } if !(ratio > 0.0 && ratio.is_finite()) => {
                return bad("pool ratio must be positive");
            }
            TaskPolicy::PerStep { per_step: 0 } => return bad("per-step release must be at least 1"),
            _ => {}
        }
        if let Some(b) = self.budget_ms {
            if !(b > 0.0 && b.is_finite()) {
                return bad("step budget must be positive");
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Metrics recorded at the end of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based step number.
    pub step: u64,
    pub throughput: u64,
    /// Total cost of the assignment installed this step, if any.
    pub assignment_cost: Option<f64>,
    pub solver_ms: f64,
    /// Part of `solver_ms` spent in the assignment strategy.
    pub assignment_ms: f64,
    pub timeouts: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub throughput: u64,
    /// Step at which the last budgeted task was delivered.
    pub makespan: Option<u64>,
    pub steps: u64,
    pub timeouts: u64,
    pub assignment_calls: u64,
    pub tasks_released: u64,
    pub records: Vec<StepRecord>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl TimingStats {
    /// Nearest-rank percentiles.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return TimingStats::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        TimingStats { p50: rank(0.5), p95: rank(0.95), max: s[s.len() - 1] }
    }
}

impl SimMetrics {
    pub fn solver_ms(&self) -> TimingStats {
        let samples: Vec<f64> = self.records.iter().map(|r| r.solver_ms).collect();
        TimingStats::from_samples(&samples)
    }

    /// Assignment time over the steps that ran the strategy.
    pub fn assignment_ms(&self) -> TimingStats {
        let samples: Vec<f64> =
            self.records.iter().filter(|r| r.assignment_cost.is_some()).map(|r| r.assignment_ms).collect();
        TimingStats::from_samples(&samples)
    }

    /// Per-step CSV. In logical mode the timing column is left empty.
    pub fn steps_csv(&self, logical: bool) -> String {
        let mut out = String::from("step,throughput,assignment_cost,solver_ms,timeouts\n");
        for r in &self.records {
            let _ = write!(out, "{},{},", r.step, r.throughput);
            if let Some(c) = r.assignment_cost {
                let _ = write!(out, "{c}");
            }
            out.push(',');
            if !logical {
                let _ = write!(out, "{:.3}", r.solver_ms);
            }
            let _ = writeln!(out, ",{}", r.timeouts);
        }
        out
    }
}

/// Final per-run summary written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub cost: CostModelKind,
    pub agents: usize,
    pub seed: u64,
    pub steps: u64,
    pub throughput: u64,
    pub makespan: Option<u64>,
    pub timeouts: u64,
    pub assignment_calls: u64,
    pub tasks_released: u64,
    pub solver_ms: TimingStats,
    pub assignment_ms: TimingStats,
}

impl RunSummary {
    pub fn new(config: &SimConfig, metrics: &SimMetrics) -> Self {
        RunSummary {
            strategy: config.strategy,
            cost: config.cost,
            agents: config.agents,
            seed: config.seed,
            steps: metrics.steps,
            throughput: metrics.throughput,
            makespan: metrics.makespan,
            timeouts: metrics.timeouts,
            assignment_calls: metrics.assignment_calls,
            tasks_released: metrics.tasks_released,
            solver_ms: metrics.solver_ms(),
            assignment_ms: metrics.assignment_ms(),
        }
    }
}

/// Everything that happened in one step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub record: StepRecord,
    pub actions: Vec<Action>,
    pub locations: Vec<CellId>,
    pub timed_out: bool,
}

enum Sampler {
    Uniform(Vec<CellId>),
    LabeledEs { s: Vec<CellId>, s_weights: WeightedIndex<f64>, e: Vec<CellId>, e_weights: WeightedIndex<f64> },
}

impl Sampler {
    fn new(map: &GridMap, reachable: &[CellId], dist: TaskDistribution) -> Result<Self, SimError> {
        match dist {
            TaskDistribution::Uniform => {
                if reachable.len() < 2 {
                    return Err(SimError::Config("tasks need at least two connected free cells".into()));
                }
                Ok(Sampler::Uniform(reachable.to_vec()))
            }
            TaskDistribution::LabeledEs => {
                let s: Vec<CellId> = reachable.iter().copied().filter(|&c| map.label(c) == Some('S')).collect();
                let e: Vec<CellId> = reachable.iter().copied().filter(|&c| map.label(c) == Some('E')).collect();
                if s.is_empty() || e.is_empty() {
                    return Err(SimError::Config("labeled-es tasks need both 'S' and 'E' cells".into()));
                }
                let to_e = multi_source_bfs(map, e.iter().copied());
                let weights = |cells: &[CellId]| {
                    let w = cells.iter().map(|c| 1.0 / (1.0 + to_e[c.index()] as f64));
                    WeightedIndex::new(w).expect("positive weights")
                };
                Ok(Sampler::LabeledEs { s_weights: weights(&s), e_weights: weights(&e), s, e })
            }
        }
    }

    fn sample(&self, id: TaskId, rng: &mut ChaCha8Rng) -> (CellId, CellId) {
        match self {
            Sampler::Uniform(cells) => {
                let pickup = *cells.choose(rng).expect("non-empty");
                loop {
                    let delivery = *cells.choose(rng).expect("non-empty");
                    if delivery != pickup {
                        return (pickup, delivery);
                    }
                }
            }
            Sampler::LabeledEs { s, s_weights, e, e_weights } => {
                let from_s = s[s_weights.sample(rng)];
                let from_e = e[e_weights.sample(rng)];
                if id.is_multiple_of(2) {
                    (from_s, from_e)
                } else {
                    (from_e, from_s)
                }
            }
        }
    }
}

/// Assignment and guide paths computed in the planning phases, applied only
/// if they arrive within the step budget.
#[derive(Default)]
struct Plan {
    assignment_ms: f64,
    traffic: Option<TrafficState>,
    assignment: Option<AssignmentSet>,
    guides: Vec<(usize, GuidePath, GuideHeuristic)>,
}

/// Steps without getting closer to its goal after which an agent gives up
/// its accumulated priority.
pub const STALL_LIMIT: u32 = 10;

pub struct Simulator<'m> {
    map: &'m GridMap,
    config: SimConfig,
    rng: ChaCha8Rng,
    /// Separate stream for planner tie-breaking, so the task sequence does
    /// not depend on how many steps a run takes.
    tie_rng: ChaCha8Rng,
    sampler: Sampler,
    step: u64,
    agents: Vec<Agent>,
    heuristics: Vec<Option<GuideHeuristic>>,
    priorities: Vec<f64>,
    waited: Vec<u32>,
    /// Per agent: goal, best heuristic value reached toward it, and steps
    /// since that value last improved.
    progress: Vec<(Option<CellId>, u32, u32)>,
    tasks: Vec<Task>,
    open: BTreeSet<TaskId>,
    traffic: TrafficState,
    wait_stats: EdgeWaitStats,
    unit_distances: CachedUnitDistances<'m>,
    metrics: SimMetrics,
}

impl<'m> Simulator<'m> {
    /// Places agents on distinct random cells of the map's largest connected
    /// region and releases the initial tasks there.
    pub fn new(map: &'m GridMap, config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let mut region = map.clone();
        region.keep_largest_component();
        let reachable: Vec<CellId> = region.free_cells().collect();
        if reachable.len() < config.agents {
            return Err(SimError::Config(format!(
                "{} agents do not fit in {} connected free cells",
                config.agents,
                reachable.len()
            )));
        }
        let sampler = Sampler::new(map, &reachable, config.distribution)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let agents: Vec<Agent> = reachable
            .choose_multiple(&mut rng, config.agents)
            .enumerate()
            .map(|(i, &c)| Agent::new(i as u32, c))
            .collect();
        let n = agents.len();
        let mut tie_rng = ChaCha8Rng::seed_from_u64(config.seed);
        tie_rng.set_stream(1);
        let mut sim = Simulator {
            map,
            rng,
            tie_rng,
            sampler,
            step: 0,
            agents,
            heuristics: vec![None; n],
            priorities: vec![IDLE_PRIORITY; n],
            waited: vec![0; n],
            progress: vec![(None, u32::MAX, 0); n],
            tasks: Vec::new(),
            open: BTreeSet::new(),
            traffic: TrafficState::new(map),
            wait_stats: EdgeWaitStats::new(map, config.gamma)?,
            unit_distances: CachedUnitDistances::new(map),
            metrics: SimMetrics::default(),
            config,
        };
        sim.release_tasks();
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn metrics(&self) -> &SimMetrics {
        &self.metrics
    }

    pub fn into_metrics(self) -> SimMetrics {
        self.metrics
    }

    pub fn priorities(&self) -> &[f64] {
        &self.priorities
    }

    pub fn wait_stats(&self) -> &EdgeWaitStats {
        &self.wait_stats
    }

    /// Released tasks not yet picked up.
    pub fn pool_size(&self) -> usize {
        self.open.iter().filter(|&&t| self.task(t).state != TaskState::PickedUp).count()
    }

    pub fn is_finished(&self) -> bool {
        if self.step >= self.config.horizon {
            return true;
        }
        matches!(self.config.task_budget, Some(b) if self.metrics.throughput >= b)
    }

    pub fn run(mut self) -> Result<SimMetrics, SimError> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(self.metrics)
    }

    fn task(&self, id: TaskId) -> &Task {
        &self.tasks[id as usize]
    }

    /// Tops the pool up according to the release policy, clamped by the
    /// remaining task budget.
    pub fn release_tasks(&mut self) -> usize {
        let wanted = match self.config.policy {
            TaskPolicy::ConstantRatio { ratio } => {
                let target = (ratio * self.config.agents as f64).ceil() as usize;
                target.saturating_sub(self.pool_size())
            }
            TaskPolicy::PerStep { per_step } => per_step as usize,
        };
        let remaining = match self.config.task_budget {
            Some(b) => b.saturating_sub(self.tasks.len() as u64) as usize,
            None => usize::MAX,
        };
        let count = wanted.min(remaining);
        for _ in 0..count {
            let id = self.tasks.len() as TaskId;
            let (pickup, delivery) = self.sampler.sample(id, &mut self.rng);
            self.tasks.push(Task::new(id, pickup, delivery, self.step));
            self.open.insert(id);
        }
        self.metrics.tasks_released = self.tasks.len() as u64;
        count
    }

    fn goal_of(&self, agent: &Agent) -> Option<CellId> {
        match (agent.carried, agent.assigned) {
            (Some(t), _) => Some(self.task(t).delivery),
            (None, Some(t)) => Some(self.task(t).pickup),
            _ => None,
        }
    }

    fn cost_table(&self, traffic: &TrafficState) -> EdgeCostTable<'m> {
        let model = match self.config.cost {
            CostModelKind::Unit => CostModel::Unit,
            CostModelKind::Traffic => CostModel::Traffic(traffic),
            CostModelKind::AvgWait => CostModel::AvgWait(&self.wait_stats),
        };
        EdgeCostTable::new(self.map, &model)
    }

    /// Remaining guide paths of agents carrying a task.
    fn delivery_traffic(&self) -> TrafficState {
        let remaining: Vec<&[CellId]> = self
            .agents
            .iter()
            .filter(|a| a.is_delivering())
            .filter_map(|a| {
                let cells = a.guide.as_ref()?.cells();
                Some(match cells.iter().rposition(|&c| c == a.location) {
                    Some(i) => &cells[i..],
                    None => cells,
                })
            })
            .collect();
        TrafficState::from_guide_paths(self.map, remaining)
    }

    fn assign(&mut self, table: &EdgeCostTable<'m>) -> Result<AssignmentSet, SimError> {
        let reassign = self.config.strategy.reassigns();
        let agents: Vec<AgentSlot> = self
            .agents
            .iter()
            .filter(|a| a.carried.is_none() && (reassign || a.assigned.is_none()))
            .map(|a| AgentSlot { id: a.id, location: a.location })
            .collect();
        let tasks: Vec<TaskSlot> = self
            .open
            .iter()
            .map(|&t| self.task(t))
            .filter(|t| t.state == TaskState::Pooled || (reassign && t.state == TaskState::Assigned))
            .map(|t| TaskSlot { id: t.id, pickup: t.pickup })
            .collect();
        Ok(match self.config.strategy {
            Strategy::Greedy => greedy_assign(&agents, &tasks, &mut self.unit_distances),
            Strategy::Linear => linear_assignment(&agents, &tasks, self.map, table),
            Strategy::Flow => flow_assign(self.map, &agents, &tasks, table)?,
        })
    }

    /// Phases 1 and 2: assignment at scheduling boundaries, then guide paths
    /// for every agent whose goal is new or who lacks one.
    fn plan(&mut self, boundary: bool) -> Result<Plan, SimError> {
        let mut plan = Plan::default();
        let mut table = None;
        if boundary {
            let traffic = (self.config.cost == CostModelKind::Traffic).then(|| self.delivery_traffic());
            let t = self.cost_table(traffic.as_ref().unwrap_or(&self.traffic));
            let started = Instant::now();
            plan.assignment = Some(self.assign(&t)?);
            plan.assignment_ms = started.elapsed().as_secs_f64() * 1e3;
            plan.traffic = traffic;
            table = Some(t);
        }

        let reassign = self.config.strategy.reassigns();
        for (i, agent) in self.agents.iter().enumerate() {
            let (goal, flow_path) = match (agent.carried, &plan.assignment) {
                (Some(t), _) => (Some(self.task(t).delivery), None),
                (None, Some(set)) if reassign => {
                    (set.pairs.get(&agent.id).map(|&t| self.task(t).pickup), set.guide_paths.get(&agent.id))
                }
                (None, Some(set)) => {
                    let t = agent.assigned.or_else(|| set.pairs.get(&agent.id).copied());
                    (t.map(|t| self.task(t).pickup), None)
                }
                (None, None) => (agent.assigned.map(|t| self.task(t).pickup), None),
            };
            let Some(goal) = goal else { continue };
            let current = agent.guide.as_ref();
            // keep the current guide when the flow path to the same goal is
            // not shorter than its remaining length
            let keep = |p: &GuidePath| {
                current.is_some_and(|g| g.goal() == p.goal())
                    && self.heuristics[i]
                        .as_ref()
                        .and_then(|h| h.value(agent.location))
                        .is_some_and(|v| v as usize <= p.len())
            };
            let path = match flow_path {
                Some(p) if !keep(p) => p.clone(),
                Some(_) => continue,
                None if current.is_some_and(|g| g.goal() == goal) => continue,
                None => {
                    let t =
                        table.get_or_insert_with(|| self.cost_table(plan.traffic.as_ref().unwrap_or(&self.traffic)));
                    let d = shortest_distances(self.map, agent.location, &*t, Some(&[goal]));
                    match d.path_to(goal) {
                        Some(cells) => GuidePath::new(cells),
                        None => {
                            return Err(SimError::Invariant {
                                step: self.step,
                                message: format!("agent {} cannot reach its goal {goal}", agent.id),
                            })
                        }
                    }
                }
            };
            let h = build_guide_heuristic(self.map, &path);
            plan.guides.push((i, path, h));
        }
        Ok(plan)
    }

    fn set_task_state(&mut self, id: TaskId, to: TaskState) -> Result<(), SimError> {
        self.tasks[id as usize].transition(to)?;
        Ok(())
    }

    fn commit(&mut self, plan: Plan) -> Result<(), SimError> {
        if let Some(ts) = plan.traffic {
            self.traffic = ts;
        }
        if let Some(set) = &plan.assignment {
            if self.config.strategy.reassigns() {
                let mut changed = Vec::new();
                for (i, a) in self.agents.iter().enumerate() {
                    if a.carried.is_none() && a.assigned != set.pairs.get(&a.id).copied() {
                        changed.push(i);
                    }
                }
                for &i in &changed {
                    if let Some(old) = self.agents[i].assigned.take() {
                        self.set_task_state(old, TaskState::Pooled)?;
                    }
                    self.agents[i].guide = None;
                    self.heuristics[i] = None;
                }
                for &i in &changed {
                    if let Some(&t) = set.pairs.get(&self.agents[i].id) {
                        self.agents[i].assigned = Some(t);
                        self.set_task_state(t, TaskState::Assigned)?;
                    }
                }
            } else {
                for (&a, &t) in &set.pairs {
                    self.agents[a as usize].assigned = Some(t);
                    self.set_task_state(t, TaskState::Assigned)?;
                }
            }
        }
        for (i, path, h) in plan.guides {
            self.agents[i].guide = Some(path);
            self.heuristics[i] = Some(h);
        }
        Ok(())
    }

    /// Advances the simulation by one step.
    pub fn step(&mut self) -> Result<StepReport, SimError> {
        if self.step >= self.config.horizon {
            return Err(SimError::Invariant { step: self.step, message: "stepped past the horizon".into() });
        }
        let boundary = self.step.is_multiple_of(self.config.schedule_k);
        let started = Instant::now();
        let plan = self.plan(boundary)?;
        let solver_ms = started.elapsed().as_secs_f64() * 1e3;
        if boundary {
            self.metrics.assignment_calls += 1;
        }

        let timed_out = matches!(self.config.budget_ms, Some(b) if solver_ms > b);
        let mut assignment_cost = None;
        let assignment_ms = plan.assignment_ms;
        if timed_out {
            self.metrics.timeouts += 1;
        } else {
            assignment_cost = plan.assignment.as_ref().map(|s| s.total_cost);
            self.commit(plan)?;
        }

        // phase 3: move
        let from: Vec<CellId> = self.agents.iter().map(|a| a.location).collect();
        let goals: Vec<Option<CellId>> = self.agents.iter().map(|a| self.goal_of(a)).collect();
        let step = if timed_out {
            crate::planner::ActionStep { actions: vec![Action::Wait; from.len()], next: from.clone() }
        } else {
            let planner_agents: Vec<PlannerAgent> = self
                .agents
                .iter()
                .zip(&self.heuristics)
                .zip(&goals)
                .map(|((a, h), g)| PlannerAgent { id: a.id, location: a.location, heuristic: g.and(h.as_ref()) })
                .collect();
            let salt = self.tie_rng.gen::<u64>() | 1;
            pibt_step_salted(self.map, &planner_agents, &self.priorities, salt)
        };
        check_step(self.map, &from, &step.next).map_err(|message| SimError::Invariant { step: self.step, message })?;

        let mut events = Vec::new();
        for (i, (&a, &b)) in from.iter().zip(&step.next).enumerate() {
            self.agents[i].location = b;
            if goals[i].is_none() {
                self.waited[i] = 0;
            } else if a == b {
                self.waited[i] += 1;
            } else {
                events.push((EdgeId::new(a, b), self.waited[i] as f64));
                self.waited[i] = 0;
            }
        }

        for i in 0..self.agents.len() {
            let h = self.heuristics[i].as_ref().and_then(|h| h.value(self.agents[i].location)).unwrap_or(u32::MAX);
            let p = &mut self.progress[i];
            if p.0 != goals[i] || h < p.1 {
                *p = (goals[i], h, 0);
            } else {
                p.2 += 1;
            }
        }

        // phase 4: pickups and deliveries
        let mut status = vec![GoalStatus::Idle; self.agents.len()];
        for i in 0..self.agents.len() {
            let Some(goal) = goals[i] else { continue };
            let here = self.agents[i].location;
            if here != goal {
                status[i] = if self.progress[i].2 >= STALL_LIMIT {
                    self.progress[i].2 = 0;
                    GoalStatus::Stalled
                } else {
                    GoalStatus::EnRoute
                };
                continue;
            }
            status[i] = GoalStatus::Reached;
            if let Some(t) = self.agents[i].carried.take() {
                self.set_task_state(t, TaskState::Delivered)?;
                self.open.remove(&t);
                self.metrics.throughput += 1;
            } else if let Some(t) = self.agents[i].assigned.take() {
                self.set_task_state(t, TaskState::PickedUp)?;
                self.agents[i].carried = Some(t);
            }
            self.agents[i].guide = None;
            self.heuristics[i] = None;
        }
        self.priorities = update_priorities(&status, &self.priorities);
        for (p, a) in self.priorities.iter_mut().zip(&self.agents) {
            if a.carried.is_none() && a.assigned.is_none() {
                *p = IDLE_PRIORITY;
            }
        }

        // phase 5: wait statistics
        self.wait_stats.update(&events)?;

        // phase 6: release
        self.step += 1;
        self.release_tasks();

        // phase 7: record
        if self.metrics.makespan.is_none() && matches!(self.config.task_budget, Some(b) if self.metrics.throughput >= b)
        {
            self.metrics.makespan = Some(self.step);
        }
        self.metrics.steps = self.step;
        let record = StepRecord {
            step: self.step,
            throughput: self.metrics.throughput,
            assignment_cost,
            solver_ms,
            assignment_ms,
            timeouts: self.metrics.timeouts,
        };
        self.metrics.records.push(record.clone());
        self.check_invariants().map_err(|message| SimError::Invariant { step: self.step, message })?;
        Ok(StepReport { record, actions: step.actions, locations: step.next, timed_out })
    }

    /// Cross-checks agents against task states and the release budget.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for a in &self.agents {
            if !seen.insert(a.location) {
                return Err(format!("two agents at {}", a.location));
            }
            if a.carried.is_some() && a.assigned.is_some() {
                return Err(format!("agent {} both carries and is assigned", a.id));
            }
            if let Some(t) = a.carried {
                if self.task(t).state != TaskState::PickedUp {
                    return Err(format!("agent {} carries task {t} in state {:?}", a.id, self.task(t).state));
                }
            }
            if let Some(t) = a.assigned {
                if self.task(t).state != TaskState::Assigned {
                    return Err(format!("agent {} holds task {t} in state {:?}", a.id, self.task(t).state));
                }
            }
        }
        let held = self.agents.iter().filter(|a| a.carried.is_some() || a.assigned.is_some()).count();
        let mut in_flight = 0;
        let mut pooled = 0;
        for &t in &self.open {
            match self.task(t).state {
                TaskState::Pooled => pooled += 1,
                TaskState::Assigned | TaskState::PickedUp => in_flight += 1,
                TaskState::Delivered => return Err(format!("delivered task {t} still open")),
            }
        }
        if in_flight != held {
            return Err(format!("{in_flight} tasks in flight but {held} agents hold one"));
        }
        let generated = self.tasks.len() as u64;
        if self.metrics.throughput + (in_flight + pooled) as u64 != generated {
            return Err(format!(
                "task conservation: {} delivered + {in_flight} in flight + {pooled} pooled != {generated}",
                self.metrics.throughput
            ));
        }
        if let Some(b) = self.config.task_budget {
            if generated > b {
                return Err(format!("{generated} tasks released with a budget of {b}"));
            }
        }
        Ok(())
    }
}

/// Earliest step by which a per-step release schedule can have released all
/// of `total` tasks: nothing released on the last release event can be
/// delivered before the step after it.
pub fn release_lower_bound(total: u64, per_step: u32) -> u64 {
    total.div_ceil(per_step as u64)
}

/// Random map with exactly `round(ratio * cells)` obstacles, trimmed to its
/// largest connected region.
pub fn random_map(width: usize, height: usize, obstacle_ratio: f64, seed: u64) -> GridMap {
    let cells = width * height;
    let blocked = ((obstacle_ratio.clamp(0.0, 1.0) * cells as f64).round() as usize).min(cells);
    let mut glyphs = vec![b'.'; cells];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in rand::seq::index::sample(&mut rng, cells, blocked) {
        glyphs[i] = b'@';
    }
    let mut map = GridMap::from_glyphs(width, height, glyphs).expect("generated glyphs are valid");
    map.keep_largest_component();
    map
}

/// 21x35 warehouse: four bands of two-row shelf blocks with `E` endpoints on
/// the aisles beside them, and `S` workstations on the left and right walls.
pub fn warehouse_map() -> GridMap {
    let (width, height) = (35, 21);
    let mut glyphs = vec![b'.'; width * height];
    let shelf_rows = [2, 3, 7, 8, 12, 13, 17, 18];
    let is_shelf = |x: usize, y: usize| shelf_rows.contains(&y) && (4..=30).contains(&x) && (x - 4) % 7 != 6;
    for y in 0..height {
        for x in 0..width {
            let g = &mut glyphs[y * width + x];
            if is_shelf(x, y) {
                *g = b'@';
            } else if (y > 0 && is_shelf(x, y - 1)) || is_shelf(x, y + 1) {
                *g = b'E';
            } else if (x == 0 || x == width - 1) && y % 2 == 0 && (2..=18).contains(&y) {
                *g = b'S';
            }
        }
    }
    GridMap::from_glyphs(width, height, glyphs).expect("warehouse glyphs are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_map::parse_map;

    fn grid(rows: &[&str]) -> GridMap {
        let text = format!("type octile\nheight {}\nwidth {}\nmap\n{}\n", rows.len(), rows[0].len(), rows.join("\n"));
        parse_map(&text).unwrap()
    }

    fn config(strategy: Strategy, agents: usize) -> SimConfig {
        SimConfig { horizon: 50, ..SimConfig::new(strategy, agents) }
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let ok = config(Strategy::Flow, 2);
        assert!(ok.validate().is_ok());
        assert!(SimConfig { agents: 0, ..ok.clone() }.validate().is_err());
        assert!(SimConfig { schedule_k: 0, ..ok.clone() }.validate().is_err());
        assert!(SimConfig { policy: TaskPolicy::ConstantRatio { ratio: 0.0 }, ..ok.clone() }.validate().is_err());
        assert!(SimConfig { policy: TaskPolicy::PerStep { per_step: 0 }, ..ok.clone() }.validate().is_err());
        assert!(SimConfig { budget_ms: Some(0.0), ..ok.clone() }.validate().is_err());
        assert!(SimConfig { gamma: 1.5, ..ok }.validate().is_err());
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("flow".parse::<Strategy>(), Ok(Strategy::Flow));
        assert!("foo".parse::<Strategy>().is_err());
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>(), Ok(s));
        }
    }

    #[test]
    fn constant_ratio_tops_pool_up() {
        let map = GridMap::open(6, 6);
        let mut sim = Simulator::new(&map, config(Strategy::Greedy, 4)).unwrap();
        assert_eq!(sim.pool_size(), 6);
        // a pickup removes one task from the pool; release restores six
        let t = *sim.open.iter().next().unwrap();
        sim.tasks[t as usize].state = TaskState::PickedUp;
        assert_eq!(sim.pool_size(), 5);
        assert_eq!(sim.release_tasks(), 1);
        assert_eq!(sim.pool_size(), 6);
    }

    #[test]
    fn per_step_release_clamps_to_budget() {
        let map = GridMap::open(6, 6);
        let cfg = SimConfig {
            policy: TaskPolicy::PerStep { per_step: 2 },
            task_budget: Some(5),
            ..config(Strategy::Flow, 2)
        };
        let mut sim = Simulator::new(&map, cfg).unwrap();
        assert_eq!(sim.tasks().len(), 2);
        assert_eq!(sim.release_tasks(), 2);
        assert_eq!(sim.release_tasks(), 1);
        assert_eq!(sim.release_tasks(), 0);
        assert_eq!(sim.tasks().len(), 5);
    }

    #[test]
    fn same_seed_same_tasks() {
        let map = GridMap::open(8, 8);
        let a = Simulator::new(&map, config(Strategy::Flow, 3)).unwrap();
        let b = Simulator::new(&map, config(Strategy::Flow, 3)).unwrap();
        assert_eq!(a.tasks(), b.tasks());
        assert_eq!(a.agents(), b.agents());
        let c = Simulator::new(&map, SimConfig { seed: 1, ..config(Strategy::Flow, 3) }).unwrap();
        assert_ne!(a.tasks(), c.tasks());
    }

    /// Hand-traced: the agent stands next to the pickup and the delivery is
    /// the next cell over.
    #[test]
    fn adjacent_pickup_and_delivery_delivers_at_step_two() {
        let map = grid(&["..."]);
        for strategy in Strategy::ALL {
            let cfg = SimConfig { task_budget: Some(1), horizon: 10, ..config(strategy, 1) };
            let mut sim = Simulator::new(&map, cfg).unwrap();
            sim.agents[0].location = CellId(0);
            sim.tasks[0] = Task::new(0, CellId(1), CellId(2), 0);

            let r1 = sim.step().unwrap();
            assert_eq!(r1.locations, vec![CellId(1)]);
            assert_eq!(sim.agents()[0].carried, Some(0));
            assert_eq!(r1.record.throughput, 0);
            let r2 = sim.step().unwrap();
            assert_eq!(r2.locations, vec![CellId(2)]);
            assert_eq!(r2.record.throughput, 1);
            assert_eq!(sim.metrics().makespan, Some(2));
            assert!(sim.is_finished());
        }
    }

    #[test]
    fn schedule_period_controls_assignment_calls() {
        let map = GridMap::open(8, 8);
        for (k, horizon, expected) in [(10, 35, 4), (10, 30, 3), (1, 7, 7), (3, 1, 1)] {
            let cfg = SimConfig { schedule_k: k, horizon, ..config(Strategy::Linear, 3) };
            let m = Simulator::new(&map, cfg).unwrap().run().unwrap();
            assert_eq!(m.assignment_calls, expected, "k={k} T={horizon}");
        }
    }

    #[test]
    fn zero_horizon_has_zero_throughput() {
        let map = GridMap::open(4, 4);
        let m = Simulator::new(&map, SimConfig { horizon: 0, ..config(Strategy::Flow, 2) }).unwrap().run().unwrap();
        assert_eq!(m.throughput, 0);
        assert!(m.records.is_empty());
    }

    #[test]
    fn logical_mode_never_times_out_and_is_deterministic() {
        let map = random_map(12, 12, 0.2, 3);
        for strategy in Strategy::ALL {
            for cost in [CostModelKind::Unit, CostModelKind::Traffic, CostModelKind::AvgWait] {
                let cfg = SimConfig { cost, seed: 9, horizon: 80, ..config(strategy, 10) };
                let a = Simulator::new(&map, cfg.clone()).unwrap().run().unwrap();
                let b = Simulator::new(&map, cfg).unwrap().run().unwrap();
                assert_eq!(a.timeouts, 0);
                assert_eq!(a.steps_csv(true), b.steps_csv(true));
                assert!(a.throughput > 0, "{strategy:?} {cost:?}");
                assert!(a.records.windows(2).all(|w| w[0].throughput <= w[1].throughput));
            }
        }
    }

    #[test]
    fn tiny_budget_times_out_and_agents_wait() {
        let map = GridMap::open(10, 10);
        let cfg = SimConfig { budget_ms: Some(1e-9), horizon: 5, ..config(Strategy::Flow, 4) };
        let mut sim = Simulator::new(&map, cfg).unwrap();
        let start: Vec<CellId> = sim.agents().iter().map(|a| a.location).collect();
        for _ in 0..5 {
            let r = sim.step().unwrap();
            assert!(r.timed_out);
            assert!(r.actions.iter().all(|&a| a == Action::Wait));
        }
        let end: Vec<CellId> = sim.agents().iter().map(|a| a.location).collect();
        assert_eq!(start, end);
        assert_eq!(sim.metrics().timeouts, 5);
        assert!(sim.agents().iter().all(|a| a.assigned.is_none()));
    }

    #[test]
    fn makespan_respects_release_schedule() {
        let map = GridMap::open(8, 8);
        let cfg = SimConfig {
            policy: TaskPolicy::PerStep { per_step: 2 },
            task_budget: Some(40),
            horizon: 2000,
            ..config(Strategy::Flow, 6)
        };
        let m = Simulator::new(&map, cfg).unwrap().run().unwrap();
        let makespan = m.makespan.expect("all tasks delivered");
        assert!(makespan >= release_lower_bound(40, 2));
        assert_eq!(m.throughput, 40);
        assert_eq!(m.steps, makespan);
    }

    #[test]
    fn release_lower_bound_values() {
        assert_eq!(release_lower_bound(500, 2), 250);
        assert_eq!(release_lower_bound(100, 5), 20);
        assert_eq!(release_lower_bound(7, 2), 4);
    }

    #[test]
    fn every_goal_directed_move_is_a_wait_event() {
        let map = GridMap::open(6, 1);
        let cfg = SimConfig { cost: CostModelKind::AvgWait, gamma: 1.0, ..config(Strategy::Greedy, 1) };
        let mut sim = Simulator::new(&map, cfg).unwrap();
        let mut moves = 0;
        for _ in 0..30 {
            let r = sim.step().unwrap();
            moves += r.actions.iter().filter(|a| matches!(a, Action::Move(_))).count();
        }
        assert!(moves > 0);
        let events: f64 = map.edges().map(|e| sim.wait_stats().get(e).1).sum();
        assert_eq!(events, moves as f64);
    }

    #[test]
    fn labeled_tasks_alternate_between_stations_and_endpoints() {
        let map = warehouse_map();
        let cfg = SimConfig { distribution: TaskDistribution::LabeledEs, ..config(Strategy::Flow, 5) };
        let sim = Simulator::new(&map, cfg).unwrap();
        for t in sim.tasks() {
            let (p, d) = (map.label(t.pickup), map.label(t.delivery));
            if t.id % 2 == 0 {
                assert_eq!((p, d), (Some('S'), Some('E')));
            } else {
                assert_eq!((p, d), (Some('E'), Some('S')));
            }
        }
        let plain = GridMap::open(5, 5);
        let cfg = SimConfig { distribution: TaskDistribution::LabeledEs, ..config(Strategy::Flow, 2) };
        assert!(matches!(Simulator::new(&plain, cfg), Err(SimError::Config(_))));
    }

    #[test]
    fn warehouse_shape() {
        let map = warehouse_map();
        assert_eq!((map.width(), map.height()), (35, 21));
        let mut trimmed = map.clone();
        trimmed.keep_largest_component();
        assert_eq!(trimmed.num_free(), map.num_free());
        assert_eq!(map.cells_with_label('S').len(), 18);
        assert!(!map.cells_with_label('E').is_empty());
    }

    #[test]
    fn random_map_obstacle_count_and_connectivity() {
        let map = random_map(20, 20, 0.2, 5);
        assert!(map.num_free() <= 320);
        assert!(map.num_free() > 250);
        let mut trimmed = map.clone();
        trimmed.keep_largest_component();
        assert_eq!(trimmed.num_free(), map.num_free());
        assert_eq!(random_map(20, 20, 0.2, 5).to_map_string(), map.to_map_string());
    }

    #[test]
    fn too_many_agents_is_a_config_error() {
        let map = GridMap::open(2, 2);
        assert!(matches!(Simulator::new(&map, config(Strategy::Flow, 5)), Err(SimError::Config(_))));
    }

    #[test]
    fn timing_percentiles() {
        let s = TimingStats::from_samples(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!((s.p50, s.p95, s.max), (3.0, 5.0, 5.0));
        assert_eq!(TimingStats::from_samples(&[]), TimingStats::default());
    }

    #[test]
    fn steps_csv_layout() {
        let m = SimMetrics {
            records: vec![
                StepRecord {
                    step: 1,
                    throughput: 0,
                    assignment_cost: Some(7.5),
                    solver_ms: 1.23456,
                    assignment_ms: 1.0,
                    timeouts: 0,
                },
                StepRecord {
                    step: 2,
                    throughput: 1,
                    assignment_cost: None,
                    solver_ms: 0.5,
                    assignment_ms: 0.0,
                    timeouts: 1,
                },
            ],
            ..Default::default()
        };
        assert_eq!(m.steps_csv(true), "step,throughput,assignment_cost,solver_ms,timeouts\n1,0,7.5,,0\n2,1,,,1\n");
        assert_eq!(
            m.steps_csv(false),
            "step,throughput,assignment_cost,solver_ms,timeouts\n1,0,7.5,1.235,0\n2,1,,0.500,1\n"
        );
    }
}
