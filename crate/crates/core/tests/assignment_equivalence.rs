mod common;

use mapd_core::assignment::{flow_assign, greedy_assign, linear_assignment, AgentSlot, CachedUnitDistances, TaskSlot};
use mapd_core::grid_map::{CellId, EdgeId, GridMap};
use mapd_core::simulator::random_map;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn slots(map: &GridMap, seed: u64, n: usize, m: usize) -> (Vec<AgentSlot>, Vec<TaskSlot>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells: Vec<CellId> = map.free_cells().collect();
    let agents = cells
        .choose_multiple(&mut rng, n.min(cells.len()))
        .enumerate()
        .map(|(i, &c)| AgentSlot { id: i as u32, location: c })
        .collect();
    let tasks = cells
        .choose_multiple(&mut rng, m.min(cells.len()))
        .enumerate()
        .map(|(j, &c)| TaskSlot { id: j as u32, pickup: c })
        .collect();
    (agents, tasks)
}

fn unit(_: EdgeId) -> f64 {
    1.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flow_linear_and_oracle_agree(seed in any::<u64>(), w in 2usize..9, h in 2usize..9, n in 1usize..6, m in 1usize..8) {
        let map = random_map(w, h, 0.2, seed);
        let (agents, tasks) = slots(&map, seed ^ 0x5eed, n, m);
        let flow = flow_assign(&map, &agents, &tasks, &unit).unwrap();
        let linear = linear_assignment(&agents, &tasks, &map, &unit);
        let matrix: Vec<Vec<f64>> = agents
            .iter()
            .map(|a| {
                let d = common::grid_dijkstra(&map, a.location, &|_, _| 1.0);
                tasks.iter().map(|t| d[t.pickup.index()]).collect()
            })
            .collect();
        prop_assert_eq!(flow.total_cost, linear.total_cost);
        prop_assert_eq!(flow.total_cost, common::brute_force_assignment(&matrix));
        prop_assert_eq!(flow.pairs.len(), agents.len().min(tasks.len()));
        prop_assert!(flow.is_injective());
    }

    #[test]
    fn greedy_is_never_cheaper(seed in any::<u64>(), n in 1usize..6, m in 1usize..8) {
        let map = random_map(8, 8, 0.2, seed);
        let (agents, tasks) = slots(&map, seed.rotate_left(7), n, m);
        let flow = flow_assign(&map, &agents, &tasks, &unit).unwrap();
        let greedy = greedy_assign(&agents, &tasks, &mut CachedUnitDistances::new(&map));
        prop_assert_eq!(greedy.pairs.len(), flow.pairs.len());
        prop_assert!(greedy.total_cost >= flow.total_cost);
    }
}

#[test]
fn disconnected_agents_are_left_out() {
    let map = mapd_core::grid_map::parse_map("type octile\nheight 1\nwidth 5\nmap\n..@..\n").unwrap();
    let agents = [AgentSlot { id: 0, location: map.cell(0, 0) }, AgentSlot { id: 1, location: map.cell(4, 0) }];
    let tasks = [TaskSlot { id: 0, pickup: map.cell(1, 0) }, TaskSlot { id: 1, pickup: map.cell(0, 0) }];
    let flow = flow_assign(&map, &agents, &tasks, &unit).unwrap();
    let linear = linear_assignment(&agents, &tasks, &map, &unit);
    assert_eq!(flow.pairs.len(), 1);
    assert_eq!(flow.total_cost, 0.0);
    assert_eq!(linear.total_cost, flow.total_cost);
}
