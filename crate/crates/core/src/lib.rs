pub mod assignment;
pub mod cost_models;
pub mod grid_map;
pub mod mincost_flow;
pub mod planner;
pub mod simulator;
