mod common;

use common::{deviation_oracle, grid_points, Trader};
use proptest::prelude::*;
use strata_core::domain::AgentId;
use strata_core::price_game::{find_nash, GameAgent, PriceGrid, DEFAULT_MAX_ROUNDS};

fn build(sellers: &[f64], buyers: &[f64], ceiling: f64) -> (Vec<GameAgent>, Vec<Trader>) {
    let mut agents = Vec::new();
    let mut traders = Vec::new();
    for (i, q) in sellers.iter().enumerate() {
        let id = format!("s{i}");
        agents.push(GameAgent::seller(AgentId::new(id.clone()), *q));
        traders.push(Trader { id, quantity: *q, limit: None });
    }
    for (i, q) in buyers.iter().enumerate() {
        let id = format!("b{i}");
        agents.push(GameAgent::buyer(AgentId::new(id.clone()), *q, ceiling));
        traders.push(Trader { id, quantity: *q, limit: Some(ceiling) });
    }
    (agents, traders)
}

#[test]
fn bertrand_duopoly_lands_on_the_floor() {
    let grid = PriceGrid::new(0.05, 0.30, 0.01).unwrap();
    let (agents, _) = build(&[1.0, 1.0], &[1.0], 0.30);
    let out = find_nash(&agents, &grid, DEFAULT_MAX_ROUNDS).unwrap();
    assert!(out.converged);
    assert!(out.profile.values().all(|&p| p == 0.05), "{:?}", out.profile);
}

#[test]
fn short_supply_sellers_ask_the_ceiling() {
    let grid = PriceGrid::new(0.05, 0.30, 0.01).unwrap();
    let (agents, traders) = build(&[0.5, 0.4], &[2.0], 0.30);
    let out = find_nash(&agents, &grid, DEFAULT_MAX_ROUNDS).unwrap();
    assert!(out.converged);
    assert!(out.profile.values().all(|&p| p == 0.30));
    let prices: Vec<(String, f64)> = out.profile.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    assert!(deviation_oracle(&traders, &prices, &grid_points(0.05, 0.30, 0.01), 0.30) <= 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn converged_profiles_pass_the_independent_deviation_test(
        sellers in prop::collection::vec(1u32..30, 1..4),
        buyers in prop::collection::vec(1u32..30, 1..4),
        floor_c in 1u32..10,
        width in 5u32..25,
    ) {
        let floor = floor_c as f64 / 100.0;
        let ceiling = floor + width as f64 / 100.0;
        let grid = PriceGrid::new(floor, ceiling, 0.01).unwrap();
        let sq: Vec<f64> = sellers.iter().map(|q| *q as f64 / 10.0).collect();
        let bq: Vec<f64> = buyers.iter().map(|q| *q as f64 / 10.0).collect();
        let (agents, traders) = build(&sq, &bq, ceiling);
        let out = find_nash(&agents, &grid, DEFAULT_MAX_ROUNDS).unwrap();
        let prices: Vec<(String, f64)> = out.profile.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let points = grid_points(floor, ceiling, 0.01);
        prop_assert_eq!(points.len(), grid.len());
        for p in out.profile.values() {
            prop_assert!(points.iter().any(|g| (g - p).abs() < 1e-12));
        }
        if out.converged {
            prop_assert!(deviation_oracle(&traders, &prices, &points, ceiling) <= 1e-9);
        }
    }
}
