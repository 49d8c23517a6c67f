//! Discrete-strategy price formation for Layer-I orders.
//!
//! Sellers choose limit prices on a grid bounded by the net-metering and
//! retail rates; buyers are price takers whose limit is fixed. Payoffs come
//! from running the feeder matching rule on the resulting book, and a pure
//! equilibrium is searched by Gauss-Seidel best-response iteration.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AgentId, FeederId, Layer, MarketSlot};
use crate::exchange::{match_orders, Order, Side};

/// Largest permitted strategy set.
pub const MAX_GRID_POINTS: usize = 10_000;

/// Default number of best-response rounds.
pub const DEFAULT_MAX_ROUNDS: usize = 100;

/// Gains at or below this are not improvements, $.
const PAYOFF_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GameError {
    #[error("invalid price grid: {0}")]
    BadGrid(String),
    #[error("agent {0} missing from profile")]
    MissingAgent(AgentId),
    #[error("agent {0} is not a seller in this game")]
    NotASeller(AgentId),
    #[error("price {price} for agent {agent} is not a grid point")]
    OffGrid { agent: AgentId, price: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceGrid {
    pub floor: f64,
    pub ceiling: f64,
    pub step: f64,
    points: Vec<f64>,
}

impl PriceGrid {
    /// Points are `floor + k·step` below the ceiling, then the ceiling itself.
    pub fn new(floor: f64, ceiling: f64, step: f64) -> Result<Self, GameError> {
        if !(floor.is_finite() && ceiling.is_finite() && step.is_finite()) {
            return Err(GameError::BadGrid("bounds and step must be finite".into()));
        }
        if !(floor < ceiling) {
            return Err(GameError::BadGrid(format!("floor {floor} must be below ceiling {ceiling}")));
        }
        if !(step > 0.0) {
            return Err(GameError::BadGrid(format!("step {step} must be positive")));
        }
        let span = ((ceiling - floor) / step - 1e-9).ceil();
        if span + 1.0 > MAX_GRID_POINTS as f64 {
            return Err(GameError::BadGrid(format!("grid would exceed {MAX_GRID_POINTS} points")));
        }
        let mut points: Vec<f64> =
            (0..span as usize).map(|k| ((floor + k as f64 * step) * 1e12).round() / 1e12).collect();
        points.push(ceiling);
        Ok(Self { floor, ceiling, step, points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn midpoint_index(&self) -> usize {
        let target = 0.5 * (self.floor + self.ceiling);
        let mut best = 0;
        for (i, p) in self.points.iter().enumerate() {
            if (p - target).abs() + 1e-12 < (self.points[best] - target).abs() {
                best = i;
            }
        }
        best
    }

    /// The grid point nearest (floor + ceiling)/2, lower one on a tie.
    pub fn midpoint(&self) -> f64 {
        self.points[self.midpoint_index()]
    }

    pub fn index_of(&self, price: f64) -> Option<usize> {
        self.points.iter().position(|p| (p - price).abs() <= 1e-12)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "role")]
pub enum Role {
    Seller,
    /// Price taker bidding a fixed limit.
    Buyer { limit: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameAgent {
    pub id: AgentId,
    pub role: Role,
    /// kWh.
    pub quantity: f64,
}

impl GameAgent {
    pub fn seller(id: impl Into<AgentId>, quantity: f64) -> Self {
        Self { id: id.into(), role: Role::Seller, quantity }
    }

    pub fn buyer(id: impl Into<AgentId>, quantity: f64, limit: f64) -> Self {
        Self { id: id.into(), role: Role::Buyer { limit }, quantity }
    }
}

/// Seller limit prices for one L1 slot.
pub type StrategyProfile = BTreeMap<AgentId, f64>;

/// Per-agent payoff, $.
pub type PayoffTable = BTreeMap<AgentId, f64>;

fn sellers(agents: &[GameAgent]) -> Vec<&AgentId> {
    let set: BTreeSet<&AgentId> = agents.iter().filter(|a| a.role == Role::Seller).map(|a| &a.id).collect();
    set.into_iter().collect()
}

/// Seller payoff is P2P revenue; buyer payoff is the saving against buying
/// the same energy at the grid ceiling (retail).
pub fn payoff(agents: &[GameAgent], profile: &StrategyProfile, grid: &PriceGrid) -> Result<PayoffTable, GameError> {
    let feeder = FeederId::new("game");
    let slot = MarketSlot::new(Layer::L1, 0).expect("slot 0 is aligned");
    let mut orders = Vec::with_capacity(agents.len());
    for a in agents {
        let (side, limit_price) = match a.role {
            Role::Seller => (Side::Sell, *profile.get(&a.id).ok_or_else(|| GameError::MissingAgent(a.id.clone()))?),
            Role::Buyer { limit } => (Side::Buy, limit),
        };
        if a.quantity > 0.0 {
            orders.push(Order {
                agent: a.id.clone(),
                feeder: feeder.clone(),
                slot,
                side,
                quantity: a.quantity,
                limit_price,
                submitted_at: -30,
            });
        }
    }
    let (contracts, _) = match_orders(&orders, slot, &feeder).expect("book built for one feeder and slot");
    let mut table: PayoffTable = agents.iter().map(|a| (a.id.clone(), 0.0)).collect();
    for c in &contracts {
        *table.get_mut(&c.seller).expect("seller is an agent") += c.price * c.quantity;
        *table.get_mut(&c.buyer).expect("buyer is an agent") += (grid.ceiling - c.price) * c.quantity;
    }
    Ok(table)
}

fn payoff_at(agents: &[GameAgent], profile: &mut StrategyProfile, grid: &PriceGrid, player: &AgentId, price: f64) -> f64 {
    let old = profile.insert(player.clone(), price);
    let value = payoff(agents, profile, grid).expect("profile covers every seller")[player];
    if let Some(old) = old {
        profile.insert(player.clone(), old);
    }
    value
}

/// Payoff-maximizing grid price for `player` with everyone else fixed.
/// Ties go to the lowest price.
pub fn best_response(
    player: &AgentId,
    agents: &[GameAgent],
    profile: &StrategyProfile,
    grid: &PriceGrid,
) -> Result<f64, GameError> {
    if !agents.iter().any(|a| &a.id == player && a.role == Role::Seller) {
        return Err(GameError::NotASeller(player.clone()));
    }
    for s in sellers(agents) {
        if !profile.contains_key(s) {
            return Err(GameError::MissingAgent(s.clone()));
        }
    }
    let mut work = profile.clone();
    let mut best = (grid.points[0], f64::NEG_INFINITY);
    for &p in grid.points() {
        let v = payoff_at(agents, &mut work, grid, player, p);
        if v > best.1 + PAYOFF_TOL {
            best = (p, v);
        }
    }
    Ok(best.0)
}

/// Largest payoff gain any seller can get by a unilateral move on the grid.
pub fn max_deviation_gain(agents: &[GameAgent], profile: &StrategyProfile, grid: &PriceGrid) -> Result<f64, GameError> {
    let base = payoff(agents, profile, grid)?;
    let mut work = profile.clone();
    let mut gain: f64 = 0.0;
    for s in sellers(agents) {
        for &p in grid.points() {
            gain = gain.max(payoff_at(agents, &mut work, grid, s, p) - base[s]);
        }
    }
    Ok(gain)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashOutcome {
    pub profile: StrategyProfile,
    pub converged: bool,
    pub rounds: usize,
}

/// Profile with every seller at the grid midpoint.
pub fn midpoint_profile(agents: &[GameAgent], grid: &PriceGrid) -> StrategyProfile {
    sellers(agents).into_iter().map(|s| (s.clone(), grid.midpoint())).collect()
}

/// Best-response iteration in ascending id order from the midpoint profile.
/// A repeated end-of-round profile or an exhausted round budget returns the
/// midpoint profile with `converged = false`.
pub fn find_nash(agents: &[GameAgent], grid: &PriceGrid, max_rounds: usize) -> Result<NashOutcome, GameError> {
    let players = sellers(agents);
    let fallback = NashOutcome { profile: midpoint_profile(agents, grid), converged: false, rounds: 0 };
    if players.is_empty() {
        return Ok(NashOutcome { profile: StrategyProfile::new(), converged: true, rounds: 0 });
    }
    let mut profile = fallback.profile.clone();
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    for round in 1..=max_rounds.max(1) {
        let mut changed = false;
        for &p in &players {
            let br = best_response(p, agents, &profile, grid)?;
            if (br - profile[p]).abs() > 1e-12 {
                profile.insert(p.clone(), br);
                changed = true;
            }
        }
        if !changed {
            if max_deviation_gain(agents, &profile, grid)? <= PAYOFF_TOL {
                return Ok(NashOutcome { profile, converged: true, rounds: round });
            }
            return Ok(NashOutcome { rounds: round, ..fallback });
        }
        let key: Vec<usize> = players.iter().map(|p| grid.index_of(profile[*p]).expect("responses are grid points")).collect();
        if !seen.insert(key) {
            return Ok(NashOutcome { rounds: round, ..fallback });
        }
    }
    Ok(NashOutcome { rounds: max_rounds, ..fallback })
}

/// Reject profiles holding prices that are not grid points.
pub fn check_profile(profile: &StrategyProfile, grid: &PriceGrid) -> Result<(), GameError> {
    for (agent, &price) in profile {
        if grid.index_of(price).is_none() {
            return Err(GameError::OffGrid { agent: agent.clone(), price });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(floor: f64, ceiling: f64) -> PriceGrid {
        PriceGrid::new(floor, ceiling, 0.01).unwrap()
    }

    fn profile(pairs: &[(&str, f64)]) -> StrategyProfile {
        pairs.iter().map(|(a, p)| (AgentId::from(*a), *p)).collect()
    }

    #[test]
    fn grid_points() {
        let g = grid(0.06, 0.10);
        assert_eq!(g.points(), &[0.06, 0.07, 0.08, 0.09, 0.10]);
        assert_eq!(g.midpoint(), 0.08);
        let odd = PriceGrid::new(0.05, 0.125, 0.01).unwrap();
        assert_eq!(*odd.points().last().unwrap(), 0.125);
        assert!((odd.points()[7] - 0.12).abs() < 1e-12);
        assert!(PriceGrid::new(0.1, 0.1, 0.01).is_err());
        assert!(PriceGrid::new(0.0, 1.0, 0.0).is_err());
        assert!(PriceGrid::new(0.0, 1000.0, 0.01).is_err());
    }

    #[test]
    fn payoff_examples() {
        let g = grid(0.05, 0.10);
        let agents = vec![GameAgent::seller("s", 1.0), GameAgent::buyer("b", 1.0, 0.10)];
        let t = payoff(&agents, &profile(&[("s", 0.08)]), &g).unwrap();
        assert!((t[&AgentId::from("s")] - 0.09).abs() < 1e-12);
        assert!((t[&AgentId::from("b")] - 0.01).abs() < 1e-12);

        let t = payoff(&agents, &profile(&[("s", 0.12)]), &g).unwrap();
        assert_eq!(t.values().sum::<f64>(), 0.0);

        let agents = vec![GameAgent::seller("s1", 1.0), GameAgent::seller("s2", 1.0), GameAgent::buyer("b", 1.0, 0.10)];
        let t = payoff(&agents, &profile(&[("s1", 0.06), ("s2", 0.08)]), &g).unwrap();
        assert!((t[&AgentId::from("s1")] - 0.08).abs() < 1e-12);
        assert_eq!(t[&AgentId::from("s2")], 0.0);

        assert_eq!(payoff(&agents, &profile(&[("s1", 0.06)]), &g), Err(GameError::MissingAgent("s2".into())));
    }

    #[test]
    fn best_response_examples() {
        let g = grid(0.05, 0.10);
        let duopoly = vec![GameAgent::seller("s1", 1.0), GameAgent::seller("s2", 1.0), GameAgent::buyer("b", 1.0, 0.10)];
        // s2 loses price ties to s1, so matching s1 earns nothing
        let br = best_response(&"s2".into(), &duopoly, &profile(&[("s1", 0.10), ("s2", 0.10)]), &g).unwrap();
        assert_eq!(br, 0.09);

        let mono = vec![GameAgent::seller("s", 1.0), GameAgent::buyer("b", 1.0, 0.10)];
        assert_eq!(best_response(&"s".into(), &mono, &profile(&[("s", 0.07)]), &g).unwrap(), 0.10);

        let idle = vec![GameAgent::seller("s", 0.0), GameAgent::buyer("b", 1.0, 0.10)];
        assert_eq!(best_response(&"s".into(), &idle, &profile(&[("s", 0.07)]), &g).unwrap(), 0.05);

        assert_eq!(best_response(&"b".into(), &mono, &profile(&[("s", 0.07)]), &g), Err(GameError::NotASeller("b".into())));
    }

    #[test]
    fn bertrand_duopoly_hits_floor() {
        let g = grid(0.06, 0.10);
        let agents = vec![GameAgent::seller("s1", 1.0), GameAgent::seller("s2", 1.0), GameAgent::buyer("b", 1.0, 0.10)];
        let out = find_nash(&agents, &g, DEFAULT_MAX_ROUNDS).unwrap();
        assert!(out.converged);
        assert_eq!(out.profile, profile(&[("s1", 0.06), ("s2", 0.06)]));
    }

    #[test]
    fn monopoly_prices_at_ceiling() {
        let g = grid(0.05, 0.10);
        let agents = vec![GameAgent::seller("s", 1.0), GameAgent::buyer("b", 1.0, 0.10)];
        let out = find_nash(&agents, &g, DEFAULT_MAX_ROUNDS).unwrap();
        assert!(out.converged);
        assert_eq!(out.profile, profile(&[("s", 0.10)]));
    }

    #[test]
    fn no_sellers_is_vacuous() {
        let g = grid(0.05, 0.10);
        let out = find_nash(&[GameAgent::buyer("b", 1.0, 0.10)], &g, 5).unwrap();
        assert!(out.converged);
        assert!(out.profile.is_empty());
    }

    #[test]
    fn off_grid_profiles_rejected() {
        let g = grid(0.05, 0.10);
        assert!(check_profile(&profile(&[("s", 0.08)]), &g).is_ok());
        assert!(matches!(check_profile(&profile(&[("s", 0.085)]), &g), Err(GameError::OffGrid { .. })));
    }

    fn matched_volume(agents: &[GameAgent], prof: &StrategyProfile, seller: &AgentId) -> f64 {
        let slot = MarketSlot::new(Layer::L1, 0).unwrap();
        let feeder = FeederId::new("f");
        let orders: Vec<Order> = agents
            .iter()
            .filter(|a| a.quantity > 0.0)
            .map(|a| {
                let (side, limit_price) = match a.role {
                    Role::Seller => (Side::Sell, prof[&a.id]),
                    Role::Buyer { limit } => (Side::Buy, limit),
                };
                Order { agent: a.id.clone(), feeder: feeder.clone(), slot, side, quantity: a.quantity, limit_price, submitted_at: -30 }
            })
            .collect();
        let (contracts, _) = match_orders(&orders, slot, &feeder).unwrap();
        contracts.iter().filter(|c| &c.seller == seller).map(|c| c.quantity).sum()
    }

    fn game() -> impl Strategy<Value = Vec<GameAgent>> {
        (
            prop::collection::vec(0u32..=30, 1..4),
            prop::collection::vec((1u32..=30, 0u32..=5), 0..3),
        )
            .prop_map(|(s, b)| {
                let mut agents: Vec<GameAgent> =
                    s.iter().enumerate().map(|(i, q)| GameAgent::seller(format!("s{i}"), *q as f64 / 10.0)).collect();
                agents.extend(
                    b.iter().enumerate().map(|(i, (q, l))| GameAgent::buyer(format!("b{i}"), *q as f64 / 10.0, 0.10 + *l as f64 * 0.01)),
                );
                agents
            })
    }

    proptest! {
        #[test]
        fn converged_profiles_are_equilibria(agents in game()) {
            let g = grid(0.05, 0.15);
            let out = find_nash(&agents, &g, DEFAULT_MAX_ROUNDS).unwrap();
            check_profile(&out.profile, &g).unwrap();
            if out.converged {
                prop_assert!(max_deviation_gain(&agents, &out.profile, &g).unwrap() <= 1e-9);
                // revenue plus net metering on the unmatched rest never falls
                // below selling everything at the net-metering floor
                let table = payoff(&agents, &out.profile, &g).unwrap();
                for a in agents.iter().filter(|a| a.role == Role::Seller) {
                    let matched = matched_volume(&agents, &out.profile, &a.id);
                    let total = table[&a.id] + g.floor * (a.quantity - matched);
                    prop_assert!(total >= g.floor * a.quantity - 1e-12);
                }
            } else {
                prop_assert_eq!(out.profile, midpoint_profile(&agents, &g));
            }
        }

        #[test]
        fn best_response_is_idempotent(agents in game(), start in 0usize..11) {
            let g = grid(0.05, 0.15);
            let mut prof = midpoint_profile(&agents, &g);
            let first = prof.keys().next().cloned().unwrap();
            prof.insert(first.clone(), g.points()[start]);
            let br = best_response(&first, &agents, &prof, &g).unwrap();
            prop_assert!(g.index_of(br).is_some());
            prof.insert(first.clone(), br);
            prop_assert_eq!(best_response(&first, &agents, &prof, &g).unwrap(), br);
        }

        #[test]
        fn deterministic(agents in game()) {
            let g = grid(0.05, 0.15);
            prop_assert_eq!(find_nash(&agents, &g, 50).unwrap(), find_nash(&agents, &g, 50).unwrap());
        }
    }
}
