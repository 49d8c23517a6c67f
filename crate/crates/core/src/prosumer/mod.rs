//! Per-microgrid rolling-horizon dispatch and Layer-I order generation.

mod mpc;

pub use mpc::{build_mpc_problem, objective_value, solve_mpc, MpcProblem, P2pCapPolicy};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{quantize_kwh, AgentId, FeederId, MarketSlot, PriceSeries};
use crate::exchange::{Contract, Order, Side, ORDER_LEAD_MINUTES};

/// Length of one MPC step, hours.
pub const STEP_HOURS: f64 = 0.5;

/// Default MPC horizon: 12 h of 30-minute slots.
pub const DEFAULT_HORIZON_SLOTS: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageParams {
    /// kWh.
    pub capacity: f64,
    /// kW.
    pub charge_rate: f64,
    /// kW.
    pub discharge_rate: f64,
    pub charge_efficiency: f64,
    pub discharge_efficiency: f64,
}

impl StorageParams {
    pub fn none() -> Self {
        Self { capacity: 0.0, charge_rate: 0.0, discharge_rate: 0.0, charge_efficiency: 1.0, discharge_efficiency: 1.0 }
    }

    pub fn has_battery(&self) -> bool {
        self.capacity > 0.0
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite = [self.capacity, self.charge_rate, self.discharge_rate].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !finite {
            return Err("capacity and rates must be finite and nonnegative".into());
        }
        for (name, eta) in [("charge_efficiency", self.charge_efficiency), ("discharge_efficiency", self.discharge_efficiency)] {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(format!("{name} must lie in (0, 1], got {eta}"));
            }
        }
        if self.has_battery() && (self.charge_rate <= 0.0 || self.discharge_rate <= 0.0) {
            return Err("a battery needs positive charge and discharge rates".into());
        }
        if !self.has_battery() && (self.charge_rate > 0.0 || self.discharge_rate > 0.0) {
            return Err("rates must be zero without a battery".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsumerState {
    pub id: AgentId,
    pub feeder: FeederId,
    pub storage: StorageParams,
    /// State of charge, kWh.
    pub soc: f64,
    pub committed_contracts: Vec<Contract>,
}

/// kWh per L1 slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastSet {
    pub demand: Vec<f64>,
    pub generation: Vec<f64>,
}

impl ForecastSet {
    pub fn horizon(&self) -> usize {
        self.demand.len()
    }
}

/// The four price streams the dispatch objective uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcPrices {
    pub sell_p2p: PriceSeries,
    pub sell_net_metering: PriceSeries,
    pub buy_p2p: PriceSeries,
    pub buy_utility: PriceSeries,
}

impl MpcPrices {
    pub fn shortest(&self) -> usize {
        [&self.sell_p2p, &self.sell_net_metering, &self.buy_p2p, &self.buy_utility].iter().map(|s| s.len()).min().unwrap_or(0)
    }
}

/// Solved rolling-horizon decision, kWh per slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchPlan {
    pub first_slot: MarketSlot,
    pub sell_p2p: Vec<f64>,
    pub sell_utility: Vec<f64>,
    pub buy_p2p: Vec<f64>,
    pub buy_utility: Vec<f64>,
    pub charge: Vec<f64>,
    pub discharge: Vec<f64>,
    /// Projected state of charge, length N+1.
    pub soc: Vec<f64>,
    /// Objective value, $.
    pub objective: f64,
    pub demand: Vec<f64>,
    pub generation: Vec<f64>,
    pub discharge_efficiency: f64,
}

impl DispatchPlan {
    pub fn horizon(&self) -> usize {
        self.sell_p2p.len()
    }

    /// Supply minus use in slot `t`; zero for a balanced plan.
    pub fn balance_residual(&self, t: usize) -> f64 {
        self.generation[t] + self.buy_p2p[t] + self.buy_utility[t] + self.discharge_efficiency * self.discharge[t]
            - self.demand[t]
            - self.sell_p2p[t]
            - self.sell_utility[t]
            - self.charge[t]
    }

    /// Planned net export at the point of interconnection in slot `t`.
    pub fn net_export(&self, t: usize) -> f64 {
        self.sell_p2p[t] + self.sell_utility[t] - self.buy_p2p[t] - self.buy_utility[t]
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MpcError {
    #[error("horizon must be at least one slot")]
    EmptyHorizon,
    #[error("{what} covers {got} slots, horizon needs {need}")]
    ShortSeries { what: &'static str, got: usize, need: usize },
    #[error("invalid storage: {0}")]
    Storage(String),
    #[error("committed contract {id} for slot starting {slot_start} lies outside the horizon")]
    CommitmentOutsideHorizon { id: u64, slot_start: i64 },
    #[error("infeasible commitments in slot {index} (starting at minute {slot_start})")]
    Infeasible { index: usize, slot_start: i64 },
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("plan and prices disagree on horizon: plan {plan}, prices {prices}")]
    LengthMismatch { plan: usize, prices: usize },
    #[error("measured state of charge {soc} outside [0, {capacity}]")]
    SocOutOfBounds { soc: f64, capacity: f64 },
}

/// Measured storage operation over a completed slot.
#[derive(Clone, Debug, PartialEq)]
pub struct RealizedSlot {
    pub slot: MarketSlot,
    pub charge: f64,
    pub discharge: f64,
}

/// Advance the state by one completed slot using measured storage flows.
pub fn roll_horizon(state: &ProsumerState, realized: &RealizedSlot) -> Result<ProsumerState, MpcError> {
    let s = &state.storage;
    let soc = state.soc + s.charge_efficiency * realized.charge - realized.discharge;
    let tol = 1e-9;
    if soc < -tol || soc > s.capacity + tol {
        return Err(MpcError::SocOutOfBounds { soc, capacity: s.capacity });
    }
    let mut next = state.clone();
    next.soc = soc.clamp(0.0, s.capacity);
    next.committed_contracts.retain(|c| c.slot.end() > realized.slot.end());
    Ok(next)
}

/// Limit prices for the orders derived from a plan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrderPrices {
    pub sell: f64,
    pub buy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedOrders {
    pub orders: Vec<Order>,
    /// Plan both sells and buys P2P in the same slot.
    pub wash_trade: bool,
}

/// Turn the first step of a plan into at most one sell and one buy order,
/// placed at the gate closure 30 minutes before delivery.
pub fn plan_to_orders(
    plan: &DispatchPlan,
    agent: &AgentId,
    feeder: &FeederId,
    next_slot: MarketSlot,
    prices: OrderPrices,
) -> PlannedOrders {
    let submitted_at = next_slot.start() - ORDER_LEAD_MINUTES;
    let mut orders = Vec::new();
    let sell = quantize_kwh(plan.sell_p2p.first().copied().unwrap_or(0.0));
    let buy = quantize_kwh(plan.buy_p2p.first().copied().unwrap_or(0.0));
    for (side, quantity, limit_price) in [(Side::Sell, sell, prices.sell), (Side::Buy, buy, prices.buy)] {
        if quantity > 0.0 {
            orders.push(Order { agent: agent.clone(), feeder: feeder.clone(), slot: next_slot, side, quantity, limit_price, submitted_at });
        }
    }
    PlannedOrders { wash_trade: sell > 0.0 && buy > 0.0, orders }
}
