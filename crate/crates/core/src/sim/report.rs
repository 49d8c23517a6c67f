//! Run results and the derived summary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::events::Event;
use super::scenario::Flags;
use crate::coop::VppTrade;
use crate::domain::{round_report_dollars, AgentId, FeederId, Money, VppId};
use crate::exchange::{Contract, Order};
use crate::ledger::{Party, Reason, SettlementLedger};
use crate::powerflow::ViolationKind;
use crate::vpp::AncillaryBid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Full,
    /// Utility-only trading: no P2P, VPP or L3 participation.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AncillaryRecord {
    pub vpp: VppId,
    pub slot_start: i64,
    pub bid_quantity: f64,
    pub offer_price: f64,
    pub awarded: f64,
    pub clearing_price: f64,
    /// Pool energy measured over the slot, kWh.
    pub measured: f64,
    /// L3 bought minus sold.
    pub l3_net: f64,
    pub delivered: f64,
    pub shortfall: f64,
    /// Pool energy routed to the ISO or to other VPPs.
    pub sourced: f64,
    pub revenue: Money,
    pub penalty: Money,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub step_start: i64,
    pub feeder: FeederId,
    pub node: String,
    pub kind: ViolationKind,
    pub v: f64,
    pub excursion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub step_start: i64,
    pub agent: AgentId,
    pub kind: ViolationKind,
    pub kw: f64,
    /// Energy actually curtailed or shed in the following step, kWh.
    pub applied_kwh: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashRecord {
    pub feeder: FeederId,
    pub slot_start: i64,
    pub converged: bool,
    pub rounds: usize,
}

/// Per-L1-slot energy balance, kWh. `error` is the residual of
/// generation + purchases + shed − demand − exports − sourced − curtailment − storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountingRecord {
    pub slot_start: i64,
    pub generation: f64,
    pub utility_purchases: f64,
    pub load_shed: f64,
    pub demand: f64,
    pub net_metered_exports: f64,
    pub ancillary_delivered: f64,
    pub curtailment: f64,
    pub storage_delta: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub mode: RunMode,
    pub flags: Flags,
    pub prosumers: Vec<AgentId>,
    pub vpps: Vec<VppId>,
    pub ledger: SettlementLedger,
    pub orders: Vec<Order>,
    pub contracts: Vec<Contract>,
    pub bids: Vec<AncillaryBid>,
    pub ancillary: Vec<AncillaryRecord>,
    pub l3_trades: Vec<VppTrade>,
    pub violations: Vec<ViolationRecord>,
    pub signals: Vec<SignalRecord>,
    pub nash: Vec<NashRecord>,
    /// (agent, slot start) pairs whose plan bought and sold P2P at once.
    pub wash_trades: Vec<(AgentId, i64)>,
    pub events: Vec<Event>,
    pub accounting: Vec<AccountingRecord>,
    /// Largest per-slot energy balance residual over every solved plan, kWh.
    pub max_plan_residual: f64,
}

impl RunReport {
    /// Net amount the prosumer paid over the run.
    pub fn cost_of(&self, agent: &AgentId) -> Money {
        -self.ledger.balance_of(&Party::Agent(agent.clone()))
    }

    pub fn costs(&self) -> BTreeMap<AgentId, Money> {
        self.prosumers.iter().map(|a| (a.clone(), self.cost_of(a))).collect()
    }

    pub fn total_penalties(&self) -> Money {
        self.ancillary.iter().map(|r| r.penalty).sum()
    }

    pub fn ancillary_revenue(&self) -> Money {
        self.ancillary.iter().map(|r| r.revenue).sum()
    }

    pub fn deviation_settlements(&self) -> Money {
        self.ledger.total_for(Reason::Deviation)
    }

    pub fn p2p_volume(&self) -> f64 {
        self.contracts.iter().map(|c| c.quantity).sum()
    }

    pub fn l3_volume(&self) -> f64 {
        self.l3_trades.iter().map(|t| t.quantity).sum()
    }

    pub fn curtailment(&self) -> f64 {
        self.accounting.iter().map(|a| a.curtailment).sum()
    }

    pub fn load_shed(&self) -> f64 {
        self.accounting.iter().map(|a| a.load_shed).sum()
    }

    pub fn max_accounting_error(&self) -> f64 {
        self.accounting.iter().map(|a| a.error.abs()).fold(0.0, f64::max)
    }
}

/// Value rounded to 9 significant digits.
pub fn sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn dollars(m: Money) -> f64 {
    sig9(round_report_dollars(m.dollars()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsumerSummary {
    pub id: AgentId,
    pub cost: f64,
    pub baseline_cost: f64,
    pub savings: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VppSummary {
    pub id: VppId,
    pub revenue: f64,
    pub penalties: f64,
    pub l3_bought_kwh: f64,
    pub l3_sold_kwh: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub cost: f64,
    pub baseline_cost: f64,
    pub savings: f64,
    pub penalties: f64,
    pub ancillary_revenue: f64,
    pub deviation_settlements: f64,
    pub p2p_volume_kwh: f64,
    pub l3_volume_kwh: f64,
    pub curtailment_kwh: f64,
    pub load_shed_kwh: f64,
    pub ledger_signed_total: f64,
    pub accounting_max_error_kwh: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotRef {
    pub feeder: FeederId,
    pub slot_start: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashSummary {
    pub games: usize,
    pub converged: usize,
    pub fallbacks: Vec<SlotRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub mode: RunMode,
    pub flags: Flags,
    pub prosumers: Vec<ProsumerSummary>,
    pub vpps: Vec<VppSummary>,
    pub totals: Totals,
    pub nash: NashSummary,
    pub violations: usize,
    pub wash_trades: usize,
}

impl Summary {
    /// Summary of `run` with savings measured against `baseline`.
    pub fn build(run: &RunReport, baseline: &RunReport) -> Summary {
        let base = baseline.costs();
        let prosumers: Vec<ProsumerSummary> = run
            .prosumers
            .iter()
            .map(|a| {
                let cost = run.cost_of(a);
                let b = base.get(a).copied().unwrap_or(Money::ZERO);
                ProsumerSummary { id: a.clone(), cost: dollars(cost), baseline_cost: dollars(b), savings: dollars(b - cost) }
            })
            .collect();
        let vpps = run
            .vpps
            .iter()
            .map(|v| {
                let mine = |r: &&AncillaryRecord| &r.vpp == v;
                VppSummary {
                    id: v.clone(),
                    revenue: dollars(run.ancillary.iter().filter(mine).map(|r| r.revenue).sum()),
                    penalties: dollars(run.ancillary.iter().filter(mine).map(|r| r.penalty).sum()),
                    l3_bought_kwh: sig9(run.l3_trades.iter().filter(|t| &t.buyer == v).map(|t| t.quantity).sum()),
                    l3_sold_kwh: sig9(run.l3_trades.iter().filter(|t| &t.seller == v).map(|t| t.quantity).sum()),
                }
            })
            .collect();
        let cost: Money = run.prosumers.iter().map(|a| run.cost_of(a)).sum();
        let baseline_cost: Money = base.values().copied().sum();
        let totals = Totals {
            cost: dollars(cost),
            baseline_cost: dollars(baseline_cost),
            savings: dollars(baseline_cost - cost),
            penalties: dollars(run.total_penalties()),
            ancillary_revenue: dollars(run.ancillary_revenue()),
            deviation_settlements: dollars(run.deviation_settlements()),
            p2p_volume_kwh: sig9(run.p2p_volume()),
            l3_volume_kwh: sig9(run.l3_volume()),
            curtailment_kwh: sig9(run.curtailment()),
            load_shed_kwh: sig9(run.load_shed()),
            ledger_signed_total: sig9(run.ledger.signed_total().dollars()),
            accounting_max_error_kwh: sig9(run.max_accounting_error()),
        };
        let nash = NashSummary {
            games: run.nash.len(),
            converged: run.nash.iter().filter(|n| n.converged).count(),
            fallbacks: run
                .nash
                .iter()
                .filter(|n| !n.converged)
                .map(|n| SlotRef { feeder: n.feeder.clone(), slot_start: n.slot_start })
                .collect(),
        };
        Summary {
            seed: run.seed,
            mode: run.mode,
            flags: run.flags,
            prosumers,
            vpps,
            totals,
            nash,
            violations: run.violations.len(),
            wash_trades: run.wash_trades.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(sig9(0.1 + 0.2), 0.3);
        assert_eq!(sig9(123456789.4), 123456789.0);
        assert_eq!(sig9(1.0 / 3.0), 0.333333333);
        assert_eq!(sig9(-2.0e-12 / 3.0), -6.66666667e-13);
        assert_eq!(sig9(0.0), 0.0);
    }
}
