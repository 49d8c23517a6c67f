//! Feeder-level 30-minute-ahead P2P exchange: bilateral matching of closed
//! order books, overspill reporting and after-the-fact settlement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{quantize_kwh, AgentId, FeederId, Layer, MarketSlot, Money};
use crate::ledger::{LedgerEntry, Party, Reason};

/// Orders close this many minutes before delivery.
pub const ORDER_LEAD_MINUTES: i64 = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Buy,
    Sell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Order {
    pub agent: AgentId,
    pub feeder: FeederId,
    pub slot: MarketSlot,
    pub side: Side,
    pub quantity: f64,
    pub limit_price: f64,
    pub submitted_at: i64,
}

impl Order {
    pub fn validate(&self, ceiling: f64) -> Result<(), ExchangeError> {
        if self.slot.layer() != Layer::L1 {
            return Err(ExchangeError::InvalidOrder { agent: self.agent.clone(), why: "order slot is not an L1 slot".into() });
        }
        if self.submitted_at > self.slot.start() - ORDER_LEAD_MINUTES {
            return Err(ExchangeError::InvalidOrder {
                agent: self.agent.clone(),
                why: format!("submitted at {} after gate closure {}", self.submitted_at, self.slot.start() - ORDER_LEAD_MINUTES),
            });
        }
        if !(self.quantity > 0.0) || !self.quantity.is_finite() {
            return Err(ExchangeError::InvalidOrder { agent: self.agent.clone(), why: format!("quantity {} not positive", self.quantity) });
        }
        if !(0.0..=ceiling + 1e-12).contains(&self.limit_price) {
            return Err(ExchangeError::InvalidOrder {
                agent: self.agent.clone(),
                why: format!("limit price {} outside [0, {ceiling}]", self.limit_price),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contract {
    pub id: u64,
    pub seller: AgentId,
    pub buyer: AgentId,
    pub feeder: FeederId,
    pub slot: MarketSlot,
    pub quantity: f64,
    pub price: f64,
}

/// Quantities left after matching one feeder's book.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverspillReport {
    pub feeder: FeederId,
    pub slot: MarketSlot,
    pub unmatched_sell: f64,
    pub unmatched_buy: f64,
    /// Unfilled remainder per order, signed: positive for sells, negative for buys.
    pub unmatched_by_agent: BTreeMap<AgentId, f64>,
}

impl OverspillReport {
    pub fn empty(feeder: FeederId, slot: MarketSlot) -> Self {
        Self { feeder, slot, unmatched_sell: 0.0, unmatched_buy: 0.0, unmatched_by_agent: BTreeMap::new() }
    }

    /// Signed net position: unmatched sell minus unmatched buy.
    pub fn net(&self) -> f64 {
        quantize_kwh(self.unmatched_sell - self.unmatched_buy)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ExchangeError {
    #[error("order from {agent} is for {got_feeder}/{got_slot}, book is {feeder}/{slot}")]
    ForeignOrder { agent: AgentId, got_feeder: FeederId, got_slot: MarketSlot, feeder: FeederId, slot: MarketSlot },
    #[error("invalid order from {agent}: {why}")]
    InvalidOrder { agent: AgentId, why: String },
    #[error("no delivery measurement for contracted agent {0}")]
    MissingMeasurement(AgentId),
}

/// Price-priority greedy matching with midpoint pricing and partial fills.
///
/// Contract ids are numbered from 0 in match order; callers renumber them
/// into a global sequence.
pub fn match_orders(
    orders: &[Order],
    slot: MarketSlot,
    feeder: &FeederId,
) -> Result<(Vec<Contract>, OverspillReport), ExchangeError> {
    for o in orders {
        if o.slot != slot || &o.feeder != feeder {
            return Err(ExchangeError::ForeignOrder {
                agent: o.agent.clone(),
                got_feeder: o.feeder.clone(),
                got_slot: o.slot,
                feeder: feeder.clone(),
                slot,
            });
        }
    }
    let mut sells: Vec<(&Order, f64)> = orders.iter().filter(|o| o.side == Side::Sell).map(|o| (o, o.quantity)).collect();
    let mut buys: Vec<(&Order, f64)> = orders.iter().filter(|o| o.side == Side::Buy).map(|o| (o, o.quantity)).collect();
    sells.sort_by(|a, b| a.0.limit_price.total_cmp(&b.0.limit_price).then_with(|| a.0.agent.cmp(&b.0.agent)));
    buys.sort_by(|a, b| b.0.limit_price.total_cmp(&a.0.limit_price).then_with(|| a.0.agent.cmp(&b.0.agent)));

    let mut contracts = Vec::new();
    for (sell, sell_left) in sells.iter_mut() {
        for (buy, buy_left) in buys.iter_mut() {
            if *sell_left <= 0.0 {
                break;
            }
            if buy.limit_price < sell.limit_price {
                break;
            }
            if *buy_left <= 0.0 || buy.agent == sell.agent {
                continue;
            }
            let q = sell_left.min(*buy_left);
            *sell_left = quantize_kwh(*sell_left - q);
            *buy_left = quantize_kwh(*buy_left - q);
            contracts.push(Contract {
                id: contracts.len() as u64,
                seller: sell.agent.clone(),
                buyer: buy.agent.clone(),
                feeder: feeder.clone(),
                slot,
                quantity: q,
                price: 0.5 * (sell.limit_price + buy.limit_price),
            });
        }
    }

    let mut report = OverspillReport::empty(feeder.clone(), slot);
    for (o, left) in &sells {
        if *left > 0.0 {
            report.unmatched_sell += left;
            *report.unmatched_by_agent.entry(o.agent.clone()).or_default() += left;
        }
    }
    for (o, left) in &buys {
        if *left > 0.0 {
            report.unmatched_buy += left;
            *report.unmatched_by_agent.entry(o.agent.clone()).or_default() -= left;
        }
    }
    report.unmatched_sell = quantize_kwh(report.unmatched_sell);
    report.unmatched_buy = quantize_kwh(report.unmatched_buy);
    Ok((contracts, report))
}

/// Signed net overspill per feeder.
pub fn compute_overspill(reports: &[OverspillReport]) -> BTreeMap<FeederId, f64> {
    let mut out = BTreeMap::new();
    for r in reports {
        *out.entry(r.feeder.clone()).or_insert(0.0) += r.net();
    }
    out
}

/// Utility tariffs for one L1 slot, $/kWh.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tariff {
    pub retail: f64,
    pub net_metering: f64,
}

/// One agent's planned non-contract exchange with the utility and its measured
/// net export for a delivered slot (kWh).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotPosition {
    pub agent: AgentId,
    pub planned_utility_sell: f64,
    pub planned_utility_buy: f64,
    pub measured_net_export: f64,
}

/// Net contracted export per agent (sold minus bought), kWh.
pub fn contracted_net(contracts: &[Contract]) -> BTreeMap<AgentId, f64> {
    let mut out: BTreeMap<AgentId, f64> = BTreeMap::new();
    for c in contracts {
        *out.entry(c.seller.clone()).or_default() += c.quantity;
        *out.entry(c.buyer.clone()).or_default() -= c.quantity;
    }
    out
}

/// Measured deviation from the full planned position: contracts plus planned
/// utility exchange.
pub fn deviation(position: &SlotPosition, contracted: f64) -> f64 {
    quantize_kwh(
        position.measured_net_export - (contracted + position.planned_utility_sell - position.planned_utility_buy),
    )
}

/// Settle a delivered slot.
///
/// Contracts pay `quantity·price` buyer → seller. Planned utility purchases
/// pay retail, planned exports earn net metering. Any measured deviation
/// from the planned position settles with the utility: shortfall at retail,
/// surplus at net metering.
pub fn settle_slot(
    slot: MarketSlot,
    contracts: &[Contract],
    positions: &[SlotPosition],
    tariff: Tariff,
) -> Result<Vec<LedgerEntry>, ExchangeError> {
    let by_agent: BTreeMap<&AgentId, &SlotPosition> = positions.iter().map(|p| (&p.agent, p)).collect();
    let start = slot.start();
    let mut entries = Vec::new();
    let mut push = |payer: Party, payee: Party, dollars: f64, reason: Reason| {
        let amount = Money::from_dollars(dollars);
        if amount.nanos() > 0 {
            entries.push(LedgerEntry { slot_start: start, payer, payee, amount, reason });
        }
    };
    for c in contracts {
        for agent in [&c.seller, &c.buyer] {
            if !by_agent.contains_key(agent) {
                return Err(ExchangeError::MissingMeasurement(agent.clone()));
            }
        }
        push(Party::Agent(c.buyer.clone()), Party::Agent(c.seller.clone()), c.quantity * c.price, Reason::P2pContract);
    }
    let contracted = contracted_net(contracts);
    for p in positions {
        let agent = Party::Agent(p.agent.clone());
        push(agent.clone(), Party::Utility, p.planned_utility_buy * tariff.retail, Reason::UtilityPurchase);
        push(Party::Utility, agent.clone(), p.planned_utility_sell * tariff.net_metering, Reason::NetMetering);
        let dev = deviation(p, contracted.get(&p.agent).copied().unwrap_or(0.0));
        if dev < 0.0 {
            push(agent, Party::Utility, -dev * tariff.retail, Reason::Deviation);
        } else if dev > 0.0 {
            push(Party::Utility, agent, dev * tariff.net_metering, Reason::Deviation);
        }
    }
    Ok(entries)
}
