//! Exogenous-price ISO stub for the 15-minute ancillary market.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{quantize_kwh, MarketSlot, Money, VppId};
use crate::ledger::{LedgerEntry, Party, Reason};
use crate::vpp::AncillaryBid;

/// Default penalty rate as a multiple of the clearing price.
pub const DEFAULT_PENALTY_MULTIPLIER: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum AncillaryError {
    #[error("negative measured delivery {measured} for {vpp} in slot {slot}")]
    NegativeMeasurement { vpp: VppId, slot: MarketSlot, measured: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AncillaryAward {
    pub vpp: VppId,
    pub slot: MarketSlot,
    pub bid_quantity: f64,
    pub offer_price: f64,
    /// kWh.
    pub awarded: f64,
    /// $/kWh, paid uniformly to every accepted bid.
    pub clearing_price: f64,
}

/// Merit-order, pay-as-cleared acceptance with a capacity cap. Bids priced
/// above the clearing price or with no quantity are rejected; the last
/// accepted bid may be partially filled.
pub fn clear_bids(bids: &[AncillaryBid], slot: MarketSlot, clearing_price: f64, capacity: f64) -> Vec<AncillaryAward> {
    let mut eligible: Vec<&AncillaryBid> =
        bids.iter().filter(|b| b.slot == slot && b.quantity > 0.0 && b.offer_price <= clearing_price).collect();
    eligible.sort_by(|a, b| a.offer_price.total_cmp(&b.offer_price).then_with(|| a.vpp.cmp(&b.vpp)));
    let mut left = capacity.max(0.0);
    let mut awards = Vec::new();
    for b in eligible {
        let awarded = b.quantity.min(left);
        if awarded <= 0.0 {
            break;
        }
        left = (left - awarded).max(0.0);
        awards.push(AncillaryAward {
            vpp: b.vpp.clone(),
            slot,
            bid_quantity: b.quantity,
            offer_price: b.offer_price,
            awarded,
            clearing_price,
        });
    }
    awards
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub vpp: VppId,
    pub slot: MarketSlot,
    pub awarded: f64,
    pub clearing_price: f64,
    pub measured: f64,
    /// Net Layer-III energy credited to the VPP (bought minus sold).
    pub l3_net: f64,
    /// max(0, measured + l3_net).
    pub delivered: f64,
    /// Delivered energy that earns the clearing price: min(delivered, awarded).
    pub paid: f64,
    pub shortfall: f64,
}

pub fn verify_delivery(award: &AncillaryAward, measured: f64, l3_net: f64) -> Result<DeliveryRecord, AncillaryError> {
    if measured < 0.0 {
        return Err(AncillaryError::NegativeMeasurement { vpp: award.vpp.clone(), slot: award.slot, measured });
    }
    let delivered = quantize_kwh((measured + l3_net).max(0.0));
    let paid = delivered.min(award.awarded);
    Ok(DeliveryRecord {
        vpp: award.vpp.clone(),
        slot: award.slot,
        awarded: award.awarded,
        clearing_price: award.clearing_price,
        measured,
        l3_net,
        delivered,
        paid,
        shortfall: quantize_kwh((award.awarded - delivered).max(0.0)),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assessment {
    pub revenue: Money,
    pub penalty: Money,
    pub entries: Vec<LedgerEntry>,
}

/// Revenue ISO → VPP for paid energy and a penalty VPP → ISO of
/// `penalty_rate · shortfall`.
pub fn assess_penalty(record: &DeliveryRecord, penalty_rate: f64) -> Assessment {
    let revenue = Money::from_dollars(record.clearing_price * record.paid);
    let penalty = Money::from_dollars(penalty_rate * record.shortfall);
    let vpp = Party::Vpp(record.vpp.clone());
    let start = record.slot.start();
    let mut entries = Vec::new();
    if !revenue.is_zero() {
        entries.push(LedgerEntry { slot_start: start, payer: Party::Iso, payee: vpp.clone(), amount: revenue, reason: Reason::AncillaryRevenue });
    }
    if !penalty.is_zero() {
        entries.push(LedgerEntry { slot_start: start, payer: vpp, payee: Party::Iso, amount: penalty, reason: Reason::AncillaryPenalty });
    }
    Assessment { revenue, penalty, entries }
}
