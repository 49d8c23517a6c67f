//! VPP aggregator: Layer-I overspill aggregation, ancillary bidding,
//! delivery monitoring and Layer-III requests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ancillary::AncillaryAward;
use crate::coop::VppPosition;
use crate::domain::{quantize_kwh, FeederId, Layer, MarketSlot, Money, VppId};
use crate::exchange::OverspillReport;

/// Bids are submitted this many minutes before the L2 slot starts.
pub const BID_LEAD_MINUTES: i64 = 15;

/// Default offer price as a fraction of the price forecast.
pub const DEFAULT_OFFER_FRACTION: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum VppError {
    #[error("VPP {vpp} has no overspill report for feeder {feeder}")]
    MissingFeeder { vpp: VppId, feeder: FeederId },
    #[error("negative overspill forecast {0}")]
    NegativeForecast(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VppState {
    pub id: VppId,
    pub feeders: Vec<FeederId>,
    pub safety_k: f64,
    pub offer_fraction: f64,
    pub open_awards: Vec<AncillaryAward>,
    pub revenue: Money,
    pub penalties: Money,
}

impl VppState {
    pub fn new(id: VppId, feeders: Vec<FeederId>, safety_k: f64, offer_fraction: f64) -> Self {
        Self { id, feeders, safety_k, offer_fraction, open_awards: Vec::new(), revenue: Money::ZERO, penalties: Money::ZERO }
    }

    pub fn award_for(&self, l2: MarketSlot) -> Option<&AncillaryAward> {
        self.open_awards.iter().find(|a| a.slot == l2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverspillForecast {
    /// Sellable energy per L2 slot, kWh.
    pub per_l2_slot: f64,
    /// Sum of positive feeder nets over the L1 slot.
    pub positive_total: f64,
    /// Sum of negative feeder nets, kept as a positive number.
    pub internal_deficit: f64,
    pub by_feeder: BTreeMap<FeederId, f64>,
}

/// Sum positive feeder net overspill for the parent L1 slot and split it
/// evenly over its two L2 slots. Feeders in deficit add nothing to the
/// sellable amount and are reported separately.
pub fn aggregate_overspill(
    vpp: &VppState,
    reports: &BTreeMap<FeederId, OverspillReport>,
) -> Result<OverspillForecast, VppError> {
    let mut by_feeder = BTreeMap::new();
    let (mut pos, mut neg) = (0.0, 0.0);
    for f in &vpp.feeders {
        let r = reports.get(f).ok_or_else(|| VppError::MissingFeeder { vpp: vpp.id.clone(), feeder: f.clone() })?;
        let net = r.net();
        if net > 0.0 {
            pos += net;
        } else {
            neg -= net;
        }
        by_feeder.insert(f.clone(), net);
    }
    let split = (Layer::L1.duration() / Layer::L2.duration()) as f64;
    Ok(OverspillForecast { per_l2_slot: pos / split, positive_total: pos, internal_deficit: neg, by_feeder })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AncillaryBid {
    pub vpp: VppId,
    pub slot: MarketSlot,
    pub quantity: f64,
    pub offer_price: f64,
    pub submitted_at: i64,
}

/// Risk-margined bid: `max(0, forecast − k·σ)` offered at a fraction of the
/// price forecast. A zero quantity means no submission.
pub fn make_ancillary_bid(
    vpp: &VppState,
    slot: MarketSlot,
    forecast: f64,
    sigma: f64,
    price_forecast: f64,
) -> Result<AncillaryBid, VppError> {
    if forecast < 0.0 {
        return Err(VppError::NegativeForecast(forecast));
    }
    let quantity = quantize_kwh((forecast - vpp.safety_k * sigma).max(0.0)).min(forecast);
    Ok(AncillaryBid {
        vpp: vpp.id.clone(),
        slot,
        quantity,
        offer_price: vpp.offer_fraction * price_forecast,
        submitted_at: slot.start() - BID_LEAD_MINUTES,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub committed: f64,
    pub measured: f64,
    /// Measured so far plus the forecast for the remaining steps.
    pub projected: f64,
    pub shortfall: f64,
}

pub fn monitor_delivery(committed: f64, measured_steps: &[f64], remaining_forecast: &[f64]) -> DeviationReport {
    let measured: f64 = measured_steps.iter().sum();
    let projected = measured + remaining_forecast.iter().sum::<f64>();
    DeviationReport { committed, measured, projected, shortfall: quantize_kwh((committed - projected).max(0.0)) }
}

/// Surplus a VPP can safely offer to others: projected delivery beyond its
/// commitment less a `margin` held for forecast error.
pub fn deliverable_surplus(report: &DeviationReport, margin: f64) -> f64 {
    quantize_kwh((report.projected - report.committed - margin).max(0.0))
}

/// Deficit position for the next L3 slot, or `None` when there is no
/// shortfall or the slot no longer falls inside the commitment window.
pub fn request_l3(vpp: &VppId, shortfall: f64, l3_slot: MarketSlot, window: MarketSlot) -> Option<VppPosition> {
    if shortfall <= 0.0 || !window.contains(&l3_slot) {
        return None;
    }
    Some(VppPosition::deficit(vpp.clone(), l3_slot, shortfall))
}
