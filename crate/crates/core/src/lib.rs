//! Deterministic simulator of a three-layer hierarchical peer-to-peer energy
//! market: prosumer dispatch and feeder-level bilateral trading, VPP
//! participation in a 15-minute ancillary market, and a 5-minute cooperative
//! market between VPPs.

pub mod ancillary;
pub mod coop;
pub mod domain;
pub mod exchange;
pub mod ledger;
pub mod powerflow;
pub mod price_game;
pub mod prosumer;
pub mod sim;
pub mod vpp;
