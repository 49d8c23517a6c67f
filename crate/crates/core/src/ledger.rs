//! After-the-fact money flows between prosumers, VPPs, the utility and the ISO.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{AgentId, Money, VppId};

/// A ledger counterparty.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Party {
    Agent(AgentId),
    Vpp(VppId),
    Utility,
    Iso,
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Agent(id) => write!(f, "{id}"),
            Party::Vpp(id) => write!(f, "{id}"),
            Party::Utility => f.write_str("UTILITY"),
            Party::Iso => f.write_str("ISO"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    P2pContract,
    UtilityPurchase,
    NetMetering,
    Deviation,
    AncillaryRevenue,
    AncillaryPenalty,
    L3Transfer,
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Reason::P2pContract => "p2p_contract",
            Reason::UtilityPurchase => "utility_purchase",
            Reason::NetMetering => "net_metering",
            Reason::Deviation => "deviation",
            Reason::AncillaryRevenue => "ancillary_revenue",
            Reason::AncillaryPenalty => "ancillary_penalty",
            Reason::L3Transfer => "l3_transfer",
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    /// Start of the slot the flow belongs to, minutes.
    pub slot_start: i64,
    pub payer: Party,
    pub payee: Party,
    /// Always strictly positive.
    pub amount: Money,
    pub reason: Reason,
}

/// Append-only list of money flows. Every entry moves a positive amount from
/// payer to payee, so the signed sum over all parties is zero by construction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlementLedger {
    entries: Vec<LedgerEntry>,
}

impl SettlementLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a flow. Negative amounts reverse direction; zero amounts and
    /// self-payments are dropped.
    pub fn record(&mut self, slot_start: i64, payer: Party, payee: Party, amount: Money, reason: Reason) {
        if amount.is_zero() || payer == payee {
            return;
        }
        let (payer, payee, amount) = if amount.nanos() < 0 { (payee, payer, -amount) } else { (payer, payee, amount) };
        self.entries.push(LedgerEntry { slot_start, payer, payee, amount, reason });
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = LedgerEntry>) {
        for e in entries {
            self.record(e.slot_start, e.payer, e.payee, e.amount, e.reason);
        }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sum over entries of (+amount for payee, −amount for payer).
    pub fn signed_total(&self) -> Money {
        self.balances().values().copied().sum()
    }

    /// Net receipts per party (positive = received more than paid).
    pub fn balances(&self) -> BTreeMap<Party, Money> {
        let mut out: BTreeMap<Party, Money> = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.payee.clone()).or_default() += e.amount;
            *out.entry(e.payer.clone()).or_default() -= e.amount;
        }
        out
    }

    pub fn balance_of(&self, party: &Party) -> Money {
        self.entries
            .iter()
            .map(|e| {
                if &e.payee == party {
                    e.amount
                } else if &e.payer == party {
                    -e.amount
                } else {
                    Money::ZERO
                }
            })
            .sum()
    }

    pub fn total_for(&self, reason: Reason) -> Money {
        self.entries.iter().filter(|e| e.reason == reason).map(|e| e.amount).sum()
    }

    /// Entries recorded for one slot start, in insertion order.
    pub fn slot_entries(&self, slot_start: i64) -> impl Iterator<Item = &LedgerEntry> {
        self.entries.iter().filter(move |e| e.slot_start == slot_start)
    }
}
