//! 5-minute cooperative market between VPPs: coalition game over avoided
//! penalties, exact Shapley allocation and the resulting energy and money
//! transfers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{apportion, quantize_kwh, MarketSlot, Money, VppId};
use crate::ledger::{LedgerEntry, Party, Reason};

/// Largest game solved exactly (2^12 coalitions).
pub const MAX_EXACT_PLAYERS: usize = 12;

/// Largest game the permutation route accepts (8! orderings).
pub const MAX_PERMUTATION_PLAYERS: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum CoopError {
    #[error("{0} players exceed the exact Shapley bound of {MAX_EXACT_PLAYERS}")]
    TooManyPlayers(usize),
    #[error("position of {0} must have exactly one of deficit or surplus positive")]
    InvalidPosition(VppId),
    #[error("position of {vpp} is for slot {got}, game is for {want}")]
    SlotMismatch { vpp: VppId, got: MarketSlot, want: MarketSlot },
    #[error("duplicate position for {0}")]
    DuplicatePlayer(VppId),
    #[error("value table has {got} entries, {players} players need {need}")]
    ValueTable { players: usize, got: usize, need: usize },
    #[error("allocation sums to {sum}, grand coalition is worth {value}")]
    Efficiency { sum: f64, value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VppPosition {
    pub vpp: VppId,
    pub l3_slot: MarketSlot,
    pub deficit: f64,
    pub surplus: f64,
}

impl VppPosition {
    pub fn deficit(vpp: VppId, l3_slot: MarketSlot, kwh: f64) -> Self {
        Self { vpp, l3_slot, deficit: kwh, surplus: 0.0 }
    }

    pub fn surplus(vpp: VppId, l3_slot: MarketSlot, kwh: f64) -> Self {
        Self { vpp, l3_slot, deficit: 0.0, surplus: kwh }
    }

    fn is_posted(&self) -> bool {
        self.deficit > 0.0 || self.surplus > 0.0
    }
}

/// Transferable-utility game with its value table indexed by coalition
/// bitmask (bit `i` = `players[i]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoalitionGame {
    pub players: Vec<VppId>,
    pub values: Vec<f64>,
    pub penalty_rate: f64,
    /// Per-player deficit and surplus, kWh; empty for games built from a bare
    /// value table.
    pub deficits: Vec<f64>,
    pub surpluses: Vec<f64>,
}

impl CoalitionGame {
    pub fn from_values(players: Vec<VppId>, values: Vec<f64>) -> Result<Self, CoopError> {
        if players.len() > MAX_EXACT_PLAYERS {
            return Err(CoopError::TooManyPlayers(players.len()));
        }
        let need = 1usize << players.len();
        if values.len() != need {
            return Err(CoopError::ValueTable { players: players.len(), got: values.len(), need });
        }
        Ok(Self { players, values, penalty_rate: 0.0, deficits: Vec::new(), surpluses: Vec::new() })
    }

    pub fn value(&self, mask: usize) -> f64 {
        self.values[mask]
    }

    pub fn grand_value(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.players.len()
    }

    pub fn is_empty(&self) -> bool {
        self.players.is_empty()
    }
}

/// Penalty avoided by pooling the members of `subset`: rate × min(Σ deficit, Σ surplus).
pub fn characteristic_value(subset: &[VppId], positions: &[VppPosition], penalty_rate: f64) -> f64 {
    let (d, s) = positions
        .iter()
        .filter(|p| subset.contains(&p.vpp))
        .fold((0.0, 0.0), |(d, s), p| (d + p.deficit, s + p.surplus));
    penalty_rate * d.min(s)
}

/// Grand coalition of every VPP with a nonzero position. Returns `None` when
/// there is nothing to trade.
pub fn form_coalition(positions: &[VppPosition], penalty_rate: f64) -> Result<Option<CoalitionGame>, CoopError> {
    let mut posted: Vec<&VppPosition> = Vec::new();
    for p in positions {
        if p.deficit < 0.0 || p.surplus < 0.0 || (p.deficit > 0.0 && p.surplus > 0.0) {
            return Err(CoopError::InvalidPosition(p.vpp.clone()));
        }
        if let Some(first) = posted.first() {
            if p.l3_slot != first.l3_slot {
                return Err(CoopError::SlotMismatch { vpp: p.vpp.clone(), got: p.l3_slot, want: first.l3_slot });
            }
        }
        if p.is_posted() {
            posted.push(p);
        }
    }
    posted.sort_by(|a, b| a.vpp.cmp(&b.vpp));
    for w in posted.windows(2) {
        if w[0].vpp == w[1].vpp {
            return Err(CoopError::DuplicatePlayer(w[0].vpp.clone()));
        }
    }
    let has_def = posted.iter().any(|p| p.deficit > 0.0);
    let has_sur = posted.iter().any(|p| p.surplus > 0.0);
    if posted.len() < 2 || !has_def || !has_sur {
        return Ok(None);
    }
    if posted.len() > MAX_EXACT_PLAYERS {
        return Err(CoopError::TooManyPlayers(posted.len()));
    }
    let n = posted.len();
    let deficits: Vec<f64> = posted.iter().map(|p| p.deficit).collect();
    let surpluses: Vec<f64> = posted.iter().map(|p| p.surplus).collect();
    let mut sum_d = vec![0.0; 1 << n];
    let mut sum_s = vec![0.0; 1 << n];
    for mask in 1usize..1 << n {
        let low = mask.trailing_zeros() as usize;
        let rest = mask & (mask - 1);
        sum_d[mask] = sum_d[rest] + deficits[low];
        sum_s[mask] = sum_s[rest] + surpluses[low];
    }
    let values = (0..1 << n).map(|m| penalty_rate * sum_d[m].min(sum_s[m])).collect();
    Ok(Some(CoalitionGame {
        players: posted.iter().map(|p| p.vpp.clone()).collect(),
        values,
        penalty_rate,
        deficits,
        surpluses,
    }))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub phi: BTreeMap<VppId, f64>,
}

impl Allocation {
    pub fn total(&self) -> f64 {
        self.phi.values().sum()
    }
}

/// Exact Shapley value by the subset formula
/// φ_i = Σ_{S ⊆ N∖i} |S|!(n−|S|−1)!/n! · (v(S ∪ i) − v(S)).
pub fn shapley_allocate(game: &CoalitionGame) -> Result<Allocation, CoopError> {
    let n = game.len();
    if n > MAX_EXACT_PLAYERS {
        return Err(CoopError::TooManyPlayers(n));
    }
    // weight[s] = s!(n-s-1)!/n!
    let mut fact = vec![1.0f64; n + 1];
    for k in 1..=n {
        fact[k] = fact[k - 1] * k as f64;
    }
    let weight: Vec<f64> = (0..n).map(|s| fact[s] * fact[n - s - 1] / fact[n]).collect();
    let mut phi = BTreeMap::new();
    for i in 0..n {
        let bit = 1usize << i;
        let mut acc = 0.0;
        for mask in 0usize..1 << n {
            if mask & bit == 0 {
                acc += weight[mask.count_ones() as usize] * (game.value(mask | bit) - game.value(mask));
            }
        }
        phi.insert(game.players[i].clone(), acc);
    }
    Ok(Allocation { phi })
}

/// Shapley value as the average marginal contribution over all orderings.
pub fn shapley_by_permutations(game: &CoalitionGame) -> Result<Allocation, CoopError> {
    let n = game.len();
    if n > MAX_PERMUTATION_PLAYERS {
        return Err(CoopError::TooManyPlayers(n));
    }
    let mut totals = vec![0.0; n];
    let mut count = 0u64;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    let mut visit = |perm: &[usize]| {
        let mut mask = 0usize;
        for &i in perm {
            totals[i] += game.value(mask | 1 << i) - game.value(mask);
            mask |= 1 << i;
        }
        count += 1;
    };
    // Heap's algorithm
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(Allocation { phi: game.players.iter().cloned().zip(totals.into_iter().map(|t| t / count as f64)).collect() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VppTrade {
    pub seller: VppId,
    pub buyer: VppId,
    pub l3_slot: MarketSlot,
    /// kWh.
    pub quantity: f64,
    /// Paid buyer → seller.
    pub payment: Money,
    /// payment / quantity, $/kWh.
    pub implicit_price: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransferOutcome {
    pub trades: Vec<VppTrade>,
    pub entries: Vec<LedgerEntry>,
    /// Deficit covered per buyer, kWh.
    pub covered: BTreeMap<VppId, f64>,
}

/// Move `min(Σ deficit, Σ surplus)` from surplus to deficit VPPs, pro-rata on
/// both sides. Each deficit VPP pays its avoided penalty minus its Shapley
/// value; the pool goes to surplus VPPs in proportion to theirs, so every
/// player nets exactly its φ up to nano-dollar rounding.
pub fn execute_transfers(game: &CoalitionGame, allocation: &Allocation, l3_slot: MarketSlot) -> Result<TransferOutcome, CoopError> {
    let value = game.grand_value();
    let sum = allocation.total();
    if (sum - value).abs() > 1e-9 {
        return Err(CoopError::Efficiency { sum, value });
    }
    let total_d: f64 = game.deficits.iter().sum();
    let total_s: f64 = game.surpluses.iter().sum();
    let traded = total_d.min(total_s);
    if traded <= 0.0 {
        return Ok(TransferOutcome::default());
    }
    let buyers: Vec<usize> = (0..game.len()).filter(|&i| game.deficits[i] > 0.0).collect();
    let sellers: Vec<usize> = (0..game.len()).filter(|&j| game.surpluses[j] > 0.0).collect();
    let seller_phi: Vec<f64> = sellers.iter().map(|&j| allocation.phi[&game.players[j]].max(0.0)).collect();
    let seller_weights: Vec<f64> =
        if seller_phi.iter().sum::<f64>() > 0.0 { seller_phi } else { sellers.iter().map(|&j| game.surpluses[j]).collect() };
    let mut out = TransferOutcome::default();
    for &i in &buyers {
        let buyer = &game.players[i];
        let covered = traded * game.deficits[i] / total_d;
        out.covered.insert(buyer.clone(), quantize_kwh(covered));
        let pays = Money::from_dollars(game.penalty_rate * covered - allocation.phi[buyer]);
        let shares = apportion(pays, &seller_weights);
        for (k, &j) in sellers.iter().enumerate() {
            let quantity = quantize_kwh(covered * game.surpluses[j] / total_s);
            if quantity <= 0.0 {
                continue;
            }
            let payment = shares[k];
            let seller = &game.players[j];
            out.trades.push(VppTrade {
                seller: seller.clone(),
                buyer: buyer.clone(),
                l3_slot,
                quantity,
                payment,
                implicit_price: payment.dollars() / quantity,
            });
            if !payment.is_zero() {
                let (payer, payee, amount) = if payment.nanos() > 0 {
                    (Party::Vpp(buyer.clone()), Party::Vpp(seller.clone()), payment)
                } else {
                    (Party::Vpp(seller.clone()), Party::Vpp(buyer.clone()), -payment)
                };
                out.entries.push(LedgerEntry { slot_start: l3_slot.start(), payer, payee, amount, reason: Reason::L3Transfer });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Layer;
    use crate::ledger::SettlementLedger;
    use proptest::prelude::*;

    fn slot() -> MarketSlot {
        MarketSlot::new(Layer::L3, 35).unwrap()
    }

    fn abc() -> Vec<VppPosition> {
        vec![
            VppPosition::deficit("A".into(), slot(), 2.0),
            VppPosition::surplus("B".into(), slot(), 1.0),
            VppPosition::surplus("C".into(), slot(), 1.0),
        ]
    }

    fn ids(v: &[&str]) -> Vec<VppId> {
        v.iter().map(|s| VppId::from(*s)).collect()
    }

    #[test]
    fn coalition_examples() {
        let g = form_coalition(&abc(), 1.0).unwrap().unwrap();
        assert_eq!(g.players, ids(&["A", "B", "C"]));
        let only_def = vec![VppPosition::deficit("A".into(), slot(), 2.0), VppPosition::deficit("B".into(), slot(), 1.0)];
        assert_eq!(form_coalition(&only_def, 1.0).unwrap(), None);
        let many: Vec<VppPosition> = (0..13)
            .map(|i| if i == 0 { VppPosition::deficit(format!("v{i:02}").into(), slot(), 5.0) } else { VppPosition::surplus(format!("v{i:02}").into(), slot(), 1.0) })
            .collect();
        assert_eq!(form_coalition(&many, 1.0), Err(CoopError::TooManyPlayers(13)));
        let idle = vec![VppPosition::deficit("A".into(), slot(), 1.0), VppPosition::surplus("B".into(), slot(), 1.0), VppPosition::surplus("Z".into(), slot(), 0.0)];
        assert_eq!(form_coalition(&idle, 1.0).unwrap().unwrap().len(), 2);
        let both = vec![VppPosition { vpp: "A".into(), l3_slot: slot(), deficit: 1.0, surplus: 1.0 }];
        assert_eq!(form_coalition(&both, 1.0), Err(CoopError::InvalidPosition("A".into())));
    }

    #[test]
    fn value_examples() {
        let p = abc();
        assert_eq!(characteristic_value(&ids(&["A", "B"]), &p, 1.0), 1.0);
        assert_eq!(characteristic_value(&ids(&["B", "C"]), &p, 1.0), 0.0);
        assert_eq!(characteristic_value(&ids(&["A", "B", "C"]), &p, 1.0), 2.0);
        let g = form_coalition(&p, 1.0).unwrap().unwrap();
        assert_eq!(g.values, vec![0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 2.0]);
    }

    #[test]
    fn shapley_examples() {
        let g = form_coalition(&abc(), 1.0).unwrap().unwrap();
        let phi = shapley_allocate(&g).unwrap().phi;
        assert_eq!(phi.values().copied().collect::<Vec<_>>(), vec![1.0, 0.5, 0.5]);

        let sym = CoalitionGame::from_values(ids(&["1", "2"]), vec![0.0, 0.0, 0.0, 10.0]).unwrap();
        assert_eq!(shapley_allocate(&sym).unwrap().phi.values().copied().collect::<Vec<_>>(), vec![5.0, 5.0]);

        // d (bit 2) never changes any coalition's value
        let dummy = CoalitionGame::from_values(ids(&["a", "b", "d"]), vec![0.0, 1.0, 2.0, 4.0, 0.0, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(shapley_allocate(&dummy).unwrap().phi[&VppId::from("d")], 0.0);
    }

    #[test]
    fn transfer_examples() {
        let g = form_coalition(&abc(), 1.0).unwrap().unwrap();
        let alloc = shapley_allocate(&g).unwrap();
        let out = execute_transfers(&g, &alloc, slot()).unwrap();
        let summary: Vec<_> = out.trades.iter().map(|t| (t.seller.as_str(), t.buyer.as_str(), t.quantity, t.payment)).collect();
        assert_eq!(summary, vec![("B", "A", 1.0, Money::from_dollars(0.5)), ("C", "A", 1.0, Money::from_dollars(0.5))]);
        let mut ledger = SettlementLedger::new();
        ledger.extend(out.entries);
        assert_eq!(ledger.balance_of(&Party::Vpp("A".into())), Money::from_dollars(-1.0));
        assert_eq!(ledger.signed_total(), Money::ZERO);

        let pair = vec![VppPosition::deficit("D".into(), slot(), 1.0), VppPosition::surplus("S".into(), slot(), 1.0)];
        let g = form_coalition(&pair, 0.4).unwrap().unwrap();
        let alloc = shapley_allocate(&g).unwrap();
        assert!((alloc.phi[&VppId::from("D")] - 0.2).abs() < 1e-12);
        let out = execute_transfers(&g, &alloc, slot()).unwrap();
        assert_eq!(out.trades.len(), 1);
        assert_eq!(out.trades[0].quantity, 1.0);
        assert_eq!(out.trades[0].payment, Money::from_dollars(0.2));
        assert!((out.trades[0].implicit_price - 0.2).abs() < 1e-12);
    }

    #[test]
    fn inefficient_allocation_rejected() {
        let g = form_coalition(&abc(), 1.0).unwrap().unwrap();
        let mut alloc = shapley_allocate(&g).unwrap();
        *alloc.phi.get_mut(&VppId::from("A")).unwrap() += 0.1;
        assert!(matches!(execute_transfers(&g, &alloc, slot()), Err(CoopError::Efficiency { .. })));
    }

    fn positions() -> impl Strategy<Value = Vec<VppPosition>> {
        prop::collection::vec((any::<bool>(), 1u32..50), 2..=6).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (def, q))| {
                    let id = VppId::from(format!("v{i}"));
                    if def {
                        VppPosition::deficit(id, slot(), q as f64 / 10.0)
                    } else {
                        VppPosition::surplus(id, slot(), q as f64 / 10.0)
                    }
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn routes_agree_and_axioms_hold(pos in positions(), rate in 0.1..2.0f64) {
            let Some(g) = form_coalition(&pos, rate).unwrap() else { return Ok(()) };
            let a = shapley_allocate(&g).unwrap();
            let b = shapley_by_permutations(&g).unwrap();
            for (k, v) in &a.phi {
                prop_assert!((v - b.phi[k]).abs() <= 1e-12);
                prop_assert!(*v >= -1e-12);
            }
            prop_assert!((a.total() - g.grand_value()).abs() <= 1e-9);
        }

        #[test]
        fn superadditive(pos in positions(), rate in 0.1..2.0f64) {
            let Some(g) = form_coalition(&pos, rate).unwrap() else { return Ok(()) };
            let full = (1usize << g.len()) - 1;
            for s in 0..=full {
                let rest = full & !s;
                let mut t = rest;
                loop {
                    prop_assert!(g.value(s | t) + 1e-12 >= g.value(s) + g.value(t));
                    if t == 0 { break; }
                    t = (t - 1) & rest;
                }
            }
        }

        #[test]
        fn transfers_balance(pos in positions(), rate in 0.1..2.0f64) {
            let Some(g) = form_coalition(&pos, rate).unwrap() else { return Ok(()) };
            let alloc = shapley_allocate(&g).unwrap();
            let out = execute_transfers(&g, &alloc, slot()).unwrap();
            let mut ledger = SettlementLedger::new();
            ledger.extend(out.entries.clone());
            prop_assert_eq!(ledger.signed_total(), Money::ZERO);
            let bought: f64 = out.trades.iter().map(|t| t.quantity).sum();
            let total = g.deficits.iter().sum::<f64>().min(g.surpluses.iter().sum());
            prop_assert!((bought - total).abs() <= 1e-5);
            // each player nets its Shapley value against its avoided penalty
            for (i, p) in g.players.iter().enumerate() {
                let gain = ledger.balance_of(&Party::Vpp(p.clone())).dollars()
                    + if g.deficits[i] > 0.0 { rate * out.covered[p] } else { 0.0 };
                prop_assert!((gain - alloc.phi[p]).abs() <= 1e-5, "{p}: gain {gain} phi {}", alloc.phi[p]);
            }
        }
    }
}
