//! The event loop. One owner of mutable state; per-prosumer dispatch runs in
//! parallel inside a tick and is merged in id order.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use super::events::{schedule_events, Event, EventKind};
use super::noise::{realize, substream, StreamKind};
use super::report::{AccountingRecord, AncillaryRecord, NashRecord, RunMode, RunReport, SignalRecord, ViolationRecord};
use super::scenario::{Flags, NoiseSection, P2pPriceForecast, Scenario};
use crate::ancillary::{assess_penalty, clear_bids, verify_delivery, AncillaryAward};
use crate::coop::{execute_transfers, form_coalition, shapley_allocate, VppPosition};
use crate::domain::{apportion, parent_slot, quantize_kwh, AgentId, FeederId, Layer, MarketSlot, Money, PriceSeries};
use crate::exchange::{match_orders, settle_slot, Contract, Order, OverspillReport, Side, SlotPosition, Tariff};
use crate::ledger::{LedgerEntry, Party, Reason, SettlementLedger};
use crate::powerflow::{check_limits, corrective_signals, run_lindistflow, AdjustmentSignal, FeederModel, NodeLoad, ViolationKind};
use crate::price_game::{find_nash, midpoint_profile, GameAgent, PriceGrid};
use crate::prosumer::{
    plan_to_orders, roll_horizon, solve_mpc, build_mpc_problem, ForecastSet, MpcPrices, OrderPrices, P2pCapPolicy,
    ProsumerState, RealizedSlot, StorageParams,
};
use crate::vpp::{aggregate_overspill, deliverable_surplus, make_ancillary_bid, monitor_delivery, request_l3, AncillaryBid, VppState};

/// A module fault with the event that triggered it.
#[derive(Debug, Error)]
#[error("{event}: {message}")]
pub struct SimError {
    pub event: String,
    pub message: String,
}

fn fault(event: &Event, e: impl std::fmt::Display) -> SimError {
    SimError { event: event.to_string(), message: e.to_string() }
}

const STEPS_PER_L1: usize = (Layer::L1.duration() / Layer::L3.duration()) as usize;
const STEPS_PER_L2: usize = (Layer::L2.duration() / Layer::L3.duration()) as usize;
/// kWh per step → kW.
const STEPS_PER_HOUR: f64 = 60.0 / Layer::L3.duration() as f64;

struct Agent {
    id: AgentId,
    feeder: usize,
    state: ProsumerState,
    demand: Vec<f64>,
    generation: Vec<f64>,
    caps: P2pCapPolicy,
    /// Realized noise, which may differ from the scenario error model.
    noise: NoiseSection,
    /// Storage energy (charge, discharge) of decided but unsettled slots.
    pending: BTreeMap<i64, (f64, f64)>,
    signal: Option<AdjustmentSignal>,
}

/// One agent's decided position for an L1 slot, kWh.
#[derive(Clone, Debug, Default)]
struct Position {
    sell_p2p: f64,
    buy_p2p: f64,
    sell_utility: f64,
    buy_utility: f64,
    charge: f64,
    discharge: f64,
    contracted: f64,
    unmatched_sell: f64,
    unmatched_buy: f64,
}

impl Position {
    fn planned_sell(&self) -> f64 {
        self.sell_utility + self.unmatched_sell
    }

    fn planned_buy(&self) -> f64 {
        self.buy_utility + self.unmatched_buy
    }

    /// Planned net export per step that is not P2P overspill.
    fn firm_net_per_step(&self) -> f64 {
        (self.contracted + self.sell_utility - self.buy_utility) / STEPS_PER_L1 as f64
    }
}

#[derive(Clone, Debug, Default)]
struct Measured {
    net: f64,
    generation: f64,
    demand: f64,
    curtailed: f64,
    shed: f64,
    charge: f64,
    discharge: f64,
}

struct L1Book {
    positions: Vec<Position>,
    measured: Vec<Measured>,
    contracts: Vec<Contract>,
    reports: BTreeMap<FeederId, OverspillReport>,
}

#[derive(Clone, Debug, Default)]
struct VppSlot {
    bid: Option<AncillaryBid>,
    award: Option<AncillaryAward>,
    forecast_step: f64,
    sigma_step: f64,
    pool_steps: Vec<f64>,
    bought: f64,
    sold: f64,
}

struct Vpp {
    state: VppState,
    feeders: Vec<usize>,
    members: Vec<usize>,
}

struct Feeder {
    model: FeederModel,
    top_k: Option<usize>,
    members: Vec<usize>,
    /// Last volume-weighted contract price.
    last_price: Option<f64>,
}

struct Sim<'a> {
    sc: &'a Scenario,
    mode: RunMode,
    flags: Flags,
    retail: Vec<f64>,
    net_metering: Vec<f64>,
    clearing: Vec<f64>,
    capacity: Vec<f64>,
    agents: Vec<Agent>,
    feeders: Vec<Feeder>,
    vpps: Vec<Vpp>,
    l1: BTreeMap<i64, L1Book>,
    l2: BTreeMap<i64, Vec<VppSlot>>,
    next_contract: u64,
    report: RunReport,
}

pub fn run(scenario: &Scenario) -> Result<RunReport, SimError> {
    Sim::new(scenario, RunMode::Full).execute()
}

/// The same scenario with utility-only trading; the savings denominator.
pub fn baseline_run(scenario: &Scenario) -> Result<RunReport, SimError> {
    Sim::new(scenario, RunMode::Baseline).execute()
}

pub fn run_mode(scenario: &Scenario, mode: RunMode) -> Result<RunReport, SimError> {
    Sim::new(scenario, mode).execute()
}

impl<'a> Sim<'a> {
    fn new(sc: &'a Scenario, mode: RunMode) -> Self {
        let (n1, n2) = (sc.l1_count(), sc.l2_count());
        let mut flags = sc.flags;
        if mode == RunMode::Baseline {
            flags.l3_enabled = false;
        }
        let mut specs: Vec<_> = sc.prosumers.iter().collect();
        specs.sort_by(|a, b| a.id.cmp(&b.id));
        let models = sc.feeder_models();
        let feeder_index: BTreeMap<FeederId, usize> = models.iter().enumerate().map(|(i, (m, _))| (m.id.clone(), i)).collect();
        let noise = sc.prosumer_noise();
        let agents: Vec<Agent> = specs
            .iter()
            .map(|p| {
                let (storage, soc) = match &p.storage {
                    Some(s) => (s.params(), s.initial_soc),
                    None => (StorageParams::none(), 0.0),
                };
                let caps = match (mode, p.p2p_cap) {
                    (RunMode::Baseline, _) => P2pCapPolicy::Disabled,
                    (RunMode::Full, Some(cap)) => P2pCapPolicy::Fixed(cap),
                    (RunMode::Full, None) => P2pCapPolicy::ForecastNet,
                };
                Agent {
                    id: p.id.clone(),
                    feeder: feeder_index[&p.feeder],
                    state: ProsumerState { id: p.id.clone(), feeder: p.feeder.clone(), storage, soc, committed_contracts: Vec::new() },
                    demand: p.demand.expand(n1),
                    generation: p.generation.expand(n1),
                    caps,
                    noise: noise[&p.id],
                    pending: BTreeMap::new(),
                    signal: None,
                }
            })
            .collect();
        let feeders: Vec<Feeder> = models
            .into_iter()
            .enumerate()
            .map(|(i, (model, top_k))| Feeder {
                model,
                top_k,
                members: agents.iter().enumerate().filter(|(_, a)| a.feeder == i).map(|(j, _)| j).collect(),
                last_price: None,
            })
            .collect();
        let mut vpp_specs: Vec<_> = sc.vpps.iter().collect();
        vpp_specs.sort_by(|a, b| a.id.cmp(&b.id));
        let vpps: Vec<Vpp> = vpp_specs
            .iter()
            .map(|v| {
                let fidx: Vec<usize> = v.feeders.iter().map(|f| feeder_index[f]).collect();
                let mut members: Vec<usize> = fidx.iter().flat_map(|&f| feeders[f].members.iter().copied()).collect();
                members.sort_unstable();
                Vpp { state: VppState::new(v.id.clone(), v.feeders.clone(), v.safety_k, v.offer_fraction), feeders: fidx, members }
            })
            .collect();
        let report = RunReport {
            seed: sc.seed,
            mode,
            flags,
            prosumers: agents.iter().map(|a| a.id.clone()).collect(),
            vpps: vpps.iter().map(|v| v.state.id.clone()).collect(),
            ledger: SettlementLedger::new(),
            orders: Vec::new(),
            contracts: Vec::new(),
            bids: Vec::new(),
            ancillary: Vec::new(),
            l3_trades: Vec::new(),
            violations: Vec::new(),
            signals: Vec::new(),
            nash: Vec::new(),
            wash_trades: Vec::new(),
            events: Vec::new(),
            accounting: Vec::new(),
            max_plan_residual: 0.0,
        };
        Sim {
            sc,
            mode,
            flags,
            retail: sc.tariff.retail.expand(n1),
            net_metering: sc.tariff.net_metering.expand(n1),
            clearing: sc.ancillary.clearing_price.expand(n2),
            capacity: sc.ancillary.capacity.expand(n2),
            agents,
            feeders,
            vpps,
            l1: BTreeMap::new(),
            l2: BTreeMap::new(),
            next_contract: 0,
            report,
        }
    }

    fn execute(mut self) -> Result<RunReport, SimError> {
        let queue = schedule_events(self.sc);
        for ev in &queue {
            self.report.events.push(*ev);
            match ev.kind {
                EventKind::L1Clear => self.l1_clear(ev)?,
                EventKind::L2Bid => {
                    if self.mode == RunMode::Full {
                        self.l2_bid(ev)?
                    }
                }
                EventKind::L3Market => {
                    if self.mode == RunMode::Full && self.flags.l3_enabled {
                        self.l3_market(ev)?
                    }
                }
                EventKind::Deliver => self.deliver(ev)?,
                EventKind::Settle => self.settle(ev)?,
            }
        }
        Ok(self.report)
    }

    fn grid(&self, t: usize) -> PriceGrid {
        PriceGrid::new(self.net_metering[t], self.retail[t], self.sc.grid.price_step).expect("validated tariff band")
    }

    /// P2P prices the dispatch optimizer assumes for feeder `f` over slots `t..t+h`.
    fn p2p_price_forecast(&self, f: usize, t: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
        (t..t + h)
            .map(|k| {
                let (nm, retail) = (self.net_metering[k], self.retail[k]);
                match self.sc.grid.p2p_price_forecast {
                    P2pPriceForecast::UtilityFallback => {
                        let nudge = (0.25 * (retail - nm)).min(1e-4);
                        (nm + nudge, retail - nudge)
                    }
                    P2pPriceForecast::LastClearing => {
                        let p = self.feeders[f].last_price.unwrap_or_else(|| self.grid(k).midpoint()).clamp(nm, retail);
                        (p, p)
                    }
                }
            })
            .unzip()
    }

    fn l1_clear(&mut self, ev: &Event) -> Result<(), SimError> {
        let slot = ev.slot;
        let t = slot.index();
        let h = self.sc.grid.mpc_horizon_slots.min(self.sc.l1_count() - t);
        let nm = PriceSeries::new(Layer::L1, self.net_metering[t..t + h].to_vec());
        let retail = PriceSeries::new(Layer::L1, self.retail[t..t + h].to_vec());
        let feeder_prices: Vec<(Vec<f64>, Vec<f64>)> = (0..self.feeders.len()).map(|f| self.p2p_price_forecast(f, t, h)).collect();

        let plans: Vec<_> = self
            .agents
            .par_iter()
            .map(|a| {
                let mut state = a.state.clone();
                let s = &state.storage;
                let projected: f64 = a.pending.values().map(|(c, d)| s.charge_efficiency * c - d).sum();
                state.soc = (state.soc + projected).clamp(0.0, s.capacity);
                state.committed_contracts.retain(|c| c.slot.start() >= slot.start());
                let forecasts = ForecastSet { demand: a.demand[t..t + h].to_vec(), generation: a.generation[t..t + h].to_vec() };
                let (sell, buy) = &feeder_prices[a.feeder];
                let prices = MpcPrices {
                    sell_p2p: PriceSeries::new(Layer::L1, sell.clone()),
                    sell_net_metering: nm.clone(),
                    buy_p2p: PriceSeries::new(Layer::L1, buy.clone()),
                    buy_utility: retail.clone(),
                };
                let problem = build_mpc_problem(&state, &forecasts, &prices, h, slot, a.caps)?;
                solve_mpc(&problem)
            })
            .collect();

        let mut positions = Vec::with_capacity(self.agents.len());
        let mut orders: Vec<Order> = Vec::new();
        for (a, plan) in self.agents.iter_mut().zip(plans) {
            let plan = plan.map_err(|e| fault(ev, format!("prosumer {}: {e}", a.id)))?;
            for k in 0..plan.horizon() {
                self.report.max_plan_residual = self.report.max_plan_residual.max(plan.balance_residual(k).abs());
            }
            let planned = plan_to_orders(&plan, &a.id, &a.state.feeder, slot, OrderPrices { sell: 0.0, buy: 0.0 });
            if planned.wash_trade {
                self.report.wash_trades.push((a.id.clone(), slot.start()));
            }
            let mut p = Position { charge: plan.charge[0], discharge: plan.discharge[0], ..Position::default() };
            for o in &planned.orders {
                match o.side {
                    Side::Sell => p.sell_p2p = o.quantity,
                    Side::Buy => p.buy_p2p = o.quantity,
                }
            }
            let eta_d = a.state.storage.discharge_efficiency;
            let residual = a.generation[t] + eta_d * p.discharge - a.demand[t] - p.charge - p.sell_p2p + p.buy_p2p;
            p.sell_utility = residual.max(0.0);
            p.buy_utility = (-residual).max(0.0);
            a.pending.insert(slot.start(), (p.charge, p.discharge));
            positions.push(p);
            orders.extend(planned.orders);
        }

        let grid = self.grid(t);
        let mut contracts = Vec::new();
        let mut reports = BTreeMap::new();
        for feeder in self.feeders.iter_mut() {
            let members: Vec<&AgentId> = feeder.members.iter().map(|&i| &self.agents[i].id).collect();
            let mut book: Vec<Order> = orders.iter().filter(|o| members.contains(&&o.agent)).cloned().collect();
            let sellers: Vec<GameAgent> =
                book.iter().filter(|o| o.side == Side::Sell).map(|o| GameAgent::seller(o.agent.clone(), o.quantity)).collect();
            let buyers: Vec<GameAgent> = book
                .iter()
                .filter(|o| o.side == Side::Buy)
                .map(|o| GameAgent::buyer(o.agent.clone(), o.quantity, grid.ceiling))
                .collect();
            let game: Vec<GameAgent> = sellers.iter().chain(buyers.iter()).cloned().collect();
            let (profile, buy_price) = if !self.flags.price_game_enabled {
                (midpoint_profile(&game, &grid), grid.midpoint())
            } else if sellers.is_empty() || buyers.is_empty() {
                (midpoint_profile(&game, &grid), grid.ceiling)
            } else {
                let outcome = find_nash(&game, &grid, self.sc.grid.max_nash_rounds).map_err(|e| fault(ev, format!("feeder {}: {e}", feeder.model.id)))?;
                self.report.nash.push(NashRecord {
                    feeder: feeder.model.id.clone(),
                    slot_start: slot.start(),
                    converged: outcome.converged,
                    rounds: outcome.rounds,
                });
                (outcome.profile, grid.ceiling)
            };
            for o in book.iter_mut() {
                o.limit_price = match o.side {
                    Side::Sell => profile[&o.agent],
                    Side::Buy => buy_price,
                };
                o.validate(grid.ceiling).map_err(|e| fault(ev, e))?;
            }
            let (mut matched, report) =
                match_orders(&book, slot, &feeder.model.id).map_err(|e| fault(ev, format!("feeder {}: {e}", feeder.model.id)))?;
            for c in matched.iter_mut() {
                c.id = self.next_contract;
                self.next_contract += 1;
            }
            let volume: f64 = matched.iter().map(|c| c.quantity).sum();
            if volume > 0.0 {
                feeder.last_price = Some(matched.iter().map(|c| c.price * c.quantity).sum::<f64>() / volume);
            }
            for &i in &feeder.members {
                let id = &self.agents[i].id;
                let p = &mut positions[i];
                let sold: f64 = matched.iter().filter(|c| &c.seller == id).map(|c| c.quantity).sum();
                let bought: f64 = matched.iter().filter(|c| &c.buyer == id).map(|c| c.quantity).sum();
                p.contracted = sold - bought;
                p.unmatched_sell = quantize_kwh(p.sell_p2p - sold);
                p.unmatched_buy = quantize_kwh(p.buy_p2p - bought);
            }
            self.report.orders.extend(book);
            contracts.extend(matched);
            reports.insert(feeder.model.id.clone(), report);
        }
        for a in self.agents.iter_mut() {
            a.state.committed_contracts.extend(contracts.iter().filter(|c| c.seller == a.id || c.buyer == a.id).cloned());
        }
        self.report.contracts.extend(contracts.iter().cloned());
        let n = self.agents.len();
        self.l1.insert(slot.start(), L1Book { positions, measured: vec![Measured::default(); n], contracts, reports });
        Ok(())
    }

    /// Per-step standard deviation of a VPP's pool in L1 slot `t` under the
    /// scenario error model.
    fn sigma_step(&self, v: &Vpp, t: usize) -> f64 {
        let steps = STEPS_PER_L1 as f64;
        v.members
            .iter()
            .map(|&i| {
                let a = &self.agents[i];
                let g = self.sc.noise.generation_sigma * a.generation[t] / steps;
                let d = self.sc.noise.demand_sigma * a.demand[t] / steps;
                g * g + d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    fn l2_bid(&mut self, ev: &Event) -> Result<(), SimError> {
        let l2 = ev.slot;
        let l1 = parent_slot(l2).map_err(|e| fault(ev, e))?;
        let t = l1.index();
        let k = l2.index();
        let book = self.l1.get(&l1.start()).ok_or_else(|| fault(ev, format!("no L1 clearing for {l1}")))?;
        let mut slots = Vec::with_capacity(self.vpps.len());
        let mut bids = Vec::new();
        for v in &self.vpps {
            let forecast = aggregate_overspill(&v.state, &book.reports).map_err(|e| fault(ev, e))?;
            let sigma_step = self.sigma_step(v, t);
            let sigma = sigma_step * (STEPS_PER_L2 as f64).sqrt();
            let bid = make_ancillary_bid(&v.state, l2, forecast.per_l2_slot, sigma, self.clearing[k]).map_err(|e| fault(ev, e))?;
            let bid = (bid.quantity > 0.0).then_some(bid);
            if let Some(b) = &bid {
                bids.push(b.clone());
            }
            slots.push(VppSlot {
                bid,
                forecast_step: forecast.per_l2_slot / STEPS_PER_L2 as f64,
                sigma_step,
                ..VppSlot::default()
            });
        }
        let awards = clear_bids(&bids, l2, self.clearing[k], self.capacity[k]);
        for (v, s) in self.vpps.iter_mut().zip(slots.iter_mut()) {
            s.award = awards.iter().find(|a| a.vpp == v.state.id).cloned();
            if let Some(a) = &s.award {
                v.state.open_awards.push(a.clone());
            }
        }
        self.report.bids.extend(bids);
        self.l2.insert(l2.start(), slots);
        Ok(())
    }

    fn l3_market(&mut self, ev: &Event) -> Result<(), SimError> {
        let l3 = ev.slot;
        let l2 = parent_slot(l3).map_err(|e| fault(ev, e))?;
        let rate = self.sc.ancillary.penalty_multiplier * self.clearing[l2.index()];
        let Some(slots) = self.l2.get(&l2.start()) else {
            return Ok(());
        };
        let mut positions = Vec::new();
        for (v, s) in self.vpps.iter().zip(slots) {
            let committed = s.award.as_ref().map_or(0.0, |a| a.awarded) - (s.bought - s.sold);
            let remaining = STEPS_PER_L2 - s.pool_steps.len();
            let report = monitor_delivery(committed, &s.pool_steps, &vec![s.forecast_step; remaining]);
            if let Some(p) = request_l3(&v.state.id, report.shortfall, l3, l2) {
                positions.push(p);
            } else {
                let margin = v.state.safety_k * s.sigma_step * (remaining as f64).sqrt();
                let surplus = deliverable_surplus(&report, margin);
                if surplus > 0.0 {
                    positions.push(VppPosition::surplus(v.state.id.clone(), l3, surplus));
                }
            }
        }
        let Some(game) = form_coalition(&positions, rate).map_err(|e| fault(ev, e))? else {
            return Ok(());
        };
        let allocation = shapley_allocate(&game).map_err(|e| fault(ev, e))?;
        let outcome = execute_transfers(&game, &allocation, l3).map_err(|e| fault(ev, e))?;
        let slots = self.l2.get_mut(&l2.start()).expect("checked above");
        for trade in &outcome.trades {
            for (v, s) in self.vpps.iter().zip(slots.iter_mut()) {
                if v.state.id == trade.buyer {
                    s.bought += trade.quantity;
                }
                if v.state.id == trade.seller {
                    s.sold += trade.quantity;
                }
            }
        }
        self.report.ledger.extend(outcome.entries);
        self.report.l3_trades.extend(outcome.trades);
        Ok(())
    }

    fn deliver(&mut self, ev: &Event) -> Result<(), SimError> {
        let step = ev.slot;
        let l1 = MarketSlot::new(Layer::L1, step.start() - step.start().rem_euclid(Layer::L1.duration())).map_err(|e| fault(ev, e))?;
        let t = l1.index();
        let steps = STEPS_PER_L1 as f64;
        let seed = self.sc.seed;
        let book = self.l1.get_mut(&l1.start()).ok_or_else(|| fault(ev, format!("no L1 clearing for {l1}")))?;
        let mut net = vec![0.0; self.agents.len()];
        for (i, a) in self.agents.iter_mut().enumerate() {
            let p = &book.positions[i];
            let g_fc = a.generation[t] / steps;
            let d_fc = a.demand[t] / steps;
            let g = realize(g_fc, a.noise.generation_sigma, &mut substream(seed, &a.id, step.start(), StreamKind::Generation));
            let d = realize(d_fc, a.noise.demand_sigma, &mut substream(seed, &a.id, step.start(), StreamKind::Demand));
            let (mut curtailed, mut shed) = (0.0, 0.0);
            if let Some(sig) = a.signal.take() {
                let kwh = sig.kw / STEPS_PER_HOUR;
                let applied = match sig.kind {
                    ViolationKind::OverVoltage => {
                        curtailed = kwh.min(g);
                        curtailed
                    }
                    ViolationKind::UnderVoltage => {
                        shed = kwh.min(d);
                        shed
                    }
                };
                self.report.signals.push(SignalRecord { step_start: step.start(), agent: a.id.clone(), kind: sig.kind, kw: sig.kw, applied_kwh: applied });
            }
            let c = p.charge / steps;
            let dis = p.discharge / steps;
            let x = (g - curtailed) + a.state.storage.discharge_efficiency * dis - (d - shed) - c;
            net[i] = x;
            let m = &mut book.measured[i];
            m.net += x;
            m.generation += g;
            m.demand += d;
            m.curtailed += curtailed;
            m.shed += shed;
            m.charge += c;
            m.discharge += dis;
        }

        if self.flags.powerflow_enabled {
            for f in &self.feeders {
                let nodes = f.model.agent_nodes();
                let mut loads = vec![NodeLoad::default(); f.model.nodes.len()];
                let mut withdrawal = BTreeMap::new();
                for &i in &f.members {
                    let kw = -net[i] * STEPS_PER_HOUR;
                    loads[nodes[&self.agents[i].id]].p += kw / f.model.base_kva;
                    withdrawal.insert(self.agents[i].id.clone(), kw);
                }
                let result = run_lindistflow(&f.model, &loads).map_err(|e| fault(ev, e))?;
                let violations = check_limits(&result, f.model.band);
                if violations.is_empty() {
                    continue;
                }
                for v in &violations {
                    self.report.violations.push(ViolationRecord {
                        step_start: step.start(),
                        feeder: f.model.id.clone(),
                        node: f.model.nodes[v.node].id.clone(),
                        kind: v.kind,
                        v: v.v,
                        excursion: v.excursion,
                    });
                }
                let signals = corrective_signals(&violations, &f.model, &result, &withdrawal, f.top_k).map_err(|e| fault(ev, e))?;
                for s in signals {
                    if let Some(&i) = f.members.iter().find(|&&i| self.agents[i].id == s.agent) {
                        self.agents[i].signal = Some(s);
                    }
                }
            }
        }

        if self.mode == RunMode::Full {
            let l2 = parent_slot(step).map_err(|e| fault(ev, e))?;
            if let Some(slots) = self.l2.get_mut(&l2.start()) {
                for (v, s) in self.vpps.iter().zip(slots.iter_mut()) {
                    let pool: f64 = v
                        .feeders
                        .iter()
                        .map(|&f| {
                            self.feeders[f].members.iter().map(|&i| net[i] - book.positions[i].firm_net_per_step()).sum::<f64>().max(0.0)
                        })
                        .sum();
                    s.pool_steps.push(pool);
                }
            }
        }
        Ok(())
    }

    fn settle(&mut self, ev: &Event) -> Result<(), SimError> {
        let slot = ev.slot;
        let t = slot.index();
        let book = self.l1.remove(&slot.start()).ok_or_else(|| fault(ev, format!("no L1 clearing for {slot}")))?;
        let tariff = Tariff { retail: self.retail[t], net_metering: self.net_metering[t] };
        let positions: Vec<SlotPosition> = self
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| SlotPosition {
                agent: a.id.clone(),
                planned_utility_sell: book.positions[i].planned_sell(),
                planned_utility_buy: book.positions[i].planned_buy(),
                measured_net_export: book.measured[i].net,
            })
            .collect();
        let entries = settle_slot(slot, &book.contracts, &positions, tariff).map_err(|e| fault(ev, e))?;
        self.report.ledger.extend(entries);

        let mut sourced_total = 0.0;
        if self.mode == RunMode::Full {
            for l2 in slot.children() {
                let Some(slots) = self.l2.remove(&l2.start()) else { continue };
                for (vi, s) in slots.iter().enumerate() {
                    sourced_total += self.settle_vpp(ev, l2, vi, s, &book, tariff)?;
                }
            }
        }

        let mut acc = AccountingRecord {
            slot_start: slot.start(),
            generation: 0.0,
            utility_purchases: 0.0,
            load_shed: 0.0,
            demand: 0.0,
            net_metered_exports: 0.0,
            ancillary_delivered: sourced_total,
            curtailment: 0.0,
            storage_delta: 0.0,
            error: 0.0,
        };
        let mut exports = 0.0;
        for (i, a) in self.agents.iter_mut().enumerate() {
            let (p, m) = (&book.positions[i], &book.measured[i]);
            let dev = m.net - (p.contracted + p.planned_sell() - p.planned_buy());
            exports += p.planned_sell() + dev.max(0.0);
            acc.utility_purchases += p.planned_buy() + (-dev).max(0.0);
            acc.generation += m.generation;
            acc.demand += m.demand;
            acc.curtailment += m.curtailed;
            acc.load_shed += m.shed;
            acc.storage_delta += m.charge - a.state.storage.discharge_efficiency * m.discharge;
            a.state = roll_horizon(&a.state, &RealizedSlot { slot, charge: m.charge, discharge: m.discharge })
                .map_err(|e| fault(ev, format!("prosumer {}: {e}", a.id)))?;
            a.pending.remove(&slot.start());
        }
        acc.net_metered_exports = exports - sourced_total;
        acc.error = acc.generation + acc.utility_purchases + acc.load_shed
            - acc.demand
            - acc.net_metered_exports
            - acc.ancillary_delivered
            - acc.curtailment
            - acc.storage_delta;
        self.report.accounting.push(acc);
        Ok(())
    }

    /// Delivery verification, ISO settlement, utility reimbursement and
    /// pass-through for one VPP and L2 slot. Returns the pool energy sourced.
    fn settle_vpp(&mut self, ev: &Event, l2: MarketSlot, vi: usize, s: &VppSlot, book: &L1Book, tariff: Tariff) -> Result<f64, SimError> {
        let v = &self.vpps[vi];
        let id = v.state.id.clone();
        let party = Party::Vpp(id.clone());
        let measured: f64 = s.pool_steps.iter().sum();
        let l3_net = s.bought - s.sold;
        let awarded = s.award.as_ref().map_or(0.0, |a| a.awarded);
        let mut rec = AncillaryRecord {
            vpp: id.clone(),
            slot_start: l2.start(),
            bid_quantity: s.bid.as_ref().map_or(0.0, |b| b.quantity),
            offer_price: s.bid.as_ref().map_or(0.0, |b| b.offer_price),
            awarded,
            clearing_price: self.clearing[l2.index()],
            measured,
            l3_net,
            delivered: quantize_kwh((measured + l3_net).max(0.0)),
            shortfall: 0.0,
            sourced: 0.0,
            revenue: Money::ZERO,
            penalty: Money::ZERO,
        };
        let mut balance = Money::ZERO;
        if let Some(award) = &s.award {
            let d = verify_delivery(award, measured, l3_net).map_err(|e| fault(ev, e))?;
            let a = assess_penalty(&d, self.sc.ancillary.penalty_multiplier * award.clearing_price);
            rec.delivered = d.delivered;
            rec.shortfall = d.shortfall;
            rec.revenue = a.revenue;
            rec.penalty = a.penalty;
            balance += a.revenue - a.penalty;
            self.report.ledger.extend(a.entries);
        }
        let sourced = quantize_kwh(measured.min((awarded - l3_net).max(0.0)));
        rec.sourced = sourced;
        let reimburse = Money::from_dollars(sourced * tariff.net_metering);
        self.report.ledger.record(l2.start(), party.clone(), Party::Utility, reimburse, Reason::NetMetering);
        balance -= reimburse;
        balance += self
            .report
            .ledger
            .entries()
            .iter()
            .filter(|e| e.reason == Reason::L3Transfer && l2.start() <= e.slot_start && e.slot_start < l2.end())
            .map(|e| if e.payee == party { e.amount } else if e.payer == party { -e.amount } else { Money::ZERO })
            .sum::<Money>();

        if !balance.is_zero() {
            let positive: Vec<usize> = self.vpps[vi].feeders.iter().copied().filter(|f| book.reports[&self.feeders[*f].model.id].net() > 0.0).collect();
            let mut weights: Vec<f64> = v
                .members
                .iter()
                .map(|&i| if positive.contains(&self.agents[i].feeder) { book.positions[i].unmatched_sell } else { 0.0 })
                .collect();
            if weights.iter().sum::<f64>() <= 0.0 {
                weights = vec![1.0; v.members.len()];
            }
            if !weights.is_empty() {
                let shares = apportion(balance.abs(), &weights);
                let entries: Vec<LedgerEntry> = v
                    .members
                    .iter()
                    .zip(shares)
                    .map(|(&i, amount)| {
                        let agent = Party::Agent(self.agents[i].id.clone());
                        let (payer, payee, reason) = if balance.nanos() > 0 {
                            (party.clone(), agent, Reason::AncillaryRevenue)
                        } else {
                            (agent, party.clone(), Reason::AncillaryPenalty)
                        };
                        LedgerEntry { slot_start: l2.start(), payer, payee, amount, reason }
                    })
                    .collect();
                for e in entries {
                    self.report.ledger.record(e.slot_start, e.payer, e.payee, e.amount, e.reason);
                }
            }
        }
        self.report.ancillary.push(rec);
        Ok(sourced)
    }
}
