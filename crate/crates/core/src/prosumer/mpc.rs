use microlp::{ComparisonOp, OptimizationDirection, Problem, Variable};
use serde::{Deserialize, Serialize};

use super::{DispatchPlan, ForecastSet, MpcError, MpcPrices, ProsumerState, StorageParams, STEP_HOURS};
use crate::domain::{Layer, MarketSlot};

/// Values below this are treated as zero after a solve (kWh).
const DUST: f64 = 1e-9;

/// Branch-and-bound node budget for the import/export exclusivity search.
const MAX_NODES: usize = 4096;

/// How the per-slot P2P volume caps are set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "kwh")]
pub enum P2pCapPolicy {
    /// Sell cap = forecast surplus, buy cap = forecast deficit.
    #[default]
    ForecastNet,
    /// Same fixed cap on both sides in every slot.
    Fixed(f64),
    /// No P2P trading.
    Disabled,
}

/// A rolling-horizon dispatch LP for one prosumer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcProblem {
    pub first_slot: MarketSlot,
    pub dt_hours: f64,
    pub demand: Vec<f64>,
    pub generation: Vec<f64>,
    pub prices: MpcPrices,
    pub storage: StorageParams,
    pub initial_soc: f64,
    /// (lower, upper) per slot; lower bounds come from committed contracts.
    pub sell_p2p_bounds: Vec<(f64, f64)>,
    pub buy_p2p_bounds: Vec<(f64, f64)>,
    /// Per-slot energy limits from the charge/discharge rates, kWh.
    pub charge_max: Vec<f64>,
    pub discharge_max: Vec<f64>,
}

impl MpcProblem {
    pub fn horizon(&self) -> usize {
        self.demand.len()
    }

    /// Upper bounds on utility exchange that every solution with exclusive
    /// import/export satisfies; they keep the relaxation bounded when the
    /// net-metering price exceeds the retail price.
    fn utility_bounds(&self, t: usize) -> (f64, f64) {
        let eta_d = self.storage.discharge_efficiency;
        let sell = self.generation[t] + self.buy_p2p_bounds[t].1 + eta_d * self.discharge_max[t];
        let buy = self.demand[t] + self.sell_p2p_bounds[t].1 + self.charge_max[t];
        (sell, buy)
    }
}

pub fn build_mpc_problem(
    state: &ProsumerState,
    forecasts: &ForecastSet,
    prices: &MpcPrices,
    horizon: usize,
    first_slot: MarketSlot,
    caps: P2pCapPolicy,
) -> Result<MpcProblem, MpcError> {
    if horizon == 0 {
        return Err(MpcError::EmptyHorizon);
    }
    state.storage.validate().map_err(MpcError::Storage)?;
    for (what, got) in [("demand forecast", forecasts.demand.len()), ("generation forecast", forecasts.generation.len())] {
        if got < horizon {
            return Err(MpcError::ShortSeries { what, got, need: horizon });
        }
    }
    for (what, series) in [
        ("P2P sell price", &prices.sell_p2p),
        ("net-metering price", &prices.sell_net_metering),
        ("P2P buy price", &prices.buy_p2p),
        ("utility price", &prices.buy_utility),
    ] {
        if series.len() < horizon {
            return Err(MpcError::ShortSeries { what, got: series.len(), need: horizon });
        }
    }
    let demand = forecasts.demand[..horizon].to_vec();
    let generation = forecasts.generation[..horizon].to_vec();
    let (mut sell_p2p_bounds, mut buy_p2p_bounds): (Vec<_>, Vec<_>) = (0..horizon)
        .map(|t| {
            let net = generation[t] - demand[t];
            match caps {
                P2pCapPolicy::ForecastNet => ((0.0, net.max(0.0)), (0.0, (-net).max(0.0))),
                P2pCapPolicy::Fixed(cap) => ((0.0, cap.max(0.0)), (0.0, cap.max(0.0))),
                P2pCapPolicy::Disabled => ((0.0, 0.0), (0.0, 0.0)),
            }
        })
        .unzip();

    for c in &state.committed_contracts {
        let offset = (c.slot.start() - first_slot.start()) / Layer::L1.duration();
        if offset < 0 || offset as usize >= horizon {
            return Err(MpcError::CommitmentOutsideHorizon { id: c.id, slot_start: c.slot.start() });
        }
        let t = offset as usize;
        let bounds = if c.seller == state.id {
            &mut sell_p2p_bounds[t]
        } else if c.buyer == state.id {
            &mut buy_p2p_bounds[t]
        } else {
            continue;
        };
        bounds.0 += c.quantity;
        bounds.1 = bounds.1.max(bounds.0);
    }

    let dt = STEP_HOURS;
    let s = &state.storage;
    Ok(MpcProblem {
        first_slot,
        dt_hours: dt,
        demand,
        generation,
        prices: MpcPrices {
            sell_p2p: prices.sell_p2p.window(0, horizon),
            sell_net_metering: prices.sell_net_metering.window(0, horizon),
            buy_p2p: prices.buy_p2p.window(0, horizon),
            buy_utility: prices.buy_utility.window(0, horizon),
        },
        storage: s.clone(),
        initial_soc: state.soc,
        sell_p2p_bounds,
        buy_p2p_bounds,
        charge_max: vec![if s.has_battery() { s.charge_rate * dt } else { 0.0 }; horizon],
        discharge_max: vec![if s.has_battery() { s.discharge_rate * dt } else { 0.0 }; horizon],
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Exclude {
    UtilitySell,
    UtilityBuy,
}

struct Columns {
    sell_p2p: Vec<Variable>,
    sell_utility: Vec<Variable>,
    buy_p2p: Vec<Variable>,
    buy_utility: Vec<Variable>,
    charge: Vec<Variable>,
    discharge: Vec<Variable>,
}

#[derive(Clone, Debug)]
struct LpPoint {
    objective: f64,
    sell_p2p: Vec<f64>,
    sell_utility: Vec<f64>,
    buy_p2p: Vec<f64>,
    buy_utility: Vec<f64>,
    charge: Vec<f64>,
    discharge: Vec<f64>,
}

impl LpPoint {
    fn first_conflict(&self) -> Option<usize> {
        (0..self.sell_utility.len()).find(|&t| self.sell_utility[t] > DUST && self.buy_utility[t] > DUST)
    }
}

fn solve_relaxation(p: &MpcProblem, exclude: &[Option<Exclude>]) -> Result<Option<LpPoint>, MpcError> {
    let n = p.horizon();
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let mut cols = Columns {
        sell_p2p: Vec::with_capacity(n),
        sell_utility: Vec::with_capacity(n),
        buy_p2p: Vec::with_capacity(n),
        buy_utility: Vec::with_capacity(n),
        charge: Vec::with_capacity(n),
        discharge: Vec::with_capacity(n),
    };
    for t in 0..n {
        let (su_max, bu_max) = p.utility_bounds(t);
        let su_max = if exclude[t] == Some(Exclude::UtilitySell) { 0.0 } else { su_max };
        let bu_max = if exclude[t] == Some(Exclude::UtilityBuy) { 0.0 } else { bu_max };
        cols.sell_p2p.push(lp.add_var(p.prices.sell_p2p.values[t], p.sell_p2p_bounds[t]));
        cols.sell_utility.push(lp.add_var(p.prices.sell_net_metering.values[t], (0.0, su_max)));
        cols.buy_p2p.push(lp.add_var(-p.prices.buy_p2p.values[t], p.buy_p2p_bounds[t]));
        cols.buy_utility.push(lp.add_var(-p.prices.buy_utility.values[t], (0.0, bu_max)));
        cols.charge.push(lp.add_var(0.0, (0.0, p.charge_max[t])));
        cols.discharge.push(lp.add_var(0.0, (0.0, p.discharge_max[t])));
    }
    let soc: Vec<Variable> = (0..n).map(|_| lp.add_var(0.0, (0.0, p.storage.capacity))).collect();
    let eta_c = p.storage.charge_efficiency;
    let eta_d = p.storage.discharge_efficiency;
    for t in 0..n {
        lp.add_constraint(
            [
                (cols.buy_p2p[t], 1.0),
                (cols.buy_utility[t], 1.0),
                (cols.discharge[t], eta_d),
                (cols.sell_p2p[t], -1.0),
                (cols.sell_utility[t], -1.0),
                (cols.charge[t], -1.0),
            ],
            ComparisonOp::Eq,
            p.demand[t] - p.generation[t],
        );
        let mut soc_row = vec![(soc[t], 1.0), (cols.charge[t], -eta_c), (cols.discharge[t], 1.0)];
        let rhs = if t == 0 {
            p.initial_soc
        } else {
            soc_row.push((soc[t - 1], -1.0));
            0.0
        };
        lp.add_constraint(soc_row.as_slice(), ComparisonOp::Eq, rhs);
    }
    let solution = match lp.solve() {
        Ok(outcome) => match outcome.into_solution() {
            Ok(s) => s,
            Err(_) => return Err(MpcError::Solver("solve interrupted".into())),
        },
        Err(microlp::Error::Infeasible) => return Ok(None),
        Err(e) => return Err(MpcError::Solver(e.to_string())),
    };
    let read = |vs: &[Variable]| -> Vec<f64> { vs.iter().map(|v| solution.var_value(*v)).collect() };
    Ok(Some(LpPoint {
        objective: solution.objective(),
        sell_p2p: read(&cols.sell_p2p),
        sell_utility: read(&cols.sell_utility),
        buy_p2p: read(&cols.buy_p2p),
        buy_utility: read(&cols.buy_utility),
        charge: read(&cols.charge),
        discharge: read(&cols.discharge),
    }))
}

/// Depth-first branch and bound over slots whose relaxation both imports
/// from and exports to the utility. The meter at the point of
/// interconnection runs one way per slot.
fn search(p: &MpcProblem) -> Result<Option<LpPoint>, MpcError> {
    let n = p.horizon();
    let mut best: Option<LpPoint> = None;
    let mut stack: Vec<Vec<Option<Exclude>>> = vec![vec![None; n]];
    let mut nodes = 0;
    while let Some(exclude) = stack.pop() {
        nodes += 1;
        let Some(point) = solve_relaxation(p, &exclude)? else { continue };
        if let Some(b) = &best {
            if point.objective <= b.objective + 1e-12 {
                continue;
            }
        }
        match point.first_conflict() {
            None => best = Some(point),
            Some(_) if nodes >= MAX_NODES => {
                // budget spent: the netting in `finish` makes this point feasible
                if best.as_ref().map_or(true, |b| point.objective > b.objective) {
                    best = Some(point);
                }
            }
            Some(t) => {
                for side in [Exclude::UtilityBuy, Exclude::UtilitySell] {
                    let mut child = exclude.clone();
                    child[t] = Some(side);
                    stack.push(child);
                }
            }
        }
    }
    Ok(best)
}

fn clean(x: f64, hi: f64) -> f64 {
    let x = x.clamp(0.0, hi.max(0.0));
    if x < DUST {
        0.0
    } else {
        x
    }
}

/// Snap solver output onto the feasible set exactly: clip to bounds, net
/// simultaneous charge/discharge, and rebuild utility exchange as the slot
/// residual so the energy balance closes to rounding error.
fn finish(p: &MpcProblem, point: LpPoint) -> DispatchPlan {
    let n = p.horizon();
    let s = &p.storage;
    let (eta_c, eta_d) = (s.charge_efficiency, s.discharge_efficiency);
    let mut plan = DispatchPlan {
        first_slot: p.first_slot,
        sell_p2p: vec![0.0; n],
        sell_utility: vec![0.0; n],
        buy_p2p: vec![0.0; n],
        buy_utility: vec![0.0; n],
        charge: vec![0.0; n],
        discharge: vec![0.0; n],
        soc: vec![p.initial_soc; n + 1],
        objective: 0.0,
        demand: p.demand.clone(),
        generation: p.generation.clone(),
        discharge_efficiency: eta_d,
    };
    let mut soc = p.initial_soc;
    for t in 0..n {
        let sp = clean(point.sell_p2p[t], p.sell_p2p_bounds[t].1).max(p.sell_p2p_bounds[t].0);
        let bp = clean(point.buy_p2p[t], p.buy_p2p_bounds[t].1).max(p.buy_p2p_bounds[t].0);
        let mut c = clean(point.charge[t], p.charge_max[t]);
        let mut d = clean(point.discharge[t], p.discharge_max[t]);
        if c > 0.0 && d > 0.0 {
            // keep the net effect on the state of charge
            let net = eta_c * c - d;
            if net >= 0.0 {
                c = net / eta_c;
                d = 0.0;
            } else {
                d = -net;
                c = 0.0;
            }
        }
        c = clean(c, ((s.capacity - soc) / eta_c).min(p.charge_max[t]));
        d = clean(d, soc.min(p.discharge_max[t]));
        soc = (soc + eta_c * c - d).clamp(0.0, s.capacity);
        let residual = p.demand[t] + sp + c - p.generation[t] - bp - eta_d * d;
        plan.sell_p2p[t] = sp;
        plan.buy_p2p[t] = bp;
        plan.charge[t] = c;
        plan.discharge[t] = d;
        plan.buy_utility[t] = residual.max(0.0);
        plan.sell_utility[t] = (-residual).max(0.0);
        plan.soc[t + 1] = soc;
    }
    plan.objective = objective_value(&plan, &p.prices).expect("plan built from problem horizon");
    plan
}

pub fn solve_mpc(problem: &MpcProblem) -> Result<DispatchPlan, MpcError> {
    let n = problem.horizon();
    if n == 0 {
        return Err(MpcError::EmptyHorizon);
    }
    let slot_start = |t: usize| problem.first_slot.start() + (t as i64) * Layer::L1.duration();
    for t in 0..n {
        let (sl, sh) = problem.sell_p2p_bounds[t];
        let (bl, bh) = problem.buy_p2p_bounds[t];
        if sl > sh + DUST || bl > bh + DUST || sl < 0.0 || bl < 0.0 {
            return Err(MpcError::Infeasible { index: t, slot_start: slot_start(t) });
        }
    }
    match search(problem)? {
        Some(point) => Ok(finish(problem, point)),
        None => {
            let t = (0..n)
                .find(|&t| problem.sell_p2p_bounds[t].0 > 0.0 || problem.buy_p2p_bounds[t].0 > 0.0)
                .unwrap_or(0);
            Err(MpcError::Infeasible { index: t, slot_start: slot_start(t) })
        }
    }
}

/// Revenue from P2P and net-metered sales minus the cost of P2P and utility
/// purchases, $.
pub fn objective_value(plan: &DispatchPlan, prices: &MpcPrices) -> Result<f64, MpcError> {
    let n = plan.horizon();
    if prices.shortest() != n
        || [&prices.sell_p2p, &prices.sell_net_metering, &prices.buy_p2p, &prices.buy_utility].iter().any(|s| s.len() != n)
    {
        return Err(MpcError::LengthMismatch { plan: n, prices: prices.shortest() });
    }
    Ok((0..n)
        .map(|t| {
            prices.sell_p2p.values[t] * plan.sell_p2p[t] + prices.sell_net_metering.values[t] * plan.sell_utility[t]
                - prices.buy_p2p.values[t] * plan.buy_p2p[t]
                - prices.buy_utility.values[t] * plan.buy_utility[t]
        })
        .sum())
}
