//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::Rng;
use strata_core::domain::{Layer, MarketSlot, PriceSeries};
use strata_core::prosumer::{
    build_mpc_problem, ForecastSet, MpcPrices, MpcProblem, P2pCapPolicy, ProsumerState, StorageParams,
};

const GRID: f64 = 0.1;

/// Best objective for one slot given the net energy `x` left over after
/// demand and storage, with P2P volumes free inside their bounds and the
/// utility absorbing the residual one way only.
fn best_slot_value(p: &MpcProblem, t: usize, x: f64) -> f64 {
    let (sl, sh) = p.sell_p2p_bounds[t];
    let (bl, bh) = p.buy_p2p_bounds[t];
    let psp = p.prices.sell_p2p.values[t];
    let pbp = p.prices.buy_p2p.values[t];
    let pnm = p.prices.sell_net_metering.values[t];
    let pbu = p.prices.buy_utility.values[t];
    let value = |sp: f64, bp: f64| {
        let r = x + bp - sp;
        psp * sp - pbp * bp + pnm * r.max(0.0) - pbu * (-r).max(0.0)
    };
    // the objective is linear on each side of the line sp - bp = x, so the
    // maximum sits on a box corner or where that line meets an edge
    let mut cands = vec![(sl, bl), (sl, bh), (sh, bl), (sh, bh)];
    for bp in [bl, bh] {
        let sp = x + bp;
        if sp >= sl && sp <= sh {
            cands.push((sp, bp));
        }
    }
    for sp in [sl, sh] {
        let bp = sp - x;
        if bp >= bl && bp <= bh {
            cands.push((sp, bp));
        }
    }
    cands.into_iter().map(|(s, b)| value(s, b)).fold(f64::NEG_INFINITY, f64::max)
}

/// Brute force over net storage action on a 0.1 kWh grid.
pub fn brute_force_mpc(p: &MpcProblem) -> f64 {
    let n = p.horizon();
    let eta_c = p.storage.charge_efficiency;
    let eta_d = p.storage.discharge_efficiency;
    let steps: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|t| {
            let lo = -(p.discharge_max[t] / GRID + 1e-9).floor() as i64;
            let hi = (p.charge_max[t] / GRID + 1e-9).floor() as i64;
            (lo..=hi)
                .map(|k| {
                    let s = k as f64 * GRID;
                    let (c, d) = (s.max(0.0), (-s).max(0.0));
                    let x = p.generation[t] + eta_d * d - p.demand[t] - c;
                    (eta_c * c - d, best_slot_value(p, t, x))
                })
                .collect()
        })
        .collect();
    fn dfs(steps: &[Vec<(f64, f64)>], t: usize, soc: f64, cap: f64, acc: f64, best: &mut f64) {
        if t == steps.len() {
            *best = best.max(acc);
            return;
        }
        for &(dsoc, v) in &steps[t] {
            let next = soc + dsoc;
            if next >= -1e-12 && next <= cap + 1e-12 {
                dfs(steps, t + 1, next, cap, acc + v, best);
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    dfs(&steps, 0, p.initial_soc, p.storage.capacity, 0.0, &mut best);
    best
}

fn on_grid(rng: &mut impl Rng, max_tenths: u32) -> f64 {
    rng.gen_range(0..=max_tenths) as f64 * GRID
}

fn price(rng: &mut impl Rng) -> f64 {
    (rng.gen_range(0.05..=0.40_f64) * 1e4).round() / 1e4
}

/// Random instance with N ≤ 4, quantities on the 0.1 kWh grid and prices in
/// [0.05, 0.40] $/kWh.
pub fn random_mpc_instance(rng: &mut impl Rng) -> MpcProblem {
    let n = rng.gen_range(1..=4usize);
    let storage = if rng.gen_bool(0.8) {
        let eta = [1.0, 0.95, 0.9][rng.gen_range(0..3)];
        let rate = rng.gen_range(1..=5) as f64 * 0.2;
        StorageParams {
            capacity: rng.gen_range(1..=30) as f64 * GRID,
            charge_rate: rate,
            discharge_rate: rate,
            charge_efficiency: eta,
            discharge_efficiency: eta,
        }
    } else {
        StorageParams::none()
    };
    let soc = if storage.has_battery() { (on_grid(rng, 30)).min(storage.capacity) } else { 0.0 };
    let state = ProsumerState { id: "p".into(), feeder: "f".into(), storage, soc, committed_contracts: vec![] };
    let forecasts = ForecastSet {
        demand: (0..n).map(|_| on_grid(rng, 30)).collect(),
        generation: (0..n).map(|_| on_grid(rng, 30)).collect(),
    };
    let mut series = || PriceSeries::new(Layer::L1, (0..n).map(|_| price(rng)).collect());
    let prices = MpcPrices { sell_p2p: series(), sell_net_metering: series(), buy_p2p: series(), buy_utility: series() };
    let caps = match rng.gen_range(0..3) {
        0 => P2pCapPolicy::ForecastNet,
        1 => P2pCapPolicy::Fixed(on_grid(rng, 20)),
        _ => P2pCapPolicy::Disabled,
    };
    build_mpc_problem(&state, &forecasts, &prices, n, MarketSlot::new(Layer::L1, 0).unwrap(), caps).unwrap()
}

/// Shapley values by averaging marginal contributions over every ordering,
/// with `v(S) = rate · min(Σ deficit, Σ surplus)` evaluated directly.
pub fn shapley_oracle(deficits: &[f64], surpluses: &[f64], rate: f64) -> Vec<f64> {
    let n = deficits.len();
    let v = |members: &[usize]| {
        let d: f64 = members.iter().map(|&i| deficits[i]).sum();
        let s: f64 = members.iter().map(|&i| surpluses[i]).sum();
        rate * d.min(s)
    };
    fn orderings(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for rest in orderings(n - 1) {
            for pos in 0..=rest.len() {
                let mut o = rest.clone();
                o.insert(pos, n - 1);
                out.push(o);
            }
        }
        out
    }
    let all = orderings(n);
    let mut phi = vec![0.0; n];
    for order in &all {
        for k in 0..n {
            phi[order[k]] += v(&order[..=k]) - v(&order[..k]);
        }
    }
    phi.iter().map(|x| x / all.len() as f64).collect()
}

/// Random deficit/surplus positions on the 0.1 kWh grid; each player holds
/// at most one nonzero side.
pub fn random_positions(rng: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut d = vec![0.0; n];
    let mut s = vec![0.0; n];
    for i in 0..n {
        let q = rng.gen_range(1..=30) as f64 * GRID;
        if rng.gen_bool(0.5) {
            d[i] = q;
        } else {
            s[i] = q;
        }
    }
    (d, s)
}

/// A seller (`limit = None`) or price-taking buyer in the feeder pricing game.
#[derive(Clone, Debug)]
pub struct Trader {
    pub id: String,
    pub quantity: f64,
    pub limit: Option<f64>,
}

/// Grid points floor + k·step strictly below the ceiling, then the ceiling.
pub fn grid_points(floor: f64, ceiling: f64, step: f64) -> Vec<f64> {
    let mut pts = Vec::new();
    let mut k = 0;
    loop {
        let p = floor + k as f64 * step;
        if p >= ceiling - 1e-9 {
            break;
        }
        pts.push(p);
        k += 1;
    }
    pts.push(ceiling);
    pts
}

/// Payoffs under greedy price-priority matching at the midpoint of limits:
/// seller revenue, and for buyers the saving against paying the ceiling.
pub fn game_payoffs(traders: &[Trader], prices: &[(String, f64)], ceiling: f64) -> Vec<f64> {
    let ask = |id: &str| prices.iter().find(|(p, _)| p == id).map(|x| x.1).unwrap();
    let mut sellers: Vec<(usize, f64, f64)> =
        traders.iter().enumerate().filter(|(_, t)| t.limit.is_none()).map(|(i, t)| (i, ask(&t.id), t.quantity)).collect();
    let mut buyers: Vec<(usize, f64, f64)> =
        traders.iter().enumerate().filter_map(|(i, t)| t.limit.map(|l| (i, l, t.quantity))).collect();
    sellers.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(traders[a.0].id.cmp(&traders[b.0].id)));
    buyers.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(traders[a.0].id.cmp(&traders[b.0].id)));
    let mut pay = vec![0.0; traders.len()];
    for s in sellers.iter_mut() {
        for b in buyers.iter_mut() {
            if s.2 <= 1e-12 || b.1 < s.1 {
                break;
            }
            if b.2 <= 1e-12 {
                continue;
            }
            let q = s.2.min(b.2);
            let price = 0.5 * (s.1 + b.1);
            s.2 -= q;
            b.2 -= q;
            pay[s.0] += price * q;
            pay[b.0] += (ceiling - price) * q;
        }
    }
    pay
}

/// Largest unilateral gain available to any seller over the full grid.
pub fn deviation_oracle(traders: &[Trader], prices: &[(String, f64)], grid: &[f64], ceiling: f64) -> f64 {
    let base = game_payoffs(traders, prices, ceiling);
    let mut gain: f64 = 0.0;
    for (i, t) in traders.iter().enumerate().filter(|(_, t)| t.limit.is_none()) {
        for &p in grid {
            let moved: Vec<(String, f64)> =
                prices.iter().map(|(id, x)| (id.clone(), if id == &t.id { p } else { *x })).collect();
            gain = gain.max(game_payoffs(traders, &moved, ceiling)[i] - base[i]);
        }
    }
    gain
}

pub fn scenario_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

pub fn load(name: &str) -> strata_core::sim::Scenario {
    strata_core::sim::load_scenario(scenario_path(name)).unwrap()
}
