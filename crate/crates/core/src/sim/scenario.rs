//! Scenario file schema, loading and eager validation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coop::MAX_EXACT_PLAYERS;
use crate::domain::{make_time_grid, AgentId, FeederId, Layer, TimeGrid, VppId};
use crate::powerflow::{FeederModel, FeederNode, VoltageBand};
use crate::price_game::PriceGrid;
use crate::prosumer::{StorageParams, DEFAULT_HORIZON_SLOTS};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{location} (line {line}, column {column}): {message}")]
    Parse { location: String, line: usize, column: usize, message: String },
    #[error("{location}: {message}")]
    Invalid { location: String, message: String },
}

impl ScenarioError {
    pub fn is_io(&self) -> bool {
        matches!(self, ScenarioError::Io { .. })
    }

    fn invalid(location: impl Into<String>, message: impl Into<String>) -> Self {
        ScenarioError::Invalid { location: location.into(), message: message.into() }
    }
}

/// A per-slot series given either as one value for every slot or as an
/// explicit list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Series {
    Constant(f64),
    Values(Vec<f64>),
}

impl Series {
    pub fn expand(&self, len: usize) -> Vec<f64> {
        match self {
            Series::Constant(v) => vec![*v; len],
            Series::Values(v) => v.clone(),
        }
    }

    fn check(&self, location: &str, len: usize, layer: &str) -> Result<(), ScenarioError> {
        if let Series::Values(v) = self {
            if v.len() != len {
                return Err(ScenarioError::invalid(
                    location,
                    format!("series has {} values, the horizon has {len} {layer} slots", v.len()),
                ));
            }
        }
        for (i, x) in self.expand(len).iter().enumerate() {
            if !(x.is_finite() && *x >= 0.0) {
                return Err(ScenarioError::invalid(format!("{location}[{i}]"), format!("value {x} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// How the dispatch optimizer values P2P energy before it is matched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum P2pPriceForecast {
    /// Utility fallback prices nudged by a small preference for P2P.
    #[default]
    UtilityFallback,
    /// The feeder's most recent volume-weighted contract price.
    LastClearing,
}

fn default_mpc_horizon() -> usize {
    DEFAULT_HORIZON_SLOTS
}
fn default_price_step() -> f64 {
    0.01
}
fn default_nash_rounds() -> usize {
    crate::price_game::DEFAULT_MAX_ROUNDS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon_minutes: i64,
    #[serde(default = "default_mpc_horizon")]
    pub mpc_horizon_slots: usize,
    #[serde(default = "default_price_step")]
    pub price_step: f64,
    #[serde(default = "default_nash_rounds")]
    pub max_nash_rounds: usize,
    #[serde(default)]
    pub p2p_price_forecast: P2pPriceForecast,
}

/// Utility tariff per L1 slot, $/kWh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TariffSection {
    pub retail: Series,
    pub net_metering: Series,
}

fn default_eta() -> f64 {
    0.95
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageSpec {
    pub capacity: f64,
    pub charge_rate: f64,
    pub discharge_rate: f64,
    #[serde(default = "default_eta")]
    pub charge_efficiency: f64,
    #[serde(default = "default_eta")]
    pub discharge_efficiency: f64,
    #[serde(default)]
    pub initial_soc: f64,
}

impl StorageSpec {
    pub fn params(&self) -> StorageParams {
        StorageParams {
            capacity: self.capacity,
            charge_rate: self.charge_rate,
            discharge_rate: self.discharge_rate,
            charge_efficiency: self.charge_efficiency,
            discharge_efficiency: self.discharge_efficiency,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProsumerSpec {
    pub id: AgentId,
    pub feeder: FeederId,
    /// Feeder node the prosumer connects at; defaults to the first node below
    /// the source bus.
    #[serde(default)]
    pub node: Option<String>,
    /// kWh per L1 slot.
    pub demand: Series,
    pub generation: Series,
    #[serde(default)]
    pub storage: Option<StorageSpec>,
    /// Fixed per-slot P2P volume cap, kWh; defaults to forecast surplus/deficit.
    #[serde(default)]
    pub p2p_cap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub r: f64,
    #[serde(default)]
    pub x: f64,
}

fn default_v0() -> f64 {
    1.0
}
fn default_base_kva() -> f64 {
    100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederSpec {
    pub id: FeederId,
    #[serde(default = "default_v0")]
    pub v0: f64,
    #[serde(default = "default_base_kva")]
    pub base_kva: f64,
    #[serde(default)]
    pub band: VoltageBand,
    /// Number of agents targeted per violation; all candidates when absent.
    #[serde(default)]
    pub top_k: Option<usize>,
    /// Radial topology; a lossless two-bus feeder when empty.
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
}

impl FeederSpec {
    fn nodes_or_default(&self) -> Vec<NodeSpec> {
        if self.nodes.is_empty() {
            vec![
                NodeSpec { id: "source".into(), parent: None, r: 0.0, x: 0.0 },
                NodeSpec { id: "bus".into(), parent: Some("source".into()), r: 0.0, x: 0.0 },
            ]
        } else {
            self.nodes.clone()
        }
    }

    fn default_node(&self) -> Option<String> {
        let nodes = self.nodes_or_default();
        nodes.iter().find(|n| n.parent.is_some()).or(nodes.first()).map(|n| n.id.clone())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// Relative standard deviation of generation.
    #[serde(default)]
    pub generation_sigma: f64,
    #[serde(default)]
    pub demand_sigma: f64,
}

fn default_safety_k() -> f64 {
    1.0
}
fn default_offer_fraction() -> f64 {
    crate::vpp::DEFAULT_OFFER_FRACTION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VppSpec {
    pub id: VppId,
    pub feeders: Vec<FeederId>,
    #[serde(default = "default_safety_k")]
    pub safety_k: f64,
    #[serde(default = "default_offer_fraction")]
    pub offer_fraction: f64,
    /// Realized noise for this VPP's prosumers. Bid and L3 margins keep the
    /// scenario-level error model, so this acts as an unmodelled disturbance.
    #[serde(default)]
    pub noise: Option<NoiseSection>,
}

fn default_penalty_multiplier() -> f64 {
    crate::ancillary::DEFAULT_PENALTY_MULTIPLIER
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AncillarySection {
    /// $/kWh per L2 slot.
    pub clearing_price: Series,
    /// kWh per L2 slot.
    pub capacity: Series,
    #[serde(default = "default_penalty_multiplier")]
    pub penalty_multiplier: f64,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flags {
    #[serde(default = "yes")]
    pub l3_enabled: bool,
    #[serde(default = "yes")]
    pub powerflow_enabled: bool,
    #[serde(default = "yes")]
    pub price_game_enabled: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self { l3_enabled: true, powerflow_enabled: true, price_game_enabled: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub grid: GridSection,
    pub tariff: TariffSection,
    #[serde(default)]
    pub prosumers: Vec<ProsumerSpec>,
    #[serde(default)]
    pub feeders: Vec<FeederSpec>,
    #[serde(default)]
    pub vpps: Vec<VppSpec>,
    pub ancillary: AncillarySection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub flags: Flags,
    #[serde(default)]
    pub seed: u64,
}

fn nonneg(location: String, x: f64) -> Result<(), ScenarioError> {
    if x.is_finite() && x >= 0.0 {
        Ok(())
    } else {
        Err(ScenarioError::invalid(location, format!("value {x} must be finite and nonnegative")))
    }
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let location = e.path().to_string();
            let inner = e.into_inner();
            ScenarioError::Parse { location, line: inner.line(), column: inner.column(), message: inner.to_string() }
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn time_grid(&self) -> TimeGrid {
        make_time_grid(self.grid.horizon_minutes).expect("validated horizon")
    }

    pub fn l1_count(&self) -> usize {
        (self.grid.horizon_minutes / Layer::L1.duration()) as usize
    }

    pub fn l2_count(&self) -> usize {
        (self.grid.horizon_minutes / Layer::L2.duration()) as usize
    }

    /// Feeder → VPP membership.
    pub fn feeder_owner(&self) -> BTreeMap<FeederId, VppId> {
        let mut out = BTreeMap::new();
        for v in &self.vpps {
            for f in &v.feeders {
                out.insert(f.clone(), v.id.clone());
            }
        }
        out
    }

    /// Noise parameters that apply to each prosumer.
    pub fn prosumer_noise(&self) -> BTreeMap<AgentId, NoiseSection> {
        let owner = self.feeder_owner();
        let by_vpp: BTreeMap<&VppId, &VppSpec> = self.vpps.iter().map(|v| (&v.id, v)).collect();
        self.prosumers
            .iter()
            .map(|p| {
                let noise = owner.get(&p.feeder).and_then(|v| by_vpp[v].noise).unwrap_or(self.noise);
                (p.id.clone(), noise)
            })
            .collect()
    }

    /// Feeder networks with their prosumers attached.
    pub fn feeder_models(&self) -> Vec<(FeederModel, Option<usize>)> {
        self.feeders
            .iter()
            .map(|f| {
                let mut nodes: Vec<FeederNode> = f
                    .nodes_or_default()
                    .into_iter()
                    .map(|n| FeederNode { id: n.id, parent: n.parent, r: n.r, x: n.x, agents: Vec::new() })
                    .collect();
                let default = f.default_node();
                for p in self.prosumers.iter().filter(|p| p.feeder == f.id) {
                    let node = p.node.clone().or_else(|| default.clone()).expect("feeder has nodes");
                    if let Some(n) = nodes.iter_mut().find(|n| n.id == node) {
                        n.agents.push(p.id.clone());
                    }
                }
                (FeederModel { id: f.id.clone(), nodes, v0: f.v0, band: f.band, base_kva: f.base_kva }, f.top_k)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let g = &self.grid;
        if g.horizon_minutes <= 0 || g.horizon_minutes % Layer::L1.duration() != 0 {
            return Err(ScenarioError::invalid(
                "grid.horizon_minutes",
                format!("horizon {} must be a positive multiple of 30 minutes", g.horizon_minutes),
            ));
        }
        if g.mpc_horizon_slots == 0 {
            return Err(ScenarioError::invalid("grid.mpc_horizon_slots", "must be at least 1"));
        }
        if g.max_nash_rounds == 0 {
            return Err(ScenarioError::invalid("grid.max_nash_rounds", "must be at least 1"));
        }
        let (n1, n2) = (self.l1_count(), self.l2_count());

        self.tariff.retail.check("tariff.retail", n1, "L1")?;
        self.tariff.net_metering.check("tariff.net_metering", n1, "L1")?;
        let retail = self.tariff.retail.expand(n1);
        let nm = self.tariff.net_metering.expand(n1);
        for t in 0..n1 {
            PriceGrid::new(nm[t], retail[t], g.price_step).map_err(|e| {
                ScenarioError::invalid(format!("tariff[{t}]"), format!("net metering {} and retail {}: {e}", nm[t], retail[t]))
            })?;
        }

        let mut feeder_ids = BTreeSet::new();
        for (i, f) in self.feeders.iter().enumerate() {
            let loc = format!("feeders[{i}]");
            if !feeder_ids.insert(&f.id) {
                return Err(ScenarioError::invalid(format!("{loc}.id"), format!("duplicate feeder id {}", f.id)));
            }
            if !(f.base_kva > 0.0 && f.base_kva.is_finite()) {
                return Err(ScenarioError::invalid(format!("{loc}.base_kva"), "must be positive"));
            }
            if !(f.v0 > 0.0 && f.v0.is_finite()) {
                return Err(ScenarioError::invalid(format!("{loc}.v0"), "must be positive"));
            }
            if !(f.band.v_min < f.band.v_max) {
                return Err(ScenarioError::invalid(format!("{loc}.band"), "v_min must be below v_max"));
            }
        }
        for (model, _) in self.feeder_models() {
            let i = self.feeders.iter().position(|f| f.id == model.id).expect("model built from this scenario");
            model.validate().map_err(|e| ScenarioError::invalid(format!("feeders[{i}].nodes"), e.to_string()))?;
        }

        let mut agent_ids = BTreeSet::new();
        for (i, p) in self.prosumers.iter().enumerate() {
            let loc = format!("prosumers[{i}]");
            if p.id.as_str().is_empty() || !agent_ids.insert(&p.id) {
                return Err(ScenarioError::invalid(format!("{loc}.id"), format!("prosumer id {:?} is empty or duplicated", p.id.as_str())));
            }
            if matches!(p.id.as_str(), "UTILITY" | "ISO") {
                return Err(ScenarioError::invalid(format!("{loc}.id"), format!("{} is a reserved id", p.id)));
            }
            let Some(feeder) = self.feeders.iter().find(|f| f.id == p.feeder) else {
                return Err(ScenarioError::invalid(
                    format!("{loc}.feeder"),
                    format!("prosumer {} references unknown feeder {}", p.id, p.feeder),
                ));
            };
            if let Some(node) = &p.node {
                if !feeder.nodes_or_default().iter().any(|n| &n.id == node) {
                    return Err(ScenarioError::invalid(
                        format!("{loc}.node"),
                        format!("prosumer {} references unknown node {node} on feeder {}", p.id, p.feeder),
                    ));
                }
            }
            p.demand.check(&format!("{loc}.demand"), n1, "L1")?;
            p.generation.check(&format!("{loc}.generation"), n1, "L1")?;
            if let Some(s) = &p.storage {
                s.params().validate().map_err(|m| ScenarioError::invalid(format!("{loc}.storage"), m))?;
                if !(s.initial_soc >= 0.0 && s.initial_soc <= s.capacity) {
                    return Err(ScenarioError::invalid(
                        format!("{loc}.storage.initial_soc"),
                        format!("{} outside [0, {}]", s.initial_soc, s.capacity),
                    ));
                }
            }
            if let Some(cap) = p.p2p_cap {
                nonneg(format!("{loc}.p2p_cap"), cap)?;
            }
        }

        let mut vpp_ids = BTreeSet::new();
        let mut owned: BTreeMap<&FeederId, &VppId> = BTreeMap::new();
        for (i, v) in self.vpps.iter().enumerate() {
            let loc = format!("vpps[{i}]");
            if !vpp_ids.insert(&v.id) {
                return Err(ScenarioError::invalid(format!("{loc}.id"), format!("duplicate VPP id {}", v.id)));
            }
            if v.feeders.is_empty() {
                return Err(ScenarioError::invalid(format!("{loc}.feeders"), format!("VPP {} has no feeders", v.id)));
            }
            for (j, f) in v.feeders.iter().enumerate() {
                if !feeder_ids.contains(f) {
                    return Err(ScenarioError::invalid(format!("{loc}.feeders[{j}]"), format!("VPP {} references unknown feeder {f}", v.id)));
                }
                if let Some(other) = owned.insert(f, &v.id) {
                    return Err(ScenarioError::invalid(
                        format!("{loc}.feeders[{j}]"),
                        format!("feeder {f} belongs to both {other} and {}", v.id),
                    ));
                }
            }
            nonneg(format!("{loc}.safety_k"), v.safety_k)?;
            nonneg(format!("{loc}.offer_fraction"), v.offer_fraction)?;
            if let Some(n) = &v.noise {
                nonneg(format!("{loc}.noise.generation_sigma"), n.generation_sigma)?;
                nonneg(format!("{loc}.noise.demand_sigma"), n.demand_sigma)?;
            }
        }
        for (i, f) in self.feeders.iter().enumerate() {
            if !owned.contains_key(&f.id) {
                return Err(ScenarioError::invalid(format!("feeders[{i}].id"), format!("feeder {} belongs to no VPP", f.id)));
            }
        }
        if self.vpps.len() > MAX_EXACT_PLAYERS {
            return Err(ScenarioError::invalid("vpps", format!("{} VPPs exceed the limit of {MAX_EXACT_PLAYERS}", self.vpps.len())));
        }

        self.ancillary.clearing_price.check("ancillary.clearing_price", n2, "L2")?;
        self.ancillary.capacity.check("ancillary.capacity", n2, "L2")?;
        nonneg("ancillary.penalty_multiplier".into(), self.ancillary.penalty_multiplier)?;
        nonneg("noise.generation_sigma".into(), self.noise.generation_sigma)?;
        nonneg("noise.demand_sigma".into(), self.noise.demand_sigma)?;
        Ok(())
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    Scenario::from_json_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> serde_json::Value {
        json!({
            "grid": { "horizon_minutes": 60 },
            "tariff": { "retail": 0.30, "net_metering": 0.05 },
            "prosumers": [
                { "id": "p1", "feeder": "f1", "demand": [0.5, 0.5], "generation": [1.0, 0.0] },
                { "id": "p2", "feeder": "f1", "demand": [0.4, 0.6], "generation": 0.0 }
            ],
            "feeders": [ { "id": "f1" } ],
            "vpps": [ { "id": "v1", "feeders": ["f1"] } ],
            "ancillary": { "clearing_price": [0.2, 0.2, 0.2, 0.2], "capacity": 10.0 },
            "seed": 7
        })
    }

    fn parse(v: serde_json::Value) -> Result<Scenario, ScenarioError> {
        Scenario::from_json_str(&v.to_string())
    }

    fn location(r: Result<Scenario, ScenarioError>) -> String {
        match r {
            Err(ScenarioError::Invalid { location, .. }) | Err(ScenarioError::Parse { location, .. }) => location,
            other => panic!("expected a located error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_file_loads() {
        let s = parse(minimal()).unwrap();
        assert_eq!(s.l1_count(), 2);
        assert!(s.flags.l3_enabled && s.flags.powerflow_enabled && s.flags.price_game_enabled);
        let models = s.feeder_models();
        assert_eq!(models[0].0.nodes[1].agents.len(), 2);
    }

    #[test]
    fn unknown_feeder_named() {
        let mut v = minimal();
        v["prosumers"][1]["feeder"] = json!("f9");
        let err = parse(v).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("prosumers[1].feeder") && msg.contains("p2") && msg.contains("f9"), "{msg}");
    }

    #[test]
    fn short_ancillary_series() {
        let mut v = minimal();
        v["ancillary"]["clearing_price"] = json!([0.2, 0.2, 0.2]);
        assert_eq!(location(parse(v)), "ancillary.clearing_price");
    }

    #[test]
    fn schema_errors_are_located() {
        let mut v = minimal();
        v["prosumers"][0]["storage"] = json!({ "capacity": "big", "charge_rate": 1, "discharge_rate": 1 });
        assert_eq!(location(parse(v)), "prosumers[0].storage.capacity");
        let mut v = minimal();
        v["flags"] = json!({ "l4_enabled": true });
        assert!(location(parse(v)).starts_with("flags"));
    }

    #[test]
    fn horizon_must_align() {
        let mut v = minimal();
        v["grid"]["horizon_minutes"] = json!(45);
        assert_eq!(location(parse(v)), "grid.horizon_minutes");
    }

    #[test]
    fn feeder_ownership_checked() {
        let mut v = minimal();
        v["vpps"] = json!([{ "id": "v1", "feeders": ["f1"] }, { "id": "v2", "feeders": ["f1"] }]);
        assert_eq!(location(parse(v)), "vpps[1].feeders[0]");
        let mut v = minimal();
        v["feeders"] = json!([{ "id": "f1" }, { "id": "f2" }]);
        assert_eq!(location(parse(v)), "feeders[1].id");
    }

    #[test]
    fn storage_checked() {
        let mut v = minimal();
        v["prosumers"][0]["storage"] = json!({ "capacity": 2.0, "charge_rate": 1.0, "discharge_rate": 1.0, "initial_soc": 3.0 });
        assert_eq!(location(parse(v)), "prosumers[0].storage.initial_soc");
    }

    #[test]
    fn tariff_band_checked() {
        let mut v = minimal();
        v["tariff"]["net_metering"] = json!(0.4);
        assert_eq!(location(parse(v)), "tariff[0]");
    }

    #[test]
    fn vpp_noise_overrides() {
        let mut v = minimal();
        v["noise"] = json!({ "generation_sigma": 0.05 });
        v["vpps"][0]["noise"] = json!({ "generation_sigma": 0.3 });
        let s = parse(v).unwrap();
        assert_eq!(s.prosumer_noise()[&AgentId::from("p1")].generation_sigma, 0.3);
    }

    #[test]
    fn missing_file_is_io() {
        assert!(load_scenario("/definitely/not/here.json").unwrap_err().is_io());
    }
}
