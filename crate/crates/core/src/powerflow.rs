//! Linearized radial power flow (LinDistFlow) for the feeder reliability
//! screen, with voltage-band checks and advisory corrective signals.
//!
//! Per-unit convention: `P`, `Q` are net withdrawals (load positive). Branch
//! flows are the downstream sums and squared voltage drops by `2(rP + xQ)`
//! across each branch.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AgentId, FeederId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeederNode {
    pub id: String,
    /// `None` for the source bus.
    #[serde(default)]
    pub parent: Option<String>,
    /// Resistance of the branch from the parent, pu.
    #[serde(default)]
    pub r: f64,
    /// Reactance of the branch from the parent, pu.
    #[serde(default)]
    pub x: f64,
    #[serde(default)]
    pub agents: Vec<AgentId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoltageBand {
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for VoltageBand {
    fn default() -> Self {
        Self { v_min: 0.95, v_max: 1.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeederModel {
    pub id: FeederId,
    pub nodes: Vec<FeederNode>,
    /// Source voltage, pu.
    pub v0: f64,
    pub band: VoltageBand,
    /// Power base, kVA.
    pub base_kva: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum PowerFlowError {
    #[error("feeder {feeder}: {why}")]
    Topology { feeder: FeederId, why: String },
    #[error("feeder {feeder}: expected {expected} node injections, got {got}")]
    InjectionCount { feeder: FeederId, expected: usize, got: usize },
    #[error("feeder {feeder}: squared voltage {u} at node {node} is outside the model range")]
    ModelRange { feeder: FeederId, node: String, u: f64 },
}

/// Net withdrawal at a node, pu.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeLoad {
    pub p: f64,
    pub q: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowResult {
    /// Squared voltage per node, pu².
    pub u: Vec<f64>,
    /// Voltage magnitude per node, pu.
    pub v: Vec<f64>,
    /// Real flow into each node from its parent; at the source bus, the flow
    /// drawn from the substation.
    pub p_flow: Vec<f64>,
    pub q_flow: Vec<f64>,
}

struct Tree {
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    /// Breadth-first order from the root.
    order: Vec<usize>,
}

impl FeederModel {
    fn topology_error(&self, why: impl Into<String>) -> PowerFlowError {
        PowerFlowError::Topology { feeder: self.id.clone(), why: why.into() }
    }

    fn tree(&self) -> Result<Tree, PowerFlowError> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.id.as_str(), i).is_some() {
                return Err(self.topology_error(format!("duplicate node id {}", n.id)));
            }
            if !(n.r >= 0.0 && n.x >= 0.0 && n.r.is_finite() && n.x.is_finite()) {
                return Err(self.topology_error(format!("branch into {} needs finite r, x ≥ 0", n.id)));
            }
        }
        let mut parent = vec![None; self.nodes.len()];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        let mut roots = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            match &n.parent {
                None => roots.push(i),
                Some(p) => {
                    let &pi = index
                        .get(p.as_str())
                        .ok_or_else(|| self.topology_error(format!("node {} has unknown parent {p}", n.id)))?;
                    parent[i] = Some(pi);
                    children[pi].push(i);
                }
            }
        }
        if roots.len() != 1 {
            return Err(self.topology_error(format!("expected exactly one source bus, found {}", roots.len())));
        }
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut queue = VecDeque::from([roots[0]]);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            queue.extend(children[i].iter().copied());
        }
        if order.len() != self.nodes.len() {
            return Err(self.topology_error("not a tree: some nodes are unreachable from the source"));
        }
        Ok(Tree { parent, children, order })
    }

    pub fn validate(&self) -> Result<(), PowerFlowError> {
        self.tree().map(|_| ())
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Node each agent is attached to.
    pub fn agent_nodes(&self) -> BTreeMap<AgentId, usize> {
        let mut out = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for a in &n.agents {
                out.insert(a.clone(), i);
            }
        }
        out
    }

    /// Resistance summed along the path from the source to `node`.
    fn path_resistance(&self, tree: &Tree, node: usize) -> f64 {
        let mut r = 0.0;
        let mut at = node;
        while let Some(p) = tree.parent[at] {
            r += self.nodes[at].r;
            at = p;
        }
        r
    }

    fn in_subtree(tree: &Tree, node: usize, root: usize) -> bool {
        let mut at = Some(node);
        while let Some(i) = at {
            if i == root {
                return true;
            }
            at = tree.parent[i];
        }
        false
    }
}

pub fn run_lindistflow(feeder: &FeederModel, loads: &[NodeLoad]) -> Result<PowerFlowResult, PowerFlowError> {
    let tree = feeder.tree()?;
    let n = feeder.nodes.len();
    if loads.len() != n {
        return Err(PowerFlowError::InjectionCount { feeder: feeder.id.clone(), expected: n, got: loads.len() });
    }
    let mut p_flow = vec![0.0; n];
    let mut q_flow = vec![0.0; n];
    for &i in tree.order.iter().rev() {
        p_flow[i] = tree.children[i].iter().fold(loads[i].p, |acc, &c| acc + p_flow[c]);
        q_flow[i] = tree.children[i].iter().fold(loads[i].q, |acc, &c| acc + q_flow[c]);
    }
    let mut u = vec![0.0; n];
    for &i in &tree.order {
        u[i] = match tree.parent[i] {
            None => feeder.v0 * feeder.v0,
            Some(p) => u[p] - 2.0 * (feeder.nodes[i].r * p_flow[i] + feeder.nodes[i].x * q_flow[i]),
        };
        if !(u[i] > 0.0) {
            return Err(PowerFlowError::ModelRange { feeder: feeder.id.clone(), node: feeder.nodes[i].id.clone(), u: u[i] });
        }
    }
    let v = u.iter().map(|x| x.sqrt()).collect();
    Ok(PowerFlowResult { u, v, p_flow, q_flow })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnderVoltage,
    OverVoltage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub node: usize,
    pub kind: ViolationKind,
    /// pu.
    pub v: f64,
    /// Distance outside the band, pu.
    pub excursion: f64,
}

pub fn check_limits(result: &PowerFlowResult, band: VoltageBand) -> Vec<Violation> {
    result
        .v
        .iter()
        .enumerate()
        .filter_map(|(node, &v)| {
            if v < band.v_min {
                Some(Violation { node, kind: ViolationKind::UnderVoltage, v, excursion: band.v_min - v })
            } else if v > band.v_max {
                Some(Violation { node, kind: ViolationKind::OverVoltage, v, excursion: v - band.v_max })
            } else {
                None
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Reduce,
    Increase,
}

/// What an agent should change, from its own point of view: an over-voltage
/// asks injectors to reduce injection, an under-voltage asks withdrawers to
/// reduce withdrawal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentSignal {
    pub agent: AgentId,
    pub kind: ViolationKind,
    pub direction: Direction,
    pub kw: f64,
    pub kvar: f64,
    pub reason: String,
}

/// Advisory corrections for the given violations.
///
/// `agent_withdrawal_kw` holds each agent's net real withdrawal (negative for
/// injectors). Candidates sit at the violating node, or anywhere below it when
/// the node itself has none; the `top_k` largest are targeted (all when
/// `None`). The total hint is the real-power change that would bring the
/// node back to the band edge, capped at the candidates' combined power and
/// split in proportion to each candidate's power. An agent hit by several
/// violations keeps the largest hint.
pub fn corrective_signals(
    violations: &[Violation],
    feeder: &FeederModel,
    result: &PowerFlowResult,
    agent_withdrawal_kw: &BTreeMap<AgentId, f64>,
    top_k: Option<usize>,
) -> Result<Vec<AdjustmentSignal>, PowerFlowError> {
    let tree = feeder.tree()?;
    let nodes = feeder.agent_nodes();
    let mut merged: BTreeMap<AgentId, AdjustmentSignal> = BTreeMap::new();
    for viol in violations {
        // signed so that candidates have positive "offending" power
        let offending = |a: &AgentId| -> f64 {
            let w = agent_withdrawal_kw.get(a).copied().unwrap_or(0.0);
            match viol.kind {
                ViolationKind::OverVoltage => -w,
                ViolationKind::UnderVoltage => w,
            }
        };
        let pick = |here: bool| -> Vec<(AgentId, f64)> {
            nodes
                .iter()
                .filter(|(_, &n)| if here { n == viol.node } else { FeederModel::in_subtree(&tree, n, viol.node) })
                .map(|(a, _)| (a.clone(), offending(a)))
                .filter(|(_, p)| *p > 0.0)
                .collect()
        };
        let mut cands = pick(true);
        if cands.is_empty() {
            cands = pick(false);
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(k) = top_k {
            cands.truncate(k.max(1));
        }
        let available: f64 = cands.iter().map(|c| c.1).sum();
        if available <= 0.0 {
            continue;
        }
        let edge = match viol.kind {
            ViolationKind::OverVoltage => feeder.band.v_max,
            ViolationKind::UnderVoltage => feeder.band.v_min,
        };
        let du = (result.u[viol.node] - edge * edge).abs();
        let r = feeder.path_resistance(&tree, viol.node);
        let needed_kw = if r > 0.0 { du / (2.0 * r) * feeder.base_kva } else { available };
        let total = needed_kw.min(available);
        let what = match viol.kind {
            ViolationKind::OverVoltage => "over-voltage",
            ViolationKind::UnderVoltage => "under-voltage",
        };
        for (agent, p) in cands {
            let kw = total * p / available;
            let reason = format!("{what} {:.6} pu at node {}", viol.v, feeder.nodes[viol.node].id);
            let sig = AdjustmentSignal { agent: agent.clone(), kind: viol.kind, direction: Direction::Reduce, kw, kvar: 0.0, reason };
            match merged.get(&agent) {
                Some(old) if old.kw >= kw => {}
                _ => {
                    merged.insert(agent, sig);
                }
            }
        }
    }
    Ok(merged.into_values().collect())
}
