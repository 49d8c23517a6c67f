//! Shared domain types: identifiers, money, energy quantization and the
//! aligned 30/15/5-minute market time grid.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Resolution of energy quantities, kWh.
pub const ENERGY_QUANTUM: f64 = 1e-6;

/// Nano-dollars per dollar.
const NANOS_PER_DOLLAR: f64 = 1e9;

/// Round an energy quantity to the 1e-6 kWh grid used for comparisons.
pub fn quantize_kwh(kwh: f64) -> f64 {
    (kwh / ENERGY_QUANTUM).round() * ENERGY_QUANTUM
}

/// Round a dollar amount to the 1e-4 $ precision used in reports.
pub fn round_report_dollars(dollars: f64) -> f64 {
    (dollars * 1e4).round() / 1e4
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// A prosumer (one microgrid behind one point of interconnection).
    AgentId
);
string_id!(FeederId);
string_id!(VppId);

/// Money in integer nano-dollars, so ledger sums are exact.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Money(pub i64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn from_dollars(dollars: f64) -> Money {
        Money((dollars * NANOS_PER_DOLLAR).round() as i64)
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / NANOS_PER_DOLLAR
    }

    pub fn nanos(self) -> i64 {
        self.0
    }

    pub fn abs(self) -> Money {
        Money(self.0.abs())
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl std::ops::Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl std::ops::Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl std::ops::SubAssign for Money {
    fn sub_assign(&mut self, rhs: Money) {
        self.0 -= rhs.0;
    }
}

impl std::ops::Neg for Money {
    type Output = Money;
    fn neg(self) -> Money {
        Money(-self.0)
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        Money(iter.map(|m| m.0).sum())
    }
}

/// Split `total` into integer parts proportional to `weights` using the
/// largest-remainder rule. The parts always sum to `total` exactly; ties in
/// the remainder go to the earlier index.
pub fn apportion(total: Money, weights: &[f64]) -> Vec<Money> {
    let sum: f64 = weights.iter().filter(|w| **w > 0.0).sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if sum <= 0.0 {
        let mut out = vec![Money::ZERO; weights.len()];
        out[0] = total;
        return out;
    }
    let sign = total.0.signum();
    let magnitude = total.0.abs();
    let shares: Vec<f64> = weights
        .iter()
        .map(|w| if *w > 0.0 { magnitude as f64 * w / sum } else { 0.0 })
        .collect();
    let mut parts: Vec<i64> = shares.iter().map(|s| s.floor() as i64).collect();
    let mut left = magnitude - parts.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..weights.len()).filter(|i| weights[*i] > 0.0).collect();
    order.sort_by(|a, b| {
        let ra = shares[*a] - shares[*a].floor();
        let rb = shares[*b] - shares[*b].floor();
        rb.total_cmp(&ra).then(a.cmp(b))
    });
    let mut k = 0;
    while left > 0 && !order.is_empty() {
        parts[order[k % order.len()]] += 1;
        left -= 1;
        k += 1;
    }
    while left < 0 && !order.is_empty() {
        parts[order[k % order.len()]] -= 1;
        left += 1;
        k += 1;
    }
    parts.into_iter().map(|p| Money(p * sign)).collect()
}

/// The three market layers and their slot lengths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Layer {
    L1,
    L2,
    L3,
}

impl Layer {
    pub const fn duration(self) -> i64 {
        match self {
            Layer::L1 => 30,
            Layer::L2 => 15,
            Layer::L3 => 5,
        }
    }

    pub fn parent(self) -> Option<Layer> {
        match self {
            Layer::L1 => None,
            Layer::L2 => Some(Layer::L1),
            Layer::L3 => Some(Layer::L2),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("horizon must be a positive multiple of 30 minutes, got {0}")]
    BadHorizon(i64),
    #[error("slot starting at {start} is not aligned to the {duration}-minute grid")]
    Misaligned { start: i64, duration: i64 },
    #[error("L1 slots have no parent")]
    NoParent,
}

/// A delivery interval on one layer's grid. Times are integer minutes since
/// scenario start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MarketSlot {
    layer: Layer,
    start: i64,
}

impl MarketSlot {
    pub fn new(layer: Layer, start: i64) -> Result<Self, GridError> {
        let duration = layer.duration();
        if start.rem_euclid(duration) != 0 {
            return Err(GridError::Misaligned { start, duration });
        }
        Ok(Self { layer, start })
    }

    pub fn layer(&self) -> Layer {
        self.layer
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    pub fn duration(&self) -> i64 {
        self.layer.duration()
    }

    pub fn end(&self) -> i64 {
        self.start + self.duration()
    }

    /// Index of this slot on its layer's grid.
    pub fn index(&self) -> usize {
        (self.start / self.duration()) as usize
    }

    pub fn contains(&self, other: &MarketSlot) -> bool {
        other.start >= self.start && other.end() <= self.end()
    }

    /// The slots one layer down nested in this one.
    pub fn children(&self) -> Vec<MarketSlot> {
        match self.layer {
            Layer::L1 => (0..2).map(|k| MarketSlot { layer: Layer::L2, start: self.start + 15 * k }).collect(),
            Layer::L2 => (0..3).map(|k| MarketSlot { layer: Layer::L3, start: self.start + 5 * k }).collect(),
            Layer::L3 => Vec::new(),
        }
    }
}

impl fmt::Display for MarketSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}[{},{})", self.layer, self.start, self.end())
    }
}

/// Returns the unique enclosing slot one layer up.
pub fn parent_slot(slot: MarketSlot) -> Result<MarketSlot, GridError> {
    let parent = slot.layer.parent().ok_or(GridError::NoParent)?;
    let d = parent.duration();
    Ok(MarketSlot { layer: parent, start: slot.start.div_euclid(d) * d })
}

/// All slots of every layer covering `[0, horizon)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    pub horizon: i64,
    pub l1: Vec<MarketSlot>,
    pub l2: Vec<MarketSlot>,
    pub l3: Vec<MarketSlot>,
}

impl TimeGrid {
    pub fn slots(&self, layer: Layer) -> &[MarketSlot] {
        match layer {
            Layer::L1 => &self.l1,
            Layer::L2 => &self.l2,
            Layer::L3 => &self.l3,
        }
    }
}

pub fn make_time_grid(horizon: i64) -> Result<TimeGrid, GridError> {
    if horizon <= 0 || horizon % 30 != 0 {
        return Err(GridError::BadHorizon(horizon));
    }
    let layer_slots = |layer: Layer| -> Vec<MarketSlot> {
        (0..horizon / layer.duration())
            .map(|k| MarketSlot { layer, start: k * layer.duration() })
            .collect()
    };
    Ok(TimeGrid { horizon, l1: layer_slots(Layer::L1), l2: layer_slots(Layer::L2), l3: layer_slots(Layer::L3) })
}

/// One price per slot of a stated layer, $/kWh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub layer: Layer,
    pub values: Vec<f64>,
}

impl PriceSeries {
    pub fn new(layer: Layer, values: Vec<f64>) -> Self {
        Self { layer, values }
    }

    pub fn constant(layer: Layer, value: f64, len: usize) -> Self {
        Self { layer, values: vec![value; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.values.iter().all(|v| v.is_finite() && *v >= 0.0)
    }

    /// The sub-series starting at `offset`, at most `len` long.
    pub fn window(&self, offset: usize, len: usize) -> PriceSeries {
        let end = (offset + len).min(self.values.len());
        let start = offset.min(end);
        PriceSeries { layer: self.layer, values: self.values[start..end].to_vec() }
    }
}
