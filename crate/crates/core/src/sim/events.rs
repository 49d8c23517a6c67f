//! The multi-rate event schedule.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{Layer, MarketSlot, TimeGrid};

/// Event kinds in tie-break rank order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    L1Clear,
    L2Bid,
    L3Market,
    Deliver,
    Settle,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::L1Clear => "L1_CLEAR",
            EventKind::L2Bid => "L2_BID",
            EventKind::L3Market => "L3_MARKET",
            EventKind::Deliver => "DELIVER",
            EventKind::Settle => "SETTLE",
        }
    }

    /// Minutes between the event and the start of its slot.
    pub fn offset(self, slot: MarketSlot) -> i64 {
        match self {
            EventKind::L1Clear => -Layer::L1.duration(),
            EventKind::L2Bid => -Layer::L2.duration(),
            EventKind::L3Market => -Layer::L3.duration(),
            EventKind::Deliver => 0,
            EventKind::Settle => slot.duration(),
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub time: i64,
    pub kind: EventKind,
    pub slot: MarketSlot,
}

impl Event {
    pub fn new(kind: EventKind, slot: MarketSlot) -> Self {
        Self { time: slot.start() + kind.offset(slot), kind, slot }
    }

    fn key(&self) -> (i64, EventKind, i64) {
        (self.time, self.kind, self.slot.start())
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} for {} at t={}", self.kind, self.slot, self.time)
    }
}

/// Events in execution order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventQueue {
    events: Vec<Event>,
}

impl EventQueue {
    pub fn from_grid(grid: &TimeGrid) -> Self {
        let mut events = Vec::new();
        for &s in grid.slots(Layer::L1) {
            events.push(Event::new(EventKind::L1Clear, s));
            events.push(Event::new(EventKind::Settle, s));
        }
        for &s in grid.slots(Layer::L2) {
            events.push(Event::new(EventKind::L2Bid, s));
        }
        for &s in grid.slots(Layer::L3) {
            events.push(Event::new(EventKind::L3Market, s));
            events.push(Event::new(EventKind::Deliver, s));
        }
        events.sort();
        Self { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Event> {
        self.events.iter()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

impl<'a> IntoIterator for &'a EventQueue {
    type Item = &'a Event;
    type IntoIter = std::slice::Iter<'a, Event>;
    fn into_iter(self) -> Self::IntoIter {
        self.events.iter()
    }
}

pub fn schedule_events(scenario: &super::Scenario) -> EventQueue {
    EventQueue::from_grid(&scenario.time_grid())
}
