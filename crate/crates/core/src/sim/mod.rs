//! Scenario loading, the multi-rate event loop and run outputs.

mod engine;
mod events;
mod noise;
mod output;
mod report;
mod scenario;

pub use engine::{baseline_run, run, run_mode, SimError};
pub use events::{schedule_events, Event, EventKind, EventQueue};
pub use noise::{realize, substream, StreamKind};
pub use output::{fmt_f64, fmt_money, read_summary, write_outputs, RunMeta, OUTPUT_FILES};
pub use report::{
    sig9, AccountingRecord, AncillaryRecord, NashRecord, NashSummary, ProsumerSummary, RunMode, RunReport, SignalRecord,
    SlotRef, Summary, Totals, ViolationRecord, VppSummary,
};
pub use scenario::{
    load_scenario, AncillarySection, FeederSpec, Flags, GridSection, NodeSpec, NoiseSection, P2pPriceForecast, ProsumerSpec,
    Scenario, ScenarioError, Series, StorageSpec, TariffSection, VppSpec,
};
