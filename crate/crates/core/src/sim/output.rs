//! Flat-file run outputs. Floats carry 9 significant digits and money is
//! written as exact nano-dollar decimals, so files are byte-stable.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::{sig9, RunReport, Summary};
use super::scenario::Flags;
use crate::domain::Money;

pub const OUTPUT_FILES: [&str; 8] = [
    "ledger.csv",
    "contracts.csv",
    "ancillary.csv",
    "l3_trades.csv",
    "violations.csv",
    "events.csv",
    "summary.json",
    "run_meta.json",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub flags: Flags,
    pub baseline: bool,
    pub tool_version: String,
}

impl RunMeta {
    pub fn new(run: &RunReport) -> Self {
        Self {
            seed: run.seed,
            flags: run.flags,
            baseline: run.mode == super::report::RunMode::Baseline,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

pub fn fmt_f64(x: f64) -> String {
    let v = sig9(x);
    if v == 0.0 {
        "0".into()
    } else {
        v.to_string()
    }
}

pub fn fmt_money(m: Money) -> String {
    let n = m.nanos();
    let sign = if n < 0 { "-" } else { "" };
    let a = n.unsigned_abs();
    format!("{sign}{}.{:09}", a / 1_000_000_000, a % 1_000_000_000)
}

fn write_csv<const N: usize>(path: &Path, header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

pub fn write_outputs(dir: &Path, run: &RunReport, summary: &Summary) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(
        &dir.join("ledger.csv"),
        ["slot_start", "payer", "payee", "amount", "reason"],
        run.ledger.entries().iter().map(|e| {
            [e.slot_start.to_string(), e.payer.to_string(), e.payee.to_string(), fmt_money(e.amount), e.reason.to_string()]
        }),
    )?;
    write_csv(
        &dir.join("contracts.csv"),
        ["id", "slot_start", "feeder", "seller", "buyer", "quantity", "price"],
        run.contracts.iter().map(|c| {
            [
                c.id.to_string(),
                c.slot.start().to_string(),
                c.feeder.to_string(),
                c.seller.to_string(),
                c.buyer.to_string(),
                fmt_f64(c.quantity),
                fmt_f64(c.price),
            ]
        }),
    )?;
    write_csv(
        &dir.join("ancillary.csv"),
        [
            "slot_start",
            "vpp",
            "bid_quantity",
            "offer_price",
            "awarded",
            "clearing_price",
            "measured",
            "l3_net",
            "delivered",
            "shortfall",
            "sourced",
            "revenue",
            "penalty",
        ],
        run.ancillary.iter().map(|r| {
            [
                r.slot_start.to_string(),
                r.vpp.to_string(),
                fmt_f64(r.bid_quantity),
                fmt_f64(r.offer_price),
                fmt_f64(r.awarded),
                fmt_f64(r.clearing_price),
                fmt_f64(r.measured),
                fmt_f64(r.l3_net),
                fmt_f64(r.delivered),
                fmt_f64(r.shortfall),
                fmt_f64(r.sourced),
                fmt_money(r.revenue),
                fmt_money(r.penalty),
            ]
        }),
    )?;
    write_csv(
        &dir.join("l3_trades.csv"),
        ["l3_slot_start", "seller", "buyer", "quantity", "payment", "implicit_price"],
        run.l3_trades.iter().map(|t| {
            [
                t.l3_slot.start().to_string(),
                t.seller.to_string(),
                t.buyer.to_string(),
                fmt_f64(t.quantity),
                fmt_money(t.payment),
                fmt_f64(t.implicit_price),
            ]
        }),
    )?;
    write_csv(
        &dir.join("violations.csv"),
        ["step_start", "feeder", "node", "kind", "v", "excursion"],
        run.violations.iter().map(|v| {
            let kind = match v.kind {
                crate::powerflow::ViolationKind::UnderVoltage => "under_voltage",
                crate::powerflow::ViolationKind::OverVoltage => "over_voltage",
            };
            [v.step_start.to_string(), v.feeder.to_string(), v.node.clone(), kind.to_string(), fmt_f64(v.v), fmt_f64(v.excursion)]
        }),
    )?;
    write_csv(
        &dir.join("events.csv"),
        ["time", "kind", "slot_start"],
        run.events.iter().map(|e| [e.time.to_string(), e.kind.to_string(), e.slot.start().to_string()]),
    )?;
    write_json(&dir.join("summary.json"), summary)?;
    write_json(&dir.join("run_meta.json"), &RunMeta::new(run))
}

pub fn read_summary(dir: &Path) -> io::Result<Summary> {
    let text = fs::read_to_string(dir.join("summary.json"))?;
    serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn money_is_exact() {
        assert_eq!(fmt_money(Money(1_500_000_000)), "1.500000000");
        assert_eq!(fmt_money(Money(-7)), "-0.000000007");
        assert_eq!(fmt_money(Money::ZERO), "0.000000000");
    }

    #[test]
    fn floats_are_short() {
        assert_eq!(fmt_f64(0.1 + 0.2), "0.3");
        assert_eq!(fmt_f64(-0.0), "0");
        assert_eq!(fmt_f64(2.0 / 3.0), "0.666666667");
    }
}
