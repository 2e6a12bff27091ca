//! FLOP accounting, communication latency and exit-point selection.
//!
//! Digital strategies (edge-only, model split) send float payloads at the
//! Shannon rate; a branch sends `d_b` real channel symbols at `2W` symbols
//! per second.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::branch::readout_flops;
use crate::channel::{shannon_capacity, ChannelConfig};
use crate::error::{Error, Result};
use crate::gnn::knn_flops;
use crate::model::BranchyNet;
use crate::training::Accuracy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub flops_per_second: f64,
    /// Width of one raw value in digital payloads.
    pub bits_per_raw_value: u32,
    /// Edge-server compute rate; `None` treats server time as zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_flops_per_second: Option<f64>,
}

impl Default for DeviceProfile {
    fn default() -> Self {
        DeviceProfile { flops_per_second: 1e9, bits_per_raw_value: 32, server_flops_per_second: None }
    }
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.flops_per_second > 0.0 && self.flops_per_second.is_finite()) {
            return Err(Error::Config("device.flops_per_second must be positive".into()));
        }
        if self.bits_per_raw_value == 0 {
            return Err(Error::Config("device.bits_per_raw_value must be positive".into()));
        }
        if let Some(r) = self.server_flops_per_second {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config("device.server_flops_per_second must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Layer and exit indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    DeviceOnly,
    EdgeOnly,
    ModelSplit(usize),
    Branch(usize),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::DeviceOnly => f.write_str("device_only"),
            Strategy::EdgeOnly => f.write_str("edge_only"),
            Strategy::ModelSplit(l) => write!(f, "model_split_{l}"),
            Strategy::Branch(b) => write!(f, "branch_{b}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    Nothing,
    Bits(u64),
    Symbols(usize),
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payload::Nothing => f.write_str("none"),
            Payload::Bits(b) => write!(f, "{b} bits"),
            Payload::Symbols(s) => write!(f, "{s} symbols"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub strategy: Strategy,
    pub on_device_flops: u64,
    pub server_flops: u64,
    pub payload: Payload,
    pub comm_latency_s: f64,
    pub compute_latency_s: f64,
    pub total_s: f64,
}

/// `values · bits / C`.
pub fn digital_latency(values: usize, bits_per_value: u32, channel: &ChannelConfig) -> f64 {
    (values as f64 * bits_per_value as f64) / shannon_capacity(channel)
}

/// `d / (2W)`.
pub fn jscc_latency(symbols: usize, channel: &ChannelConfig) -> f64 {
    symbols as f64 / (2.0 * channel.bandwidth_hz)
}

/// Analytical FLOPs of a named component on a cloud of `n` points.
///
/// Names: `main`, `backbone.edge{l}`, `backbone.knn{l}`, `backbone.prefix{l}`,
/// `backbone.head`, `branch{b}.pointwise`, `branch{b}.readout`,
/// `branch{b}.encoder`, `branch{b}.device`, `branch{b}.server`.
pub fn count_flops(net: &BranchyNet, n: usize, component: &str) -> Result<u64> {
    let unknown = || Error::Config(format!("unknown component `{component}`"));
    let index = |s: &str, max: usize| -> Result<usize> {
        s.parse::<usize>().ok().filter(|i| (1..=max).contains(i)).ok_or_else(unknown)
    };
    let depth = net.depth();
    if component == "main" {
        return Ok(net.full_flops(n));
    }
    if component == "backbone.head" {
        return Ok(net.backbone.head_flops(n));
    }
    if let Some(rest) = component.strip_prefix("backbone.") {
        let k = net.backbone.k;
        if let Some(l) = rest.strip_prefix("edge") {
            return Ok(net.backbone.layers[index(l, depth)? - 1].flops(n, k));
        }
        if let Some(l) = rest.strip_prefix("knn") {
            return Ok(knn_flops(n, net.backbone.layers[index(l, depth)? - 1].in_dim()));
        }
        if let Some(l) = rest.strip_prefix("prefix") {
            return Ok(net.backbone.prefix_flops(n, index(l, depth)?));
        }
        return Err(unknown());
    }
    let (head, part) = component.split_once('.').ok_or_else(unknown)?;
    let b = index(head.strip_prefix("branch").ok_or_else(unknown)?, net.branches.len())?;
    let branch = &net.branches[b - 1];
    match part {
        "pointwise" => Ok(branch.pointwise.flops(n)),
        "readout" => Ok(readout_flops(n, branch.pointwise.out_width())),
        "encoder" => Ok(branch.encoder.flops(1)),
        "device" => Ok(branch.device_flops(n)),
        "server" => Ok(branch.server_flops()),
        _ => Err(unknown()),
    }
}

/// Test accuracy of each strategy. Digital strategies run the full main
/// branch, so they share its accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    pub main: f64,
    pub branches: Vec<f64>,
}

impl AccuracyTable {
    pub fn uniform(value: f64, branches: usize) -> Self {
        AccuracyTable { main: value, branches: vec![value; branches] }
    }

    pub fn get(&self, strategy: Strategy) -> Option<f64> {
        match strategy {
            Strategy::Branch(b) => self.branches.get(b.checked_sub(1)?).copied(),
            _ => Some(self.main),
        }
    }
}

impl From<&Accuracy> for AccuracyTable {
    fn from(a: &Accuracy) -> Self {
        AccuracyTable { main: a.main, branches: a.branches.clone() }
    }
}

pub struct Planner<'a> {
    pub net: &'a BranchyNet,
    pub points: usize,
    pub profile: DeviceProfile,
}

impl<'a> Planner<'a> {
    pub fn new(net: &'a BranchyNet, points: usize, profile: DeviceProfile) -> Result<Self> {
        profile.validate()?;
        if points <= net.backbone.k {
            return Err(Error::Config(format!("{points} points is too few for k = {}", net.backbone.k)));
        }
        Ok(Planner { net, points, profile })
    }

    /// Every strategy in a fixed order: device-only, edge-only, each split
    /// layer, each branch.
    pub fn strategies(&self) -> Vec<Strategy> {
        let mut out = vec![Strategy::DeviceOnly, Strategy::EdgeOnly];
        out.extend((1..=self.net.depth()).map(Strategy::ModelSplit));
        out.extend((1..=self.net.branches.len()).map(Strategy::Branch));
        out
    }

    /// Device FLOPs, server FLOPs and payload of a strategy.
    fn cost(&self, strategy: Strategy) -> (u64, u64, Payload) {
        let (net, n) = (self.net, self.points);
        let bits = self.profile.bits_per_raw_value as u64;
        let full = net.full_flops(n);
        match strategy {
            Strategy::DeviceOnly => (full, 0, Payload::Nothing),
            Strategy::EdgeOnly => (0, full, Payload::Bits((n * 3) as u64 * bits)),
            Strategy::ModelSplit(l) => {
                let device = net.backbone.prefix_flops(n, l);
                let width = net.backbone.layers[l - 1].out_dim();
                (device, full - device, Payload::Bits((n * width) as u64 * bits))
            }
            Strategy::Branch(b) => {
                let branch = &net.branches[b - 1];
                (net.branch_device_flops(b - 1, n), branch.server_flops(), Payload::Symbols(branch.symbol_count()))
            }
        }
    }

    pub fn comm_latency(&self, strategy: Strategy, channel: &ChannelConfig) -> f64 {
        match self.cost(strategy).2 {
            Payload::Nothing => 0.0,
            Payload::Bits(bits) => bits as f64 / shannon_capacity(channel),
            Payload::Symbols(d) => jscc_latency(d, channel),
        }
    }

    pub fn report(&self, strategy: Strategy, channel: &ChannelConfig) -> LatencyReport {
        let (on_device_flops, server_flops, payload) = self.cost(strategy);
        let comm_latency_s = self.comm_latency(strategy, channel);
        let server_s = self.profile.server_flops_per_second.map_or(0.0, |r| server_flops as f64 / r);
        let compute_latency_s = on_device_flops as f64 / self.profile.flops_per_second + server_s;
        LatencyReport {
            strategy,
            on_device_flops,
            server_flops,
            payload,
            comm_latency_s,
            compute_latency_s,
            total_s: comm_latency_s + compute_latency_s,
        }
    }

    pub fn reports(&self, channel: &ChannelConfig) -> Vec<LatencyReport> {
        self.strategies().into_iter().map(|s| self.report(s, channel)).collect()
    }

    pub fn plan_exit(&self, channel: &ChannelConfig, accuracy: &AccuracyTable, floor: f64) -> Result<LatencyReport> {
        plan_exit(&self.reports(channel), accuracy, floor)
    }

    /// Reports and the planner's choice at every channel setting, in grid order.
    pub fn sweep(&self, channels: &[ChannelConfig], accuracy: &AccuracyTable, floor: f64) -> Result<Vec<SweepPoint>> {
        channels
            .iter()
            .map(|ch| {
                ch.validate()?;
                let reports = self.reports(ch);
                let chosen = plan_exit(&reports, accuracy, floor)?.strategy;
                Ok(SweepPoint { channel: *ch, reports, chosen })
            })
            .collect()
    }
}

/// Fastest strategy whose accuracy reaches `floor`; ties go to the one
/// with less on-device computation.
pub fn plan_exit(reports: &[LatencyReport], accuracy: &AccuracyTable, floor: f64) -> Result<LatencyReport> {
    reports
        .iter()
        .filter(|r| accuracy.get(r.strategy).is_some_and(|a| a >= floor))
        .min_by(|a, b| a.total_s.total_cmp(&b.total_s).then(a.on_device_flops.cmp(&b.on_device_flops)))
        .cloned()
        .ok_or(Error::Infeasible { floor })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub channel: ChannelConfig,
    pub reports: Vec<LatencyReport>,
    pub chosen: Strategy,
}

/// Communication-computation plane: one row per strategy per channel setting.
/// Columns: `snr_db, bandwidth_hz, strategy, on_device_flops, payload,
/// comm_latency_s, compute_latency_s, total_s`.
pub fn write_plane_csv<W: Write>(points: &[SweepPoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Config(format!("writing plane CSV: {e}"));
    out.write_record(["snr_db", "bandwidth_hz", "strategy", "on_device_flops", "payload", "comm_latency_s", "compute_latency_s", "total_s"])
        .map_err(csv_err)?;
    for p in points {
        for r in &p.reports {
            out.write_record([
                p.channel.snr_db.to_string(),
                p.channel.bandwidth_hz.to_string(),
                r.strategy.to_string(),
                r.on_device_flops.to_string(),
                r.payload.to_string(),
                format!("{:.9e}", r.comm_latency_s),
                format!("{:.9e}", r.compute_latency_s),
                format!("{:.9e}", r.total_s),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush().map_err(Error::io("<plane csv>"))
}

/// Latency-vs-bandwidth curves: one row per channel setting with the total
/// latency of each strategy and the chosen strategy.
pub fn write_curve_csv<W: Write>(points: &[SweepPoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Config(format!("writing curve CSV: {e}"));
    if let Some(first) = points.first() {
        let mut header = vec!["snr_db".to_string(), "bandwidth_hz".to_string()];
        header.extend(first.reports.iter().map(|r| format!("{}_s", r.strategy)));
        header.push("chosen".into());
        out.write_record(&header).map_err(csv_err)?;
    }
    for p in points {
        let mut row = vec![p.channel.snr_db.to_string(), p.channel.bandwidth_hz.to_string()];
        row.extend(p.reports.iter().map(|r| format!("{:.9e}", r.total_s)));
        row.push(p.chosen.to_string());
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush().map_err(Error::io("<curve csv>"))
}

/// `count` bandwidths spaced evenly in log scale from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
}
