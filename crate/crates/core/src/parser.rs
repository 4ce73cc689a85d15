//! Data-plane parser: per-flow state and extraction of counters and sampled
//! feature observations from the packets the load balancer sees.
//!
//! Only client-to-server packets are visible (servers reply directly), so
//! server processing time is inferred from the TCP timestamp option: once a
//! request has been seen, the first client packet whose `ts_ecr` advances
//! echoes a segment the server emitted after handling the request.

use crate::packet_model::{PacketEvent, PacketKind};
use arrayvec::ArrayVec;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use std::fmt;

pub const N_COUNTERS: usize = 8;
pub const N_CHANNELS: usize = 13;

/// Default flow idle timeout in seconds.
pub const DEFAULT_IDLE_TIMEOUT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Counter {
    Syn = 0,
    Fin,
    Rst,
    Pkt,
    Byte,
    FlowComplete,
    Retransmit,
    /// Gauge: flows currently open towards the server.
    FlowOngoing,
}

impl Counter {
    pub const ALL: [Counter; N_COUNTERS] = [
        Counter::Syn,
        Counter::Fin,
        Counter::Rst,
        Counter::Pkt,
        Counter::Byte,
        Counter::FlowComplete,
        Counter::Retransmit,
        Counter::FlowOngoing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Counter::Syn => "n_syn",
            Counter::Fin => "n_fin",
            Counter::Rst => "n_rst",
            Counter::Pkt => "n_pkt",
            Counter::Byte => "n_byte",
            Counter::FlowComplete => "n_flow_complete",
            Counter::Retransmit => "n_retransmit",
            Counter::FlowOngoing => "n_flow_ongoing",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Channel {
    /// First to last packet of a flow, on FIN or RST.
    FlowDuration = 0,
    /// SYN to FIN, completed flows only.
    Fct,
    /// First processing-time measurement of a flow.
    PtFirst,
    /// Later processing-time measurements of the same flow.
    PtGeneral,
    /// Gap between consecutive packets of a flow.
    PktIat,
    /// Gap between consecutive new flows to the same server.
    FlowIat,
    RequestBytes,
    BytesPerFlow,
    PktsPerFlow,
    BytesPerPkt,
    SynToFirstData,
    /// Gap between consecutive pure ACKs of a flow.
    AckGap,
    /// Open flows on the server when a flow completes.
    OngoingAtComplete,
}

impl Channel {
    pub const ALL: [Channel; N_CHANNELS] = [
        Channel::FlowDuration,
        Channel::Fct,
        Channel::PtFirst,
        Channel::PtGeneral,
        Channel::PktIat,
        Channel::FlowIat,
        Channel::RequestBytes,
        Channel::BytesPerFlow,
        Channel::PktsPerFlow,
        Channel::BytesPerPkt,
        Channel::SynToFirstData,
        Channel::AckGap,
        Channel::OngoingAtComplete,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::FlowDuration => "flow_duration",
            Channel::Fct => "fct",
            Channel::PtFirst => "pt_first",
            Channel::PtGeneral => "pt_general",
            Channel::PktIat => "pkt_iat",
            Channel::FlowIat => "flow_iat",
            Channel::RequestBytes => "request_bytes",
            Channel::BytesPerFlow => "bytes_per_flow",
            Channel::PktsPerFlow => "pkts_per_flow",
            Channel::BytesPerPkt => "bytes_per_pkt",
            Channel::SynToFirstData => "syn_to_first_data",
            Channel::AckGap => "ack_gap",
            Channel::OngoingAtComplete => "ongoing_at_complete",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub flow_id: u64,
    pub vip: u32,
    pub dip: u32,
    pub t_syn: f64,
    pub t_first_data: Option<f64>,
    pub t_last_pkt: f64,
    pub t_last_request: Option<f64>,
    pub t_last_ack: Option<f64>,
    pub last_seen_ts_ecr: u32,
    pub bytes_in: u64,
    pub pkts_in: u64,
    pub request_bytes: u64,
    pub awaiting_response: bool,
    pub pt_measurements: u32,
}

impl FlowState {
    fn new(pkt: &PacketEvent, dip: u32, now: f64) -> Self {
        FlowState {
            flow_id: pkt.flow_id,
            vip: pkt.five_tuple.dst_vip,
            dip,
            t_syn: now,
            t_first_data: None,
            t_last_pkt: now,
            t_last_request: None,
            t_last_ack: None,
            last_seen_ts_ecr: pkt.ts_ecr,
            bytes_in: pkt.payload_bytes as u64,
            pkts_in: 1,
            request_bytes: 0,
            awaiting_response: false,
            pt_measurements: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureObservation {
    pub vip: u32,
    pub dip: u32,
    pub channel: Channel,
    pub value: f64,
    pub time: f64,
}

/// Everything one packet contributes to telemetry.
#[derive(Debug, Clone, Default)]
pub struct PacketOutcome {
    /// Server the packet is attributed to; `None` for anomalies on unknown
    /// flows, which are only counted.
    pub dip: Option<u32>,
    pub counters: [u64; N_COUNTERS],
    /// Open flows on `dip` after this packet.
    pub ongoing: u64,
    pub observations: ArrayVec<FeatureObservation, N_CHANNELS>,
}

impl PacketOutcome {
    fn bump(&mut self, c: Counter, by: u64) {
        self.counters[c.index()] += by;
    }
}

/// Per-worker flow table.
#[derive(Debug, Default)]
pub struct FlowTable {
    flows: FxHashMap<u64, FlowState>,
    ongoing: FxHashMap<u32, u64>,
    last_syn: FxHashMap<u32, f64>,
    anomalies: u64,
}

impl FlowTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn get(&self, flow_id: u64) -> Option<&FlowState> {
        self.flows.get(&flow_id)
    }

    /// Server a live flow is pinned to.
    pub fn pinned_dip(&self, flow_id: u64) -> Option<u32> {
        self.flows.get(&flow_id).map(|f| f.dip)
    }

    pub fn ongoing(&self, dip: u32) -> u64 {
        self.ongoing.get(&dip).copied().unwrap_or(0)
    }

    /// Packets on unknown flows seen so far.
    pub fn anomalies(&self) -> u64 {
        self.anomalies
    }

    /// Processes one packet. `dip` is the backend the active policy chose for
    /// a new flow; it is ignored for packets of flows already in the table.
    pub fn on_packet(&mut self, pkt: &PacketEvent, dip: u32, now: f64) -> PacketOutcome {
        let mut out = PacketOutcome::default();
        let vip = pkt.five_tuple.dst_vip;

        if pkt.kind == PacketKind::Syn {
            if let Some(fs) = self.flows.get_mut(&pkt.flow_id) {
                // Duplicate SYN on a live flow: a retransmission.
                fs.t_last_pkt = now;
                fs.pkts_in += 1;
                out.dip = Some(fs.dip);
                out.bump(Counter::Retransmit, 1);
                out.bump(Counter::Pkt, 1);
                out.ongoing = self.ongoing.get(&fs.dip).copied().unwrap_or(0);
                return out;
            }
            let ongoing = self.ongoing.entry(dip).or_insert(0);
            *ongoing += 1;
            out.ongoing = *ongoing;
            if let Some(prev) = self.last_syn.insert(dip, now) {
                out.observations.push(obs(vip, dip, Channel::FlowIat, now - prev, now));
            }
            self.flows.insert(pkt.flow_id, FlowState::new(pkt, dip, now));
            out.dip = Some(dip);
            out.bump(Counter::Syn, 1);
            out.bump(Counter::Pkt, 1);
            out.bump(Counter::Byte, pkt.payload_bytes as u64);
            return out;
        }

        let Some(fs) = self.flows.get_mut(&pkt.flow_id) else {
            self.anomalies += 1;
            out.bump(Counter::Retransmit, 1);
            out.bump(Counter::Pkt, 1);
            out.bump(Counter::Byte, pkt.payload_bytes as u64);
            return out;
        };
        let dip = fs.dip;
        out.dip = Some(dip);
        out.bump(Counter::Pkt, 1);
        out.bump(Counter::Byte, pkt.payload_bytes as u64);
        out.observations.push(obs(vip, dip, Channel::PktIat, now - fs.t_last_pkt, now));
        fs.t_last_pkt = now;
        fs.pkts_in += 1;
        fs.bytes_in += pkt.payload_bytes as u64;

        match pkt.kind {
            PacketKind::Data | PacketKind::Ack => {
                if let Some(pt) = estimate_processing_time(fs, pkt, now) {
                    let channel = if fs.pt_measurements == 1 { Channel::PtFirst } else { Channel::PtGeneral };
                    out.observations.push(obs(vip, dip, channel, pt, now));
                    out.observations.push(obs(vip, dip, Channel::RequestBytes, fs.request_bytes as f64, now));
                    fs.request_bytes = 0;
                } else if pkt.ts_ecr > fs.last_seen_ts_ecr {
                    fs.last_seen_ts_ecr = pkt.ts_ecr;
                }
                if pkt.kind == PacketKind::Data && pkt.payload_bytes > 0 {
                    if fs.t_first_data.is_none() {
                        fs.t_first_data = Some(now);
                        out.observations.push(obs(vip, dip, Channel::SynToFirstData, now - fs.t_syn, now));
                    }
                    out.observations.push(obs(vip, dip, Channel::BytesPerPkt, pkt.payload_bytes as f64, now));
                    fs.request_bytes += pkt.payload_bytes as u64;
                    fs.t_last_request = Some(now);
                    fs.awaiting_response = true;
                } else if pkt.kind == PacketKind::Ack {
                    if let Some(prev) = fs.t_last_ack {
                        out.observations.push(obs(vip, dip, Channel::AckGap, now - prev, now));
                    }
                    fs.t_last_ack = Some(now);
                }
                out.ongoing = self.ongoing.get(&dip).copied().unwrap_or(0);
            }
            PacketKind::Fin | PacketKind::Rst => {
                let fs = self.flows.remove(&pkt.flow_id).expect("flow present");
                let ongoing = self.ongoing.entry(dip).or_insert(1);
                *ongoing = ongoing.saturating_sub(1);
                out.ongoing = *ongoing;
                out.observations.push(obs(vip, dip, Channel::FlowDuration, now - fs.t_syn, now));
                if pkt.kind == PacketKind::Fin {
                    out.bump(Counter::Fin, 1);
                    out.bump(Counter::FlowComplete, 1);
                    out.observations.push(obs(vip, dip, Channel::Fct, now - fs.t_syn, now));
                    out.observations.push(obs(vip, dip, Channel::BytesPerFlow, fs.bytes_in as f64, now));
                    out.observations.push(obs(vip, dip, Channel::PktsPerFlow, fs.pkts_in as f64, now));
                    out.observations.push(obs(vip, dip, Channel::OngoingAtComplete, *ongoing as f64, now));
                } else {
                    out.bump(Counter::Rst, 1);
                }
            }
            PacketKind::Syn => unreachable!(),
        }
        out
    }

    /// Evicts flows idle for longer than `idle_timeout`. Returns the number of
    /// evicted flows per server (sorted by dip) so callers can update gauges.
    pub fn expire_flows(&mut self, now: f64, idle_timeout: f64) -> Vec<(u32, u64)> {
        assert!(idle_timeout > 0.0, "idle timeout must be positive");
        let mut evicted: FxHashMap<u32, u64> = FxHashMap::default();
        self.flows.retain(|_, fs| {
            let keep = now - fs.t_last_pkt <= idle_timeout;
            if !keep {
                *evicted.entry(fs.dip).or_insert(0) += 1;
            }
            keep
        });
        let mut out: Vec<(u32, u64)> = evicted.into_iter().collect();
        out.sort_unstable();
        for &(dip, n) in &out {
            if let Some(g) = self.ongoing.get_mut(&dip) {
                *g = g.saturating_sub(n);
            }
        }
        out
    }

    /// Recounts live flows per server from the table itself.
    pub fn recount(&self) -> FxHashMap<u32, u64> {
        let mut m = FxHashMap::default();
        for fs in self.flows.values() {
            *m.entry(fs.dip).or_insert(0) += 1;
        }
        m
    }
}

fn obs(vip: u32, dip: u32, channel: Channel, value: f64, time: f64) -> FeatureObservation {
    FeatureObservation { vip, dip, channel, value: value.max(0.0), time }
}

/// Infers server processing time from a timestamp echo.
///
/// Returns `Some(now - t_last_request)` when the flow is waiting on a
/// response and the client's `ts_ecr` has advanced past the last echo seen,
/// meaning the client is acknowledging a segment the server emitted after
/// receiving the request. Updates the flow's echo bookkeeping in that case.
pub fn estimate_processing_time(fs: &mut FlowState, ack: &PacketEvent, now: f64) -> Option<f64> {
    if !fs.awaiting_response || ack.ts_ecr <= fs.last_seen_ts_ecr {
        return None;
    }
    let requested = fs.t_last_request?;
    fs.last_seen_ts_ecr = ack.ts_ecr;
    fs.awaiting_response = false;
    fs.pt_measurements += 1;
    Some(now - requested)
}
