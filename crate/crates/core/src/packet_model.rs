//! Flow and packet abstractions plus seeded workload generators.
//!
//! Generators produce [`FlowRequest`]s in arrival order. [`flow_to_packets`]
//! expands one flow into the client-side packet script the load balancer
//! observes; response-side events are anchored to the moment the server
//! finishes and get their timestamp echo filled in by the simulator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Default mean work of a `for`-loop query, in core-seconds.
pub const DEFAULT_MEAN_WORK: f64 = 0.15;
/// Client round trip time used when none is configured (400 µs).
pub const DEFAULT_CLIENT_RTT: f64 = 400e-6;
pub const DEFAULT_MTU: u32 = 1500;
pub const MIN_MTU: u32 = 536;
/// TCP timestamp granularity (1 ms).
pub const TIMESTAMP_TICK: f64 = 1e-3;
/// Service cost of the file trace, core-seconds per response byte.
pub const FILE_WORK_PER_BYTE: f64 = 1e-8;
/// Response size of a `for`-loop query per core-second of work.
pub const FORLOOP_BYTES_PER_CORE_SECOND: f64 = 1_000_000.0;
/// Spacing between back-to-back segments of one burst.
pub const SEGMENT_GAP: f64 = 1e-6;
/// Upper bound on the client ACKs scripted for one response.
pub const MAX_RESPONSE_ACKS: u32 = 16;
/// Highest query rate a trace config accepts.
pub const MAX_RATE_QPS: f64 = 1e6;

const KB: u64 = 1024;
const MB: u64 = 1024 * 1024;

/// Static file sizes served by the file trace.
pub const FILE_SIZES: [u64; 7] = [100 * KB, 200 * KB, 500 * KB, 750 * KB, MB, 2 * MB, 5 * MB];

/// Converts a time in seconds to timestamp-option ticks. Tick 0 is reserved
/// for "no echo", so the clock starts at 1.
pub fn timestamp_ticks(time: f64) -> u32 {
    (time.max(0.0) / TIMESTAMP_TICK).floor() as u32 + 1
}

/// Opaque, hashable connection identity as seen by the load balancer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FiveTuple {
    pub src_ip: u32,
    pub src_port: u16,
    pub dst_vip: u32,
    pub dst_port: u16,
    pub proto: u8,
}

impl FiveTuple {
    /// Wire-order byte encoding fed to the flow hash.
    pub fn to_bytes(&self) -> [u8; 13] {
        let mut out = [0u8; 13];
        out[0..4].copy_from_slice(&self.src_ip.to_be_bytes());
        out[4..8].copy_from_slice(&self.dst_vip.to_be_bytes());
        out[8..10].copy_from_slice(&self.src_port.to_be_bytes());
        out[10..12].copy_from_slice(&self.dst_port.to_be_bytes());
        out[12] = self.proto;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRequest {
    pub arrival_time: f64,
    pub flow_id: u64,
    pub five_tuple: FiveTuple,
    /// Core-seconds of server computation.
    pub work: f64,
    pub request_bytes: u64,
    pub response_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PacketKind {
    Syn,
    Ack,
    Data,
    Fin,
    Rst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketEvent {
    pub time: f64,
    pub flow_id: u64,
    pub five_tuple: FiveTuple,
    pub kind: PacketKind,
    pub payload_bytes: u32,
    pub ts_val: u32,
    pub ts_ecr: u32,
}

/// What a scripted packet's time offset is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    /// Offset from the flow's arrival (SYN) time. Times are already absolute.
    Arrival,
    /// Offset from the server's response emission time; `ts_ecr` is filled
    /// in with the server's timestamp when the response is known.
    Response,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedPacket {
    pub anchor: Anchor,
    pub event: PacketEvent,
}

impl ScriptedPacket {
    /// Pins a response-anchored packet to an absolute time and echoes the
    /// server timestamp. Arrival-anchored packets are returned unchanged.
    pub fn resolve(&self, response_time: f64, server_ts: u32) -> PacketEvent {
        match self.anchor {
            Anchor::Arrival => self.event,
            Anchor::Response => {
                let time = response_time + self.event.time;
                PacketEvent { time, ts_val: timestamp_ticks(time), ts_ecr: server_ts, ..self.event }
            }
        }
    }
}

/// Expands a flow into the packets its client sends through the load balancer.
///
/// The script is: SYN at arrival, `ceil(request_bytes / mtu)` request DATA
/// segments one RTT later (after the handshake), then response ACKs and a
/// final FIN anchored at the server's response time. The server replies
/// directly to the client, so response ACKs reach the balancer one full RTT
/// after emission.
pub fn flow_to_packets(flow: &FlowRequest, mtu_bytes: u32, client_rtt: f64) -> Vec<ScriptedPacket> {
    assert!(mtu_bytes >= MIN_MTU, "mtu {mtu_bytes} below {MIN_MTU}");
    let base = PacketEvent {
        time: flow.arrival_time,
        flow_id: flow.flow_id,
        five_tuple: flow.five_tuple,
        kind: PacketKind::Syn,
        payload_bytes: 0,
        ts_val: timestamp_ticks(flow.arrival_time),
        ts_ecr: 0,
    };
    let request_segments = flow.request_bytes.div_ceil(mtu_bytes as u64).max(1);
    let response_segments = flow.response_bytes.div_ceil(mtu_bytes as u64);
    let acks = (response_segments.div_ceil(2) as u32).clamp(1, MAX_RESPONSE_ACKS);

    let mut out = Vec::with_capacity(2 + request_segments as usize + acks as usize);
    out.push(ScriptedPacket { anchor: Anchor::Arrival, event: base });

    // SYN-ACK leaves the server as the SYN lands; the client echoes it.
    let synack_ts = timestamp_ticks(flow.arrival_time);
    let mut remaining = flow.request_bytes;
    for i in 0..request_segments {
        let time = flow.arrival_time + client_rtt + i as f64 * SEGMENT_GAP;
        let payload = remaining.min(mtu_bytes as u64);
        remaining -= payload;
        out.push(ScriptedPacket {
            anchor: Anchor::Arrival,
            event: PacketEvent {
                time,
                kind: PacketKind::Data,
                payload_bytes: payload as u32,
                ts_val: timestamp_ticks(time),
                ts_ecr: synack_ts,
                ..base
            },
        });
    }
    for i in 0..acks {
        out.push(ScriptedPacket {
            anchor: Anchor::Response,
            event: PacketEvent {
                time: client_rtt + i as f64 * SEGMENT_GAP,
                kind: PacketKind::Ack,
                ts_val: 0,
                ts_ecr: 0,
                ..base
            },
        });
    }
    out.push(ScriptedPacket {
        anchor: Anchor::Response,
        event: PacketEvent {
            time: client_rtt + acks as f64 * SEGMENT_GAP,
            kind: PacketKind::Fin,
            ts_val: 0,
            ts_ecr: 0,
            ..base
        },
    });
    out
}

/// Time at which the last request segment of a flow reaches the server.
pub fn request_complete_time(flow: &FlowRequest, mtu_bytes: u32, client_rtt: f64) -> f64 {
    let segments = flow.request_bytes.div_ceil(mtu_bytes as u64).max(1);
    flow.arrival_time + client_rtt + (segments - 1) as f64 * SEGMENT_GAP
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    /// CPU-bound PHP `for`-loop queries with exponential work.
    #[serde(rename = "forloop")]
    PoissonForloop,
    /// I/O-bound static file downloads.
    File,
    /// Two `for`-loop populations with distinct mean work.
    Mixture,
}

impl TraceKind {
    /// Query rate range of the original testbed configuration for this trace.
    pub fn testbed_rate_range(self) -> (f64, f64) {
        match self {
            TraceKind::PoissonForloop | TraceKind::Mixture => (350.0, 500.0),
            TraceKind::File => (400.0, 1000.0),
        }
    }
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceKind::PoissonForloop => "forloop",
            TraceKind::File => "file",
            TraceKind::Mixture => "mixture",
        })
    }
}

impl FromStr for TraceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forloop" | "for-loop" | "poisson" => Ok(TraceKind::PoissonForloop),
            "file" => Ok(TraceKind::File),
            "mixture" | "wiki" => Ok(TraceKind::Mixture),
            other => Err(format!("unknown trace kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub kind: TraceKind,
    pub rate_qps: f64,
    #[serde(default = "default_mean_work")]
    pub mean_work: f64,
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub vip: u32,
}

fn default_mean_work() -> f64 {
    DEFAULT_MEAN_WORK
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TraceError {
    #[error("rate_qps must be in (0, {MAX_RATE_QPS}], got {0}")]
    Rate(f64),
    #[error("duration must be positive, got {0}")]
    Duration(f64),
    #[error("mean_work must be positive, got {0}")]
    MeanWork(f64),
}

impl TraceConfig {
    pub fn new(kind: TraceKind, rate_qps: f64, duration: f64, seed: u64) -> Self {
        TraceConfig { kind, rate_qps, mean_work: DEFAULT_MEAN_WORK, duration, seed, vip: 0 }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if !(self.rate_qps > 0.0 && self.rate_qps <= MAX_RATE_QPS) {
            return Err(TraceError::Rate(self.rate_qps));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(TraceError::Duration(self.duration));
        }
        if !(self.mean_work > 0.0 && self.mean_work.is_finite()) {
            return Err(TraceError::MeanWork(self.mean_work));
        }
        Ok(())
    }

    /// Expected work per query, in core-seconds.
    pub fn expected_work(&self) -> f64 {
        match self.kind {
            TraceKind::PoissonForloop | TraceKind::Mixture => self.mean_work,
            TraceKind::File => {
                FILE_SIZES.iter().map(|&s| s as f64).sum::<f64>() / FILE_SIZES.len() as f64 * FILE_WORK_PER_BYTE
            }
        }
    }
}

/// Mixture populations: (probability, multiple of mean_work). Overall mean
/// equals mean_work.
const MIXTURE: [(f64, f64); 2] = [(2.0 / 3.0, 0.5), (1.0 / 3.0, 2.0)];

/// Seeded trace generator; yields flows until the configured duration.
#[derive(Debug, Clone)]
pub struct TraceGenerator {
    config: TraceConfig,
    rng: ChaCha8Rng,
    inter_arrival: Exp<f64>,
    clock: f64,
    next_id: u64,
    exhausted: bool,
}

impl TraceGenerator {
    pub fn new(config: TraceConfig) -> Result<Self, TraceError> {
        config.validate()?;
        let inter_arrival = Exp::new(config.rate_qps).map_err(|_| TraceError::Rate(config.rate_qps))?;
        Ok(TraceGenerator {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            inter_arrival,
            clock: 0.0,
            next_id: 1,
            exhausted: false,
            config,
        })
    }

    pub fn config(&self) -> &TraceConfig {
        &self.config
    }

    /// Draws the next arrival, or `None` once the trace duration is exceeded.
    pub fn next_arrival(&mut self) -> Option<(f64, FlowRequest)> {
        if self.exhausted {
            return None;
        }
        self.clock += self.inter_arrival.sample(&mut self.rng);
        if self.clock > self.config.duration {
            self.exhausted = true;
            return None;
        }
        let (work, response_bytes) = match self.config.kind {
            TraceKind::PoissonForloop => self.forloop_query(self.config.mean_work),
            TraceKind::Mixture => {
                let u: f64 = self.rng.random();
                let scale = if u < MIXTURE[0].0 { MIXTURE[0].1 } else { MIXTURE[1].1 };
                self.forloop_query(self.config.mean_work * scale)
            }
            TraceKind::File => {
                let size = FILE_SIZES[self.rng.random_range(0..FILE_SIZES.len())];
                (size as f64 * FILE_WORK_PER_BYTE, size)
            }
        };
        let five_tuple = FiveTuple {
            src_ip: 0x0a00_0000 | self.rng.random_range(1..1u32 << 16),
            src_port: self.rng.random_range(1024..=u16::MAX),
            dst_vip: self.config.vip,
            dst_port: 80,
            proto: 6,
        };
        let request_bytes = self.rng.random_range(200..=800);
        let flow = FlowRequest {
            arrival_time: self.clock,
            flow_id: self.next_id,
            five_tuple,
            work,
            request_bytes,
            response_bytes,
        };
        self.next_id += 1;
        Some((self.clock, flow))
    }

    fn forloop_query(&mut self, mean: f64) -> (f64, u64) {
        let exp = Exp::new(1.0 / mean).expect("positive mean work");
        let mut work: f64 = exp.sample(&mut self.rng);
        // An exponential draw can be arbitrarily close to zero.
        work = work.max(1e-9);
        let bytes = ((work * FORLOOP_BYTES_PER_CORE_SECOND).round() as u64).max(1);
        (work, bytes)
    }
}

impl Iterator for TraceGenerator {
    type Item = FlowRequest;

    fn next(&mut self) -> Option<FlowRequest> {
        self.next_arrival().map(|(_, f)| f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(request_bytes: u64) -> FlowRequest {
        FlowRequest {
            arrival_time: 1.0,
            flow_id: 7,
            five_tuple: FiveTuple { src_ip: 1, src_port: 2, dst_vip: 3, dst_port: 80, proto: 6 },
            work: 0.1,
            request_bytes,
            response_bytes: 10_000,
        }
    }

    fn count(kind: PacketKind, script: &[ScriptedPacket]) -> usize {
        script.iter().filter(|p| p.event.kind == kind).count()
    }

    #[test]
    fn request_split_by_mtu() {
        assert_eq!(count(PacketKind::Data, &flow_to_packets(&flow(1000), 1500, 4e-4)), 1);
        assert_eq!(count(PacketKind::Data, &flow_to_packets(&flow(3000), 1500, 4e-4)), 2);
        assert_eq!(count(PacketKind::Data, &flow_to_packets(&flow(3001), 1500, 4e-4)), 3);
    }

    #[test]
    fn script_starts_with_syn_and_ends_with_fin() {
        let script = flow_to_packets(&flow(2500), 1500, 4e-4);
        assert_eq!(script.first().unwrap().event.kind, PacketKind::Syn);
        assert_eq!(script.first().unwrap().event.time, 1.0);
        assert_eq!(script.first().unwrap().event.ts_ecr, 0);
        assert_eq!(script.last().unwrap().event.kind, PacketKind::Fin);
        let data: u32 = script.iter().map(|p| p.event.payload_bytes).sum();
        assert_eq!(data, 2500);
    }

    #[test]
    fn resolve_echoes_server_timestamp() {
        let script = flow_to_packets(&flow(100), 1500, 4e-4);
        let ack = script.iter().find(|p| p.event.kind == PacketKind::Ack).unwrap();
        let ev = ack.resolve(2.0, 2001);
        assert_eq!(ev.ts_ecr, 2001);
        assert!((ev.time - 2.0004).abs() < 1e-12);
    }

    #[test]
    #[should_panic]
    fn tiny_mtu_rejected() {
        flow_to_packets(&flow(100), 100, 4e-4);
    }

    #[test]
    fn file_sizes_only() {
        let gen = TraceGenerator::new(TraceConfig::new(TraceKind::File, 500.0, 20.0, 3)).unwrap();
        let mut n = 0;
        for f in gen {
            assert!(FILE_SIZES.contains(&f.response_bytes));
            assert!((f.work - f.response_bytes as f64 * FILE_WORK_PER_BYTE).abs() < 1e-15);
            n += 1;
        }
        assert!(n > 9000);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(TraceGenerator::new(TraceConfig::new(TraceKind::File, 0.0, 1.0, 0)).is_err());
        assert!(TraceGenerator::new(TraceConfig::new(TraceKind::File, 10.0, 0.0, 0)).is_err());
        let mut c = TraceConfig::new(TraceKind::PoissonForloop, 10.0, 1.0, 0);
        c.mean_work = -1.0;
        assert_eq!(c.validate(), Err(TraceError::MeanWork(-1.0)));
    }

    #[test]
    fn same_seed_same_stream() {
        let cfg = TraceConfig::new(TraceKind::Mixture, 300.0, 5.0, 42);
        let a: Vec<_> = TraceGenerator::new(cfg.clone()).unwrap().collect();
        let b: Vec<_> = TraceGenerator::new(cfg).unwrap().collect();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn trace_kind_parses() {
        assert_eq!("forloop".parse::<TraceKind>().unwrap(), TraceKind::PoissonForloop);
        assert_eq!("file".parse::<TraceKind>().unwrap(), TraceKind::File);
        assert!("bogus".parse::<TraceKind>().is_err());
    }
}
