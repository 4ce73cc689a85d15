//! Per-packet overhead of the data-plane feature path (parser plus telemetry
//! writes), measured on a pre-expanded packet stream.

use crate::cluster_sim::parse_server_groups;
use crate::packet_model::{
    flow_to_packets, PacketEvent, TraceConfig, TraceGenerator, TraceKind, DEFAULT_CLIENT_RTT, DEFAULT_MTU,
};
use crate::parser::FlowTable;
use crate::policies::{PolicyKind, Selector, DEFAULT_TABLE_SIZE};
use crate::telemetry::{StoreConfig, VipStore, DEFAULT_RESERVOIR_CAPACITY};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub flows: usize,
    pub servers: String,
    pub seed: u64,
    pub repeat: usize,
    pub frame: f64,
    pub reservoir_capacity: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            flows: 100_000,
            servers: "6x2,4x4".into(),
            seed: 1,
            repeat: 5,
            frame: 0.05,
            reservoir_capacity: DEFAULT_RESERVOIR_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub packets: u64,
    pub frames_published: u64,
    /// Mean parser + telemetry cost per packet, one entry per repetition.
    pub ns_per_packet: Vec<f64>,
    pub median_ns_per_packet: f64,
    /// Mean backend selection cost per new flow, for reference.
    pub select_ns_per_flow: f64,
}

/// A packet stream plus each flow's backend, chosen up front so the timed
/// loop only measures the feature path.
pub struct Workload {
    pub packets: Vec<PacketEvent>,
    pub dips: Vec<u32>,
    pub servers: usize,
}

pub fn build_workload(cfg: &BenchConfig) -> Result<(Workload, Arc<VipStore>, f64), String> {
    let specs = parse_server_groups(&cfg.servers).map_err(|e| e.to_string())?;
    let store = VipStore::new(StoreConfig {
        reservoir_capacity: cfg.reservoir_capacity,
        ..StoreConfig::new(0, specs.len().max(1))
    })
    .map_err(|e| e.to_string())?;
    for s in &specs {
        store.set_active(s.dip, true).map_err(|e| e.to_string())?;
    }
    let selector =
        Selector::new(PolicyKind::Maglev, Arc::clone(&store), DEFAULT_TABLE_SIZE, vec![]).map_err(|e| e.to_string())?;

    let rate = 500.0;
    let trace = TraceConfig::new(TraceKind::PoissonForloop, rate, cfg.flows as f64 / rate, cfg.seed);
    let flows: Vec<_> = TraceGenerator::new(trace).map_err(|e| e.to_string())?.collect();
    let t0 = Instant::now();
    let mut dips = Vec::with_capacity(flows.len() + 1);
    dips.push(0);
    for f in &flows {
        dips.push(selector.select(&f.five_tuple).map_err(|e| e.to_string())?);
    }
    let select_ns = t0.elapsed().as_nanos() as f64 / flows.len().max(1) as f64;

    let mut packets = Vec::new();
    for f in &flows {
        // Unloaded service: the response leaves as soon as the work is done.
        let response_at = f.arrival_time + DEFAULT_CLIENT_RTT + f.work;
        let ts = crate::packet_model::timestamp_ticks(response_at);
        packets.extend(flow_to_packets(f, DEFAULT_MTU, DEFAULT_CLIENT_RTT).iter().map(|s| s.resolve(response_at, ts)));
    }
    packets.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.flow_id.cmp(&b.flow_id)));
    Ok((Workload { packets, dips, servers: specs.len() }, store, select_ns))
}

/// Runs the feature path over the workload once; returns elapsed seconds and
/// frames published.
pub fn run_once(w: &Workload, store: &Arc<VipStore>, cfg: &BenchConfig) -> (f64, u64) {
    let mut writers: Vec<_> =
        (0..w.servers as u32).map(|d| store.writer(d, cfg.frame, 0.0, cfg.seed).expect("fresh writer")).collect();
    let mut table = FlowTable::new();
    let mut next_frame = cfg.frame;
    let mut frames = 0;
    let start = Instant::now();
    for p in &w.packets {
        while p.time >= next_frame {
            for wr in &mut writers {
                wr.publish(next_frame);
            }
            frames += writers.len() as u64;
            next_frame += cfg.frame;
        }
        let out = table.on_packet(p, w.dips[p.flow_id as usize], p.time);
        if let Some(d) = out.dip {
            writers[d as usize].record(&out);
        }
    }
    (start.elapsed().as_secs_f64(), frames)
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, String> {
    if cfg.flows == 0 || cfg.repeat == 0 {
        return Err("flows and repeat must be positive".into());
    }
    let (w, store, select_ns) = build_workload(cfg)?;
    // One untimed pass to warm caches and the allocator.
    run_once(&w, &store, cfg);
    let mut ns = Vec::with_capacity(cfg.repeat);
    let mut frames = 0;
    for _ in 0..cfg.repeat {
        let (secs, f) = run_once(&w, &store, cfg);
        frames = f;
        ns.push(secs * 1e9 / w.packets.len() as f64);
    }
    let mut sorted = ns.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BenchReport {
        packets: w.packets.len() as u64,
        frames_published: frames,
        median_ns_per_packet: sorted[sorted.len() / 2],
        ns_per_packet: ns,
        select_ns_per_flow: select_ns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_runs() {
        let cfg = BenchConfig { flows: 500, repeat: 2, ..BenchConfig::default() };
        let r = run_bench(&cfg).unwrap();
        assert!(r.packets > 500 * 4);
        assert_eq!(r.ns_per_packet.len(), 2);
        assert!(r.frames_published > 0);
    }
}
