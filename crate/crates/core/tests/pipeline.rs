//! Parser and telemetry behaviour checked against independent oracles.

use aquarius_core::cluster_sim::parse_server_groups;
use aquarius_core::estimator_loop::EstimatorKind;
use aquarius_core::experiment::{run_experiment, ExperimentConfig};
use aquarius_core::feature_pipeline::feature_names;
use aquarius_core::packet_model::{
    flow_to_packets, request_complete_time, timestamp_ticks, FlowRequest, PacketEvent, TraceConfig, TraceGenerator,
    TraceKind, DEFAULT_CLIENT_RTT, DEFAULT_MTU, TIMESTAMP_TICK,
};
use aquarius_core::parser::{Channel, Counter, FlowTable};
use aquarius_core::policies::PolicyKind;
use aquarius_core::telemetry::{FeatureFetcher, StoreConfig, VipStore};
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

/// Packets of `flows` served by an idle server that takes `service(f)`
/// seconds per request, merged in time order.
fn unloaded_packets(flows: &[FlowRequest], service: impl Fn(&FlowRequest) -> f64) -> Vec<PacketEvent> {
    let mut out = Vec::new();
    for f in flows {
        let response = request_complete_time(f, DEFAULT_MTU, DEFAULT_CLIENT_RTT) + service(f);
        let ts = timestamp_ticks(response);
        out.extend(flow_to_packets(f, DEFAULT_MTU, DEFAULT_CLIENT_RTT).iter().map(|s| s.resolve(response, ts)));
    }
    out.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.flow_id.cmp(&b.flow_id)));
    out
}

#[test]
fn processing_time_matches_known_service() {
    let mut flows: Vec<FlowRequest> =
        TraceGenerator::new(TraceConfig::new(TraceKind::PoissonForloop, 20.0, 20.0, 9)).unwrap().collect();
    for f in &mut flows {
        f.work = 0.1;
    }
    let packets = unloaded_packets(&flows, |_| 0.1);
    let mut table = FlowTable::new();
    let mut pt = HashMap::new();
    for p in &packets {
        for o in table.on_packet(p, 0, p.time).observations {
            if o.channel == Channel::PtFirst {
                pt.insert(p.flow_id, o.value);
            }
        }
    }
    assert_eq!(pt.len(), flows.len(), "every flow yields one first processing time");
    let slack = TIMESTAMP_TICK + DEFAULT_CLIENT_RTT;
    for (&id, &v) in &pt {
        assert!((v - 0.1).abs() <= slack + 1e-12, "flow {id}: pt {v}");
    }
}

#[test]
fn observations_are_non_negative_and_fct_bounds_pt() {
    let flows: Vec<FlowRequest> =
        TraceGenerator::new(TraceConfig::new(TraceKind::Mixture, 50.0, 30.0, 4)).unwrap().collect();
    let packets = unloaded_packets(&flows, |f| f.work);
    let mut table = FlowTable::new();
    let (mut pt, mut fct) = (HashMap::new(), HashMap::new());
    let mut syn = 0;
    let mut closed = 0;
    for p in &packets {
        let out = table.on_packet(p, (p.flow_id % 3) as u32, p.time);
        syn += out.counters[Counter::Syn.index()];
        closed += out.counters[Counter::Fin.index()] + out.counters[Counter::Rst.index()];
        assert!(closed <= syn);
        assert_eq!(out.ongoing, table.recount().get(&out.dip.unwrap()).copied().unwrap_or(0));
        for o in out.observations {
            assert!(o.value >= 0.0, "{:?} {}", o.channel, o.value);
            match o.channel {
                Channel::PtFirst => {
                    pt.insert(p.flow_id, o.value);
                }
                Channel::Fct => {
                    fct.insert(p.flow_id, o.value);
                }
                _ => {}
            }
        }
    }
    assert_eq!(syn as usize, flows.len());
    // A response inside the SYN-ACK's timestamp tick carries no newer echo,
    // so those flows have no processing-time sample.
    let by_id: HashMap<u64, &FlowRequest> = flows.iter().map(|f| (f.flow_id, f)).collect();
    for (id, f) in &fct {
        match pt.get(id) {
            Some(p) => assert!(f >= p, "flow {id}: fct {f} < pt {p}"),
            None => assert!(by_id[id].work < 2.0 * TIMESTAMP_TICK, "flow {id} lacks pt with work {}", by_id[id].work),
        }
    }
    assert!(pt.len() as f64 > 0.95 * fct.len() as f64);
    assert!(table.is_empty());
}

#[test]
fn eviction_keeps_gauge_equal_to_recount() {
    let flows: Vec<FlowRequest> =
        TraceGenerator::new(TraceConfig::new(TraceKind::PoissonForloop, 200.0, 5.0, 5)).unwrap().collect();
    let mut table = FlowTable::new();
    // Only SYNs arrive, so every flow stays open until it idles out.
    for f in &flows {
        let syn = flow_to_packets(f, DEFAULT_MTU, DEFAULT_CLIENT_RTT)[0].event;
        table.on_packet(&syn, (f.flow_id % 4) as u32, syn.time);
    }
    let live = table.len();
    let evicted: u64 = table.expire_flows(7.5, 5.0).iter().map(|&(_, n)| n).sum();
    let expected = flows.iter().filter(|f| 7.5 - f.arrival_time > 5.0).count() as u64;
    assert_eq!(evicted, expected);
    assert_eq!(table.len() as u64, live as u64 - evicted);
    for dip in 0..4 {
        assert_eq!(table.ongoing(dip), table.recount().get(&dip).copied().unwrap_or(0));
    }
}

#[test]
fn single_backend_syn_count_equals_flow_count() {
    let trace = TraceConfig::new(TraceKind::PoissonForloop, 40.0, 10.0, 0);
    let cfg = ExperimentConfig::new(trace, "1x4", PolicyKind::Ecmp, EstimatorKind::Off, 21);
    let generated = TraceGenerator::new(cfg.trace_config()).unwrap().count() as u64;
    let run = run_experiment(&cfg).unwrap();
    let col = feature_names().iter().position(|n| n == Counter::Syn.name()).unwrap();
    let syns: f64 = run.dataset.rows.iter().map(|r| r.features[col]).sum();
    assert_eq!(run.report.flows.generated, generated);
    assert_eq!(syns as u64, generated);
}

#[test]
fn reader_sees_every_fifth_frame_in_simulated_time() {
    let store = VipStore::new(StoreConfig::new(0, 2)).unwrap();
    store.set_active(0, true).unwrap();
    let mut w = store.writer(0, 0.05, 0.0, 1).unwrap();
    let mut fetcher = FeatureFetcher::new(Arc::clone(&store));
    for k in 1..=1200u64 {
        w.publish(k as f64 * 0.05);
        if k % 5 == 0 {
            fetcher.fetch_latest(k as f64 * 0.05);
        }
    }
    let seqs: Vec<u64> = fetcher.history(0).unwrap().entries.iter().map(|(_, f)| f.seq).collect();
    assert_eq!(seqs.len(), 240);
    assert!(seqs.windows(2).all(|p| p[1] - p[0] == 5));
}

#[test]
fn reader_cadence_with_real_threads() {
    // Scaled-down wall-clock version: writer every 10 ms, reader every 50 ms.
    let (frame, period, run_for) = (Duration::from_millis(10), Duration::from_millis(50), Duration::from_secs(6));
    let store = VipStore::new(StoreConfig::new(0, 2)).unwrap();
    store.set_active(0, true).unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let start = Instant::now();
    let writer = {
        let store = Arc::clone(&store);
        let stop = Arc::clone(&stop);
        thread::spawn(move || {
            let mut w = store.writer(0, 0.01, 0.0, 1).unwrap();
            let mut k = 1u32;
            while !stop.load(Ordering::Relaxed) {
                let due = start + frame * k;
                if let Some(d) = due.checked_duration_since(Instant::now()) {
                    thread::sleep(d);
                }
                w.publish(k as f64 * 0.01);
                k += 1;
            }
        })
    };
    let mut fetcher = FeatureFetcher::new(Arc::clone(&store));
    let mut j = 1u32;
    while start.elapsed() < run_for {
        let due = start + period * j + frame / 2;
        if let Some(d) = due.checked_duration_since(Instant::now()) {
            thread::sleep(d);
        }
        fetcher.fetch_latest(j as f64 * 0.05);
        j += 1;
    }
    stop.store(true, Ordering::Relaxed);
    writer.join().unwrap();
    let seqs: Vec<u64> = fetcher.history(0).unwrap().entries.iter().map(|(_, f)| f.seq).collect();
    let gaps: Vec<u64> = seqs.windows(2).map(|p| p[1] - p[0]).collect();
    assert!(gaps.iter().all(|&g| g > 0), "seq must strictly increase");
    let on_cadence = gaps.iter().filter(|&&g| (4..=6).contains(&g)).count();
    // Scheduler hiccups on a shared machine can stretch a few periods.
    assert!(on_cadence as f64 >= 0.95 * gaps.len() as f64, "{on_cadence}/{} gaps in 5 +- 1: {gaps:?}", gaps.len());
}

#[test]
fn server_groups_round_trip_through_config() {
    let specs = parse_server_groups("6x2,4x4").unwrap();
    assert_eq!(specs.len(), 10);
    assert_eq!(specs.iter().map(|s| s.n_cpu).sum::<u32>(), 28);
}
