//! Share and consistency properties of the backend selectors.

use aquarius_core::packet_model::{FiveTuple, PacketEvent, PacketKind};
use aquarius_core::parser::FlowTable;
use aquarius_core::policies::{ecmp_pick, weighted_pick, PolicyKind, Selector, DEFAULT_TABLE_SIZE};
use aquarius_core::telemetry::{StoreConfig, VipStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::BTreeMap;
use std::sync::Arc;

fn random_tuples(n: usize, seed: u64) -> Vec<FiveTuple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| FiveTuple { src_ip: rng.random(), src_port: rng.random(), dst_vip: 7, dst_port: 80, proto: 6 })
        .collect()
}

fn store(n: u32) -> Arc<VipStore> {
    let s = VipStore::new(StoreConfig::new(7, 16)).unwrap();
    for d in 0..n {
        s.set_active(d, true).unwrap();
    }
    s
}

fn shares(picks: impl Iterator<Item = u32>, n: usize) -> Vec<f64> {
    let mut counts = vec![0u64; n];
    let mut total = 0;
    for d in picks {
        counts[d as usize] += 1;
        total += 1;
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

#[test]
fn ecmp_spreads_uniformly_over_ten_backends() {
    let active: Vec<u32> = (0..10).collect();
    let tuples = random_tuples(1_000_000, 1);
    let mut counts = [0f64; 10];
    for t in &tuples {
        counts[ecmp_pick(t, &active).unwrap() as usize] += 1.0;
    }
    let expected = tuples.len() as f64 / 10.0;
    for c in counts {
        assert!((c / tuples.len() as f64 - 0.1).abs() < 0.01);
    }
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new(9.0).unwrap().inverse_cdf(0.99);
    assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
}

#[test]
fn weighted_pick_one_to_three() {
    let tuples = random_tuples(1_000_000, 2);
    let s = shares(tuples.iter().map(|t| weighted_pick(t, &[1, 3], &[0, 1]).unwrap()), 2);
    assert!((s[0] - 0.25).abs() < 0.01 && (s[1] - 0.75).abs() < 0.01, "{s:?}");
}

#[test]
fn weighted_table_follows_registers_on_next_call() {
    let st = store(2);
    let sel = Selector::new(PolicyKind::Aquarius, Arc::clone(&st), DEFAULT_TABLE_SIZE, vec![]).unwrap();
    let tuples = random_tuples(200_000, 3);
    let before = shares(tuples.iter().map(|t| sel.select(t).unwrap()), 2);
    assert!((before[0] - 0.5).abs() < 0.01, "{before:?}");

    st.actions().apply_weights(&BTreeMap::from([(0, 16), (1, 48)]), 1.0).unwrap();
    assert!(sel.sync_registers().unwrap());
    assert_eq!(sel.installed_generation(), st.actions().generation());
    let after = shares(tuples.iter().map(|t| sel.select(t).unwrap()), 2);
    assert!((after[0] - 0.25).abs() < 0.01, "{after:?}");
    assert!(!sel.sync_registers().unwrap(), "no rebuild without a new generation");
}

#[test]
fn deactivated_backend_is_never_selected() {
    let tuples = random_tuples(100_000, 4);
    for kind in [PolicyKind::Ecmp, PolicyKind::Maglev, PolicyKind::Wcmp, PolicyKind::Aquarius] {
        let st = store(5);
        let sel = Selector::new(kind, Arc::clone(&st), DEFAULT_TABLE_SIZE, vec![2, 2, 4, 4, 4]).unwrap();
        assert!(tuples.iter().any(|t| sel.select(t).unwrap() == 3));
        st.set_active(3, false).unwrap();
        // No rebuild yet: the stale table must still be filtered by the bitmap.
        assert!(tuples.iter().all(|t| sel.select(t).unwrap() != 3), "{kind}");
        sel.rebuild().unwrap();
        let s = shares(tuples.iter().map(|t| sel.select(t).unwrap()), 5);
        assert_eq!(s[3], 0.0);
    }
}

#[test]
fn weight_changes_only_move_new_flows() {
    let st = store(4);
    let sel = Selector::new(PolicyKind::Aquarius, Arc::clone(&st), DEFAULT_TABLE_SIZE, vec![]).unwrap();
    let tuples = random_tuples(5_000, 5);
    let mut table = FlowTable::new();
    let mut first = Vec::new();
    for (i, t) in tuples.iter().enumerate() {
        let dip = sel.select(t).unwrap();
        let syn = PacketEvent {
            time: 0.0,
            flow_id: i as u64,
            five_tuple: *t,
            kind: PacketKind::Syn,
            payload_bytes: 0,
            ts_val: 1,
            ts_ecr: 0,
        };
        table.on_packet(&syn, dip, 0.0);
        first.push(dip);
    }
    st.actions().apply_weights(&BTreeMap::from([(0, 64), (1, 1), (2, 1), (3, 1)]), 1.0).unwrap();
    sel.sync_registers().unwrap();
    let moved = tuples.iter().zip(&first).filter(|(t, &d)| sel.select(t).unwrap() != d).count();
    assert!(moved > tuples.len() / 4, "the new table should remap many tuples, moved {moved}");
    for (i, &d) in first.iter().enumerate() {
        assert_eq!(table.pinned_dip(i as u64), Some(d));
    }
}
