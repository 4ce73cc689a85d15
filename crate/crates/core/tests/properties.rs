//! Property tests over the pure building blocks.

use aquarius_core::estimator_loop::weights_from_predictions;
use aquarius_core::feature_pipeline::{nearest_rank, reduce_channel, Reductions, DECAY};
use aquarius_core::metrics::{jain_fairness, overprovision};
use aquarius_core::policies::MaglevTable;
use aquarius_core::telemetry::ReservoirSampler;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn windows() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.0..100.0f64, 0..20), 1..30)
}

fn fold(ws: &[Vec<f64>]) -> Option<Reductions> {
    let mut state: Option<Reductions> = None;
    for w in ws {
        state = Some(reduce_channel(w, state.as_ref()));
    }
    state
}

proptest! {
    #[test]
    fn decay_is_causal(ws in windows(), extra in windows()) {
        // Appending later windows never changes what an earlier prefix produced.
        let mut all = ws.clone();
        all.extend(extra);
        let mut state = None;
        for (i, w) in all.iter().enumerate() {
            state = Some(reduce_channel(w, state.as_ref()));
            if i + 1 == ws.len() {
                prop_assert_eq!(state, fold(&ws));
            }
        }
    }

    #[test]
    fn decay_matches_closed_form(ws in prop::collection::vec(prop::collection::vec(0.0..100.0f64, 1..20), 1..30)) {
        let avgs: Vec<f64> = ws.iter().map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
        let mut expected = avgs[0];
        for a in &avgs[1..] {
            expected = DECAY * expected + (1.0 - DECAY) * a;
        }
        let got = fold(&ws).unwrap().decay_avg;
        prop_assert!((got - expected).abs() < 1e-9);
        let (lo, hi) = avgs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &a| (l.min(a), h.max(a)));
        prop_assert!(got >= lo - 1e-9 && got <= hi + 1e-9);
    }

    #[test]
    fn nearest_rank_is_an_order_statistic(mut xs in prop::collection::vec(-1e6..1e6f64, 1..200), q in 0.01..1.0f64) {
        xs.sort_by(f64::total_cmp);
        let v = nearest_rank(&xs, q);
        prop_assert!(xs.contains(&v));
        let at_or_below = xs.iter().filter(|&&x| x <= v).count() as f64;
        prop_assert!(at_or_below >= q * xs.len() as f64 - 1e-9);
    }

    #[test]
    fn weights_are_bounded_and_monotone(preds in prop::collection::btree_map(0u32..64, -50.0..200.0f64, 1..20)) {
        let w = weights_from_predictions(&preds, 64);
        prop_assert_eq!(w.len(), preds.len());
        prop_assert!(w.values().all(|&x| (1..=64).contains(&x)));
        let least = preds.iter().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(w[least], 64);
        for (a, pa) in &preds {
            for (b, pb) in &preds {
                if pa <= pb {
                    prop_assert!(w[a] >= w[b]);
                }
            }
        }
    }

    #[test]
    fn jain_and_overprovision_bounds(xs in prop::collection::vec(0.0..1e3f64, 1..50), k in 0.1..10.0f64) {
        let n = xs.len() as f64;
        let j = jain_fairness(&xs);
        prop_assert!(j >= 1.0 / n - 1e-12 && j <= 1.0 + 1e-12);
        let scaled: Vec<f64> = xs.iter().map(|x| x * k).collect();
        prop_assert!((jain_fairness(&scaled) - j).abs() < 1e-9);
        let o = overprovision(&xs);
        prop_assert!(o >= 1.0 - 1e-12 && o <= n + 1e-9);
    }

    #[test]
    fn maglev_uses_every_backend(weights in prop::collection::vec(1u32..=64, 1..16)) {
        let backends: Vec<u32> = (0..weights.len() as u32).map(|i| i * 3 + 1).collect();
        let t = MaglevTable::build_weighted(&backends, &weights, 4099).unwrap();
        prop_assert_eq!(t.len(), 4099);
        prop_assert!(t.entries().iter().all(|e| backends.contains(e)));
        prop_assert!(backends.iter().all(|&b| t.share(b) > 0));
        prop_assert_eq!(backends.iter().map(|&b| t.share(b)).sum::<usize>(), 4099);
    }

    #[test]
    fn reservoir_holds_a_subset(n in 0usize..500, cap in 1usize..64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = ReservoirSampler::new(cap, 1.0, 0.0);
        for i in 0..n {
            r.insert(i as f64, 0.5, &mut rng);
        }
        prop_assert_eq!(r.len(), n.min(cap));
        prop_assert_eq!(r.seen(), n as u64);
        let mut vals: Vec<f64> = r.values().to_vec();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        prop_assert_eq!(vals.len(), r.len());
        prop_assert!(vals.iter().all(|&v| v >= 0.0 && v < n as f64));
    }
}

#[test]
fn empty_windows_carry_state_forward() {
    let s = fold(&[vec![1.0, 2.0, 3.0], vec![], vec![]]).unwrap();
    assert_eq!(s, reduce_channel(&[1.0, 2.0, 3.0], None));
    let m = BTreeMap::from([(0, 5.0)]);
    assert_eq!(weights_from_predictions(&m, 64)[&0], 64);
}
