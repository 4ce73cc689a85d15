//! Workload distribution: ECMP hashing, Maglev tables (plain and weighted),
//! and the weight registers the control loop writes into.

mod hash;
mod maglev;
mod registers;

pub use hash::{flow_hash, fmix64, hash_bytes, FLOW_HASH_SEED};
pub use maglev::{MaglevTable, DEFAULT_TABLE_SIZE};
pub use registers::{ActionRegisters, MAX_WEIGHT, MIN_WEIGHT};

use crate::packet_model::FiveTuple;
use crate::telemetry::VipStore;
use arc_swap::ArcSwapOption;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("no active backend to select")]
    NoBackends,
    #[error("weight {weight} for dip {dip} outside [{MIN_WEIGHT}, {MAX_WEIGHT}]")]
    WeightOutOfRange { dip: u32, weight: u32 },
    #[error("expected {expected} weights, got {got}")]
    WeightArity { expected: usize, got: usize },
    #[error("table size {0} is not prime")]
    TableSize(usize),
    #[error("dip {0} has no register slot")]
    NoSuchDip(u32),
}

/// `active[h(tuple) mod |active|]`.
pub fn ecmp_pick(tuple: &FiveTuple, active: &[u32]) -> Result<u32, PolicyError> {
    if active.is_empty() {
        return Err(PolicyError::NoBackends);
    }
    Ok(active[(flow_hash(tuple) % active.len() as u64) as usize])
}

/// Hash-range WCMP: the flow hash picks a point in `[0, sum(w))` and the
/// backend whose cumulative weight interval covers it wins. `weights[i]`
/// belongs to `active[i]`.
pub fn weighted_pick(tuple: &FiveTuple, weights: &[u32], active: &[u32]) -> Result<u32, PolicyError> {
    if active.is_empty() {
        return Err(PolicyError::NoBackends);
    }
    if weights.len() != active.len() {
        return Err(PolicyError::WeightArity { expected: active.len(), got: weights.len() });
    }
    let total: u64 = weights.iter().map(|&w| w as u64).sum();
    if total == 0 {
        return Err(PolicyError::WeightOutOfRange { dip: active[0], weight: 0 });
    }
    let mut point = flow_hash(tuple) % total;
    for (&dip, &w) in active.iter().zip(weights) {
        if point < w as u64 {
            return Ok(dip);
        }
        point -= w as u64;
    }
    unreachable!("point below total weight")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Ecmp,
    /// Equal-weight Maglev.
    Maglev,
    /// Maglev weighted by provisioned CPUs.
    Wcmp,
    /// Maglev weighted by the control loop's action registers.
    Aquarius,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Ecmp => "ecmp",
            PolicyKind::Maglev => "maglev",
            PolicyKind::Wcmp => "wcmp",
            PolicyKind::Aquarius => "aquarius",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ecmp" => Ok(PolicyKind::Ecmp),
            "maglev" => Ok(PolicyKind::Maglev),
            "wcmp" => Ok(PolicyKind::Wcmp),
            "aquarius" => Ok(PolicyKind::Aquarius),
            other => Err(format!("unknown policy `{other}`")),
        }
    }
}

/// Data-plane backend selection for one VIP.
///
/// `select` is read-only and may be called concurrently from any number of
/// workers. Table-based policies read an immutable table swapped in by the
/// control side (`rebuild`, `sync_registers`), so the per-flow path never
/// allocates or locks.
pub struct Selector {
    kind: PolicyKind,
    store: Arc<VipStore>,
    table_size: usize,
    /// Static per-slot weights for WCMP.
    static_weights: Vec<u32>,
    table: ArcSwapOption<MaglevTable>,
    installed_generation: AtomicU64,
}

impl fmt::Debug for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Selector").field("kind", &self.kind).field("table_size", &self.table_size).finish()
    }
}

impl Selector {
    /// `static_weights` is indexed by DIP slot and only used by WCMP.
    pub fn new(
        kind: PolicyKind,
        store: Arc<VipStore>,
        table_size: usize,
        static_weights: Vec<u32>,
    ) -> Result<Self, PolicyError> {
        let s = Selector {
            kind,
            store,
            table_size,
            static_weights,
            table: ArcSwapOption::empty(),
            installed_generation: AtomicU64::new(0),
        };
        if s.store.active_count() > 0 {
            s.rebuild()?;
        }
        Ok(s)
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn store(&self) -> &Arc<VipStore> {
        &self.store
    }

    /// Register generation the installed table was built from.
    pub fn installed_generation(&self) -> u64 {
        self.installed_generation.load(Ordering::Acquire)
    }

    pub fn table(&self) -> Option<Arc<MaglevTable>> {
        self.table.load_full()
    }

    #[inline]
    pub fn select(&self, tuple: &FiveTuple) -> Result<u32, PolicyError> {
        let h = flow_hash(tuple);
        if self.kind != PolicyKind::Ecmp {
            if let Some(t) = self.table.load().as_ref() {
                let dip = t.lookup(h);
                if self.store.is_active(dip) {
                    return Ok(dip);
                }
            }
        }
        self.ecmp_over_bitmap(h)
    }

    fn ecmp_over_bitmap(&self, h: u64) -> Result<u32, PolicyError> {
        loop {
            let n = self.store.active_count();
            if n == 0 {
                return Err(PolicyError::NoBackends);
            }
            // The bitmap may shrink between the two reads; retry if so.
            if let Some(dip) = self.store.nth_active((h % n as u64) as usize) {
                return Ok(dip);
            }
        }
    }

    /// Rebuilds the lookup table from the current active set and this
    /// policy's weights. No-op for ECMP.
    pub fn rebuild(&self) -> Result<(), PolicyError> {
        if self.kind == PolicyKind::Ecmp {
            return Ok(());
        }
        let active = self.store.active_dips();
        if active.is_empty() {
            self.table.store(None);
            return Err(PolicyError::NoBackends);
        }
        let (generation, weights) = match self.kind {
            PolicyKind::Maglev => (0, vec![1; active.len()]),
            PolicyKind::Wcmp => {
                (0, active.iter().map(|&d| self.static_weights.get(d as usize).copied().unwrap_or(1)).collect())
            }
            PolicyKind::Aquarius => {
                let (g, all) = self.store.actions().read();
                (g, active.iter().map(|&d| all[d as usize]).collect())
            }
            PolicyKind::Ecmp => unreachable!(),
        };
        let table = MaglevTable::build_weighted(&active, &weights, self.table_size)?;
        self.table.store(Some(Arc::new(table)));
        self.installed_generation.store(generation, Ordering::Release);
        Ok(())
    }

    /// Rebuilds if the action registers moved past the installed table.
    /// Returns whether a new table was installed.
    pub fn sync_registers(&self) -> Result<bool, PolicyError> {
        if self.kind != PolicyKind::Aquarius {
            return Ok(false);
        }
        if self.store.actions().generation() == self.installed_generation() && self.table.load().is_some() {
            return Ok(false);
        }
        self.rebuild()?;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::StoreConfig;

    fn tuple(i: u32) -> FiveTuple {
        FiveTuple { src_ip: i, src_port: (i % 60000) as u16, dst_vip: 0, dst_port: 80, proto: 6 }
    }

    fn store(n: u32) -> Arc<VipStore> {
        let s = VipStore::new(StoreConfig { vip: 0, max_dips: 16, ring_len: 4, reservoir_capacity: 4 }).unwrap();
        for d in 0..n {
            s.set_active(d, true).unwrap();
        }
        s
    }

    #[test]
    fn ecmp_single_backend() {
        for i in 0..100 {
            assert_eq!(ecmp_pick(&tuple(i), &[7]).unwrap(), 7);
        }
        assert_eq!(ecmp_pick(&tuple(0), &[]), Err(PolicyError::NoBackends));
    }

    #[test]
    fn ecmp_deterministic() {
        let active = [1, 4, 9];
        let first = ecmp_pick(&tuple(42), &active).unwrap();
        for _ in 0..1000 {
            assert_eq!(ecmp_pick(&tuple(42), &active).unwrap(), first);
        }
    }

    #[test]
    fn weighted_pick_equal_weights_matches_spread() {
        let active = [0, 1, 2, 3];
        let mut counts = [0u32; 4];
        for i in 0..40_000 {
            counts[weighted_pick(&tuple(i), &[2, 2, 2, 2], &active).unwrap() as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 40_000.0 - 0.25).abs() < 0.01);
        }
        assert!(weighted_pick(&tuple(0), &[1], &active).is_err());
    }

    #[test]
    fn selector_ecmp_follows_bitmap() {
        let s = store(3);
        let sel = Selector::new(PolicyKind::Ecmp, Arc::clone(&s), 7, vec![]).unwrap();
        s.set_active(1, false).unwrap();
        for i in 0..1000 {
            assert_ne!(sel.select(&tuple(i)).unwrap(), 1);
        }
        for d in [0, 2] {
            s.set_active(d, false).unwrap();
        }
        assert_eq!(sel.select(&tuple(0)), Err(PolicyError::NoBackends));
    }

    #[test]
    fn selector_matches_ecmp_pick() {
        let s = store(5);
        let sel = Selector::new(PolicyKind::Ecmp, Arc::clone(&s), 7, vec![]).unwrap();
        let active = s.active_dips();
        for i in 0..1000 {
            assert_eq!(sel.select(&tuple(i)).unwrap(), ecmp_pick(&tuple(i), &active).unwrap());
        }
    }

    #[test]
    fn aquarius_table_follows_registers() {
        let s = store(2);
        let sel = Selector::new(PolicyKind::Aquarius, Arc::clone(&s), 65537, vec![]).unwrap();
        assert!(!sel.sync_registers().unwrap());
        s.actions().apply_weights(&[(0, 1), (1, 3)].into(), 0.25).unwrap();
        assert!(sel.sync_registers().unwrap());
        assert_eq!(sel.installed_generation(), 1);
        let t = sel.table().unwrap();
        assert!((t.share(1) as f64 / t.len() as f64 - 0.75).abs() < 0.001);
    }

    #[test]
    fn table_policy_skips_inactive_backend() {
        let s = store(4);
        let sel = Selector::new(PolicyKind::Maglev, Arc::clone(&s), 251, vec![]).unwrap();
        s.set_active(2, false).unwrap();
        for i in 0..2000 {
            assert_ne!(sel.select(&tuple(i)).unwrap(), 2);
        }
    }

    #[test]
    fn wcmp_uses_static_weights() {
        let s = store(2);
        let sel = Selector::new(PolicyKind::Wcmp, Arc::clone(&s), 65537, vec![2, 4]).unwrap();
        let t = sel.table().unwrap();
        assert!((t.share(1) as f64 / t.len() as f64 - 2.0 / 3.0).abs() < 0.001);
    }
}
