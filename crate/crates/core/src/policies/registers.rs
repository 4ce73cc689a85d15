use super::PolicyError;
use std::collections::BTreeMap;
use std::sync::atomic::{fence, AtomicU64, Ordering};

pub const MIN_WEIGHT: u32 = 1;
pub const MAX_WEIGHT: u32 = 64;

/// Double-buffered per-DIP weight registers written by the control loop and
/// read by the data plane.
///
/// The active half is `generation & 1`. An apply copies the active half into
/// the other one with the new weights, then bumps the generation with
/// release ordering. Before touching a half, the writer advertises the
/// generation it is about to publish in `pending`; a reader that sees
/// `pending` move two generations past the one it started from knows its
/// half may have been rewritten and retries. Readers never block the writer.
#[derive(Debug)]
pub struct ActionRegisters {
    generation: AtomicU64,
    pending: AtomicU64,
    applied_at: AtomicU64,
    halves: [Box<[AtomicU64]>; 2],
}

impl ActionRegisters {
    /// All weights start at [`MIN_WEIGHT`], generation 0.
    pub fn new(max_dips: usize) -> Self {
        let half = || (0..max_dips).map(|_| AtomicU64::new(MIN_WEIGHT as u64)).collect::<Box<[_]>>();
        ActionRegisters {
            generation: AtomicU64::new(0),
            pending: AtomicU64::new(0),
            applied_at: AtomicU64::new(0f64.to_bits()),
            halves: [half(), half()],
        }
    }

    pub fn len(&self) -> usize {
        self.halves[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn generation(&self) -> u64 {
        self.generation.load(Ordering::Acquire)
    }

    /// Time passed to the most recent successful apply.
    pub fn applied_at(&self) -> f64 {
        f64::from_bits(self.applied_at.load(Ordering::Acquire))
    }

    /// Publishes new weights for the listed DIPs; unlisted DIPs keep their
    /// current weight. Single writer only. Any out-of-range weight rejects the
    /// whole update and nothing is flipped.
    pub fn apply_weights(&self, weights: &BTreeMap<u32, u32>, now: f64) -> Result<u64, PolicyError> {
        for (&dip, &w) in weights {
            if dip as usize >= self.len() {
                return Err(PolicyError::NoSuchDip(dip));
            }
            if !(MIN_WEIGHT..=MAX_WEIGHT).contains(&w) {
                return Err(PolicyError::WeightOutOfRange { dip, weight: w });
            }
        }
        let g = self.generation.load(Ordering::Relaxed);
        let next = g + 1;
        let (src, dst) = (&self.halves[(g & 1) as usize], &self.halves[(next & 1) as usize]);
        self.pending.store(next, Ordering::Relaxed);
        fence(Ordering::Release);
        for (i, (s, d)) in src.iter().zip(dst.iter()).enumerate() {
            let w = weights.get(&(i as u32)).map_or_else(|| s.load(Ordering::Relaxed), |&w| w as u64);
            d.store(w, Ordering::Relaxed);
        }
        self.applied_at.store(now.to_bits(), Ordering::Relaxed);
        self.generation.store(next, Ordering::Release);
        Ok(next)
    }

    /// Copies the active weights into `out` (one entry per DIP slot) and
    /// returns the generation they belong to.
    pub fn read_into(&self, out: &mut [u32]) -> u64 {
        assert_eq!(out.len(), self.len());
        loop {
            let g = self.generation.load(Ordering::Acquire);
            let half = &self.halves[(g & 1) as usize];
            for (o, w) in out.iter_mut().zip(half.iter()) {
                *o = w.load(Ordering::Relaxed) as u32;
            }
            fence(Ordering::Acquire);
            if self.pending.load(Ordering::Relaxed) <= g + 1 {
                return g;
            }
            std::hint::spin_loop();
        }
    }

    pub fn read(&self) -> (u64, Vec<u32>) {
        let mut out = vec![0; self.len()];
        let g = self.read_into(&mut out);
        (g, out)
    }
}
