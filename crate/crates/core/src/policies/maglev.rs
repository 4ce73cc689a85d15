use super::hash::hash_bytes;
use super::PolicyError;

/// Default lookup table size (prime).
pub const DEFAULT_TABLE_SIZE: usize = 65537;

const OFFSET_SEED: u64 = 0x6d61_676c_6576_3031;
const SKIP_SEED: u64 = 0x736b_6970_7365_6564;

/// Maglev consistent-hash lookup table.
///
/// Each backend walks its own permutation of table slots,
/// `(offset + i * skip) mod M`, derived from two independent hashes of its
/// identity. Backends take turns claiming their next free slot; a backend of
/// weight `w` gets `w` claims per turn, so its share of slots is close to
/// `w / sum(w)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaglevTable {
    entries: Vec<u32>,
    backends: Vec<(u32, u32)>,
}

fn is_prime(n: usize) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n.is_multiple_of(d) {
            return false;
        }
        d += 1;
    }
    true
}

impl MaglevTable {
    /// Equal-weight table.
    pub fn build(backends: &[u32], table_size: usize) -> Result<Self, PolicyError> {
        let weights = vec![1; backends.len()];
        Self::build_weighted(backends, &weights, table_size)
    }

    pub fn build_weighted(backends: &[u32], weights: &[u32], table_size: usize) -> Result<Self, PolicyError> {
        if backends.is_empty() {
            return Err(PolicyError::NoBackends);
        }
        if backends.len() != weights.len() {
            return Err(PolicyError::WeightArity { expected: backends.len(), got: weights.len() });
        }
        if !is_prime(table_size) {
            return Err(PolicyError::TableSize(table_size));
        }
        if let Some((&dip, &w)) = backends.iter().zip(weights).find(|(_, &w)| w == 0) {
            return Err(PolicyError::WeightOutOfRange { dip, weight: w });
        }
        let m = table_size as u64;
        let perms: Vec<(u64, u64)> = backends
            .iter()
            .map(|dip| {
                let id = dip.to_le_bytes();
                let offset = hash_bytes(&id, OFFSET_SEED) % m;
                let skip = hash_bytes(&id, SKIP_SEED) % (m - 1) + 1;
                (offset, skip)
            })
            .collect();
        let mut next = vec![0u64; backends.len()];
        let mut entries = vec![u32::MAX; table_size];
        let mut filled = 0;
        'fill: loop {
            for (i, &(offset, skip)) in perms.iter().enumerate() {
                for _ in 0..weights[i] {
                    let mut c = (offset + next[i] * skip) % m;
                    while entries[c as usize] != u32::MAX {
                        next[i] += 1;
                        c = (offset + next[i] * skip) % m;
                    }
                    entries[c as usize] = backends[i];
                    next[i] += 1;
                    filled += 1;
                    if filled == table_size {
                        break 'fill;
                    }
                }
            }
        }
        let backends = backends.iter().copied().zip(weights.iter().copied()).collect();
        Ok(MaglevTable { entries, backends })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    /// Backends and their weights, in build order.
    pub fn backends(&self) -> &[(u32, u32)] {
        &self.backends
    }

    #[inline]
    pub fn lookup(&self, hash: u64) -> u32 {
        self.entries[(hash % self.entries.len() as u64) as usize]
    }

    /// Number of slots owned by `dip`.
    pub fn share(&self, dip: u32) -> usize {
        self.entries.iter().filter(|&&e| e == dip).count()
    }
}
