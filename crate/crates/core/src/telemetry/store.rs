use super::frame::{channel_words, frame_words, offsets, Checksum, FeatureFrame};
use super::reservoir::{ReservoirSampler, DEFAULT_RESERVOIR_CAPACITY};
use crate::parser::{Channel, Counter, PacketOutcome, N_CHANNELS, N_COUNTERS};
use crate::policies::ActionRegisters;
use memmap2::MmapMut;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::Path;
use std::sync::atomic::{fence, AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

/// `b"AQUASHM\0"` read as a little-endian word.
pub const REGION_MAGIC: u64 = u64::from_le_bytes(*b"AQUASHM\0");
pub const LAYOUT_VERSION: u64 = 1;
pub const DEFAULT_RING_LEN: usize = 4;
pub const DEFAULT_MAX_DIPS: usize = 64;

/// Region header, in words:
///
/// | word | field               |
/// |------|---------------------|
/// | 0    | magic               |
/// | 1    | layout version      |
/// | 2    | vip                 |
/// | 3    | max dips            |
/// | 4    | ring length K       |
/// | 5    | reservoir capacity  |
/// | 6    | counters per frame  |
/// | 7    | channels per frame  |
/// | 8    | words per frame     |
/// | 9-15 | reserved            |
///
/// followed by the active-server bitmap (`ceil(max_dips / 64)` words, bit i
/// of word i/64 set when DIP slot i is active) and then `max_dips * K` frame
/// buffers, DIP-major.
pub const HEADER_WORDS: usize = 16;

const _: () = assert!(cfg!(target_endian = "little"), "region layout assumes little-endian words");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub vip: u32,
    pub max_dips: usize,
    pub ring_len: usize,
    pub reservoir_capacity: usize,
}

impl StoreConfig {
    pub fn new(vip: u32, max_dips: usize) -> Self {
        StoreConfig { vip, max_dips, ring_len: DEFAULT_RING_LEN, reservoir_capacity: DEFAULT_RESERVOIR_CAPACITY }
    }

    fn bitmap_words(&self) -> usize {
        self.max_dips.div_ceil(64)
    }

    fn frame_words(&self) -> usize {
        frame_words(self.reservoir_capacity)
    }

    pub fn region_words(&self) -> usize {
        HEADER_WORDS + self.bitmap_words() + self.max_dips * self.ring_len * self.frame_words()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("dip slot {dip} out of range (max {max})")]
    NoSuchDip { dip: u32, max: usize },
    #[error("dip {0} already has a frame writer")]
    WriterClaimed(u32),
    #[error("invalid store configuration: {0}")]
    Config(String),
    #[error("region is not a feature store (magic {0:#x})")]
    BadMagic(u64),
    #[error("unsupported layout version {0}")]
    BadVersion(u64),
    #[error("shared region {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

enum Backing {
    Heap(#[allow(dead_code)] Box<[AtomicU64]>),
    Mapped(#[allow(dead_code)] MmapMut),
}

struct Region {
    ptr: *const AtomicU64,
    len: usize,
    _backing: Backing,
}

// SAFETY: the region is only ever accessed through atomic word operations.
unsafe impl Send for Region {}
unsafe impl Sync for Region {}

impl Region {
    fn heap(len: usize) -> Self {
        let words: Box<[AtomicU64]> = (0..len).map(|_| AtomicU64::new(0)).collect();
        Region { ptr: words.as_ptr(), len, _backing: Backing::Heap(words) }
    }

    fn mapped(mut map: MmapMut) -> Self {
        let len = map.len() / 8;
        let ptr = map.as_mut_ptr() as *const AtomicU64;
        assert_eq!(ptr as usize % std::mem::align_of::<AtomicU64>(), 0);
        Region { ptr, len, _backing: Backing::Mapped(map) }
    }

    #[inline]
    fn words(&self) -> &[AtomicU64] {
        // SAFETY: ptr/len describe memory owned by `_backing` for the
        // lifetime of `self`, aligned for AtomicU64.
        unsafe { std::slice::from_raw_parts(self.ptr, self.len) }
    }
}

/// Multi-buffered feature store for one VIP.
///
/// Each DIP slot owns a ring of `K` frame buffers with a single writer. The
/// writer fills the oldest buffer after marking it with sequence 0, then
/// publishes it by storing the next sequence number with release ordering.
/// Readers copy the buffer holding the highest sequence and re-check that
/// sequence afterwards, so they never block the writer and never return a
/// buffer that was being rewritten.
pub struct VipStore {
    config: StoreConfig,
    region: Region,
    claimed: Box<[AtomicBool]>,
    actions: ActionRegisters,
}

impl std::fmt::Debug for VipStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VipStore").field("config", &self.config).finish_non_exhaustive()
    }
}

impl VipStore {
    /// Creates an in-process store with every DIP slot inactive.
    pub fn new(config: StoreConfig) -> Result<Arc<Self>, StoreError> {
        validate(&config)?;
        let store = Self::from_region(config, Region::heap(config.region_words()));
        store.write_header();
        Ok(Arc::new(store))
    }

    /// Creates (or truncates) a file-backed region, typically under
    /// `/dev/shm`, that other processes can open with [`VipStore::open_mapped`].
    pub fn create_mapped(path: impl AsRef<Path>, config: StoreConfig) -> Result<Arc<Self>, StoreError> {
        validate(&config)?;
        let path = path.as_ref();
        let io = |source| StoreError::Io { path: path.display().to_string(), source };
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(path).map_err(io)?;
        file.set_len((config.region_words() * 8) as u64).map_err(io)?;
        // SAFETY: the file is sized above; all access goes through atomics.
        let map = unsafe { MmapMut::map_mut(&file) }.map_err(io)?;
        let store = Self::from_region(config, Region::mapped(map));
        store.write_header();
        Ok(Arc::new(store))
    }

    /// Maps an existing region and validates its header.
    pub fn open_mapped(path: impl AsRef<Path>) -> Result<Arc<Self>, StoreError> {
        let path = path.as_ref();
        let io = |source| StoreError::Io { path: path.display().to_string(), source };
        let file = OpenOptions::new().read(true).write(true).open(path).map_err(io)?;
        // SAFETY: header is validated before any frame access.
        let map = unsafe { MmapMut::map_mut(&file) }.map_err(io)?;
        let region = Region::mapped(map);
        let w = region.words();
        if w.len() < HEADER_WORDS {
            return Err(StoreError::Config("region shorter than its header".into()));
        }
        let magic = w[0].load(Ordering::Acquire);
        if magic != REGION_MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        let version = w[1].load(Ordering::Acquire);
        if version != LAYOUT_VERSION {
            return Err(StoreError::BadVersion(version));
        }
        let config = StoreConfig {
            vip: w[2].load(Ordering::Relaxed) as u32,
            max_dips: w[3].load(Ordering::Relaxed) as usize,
            ring_len: w[4].load(Ordering::Relaxed) as usize,
            reservoir_capacity: w[5].load(Ordering::Relaxed) as usize,
        };
        validate(&config)?;
        if w[6].load(Ordering::Relaxed) as usize != N_COUNTERS
            || w[7].load(Ordering::Relaxed) as usize != N_CHANNELS
            || w[8].load(Ordering::Relaxed) as usize != config.frame_words()
            || w.len() < config.region_words()
        {
            return Err(StoreError::Config("header does not match this build's frame layout".into()));
        }
        Ok(Arc::new(Self::from_region(config, region)))
    }

    fn from_region(config: StoreConfig, region: Region) -> Self {
        VipStore {
            claimed: (0..config.max_dips).map(|_| AtomicBool::new(false)).collect(),
            actions: ActionRegisters::new(config.max_dips),
            region,
            config,
        }
    }

    fn write_header(&self) {
        let w = self.region.words();
        let c = &self.config;
        let fields = [
            REGION_MAGIC,
            LAYOUT_VERSION,
            c.vip as u64,
            c.max_dips as u64,
            c.ring_len as u64,
            c.reservoir_capacity as u64,
            N_COUNTERS as u64,
            N_CHANNELS as u64,
            c.frame_words() as u64,
        ];
        // Magic goes last so a concurrent opener never sees a half header.
        for (i, v) in fields.iter().enumerate().skip(1) {
            w[i].store(*v, Ordering::Relaxed);
        }
        w[0].store(fields[0], Ordering::Release);
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn vip(&self) -> u32 {
        self.config.vip
    }

    pub fn actions(&self) -> &ActionRegisters {
        &self.actions
    }

    fn check_dip(&self, dip: u32) -> Result<(), StoreError> {
        if (dip as usize) < self.config.max_dips {
            Ok(())
        } else {
            Err(StoreError::NoSuchDip { dip, max: self.config.max_dips })
        }
    }

    fn bitmap(&self) -> &[AtomicU64] {
        &self.region.words()[HEADER_WORDS..HEADER_WORDS + self.config.bitmap_words()]
    }

    /// Marks a DIP slot as an active (or inactive) backend. Frame data is
    /// left untouched.
    pub fn set_active(&self, dip: u32, active: bool) -> Result<(), StoreError> {
        self.check_dip(dip)?;
        let word = &self.bitmap()[dip as usize / 64];
        let bit = 1u64 << (dip % 64);
        if active {
            word.fetch_or(bit, Ordering::AcqRel);
        } else {
            word.fetch_and(!bit, Ordering::AcqRel);
        }
        Ok(())
    }

    pub fn is_active(&self, dip: u32) -> bool {
        (dip as usize) < self.config.max_dips
            && self.bitmap()[dip as usize / 64].load(Ordering::Acquire) & (1 << (dip % 64)) != 0
    }

    /// Active DIPs in ascending order.
    pub fn active_dips(&self) -> Vec<u32> {
        let mut out = Vec::new();
        self.active_dips_into(&mut out);
        out
    }

    pub fn active_dips_into(&self, out: &mut Vec<u32>) {
        out.clear();
        for (i, word) in self.bitmap().iter().enumerate() {
            let mut bits = word.load(Ordering::Acquire);
            while bits != 0 {
                let b = bits.trailing_zeros();
                out.push(i as u32 * 64 + b);
                bits &= bits - 1;
            }
        }
    }

    pub fn active_count(&self) -> usize {
        self.bitmap().iter().map(|w| w.load(Ordering::Acquire).count_ones() as usize).sum()
    }

    /// The `k`-th active DIP in ascending order, without allocating.
    pub fn nth_active(&self, mut k: usize) -> Option<u32> {
        for (i, word) in self.bitmap().iter().enumerate() {
            let mut bits = word.load(Ordering::Acquire);
            let ones = bits.count_ones() as usize;
            if k >= ones {
                k -= ones;
                continue;
            }
            for _ in 0..k {
                bits &= bits - 1;
            }
            return Some(i as u32 * 64 + bits.trailing_zeros());
        }
        None
    }

    fn frame_base(&self, dip: u32, slot: usize) -> usize {
        HEADER_WORDS
            + self.config.bitmap_words()
            + (dip as usize * self.config.ring_len + slot) * self.config.frame_words()
    }

    fn slot_seq(&self, dip: u32, slot: usize) -> &AtomicU64 {
        &self.region.words()[self.frame_base(dip, slot) + offsets::SEQ]
    }

    /// Claims the single writer handle of a DIP slot. `window` is the frame
    /// interval used for the reservoirs; `seed` drives reservoir replacement.
    pub fn writer(self: &Arc<Self>, dip: u32, window: f64, start: f64, seed: u64) -> Result<FrameWriter, StoreError> {
        self.check_dip(dip)?;
        if self.claimed[dip as usize].swap(true, Ordering::AcqRel) {
            return Err(StoreError::WriterClaimed(dip));
        }
        // Resume numbering after whatever is already in the ring.
        let mut seq = 0;
        let mut next_slot = 0;
        for slot in 0..self.config.ring_len {
            let s = self.slot_seq(dip, slot).load(Ordering::Acquire);
            if s > seq {
                seq = s;
                next_slot = (slot + 1) % self.config.ring_len;
            }
        }
        let cap = self.config.reservoir_capacity;
        Ok(FrameWriter {
            store: Arc::clone(self),
            dip,
            counters: Default::default(),
            reservoirs: (0..N_CHANNELS).map(|_| ReservoirSampler::new(cap, window, start)).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ (dip as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            seq,
            next_slot,
            window_start: start,
            last: FeatureFrame::default(),
        })
    }

    /// Copies the newest consistent frame of one DIP, regardless of whether
    /// it is active. Returns `None` before the first publish.
    pub fn read_latest(&self, dip: u32) -> Option<FeatureFrame> {
        let mut frame = FeatureFrame::default();
        self.read_latest_into(dip, &mut frame).then_some(frame)
    }

    pub fn read_latest_into(&self, dip: u32, out: &mut FeatureFrame) -> bool {
        if self.check_dip(dip).is_err() {
            return false;
        }
        loop {
            let mut best = (0u64, 0usize);
            for slot in 0..self.config.ring_len {
                let s = self.slot_seq(dip, slot).load(Ordering::Acquire);
                if s > best.0 {
                    best = (s, slot);
                }
            }
            if best.0 == 0 {
                return false;
            }
            if self.try_copy(dip, best.1, best.0, out) {
                return true;
            }
            std::hint::spin_loop();
        }
    }

    fn try_copy(&self, dip: u32, slot: usize, seq: u64, out: &mut FeatureFrame) -> bool {
        let w = self.region.words();
        let base = self.frame_base(dip, slot);
        let cap = self.config.reservoir_capacity;
        let load = |i: usize| w[base + i].load(Ordering::Relaxed);
        out.seq = seq;
        out.checksum = load(offsets::CHECKSUM);
        out.window_start = f64::from_bits(load(offsets::WINDOW_START));
        out.window_end = f64::from_bits(load(offsets::WINDOW_END));
        for (i, c) in out.counters.iter_mut().enumerate() {
            *c = load(offsets::COUNTERS + i);
        }
        out.channels.resize_with(N_CHANNELS, Default::default);
        for (c, ch) in out.channels.iter_mut().enumerate() {
            let at = offsets::CHANNELS + c * channel_words(cap);
            let len = (load(at) as usize).min(cap);
            ch.values.clear();
            ch.times.clear();
            ch.values.extend((0..len).map(|i| f64::from_bits(load(at + 1 + i))));
            ch.times.extend((0..len).map(|i| f64::from_bits(load(at + 1 + cap + i))));
        }
        fence(Ordering::Acquire);
        w[base + offsets::SEQ].load(Ordering::Relaxed) == seq
    }

    /// Latest frame of every active DIP. DIPs with nothing published yet are
    /// absent.
    pub fn fetch_latest(&self) -> BTreeMap<u32, FeatureFrame> {
        self.active_dips().into_iter().filter_map(|dip| self.read_latest(dip).map(|f| (dip, f))).collect()
    }

    #[cfg(test)]
    pub(crate) fn poke_seq(&self, dip: u32, slot: usize, seq: u64) {
        self.slot_seq(dip, slot).store(seq, Ordering::Release);
    }
}

fn validate(c: &StoreConfig) -> Result<(), StoreError> {
    if c.max_dips == 0 {
        return Err(StoreError::Config("max_dips must be positive".into()));
    }
    if c.ring_len < 2 {
        return Err(StoreError::Config("ring needs at least 2 buffers".into()));
    }
    if c.reservoir_capacity == 0 {
        return Err(StoreError::Config("reservoir capacity must be positive".into()));
    }
    Ok(())
}

/// The data-plane side of one (VIP, DIP) frame ring.
pub struct FrameWriter {
    store: Arc<VipStore>,
    dip: u32,
    counters: [AtomicU64; N_COUNTERS],
    reservoirs: Vec<ReservoirSampler>,
    rng: ChaCha8Rng,
    seq: u64,
    next_slot: usize,
    window_start: f64,
    last: FeatureFrame,
}

impl std::fmt::Debug for FrameWriter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrameWriter").field("dip", &self.dip).field("seq", &self.seq).finish_non_exhaustive()
    }
}

impl FrameWriter {
    pub fn dip(&self) -> u32 {
        self.dip
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn window_start(&self) -> f64 {
        self.window_start
    }

    #[inline]
    pub fn add(&self, counter: Counter, by: u64) {
        if by != 0 {
            self.counters[counter.index()].fetch_add(by, Ordering::Relaxed);
        }
    }

    #[inline]
    pub fn set_gauge(&self, ongoing: u64) {
        self.counters[Counter::FlowOngoing.index()].store(ongoing, Ordering::Relaxed);
    }

    pub fn gauge(&self) -> u64 {
        self.counters[Counter::FlowOngoing.index()].load(Ordering::Relaxed)
    }

    #[inline]
    pub fn sample(&mut self, channel: Channel, value: f64, now: f64) {
        self.reservoirs[channel.index()].insert(value, now, &mut self.rng);
    }

    /// Applies one parsed packet's counters and observations.
    #[inline]
    pub fn record(&mut self, outcome: &PacketOutcome) {
        for c in Counter::ALL {
            if c != Counter::FlowOngoing {
                self.add(c, outcome.counters[c.index()]);
            }
        }
        self.set_gauge(outcome.ongoing);
        for o in &outcome.observations {
            self.reservoirs[o.channel.index()].insert(o.value, o.time, &mut self.rng);
        }
    }

    /// Closes the current window at `now` and publishes it. Returns the new
    /// sequence number.
    pub fn publish(&mut self, now: f64) -> u64 {
        let frame = &mut self.last;
        frame.window_start = self.window_start;
        frame.window_end = now;
        for c in Counter::ALL {
            frame.counters[c.index()] = if c == Counter::FlowOngoing {
                self.counters[c.index()].load(Ordering::Relaxed)
            } else {
                self.counters[c.index()].swap(0, Ordering::Relaxed)
            };
        }
        for (ch, r) in frame.channels.iter_mut().zip(&mut self.reservoirs) {
            ch.values.clear();
            ch.times.clear();
            if r.window_start() < now {
                ch.values.extend_from_slice(r.values());
                ch.times.extend_from_slice(r.times());
            }
            r.reset(now);
        }

        let store = &self.store;
        let cap = store.config.reservoir_capacity;
        let slot = self.next_slot;
        self.next_slot = (slot + 1) % store.config.ring_len;
        let base = store.frame_base(self.dip, slot);
        let w = store.region.words();
        w[base + offsets::SEQ].store(0, Ordering::Relaxed);
        fence(Ordering::Release);

        let put = |i: usize, v: u64| w[base + i].store(v, Ordering::Relaxed);
        let mut h = Checksum::new();
        put(offsets::WINDOW_START, frame.window_start.to_bits());
        h.push(frame.window_start.to_bits());
        put(offsets::WINDOW_END, frame.window_end.to_bits());
        h.push(frame.window_end.to_bits());
        for (i, &c) in frame.counters.iter().enumerate() {
            put(offsets::COUNTERS + i, c);
            h.push(c);
        }
        for (c, ch) in frame.channels.iter().enumerate() {
            let at = offsets::CHANNELS + c * channel_words(cap);
            put(at, ch.values.len() as u64);
            h.push(ch.values.len() as u64);
            for (i, v) in ch.values.iter().enumerate() {
                put(at + 1 + i, v.to_bits());
                h.push(v.to_bits());
            }
            for (i, t) in ch.times.iter().enumerate() {
                put(at + 1 + cap + i, t.to_bits());
                h.push(t.to_bits());
            }
        }
        let checksum = h.finish();
        put(offsets::CHECKSUM, checksum);

        self.seq += 1;
        frame.seq = self.seq;
        frame.checksum = checksum;
        w[base + offsets::SEQ].store(self.seq, Ordering::Release);
        self.window_start = now;
        self.seq
    }

    /// The frame most recently published by this writer.
    pub fn last_published(&self) -> &FeatureFrame {
        &self.last
    }
}

impl Drop for FrameWriter {
    fn drop(&mut self) {
        self.store.claimed[self.dip as usize].store(false, Ordering::Release);
    }
}

/// Frames fetched for one DIP, in fetch order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DipHistory {
    pub dip: u32,
    pub entries: Vec<(f64, FeatureFrame)>,
}

impl DipHistory {
    pub fn last_seq(&self) -> u64 {
        self.entries.last().map_or(0, |(_, f)| f.seq)
    }
}

/// Processor-side reader that mirrors fetched frames into per-DIP histories.
#[derive(Debug)]
pub struct FeatureFetcher {
    store: Arc<VipStore>,
    histories: BTreeMap<u32, DipHistory>,
    keep_history: bool,
}

impl FeatureFetcher {
    pub fn new(store: Arc<VipStore>) -> Self {
        FeatureFetcher { store, histories: BTreeMap::new(), keep_history: true }
    }

    /// Reader that only tracks the latest sequence per DIP.
    pub fn without_history(store: Arc<VipStore>) -> Self {
        FeatureFetcher { store, histories: BTreeMap::new(), keep_history: false }
    }

    pub fn store(&self) -> &Arc<VipStore> {
        &self.store
    }

    /// Fetches the newest frame of each active DIP. Only frames newer than
    /// the last one seen for that DIP are returned and recorded.
    pub fn fetch_latest(&mut self, now: f64) -> BTreeMap<u32, FeatureFrame> {
        let mut out = BTreeMap::new();
        for (dip, frame) in self.store.fetch_latest() {
            let hist = self.histories.entry(dip).or_insert_with(|| DipHistory { dip, entries: Vec::new() });
            if frame.seq <= hist.last_seq() {
                continue;
            }
            if self.keep_history {
                hist.entries.push((now, frame.clone()));
            } else {
                hist.entries.clear();
                hist.entries.push((now, FeatureFrame { seq: frame.seq, ..FeatureFrame::default() }));
            }
            out.insert(dip, frame);
        }
        out
    }

    pub fn history(&self, dip: u32) -> Option<&DipHistory> {
        self.histories.get(&dip)
    }

    pub fn histories(&self) -> &BTreeMap<u32, DipHistory> {
        &self.histories
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(max_dips: usize) -> Arc<VipStore> {
        VipStore::new(StoreConfig { vip: 0, max_dips, ring_len: 4, reservoir_capacity: 8 }).unwrap()
    }

    #[test]
    fn first_publish_is_seq_one() {
        let s = store(2);
        let mut w = s.writer(0, 0.05, 0.0, 1).unwrap();
        assert_eq!(w.publish(0.05), 1);
        assert_eq!(w.publish(0.10), 2);
    }

    #[test]
    fn reader_picks_highest_seq() {
        let s = store(1);
        s.set_active(0, true).unwrap();
        let mut w = s.writer(0, 0.05, 0.0, 1).unwrap();
        for i in 1..=3 {
            w.add(Counter::Syn, i);
            w.publish(i as f64 * 0.05);
        }
        // Ring now {1, 2, 3, 0}; rearrange to {3, 0, 2, 1} by hand.
        let f = s.read_latest(0).unwrap();
        assert_eq!((f.seq, f.counter(Counter::Syn)), (3, 3));
        s.poke_seq(0, 0, 3);
        s.poke_seq(0, 1, 0);
        s.poke_seq(0, 2, 2);
        s.poke_seq(0, 3, 1);
        let f = s.read_latest(0).unwrap();
        assert_eq!(f.seq, 3);
        // Slot 0 held the seq-1 payload (one SYN).
        assert_eq!(f.counter(Counter::Syn), 1);
    }

    #[test]
    fn inactive_dip_not_fetched() {
        let s = store(3);
        let mut w = s.writer(1, 0.05, 0.0, 1).unwrap();
        w.publish(0.05);
        assert!(s.fetch_latest().is_empty());
        s.set_active(1, true).unwrap();
        assert_eq!(s.fetch_latest().keys().copied().collect::<Vec<_>>(), vec![1]);
        s.set_active(1, false).unwrap();
        assert!(s.fetch_latest().is_empty());
    }

    #[test]
    fn no_frame_before_publish() {
        let s = store(1);
        s.set_active(0, true).unwrap();
        let _w = s.writer(0, 0.05, 0.0, 1).unwrap();
        assert!(s.fetch_latest().is_empty());
    }

    #[test]
    fn single_writer_per_dip() {
        let s = store(1);
        let w = s.writer(0, 0.05, 0.0, 1).unwrap();
        assert!(matches!(s.writer(0, 0.05, 0.0, 1), Err(StoreError::WriterClaimed(0))));
        drop(w);
        assert!(s.writer(0, 0.05, 0.0, 1).is_ok());
        assert!(matches!(s.writer(5, 0.05, 0.0, 1), Err(StoreError::NoSuchDip { .. })));
    }

    #[test]
    fn counters_are_window_scoped_gauge_is_not() {
        let s = store(1);
        s.set_active(0, true).unwrap();
        let mut w = s.writer(0, 0.05, 0.0, 1).unwrap();
        w.add(Counter::Syn, 4);
        w.set_gauge(3);
        w.publish(0.05);
        w.publish(0.10);
        let f = s.read_latest(0).unwrap();
        assert_eq!(f.counter(Counter::Syn), 0);
        assert_eq!(f.counter(Counter::FlowOngoing), 3);
    }

    #[test]
    fn samples_stay_in_window() {
        let s = store(1);
        s.set_active(0, true).unwrap();
        let mut w = s.writer(0, 0.05, 0.0, 1).unwrap();
        for i in 0..40 {
            let t = i as f64 * 0.004;
            if t >= w.window_start() + 0.05 {
                w.publish(w.window_start() + 0.05);
            }
            w.sample(Channel::Fct, i as f64, t);
            w.sample(Channel::PktIat, 1.0, t);
        }
        let f = s.read_latest(0).unwrap();
        assert!(f.checksum_ok());
        for ch in &f.channels {
            for &t in &ch.times {
                assert!(t >= f.window_start && t <= f.window_end, "{t} outside window");
            }
        }
    }

    #[test]
    fn fetcher_history_strictly_increasing() {
        let s = store(1);
        s.set_active(0, true).unwrap();
        let mut w = s.writer(0, 0.05, 0.0, 1).unwrap();
        let mut r = FeatureFetcher::new(Arc::clone(&s));
        w.publish(0.05);
        assert_eq!(r.fetch_latest(0.06).len(), 1);
        assert!(r.fetch_latest(0.07).is_empty());
        w.publish(0.10);
        w.publish(0.15);
        assert_eq!(r.fetch_latest(0.16)[&0].seq, 3);
        let seqs: Vec<u64> = r.history(0).unwrap().entries.iter().map(|e| e.1.seq).collect();
        assert_eq!(seqs, vec![1, 3]);
    }

    #[test]
    fn reactivated_dip_resumes() {
        let s = store(1);
        s.set_active(0, true).unwrap();
        let mut w = s.writer(0, 0.05, 0.0, 1).unwrap();
        let mut r = FeatureFetcher::new(Arc::clone(&s));
        w.publish(0.05);
        r.fetch_latest(0.05);
        s.set_active(0, false).unwrap();
        w.publish(0.10);
        assert!(r.fetch_latest(0.10).is_empty());
        s.set_active(0, true).unwrap();
        w.publish(0.15);
        assert_eq!(r.fetch_latest(0.15)[&0].seq, 3);
    }

    #[test]
    fn mapped_region_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shm_vip0");
        let cfg = StoreConfig { vip: 7, max_dips: 3, ring_len: 4, reservoir_capacity: 4 };
        let a = VipStore::create_mapped(&path, cfg).unwrap();
        let b = VipStore::open_mapped(&path).unwrap();
        assert_eq!(*b.config(), cfg);
        a.set_active(2, true).unwrap();
        let mut w = a.writer(2, 0.05, 0.0, 9).unwrap();
        w.add(Counter::Pkt, 11);
        w.sample(Channel::Fct, 0.3, 0.01);
        w.publish(0.05);
        let got = b.fetch_latest();
        let f = &got[&2];
        assert_eq!(f.counter(Counter::Pkt), 11);
        assert_eq!(f.channel(Channel::Fct).values, vec![0.3]);
        assert!(f.checksum_ok());

        std::fs::write(dir.path().join("junk"), vec![0u8; 4096]).unwrap();
        assert!(matches!(VipStore::open_mapped(dir.path().join("junk")), Err(StoreError::BadMagic(0))));
    }
}
