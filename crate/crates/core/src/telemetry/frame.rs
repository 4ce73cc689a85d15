use crate::parser::{Channel, Counter, N_CHANNELS, N_COUNTERS};
use serde::{Deserialize, Serialize};

/// Word offsets inside one frame buffer. Every word is a little-endian u64;
/// times are `f64` bit patterns.
pub mod offsets {
    pub const SEQ: usize = 0;
    pub const CHECKSUM: usize = 1;
    pub const WINDOW_START: usize = 2;
    pub const WINDOW_END: usize = 3;
    pub const COUNTERS: usize = 4;
    pub const CHANNELS: usize = COUNTERS + super::N_COUNTERS;
}

/// Words occupied by one frame buffer for a given reservoir capacity: the
/// fixed header, then per channel a length word followed by `capacity`
/// values and `capacity` timestamps.
pub const fn frame_words(capacity: usize) -> usize {
    offsets::CHANNELS + N_CHANNELS * channel_words(capacity)
}

pub const fn channel_words(capacity: usize) -> usize {
    1 + 2 * capacity
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelSample {
    pub values: Vec<f64>,
    pub times: Vec<f64>,
}

/// One published (VIP, DIP, window) snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub seq: u64,
    pub checksum: u64,
    pub window_start: f64,
    pub window_end: f64,
    pub counters: [u64; N_COUNTERS],
    pub channels: Vec<ChannelSample>,
}

impl Default for FeatureFrame {
    fn default() -> Self {
        FeatureFrame {
            seq: 0,
            checksum: 0,
            window_start: 0.0,
            window_end: 0.0,
            counters: [0; N_COUNTERS],
            channels: vec![ChannelSample::default(); N_CHANNELS],
        }
    }
}

impl FeatureFrame {
    pub fn counter(&self, c: Counter) -> u64 {
        self.counters[c.index()]
    }

    pub fn channel(&self, c: Channel) -> &ChannelSample {
        &self.channels[c.index()]
    }

    /// Checksum over everything except `seq` and the checksum itself, in
    /// buffer word order.
    pub fn compute_checksum(&self) -> u64 {
        let mut h = Checksum::new();
        h.push(self.window_start.to_bits());
        h.push(self.window_end.to_bits());
        for &c in &self.counters {
            h.push(c);
        }
        for ch in &self.channels {
            h.push(ch.values.len() as u64);
            for v in &ch.values {
                h.push(v.to_bits());
            }
            for t in &ch.times {
                h.push(t.to_bits());
            }
        }
        h.finish()
    }

    pub fn checksum_ok(&self) -> bool {
        self.compute_checksum() == self.checksum
    }
}

/// Word-wise 64-bit mixing checksum (multiply-rotate, murmur finalizer).
#[derive(Debug, Clone, Copy)]
pub struct Checksum(u64);

impl Checksum {
    pub fn new() -> Self {
        Checksum(0x243f_6a88_85a3_08d3)
    }

    #[inline]
    pub fn push(&mut self, word: u64) {
        self.0 = (self.0 ^ word).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(29);
    }

    pub fn finish(self) -> u64 {
        crate::policies::fmix64(self.0)
    }
}

impl Default for Checksum {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_size() {
        assert_eq!(frame_words(128), 12 + 13 * 257);
    }

    #[test]
    fn checksum_detects_changes() {
        let mut f = FeatureFrame::default();
        f.channels[2].values.push(1.5);
        f.channels[2].times.push(0.01);
        f.checksum = f.compute_checksum();
        assert!(f.checksum_ok());
        f.channels[2].values[0] = 1.6;
        assert!(!f.checksum_ok());
    }
}
