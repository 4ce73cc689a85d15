//! Partitioner layer: per-(VIP, DIP) feature frames published through a
//! lock-free multi-buffered region, plus the reader that mirrors them into
//! per-DIP histories.

mod frame;
mod reservoir;
mod store;

pub use frame::{channel_words, frame_words, offsets, ChannelSample, Checksum, FeatureFrame};
pub use reservoir::{ReservoirSampler, DEFAULT_RESERVOIR_CAPACITY};
pub use store::{
    DipHistory, FeatureFetcher, FrameWriter, StoreConfig, StoreError, VipStore, DEFAULT_MAX_DIPS, DEFAULT_RING_LEN,
    HEADER_WORDS, LAYOUT_VERSION, REGION_MAGIC,
};
