use rand::Rng;

pub const DEFAULT_RESERVOIR_CAPACITY: usize = 128;

/// Uniform fixed-capacity sample over one time window (Algorithm R).
///
/// Inserting a value timestamped at or past the end of the current window
/// starts a new window aligned to the window length, discarding the old
/// sample.
#[derive(Debug, Clone)]
pub struct ReservoirSampler {
    capacity: usize,
    values: Vec<f64>,
    times: Vec<f64>,
    seen: u64,
    window: f64,
    window_start: f64,
}

impl ReservoirSampler {
    pub fn new(capacity: usize, window: f64, window_start: f64) -> Self {
        assert!(capacity > 0, "reservoir capacity must be positive");
        assert!(window > 0.0, "reservoir window must be positive");
        ReservoirSampler {
            capacity,
            values: Vec::with_capacity(capacity),
            times: Vec::with_capacity(capacity),
            seen: 0,
            window,
            window_start,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn window_start(&self) -> f64 {
        self.window_start
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn insert<R: Rng + ?Sized>(&mut self, value: f64, now: f64, rng: &mut R) {
        if now >= self.window_start + self.window {
            let windows = ((now - self.window_start) / self.window).floor();
            self.reset(self.window_start + windows * self.window);
        }
        self.seen += 1;
        if self.values.len() < self.capacity {
            self.values.push(value);
            self.times.push(now);
        } else {
            let j = rng.random_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.values[j as usize] = value;
                self.times[j as usize] = now;
            }
        }
    }

    /// Starts a new, empty window at `window_start`.
    pub fn reset(&mut self, window_start: f64) {
        self.values.clear();
        self.times.clear();
        self.seen = 0;
        self.window_start = window_start;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn keeps_everything_below_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ReservoirSampler::new(128, 0.05, 0.0);
        for i in 0..5 {
            s.insert(i as f64, 0.01, &mut rng);
        }
        assert_eq!(s.values(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn never_exceeds_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ReservoirSampler::new(16, 1.0, 0.0);
        for i in 0..10_000 {
            s.insert(i as f64, 0.5, &mut rng);
        }
        assert_eq!(s.len(), 16);
        assert_eq!(s.seen(), 10_000);
    }

    #[test]
    fn rollover_clears_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ReservoirSampler::new(4, 0.05, 0.0);
        for _ in 0..10 {
            s.insert(1.0, 0.01, &mut rng);
        }
        s.reset(0.05);
        assert_eq!((s.seen(), s.len()), (0, 0));
        s.insert(2.0, 0.17, &mut rng);
        assert!((s.window_start() - 0.15).abs() < 1e-12);
        assert_eq!(s.values(), &[2.0]);
    }
}
