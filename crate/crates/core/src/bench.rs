//! Conversion timing shared by the CLI and the acceptance suite.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::events::{Event, EventStream};
use crate::frame::{convert, Colormap, WindowingConfig};
use crate::{Error, Result};

/// `events` uniformly placed events over 100 ms with random polarity.
pub fn uniform_stream(events: usize, width: u16, height: u16, seed: u64) -> Result<EventStream> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("sensor must be at least 1x1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut list: Vec<Event> = (0..events)
        .map(|_| {
            Event::new(
                rng.random_range(0..width),
                rng.random_range(0..height),
                rng.random_range(0..100_000),
                if rng.random_bool(0.5) { 1 } else { -1 },
            )
        })
        .collect();
    list.sort_by_key(|e| e.t);
    EventStream::new(width, height, list)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub events: usize,
    pub frames: usize,
    pub runs: Vec<Duration>,
}

impl BenchReport {
    pub fn median(&self) -> Duration {
        let mut v = self.runs.clone();
        v.sort();
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2
        }
    }

    /// Nearest-rank percentile, `q` in (0, 1].
    pub fn percentile(&self, q: f64) -> Duration {
        let mut v = self.runs.clone();
        v.sort();
        let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
        v[rank - 1]
    }

    pub fn min(&self) -> Duration {
        self.runs.iter().copied().min().unwrap_or_default()
    }
}

/// Time `repeats` single-threaded conversions of `stream` after one
/// untimed warm-up run.
pub fn time_convert(stream: &EventStream, cfg: &WindowingConfig, map: Colormap, repeats: usize) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("need at least one timed run".into()));
    }
    let frames = std::hint::black_box(convert(stream, cfg, map)).len();
    let runs = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(convert(std::hint::black_box(stream), cfg, map));
            t.elapsed()
        })
        .collect();
    Ok(BenchReport {
        events: stream.len(),
        frames,
        runs,
    })
}
