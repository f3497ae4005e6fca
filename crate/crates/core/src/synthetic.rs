//! Deterministic synthetic event datasets.
//!
//! Class `c` of `K` is a bar through the sensor centre at angle `c * pi / K`.
//! Each sample shows a segment of that bar (a quarter to a half of its
//! length) sweeping along it through the centre over 100 ms, so every time
//! window sees a different part of the bar. A `noise_fraction` share of the
//! events is replaced by uniform noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::events::{Event, EventStream};
use crate::{Error, Result};

/// Perpendicular half-width of the bar, in pixels, before rasterisation.
const BAR_HALF_WIDTH: f64 = 1.25;
const DURATION_US: u64 = 100_000;
/// Segment half-length range, as a fraction of the bar half-length.
const SEG_LO: f64 = 0.25;
const SEG_HI: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub width: u16,
    pub height: u16,
    pub events_per_sample: usize,
    pub noise_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 10,
            width: 64,
            height: 64,
            events_per_sample: 2000,
            noise_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.events_per_sample == 0 {
            return Err(Error::InvalidArgument("events_per_sample must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(Error::InvalidArgument(format!(
                "noise_fraction {} outside [0, 1]",
                self.noise_fraction
            )));
        }
        if self.width < 4 || self.height < 4 {
            return Err(Error::InvalidArgument(format!(
                "sensor {}x{} too small for a bar",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Bar geometry shared by samples and prototypes.
#[derive(Debug, Clone, Copy)]
struct Bar {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    half_len: f64,
}

impl Bar {
    fn new(class: usize, num_classes: usize, width: u16, height: u16) -> Self {
        let angle = class as f64 * std::f64::consts::PI / num_classes as f64;
        Self {
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            cos: angle.cos(),
            sin: angle.sin(),
            half_len: width.min(height) as f64 / 2.0 - 1.0,
        }
    }

    fn point(&self, along: f64, perp: f64) -> (f64, f64) {
        (
            self.cx + along * self.cos - perp * self.sin,
            self.cy + along * self.sin + perp * self.cos,
        )
    }

    fn coords(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (dx * self.cos + dy * self.sin, -dx * self.sin + dy * self.cos)
    }
}

fn to_pixel(v: f64, size: u16) -> u16 {
    v.round().clamp(0.0, size as f64 - 1.0) as u16
}

/// Generates `num_classes * samples_per_class` labelled streams, class-major.
/// Ids are `syn-<class>-<index>`.
pub fn gen_synthetic(spec: &SyntheticDatasetSpec) -> Result<Vec<EventStream>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for class in 0..spec.num_classes {
        for index in 0..spec.samples_per_class {
            let events = sample_events(spec, class, &mut rng);
            let stream = EventStream::new(spec.width, spec.height, events)?
                .with_label(Some(class))
                .with_id(format!("syn-{class}-{index}"));
            out.push(stream);
        }
    }
    Ok(out)
}

fn sample_events(spec: &SyntheticDatasetSpec, class: usize, rng: &mut ChaCha8Rng) -> Vec<Event> {
    let (w, h) = (spec.width, spec.height);
    let bar = Bar::new(class, spec.num_classes, w, h);
    let n = spec.events_per_sample;
    let n_noise = ((spec.noise_fraction * n as f64).round() as usize).min(n);
    let n_signal = n - n_noise;

    let seg_half = bar.half_len * rng.random_range(SEG_LO..SEG_HI);
    let reach = bar.half_len - seg_half;
    // The sweep always crosses the centre, from one half of the bar into
    // the other.
    let direction = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let start = -direction * rng.random_range(0.0..=reach);
    let end = direction * rng.random_range(0.0..=reach);

    let mut events = Vec::with_capacity(n);
    for _ in 0..n_signal {
        let t = rng.random_range(0..DURATION_US);
        let centre = start + (end - start) * t as f64 / DURATION_US as f64;
        let offset = rng.random_range(-seg_half..=seg_half);
        let perp = rng.random_range(-BAR_HALF_WIDTH..=BAR_HALF_WIDTH);
        let (x, y) = bar.point(centre + offset, perp);
        let p = if offset * direction >= 0.0 { 1 } else { -1 };
        events.push(Event::new(to_pixel(x, w), to_pixel(y, h), t, p));
    }
    for _ in 0..n_noise {
        let x = rng.random_range(0..w);
        let y = rng.random_range(0..h);
        let t = rng.random_range(0..DURATION_US);
        let p = if rng.random_bool(0.5) { 1 } else { -1 };
        events.push(Event::new(x, y, t, p));
    }
    events.sort_by_key(|e| e.t);
    events
}

/// The canonical noise-free rendering of a class: one positive event on every
/// pixel of the full bar.
pub fn prototype_stream(class: usize, num_classes: usize, width: u16, height: u16) -> Result<EventStream> {
    if class >= num_classes {
        return Err(Error::LabelOutOfRange {
            label: class,
            num_classes,
        });
    }
    let bar = Bar::new(class, num_classes, width, height);
    let mut events = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let (along, perp) = bar.coords(x as f64, y as f64);
            if along.abs() <= bar.half_len + 0.5 && perp.abs() <= BAR_HALF_WIDTH + 0.5 {
                events.push(Event::new(x, y, 0, 1));
            }
        }
    }
    Ok(EventStream::new(width, height, events)?.with_label(Some(class)))
}
