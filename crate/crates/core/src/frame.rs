//! Event-to-frame conversion.
//!
//! A stream is cut into windows of `N` consecutive events, each window is
//! counted into a 2-channel (positive/negative) histogram, normalised by the
//! joint maximum of both channels and colourised into an 8-bit RGB frame
//! whose empty pixels are pure white.

use std::io::Write;

use crate::events::{Event, EventStream};
use crate::{Error, Result};

/// Sentinel colour for pixels that saw no event.
pub const EMPTY_PIXEL: [u8; 3] = [255, 255, 255];

const FRM1_MAGIC: &[u8; 4] = b"FRM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RemainderPolicy {
    /// Trailing events always join the last full window.
    MergeIntoLast,
    /// A remainder of at least `ceil(N / 2)` events forms its own window.
    #[default]
    OwnWindowIfGeHalf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowingConfig {
    pub events_per_window: usize,
    pub remainder: RemainderPolicy,
}

impl WindowingConfig {
    pub fn new(events_per_window: usize) -> Result<Self> {
        if events_per_window == 0 {
            return Err(Error::InvalidArgument("events per window must be >= 1".into()));
        }
        Ok(Self {
            events_per_window,
            remainder: RemainderPolicy::default(),
        })
    }

    pub fn with_remainder(mut self, remainder: RemainderPolicy) -> Self {
        self.remainder = remainder;
        self
    }

    /// Defaults used for the common sensor resolutions: 20,000 events for
    /// 180x240 sensors, 10,000 for 120x100 and 70,000 for 640x480.
    pub fn for_sensor(width: u16, height: u16) -> Self {
        let n = match (width.max(height), width.min(height)) {
            (w, _) if w >= 640 => 70_000,
            (w, _) if w <= 128 => 10_000,
            _ => 20_000,
        };
        Self::new(n).unwrap()
    }
}

impl Default for WindowingConfig {
    fn default() -> Self {
        Self::new(20_000).unwrap()
    }
}

/// Index ranges of the windows `window_events` would produce for `len` events.
pub fn window_ranges(len: usize, cfg: &WindowingConfig) -> Vec<std::ops::Range<usize>> {
    let n = cfg.events_per_window;
    if len == 0 {
        return Vec::new();
    }
    if len < n {
        return std::iter::once(0..len).collect();
    }
    let full = len / n;
    let rem = len % n;
    let mut ranges: Vec<_> = (0..full).map(|i| i * n..(i + 1) * n).collect();
    if rem > 0 {
        let own = match cfg.remainder {
            RemainderPolicy::MergeIntoLast => false,
            RemainderPolicy::OwnWindowIfGeHalf => rem >= n.div_ceil(2),
        };
        if own {
            ranges.push(full * n..len);
        } else {
            ranges.last_mut().unwrap().end = len;
        }
    }
    ranges
}

pub fn window_events<'a>(stream: &'a EventStream, cfg: &WindowingConfig) -> Vec<&'a [Event]> {
    window_ranges(stream.len(), cfg)
        .into_iter()
        .map(|r| &stream.events()[r])
        .collect()
}

/// Per-pixel positive and negative event counts, row-major (`y * width + x`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram2 {
    width: usize,
    height: usize,
    pos: Vec<u32>,
    neg: Vec<u32>,
}

impl Histogram2 {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pos: vec![0; width * height],
            neg: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pos(&self) -> &[u32] {
        &self.pos
    }

    pub fn neg(&self) -> &[u32] {
        &self.neg
    }

    pub fn pos_at(&self, x: usize, y: usize) -> u32 {
        self.pos[y * self.width + x]
    }

    pub fn neg_at(&self, x: usize, y: usize) -> u32 {
        self.neg[y * self.width + x]
    }

    pub fn total(&self) -> u64 {
        self.pos.iter().chain(&self.neg).map(|&c| c as u64).sum()
    }

    pub fn max_count(&self) -> u32 {
        self.pos.iter().chain(&self.neg).copied().max().unwrap_or(0)
    }

    /// Mirrors both channels left to right.
    pub fn mirrored(&self) -> Self {
        let mut out = Self::zeros(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = y * self.width + x;
                let dst = y * self.width + (self.width - 1 - x);
                out.pos[dst] = self.pos[src];
                out.neg[dst] = self.neg[src];
            }
        }
        out
    }
}

/// Counts a window. Events must lie inside `width x height`.
pub fn build_histogram(window: &[Event], width: usize, height: usize) -> Histogram2 {
    let mut h = Histogram2::zeros(width, height);
    for e in window {
        let i = e.y as usize * width + e.x as usize;
        if e.p > 0 {
            h.pos[i] += 1;
        } else {
            h.neg[i] += 1;
        }
    }
    h
}

/// Both channels scaled into `[0, 1]` by their joint maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedHistogram {
    pub width: usize,
    pub height: usize,
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

impl NormalizedHistogram {
    /// Per-pixel `pos + neg`, the intensity the synthetic encoder sees.
    pub fn intensity(&self) -> Vec<f64> {
        self.pos.iter().zip(&self.neg).map(|(p, n)| p + n).collect()
    }
}

pub fn normalize(hist: &Histogram2) -> NormalizedHistogram {
    let m = hist.max_count();
    let scale = |c: &[u32]| -> Vec<f64> {
        if m == 0 {
            vec![0.0; c.len()]
        } else {
            let m = m as f64;
            c.iter().map(|&v| v as f64 / m).collect()
        }
    };
    NormalizedHistogram {
        width: hist.width,
        height: hist.height,
        pos: scale(&hist.pos),
        neg: scale(&hist.neg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Colormap {
    /// Both polarities weighted by (127, 127, 127) and summed.
    #[default]
    Gray,
    /// Positive events red (255, 0, 0), negative events blue (0, 0, 255).
    RedBlue,
}

impl std::str::FromStr for Colormap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" | "grey" => Ok(Colormap::Gray),
            "red_blue" | "red-blue" | "rb" => Ok(Colormap::RedBlue),
            other => Err(Error::InvalidArgument(format!("unknown colormap {other:?}"))),
        }
    }
}

impl std::fmt::Display for Colormap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Colormap::Gray => "gray",
            Colormap::RedBlue => "red_blue",
        })
    }
}

/// Round half up, saturating into a byte.
fn round_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Colour of one pixel given its normalised channel values.
pub fn colorize_pixel(pn: f64, nn: f64, map: Colormap) -> [u8; 3] {
    if pn == 0.0 && nn == 0.0 {
        return EMPTY_PIXEL;
    }
    match map {
        Colormap::Gray => {
            // Capped below 255 so an occupied pixel never reads as empty.
            let v = round_u8(127.0 * pn + 127.0 * nn).min(254);
            [v, v, v]
        }
        Colormap::RedBlue => [round_u8(255.0 * pn), 0, round_u8(255.0 * nn)],
    }
}

/// 8-bit RGB image, row-major `H x W x 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let data = color.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn write_png<W: Write>(&self, sink: W) -> Result<()> {
        let mut enc = png::Encoder::new(sink, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        w.write_image_data(&self.data).map_err(|e| Error::Png(e.to_string()))?;
        w.finish().map_err(|e| Error::Png(e.to_string()))
    }
}

pub fn colorize(norm: &NormalizedHistogram, map: Colormap) -> RgbImage {
    let mut data = Vec::with_capacity(norm.pos.len() * 3);
    for (&pn, &nn) in norm.pos.iter().zip(&norm.neg) {
        data.extend_from_slice(&colorize_pixel(pn, nn, map));
    }
    RgbImage {
        width: norm.width,
        height: norm.height,
        data,
    }
}

/// Bilinear resize (half-pixel centres) so the shorter side equals `side`,
/// then a central `side x side` crop.
pub fn resize_center_crop(img: &RgbImage, side: usize) -> Result<RgbImage> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize a {}x{} image",
            img.width, img.height
        )));
    }
    if side == 0 {
        return Err(Error::InvalidArgument("crop side must be >= 1".into()));
    }
    let short = img.width.min(img.height) as f64;
    let scale = side as f64 / short;
    let rw = ((img.width as f64 * scale).round() as usize).max(side);
    let rh = ((img.height as f64 * scale).round() as usize).max(side);
    let x0 = (rw - side) / 2;
    let y0 = (rh - side) / 2;
    let sx = img.width as f64 / rw as f64;
    let sy = img.height as f64 / rh as f64;

    let sample_axis = |dst: usize, s: f64, len: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * s - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };

    let mut data = Vec::with_capacity(side * side * 3);
    for y in y0..y0 + side {
        let (ya, yb, fy) = sample_axis(y, sy, img.height);
        for x in x0..x0 + side {
            let (xa, xb, fx) = sample_axis(x, sx, img.width);
            for c in 0..3 {
                let at = |xx: usize, yy: usize| img.data[(yy * img.width + xx) * 3 + c] as f64;
                let top = at(xa, ya) + (at(xb, ya) - at(xa, ya)) * fx;
                let bottom = at(xa, yb) + (at(xb, yb) - at(xa, yb)) * fx;
                data.push(round_u8(top + (bottom - top) * fy));
            }
        }
    }
    Ok(RgbImage {
        width: side,
        height: side,
        data,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventFrame {
    pub histogram: Histogram2,
    pub normalized: NormalizedHistogram,
    pub rgb: RgbImage,
    pub colormap: Colormap,
}

impl EventFrame {
    pub fn from_window(window: &[Event], width: usize, height: usize, map: Colormap) -> Self {
        let histogram = build_histogram(window, width, height);
        let normalized = normalize(&histogram);
        let rgb = colorize(&normalized, map);
        Self {
            histogram,
            normalized,
            rgb,
            colormap: map,
        }
    }
}

/// Full conversion: window, count, normalise and colourise every window.
pub fn convert(stream: &EventStream, cfg: &WindowingConfig, map: Colormap) -> Vec<EventFrame> {
    let (w, h) = (stream.width() as usize, stream.height() as usize);
    window_events(stream, cfg)
        .into_iter()
        .map(|win| EventFrame::from_window(win, w, h, map))
        .collect()
}

/// Same output as [`convert`], with windows spread over up to `threads`
/// scoped threads.
pub fn convert_parallel(stream: &EventStream, cfg: &WindowingConfig, map: Colormap, threads: usize) -> Vec<EventFrame> {
    let windows = window_events(stream, cfg);
    let threads = threads.max(1).min(windows.len().max(1));
    if threads <= 1 {
        return convert(stream, cfg, map);
    }
    let (w, h) = (stream.width() as usize, stream.height() as usize);
    let chunk = windows.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = windows
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|win| EventFrame::from_window(win, w, h, map))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("conversion thread panicked"))
            .collect()
    })
}

/// FRM1: magic, `u16` frame count, `u16` height, `u16` width, then the frames'
/// RGB bytes back to back.
pub fn write_frm1(frames: &[RgbImage]) -> Result<Vec<u8>> {
    let m = u16::try_from(frames.len())
        .map_err(|_| Error::InvalidArgument(format!("{} frames exceed FRM1's u16", frames.len())))?;
    let (w, h) = frames.first().map_or((0, 0), |f| (f.width, f.height));
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(Error::DimensionMismatch("FRM1 frames must share one size".into()));
    }
    let dim = |v: usize| u16::try_from(v).map_err(|_| Error::InvalidArgument(format!("frame side {v} exceeds u16")));
    let mut out = Vec::with_capacity(10 + frames.len() * w * h * 3);
    out.extend_from_slice(FRM1_MAGIC);
    out.extend_from_slice(&m.to_le_bytes());
    out.extend_from_slice(&dim(h)?.to_le_bytes());
    out.extend_from_slice(&dim(w)?.to_le_bytes());
    for f in frames {
        out.extend_from_slice(&f.data);
    }
    Ok(out)
}

pub fn read_frm1(bytes: &[u8]) -> Result<Vec<RgbImage>> {
    let mut r = crate::bytes::Reader::new(bytes, "FRM1");
    r.magic(FRM1_MAGIC)?;
    let m = r.u16()? as usize;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let frames = (0..m)
        .map(|_| RgbImage::new(w, h, r.take(w * h * 3)?.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(x: u16, y: u16, p: i8) -> Event {
        Event::new(x, y, 0, p)
    }

    fn sizes(len: usize, n: usize) -> Vec<usize> {
        window_ranges(len, &WindowingConfig::new(n).unwrap())
            .iter()
            .map(|r| r.len())
            .collect()
    }

    #[test]
    fn windowing_remainder_rule() {
        assert_eq!(sizes(25_000, 20_000), [25_000]);
        assert_eq!(sizes(35_000, 20_000), [20_000, 15_000]);
        assert_eq!(sizes(40_000, 20_000), [20_000, 20_000]);
        assert_eq!(sizes(30_000, 20_000), [20_000, 10_000]);
        assert_eq!(sizes(29_999, 20_000), [29_999]);
        assert_eq!(sizes(7, 20_000), [7]);
        assert!(sizes(0, 5).is_empty());
        // ceil(5 / 2) = 3
        assert_eq!(sizes(13, 5), [5, 5, 3]);
        assert_eq!(sizes(12, 5), [5, 7]);
        assert_eq!(sizes(8, 5), [5, 3]);
        let merge = WindowingConfig::new(20_000)
            .unwrap()
            .with_remainder(RemainderPolicy::MergeIntoLast);
        let lens: Vec<_> = window_ranges(35_000, &merge).iter().map(|r| r.len()).collect();
        assert_eq!(lens, [35_000]);
        assert!(WindowingConfig::new(0).is_err());
    }

    #[test]
    fn sensor_defaults() {
        assert_eq!(WindowingConfig::for_sensor(240, 180).events_per_window, 20_000);
        assert_eq!(WindowingConfig::for_sensor(120, 100).events_per_window, 10_000);
        assert_eq!(WindowingConfig::for_sensor(640, 480).events_per_window, 70_000);
    }

    #[test]
    fn histogram_small_case() {
        let h = build_histogram(&[ev(1, 0, 1), ev(1, 0, 1), ev(0, 1, -1)], 2, 2);
        assert_eq!(h.pos(), &[0, 2, 0, 0]);
        assert_eq!(h.neg(), &[0, 0, 1, 0]);
        assert_eq!(h.total(), 3);
        assert_eq!(build_histogram(&[], 2, 2), Histogram2::zeros(2, 2));
    }

    #[test]
    fn joint_max_normalisation() {
        let h = build_histogram(&[ev(1, 0, 1), ev(1, 0, 1), ev(0, 1, -1)], 2, 2);
        let n = normalize(&h);
        assert_eq!(n.pos[1], 1.0);
        assert_eq!(n.neg[2], 0.5);
        let z = normalize(&Histogram2::zeros(3, 2));
        assert!(z.pos.iter().chain(&z.neg).all(|&v| v == 0.0));
    }

    #[test]
    fn colour_rules() {
        assert_eq!(colorize_pixel(1.0, 0.0, Colormap::Gray), [127, 127, 127]);
        assert_eq!(colorize_pixel(0.0, 0.0, Colormap::Gray), [255, 255, 255]);
        assert_eq!(colorize_pixel(1.0, 1.0, Colormap::Gray), [254, 254, 254]);
        assert_eq!(colorize_pixel(1.0, 0.5, Colormap::RedBlue), [255, 0, 128]);
        assert_eq!(colorize_pixel(0.0, 0.0, Colormap::RedBlue), EMPTY_PIXEL);
        // A single count among thousands still renders as occupied.
        assert_eq!(colorize_pixel(1e-4, 0.0, Colormap::Gray), [0, 0, 0]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let data: Vec<u8> = (0..5 * 5 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = RgbImage::new(5, 5, data).unwrap();
        assert_eq!(resize_center_crop(&img, 5).unwrap(), img);

        let solid = RgbImage::filled(448, 448, [12, 200, 77]);
        assert_eq!(
            resize_center_crop(&solid, 224).unwrap(),
            RgbImage::filled(224, 224, [12, 200, 77])
        );
    }

    #[test]
    fn resize_crops_the_centre_columns() {
        // Column index encoded in the red channel.
        let mut data = Vec::new();
        for _y in 0..224 {
            for x in 0..448u32 {
                data.extend_from_slice(&[(x % 256) as u8, (x / 256) as u8, 0]);
            }
        }
        let img = RgbImage::new(448, 224, data).unwrap();
        let out = resize_center_crop(&img, 224).unwrap();
        assert_eq!((out.width, out.height), (224, 224));
        for (col, x) in (112..336u32).enumerate() {
            assert_eq!(out.pixel(col, 100), [(x % 256) as u8, (x / 256) as u8, 0]);
        }
    }

    #[test]
    fn resize_errors() {
        let empty = RgbImage::new(0, 4, vec![]).unwrap();
        assert!(resize_center_crop(&empty, 4).is_err());
        assert!(resize_center_crop(&RgbImage::filled(2, 2, [0; 3]), 0).is_err());
    }

    #[test]
    fn frm1_round_trip() {
        let frames = vec![RgbImage::filled(3, 2, [1, 2, 3]), RgbImage::filled(3, 2, [9, 8, 7])];
        let bytes = write_frm1(&frames).unwrap();
        assert_eq!(&bytes[..4], b"FRM1");
        assert_eq!(&bytes[4..10], &[2, 0, 2, 0, 3, 0]);
        assert_eq!(bytes.len(), 10 + 2 * 18);
        assert_eq!(read_frm1(&bytes).unwrap(), frames);
        assert!(read_frm1(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn png_is_written() {
        let mut buf = Vec::new();
        RgbImage::filled(4, 3, [255, 0, 0]).write_png(&mut buf).unwrap();
        assert_eq!(&buf[1..4], b"PNG");
    }
}
