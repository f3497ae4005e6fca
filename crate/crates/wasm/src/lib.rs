//! Browser demo: render event windows as frames, classify a stream zero-shot
//! with the synthetic encoder and run the four-view consistency check.
//!
//! [`DemoState`] holds the logic and is usable natively; [`Demo`] is the thin
//! wasm-bindgen wrapper the page talks to.

use evadapt_core::embed::SyntheticEncoder;
use evadapt_core::events::{parse_stream, EventStream, StreamFormat};
use evadapt_core::frame::{convert, Colormap, EventFrame, WindowingConfig};
use evadapt_core::linalg::Matrix;
use evadapt_core::pseudo::{judge, Augmentation, ViewPredictions};
use evadapt_core::synthetic::{gen_synthetic, SyntheticDatasetSpec};
use evadapt_core::zeroshot::predict_features;
use evadapt_core::{Error, Result};
use wasm_bindgen::prelude::*;

pub const SENSOR: u16 = 64;
pub const EVENTS_PER_SAMPLE: usize = 2000;
pub const LOGIT_SCALE: f64 = 100.0;

/// One augmented view's prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewResult {
    pub augmentation: &'static str,
    pub class: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct DemoState {
    classes: usize,
    encoder: SyntheticEncoder,
    /// Text embeddings for the current sensor size.
    text: Matrix,
    stream: EventStream,
    windowing: WindowingConfig,
    colormap: Colormap,
    frames: Vec<EventFrame>,
}

impl DemoState {
    pub fn new(classes: usize, dim: usize, encoder_seed: u64) -> Result<Self> {
        let encoder = SyntheticEncoder::new(dim, encoder_seed)?;
        let stream = synthetic_sample(classes, 0, 0.0, 0)?;
        let mut state = Self {
            classes,
            text: Matrix::zeros(0, dim),
            encoder,
            stream,
            windowing: WindowingConfig::new(500)?,
            colormap: Colormap::Gray,
            frames: Vec::new(),
        };
        state.refresh()?;
        Ok(state)
    }

    fn refresh(&mut self) -> Result<()> {
        let (w, h) = (self.stream.width(), self.stream.height());
        let names: Vec<String> = (0..self.classes).map(|c| format!("class{c:02}")).collect();
        self.text = self
            .encoder
            .text_embeddings(&names, w, h, LOGIT_SCALE as f32)?
            .to_matrix();
        self.frames = convert(&self.stream, &self.windowing, self.colormap);
        Ok(())
    }

    pub fn set_stream(&mut self, stream: EventStream) -> Result<()> {
        if stream.is_empty() {
            return Err(Error::Empty("stream has no events".into()));
        }
        self.stream = stream;
        self.refresh()
    }

    pub fn generate(&mut self, class: usize, noise: f64, seed: u64) -> Result<()> {
        self.set_stream(synthetic_sample(self.classes, class, noise, seed)?)
    }

    pub fn load_csv(&mut self, text: &str) -> Result<()> {
        self.set_stream(parse_stream(text.as_bytes(), StreamFormat::Csv)?)
    }

    pub fn set_windowing(&mut self, events_per_window: usize, colormap: Colormap) -> Result<()> {
        self.windowing = WindowingConfig::new(events_per_window)?;
        self.colormap = colormap;
        self.frames = convert(&self.stream, &self.windowing, self.colormap);
        Ok(())
    }

    pub fn stream(&self) -> &EventStream {
        &self.stream
    }

    pub fn frames(&self) -> &[EventFrame] {
        &self.frames
    }

    /// Frame `i` as RGBA bytes for a canvas `ImageData`.
    pub fn frame_rgba(&self, i: usize) -> Option<Vec<u8>> {
        let rgb = &self.frames.get(i)?.rgb;
        let (w, h) = (self.stream.width() as usize, self.stream.height() as usize);
        let mut out = Vec::with_capacity(w * h * 4);
        for y in 0..h {
            for x in 0..w {
                out.extend_from_slice(&rgb.pixel(x, y));
                out.push(255);
            }
        }
        Some(out)
    }

    fn features(&self, stream: &EventStream) -> Matrix {
        self.encoder.encode_stream(stream, &self.windowing, self.colormap)
    }

    /// Pooled zero-shot class probabilities of the current stream.
    pub fn classify(&self) -> Result<Vec<f64>> {
        Ok(predict_features(&self.features(&self.stream), &self.text, LOGIT_SCALE)?
            .1
            .into_vec())
    }

    /// Predictions under every augmentation and whether the sample would be
    /// accepted as a pseudo-label at `threshold`.
    pub fn augmentation_check(&self, threshold: f64) -> Result<(Vec<ViewResult>, bool)> {
        let mut views: ViewPredictions = [(0, 0.0); 4];
        let mut out = Vec::with_capacity(4);
        for (v, aug) in views.iter_mut().zip(Augmentation::ALL) {
            let (class, probs) = predict_features(&self.features(&aug.apply(&self.stream)), &self.text, LOGIT_SCALE)?;
            *v = (class, probs.max());
            out.push(ViewResult {
                augmentation: aug.name(),
                class,
                confidence: probs.max(),
            });
        }
        Ok((out, judge(&views, threshold).is_accepted()))
    }
}

/// One sample of `class` from the synthetic generator on a 64x64 sensor.
pub fn synthetic_sample(classes: usize, class: usize, noise: f64, seed: u64) -> Result<EventStream> {
    if class >= classes {
        return Err(Error::LabelOutOfRange {
            label: class,
            num_classes: classes,
        });
    }
    let spec = SyntheticDatasetSpec {
        num_classes: classes,
        samples_per_class: 1,
        width: SENSOR,
        height: SENSOR,
        events_per_sample: EVENTS_PER_SAMPLE,
        noise_fraction: noise,
        seed,
    };
    Ok(gen_synthetic(&spec)?.swap_remove(class))
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo(DemoState);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(classes: usize, dim: usize, encoder_seed: u64) -> std::result::Result<Demo, JsError> {
        DemoState::new(classes, dim, encoder_seed).map(Demo).map_err(js)
    }

    pub fn generate(&mut self, class: usize, noise: f64, seed: u64) -> std::result::Result<(), JsError> {
        self.0.generate(class, noise, seed).map_err(js)
    }

    #[wasm_bindgen(js_name = loadCsv)]
    pub fn load_csv(&mut self, text: &str) -> std::result::Result<(), JsError> {
        self.0.load_csv(text).map_err(js)
    }

    /// `colormap` is "gray" or "red_blue".
    #[wasm_bindgen(js_name = setWindowing)]
    pub fn set_windowing(&mut self, events_per_window: usize, colormap: &str) -> std::result::Result<(), JsError> {
        let map = colormap.parse().map_err(js)?;
        self.0.set_windowing(events_per_window, map).map_err(js)
    }

    pub fn width(&self) -> u16 {
        self.0.stream().width()
    }

    pub fn height(&self) -> u16 {
        self.0.stream().height()
    }

    #[wasm_bindgen(js_name = eventCount)]
    pub fn event_count(&self) -> usize {
        self.0.stream().len()
    }

    #[wasm_bindgen(js_name = frameCount)]
    pub fn frame_count(&self) -> usize {
        self.0.frames().len()
    }

    /// RGBA bytes of frame `i`; empty when out of range.
    #[wasm_bindgen(js_name = frameRgba)]
    pub fn frame_rgba(&self, i: usize) -> Vec<u8> {
        self.0.frame_rgba(i).unwrap_or_default()
    }

    pub fn classify(&self) -> std::result::Result<Vec<f64>, JsError> {
        self.0.classify().map_err(js)
    }

    /// Flat `[class, confidence]` pairs for identity, hflip, treverse and
    /// hflip+treverse, followed by 1 if accepted at `threshold`, else 0.
    #[wasm_bindgen(js_name = augmentationCheck)]
    pub fn augmentation_check(&self, threshold: f64) -> std::result::Result<Vec<f64>, JsError> {
        let (views, accepted) = self.0.augmentation_check(threshold).map_err(js)?;
        let mut out: Vec<f64> = views.iter().flat_map(|v| [v.class as f64, v.confidence]).collect();
        out.push(if accepted { 1.0 } else { 0.0 });
        Ok(out)
    }
}
