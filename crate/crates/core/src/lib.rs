//! Classify event-camera recordings with frozen vision-language embeddings.
//!
//! The crate is organised along the processing pipeline:
//!
//! * [`events`] and [`synthetic`]: the event data model, EVT1/CSV formats,
//!   augmentations and a deterministic synthetic dataset generator.
//! * [`frame`]: count-based windowing, 2-channel histograms, colourisation
//!   and FRM1/PNG export.
//! * [`embed`]: the EMB1 embedding contract, prompt templates and a seeded
//!   synthetic encoder standing in for the frozen image/text encoders.
//! * [`zeroshot`]: cosine-softmax classification per window, order-invariant
//!   aggregation and logit ensembling with external classifiers.
//! * [`adapter`]: the permutation-equivariant transformer adapter, the MLP
//!   baseline and tuned text weights.
//! * [`train`]: loss, reverse-mode gradients, Adam, the warmup/cosine
//!   schedule, few-shot sampling and the training loop.
//! * [`pseudo`]: augmentation-consistent pseudo-labelling and self-training.

pub mod adapter;
pub mod bench;
pub mod embed;
mod error;
pub mod events;
pub mod frame;
pub mod linalg;
pub mod pseudo;
pub mod synthetic;
pub mod train;
pub mod zeroshot;

mod bytes;

pub use error::{Error, Result};
