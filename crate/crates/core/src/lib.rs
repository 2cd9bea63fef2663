//! A vision-language-speech encoder-decoder trained with a unified
//! text-completion objective.
//!
//! Image, video and audio inputs are turned into feature sequences by
//! modality encoders, projected into the text embedding space, concatenated
//! with the prompt tokens and run through a joint transformer encoder. A text
//! decoder cross-attends to that fused memory and generates the answer.
//! Every pretraining and downstream task is phrased as "prompt + input →
//! target text".
//!
//! The numeric substrate is a small tape-based autodiff engine ([`tensor`]),
//! generic over `f32` (training) and `f64` (gradient verification).

pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod task;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use task::TaskKind;
